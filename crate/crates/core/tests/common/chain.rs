//! The sixteen link inequalities, evaluated directly from their written form.

use caw::schedule::{LinkSchedule, ModelConstants, OrderParams};

/// The sixteen inequalities written out from their displayed form, strict.
pub fn displayed(l: &LinkSchedule, o: &OrderParams, c: &ModelConstants) -> Vec<(&'static str, bool)> {
    let e = c.epsilon;
    let (n, k, m) = (l.n as f64, l.k as f64, l.m as f64);
    let ek = e.powf(o.k);
    let (w, t, h, q, x) = (&l.plain, &l.tilde, &l.hat, &l.prime, &l.glued);
    let [c1, c2, c3, c4, c5, c6, c7, c8] = c.glue;
    let zeta = q.alpha.max(q.beta).max(q.gamma).max(q.delta);
    let rz = c.r_prime * zeta * zeta;
    let (es, eu, et) = (e.powf(o.sigma), e.powf(o.upsilon), e.powf(o.tau));
    vec![
        ("step1.alpha", t.alpha > (w.alpha + 2.0 * c.nu) * c.lambda_plus.powf(n)),
        ("step1.beta", w.beta * c.mu_minus.powf(n) > t.beta),
        ("step1.gamma", t.gamma > w.gamma + n * c.t_plus * w.delta + c.c * n * n * ek),
        ("step1.delta", w.delta - c.c * n * ek > t.delta),
        ("step2.alpha", h.alpha > t.alpha * c.lambda_plus.powf(k)),
        ("step2.beta", t.beta * c.mu_minus.powf(k) > h.beta),
        ("step2.gamma", et * k * c.t_minus * t.delta - k * c.r * t.delta * t.delta - t.gamma - c.c * k * k * ek > h.gamma),
        ("step2.delta", h.delta > t.delta + c.c * k * ek),
        ("step3.alpha", q.alpha / c.lambda_plus.powf(m) > h.alpha),
        ("step3.beta", (q.beta + 2.0 * c.nu_prime) / c.mu_minus.powf(m) < h.beta),
        ("step3.gamma", h.gamma > q.gamma + m * c.t_plus * q.delta + c.c * m * m * ek + 2.0 * c.omega_prime),
        ("step3.delta", q.delta - c.c * m * ek > h.delta),
        ("glue.alpha", x.alpha > c1 * es * q.alpha + c2 * q.beta + rz),
        ("glue.beta", x.beta < -c3 * q.alpha + c4 * es * q.beta - rz),
        ("glue.gamma", x.gamma > c5 * q.gamma + c6 * eu * q.delta + rz),
        ("glue.delta", x.delta < c7 * eu * q.gamma - c8 * q.delta - rz),
    ]
}
