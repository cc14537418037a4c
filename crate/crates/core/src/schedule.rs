//! Aspect ratios and iterate counts for a chain of windows along a leaf
//! sequence.
//!
//! Each link `i` has four stages of windows (plain `W_i`, tilde `W̃_i`, hat
//! `Ŵ_i`, prime `W′_i`) with sizes `(α, β, γ, δ)` in the directions
//! `(s, u, q, p)`, and three iterate counts `N_i, K_i, M_i`. The prime stage
//! of link `i` feeds the plain stage of link `i+1` through the jump.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Upper bound for the search over K.
const K_MAX: u64 = 1 << 50;
/// Upper bound for the search over N when no cap is configured.
const N_SEARCH_MAX: u64 = 100_000;
/// Upper end of the order window for γ̂.
pub const GAMMA_HAT_MAX: f64 = 1.0;
/// Lower end of the order window for γ̂.
pub const GAMMA_HAT_MIN: f64 = 0.5;
/// Target value of β̂.
pub const BETA_HAT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub sigma: f64,
    pub tau: f64,
    pub upsilon: f64,
    pub k: f64,
    pub kappa: f64,
    pub rho: f64,
    pub admissible: bool,
}

impl OrderParams {
    pub fn k_min(&self) -> f64 {
        2.0 * (self.rho + self.tau) + 1.0
    }

    /// Exponents of `(α, β, γ, δ)` per stage, plain/tilde/hat/prime.
    pub fn table(&self) -> [[f64; 4]; 4] {
        let (k, r) = (self.kappa, self.rho);
        [
            [0.0, 2.0 * k, k, 2.0 * k],
            [0.0, 2.0 * k, k, r],
            [2.0 * k, 0.0, 0.0, 2.0 * k],
            [2.0 * k, k, k, 2.0 * k],
        ]
    }
}

/// `κ = max{σ, υ}`, `ρ = max{2σ, 2υ, τ}`, admissible iff `k ≥ 2(ρ+τ)+1`.
pub fn compute_orders(sigma: f64, tau: f64, upsilon: f64, k: f64) -> Result<OrderParams, ScheduleError> {
    if [sigma, tau, upsilon, k].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(ScheduleError::Invalid("orders must be non-negative and finite".into()));
    }
    let kappa = sigma.max(upsilon);
    let rho = (2.0 * sigma).max(2.0 * upsilon).max(tau);
    Ok(OrderParams { sigma, tau, upsilon, k, kappa, rho, admissible: k >= 2.0 * (rho + tau) + 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRatios {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl StageRatios {
    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }

    pub fn max(&self) -> f64 {
        self.as_array().into_iter().fold(0.0, f64::max)
    }
}

/// Constants of the model entering the inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub epsilon: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub mu_minus: f64,
    pub mu_plus: f64,
    pub t_minus: f64,
    pub t_plus: f64,
    /// bound on the ε^k terms as they enter the shear estimates
    pub c: f64,
    pub r: f64,
    pub r_prime: f64,
    /// `C1..C8`
    pub glue: [f64; 8],
    pub nu: f64,
    pub nu_prime: f64,
    pub omega_prime: f64,
    pub eta: f64,
    pub slack_floor: f64,
    pub n_plus: u64,
    pub n_minus: u64,
    pub n_cap: Option<u64>,
    pub m_cap: Option<u64>,
}

impl ModelConstants {
    /// Benchmark values: rates 0.5 ± 0.01 and 2 ± 0.04, unit twist,
    /// default jump matrices.
    pub fn benchmark(epsilon: f64) -> Self {
        Self {
            epsilon,
            lambda_minus: 0.49,
            lambda_plus: 0.51,
            mu_minus: 1.96,
            mu_plus: 2.04,
            t_minus: 1.0,
            t_plus: 1.0,
            c: 1e-8,
            r: 0.0,
            r_prime: 0.1,
            glue: [1.0, 0.1, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0],
            nu: 0.1,
            nu_prime: 0.1,
            omega_prime: 0.05,
            eta: 0.1,
            slack_floor: 0.05,
            n_plus: 1,
            n_minus: 1,
            n_cap: None,
            m_cap: None,
        }
    }
}

/// One inequality `lhs > rhs` with its slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub relative: f64,
}

impl Inequality {
    pub fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        let slack = lhs - rhs;
        let scale = lhs.abs().max(rhs.abs());
        let relative = if slack.is_infinite() {
            slack.signum()
        } else if scale > 0.0 {
            slack / scale
        } else {
            0.0
        };
        Self { name: name.to_string(), lhs, rhs, slack, relative }
    }

    pub fn holds(&self) -> bool {
        self.slack > 0.0
    }
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:.6e} > {:.6e} (slack {:.3e})", self.name, self.lhs, self.rhs, self.slack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSchedule {
    pub index: usize,
    pub leaf_p: f64,
    pub n: u64,
    pub k: u64,
    pub m: u64,
    /// `K · ε^{ρ+τ}`
    pub c_k: f64,
    pub plain: StageRatios,
    pub tilde: StageRatios,
    pub hat: StageRatios,
    pub prime: StageRatios,
    /// plain stage of the following link
    pub glued: StageRatios,
    pub inequalities: Vec<Inequality>,
}

impl LinkSchedule {
    pub fn steps(&self) -> u64 {
        self.n + self.k + self.m
    }

    pub fn min_relative_slack(&self) -> f64 {
        self.inequalities.iter().map(|i| i.relative).fold(f64::INFINITY, f64::min)
    }
}

/// θ/ξ data of one window of the extended chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedWindow {
    /// partial sum of iterate counts up to this window
    pub omega: u64,
    /// iterate count to the next window (0 for the last)
    pub n_next: u64,
    pub xi_half_width: f64,
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedSchedule {
    pub ell1: usize,
    pub ell2: usize,
    pub c_ext: f64,
    pub big_l: f64,
    pub c_j: f64,
    pub a_star: f64,
    pub k_cap: f64,
    pub xi_star: Vec<f64>,
    pub omega_theta: Vec<f64>,
    pub windows: Vec<ExtendedWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSchedule {
    pub params: OrderParams,
    pub constants: ModelConstants,
    pub leaf_ps: Vec<f64>,
    pub links: Vec<LinkSchedule>,
    pub total_steps: u64,
    /// exponent of ε in the time for unit drift, `−(ρ+τ+υ)`
    pub predicted_exponent: f64,
    pub notes: Vec<String>,
    pub extended: Option<ExtendedSchedule>,
}

impl ChainSchedule {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        serde_json::from_str(text).map_err(|e| ScheduleError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleWitness {
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
    pub detail: String,
}

impl fmt::Display for InfeasibleWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: needed {:.6e} > {:.6e}", self.inequality, self.lhs, self.rhs)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("infeasible: {0}")]
    Infeasible(InfeasibleWitness),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Ξ_{window} escapes Ξ*: half-width {half_width:.3e} > a* = {a_star:.3e}; minimal admissible L = {minimal_l}")]
    Escape { window: usize, half_width: f64, a_star: f64, minimal_l: u32 },
}

impl ScheduleError {
    pub fn witness(&self) -> Option<&InfeasibleWitness> {
        match self {
            ScheduleError::Infeasible(w) => Some(w),
            _ => None,
        }
    }
}

fn infeasible(name: &str, lhs: f64, rhs: f64, detail: impl Into<String>) -> ScheduleError {
    ScheduleError::Infeasible(InfeasibleWitness {
        inequality: name.to_string(),
        lhs,
        rhs,
        detail: detail.into(),
    })
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    0.5 * (lo + hi)
}

fn admissibility(params: &OrderParams) -> Result<(), ScheduleError> {
    if params.admissible {
        Ok(())
    } else {
        Err(infeasible(
            "k-admissibility",
            params.k,
            params.k_min() - f64::EPSILON,
            format!("k = {} < 2(ρ+τ)+1 = {}", params.k, params.k_min()),
        ))
    }
}

fn validate(c: &ModelConstants) -> Result<(), ScheduleError> {
    let pos = [
        ("epsilon", c.epsilon),
        ("lambda_minus", c.lambda_minus),
        ("mu_minus", c.mu_minus),
        ("T_minus", c.t_minus),
        ("R_prime", c.r_prime),
        ("eta", c.eta),
        ("slack_floor", c.slack_floor),
    ];
    for (name, v) in pos {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ScheduleError::Invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if !(c.epsilon <= 0.5) {
        return Err(ScheduleError::Invalid(format!("epsilon {} not in (0, 0.5]", c.epsilon)));
    }
    if !(c.lambda_plus < 1.0 && c.lambda_minus <= c.lambda_plus) {
        return Err(ScheduleError::Invalid("need λ₋ ≤ λ₊ < 1".into()));
    }
    if !(c.mu_minus > 1.0 && c.mu_minus <= c.mu_plus) {
        return Err(ScheduleError::Invalid("need 1 < μ₋ ≤ μ₊".into()));
    }
    if !(c.c >= 0.0 && c.r >= 0.0 && c.nu > 0.0 && c.nu_prime > 0.0 && c.omega_prime >= 0.0) {
        return Err(ScheduleError::Invalid("C, R ≥ 0 and ν, ν′ > 0, ω′ ≥ 0 required".into()));
    }
    if !(c.slack_floor < 0.2) {
        return Err(ScheduleError::Invalid("slack floor must be below 0.2".into()));
    }
    if c.n_plus == 0 || c.n_minus == 0 {
        return Err(ScheduleError::Invalid("N_plus and N_minus must be positive".into()));
    }
    Ok(())
}

/// The ε-dependent caps on `ζ*` are evaluated at `max(ε, EPSILON_REF)`, so
/// below this value `ζ*, α*, δ*` are constants and the stage ratios scale as
/// pure powers of ε.
pub const EPSILON_REF: f64 = 0.125;

/// Prime stage `α′ = ε^{2κ}α*`, `β′ = γ′ = ε^κ ζ*`, `δ′ = ε^{2κ}δ*` with
/// `ζ*, α*, δ*` at the midpoints of their feasible ranges.
pub fn prescribe_prime(params: &OrderParams, c: &ModelConstants) -> Result<(StageRatios, [f64; 3]), ScheduleError> {
    let [c1, c2, c3, c4, _c5, _c6, c7, c8] = c.glue;
    if !(c4 > 0.0) {
        return Err(infeasible("glue.invertibility", c4, 0.0, "A4 must be invertible (C4 > 0)"));
    }
    if !(c7 > 0.0) {
        return Err(infeasible("glue.invertibility", c7, 0.0, "B3 must be invertible (C7 > 0)"));
    }
    // every cap below loosens as ε decreases
    let e = c.epsilon.max(EPSILON_REF);
    let ek = e.powf(params.kappa);
    let s = c.slack_floor;
    let rp = c.r_prime;
    // gluing positivity: ζ* < min(C4, C7)/R′
    let mut zmax = c4.min(c7) / rp;
    // α of the next plain stage must stay below η: C2 ε^κ ζ + R′ ε^{2κ} ζ² + C1 ε^{σ+2κ} ζ ≤ η/(1+2s)
    let target = c.eta * (1.0 - s) / (1.0 + s);
    let (qa, qb) = (rp * ek * ek, c2 * ek + c1 * e.powf(params.sigma) * ek * ek);
    let z_eta = if qa > 0.0 { (-qb + (qb * qb + 4.0 * qa * target).sqrt()) / (2.0 * qa) } else { target / qb };
    zmax = zmax.min(z_eta);
    // γ′ and 2ω′ must fit under γ̂ < 1
    let room = GAMMA_HAT_MAX / (1.0 + 2.0 * s) - 2.0 * c.omega_prime;
    if !(room > 0.0) {
        return Err(infeasible("step3.gamma", GAMMA_HAT_MAX, 2.0 * c.omega_prime * (1.0 + 2.0 * s), "ω′ too large"));
    }
    zmax = zmax.min(0.5 * room / ek);
    // unstable prime window stays in the unit box
    zmax = zmax.min(2.0 * (1.0 - c.nu_prime) / ek);
    if !(zmax > 0.0) {
        return Err(infeasible("glue.zeta-range", zmax, 0.0, "empty range for ζ*"));
    }
    let zeta = midpoint(0.0, zmax);
    let a_hi = if c3 > 0.0 { zeta.min(c4 / c3 * zeta * (1.0 - rp * zeta / c4)) } else { zeta };
    let d_hi = if c8 > 0.0 { zeta.min(c7 / c8 * zeta * (1.0 - rp * zeta / c7)) } else { zeta };
    if !(a_hi > 0.0) {
        return Err(infeasible("glue.alpha-range", a_hi, 0.0, "empty range for α*"));
    }
    if !(d_hi > 0.0) {
        return Err(infeasible("glue.delta-range", d_hi, 0.0, "empty range for δ*"));
    }
    let alpha = midpoint(0.0, a_hi);
    let delta = midpoint(0.0, d_hi);
    let ek = c.epsilon.powf(params.kappa);
    Ok((
        StageRatios { alpha: ek * ek * alpha, beta: ek * zeta, gamma: ek * zeta, delta: ek * ek * delta },
        [zeta, alpha, delta],
    ))
}

/// Plain stage of the next link from the prime stage of the current one.
pub fn glue_links(prime: &StageRatios, params: &OrderParams, c: &ModelConstants) -> Result<StageRatios, ScheduleError> {
    let [c1, c2, c3, c4, c5, c6, c7, c8] = c.glue;
    if !(c4 > 0.0) || !(c7 > 0.0) {
        return Err(infeasible("glue.invertibility", c4.min(c7), 0.0, "A4 and B3 must be invertible"));
    }
    let e = c.epsilon;
    let es = e.powf(params.sigma);
    let eu = e.powf(params.upsilon);
    let s = c.slack_floor;
    let rz = c.r_prime * prime.max().powi(2);
    let StageRatios { alpha: a, beta: b, gamma: g, delta: d } = *prime;

    let l_alpha = c1 * es * a + c2 * b + rz;
    if !(l_alpha < c.eta * (1.0 - s) / (1.0 + s)) {
        return Err(infeasible("glue.alpha", c.eta, l_alpha, "α_{i+1} cannot exceed its lower bound below η"));
    }
    let u_beta = -c3 * a + c4 * es * b - rz;
    if !(u_beta > 0.0) {
        return Err(infeasible("glue.beta", u_beta, 0.0, "right-hand side not positive"));
    }
    let l_gamma = c5 * g + c6 * eu * d + rz;
    let u_delta = c7 * eu * g - c8 * d - rz;
    if !(u_delta > 0.0) {
        return Err(infeasible("glue.delta", u_delta, 0.0, "right-hand side not positive"));
    }
    Ok(StageRatios {
        alpha: midpoint(l_alpha, c.eta),
        beta: midpoint(0.0, u_beta.min(c.eta)),
        gamma: l_gamma * (1.0 + 2.0 * s),
        delta: midpoint(0.0, u_delta.min(c.eta)),
    })
}

/// Solves Steps 1–3 for one link given its plain stage and the prime stage
/// it must reach.
pub fn solve_link(
    params: &OrderParams,
    c: &ModelConstants,
    plain: &StageRatios,
    prime: &StageRatios,
) -> Result<LinkSchedule, ScheduleError> {
    admissibility(params)?;
    validate(c)?;
    if c.omega_prime >= 0.5 {
        return Err(ScheduleError::Invalid("ω′ must be below 1/2".into()));
    }
    let e = c.epsilon;
    let s = c.slack_floor;
    let grow = 1.0 + 2.0 * s;
    let ek = e.powf(params.k);
    let et = e.powf(params.tau);
    let cc = c.c;

    // Step 1: smallest N with the α-inequality; δ must survive the drift.
    let n_hi = c.n_cap.unwrap_or(N_SEARCH_MAX).max(c.n_plus);
    let alpha_lo = |n: u64| (plain.alpha + 2.0 * c.nu) * c.lambda_plus.powf(n as f64);
    let mut n = c.n_plus;
    while alpha_lo(n) * grow >= 1.0 {
        if n >= n_hi {
            return Err(infeasible("step1.alpha", 1.0, alpha_lo(n) * grow, format!("N capped at {n_hi}")));
        }
        n += 1;
    }
    let nf = n as f64;
    let u1 = plain.delta - cc * nf * ek;
    if !(u1 > 0.0) {
        return Err(infeasible("step1.delta", plain.delta, cc * nf * ek, format!("N = {n}")));
    }
    let tilde = StageRatios {
        alpha: midpoint(alpha_lo(n), 1.0),
        beta: midpoint(0.0, (plain.beta * c.mu_minus.powf(nf)).min(1.0)),
        gamma: (plain.gamma + nf * c.t_plus * plain.delta + cc * nf * nf * ek) * grow,
        delta: midpoint(0.0, u1.min(prime.delta)) * e.powf(params.rho - 2.0 * params.kappa),
    };
    let mut tilde = tilde;
    if c.r > 0.0 {
        tilde.delta = tilde.delta.min(et * c.t_minus / (2.0 * c.r));
    }

    // Step 3: α̂ = α′, β̂ fixed, smallest M with the β-inequality.
    let m_hi = c.m_cap.unwrap_or(N_SEARCH_MAX).max(c.n_minus);
    let beta_lo = |m: u64| (prime.beta + 2.0 * c.nu_prime) * c.mu_minus.powf(-(m as f64));
    let mut m = c.n_minus;
    while beta_lo(m) * grow >= BETA_HAT {
        if m >= m_hi {
            return Err(infeasible(
                "step3.beta",
                BETA_HAT,
                beta_lo(m),
                format!("(β′+2ν′)μ₋^(-M) < β̂ fails with M capped at {m_hi}"),
            ));
        }
        m += 1;
    }
    let mf = m as f64;
    let u3 = prime.delta - cc * mf * ek;
    if !(u3 > 0.0) {
        return Err(infeasible("step3.delta", prime.delta, cc * mf * ek, format!("M = {m}")));
    }
    let l3 = prime.gamma + mf * c.t_plus * prime.delta + cc * mf * mf * ek + 2.0 * c.omega_prime;
    let gamma_hat = GAMMA_HAT_MIN.max(l3 * grow);
    if !(gamma_hat < GAMMA_HAT_MAX) {
        return Err(infeasible("step3.gamma", GAMMA_HAT_MAX, l3 * grow, "γ̂ would reach 1"));
    }
    let alpha_hat = prime.alpha;

    // Step 2: smallest K with the α, β, γ inequalities.
    let ok_ab = |k: f64| {
        tilde.alpha * c.lambda_plus.powf(k) * grow <= alpha_hat
            && tilde.beta * c.mu_minus.powf(k) >= BETA_HAT * grow
    };
    let shear = |k: f64| k * et * c.t_minus * tilde.delta - k * c.r * tilde.delta.powi(2) - tilde.gamma - cc * k * k * ek;
    let ok = |k: u64| ok_ab(k as f64) && shear(k as f64) >= gamma_hat * grow;
    // the shear term is concave in K; past its vertex it only decreases
    let slope = et * c.t_minus * tilde.delta - c.r * tilde.delta.powi(2);
    if !(slope > 0.0) {
        return Err(infeasible("step2.gamma", slope, 0.0, "no shear gain per iterate"));
    }
    let vertex = if cc * ek > 0.0 { slope / (2.0 * cc * ek) } else { f64::INFINITY };
    let mut hi: u64 = 1;
    while !ok(hi) {
        if hi as f64 > vertex || hi >= K_MAX {
            let kv = vertex.min(K_MAX as f64).max(1.0);
            return Err(infeasible(
                "step2.gamma",
                shear(kv),
                gamma_hat * grow,
                format!("maximal shear gain at K ≈ {kv:.3e} is insufficient"),
            ));
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    if lo == 0 {
        lo = 0;
    }
    // invariant: ok(hi), !ok(lo) or lo == 0
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let k = hi;
    let kf = k as f64;
    let d_lo = tilde.delta + cc * kf * ek;
    if !(d_lo * (1.0 + 4.0 * s) <= u3) {
        return Err(infeasible("step2.delta", u3, d_lo * (1.0 + 4.0 * s), format!("K = {k}")));
    }
    let hat = StageRatios { alpha: alpha_hat, beta: BETA_HAT, gamma: gamma_hat, delta: midpoint(d_lo, u3) };

    let glued = glue_links(prime, params, c)?;
    let mut link = LinkSchedule {
        index: 0,
        leaf_p: 0.0,
        n,
        k,
        m,
        c_k: kf * e.powf(params.rho + params.tau),
        plain: *plain,
        tilde,
        hat,
        prime: *prime,
        glued,
        inequalities: vec![],
    };
    link.inequalities = check_link(&link, params, c);
    for ineq in &link.inequalities {
        if !(ineq.relative >= s) {
            return Err(infeasible(&ineq.name, ineq.lhs, ineq.rhs, format!("relative slack {:.3e} below floor {s}", ineq.relative)));
        }
    }
    Ok(link)
}

/// Re-evaluates the 16 inequalities of a link directly from their
/// displayed form.
pub fn check_link(link: &LinkSchedule, params: &OrderParams, c: &ModelConstants) -> Vec<Inequality> {
    let e = c.epsilon;
    let ek = e.powf(params.k);
    let et = e.powf(params.tau);
    let (n, k, m) = (link.n as f64, link.k as f64, link.m as f64);
    let (lp, mm) = (c.lambda_plus, c.mu_minus);
    let cc = c.c;
    let p = &link.plain;
    let t = &link.tilde;
    let h = &link.hat;
    let q = &link.prime;
    let x = &link.glued;
    let [c1, c2, c3, c4, c5, c6, c7, c8] = c.glue;
    let zeta = q.alpha.max(q.beta).max(q.gamma).max(q.delta);
    let rz = c.r_prime * zeta * zeta;
    vec![
        Inequality::new("step1.alpha", t.alpha, (p.alpha + 2.0 * c.nu) * lp.powf(n)),
        Inequality::new("step1.beta", p.beta * mm.powf(n), t.beta),
        Inequality::new("step1.gamma", t.gamma, p.gamma + n * c.t_plus * p.delta + cc * n * n * ek),
        Inequality::new("step1.delta", p.delta - cc * n * ek, t.delta),
        Inequality::new("step2.alpha", h.alpha, t.alpha * lp.powf(k)),
        Inequality::new("step2.beta", t.beta * mm.powf(k), h.beta),
        Inequality::new(
            "step2.gamma",
            et * k * c.t_minus * t.delta - k * c.r * t.delta * t.delta - t.gamma - cc * k * k * ek,
            h.gamma,
        ),
        Inequality::new("step2.delta", h.delta, t.delta + cc * k * ek),
        Inequality::new("step3.alpha", q.alpha * lp.powf(-m), h.alpha),
        Inequality::new("step3.beta", h.beta, (q.beta + 2.0 * c.nu_prime) * mm.powf(-m)),
        Inequality::new(
            "step3.gamma",
            h.gamma,
            q.gamma + m * c.t_plus * q.delta + cc * m * m * ek + 2.0 * c.omega_prime,
        ),
        Inequality::new("step3.delta", q.delta - cc * m * ek, h.delta),
        Inequality::new("glue.alpha", x.alpha, c1 * e.powf(params.sigma) * q.alpha + c2 * q.beta + rz),
        Inequality::new("glue.beta", -c3 * q.alpha + c4 * e.powf(params.sigma) * q.beta - rz, x.beta),
        Inequality::new("glue.gamma", x.gamma, c5 * q.gamma + c6 * e.powf(params.upsilon) * q.delta + rz),
        Inequality::new("glue.delta", c7 * e.powf(params.upsilon) * q.gamma - c8 * q.delta - rz, x.delta),
    ]
}

/// Number of leaves needed to move the action by `drift` with spacing
/// `spacing`.
pub fn leaves_required(drift: f64, spacing: f64) -> usize {
    ((drift / spacing) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Leaves `p*_j = start + j·spacing`.
pub fn leaf_sequence(start: f64, spacing: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| start + j as f64 * spacing).collect()
}

/// Chains links along the leaves `leaf_ps`.
pub fn build_chain(params: &OrderParams, c: &ModelConstants, leaf_ps: &[f64]) -> Result<ChainSchedule, ScheduleError> {
    admissibility(params)?;
    validate(c)?;
    if leaf_ps.is_empty() {
        return Err(ScheduleError::Invalid("at least one leaf is required".into()));
    }
    let mut notes = Vec::new();
    let mut c = c.clone();
    if c.omega_prime >= 0.5 {
        let shifted = 0.5 - c.eta / 4.0;
        notes.push(format!("ω′ = {} shifted to {shifted}", c.omega_prime));
        tracing::info!(from = c.omega_prime, to = shifted, "shifting ω′ below 1/2");
        c.omega_prime = shifted;
    }
    let eu = c.epsilon.powf(params.upsilon);
    for w in leaf_ps.windows(2) {
        let gap = (w[1] - w[0]).abs();
        if !(gap >= 1e-2 * eu && gap <= 1e2 * eu) {
            return Err(ScheduleError::Invalid(format!(
                "leaf spacing {gap} is not of order ε^υ = {eu}"
            )));
        }
    }
    if leaf_ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ScheduleError::Invalid("leaves must lie in [0,1]".into()));
    }
    let (prime, _) = prescribe_prime(params, &c)?;
    let mut plain = glue_links(&prime, params, &c)?;
    let mut links = Vec::with_capacity(leaf_ps.len());
    for (i, &p) in leaf_ps.iter().enumerate() {
        let mut link = solve_link(params, &c, &plain, &prime)?;
        link.index = i;
        link.leaf_p = p;
        plain = link.glued;
        links.push(link);
    }
    let total_steps = links.iter().map(|l| l.steps()).sum();
    Ok(ChainSchedule {
        params: *params,
        constants: c,
        leaf_ps: leaf_ps.to_vec(),
        links,
        total_steps,
        predicted_exponent: -(params.rho + params.tau + params.upsilon),
        notes,
        extended: None,
    })
}

/// Half-widths `C_j Ω_j ε^L` of the ξ-tubes; fails with the minimal
/// admissible `L` when a tube leaves the ball of radius `a*`.
pub fn xi_tube(c_j: f64, omegas: &[u64], epsilon: f64, big_l: f64, a_star: f64) -> Result<Vec<f64>, ScheduleError> {
    let widths: Vec<f64> = omegas.iter().map(|&o| c_j * o as f64 * epsilon.powf(big_l)).collect();
    if let Some((j, &w)) = widths.iter().enumerate().find(|(_, &w)| w > a_star * (1.0 + 1e-12)) {
        let omega_max = omegas.iter().copied().max().unwrap_or(0) as f64;
        let minimal_l = (1..=10_000u32)
            .find(|&l| c_j * omega_max * epsilon.powi(l as i32) <= a_star * (1.0 + 1e-12))
            .unwrap_or(u32::MAX);
        return Err(ScheduleError::Escape { window: j + 1, half_width: w, a_star, minimal_l });
    }
    Ok(widths)
}

/// Parameters of the θ/ξ extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionParams {
    pub ell1: usize,
    pub ell2: usize,
    pub c_ext: f64,
    pub big_l: f64,
    pub xi_star: Vec<f64>,
    pub omega_theta: Vec<f64>,
    pub theta_start: Vec<f64>,
}

/// Tube constant relative to `C_ext`; covers the per-step drift of ξ and
/// the cross-block derivative terms seen by the alignment check.
pub const TUBE_FACTOR: f64 = 16.0;
/// Half-width of the first θ window.
pub const THETA_HALF_WIDTH: f64 = 0.05;

/// Attaches Θ_j and Ξ_j to the windows of the fused chain
/// `W_1, W̃_1, Ŵ_1, W′_1, W̃_2, …, W′_L`.
pub fn extend_chain(
    chain: &ChainSchedule,
    ext: &ExtensionParams,
    a_star: f64,
    k_cap: f64,
) -> Result<ChainSchedule, ScheduleError> {
    let eps = chain.constants.epsilon;
    if ext.xi_star.len() != ext.ell2 || ext.omega_theta.len() != ext.ell1 || ext.theta_start.len() != ext.ell1 {
        return Err(ScheduleError::Invalid("extension vectors have wrong lengths".into()));
    }
    if !(a_star > 0.0) || ext.xi_star.iter().any(|&x| x - a_star <= 0.0 || x + a_star >= 1.0) {
        return Err(ScheduleError::Invalid("Ξ* must lie in the interior of [0,1]^ℓ2".into()));
    }
    let mut counts = Vec::new();
    for l in &chain.links {
        counts.extend([l.n, l.k, l.m]);
    }
    let n_windows = counts.len() + 1;
    if (n_windows as f64) > eps.powf(-k_cap) {
        return Err(ScheduleError::Invalid(format!(
            "chain length {n_windows} exceeds ε^(-K) = {:.3e}",
            eps.powf(-k_cap)
        )));
    }
    let mut omegas = vec![0u64];
    for &n in &counts {
        omegas.push(omegas.last().unwrap() + n);
    }
    let c_j = TUBE_FACTOR * ext.c_ext;
    let widths = xi_tube(c_j, &omegas, eps, ext.big_l, a_star)?;
    let e = ext.c_ext * eps.powf(ext.big_l);
    let mut lo: Vec<f64> = ext.theta_start.iter().map(|t| t - THETA_HALF_WIDTH).collect();
    let mut hi: Vec<f64> = ext.theta_start.iter().map(|t| t + THETA_HALF_WIDTH).collect();
    let mut windows = Vec::with_capacity(n_windows);
    for j in 0..n_windows {
        let n_next = counts.get(j).copied().unwrap_or(0);
        windows.push(ExtendedWindow {
            omega: omegas[j],
            n_next,
            xi_half_width: widths[j],
            theta_lower: lo.clone(),
            theta_upper: hi.clone(),
        });
        let nf = n_next as f64;
        let pad = 1e-6 + 20.0 * nf * nf * e;
        for i in 0..ext.ell1 {
            lo[i] += nf * ext.omega_theta[i] - nf * e - pad;
            hi[i] += nf * ext.omega_theta[i] + nf * e + pad;
        }
    }
    let mut out = chain.clone();
    out.extended = Some(ExtendedSchedule {
        ell1: ext.ell1,
        ell2: ext.ell2,
        c_ext: ext.c_ext,
        big_l: ext.big_l,
        c_j,
        a_star,
        k_cap,
        xi_star: ext.xi_star.clone(),
        omega_theta: ext.omega_theta.clone(),
        windows,
    });
    Ok(out)
}
