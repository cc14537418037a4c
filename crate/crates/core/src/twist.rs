//! Near-integrable twist map on the cylinder and shear estimates.
//!
//! `q̄ = q + g(p) + C ε^k sin(2π q₁)·1`, `p̄ = p + C ε^k cos(2π q₁)·1`, with
//! `g(p) = ω + ε^τ (p + a sin(2π p)/2π)` componentwise. The angle `q` is
//! kept lifted to `ℝ^n`.

use crate::interval::{IMatrix, Interval};
use crate::maps::{MapError, Step};
use crate::window::Rectangle;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

const INVERSE_TOL: f64 = 1e-12;
const INVERSE_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwistError {
    #[error("invalid twist parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("window outside the action range [0,1]^n")]
    WindowOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistMap {
    pub n: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub k: f64,
    /// sup-norm bound of the ε^k error maps
    pub c: f64,
    /// nonlinearity of the frequency map, |a| < 1
    pub a: f64,
    pub omega: Vec<f64>,
}

/// Constants entering the shear estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShearParams {
    pub epsilon: f64,
    pub tau: f64,
    pub k: f64,
    pub t_minus: f64,
    pub t_plus: f64,
}

impl TwistMap {
    pub fn new(n: usize, epsilon: f64, tau: f64, k: f64, c: f64) -> Result<Self, TwistError> {
        if n == 0 {
            return Err(TwistError::Invalid("n must be positive".into()));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(TwistError::Invalid(format!("epsilon {epsilon} not in (0,1)")));
        }
        if !(tau >= 0.0) || !(k >= 0.0) || !(c >= 0.0) {
            return Err(TwistError::Invalid("tau, k, C must be non-negative".into()));
        }
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let omega = (1..=n).map(|j| (j as f64 * phi).fract()).collect();
        Ok(Self { n, epsilon, tau, k, c, a: 0.0, omega })
    }

    pub fn with_nonlinearity(mut self, a: f64) -> Result<Self, TwistError> {
        if !(a.abs() < 1.0) {
            return Err(TwistError::Invalid(format!("nonlinearity {a} must satisfy |a| < 1")));
        }
        self.a = a;
        Ok(self)
    }

    pub fn with_frequency(mut self, omega: Vec<f64>) -> Result<Self, TwistError> {
        if omega.len() != self.n {
            return Err(TwistError::Invalid("frequency vector has wrong length".into()));
        }
        self.omega = omega;
        Ok(self)
    }

    /// Same map with the ε^k error terms removed.
    pub fn unperturbed(&self) -> Self {
        Self { c: 0.0, ..self.clone() }
    }

    pub fn eps_tau(&self) -> f64 {
        self.epsilon.powf(self.tau)
    }

    pub fn eps_k(&self) -> f64 {
        self.epsilon.powf(self.k)
    }

    pub fn g(&self, p: &[f64]) -> Vec<f64> {
        let et = self.eps_tau();
        p.iter()
            .zip(&self.omega)
            .map(|(&p, &w)| w + et * (p + self.a * (TAU * p).sin() / TAU))
            .collect()
    }

    /// Twist bounds `T₋ ε^τ ≤ Dg` and `‖Dg‖ ≤ T₊`, and the quadratic
    /// remainder constant `R` of `g`.
    pub fn shear_params(&self) -> ShearParams {
        ShearParams {
            epsilon: self.epsilon,
            tau: self.tau,
            k: self.k,
            t_minus: 1.0 - self.a.abs(),
            t_plus: self.eps_tau() * (1.0 + self.a.abs()),
        }
    }

    pub fn remainder_constant(&self) -> f64 {
        std::f64::consts::PI * self.a.abs() * self.eps_tau()
    }

    /// Constant multiplying `|N|² ε^k` when two orbits are compared.
    pub fn lemma_constant(&self) -> f64 {
        self.c * (2.0 + self.shear_params().t_plus)
    }

    pub fn step(&self, q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let e = self.c * self.eps_k();
        let (sq, cq) = (TAU * q[0]).sin_cos();
        let g = self.g(p);
        let qn = q.iter().zip(&g).map(|(q, g)| q + g + e * sq).collect();
        let pn = p.iter().map(|p| p + e * cq).collect();
        (qn, pn)
    }

    pub fn step_inverse(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>), MapError> {
        let e = self.c * self.eps_k();
        let mut q0 = q.to_vec();
        for _ in 0..INVERSE_MAX_ITER {
            let (sq, cq) = (TAU * q0[0]).sin_cos();
            let p0: Vec<f64> = p.iter().map(|p| p - e * cq).collect();
            let g = self.g(&p0);
            let next: Vec<f64> = q.iter().zip(&g).map(|(q, g)| q - g - e * sq).collect();
            let diff = next.iter().zip(&q0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            q0 = next;
            if diff <= INVERSE_TOL * (1.0 + q0[0].abs()) {
                let cq = (TAU * q0[0]).cos();
                let p0 = p.iter().map(|p| p - e * cq).collect();
                return Ok((q0, p0));
            }
        }
        Err(MapError::NoConvergence(INVERSE_MAX_ITER))
    }

    /// `f^N(q, p)`; negative `N` iterates the inverse. The action must stay
    /// in `[0,1]^n`.
    pub fn apply(&self, q: &[f64], p: &[f64], n_iter: i64) -> Result<(Vec<f64>, Vec<f64>), MapError> {
        if q.len() != self.n || p.len() != self.n {
            return Err(MapError::DimensionMismatch { expected: self.n, got: q.len().min(p.len()) });
        }
        let mut q = q.to_vec();
        let mut p = p.to_vec();
        check_action(&p)?;
        for _ in 0..n_iter.unsigned_abs() {
            (q, p) = if n_iter > 0 { self.step(&q, &p) } else { self.step_inverse(&q, &p)? };
            check_action(&p)?;
        }
        Ok((q, p))
    }

    // Pieces reused by the normal form and extended system.

    pub(crate) fn jacobian_into(&self, q: &[f64], p: &[f64], j: &mut DMatrix<f64>, off: usize) {
        let n = self.n;
        let e = self.c * self.eps_k();
        let (sq, cq) = (TAU * q[0]).sin_cos();
        let et = self.eps_tau();
        for i in 0..n {
            j[(off + i, off + i)] += 1.0;
            j[(off + i, off)] += e * TAU * cq;
            j[(off + i, off + n + i)] = et * (1.0 + self.a * (TAU * p[i]).cos());
            j[(off + n + i, off)] += -e * TAU * sq;
            j[(off + n + i, off + n + i)] += 1.0;
        }
    }

    pub(crate) fn step_box(&self, q: &[Interval], p: &[Interval]) -> (Vec<Interval>, Vec<Interval>) {
        let e = self.c * self.eps_k();
        let arg = q[0].scale(TAU);
        let (sq, cq) = (arg.sin().scale(e), arg.cos().scale(e));
        let et = self.eps_tau();
        let qn = q
            .iter()
            .zip(p)
            .zip(&self.omega)
            .map(|((q, p), &w)| {
                let g = Interval::point(w)
                    + (*p + p.scale(TAU).sin().scale(self.a / TAU)).scale(et);
                *q + g + sq
            })
            .collect();
        let pn = p.iter().map(|p| *p + cq).collect();
        (qn, pn)
    }

    pub(crate) fn jacobian_box_into(&self, q: &[Interval], p: &[Interval], j: &mut IMatrix, off: usize) {
        let n = self.n;
        let e = self.c * self.eps_k();
        let arg = q[0].scale(TAU);
        let dq = arg.cos().scale(e * TAU);
        let dp = -arg.sin().scale(e * TAU);
        let et = self.eps_tau();
        for i in 0..n {
            let d = j.get(off + i, off + i) + Interval::point(1.0);
            j.set(off + i, off + i, d);
            let v = j.get(off + i, off) + dq;
            j.set(off + i, off, v);
            let dg = (Interval::point(1.0) + p[i].scale(TAU).cos().scale(self.a)).scale(et);
            j.set(off + i, off + n + i, dg);
            let v = j.get(off + n + i, off) + dp;
            j.set(off + n + i, off, v);
            let v = j.get(off + n + i, off + n + i) + Interval::point(1.0);
            j.set(off + n + i, off + n + i, v);
        }
    }
}

impl Step for TwistMap {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        let (q, p) = TwistMap::step(self, &x[..self.n], &x[self.n..]);
        [q, p].concat()
    }

    fn step_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.n, 2 * self.n);
        self.jacobian_into(&x[..self.n], &x[self.n..], &mut j, 0);
        j
    }

    fn step_box(&self, x: &[Interval]) -> Vec<Interval> {
        let (q, p) = TwistMap::step_box(self, &x[..self.n], &x[self.n..]);
        [q, p].concat()
    }

    fn step_jacobian_box(&self, x: &[Interval]) -> IMatrix {
        let mut j = IMatrix::zeros(2 * self.n, 2 * self.n);
        self.jacobian_box_into(&x[..self.n], &x[self.n..], &mut j, 0);
        j
    }
}

fn check_action(p: &[f64]) -> Result<(), MapError> {
    if p.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        Ok(())
    } else {
        Err(MapError::ActionOutOfRange(p.to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShearBounds {
    pub delta_lower: f64,
    pub omega_upper: f64,
}

/// Lower bound on the separation of the images of opposite action faces
/// and upper bound on the diameter of the image of a window, both in the
/// angle direction.
pub fn shear_bounds(sp: &ShearParams, gamma: f64, delta: f64, n_iter: i64, r: f64, c: f64) -> ShearBounds {
    let n = n_iter.unsigned_abs() as f64;
    let et = sp.epsilon.powf(sp.tau);
    let ek = sp.epsilon.powf(sp.k);
    ShearBounds {
        delta_lower: et * n * sp.t_minus * delta - n * r * delta * delta - gamma - c * n * n * ek,
        omega_upper: gamma + n * sp.t_plus * delta + c * n * n * ek,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearMeasurement {
    /// signed separation per action direction
    pub delta_per_axis: Vec<f64>,
    pub delta: f64,
    pub omega: f64,
    /// separation not positive (for example `N = 0`)
    pub degenerate: bool,
}

/// Sampled shear of `f^N` on the window `Q × P` with `grid` points per
/// axis (endpoints included).
pub fn measure_shear(
    map: &TwistMap,
    qw: &Rectangle,
    pw: &Rectangle,
    n_iter: i64,
    grid: usize,
) -> Result<ShearMeasurement, TwistError> {
    let n = map.n;
    if qw.dim() != n || pw.dim() != n {
        return Err(TwistError::Invalid("window dimension differs from n".into()));
    }
    if grid < 2 {
        return Err(TwistError::Invalid("grid needs at least 2 points per axis".into()));
    }
    if pw.lower().iter().any(|&v| v < 0.0) || pw.upper().iter().any(|&v| v > 1.0) {
        return Err(TwistError::WindowOutOfRange);
    }
    let lin = |lo: f64, e: f64, i: usize| lo + e * i as f64 / (grid - 1) as f64;
    let image_q = |q: &[f64], p: &[f64]| -> Result<Vec<f64>, TwistError> {
        Ok(map.apply(q, p, n_iter)?.0)
    };
    let sign = if n_iter >= 0 { 1.0 } else { -1.0 };

    // faces p_j = lower_j and p_j = upper_j
    let mut delta_per_axis = Vec::with_capacity(n);
    let face_dims = 2 * n - 1;
    let face_points = grid.pow(face_dims as u32);
    for j in 0..n {
        let mut ext = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
        for (side, pj) in [pw.lower()[j], pw.upper()[j]].into_iter().enumerate() {
            for idx in 0..face_points {
                let mut rem = idx;
                let mut q = vec![0.0; n];
                let mut p = vec![0.0; n];
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi = lin(qw.lower()[i], qw.edge()[i], rem % grid);
                    rem /= grid;
                }
                for (i, pi) in p.iter_mut().enumerate() {
                    if i == j {
                        *pi = pj;
                    } else {
                        *pi = lin(pw.lower()[i], pw.edge()[i], rem % grid);
                        rem /= grid;
                    }
                }
                let v = image_q(&q, &p)?[j];
                ext[side][0] = ext[side][0].min(v);
                ext[side][1] = ext[side][1].max(v);
            }
        }
        // min over pairs of sign·(q̄¹_j − q̄⁰_j)
        let d = if sign > 0.0 { ext[1][0] - ext[0][1] } else { ext[0][0] - ext[1][1] };
        delta_per_axis.push(d);
    }
    let delta = delta_per_axis.iter().cloned().fold(f64::INFINITY, f64::min);

    // diameter of the image of Q × P
    let points = grid.pow((2 * n) as u32);
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for idx in 0..points {
        let mut rem = idx;
        let mut x = vec![0.0; 2 * n];
        for (i, xi) in x.iter_mut().enumerate() {
            let (l, e) = if i < n { (qw.lower()[i], qw.edge()[i]) } else { (pw.lower()[i - n], pw.edge()[i - n]) };
            *xi = lin(l, e, rem % grid);
            rem /= grid;
        }
        let qn = image_q(&x[..n], &x[n..])?;
        for i in 0..n {
            lo[i] = lo[i].min(qn[i]);
            hi[i] = hi[i].max(qn[i]);
        }
    }
    let omega = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max);
    Ok(ShearMeasurement { delta_per_axis, delta, omega, degenerate: !(delta > 0.0) })
}

/// One audited window: bounds against the measurement for one action axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearAuditRow {
    pub axis_j: usize,
    #[serde(rename = "N")]
    pub n_iter: i64,
    pub gamma: f64,
    pub delta: f64,
    pub delta_lower: f64,
    pub delta_measured: f64,
    pub omega_upper: f64,
    pub omega_measured: f64,
}

impl ShearAuditRow {
    pub fn brackets(&self) -> bool {
        self.delta_measured >= self.delta_lower && self.omega_measured <= self.omega_upper
    }
}

/// Draws `instances` windows `Q × P` and iterate counts with a positive
/// lower bound and measures each on `grid` points per axis. Rows come in
/// instance order, one per action axis.
pub fn shear_audit(map: &TwistMap, seed: u64, instances: usize, grid: usize) -> Result<Vec<ShearAuditRow>, TwistError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let sp = map.shear_params();
    let (r, c) = (map.remainder_constant(), map.lemma_constant());
    let mut drawn = Vec::with_capacity(instances);
    let mut attempts = 0usize;
    while drawn.len() < instances {
        attempts += 1;
        if attempts > 1000 * instances.max(1) {
            return Err(TwistError::Invalid("no window with a positive shear bound found".into()));
        }
        let delta = rng.gen_range(0.005..0.05);
        let n_iter = rng.gen_range(1..=400i64) * if rng.gen_bool(0.5) { 1 } else { -1 };
        let gain = shear_bounds(&sp, 0.0, delta, n_iter, r, c).delta_lower;
        if !(gain > 0.0) {
            continue;
        }
        let gamma = rng.gen_range(0.01..0.9) * gain;
        let q_lo: Vec<f64> = (0..map.n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p_lo: Vec<f64> = (0..map.n).map(|_| rng.gen_range(0.1..0.9 - delta)).collect();
        drawn.push((gamma, delta, n_iter, q_lo, p_lo));
    }
    let mut rows = Vec::with_capacity(instances * map.n);
    for (gamma, delta, n_iter, q_lo, p_lo) in drawn {
        let qw = Rectangle::new(q_lo, vec![gamma; map.n]).map_err(|e| TwistError::Invalid(e.to_string()))?;
        let pw = Rectangle::new(p_lo, vec![delta; map.n]).map_err(|e| TwistError::Invalid(e.to_string()))?;
        let meas = measure_shear(map, &qw, &pw, n_iter, grid)?;
        let b = shear_bounds(&sp, gamma, delta, n_iter, r, c);
        for (j, &d) in meas.delta_per_axis.iter().enumerate() {
            rows.push(ShearAuditRow {
                axis_j: j + 1,
                n_iter,
                gamma,
                delta,
                delta_lower: b.delta_lower,
                delta_measured: d,
                omega_upper: b.omega_upper,
                omega_measured: meas.omega,
            });
        }
    }
    Ok(rows)
}
