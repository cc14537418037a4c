//! Benchmark normal form near a normally hyperbolic cylinder, the
//! homoclinic jump between charts, and the extended system with an extra
//! angle θ and slow variable ξ.
//!
//! State layout: `(s, u, q, p)` with `s, u ∈ ℝ^m` and `q, p ∈ ℝ^n`;
//! the extended system appends `θ ∈ ℝ^ℓ1` and `ξ ∈ ℝ^ℓ2`.

use crate::interval::{boxed, IMatrix, Interval};
use crate::maps::{check_dim, AffineMap, AlignMap, Compose, Iterate, MapError, Step};
use crate::twist::TwistMap;
use nalgebra::{DMatrix, DVector};
use std::f64::consts::TAU;
use std::sync::Arc;
use thiserror::Error;

const INVERSE_TOL: f64 = 1e-12;
const INVERSE_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    Invalid(String),
    #[error("gluing matrix {0} is not invertible")]
    NotInvertible(&'static str),
}

/// `Φ`: hyperbolic block with state-dependent rates times the twist map.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalForm {
    pub m: usize,
    pub a_s: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub delta_s: f64,
    pub delta_u: f64,
    pub twist: TwistMap,
}

impl NormalForm {
    /// Rates `λ₀ = (λ₋+λ₊)/2` and `μ₀ = (μ₋+μ₊)/2`; the nonlinear terms add
    /// at most `δ_s`, `δ_u`, which must keep the rates inside the bands.
    pub fn new(
        m: usize,
        lambda: (f64, f64),
        mu: (f64, f64),
        delta_s: f64,
        delta_u: f64,
        twist: TwistMap,
    ) -> Result<Self, ModelError> {
        let (lm, lp) = lambda;
        let (mm, mp) = mu;
        if m == 0 {
            return Err(ModelError::Invalid("m must be positive".into()));
        }
        if !(0.0 < lm && lm <= lp && lp < 1.0) {
            return Err(ModelError::Invalid(format!("need 0 < λ₋ ≤ λ₊ < 1, got {lm}, {lp}")));
        }
        if !(1.0 < mm && mm <= mp) {
            return Err(ModelError::Invalid(format!("need 1 < μ₋ ≤ μ₊, got {mm}, {mp}")));
        }
        let l0 = 0.5 * (lm + lp);
        let m0 = 0.5 * (mm + mp);
        if !(delta_s >= 0.0 && l0 + delta_s <= lp + 1e-15) {
            return Err(ModelError::Invalid(format!("δ_s = {delta_s} pushes the contraction rate above λ₊")));
        }
        if !(delta_u >= 0.0 && m0 + delta_u <= mp + 1e-15) {
            return Err(ModelError::Invalid(format!("δ_u = {delta_u} pushes the expansion rate above μ₊")));
        }
        Ok(Self {
            m,
            a_s: DMatrix::identity(m, m) * l0,
            a_u: DMatrix::identity(m, m) * m0,
            delta_s,
            delta_u,
            twist,
        })
    }

    pub fn n(&self) -> usize {
        self.twist.n
    }

    pub fn dim(&self) -> usize {
        2 * self.m + 2 * self.twist.n
    }

    fn hyperbolic(&self, s: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ns = norm(s).min(1.0);
        let nu = norm(u).min(1.0);
        let sv = DVector::from_column_slice(s);
        let uv = DVector::from_column_slice(u);
        let s1 = &self.a_s * &sv + &sv * (self.delta_s * nu);
        let u1 = &self.a_u * &uv + &uv * (self.delta_u * ns);
        (s1.iter().copied().collect(), u1.iter().copied().collect())
    }

    fn hyperbolic_inverse(&self, s1: &[f64], u1: &[f64]) -> Result<(Vec<f64>, Vec<f64>), MapError> {
        let m = self.m;
        let sv = DVector::from_column_slice(s1);
        let uv = DVector::from_column_slice(u1);
        let mut s = s1.to_vec();
        let mut u = u1.to_vec();
        for _ in 0..INVERSE_MAX_ITER {
            let ms = &self.a_s + DMatrix::identity(m, m) * (self.delta_s * norm(&u).min(1.0));
            let mu = &self.a_u + DMatrix::identity(m, m) * (self.delta_u * norm(&s).min(1.0));
            let sn = ms.lu().solve(&sv).ok_or(MapError::NoConvergence(0))?;
            let un = mu.lu().solve(&uv).ok_or(MapError::NoConvergence(0))?;
            let diff = sn
                .iter()
                .zip(&s)
                .chain(un.iter().zip(&u))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            s = sn.iter().copied().collect();
            u = un.iter().copied().collect();
            if diff <= INVERSE_TOL * (1.0 + norm(&s).max(norm(&u))) {
                return Ok((s, u));
            }
        }
        Err(MapError::NoConvergence(INVERSE_MAX_ITER))
    }

    /// One forward step without domain checks.
    pub fn step_global(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = (self.m, self.n());
        let (s, u) = self.hyperbolic(&x[..m], &x[m..2 * m]);
        let (q, p) = self.twist.step(&x[2 * m..2 * m + n], &x[2 * m + n..]);
        [s, u, q, p].concat()
    }

    fn step_inverse(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        let (m, n) = (self.m, self.n());
        let (s, u) = self.hyperbolic_inverse(&x[..m], &x[m..2 * m])?;
        let (q, p) = self.twist.step_inverse(&x[2 * m..2 * m + n], &x[2 * m + n..])?;
        Ok([s, u, q, p].concat())
    }

    fn check_domain(&self, x: &[f64]) -> Result<(), MapError> {
        let (m, n) = (self.m, self.n());
        let (ns, nu) = (norm(&x[..m]), norm(&x[m..2 * m]));
        if !(ns <= 1.0 && nu <= 1.0) {
            return Err(MapError::OutsideBox(format!("‖s‖ = {ns:.3e}, ‖u‖ = {nu:.3e}")));
        }
        let p = &x[2 * m + n..];
        if !p.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(MapError::ActionOutOfRange(p.to_vec()));
        }
        Ok(())
    }

    /// `Φ^steps(x)`; the orbit must stay in `‖s‖, ‖u‖ ≤ 1`, `p ∈ [0,1]^n`.
    pub fn apply_phi(&self, x: &[f64], steps: i64) -> Result<Vec<f64>, MapError> {
        check_dim(self.dim(), x)?;
        self.check_domain(x)?;
        let mut z = x.to_vec();
        for _ in 0..steps.unsigned_abs() {
            z = if steps > 0 { self.step_global(&z) } else { self.step_inverse(&z)? };
            self.check_domain(&z)?;
        }
        Ok(z)
    }

    fn hyperbolic_jacobian_into(&self, s: &[f64], u: &[f64], j: &mut DMatrix<f64>) {
        let m = self.m;
        let (ns, nu) = (norm(s), norm(u));
        for r in 0..m {
            for c in 0..m {
                j[(r, c)] = self.a_s[(r, c)];
                j[(m + r, m + c)] = self.a_u[(r, c)];
            }
            j[(r, r)] += self.delta_s * nu.min(1.0);
            j[(m + r, m + r)] += self.delta_u * ns.min(1.0);
        }
        if nu < 1.0 {
            let k = argmax_abs(u);
            for r in 0..m {
                j[(r, m + k)] += self.delta_s * s[r] * u[k].signum();
            }
        }
        if ns < 1.0 {
            let k = argmax_abs(s);
            for r in 0..m {
                j[(m + r, k)] += self.delta_u * u[r] * s[k].signum();
            }
        }
    }

    fn hyperbolic_box(&self, s: &[Interval], u: &[Interval]) -> (Vec<Interval>, Vec<Interval>) {
        let ns = inorm(s).min_const(1.0);
        let nu = inorm(u).min_const(1.0);
        let lin = |a: &DMatrix<f64>, v: &[Interval], r: usize| {
            (0..v.len()).fold(Interval::zero(), |acc, c| acc + v[c].scale(a[(r, c)]))
        };
        let s1 = (0..self.m).map(|r| lin(&self.a_s, s, r) + s[r] * nu.scale(self.delta_s)).collect();
        let u1 = (0..self.m).map(|r| lin(&self.a_u, u, r) + u[r] * ns.scale(self.delta_u)).collect();
        (s1, u1)
    }

    fn hyperbolic_jacobian_box_into(&self, s: &[Interval], u: &[Interval], j: &mut IMatrix) {
        let m = self.m;
        let ns = inorm(s);
        let nu = inorm(u);
        for r in 0..m {
            for c in 0..m {
                j.set(r, c, Interval::point(self.a_s[(r, c)]));
                j.set(m + r, m + c, Interval::point(self.a_u[(r, c)]));
            }
            let v = j.get(r, r) + nu.min_const(1.0).scale(self.delta_s);
            j.set(r, r, v);
            let v = j.get(m + r, m + r) + ns.min_const(1.0).scale(self.delta_u);
            j.set(m + r, m + r, v);
        }
        let dnorm = |v: &[Interval], total: Interval, k: usize| -> Interval {
            if total.lo >= 1.0 {
                return Interval::zero();
            }
            let sgn = if v[k].lo > 0.0 {
                Interval::point(1.0)
            } else if v[k].hi < 0.0 {
                Interval::point(-1.0)
            } else {
                Interval::new(-1.0, 1.0)
            };
            // for m > 1 the coordinate need not be the maximizer
            if v.len() == 1 { sgn } else { Interval::new(sgn.lo.min(0.0), sgn.hi.max(0.0)) }
        };
        for k in 0..m {
            let du = dnorm(u, nu, k);
            let ds = dnorm(s, ns, k);
            for r in 0..m {
                let v = j.get(r, m + k) + s[r] * du.scale(self.delta_s);
                j.set(r, m + k, v);
                let v = j.get(m + r, k) + u[r] * ds.scale(self.delta_u);
                j.set(m + r, k, v);
            }
        }
    }
}

impl Step for NormalForm {
    fn dim(&self) -> usize {
        NormalForm::dim(self)
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        self.step_global(x)
    }

    fn step_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (m, n) = (self.m, self.n());
        let mut j = DMatrix::zeros(self.dim(), self.dim());
        self.hyperbolic_jacobian_into(&x[..m], &x[m..2 * m], &mut j);
        self.twist.jacobian_into(&x[2 * m..2 * m + n], &x[2 * m + n..], &mut j, 2 * m);
        j
    }

    fn step_box(&self, x: &[Interval]) -> Vec<Interval> {
        let (m, n) = (self.m, self.n());
        let (s, u) = self.hyperbolic_box(&x[..m], &x[m..2 * m]);
        let (q, p) = self.twist.step_box(&x[2 * m..2 * m + n], &x[2 * m + n..]);
        [s, u, q, p].concat()
    }

    fn step_jacobian_box(&self, x: &[Interval]) -> IMatrix {
        let (m, n) = (self.m, self.n());
        let mut j = IMatrix::zeros(self.dim(), self.dim());
        self.hyperbolic_jacobian_box_into(&x[..m], &x[m..2 * m], &mut j);
        self.twist.jacobian_box_into(&x[2 * m..2 * m + n], &x[2 * m + n..], &mut j, 2 * m);
        j
    }
}

/// The blocks of the jump derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct GlueMatrices {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub a3: DMatrix<f64>,
    pub a4: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub b3: DMatrix<f64>,
    pub b4: DMatrix<f64>,
}

impl GlueMatrices {
    pub fn default_for(m: usize, n: usize) -> Self {
        let im = DMatrix::identity(m, m);
        let in_ = DMatrix::identity(n, n);
        Self {
            a1: im.clone(),
            a2: &im * 0.1,
            a3: &im * 0.1,
            a4: im,
            b1: in_.clone(),
            b2: in_.clone(),
            b3: in_.clone(),
            b4: in_,
        }
    }

    /// `Dφ = diag(A, B)` with `A = [[ε^σ A1, A2], [A3, ε^σ A4]]` and
    /// `B = [[B1, ε^υ B2], [ε^υ B3, B4]]`.
    pub fn derivative(&self, epsilon: f64, sigma: f64, upsilon: f64) -> DMatrix<f64> {
        let m = self.a1.nrows();
        let n = self.b1.nrows();
        let es = epsilon.powf(sigma);
        let eu = epsilon.powf(upsilon);
        let d = 2 * m + 2 * n;
        let mut out = DMatrix::zeros(d, d);
        let mut put = |r0: usize, c0: usize, blk: &DMatrix<f64>, f: f64| {
            for r in 0..blk.nrows() {
                for c in 0..blk.ncols() {
                    out[(r0 + r, c0 + c)] = f * blk[(r, c)];
                }
            }
        };
        put(0, 0, &self.a1, es);
        put(0, m, &self.a2, 1.0);
        put(m, 0, &self.a3, 1.0);
        put(m, m, &self.a4, es);
        put(2 * m, 2 * m, &self.b1, 1.0);
        put(2 * m, 2 * m + n, &self.b2, eu);
        put(2 * m + n, 2 * m, &self.b3, eu);
        put(2 * m + n, 2 * m + n, &self.b4, 1.0);
        out
    }

    /// `C1..C8`: operator norms of A1, A2, A3, B1, B2, B4 and coercivity
    /// constants of A4, B3 in the max norm.
    pub fn constants(&self) -> Result<[f64; 8], ModelError> {
        for (name, mat) in [("A1", &self.a1), ("A4", &self.a4), ("B2", &self.b2), ("B3", &self.b3)] {
            if mat.clone().full_piv_lu().try_inverse().is_none() {
                return Err(ModelError::NotInvertible(name));
            }
        }
        let coercive = |m: &DMatrix<f64>| 1.0 / op_norm(&m.clone().full_piv_lu().try_inverse().unwrap());
        Ok([
            op_norm(&self.a1),
            op_norm(&self.a2),
            op_norm(&self.a3),
            coercive(&self.a4),
            op_norm(&self.b1),
            op_norm(&self.b2),
            coercive(&self.b3),
            op_norm(&self.b4),
        ])
    }
}

/// `φ(x) = x⁺ + Dφ (x − x⁻) + rem(x − x⁻)` with
/// `rem_j(d) = R′/2 · d_{j+1}²` (indices cyclic), so `‖rem‖ ≤ R′/2 ‖d‖²`.
/// Trailing `extra` coordinates are passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct HomoclinicJump {
    pub derivative: DMatrix<f64>,
    pub r_prime: f64,
    pub center_minus: Vec<f64>,
    pub center_plus: Vec<f64>,
    pub radius: f64,
    pub extra: usize,
}

impl HomoclinicJump {
    pub fn core_dim(&self) -> usize {
        self.center_minus.len()
    }

    /// Jump with the neighborhood check applied.
    pub fn apply_checked(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        let d = self.core_dim();
        let dist = x[..d]
            .iter()
            .zip(&self.center_minus)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dist > self.radius {
            return Err(MapError::OutsideJumpNeighborhood { distance: dist, radius: self.radius });
        }
        self.eval(x)
    }
}

impl AlignMap for HomoclinicJump {
    fn dim(&self) -> usize {
        self.core_dim() + self.extra
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let d = self.core_dim();
        let dv: Vec<f64> = x[..d].iter().zip(&self.center_minus).map(|(a, b)| a - b).collect();
        let lin = &self.derivative * DVector::from_column_slice(&dv);
        let mut out: Vec<f64> = (0..d)
            .map(|j| self.center_plus[j] + lin[j] + 0.5 * self.r_prime * dv[(j + 1) % d].powi(2))
            .collect();
        out.extend_from_slice(&x[d..]);
        Ok(out)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let d = self.core_dim();
        let mut j = DMatrix::identity(self.dim(), self.dim());
        for r in 0..d {
            for c in 0..d {
                j[(r, c)] = self.derivative[(r, c)];
            }
            let c = (r + 1) % d;
            j[(r, c)] += self.r_prime * (x[c] - self.center_minus[c]);
        }
        Ok(j)
    }

    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.core_dim();
        let mut j = DMatrix::identity(self.dim(), self.dim());
        for r in 0..d {
            for c in 0..d {
                j[(r, c)] = self.derivative[(r, c)];
            }
            let c = (r + 1) % d;
            let dc = Interval::hull(lo[c], hi[c]) - Interval::point(self.center_minus[c]);
            j[(r, c)] = (Interval::point(j[(r, c)]) + dc.scale(self.r_prime)).mag();
        }
        Some(j.abs())
    }

    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.core_dim();
        let b = boxed(lo, hi);
        let dv: Vec<Interval> =
            (0..d).map(|i| b[i] - Interval::point(self.center_minus[i])).collect();
        let mut out = Vec::with_capacity(self.dim());
        for r in 0..d {
            let mut acc = Interval::point(self.center_plus[r]);
            for c in 0..d {
                acc = acc + dv[c].scale(self.derivative[(r, c)]);
            }
            let sq = dv[(r + 1) % d].abs();
            acc = acc + (sq * sq).scale(0.5 * self.r_prime);
            out.push(acc);
        }
        out.extend_from_slice(&b[d..]);
        Some((out.iter().map(|i| i.lo).collect(), out.iter().map(|i| i.hi).collect()))
    }
}

/// `Ψ(z, θ, ξ)`: the normal form weakly coupled to an extra angle θ and a
/// slow variable ξ, all couplings of size `C_ext ε^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedMap {
    pub base: NormalForm,
    pub ell1: usize,
    pub ell2: usize,
    pub c_ext: f64,
    pub big_l: f64,
    pub omega_theta: Vec<f64>,
}

impl ExtendedMap {
    pub fn new(base: NormalForm, ell1: usize, ell2: usize, c_ext: f64, big_l: f64) -> Result<Self, ModelError> {
        if ell1 == 0 || ell2 == 0 {
            return Err(ModelError::Invalid("ℓ1 and ℓ2 must be positive".into()));
        }
        if !(c_ext >= 0.0) || !(big_l > 0.0) {
            return Err(ModelError::Invalid("need C_ext ≥ 0 and L > 0".into()));
        }
        let omega_theta = (1..=ell1).map(|j| (j as f64 * std::f64::consts::SQRT_2).fract()).collect();
        Ok(Self { base, ell1, ell2, c_ext, big_l, omega_theta })
    }

    pub fn coupling(&self) -> f64 {
        self.c_ext * self.base.twist.epsilon.powf(self.big_l)
    }

    pub fn dim(&self) -> usize {
        self.base.dim() + self.ell1 + self.ell2
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let (m, n) = (self.base.m, self.base.n());
        (2 * m, 2 * m + n, 2 * m + 2 * n, 2 * m + 2 * n + self.ell1)
    }
}

impl ExtendedMap {
    /// `Ψ^steps(x)` on the lifted cover; ξ must stay in `[0,1]^ℓ2`.
    pub fn apply_psi(&self, x: &[f64], steps: u64) -> Result<Vec<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let ox = self.dim() - self.ell2;
        let check = |z: &[f64]| {
            if z[ox..].iter().all(|v| (0.0..=1.0).contains(v)) {
                Ok(())
            } else {
                Err(MapError::SlowOutOfRange(z[ox..].to_vec()))
            }
        };
        check(x)?;
        let mut z = x.to_vec();
        for t in 0..steps {
            z = Step::step(self, &z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MapError::NonFinite(t as usize + 1));
            }
            check(&z)?;
        }
        Ok(z)
    }
}

/// Iterate counts and leaf offsets of one homoclinic excursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transit {
    pub n_plus: usize,
    pub n_minus: usize,
    /// stable-leaf distance of the plus-chart anchor
    pub nu: f64,
    /// unstable-leaf distance of the minus-chart anchor
    pub nu_prime: f64,
    /// angle offset of the minus-chart anchor
    pub omega_prime: f64,
}

/// Chart transits around a jump. `minus` takes base coordinates through
/// `Φ^{N₋}` and re-anchors them at `(0, ν′, ω′, 0)`; `plus` shifts
/// plus-chart coordinates by `(ν, 0, 0, 0)` and applies `Φ^{N₊}`.
#[derive(Clone)]
pub struct Excursion {
    pub minus: Compose,
    pub jump: HomoclinicJump,
    pub plus: Compose,
}

impl Excursion {
    /// `plus ∘ jump ∘ minus`.
    pub fn full(&self) -> Compose {
        Compose {
            maps: vec![Arc::new(self.minus.clone()), Arc::new(self.jump.clone()), Arc::new(self.plus.clone())],
        }
    }
}

pub fn transit_maps(jump: &HomoclinicJump, system: &NormalForm, transit: &Transit) -> Result<Excursion, ModelError> {
    let d = system.dim();
    if jump.core_dim() != d || jump.extra != 0 {
        return Err(ModelError::Invalid(format!("jump acts on {} coordinates, system has {d}", jump.dim())));
    }
    let (m, n) = (system.m, system.n());
    let shift = |v: Vec<f64>| -> Arc<dyn AlignMap> {
        Arc::new(AffineMap::new(DMatrix::identity(d, d), DVector::from_vec(v)))
    };
    let mut a_minus = vec![0.0; d];
    a_minus[m..2 * m].fill(-transit.nu_prime);
    a_minus[2 * m..2 * m + n].fill(-transit.omega_prime);
    let mut a_plus = vec![0.0; d];
    a_plus[..m].fill(transit.nu);
    let minus = Compose { maps: vec![Arc::new(Iterate::new(system.clone(), transit.n_minus)), shift(a_minus)] };
    let plus = Compose { maps: vec![shift(a_plus), Arc::new(Iterate::new(system.clone(), transit.n_plus))] };
    Ok(Excursion { minus, jump: jump.clone(), plus })
}

impl Step for ExtendedMap {
    fn dim(&self) -> usize {
        ExtendedMap::dim(self)
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        let (oq, op, ot, ox) = self.offsets();
        let e = self.coupling();
        let q1 = x[oq];
        let t1 = x[ot];
        let x1 = x[ox];
        let mut z = self.base.step_global(&x[..ot]);
        for v in &mut z[oq..op] {
            *v += e * (TAU * x1).sin();
        }
        for v in &mut z[op..ot] {
            *v += e * (TAU * t1).cos();
        }
        let theta = (0..self.ell1).map(|i| x[ot + i] + self.omega_theta[i] + e * (TAU * q1).sin());
        let xi = (0..self.ell2).map(|i| x[ox + i] + e * (TAU * (t1 + q1)).sin());
        z.extend(theta);
        z.extend(xi);
        z
    }

    fn step_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (oq, op, ot, ox) = self.offsets();
        let d = self.dim();
        let e = self.coupling();
        let mut j = DMatrix::identity(d, d);
        let jb = Step::step_jacobian(&self.base, &x[..ot]);
        j.view_mut((0, 0), (ot, ot)).copy_from(&jb);
        let (q1, t1, x1) = (x[oq], x[ot], x[ox]);
        for r in oq..op {
            j[(r, ox)] += e * TAU * (TAU * x1).cos();
        }
        for r in op..ot {
            j[(r, ot)] += -e * TAU * (TAU * t1).sin();
        }
        for r in ot..ox {
            j[(r, oq)] += e * TAU * (TAU * q1).cos();
        }
        let c = e * TAU * (TAU * (t1 + q1)).cos();
        for r in ox..d {
            j[(r, ot)] += c;
            j[(r, oq)] += c;
        }
        j
    }

    fn step_box(&self, x: &[Interval]) -> Vec<Interval> {
        let (oq, op, ot, ox) = self.offsets();
        let e = self.coupling();
        let (q1, t1, x1) = (x[oq], x[ot], x[ox]);
        let mut z = Step::step_box(&self.base, &x[..ot]);
        let sx = x1.scale(TAU).sin().scale(e);
        let ct = t1.scale(TAU).cos().scale(e);
        for v in &mut z[oq..op] {
            *v = *v + sx;
        }
        for v in &mut z[op..ot] {
            *v = *v + ct;
        }
        let sq = q1.scale(TAU).sin().scale(e);
        let stq = (t1 + q1).scale(TAU).sin().scale(e);
        for i in 0..self.ell1 {
            z.push(x[ot + i] + Interval::point(self.omega_theta[i]) + sq);
        }
        for i in 0..self.ell2 {
            z.push(x[ox + i] + stq);
        }
        z
    }

    fn step_jacobian_box(&self, x: &[Interval]) -> IMatrix {
        let (oq, op, ot, ox) = self.offsets();
        let d = self.dim();
        let e = self.coupling();
        let mut j = IMatrix::identity(d);
        let jb = Step::step_jacobian_box(&self.base, &x[..ot]);
        for r in 0..ot {
            for c in 0..ot {
                j.set(r, c, jb.get(r, c));
            }
        }
        let (q1, t1, x1) = (x[oq], x[ot], x[ox]);
        let dx = x1.scale(TAU).cos().scale(e * TAU);
        let dt = -t1.scale(TAU).sin().scale(e * TAU);
        let dq = q1.scale(TAU).cos().scale(e * TAU);
        let dtq = (t1 + q1).scale(TAU).cos().scale(e * TAU);
        for r in oq..op {
            j.set(r, ox, j.get(r, ox) + dx);
        }
        for r in op..ot {
            j.set(r, ot, j.get(r, ot) + dt);
        }
        for r in ot..ox {
            j.set(r, oq, j.get(r, oq) + dq);
        }
        for r in ox..d {
            j.set(r, ot, j.get(r, ot) + dtq);
            j.set(r, oq, j.get(r, oq) + dtq);
        }
        j
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    k
}

fn inorm(v: &[Interval]) -> Interval {
    v.iter().fold(Interval::zero(), |acc, x| acc.max(x.abs()))
}

/// Max-norm operator norm (largest absolute row sum).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}
