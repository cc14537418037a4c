//! Maps that can be checked for alignment: evaluation, Jacobian and an
//! entrywise derivative bound over boxes.

use crate::interval::{boxed, IMatrix, Interval};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state leaves the normal-form box: {0}")]
    OutsideBox(String),
    #[error("point outside jump neighborhood (distance {distance:.3e} > {radius:.3e})")]
    OutsideJumpNeighborhood { distance: f64, radius: f64 },
    #[error("action coordinate leaves [0,1]^n: p = {0:?}")]
    ActionOutOfRange(Vec<f64>),
    #[error("slow variable leaves [0,1]^ℓ2: ξ = {0:?}")]
    SlowOutOfRange(Vec<f64>),
    #[error("inverse iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("non-finite value after {0} steps")]
    NonFinite(usize),
    #[error("invalid map specification: {0}")]
    Spec(String),
}

/// A continuous map between ambient spaces of equal dimension.
pub trait AlignMap: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError>;

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError>;

    /// Bound `B` with `|∂f_i/∂x_j| ≤ B_ij` on the box `[lo, hi]`, or `None`
    /// when no bound is known.
    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>>;

    /// Box enclosing the image of `[lo, hi]`.
    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)>;
}

impl<T: AlignMap + ?Sized> AlignMap for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        (**self).jacobian(x)
    }
    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>> {
        (**self).derivative_bound(lo, hi)
    }
    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        (**self).image_bound(lo, hi)
    }
}

/// `x ↦ A x + b + amp·sin(freq·x)` (componentwise sine, `amp = 0` gives an
/// affine map).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub amp: f64,
    pub freq: f64,
}

impl AffineMap {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self { a, b, amp: 0.0, freq: 0.0 }
    }

    pub fn with_sine(mut self, amp: f64, freq: f64) -> Self {
        self.amp = amp;
        self.freq = freq;
        self
    }

    /// Parse `affine:a11,a12,...;b1,...[;amp,freq]` (row-major matrix).
    pub fn parse(spec: &str) -> Result<Self, MapError> {
        let body = spec
            .strip_prefix("affine:")
            .ok_or_else(|| MapError::Spec(format!("expected 'affine:' prefix in {spec:?}")))?;
        let parts: Vec<&str> = body.split(';').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(MapError::Spec("expected matrix;offset[;amp,freq]".into()));
        }
        let nums = |s: &str| -> Result<Vec<f64>, MapError> {
            s.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| MapError::Spec(format!("{t:?}: {e}"))))
                .collect()
        };
        let m = nums(parts[0])?;
        let b = nums(parts[1])?;
        let d = b.len();
        if m.len() != d * d {
            return Err(MapError::Spec(format!("matrix has {} entries, offset dimension {d}", m.len())));
        }
        let mut map = AffineMap::new(DMatrix::from_row_slice(d, d, &m), DVector::from_vec(b));
        if parts.len() == 3 {
            let s = nums(parts[2])?;
            if s.len() != 2 {
                return Err(MapError::Spec("sine term needs amp,freq".into()));
            }
            map = map.with_sine(s[0], s[1]);
        }
        Ok(map)
    }
}

impl AlignMap for AffineMap {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let v = &self.a * DVector::from_column_slice(x) + &self.b;
        Ok(v.iter().zip(x).map(|(v, x)| v + self.amp * (self.freq * x).sin()).collect())
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let mut j = self.a.clone();
        for (i, xi) in x.iter().enumerate() {
            j[(i, i)] += self.amp * self.freq * (self.freq * xi).cos();
        }
        Ok(j)
    }

    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = self.a.clone();
        for i in 0..self.dim() {
            let c = Interval::hull(self.freq * lo[i], self.freq * hi[i]).cos();
            j[(i, i)] = (Interval::point(j[(i, i)]) + c.scale(self.amp * self.freq)).mag();
        }
        Some(j.abs())
    }

    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let mut out_lo = Vec::with_capacity(d);
        let mut out_hi = Vec::with_capacity(d);
        for i in 0..d {
            let mut acc = Interval::point(self.b[i]);
            for j in 0..d {
                acc = acc + Interval::hull(lo[j], hi[j]).scale(self.a[(i, j)]);
            }
            acc = acc + Interval::new(-self.amp.abs(), self.amp.abs());
            out_lo.push(acc.lo);
            out_hi.push(acc.hi);
        }
        Some((out_lo, out_hi))
    }
}

/// A single step of a dynamical system with interval extensions.
pub trait Step: Send + Sync {
    fn dim(&self) -> usize;
    fn step(&self, x: &[f64]) -> Vec<f64>;
    fn step_jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    fn step_box(&self, x: &[Interval]) -> Vec<Interval>;
    fn step_jacobian_box(&self, x: &[Interval]) -> IMatrix;
}

/// The `count`-fold iterate of a step.
#[derive(Debug, Clone)]
pub struct Iterate<S> {
    pub step: S,
    pub count: usize,
}

impl<S: Step> Iterate<S> {
    pub fn new(step: S, count: usize) -> Self {
        Self { step, count }
    }
}

impl<S: Step> AlignMap for Iterate<S> {
    fn dim(&self) -> usize {
        self.step.dim()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let mut z = x.to_vec();
        for n in 0..self.count {
            z = self.step.step(&z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MapError::NonFinite(n + 1));
            }
        }
        Ok(z)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        check_dim(self.dim(), x)?;
        let d = self.dim();
        let mut z = x.to_vec();
        let mut j = DMatrix::identity(d, d);
        for n in 0..self.count {
            j = self.step.step_jacobian(&z) * j;
            z = self.step.step(&z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MapError::NonFinite(n + 1));
            }
        }
        Ok(j)
    }

    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>> {
        let mut b = boxed(lo, hi);
        let mut j = IMatrix::identity(self.dim());
        for _ in 0..self.count {
            j = self.step.step_jacobian_box(&b).matmul(&j);
            b = self.step.step_box(&b);
        }
        Some(j.mag())
    }

    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut b = boxed(lo, hi);
        for _ in 0..self.count {
            b = self.step.step_box(&b);
        }
        Some((b.iter().map(|i| i.lo).collect(), b.iter().map(|i| i.hi).collect()))
    }
}

/// Composition `maps[n-1] ∘ … ∘ maps[0]`.
#[derive(Clone)]
pub struct Compose {
    pub maps: Vec<Arc<dyn AlignMap>>,
}

impl AlignMap for Compose {
    fn dim(&self) -> usize {
        self.maps.first().map(|m| m.dim()).unwrap_or(0)
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        let mut z = x.to_vec();
        for m in &self.maps {
            z = m.eval(&z)?;
        }
        Ok(z)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        let d = self.dim();
        let mut z = x.to_vec();
        let mut j = DMatrix::identity(d, d);
        for m in &self.maps {
            j = m.jacobian(&z)? * j;
            z = m.eval(&z)?;
        }
        Ok(j)
    }

    fn derivative_bound(&self, lo: &[f64], hi: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.dim();
        let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
        let mut j = DMatrix::identity(d, d);
        for m in &self.maps {
            j = m.derivative_bound(&lo, &hi)? * j;
            let (l, h) = m.image_bound(&lo, &hi)?;
            lo = l;
            hi = h;
        }
        Some(j)
    }

    fn image_bound(&self, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
        for m in &self.maps {
            let (l, h) = m.image_bound(&lo, &hi)?;
            lo = l;
            hi = h;
        }
        Some((lo, hi))
    }
}

/// Wraps a map and hides its derivative bound.
pub struct WithoutBound<M>(pub M);

impl<M: AlignMap> AlignMap for WithoutBound<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, MapError> {
        self.0.eval(x)
    }
    fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, MapError> {
        self.0.jacobian(x)
    }
    fn derivative_bound(&self, _: &[f64], _: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
    fn image_bound(&self, _: &[f64], _: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

pub(crate) fn check_dim(expected: usize, x: &[f64]) -> Result<(), MapError> {
    if x.len() != expected {
        Err(MapError::DimensionMismatch { expected, got: x.len() })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_affine_spec() {
        let m = AffineMap::parse("affine:3;-1").unwrap();
        assert_eq!(m.eval(&[0.5]).unwrap(), vec![0.5]);
        let m = AffineMap::parse("affine:2,0,0,0.5;0,0.25;0.1,3").unwrap();
        assert_eq!(m.dim(), 2);
        assert!(AffineMap::parse("affine:1,2;3").is_err());
        assert!(AffineMap::parse("linear:1;0").is_err());
    }

    #[test]
    fn sine_bound_dominates_jacobian() {
        let m = AffineMap::parse("affine:1.5,0.2,-0.1,0.7;0,0;0.3,4").unwrap();
        let b = m.derivative_bound(&[-0.2, 0.1], &[0.4, 0.6]).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let x = [-0.2 + 0.6 * t, 0.1 + 0.5 * t];
            let j = m.jacobian(&x).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    assert!(j[(r, c)].abs() <= b[(r, c)] + 1e-15);
                }
            }
        }
    }
}
