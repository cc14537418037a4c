//! Minimal interval arithmetic for derivative enclosures.
//!
//! Rounding is to nearest; enclosures are widened by a relative pad after
//! each transcendental evaluation, which is enough for the Lipschitz
//! margins used here but is not a verified-arithmetic substitute.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

const PAD: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi || lo.is_nan() || hi.is_nan());
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn zero() -> Self {
        Self::point(0.0)
    }

    pub fn hull(a: f64, b: f64) -> Self {
        Self { lo: a.min(b), hi: a.max(b) }
    }

    pub fn mag(self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn mid(self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(self) -> f64 {
        self.hi - self.lo
    }

    fn padded(self) -> Self {
        let p = PAD * self.mag() + f64::MIN_POSITIVE;
        Self { lo: self.lo - p, hi: self.hi + p }
    }

    pub fn scale(self, c: f64) -> Self {
        Self::hull(self.lo * c, self.hi * c)
    }

    pub fn abs(self) -> Self {
        if self.lo >= 0.0 {
            self
        } else if self.hi <= 0.0 {
            -self
        } else {
            Self::new(0.0, self.mag())
        }
    }

    pub fn min_const(self, c: f64) -> Self {
        Self::new(self.lo.min(c), self.hi.min(c))
    }

    pub fn max(self, o: Self) -> Self {
        Self::new(self.lo.max(o.lo), self.hi.max(o.hi))
    }

    /// Enclosure of `sin` on the interval.
    pub fn sin(self) -> Self {
        (self - Interval::point(FRAC_PI_2)).cos()
    }

    /// Enclosure of `cos` on the interval.
    pub fn cos(self) -> Self {
        if !(self.width() < TAU) {
            return Self::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.cos(), self.hi.cos());
        let mut lo = a.min(b);
        let mut hi = a.max(b);
        // maxima of cos at 2kπ, minima at (2k+1)π
        let k_max = (self.lo / TAU).ceil();
        if k_max * TAU <= self.hi {
            hi = 1.0;
        }
        let k_min = ((self.lo - PI) / TAU).ceil();
        if k_min * TAU + PI <= self.hi {
            lo = -1.0;
        }
        Self::new(lo, hi).padded().clamp_unit()
    }

    fn clamp_unit(self) -> Self {
        Self::new(self.lo.max(-1.0), self.hi.min(1.0))
    }

    pub fn contains(self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, o: Interval) -> Interval {
        Interval::new(self.lo - o.hi, self.hi - o.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, o: Interval) -> Interval {
        if self.lo == self.hi && o.lo == o.hi {
            return Interval::point(self.lo * o.lo);
        }
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // 0 * inf products are treated as 0
        Interval::new(if lo.is_nan() { 0.0 } else { lo }, if hi.is_nan() { 0.0 } else { hi })
    }
}

/// Dense interval matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Interval>,
}

impl IMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Interval::zero(); rows * cols] }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m.set(i, i, Interval::point(1.0));
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> Interval {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Interval) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, o: &IMatrix) -> IMatrix {
        assert_eq!(self.cols, o.rows);
        let mut out = IMatrix::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.lo == 0.0 && a.hi == 0.0 {
                    continue;
                }
                for j in 0..o.cols {
                    let b = o.get(k, j);
                    if b.lo == 0.0 && b.hi == 0.0 {
                        continue;
                    }
                    let idx = i * o.cols + j;
                    out.data[idx] = out.data[idx] + a * b;
                }
            }
        }
        out
    }

    /// Entrywise magnitude.
    pub fn mag(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).mag())
    }
}

/// Interval box from corner vectors.
pub fn boxed(lo: &[f64], hi: &[f64]) -> Vec<Interval> {
    lo.iter().zip(hi).map(|(&a, &b)| Interval::hull(a, b)).collect()
}
