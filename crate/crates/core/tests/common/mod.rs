//! Shared fixtures: random alignment instances and a dense-grid oracle that
//! checks the covering conditions point by point along the homotopy.

#![allow(dead_code)]

pub mod chain;

use caw::{AffineChart, AffineMap, AlignMap, Axis, Rectangle, Window};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// How an instance was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Aligned,
    /// one exit direction contracts
    Contracting,
    /// one entry direction expands past the target
    Overshoot,
    /// the exit image is shifted beyond the target
    Displaced,
}

impl Kind {
    pub fn aligned(self) -> bool {
        self == Kind::Aligned
    }
}

pub struct Instance {
    pub w1: Window,
    pub w2: Window,
    pub map: AffineMap,
    pub kind: Kind,
}

fn random_window<R: Rng>(rng: &mut R, m1: usize, m2: usize) -> Window {
    let d = m1 + m2;
    let lower: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let edge: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.5)).collect();
    loop {
        let mut lin = DMatrix::<f64>::identity(d, d);
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    lin[(i, j)] = rng.gen_range(-0.2..0.2);
                }
            }
        }
        let offset = DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5));
        if lin.determinant().abs() < 0.5 {
            continue;
        }
        let chart = AffineChart::new(lin, offset).unwrap();
        let mut labels = vec![Axis::U; m1];
        labels.extend(vec![Axis::S; m2]);
        return Window::new(
            Rectangle::new(lower[..m1].to_vec(), edge[..m1].to_vec()).unwrap(),
            Rectangle::new(lower[m1..].to_vec(), edge[m1..].to_vec()).unwrap(),
            chart,
            labels,
        )
        .unwrap();
    }
}

/// Ambient map realizing `G(y) = 0.5 + D(y − 0.5) + shift` between the
/// normalized coordinates of `w1` and `w2`, plus an ambient sine of
/// amplitude `amp`.
pub fn conjugated(w1: &Window, w2: &Window, d: &DMatrix<f64>, shift: &[f64], amp: f64, freq: f64) -> AffineMap {
    let n = w1.dim();
    let m1inv = w1.normalized_inverse();
    let m2 = w2.normalized_linear();
    let b1 = DVector::from_vec(w1.to_ambient(&vec![0.0; n]));
    let b2 = DVector::from_vec(w2.to_ambient(&vec![0.0; n]));
    let half = DVector::from_element(n, 0.5);
    let a = &m2 * d * &m1inv;
    let c = &half + DVector::from_column_slice(shift) - d * &half - d * &m1inv * &b1;
    let b = &m2 * c + b2;
    AffineMap::new(a, b).with_sine(amp, freq)
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    const SHAPES: [(usize, usize); 8] = [(1, 0), (0, 1), (1, 1), (1, 1), (1, 1), (1, 1), (2, 1), (1, 2)];
    let (m1, m2) = SHAPES[rng.gen_range(0..SHAPES.len())];
    let d = m1 + m2;
    let kinds: Vec<Kind> = match (m1, m2) {
        (_, 0) => vec![Kind::Aligned, Kind::Contracting, Kind::Displaced],
        (0, _) => vec![Kind::Aligned, Kind::Overshoot],
        _ => vec![Kind::Aligned, Kind::Aligned, Kind::Contracting, Kind::Overshoot, Kind::Displaced],
    };
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let w1 = random_window(rng, m1, m2);
    let w2 = random_window(rng, m1, m2);
    let mut g = DMatrix::<f64>::zeros(d, d);
    let mut shift = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            if i != j {
                g[(i, j)] = rng.gen_range(-0.03..0.03);
            }
        }
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if i < m1 {
            g[(i, i)] = sign * rng.gen_range(2.6..4.0);
            shift[i] = rng.gen_range(-0.2..0.2);
        } else {
            g[(i, i)] = rng.gen_range(-0.5..0.5);
            shift[i] = rng.gen_range(-0.05..0.05);
        }
    }
    match kind {
        Kind::Aligned => {}
        Kind::Contracting => {
            let j = rng.gen_range(0..m1);
            g[(j, j)] = rng.gen_range(0.2..0.8) * g[(j, j)].signum();
        }
        Kind::Overshoot => {
            let j = m1 + rng.gen_range(0..m2);
            g[(j, j)] = rng.gen_range(1.4..2.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        Kind::Displaced => {
            let j = rng.gen_range(0..m1);
            shift[j] = rng.gen_range(2.5..3.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    let ninv = w2.normalized_inverse();
    let ninv_norm = (0..d).map(|i| ninv.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let amp = rng.gen_range(0.0..0.01) / ninv_norm;
    let freq = rng.gen_range(1.0..5.0);
    let map = conjugated(&w1, &w2, &g, &shift, amp, freq);
    Instance { w1, w2, map, kind }
}

/// Exit block of the normalized derivative at the centre, by central
/// differences.
fn exit_block(w1: &Window, w2: &Window, f: &dyn Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let d = w1.dim();
    let m1 = w1.exit_dim();
    let h = 1e-6;
    let yhat = |y: &[f64]| w2.to_normalized(&f(&w1.to_ambient(y)))[..m1].to_vec();
    let mut a = DMatrix::zeros(m1, m1);
    for k in 0..m1 {
        let mut yp = vec![0.5; d];
        let mut ym = vec![0.5; d];
        yp[k] += h;
        ym[k] -= h;
        let (fp, fm) = (yhat(&yp), yhat(&ym));
        for i in 0..m1 {
            a[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    a
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

fn for_each_point(dims: &[Option<f64>], n: usize, mut visit: impl FnMut(&[f64]) -> bool) -> bool {
    let g = grid(n);
    let free: Vec<usize> = (0..dims.len()).filter(|&i| dims[i].is_none()).collect();
    let total = n.pow(free.len() as u32);
    let mut y: Vec<f64> = dims.iter().map(|v| v.unwrap_or(0.0)).collect();
    for idx in 0..total {
        let mut rem = idx;
        for &i in &free {
            y[i] = g[rem % n];
            rem /= n;
        }
        if !visit(&y) {
            return false;
        }
    }
    true
}

/// Why the oracle rejected an instance.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleFailure {
    Degree,
    ExitFace { t: f64, y: Vec<f64> },
    EntryAvoidance { t: f64, y: Vec<f64> },
}

/// Dense check of the covering conditions for `f` along the straight-line
/// homotopy to `L(y) = (0.5 + A(y_exit − 0.5), 0.5)`, with `density` grid
/// points per axis:
///
/// * `L` maps the boundary of the exit cube outside the cube;
/// * exit-face points never land in the target at any homotopy time;
/// * points that land with exit coordinates in `[0,1]` have entry
///   coordinates strictly inside `(0,1)`.
pub fn brute_force(w1: &Window, w2: &Window, f: &dyn Fn(&[f64]) -> Vec<f64>, density: usize) -> Result<(), OracleFailure> {
    brute_force_against(w1, w2, f, f, density)
}

/// As [`brute_force`], with `A` taken from `reference` instead of `f`. A
/// perturbed map is checked along the homotopy to the unperturbed
/// linearization this way.
pub fn brute_force_against(
    w1: &Window,
    w2: &Window,
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    reference: &dyn Fn(&[f64]) -> Vec<f64>,
    density: usize,
) -> Result<(), OracleFailure> {
    let d = w1.dim();
    let m1 = w1.exit_dim();
    let a = exit_block(w1, w2, reference);
    let lin = |y: &[f64]| -> Vec<f64> {
        let mut l = vec![0.5; d];
        for i in 0..m1 {
            for k in 0..m1 {
                l[i] += a[(i, k)] * (y[k] - 0.5);
            }
        }
        l
    };
    let outside = |v: &[f64]| v.iter().any(|&x| !(0.0..=1.0).contains(&x));

    if m1 > 0 {
        for j in 0..m1 {
            for side in [0.0, 1.0] {
                let mut dims = vec![None; m1];
                dims[j] = Some(side);
                let ok = for_each_point(&dims, density, |yx| {
                    let mut y = yx.to_vec();
                    y.extend(vec![0.5; d - m1]);
                    outside(&lin(&y)[..m1])
                });
                if !ok {
                    return Err(OracleFailure::Degree);
                }
            }
        }
    }

    let image = |y: &[f64]| (w2.to_normalized(&f(&w1.to_ambient(y))), lin(y));
    let blend = |fy: &[f64], l: &[f64], t: f64| -> Vec<f64> {
        fy.iter().zip(l).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    };

    for j in 0..m1 {
        for side in [0.0, 1.0] {
            let mut dims = vec![None; d];
            dims[j] = Some(side);
            let mut fail = None;
            for_each_point(&dims, density, |y| {
                let (fy, l) = image(y);
                for s in 0..=10 {
                    let t = s as f64 / 10.0;
                    if !outside(&blend(&fy, &l, t)) {
                        fail = Some(OracleFailure::ExitFace { t, y: y.to_vec() });
                        return false;
                    }
                }
                true
            });
            if let Some(e) = fail {
                return Err(e);
            }
        }
    }

    let dims = vec![None; d];
    let mut fail = None;
    for_each_point(&dims, density, |y| {
        let (fy, l) = image(y);
        for t in [0.0, 0.5] {
            let h = blend(&fy, &l, t);
            let exit_in = h[..m1].iter().all(|x| (0.0..=1.0).contains(x));
            let entry_strict = h[m1..].iter().all(|&x| x > 0.0 && x < 1.0);
            if exit_in && !entry_strict {
                fail = Some(OracleFailure::EntryAvoidance { t, y: y.to_vec() });
                return false;
            }
        }
        true
    });
    match fail {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Engine sample count for an instance of dimension `d`.
pub fn samples_for(d: usize) -> usize {
    if d >= 3 {
        8
    } else {
        16
    }
}

pub fn eval(map: &dyn AlignMap) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |x| map.eval(x).expect("map evaluates")
}
