//! Windows: affine images of products of closed boxes, split into exit and
//! entry directions.
//!
//! A window carries an exit rectangle (dimension m1), an entry rectangle
//! (dimension m2) and an affine chart sending local coordinates, ordered
//! exit-then-entry, to ambient coordinates. Normalized coordinates
//! `y ∈ [0,1]^(m1+m2)` are related to local coordinates by
//! `local = lower + edge * y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Membership tolerance for boundary classification.
pub const MEMBERSHIP_TOL: f64 = 1e-12;
/// Chart inverse check at the cube corners.
pub const CHART_INVERSE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("degenerate rectangle: edge {index} is {edge}")]
    DegenerateRectangle { index: usize, edge: f64 },
    #[error("chart not invertible")]
    NonInvertibleChart,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("overlapping coordinate blocks: label {0} appears in both factors")]
    OverlappingBlocks(String),
    #[error("unknown axis label {0:?}")]
    UnknownLabel(String),
    #[error("window parse error: {0}")]
    Parse(String),
}

/// Coordinate role of an ambient axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    S,
    U,
    Q,
    P,
    Theta,
    Xi,
}

impl Axis {
    pub fn symbol(self) -> &'static str {
        match self {
            Axis::S => "s",
            Axis::U => "u",
            Axis::Q => "q",
            Axis::P => "p",
            Axis::Theta => "θ",
            Axis::Xi => "ξ",
        }
    }

    pub fn parse(s: &str) -> Result<Self, WindowError> {
        match s {
            "s" => Ok(Axis::S),
            "u" => Ok(Axis::U),
            "q" => Ok(Axis::Q),
            "p" => Ok(Axis::P),
            "θ" | "theta" => Ok(Axis::Theta),
            "ξ" | "xi" => Ok(Axis::Xi),
            other => Err(WindowError::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for Axis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Axis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Axis::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box `Π [lower_i, lower_i + edge_i]` with positive edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectangle {
    lower: Vec<f64>,
    edge: Vec<f64>,
}

impl Rectangle {
    pub fn new(lower: Vec<f64>, edge: Vec<f64>) -> Result<Self, WindowError> {
        if lower.len() != edge.len() {
            return Err(WindowError::DimensionMismatch {
                expected: lower.len(),
                got: edge.len(),
            });
        }
        for (index, &e) in edge.iter().enumerate() {
            if !(e > 0.0) || !e.is_finite() {
                return Err(WindowError::DegenerateRectangle { index, edge: e });
            }
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(WindowError::Parse("non-finite lower corner".into()));
        }
        Ok(Self { lower, edge })
    }

    /// Box centred at `center` with full edge lengths `edge`.
    pub fn centered(center: &[f64], edge: &[f64]) -> Result<Self, WindowError> {
        let lower = center.iter().zip(edge).map(|(c, e)| c - 0.5 * e).collect();
        Self::new(lower, edge.to_vec())
    }

    /// Zero-dimensional factor.
    pub fn empty() -> Self {
        Self { lower: vec![], edge: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn edge(&self) -> &[f64] {
        &self.edge
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.edge).map(|(l, e)| l + e).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.edge).map(|(l, e)| l + 0.5 * e).collect()
    }

    /// Longest edge.
    pub fn size(&self) -> f64 {
        self.edge.iter().cloned().fold(0.0, f64::max)
    }

    pub fn product(&self, other: &Rectangle) -> Rectangle {
        let mut lower = self.lower.clone();
        lower.extend_from_slice(&other.lower);
        let mut edge = self.edge.clone();
        edge.extend_from_slice(&other.edge);
        Rectangle { lower, edge }
    }
}

/// Invertible affine map `x = linear * local + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineChart {
    linear: DMatrix<f64>,
    offset: DVector<f64>,
    inverse: DMatrix<f64>,
}

impl AffineChart {
    pub fn new(linear: DMatrix<f64>, offset: DVector<f64>) -> Result<Self, WindowError> {
        let d = linear.nrows();
        if linear.ncols() != d {
            return Err(WindowError::DimensionMismatch { expected: d, got: linear.ncols() });
        }
        if offset.len() != d {
            return Err(WindowError::DimensionMismatch { expected: d, got: offset.len() });
        }
        if linear.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(WindowError::NonInvertibleChart);
        }
        let inverse = if d == 0 {
            DMatrix::zeros(0, 0)
        } else {
            linear.clone().full_piv_lu().try_inverse().ok_or(WindowError::NonInvertibleChart)?
        };
        Ok(Self { linear, offset, inverse })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            linear: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
            inverse: DMatrix::identity(d, d),
        }
    }

    /// Chart that places local coordinate `i` on ambient axis `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self, WindowError> {
        let d = perm.len();
        let mut m = DMatrix::zeros(d, d);
        for (i, &j) in perm.iter().enumerate() {
            if j >= d {
                return Err(WindowError::DimensionMismatch { expected: d, got: j + 1 });
            }
            m[(j, i)] = 1.0;
        }
        Self::new(m, DVector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn inverse_linear(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn apply(&self, local: &[f64]) -> Vec<f64> {
        let v = &self.linear * DVector::from_column_slice(local) + &self.offset;
        v.iter().copied().collect()
    }

    pub fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        let v = &self.inverse * (DVector::from_column_slice(x) - &self.offset);
        v.iter().copied().collect()
    }
}

/// A window `W = χ(exit × entry)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    exit: Rectangle,
    entry: Rectangle,
    chart: AffineChart,
    labels: Vec<Axis>,
}

/// Where a point sits relative to a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Interior,
    Entry,
    Exit,
    Outside,
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Membership::Interior => "interior",
            Membership::Entry => "entry",
            Membership::Exit => "exit",
            Membership::Outside => "outside",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WindowJson {
    exit_lower: Vec<f64>,
    exit_edge: Vec<f64>,
    entry_lower: Vec<f64>,
    entry_edge: Vec<f64>,
    chart_linear: Vec<f64>,
    chart_offset: Vec<f64>,
    axis_labels: Vec<Axis>,
}

impl Window {
    pub fn new(
        exit: Rectangle,
        entry: Rectangle,
        chart: AffineChart,
        labels: Vec<Axis>,
    ) -> Result<Self, WindowError> {
        let d = exit.dim() + entry.dim();
        if chart.dim() != d {
            return Err(WindowError::DimensionMismatch { expected: d, got: chart.dim() });
        }
        if labels.len() != d {
            return Err(WindowError::DimensionMismatch { expected: d, got: labels.len() });
        }
        let w = Self { exit, entry, chart, labels };
        w.verify_chart_inverse()?;
        Ok(w)
    }

    /// Unit square with identity chart and labels `(u, s)`: exit direction
    /// first.
    pub fn unit(m1: usize, m2: usize, labels: Vec<Axis>) -> Result<Self, WindowError> {
        let exit = Rectangle::new(vec![0.0; m1], vec![1.0; m1])?;
        let entry = Rectangle::new(vec![0.0; m2], vec![1.0; m2])?;
        Self::new(exit, entry, AffineChart::identity(m1 + m2), labels)
    }

    fn verify_chart_inverse(&self) -> Result<(), WindowError> {
        let d = self.dim();
        if d > 20 {
            return Ok(());
        }
        for corner in 0..(1usize << d) {
            let y: Vec<f64> = (0..d).map(|i| ((corner >> i) & 1) as f64).collect();
            let local = self.local_from_normalized(&y);
            let back = self.chart.apply_inverse(&self.chart.apply(&local));
            for (a, b) in local.iter().zip(&back) {
                if (a - b).abs() > CHART_INVERSE_TOL * a.abs().max(1.0) {
                    return Err(WindowError::NonInvertibleChart);
                }
            }
        }
        Ok(())
    }

    pub fn exit(&self) -> &Rectangle {
        &self.exit
    }

    pub fn entry(&self) -> &Rectangle {
        &self.entry
    }

    pub fn chart(&self) -> &AffineChart {
        &self.chart
    }

    pub fn labels(&self) -> &[Axis] {
        &self.labels
    }

    pub fn exit_dim(&self) -> usize {
        self.exit.dim()
    }

    pub fn entry_dim(&self) -> usize {
        self.entry.dim()
    }

    pub fn dim(&self) -> usize {
        self.exit.dim() + self.entry.dim()
    }

    fn edges(&self) -> Vec<f64> {
        let mut e = self.exit.edge.clone();
        e.extend_from_slice(&self.entry.edge);
        e
    }

    fn lowers(&self) -> Vec<f64> {
        let mut l = self.exit.lower.clone();
        l.extend_from_slice(&self.entry.lower);
        l
    }

    pub fn local_from_normalized(&self, y: &[f64]) -> Vec<f64> {
        self.lowers().iter().zip(self.edges()).zip(y).map(|((l, e), y)| l + e * y).collect()
    }

    /// Ambient point for normalized coordinates.
    pub fn to_ambient(&self, y: &[f64]) -> Vec<f64> {
        self.chart.apply(&self.local_from_normalized(y))
    }

    /// Normalized coordinates of an ambient point.
    pub fn to_normalized(&self, x: &[f64]) -> Vec<f64> {
        let local = self.chart.apply_inverse(x);
        local
            .iter()
            .zip(self.lowers())
            .zip(self.edges())
            .map(|((v, l), e)| (v - l) / e)
            .collect()
    }

    /// Linear part of the normalized chart, `x = M y + b`.
    pub fn normalized_linear(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = self.chart.linear.clone();
        let e = self.edges();
        for j in 0..d {
            for i in 0..d {
                m[(i, j)] *= e[j];
            }
        }
        m
    }

    /// Inverse of [`Self::normalized_linear`].
    pub fn normalized_inverse(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = self.chart.inverse.clone();
        let e = self.edges();
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] /= e[i];
            }
        }
        m
    }

    /// Ambient centre of the window.
    pub fn center(&self) -> Vec<f64> {
        self.to_ambient(&vec![0.5; self.dim()])
    }

    /// Bounding box of the ambient image.
    pub fn ambient_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.center();
        let m = self.normalized_linear();
        let d = self.dim();
        let mut lo = c.clone();
        let mut hi = c;
        for i in 0..d {
            let r: f64 = (0..d).map(|j| 0.5 * m[(i, j)].abs()).sum();
            lo[i] -= r;
            hi[i] += r;
        }
        (lo, hi)
    }

    pub fn membership(&self, x: &[f64]) -> Result<Membership, WindowError> {
        if x.len() != self.dim() {
            return Err(WindowError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let y = self.to_normalized(x);
        Ok(classify(&y, self.exit_dim(), MEMBERSHIP_TOL))
    }

    /// Cartesian product; ambient coordinates are concatenated.
    pub fn product(&self, other: &Window) -> Result<Window, WindowError> {
        for l in &other.labels {
            if self.labels.contains(l) {
                return Err(WindowError::OverlappingBlocks(l.symbol().to_string()));
            }
        }
        let (a1, a2) = (self.exit_dim(), self.entry_dim());
        let (b1, b2) = (other.exit_dim(), other.entry_dim());
        let da = a1 + a2;
        let d = da + b1 + b2;
        // New local order: a-exit, b-exit, a-entry, b-entry.
        let local_pos = |block_a: bool, i: usize| -> usize {
            if block_a {
                if i < a1 { i } else { a1 + b1 + (i - a1) }
            } else if i < b1 {
                a1 + i
            } else {
                a1 + b1 + a2 + (i - b1)
            }
        };
        let mut linear = DMatrix::zeros(d, d);
        for r in 0..da {
            for c in 0..da {
                linear[(r, local_pos(true, c))] = self.chart.linear[(r, c)];
            }
        }
        let db = b1 + b2;
        for r in 0..db {
            for c in 0..db {
                linear[(da + r, local_pos(false, c))] = other.chart.linear[(r, c)];
            }
        }
        let mut offset = self.chart.offset.iter().copied().collect::<Vec<_>>();
        offset.extend(other.chart.offset.iter());
        let chart = AffineChart::new(linear, DVector::from_vec(offset))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Window::new(
            self.exit.product(&other.exit),
            self.entry.product(&other.entry),
            chart,
            labels,
        )
    }

    pub fn to_json(&self) -> String {
        let j = WindowJson {
            exit_lower: self.exit.lower.clone(),
            exit_edge: self.exit.edge.clone(),
            entry_lower: self.entry.lower.clone(),
            entry_edge: self.entry.edge.clone(),
            chart_linear: (0..self.dim())
                .flat_map(|i| (0..self.dim()).map(move |j| (i, j)))
                .map(|(i, j)| self.chart.linear[(i, j)])
                .collect(),
            chart_offset: self.chart.offset.iter().copied().collect(),
            axis_labels: self.labels.clone(),
        };
        serde_json::to_string(&j).expect("window serializes")
    }

    pub fn from_json(text: &str) -> Result<Window, WindowError> {
        let j: WindowJson =
            serde_json::from_str(text).map_err(|e| WindowError::Parse(e.to_string()))?;
        let d = j.chart_offset.len();
        if j.chart_linear.len() != d * d {
            return Err(WindowError::DimensionMismatch { expected: d * d, got: j.chart_linear.len() });
        }
        let linear = DMatrix::from_row_slice(d, d, &j.chart_linear);
        let chart = AffineChart::new(linear, DVector::from_vec(j.chart_offset))?;
        Window::new(
            Rectangle::new(j.exit_lower, j.exit_edge)?,
            Rectangle::new(j.entry_lower, j.entry_edge)?,
            chart,
            j.axis_labels,
        )
    }
}

/// Classify normalized coordinates; the first `m1` are exit directions.
/// Corners lying on both boundaries count as exit.
pub fn classify(y: &[f64], m1: usize, tol: f64) -> Membership {
    if y.iter().any(|&v| v < -tol || v > 1.0 + tol || v.is_nan()) {
        return Membership::Outside;
    }
    let on_bd = |v: f64| v.abs() <= tol || (v - 1.0).abs() <= tol;
    if y[..m1].iter().any(|&v| on_bd(v)) {
        Membership::Exit
    } else if y[m1..].iter().any(|&v| on_bd(v)) {
        Membership::Entry
    } else {
        Membership::Interior
    }
}

/// Window with axis-aligned blocks: local exit coordinates go to ambient
/// axes `exit_axes`, entry coordinates to `entry_axes`.
pub fn aligned_window(
    labels: Vec<Axis>,
    center: &[f64],
    exit_axes: &[usize],
    exit_edge: &[f64],
    entry_axes: &[usize],
    entry_edge: &[f64],
) -> Result<Window, WindowError> {
    let mut perm = exit_axes.to_vec();
    perm.extend_from_slice(entry_axes);
    let chart = AffineChart::permutation(&perm)?;
    let ce: Vec<f64> = exit_axes.iter().map(|&i| center[i]).collect();
    let cn: Vec<f64> = entry_axes.iter().map(|&i| center[i]).collect();
    Window::new(
        Rectangle::centered(&ce, exit_edge)?,
        Rectangle::centered(&cn, entry_edge)?,
        chart,
        labels,
    )
}
