//! Sampled certification of correct alignment between windows.
//!
//! The map is homotoped to its linearization `L(y) = (c + A(y_x − c), c)`
//! in normalized coordinates, where `A` is the exit block of the normalized
//! Jacobian at the centre of the source window. Alignment holds when
//!
//! * every exit-face point has an exit coordinate `j` with `f̂_j` and `L_j`
//!   outside `[0,1]` on the same side,
//! * every point of the source window either lands with all entry
//!   coordinates strictly inside `(0,1)` or satisfies the exit clause above,
//! * `‖A⁻¹‖∞ < 1`, so `L` has degree `sign det A ≠ 0`.
//!
//! Sample points are centres of grid cells. The image of a cell is enclosed
//! by the value at the centre widened by the map's derivative bound,
//! intersected with the map's interval image box when one is available, so a
//! positive clearance covers the whole cell. The margin is the smallest
//! clearance of `f̂` in ambient sup-norm units; `L` enters only through the
//! sign conditions, since a perturbation of `f` leaves `L` unchanged.

use crate::maps::{AlignMap, MapError};
use crate::window::Window;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Lipschitz bound unavailable")]
    LipschitzUnavailable,
    #[error("map evaluation failed: {0}")]
    Map(#[from] MapError),
    #[error("no prior alignment report")]
    NoPriorReport,
    #[error("need at least one sample per axis")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Homotopy to the linearization on the exit block.
    Linear,
    /// No exit directions: interior inclusion, degree of a constant map.
    Degree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// `exit-face`, `entry-avoidance` or `degree`.
    pub check: String,
    pub block: usize,
    pub point: Vec<f64>,
    pub clearance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub aligned: bool,
    pub mode: AlignMode,
    pub margin: f64,
    pub witness: Option<Witness>,
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Checks `w1 ⇒ w2` under `map` with `samples` cells per axis.
pub fn check_alignment(
    w1: &Window,
    w2: &Window,
    map: &dyn AlignMap,
    samples: usize,
) -> Result<AlignmentReport, AlignError> {
    check_block_alignment(std::slice::from_ref(w1), std::slice::from_ref(w2), map, samples, 1)
}

/// Blockwise check for `w1a × w1b ⇒ w2a × w2b`; each block is checked with
/// the other block sampled on a coarse grid of cells.
pub fn check_product_alignment(
    w1a: &Window,
    w1b: &Window,
    w2a: &Window,
    w2b: &Window,
    map: &dyn AlignMap,
    samples: usize,
) -> Result<AlignmentReport, AlignError> {
    check_block_alignment(
        &[w1a.clone(), w1b.clone()],
        &[w2a.clone(), w2b.clone()],
        map,
        samples,
        2,
    )
}

/// True when a perturbation of sup-norm `bound` keeps the alignment.
pub fn alignment_margin_stability(
    prior: Option<&AlignmentReport>,
    bound: f64,
) -> Result<bool, AlignError> {
    let r = prior.ok_or(AlignError::NoPriorReport)?;
    Ok(r.aligned && bound < r.margin)
}

struct Block<'a> {
    src: &'a Window,
    dst: &'a Window,
    offset: usize,
    dim: usize,
}

#[derive(Clone)]
struct Cell {
    /// normalized coordinates per block
    y: Vec<Vec<f64>>,
    /// normalized half-widths per block
    h: Vec<Vec<f64>>,
}

struct Outcome {
    clearance: f64,
    point: Vec<f64>,
    detail: String,
}

/// General blockwise check. Ambient coordinates of block `i` are the
/// contiguous slice following blocks `0..i`. `cross_samples` cells per axis
/// are used for the blocks not under test.
pub fn check_block_alignment(
    src: &[Window],
    dst: &[Window],
    map: &dyn AlignMap,
    samples: usize,
    cross_samples: usize,
) -> Result<AlignmentReport, AlignError> {
    if samples == 0 || cross_samples == 0 {
        return Err(AlignError::NoSamples);
    }
    if src.len() != dst.len() || src.is_empty() {
        return Err(AlignError::DimensionMismatch("block counts differ".into()));
    }
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (i, (a, b)) in src.iter().zip(dst).enumerate() {
        if a.dim() != b.dim() || a.exit_dim() != b.exit_dim() {
            return Err(AlignError::DimensionMismatch(format!(
                "block {i}: source ({}, {}) vs target ({}, {})",
                a.exit_dim(),
                a.entry_dim(),
                b.exit_dim(),
                b.entry_dim()
            )));
        }
        blocks.push(Block { src: a, dst: b, offset, dim: a.dim() });
        offset += a.dim();
    }
    if offset != map.dim() {
        return Err(AlignError::DimensionMismatch(format!(
            "windows have dimension {offset}, map has {}",
            map.dim()
        )));
    }
    let total_exit: usize = blocks.iter().map(|b| b.src.exit_dim()).sum();
    let mode = if total_exit > 0 { AlignMode::Linear } else { AlignMode::Degree };

    let center_cell = Cell {
        y: blocks.iter().map(|b| vec![0.5; b.dim]).collect(),
        h: blocks.iter().map(|b| vec![0.0; b.dim]).collect(),
    };
    let x_center = ambient(&blocks, &center_cell.y);
    let jac = map.jacobian(&x_center)?;

    let mut margin = f64::INFINITY;
    let mut witness: Option<Witness> = None;
    let mut record = |check: &str, block: usize, o: Outcome, margin: &mut f64| {
        if o.clearance < *margin {
            *margin = o.clearance;
        }
        if !(o.clearance > 0.0) && witness.is_none() {
            witness = Some(Witness {
                check: check.to_string(),
                block,
                point: o.point,
                clearance: o.clearance,
                detail: o.detail,
            });
        }
    };

    for (bi, blk) in blocks.iter().enumerate() {
        let m1 = blk.src.exit_dim();
        let ctx = BlockCtx::new(&blocks, bi, &jac);
        let cross = cross_cells(&blocks, bi, cross_samples);

        // exit faces
        let mut face_cells = Vec::new();
        for j in 0..m1 {
            for side in [0.0, 1.0] {
                for local in grid_cells(blk.dim, samples, Some((j, side))) {
                    for c in &cross {
                        let mut cell = c.clone();
                        cell.y[bi] = local.0.clone();
                        cell.h[bi] = local.1.clone();
                        face_cells.push(cell);
                    }
                }
            }
        }
        let face: Vec<Result<Outcome, AlignError>> = face_cells
            .par_iter()
            .map(|cell| ctx.evaluate(map, &blocks, cell, false))
            .collect();
        for o in face {
            record("exit-face", bi, o?, &mut margin);
        }

        // entry avoidance over the whole source block
        if blk.src.entry_dim() > 0 || m1 == 0 {
            let mut vol_cells = Vec::new();
            for local in grid_cells(blk.dim, samples, None) {
                for c in &cross {
                    let mut cell = c.clone();
                    cell.y[bi] = local.0.clone();
                    cell.h[bi] = local.1.clone();
                    vol_cells.push(cell);
                }
            }
            let vol: Vec<Result<Outcome, AlignError>> = vol_cells
                .par_iter()
                .map(|cell| ctx.evaluate(map, &blocks, cell, true))
                .collect();
            for o in vol {
                record("entry-avoidance", bi, o?, &mut margin);
            }
        }

        if m1 > 0 {
            let (ok, detail) = ctx.degree_ok();
            if !ok {
                record(
                    "degree",
                    bi,
                    Outcome { clearance: 0.0, point: x_center.clone(), detail },
                    &mut margin,
                );
            }
        }
    }

    let aligned = witness.is_none() && margin > 0.0;
    Ok(AlignmentReport {
        aligned,
        mode,
        margin: if aligned { margin } else { margin.min(0.0) },
        witness,
    })
}

struct BlockCtx {
    bi: usize,
    m1: usize,
    /// exit block of the normalized Jacobian
    a: DMatrix<f64>,
    /// |N2⁻¹| for the target block
    ninv_abs: DMatrix<f64>,
    /// ambient scale of each normalized target coordinate
    scale: Vec<f64>,
}

impl BlockCtx {
    fn new(blocks: &[Block], bi: usize, jac: &DMatrix<f64>) -> Self {
        let blk = &blocks[bi];
        let m1 = blk.src.exit_dim();
        let ninv = blk.dst.normalized_inverse();
        let m_src = blk.src.normalized_linear();
        let jab = jac.view((blk.offset, blk.offset), (blk.dim, blk.dim)).into_owned();
        let jn = &ninv * jab * &m_src;
        let a = jn.view((0, 0), (m1, m1)).into_owned();
        let scale = (0..blk.dim).map(|j| ninv.row(j).iter().map(|v| v.abs()).sum()).collect();
        Self { bi, m1, a, ninv_abs: ninv.abs(), scale }
    }

    fn degree_ok(&self) -> (bool, String) {
        match self.a.clone().full_piv_lu().try_inverse() {
            None => (false, "exit block of the linearization is singular".into()),
            Some(inv) => {
                let n = inf_norm(&inv);
                if n < 1.0 {
                    (true, String::new())
                } else {
                    (false, format!("‖A⁻¹‖∞ = {n:.6e} ≥ 1"))
                }
            }
        }
    }

    /// Linear target on exit coordinates plus its variation over the cell.
    fn linear_exit(&self, y: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m1 = self.m1;
        let mut l = vec![0.5; m1];
        let mut var = vec![0.0; m1];
        for i in 0..m1 {
            for k in 0..m1 {
                l[i] += self.a[(i, k)] * (y[k] - 0.5);
                var[i] += self.a[(i, k)].abs() * h[k];
            }
        }
        (l, var)
    }

    fn evaluate(
        &self,
        map: &dyn AlignMap,
        blocks: &[Block],
        cell: &Cell,
        volume: bool,
    ) -> Result<Outcome, AlignError> {
        let blk = &blocks[self.bi];
        let x = ambient(blocks, &cell.y);
        let fx = map.eval(&x)?;
        let (lo, hi) = cell_box(blocks, cell);
        let bound = map.derivative_bound(&lo, &hi).ok_or(AlignError::LipschitzUnavailable)?;

        // normalized image of this block
        let fa = &fx[blk.offset..blk.offset + blk.dim];
        let yhat = blk.dst.to_normalized(fa);

        // variation of f̂ over the cell: |N2⁻¹| · B[rows of block] · |M1| h
        let mut dx = vec![0.0; x.len()];
        for (k, b) in blocks.iter().enumerate() {
            let m = b.src.normalized_linear();
            for r in 0..b.dim {
                let mut acc = 0.0;
                for c in 0..b.dim {
                    acc += m[(r, c)].abs() * cell.h[k][c];
                }
                dx[b.offset + r] = acc;
            }
        }
        let mut dfa = vec![0.0; blk.dim];
        for (r, v) in dfa.iter_mut().enumerate() {
            *v = (0..x.len()).map(|c| bound[(blk.offset + r, c)] * dx[c]).sum();
        }
        let var: Vec<f64> = (0..blk.dim)
            .map(|j| (0..blk.dim).map(|k| self.ninv_abs[(j, k)] * dfa[k]).sum())
            .collect();
        // mean-value enclosure of f̂ over the cell
        let mut ylo: Vec<f64> = yhat.iter().zip(&var).map(|(y, v)| y - v).collect();
        let mut yhi: Vec<f64> = yhat.iter().zip(&var).map(|(y, v)| y + v).collect();
        let (l, lvar) = self.linear_exit(&cell.y[self.bi], &cell.h[self.bi]);
        let clauses = |ylo: &[f64], yhi: &[f64]| -> (f64, String) {
            let mut best = f64::NEG_INFINITY;
            let mut detail = String::from("no exit coordinate");
            for j in 0..self.m1 {
                // L only has to be strictly outside on the same side; the
                // clearance that a perturbation can use up is the one of f̂
                let side = |f: f64, lin: f64| if lin > 0.0 { f } else { f.min(lin) };
                let hi_side = side(ylo[j] - 1.0, l[j] - 1.0 - lvar[j]);
                let lo_side = side(-yhi[j], -l[j] - lvar[j]);
                let c = hi_side.max(lo_side) / self.scale[j];
                if c > best {
                    best = c;
                    detail = format!("exit coordinate {j}: f̂ = {:.6e}, L = {:.6e}", yhat[j], l[j]);
                }
            }
            if volume && blk.dim > self.m1 {
                let (inside, which) = (self.m1..blk.dim)
                    .map(|j| (ylo[j].min(1.0 - yhi[j]) / self.scale[j], j))
                    .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc });
                if inside > best {
                    best = inside;
                    detail = format!("entry coordinate {which}: f̂ = {:.6e}", yhat[which]);
                }
            }
            (best, detail)
        };
        let (mut best, mut detail) = clauses(&ylo, &yhi);
        // retry with the interval image box, which can be much tighter for
        // coordinates that the map contracts
        if !(best > 0.0) {
            if let Some((ilo, ihi)) = map.image_bound(&lo, &hi) {
                let r = blk.offset..blk.offset + blk.dim;
                let mid: Vec<f64> = ilo[r.clone()].iter().zip(&ihi[r.clone()]).map(|(a, b)| 0.5 * (a + b)).collect();
                let rad: Vec<f64> = ilo[r.clone()].iter().zip(&ihi[r]).map(|(a, b)| 0.5 * (b - a)).collect();
                if mid.iter().chain(&rad).all(|v| v.is_finite()) {
                    let ym = blk.dst.to_normalized(&mid);
                    for j in 0..blk.dim {
                        let yr: f64 = (0..blk.dim).map(|k| self.ninv_abs[(j, k)] * rad[k]).sum();
                        ylo[j] = ylo[j].max(ym[j] - yr);
                        yhi[j] = yhi[j].min(ym[j] + yr);
                    }
                    (best, detail) = clauses(&ylo, &yhi);
                }
            }
        }
        Ok(Outcome { clearance: best, point: x, detail })
    }
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn ambient(blocks: &[Block], y: &[Vec<f64>]) -> Vec<f64> {
    let mut x = Vec::new();
    for (b, yb) in blocks.iter().zip(y) {
        x.extend(b.src.to_ambient(yb));
    }
    x
}

fn cell_box(blocks: &[Block], cell: &Cell) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for (k, b) in blocks.iter().enumerate() {
        let c = b.src.to_ambient(&cell.y[k]);
        let m = b.src.normalized_linear();
        for r in 0..b.dim {
            let rad: f64 = (0..b.dim).map(|s| m[(r, s)].abs() * cell.h[k][s]).sum();
            lo.push(c[r] - rad);
            hi.push(c[r] + rad);
        }
    }
    (lo, hi)
}

/// Cells covering `[0,1]^d`, optionally restricted to the face `y_j = side`.
fn grid_cells(d: usize, n: usize, face: Option<(usize, f64)>) -> Vec<(Vec<f64>, Vec<f64>)> {
    let free: Vec<usize> = (0..d).filter(|&i| face.is_none_or(|(j, _)| i != j)).collect();
    let count = n.pow(free.len() as u32);
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut y = vec![0.0; d];
        let mut h = vec![0.0; d];
        let mut rem = idx;
        for &i in &free {
            let k = rem % n;
            rem /= n;
            y[i] = (k as f64 + 0.5) / n as f64;
            h[i] = 0.5 / n as f64;
        }
        if let Some((j, side)) = face {
            y[j] = side;
        }
        out.push((y, h));
    }
    out
}

fn cross_cells(blocks: &[Block], bi: usize, n: usize) -> Vec<Cell> {
    let mut cells = vec![Cell {
        y: blocks.iter().map(|b| vec![0.5; b.dim]).collect(),
        h: blocks.iter().map(|b| vec![0.0; b.dim]).collect(),
    }];
    for (k, b) in blocks.iter().enumerate() {
        if k == bi {
            continue;
        }
        let local = grid_cells(b.dim, n, None);
        let mut next = Vec::with_capacity(cells.len() * local.len());
        for c in &cells {
            for (y, h) in &local {
                let mut c2 = c.clone();
                c2.y[k] = y.clone();
                c2.h[k] = h.clone();
                next.push(c2);
            }
        }
        cells = next;
    }
    cells
}
