//! Orbits through chains of aligned windows, and diffusion runs built from a
//! schedule.

use crate::alignment::{check_alignment, check_block_alignment, AlignError, AlignmentReport};
use crate::config::{ConfigError, RunConfig};
use crate::maps::{AlignMap, Compose, Iterate, MapError, Step};
use crate::model::{ExtendedMap, HomoclinicJump, NormalForm};
use crate::schedule::{ChainSchedule, ExtensionParams, ScheduleError};
use crate::window::{aligned_window, Axis, Membership, Window, WindowError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Largest admissible `μ₊^n` for a single leg.
pub const GROWTH_CAP: f64 = 1e300;

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("no candidate cell survives the first map (alignment certificate is wrong)")]
    NoCandidate,
    #[error("Newton polish stalled after {iterations} iterations at residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("orbit point {index} is {membership} its window")]
    Containment { index: usize, membership: Membership },
    #[error("alignment fails at link {link}, stage {stage}: {detail}")]
    Alignment { link: usize, stage: String, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub beam_width: usize,
    pub depth: usize,
    pub tol: f64,
    pub max_newton: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { beam_width: 4, depth: 30, tol: 1e-9, max_newton: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedOrbit {
    pub points: Vec<Vec<f64>>,
    /// `‖f_i(z_i) − z_{i+1}‖∞`
    pub residuals: Vec<f64>,
    pub memberships: Vec<Membership>,
    pub bisection_depth: usize,
    pub newton_iterations: usize,
}

impl ExtractedOrbit {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Score {
    reached: usize,
    excess: f64,
}

impl Score {
    fn better(&self, other: &Score) -> bool {
        self.reached > other.reached || (self.reached == other.reached && self.excess < other.excess)
    }
}

fn excess(y: &[f64]) -> f64 {
    y.iter().map(|&v| (-v).max(v - 1.0).max(0.0)).fold(0.0, f64::max)
}

fn first_point(w: &Window, exit: &[f64]) -> Vec<f64> {
    let mut y = exit.to_vec();
    y.extend(std::iter::repeat_n(0.5, w.entry_dim()));
    w.to_ambient(&y)
}

/// Forward chain from `z0`; stops at the first window that is left.
fn forward(windows: &[Window], maps: &[Arc<dyn AlignMap>], z0: Vec<f64>) -> (Score, Vec<Vec<f64>>) {
    let mut chain = vec![z0];
    for (j, f) in maps.iter().enumerate() {
        let z = match f.eval(chain.last().unwrap()) {
            Ok(z) => z,
            Err(_) => return (Score { reached: j, excess: f64::INFINITY }, chain),
        };
        let e = excess(&windows[j + 1].to_normalized(&z));
        if !(e <= 1e-12) {
            return (Score { reached: j, excess: if e.is_nan() { f64::INFINITY } else { e } }, chain);
        }
        chain.push(z);
    }
    (Score { reached: maps.len(), excess: 0.0 }, chain)
}

#[derive(Clone)]
struct Cell {
    lo: Vec<f64>,
    width: f64,
}

impl Cell {
    fn center(&self) -> Vec<f64> {
        self.lo.iter().map(|l| l + 0.5 * self.width).collect()
    }

    fn children(&self) -> Vec<Cell> {
        let d = self.lo.len();
        let w = 0.5 * self.width;
        (0..1usize << d)
            .map(|code| Cell {
                lo: (0..d).map(|i| self.lo[i] + if (code >> i) & 1 == 1 { w } else { 0.0 }).collect(),
                width: w,
            })
            .collect()
    }
}

/// Finds `z_i ∈ W_i` with `f_i(z_i) = z_{i+1}` up to `opts.tol`.
///
/// Bisection on the exit coordinates of the first window keeps the
/// `beam_width` cells whose forward chains stay longest inside the
/// downstream windows. When no forward chain reaches the end, the best cell
/// seeds a Newton solve for the whole pseudo-orbit.
pub fn extract_orbit(
    windows: &[Window],
    maps: &[Arc<dyn AlignMap>],
    opts: &ExtractOptions,
) -> Result<ExtractedOrbit, OrbitError> {
    if windows.is_empty() {
        return Err(OrbitError::Invalid("at least one window is required".into()));
    }
    if maps.len() + 1 != windows.len() {
        return Err(OrbitError::Invalid(format!("{} windows need {} maps, got {}", windows.len(), windows.len() - 1, maps.len())));
    }
    for (j, f) in maps.iter().enumerate() {
        if f.dim() != windows[j].dim() || f.dim() != windows[j + 1].dim() {
            return Err(OrbitError::Invalid(format!("map {j} has dimension {}", f.dim())));
        }
        if windows[j].exit_dim() != windows[j + 1].exit_dim() {
            return Err(OrbitError::Invalid(format!("windows {j} and {} differ in exit dimension", j + 1)));
        }
    }
    if opts.beam_width == 0 {
        return Err(OrbitError::Invalid("beam width must be positive".into()));
    }
    let w0 = &windows[0];
    let m1 = w0.exit_dim();
    let root = Cell { lo: vec![0.0; m1], width: 1.0 };
    let (mut best_score, mut best_chain) = forward(windows, maps, first_point(w0, &root.center()));
    let mut best_exit = root.center();
    let mut beam = vec![root];
    let mut depth = 0;
    while best_score.reached < maps.len() && depth < opts.depth && m1 > 0 {
        depth += 1;
        let children: Vec<Cell> = beam.iter().flat_map(|c| c.children()).collect();
        let scored: Vec<(Score, Vec<Vec<f64>>)> = children
            .par_iter()
            .map(|c| forward(windows, maps, first_point(w0, &c.center())))
            .collect();
        let mut order: Vec<usize> = (0..children.len()).collect();
        // stable sort keeps cell index order among ties
        order.sort_by(|&a, &b| {
            let (sa, sb) = (scored[a].0, scored[b].0);
            sb.reached.cmp(&sa.reached).then(sa.excess.total_cmp(&sb.excess))
        });
        order.truncate(opts.beam_width);
        let top = order[0];
        if scored[top].0.better(&best_score) {
            best_score = scored[top].0;
            best_chain = scored[top].1.clone();
            best_exit = children[top].center();
        }
        beam = order.iter().map(|&i| children[i].clone()).collect();
    }
    if best_score.reached == 0 && best_score.excess.is_infinite() {
        return Err(OrbitError::NoCandidate);
    }
    if best_score.reached == maps.len() {
        let memberships = windows
            .iter()
            .zip(&best_chain)
            .map(|(w, z)| w.membership(z))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(ExtractedOrbit {
            residuals: vec![0.0; maps.len()],
            points: best_chain,
            memberships,
            bisection_depth: depth,
            newton_iterations: 0,
        });
    }
    tracing::debug!(depth, reached = best_score.reached, "bisection done, polishing");
    let (points, residuals, iterations) = newton_polish(windows, maps, &best_exit, opts)?;
    let mut memberships = Vec::with_capacity(points.len());
    for (i, (w, z)) in windows.iter().zip(&points).enumerate() {
        let m = w.membership(z)?;
        if matches!(m, Membership::Outside) {
            return Err(OrbitError::Containment { index: i, membership: m });
        }
        memberships.push(m);
    }
    Ok(ExtractedOrbit { points, residuals, memberships, bisection_depth: depth, newton_iterations: iterations })
}

struct Frame {
    center: DVector<f64>,
    m: DMatrix<f64>,
    ninv: DMatrix<f64>,
    offset: usize,
    dim: usize,
    exit: usize,
}

/// Newton on normalized offsets `e_j` from the window centres,
/// `z_j = c_j + M_j e_j`. Boundary rows pin the entry offsets of `e_0` and
/// the exit offsets of `e_J` to zero.
fn newton_polish(
    windows: &[Window],
    maps: &[Arc<dyn AlignMap>],
    exit0: &[f64],
    opts: &ExtractOptions,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize), OrbitError> {
    let mut frames = Vec::with_capacity(windows.len());
    let mut offset = 0;
    for w in windows {
        frames.push(Frame {
            center: DVector::from_vec(w.center()),
            m: w.normalized_linear(),
            ninv: w.normalized_inverse(),
            offset,
            dim: w.dim(),
            exit: w.exit_dim(),
        });
        offset += w.dim();
    }
    let total = offset;
    let mut e = DVector::zeros(total);
    for (i, v) in exit0.iter().enumerate() {
        e[i] = v - 0.5;
    }
    let points_of = |e: &DVector<f64>| -> Vec<DVector<f64>> {
        frames
            .iter()
            .map(|f| &f.center + &f.m * e.rows(f.offset, f.dim))
            .collect()
    };
    let last = frames.len() - 1;
    // residual vector and ambient residuals
    let evaluate = |e: &DVector<f64>| -> Result<(DVector<f64>, Vec<f64>, Vec<DVector<f64>>), MapError> {
        let z = points_of(e);
        let mut r = DVector::zeros(total);
        let mut amb = Vec::with_capacity(maps.len());
        let f0 = &frames[0];
        let mut row = 0;
        for i in f0.exit..f0.dim {
            r[row] = e[f0.offset + i];
            row += 1;
        }
        let mut images = Vec::with_capacity(maps.len());
        for (j, f) in maps.iter().enumerate() {
            let img = DVector::from_vec(f.eval(z[j].as_slice())?);
            if img.iter().any(|v| !v.is_finite()) {
                return Err(MapError::NonFinite(j));
            }
            let nxt = &frames[j + 1];
            let diff = &img - &z[j + 1];
            amb.push(diff.amax());
            let rn = &nxt.ninv * diff;
            r.rows_mut(row, nxt.dim).copy_from(&rn);
            row += nxt.dim;
            images.push(img);
        }
        let fl = &frames[last];
        for i in 0..fl.exit {
            r[row] = e[fl.offset + i];
            row += 1;
        }
        Ok((r, amb, z))
    };
    let (mut r, mut amb, mut z) = evaluate(&e)?;
    let mut merit = r.amax();
    let mut iterations = 0;
    let target = 0.01 * opts.tol;
    while iterations < opts.max_newton && amb.iter().copied().fold(0.0, f64::max) > target {
        iterations += 1;
        let mut jac = DMatrix::zeros(total, total);
        let f0 = &frames[0];
        let mut row = 0;
        for i in f0.exit..f0.dim {
            jac[(row, f0.offset + i)] = 1.0;
            row += 1;
        }
        for (j, f) in maps.iter().enumerate() {
            let (cur, nxt) = (&frames[j], &frames[j + 1]);
            let df = f.jacobian(z[j].as_slice())?;
            let blk = &nxt.ninv * df * &cur.m;
            jac.view_mut((row, cur.offset), (nxt.dim, cur.dim)).copy_from(&blk);
            for i in 0..nxt.dim {
                jac[(row + i, nxt.offset + i)] -= 1.0;
            }
            row += nxt.dim;
        }
        let fl = &frames[last];
        for i in 0..fl.exit {
            jac[(row, fl.offset + i)] = 1.0;
            row += 1;
        }
        let step = jac
            .full_piv_lu()
            .solve(&(-&r))
            .ok_or_else(|| OrbitError::Invalid("singular shooting Jacobian".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &e + &step * t;
            if let Ok((rt, at, zt)) = evaluate(&trial) {
                let mt = rt.amax();
                if mt < merit || at.iter().copied().fold(0.0, f64::max) <= target {
                    e = trial;
                    r = rt;
                    amb = at;
                    z = zt;
                    merit = mt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let worst = amb.iter().copied().fold(0.0, f64::max);
    if !(worst <= opts.tol) {
        return Err(OrbitError::NoConvergence { iterations, residual: worst });
    }
    Ok((z.into_iter().map(|v| v.iter().copied().collect()).collect(), amb, iterations))
}

/// Stage of a window inside a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Plain,
    Tilde,
    Hat,
    Prime,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Plain => "plain",
            Stage::Tilde => "tilde",
            Stage::Hat => "hat",
            Stage::Prime => "prime",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub link: usize,
    pub stage: Stage,
    /// iterates of the map consumed before this window
    pub step: u64,
    pub leaf_p: f64,
}

/// Model pieces needed to instantiate a chain.
#[derive(Debug, Clone)]
pub struct DiffusionSystem {
    pub model: NormalForm,
    pub jump_derivative: DMatrix<f64>,
    pub r_prime: f64,
    pub q_start: f64,
    pub extension: Option<(ExtendedMap, ExtensionParams)>,
}

impl DiffusionSystem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, OrbitError> {
        let model = cfg.normal_form()?;
        let jump_derivative = cfg.glue().derivative(cfg.epsilon, cfg.sigma, cfg.upsilon);
        let extension = match cfg.extension() {
            Some(ext) => {
                let map = ExtendedMap::new(model.clone(), ext.ell1, ext.ell2, ext.c_ext, ext.big_l)
                    .map_err(|e| OrbitError::Invalid(e.to_string()))?;
                Some((map, ext))
            }
            None => None,
        };
        Ok(Self { model, jump_derivative, r_prime: cfg.r_prime, q_start: cfg.q_start, extension })
    }

    fn core_dim(&self) -> usize {
        self.model.dim()
    }
}

/// Windows, maps and bookkeeping of a chain.
pub struct ChainPlan {
    /// blocks per window: the core block, then Θ and Ξ when extended
    pub blocks: Vec<Vec<Window>>,
    pub windows: Vec<Window>,
    pub maps: Vec<Arc<dyn AlignMap>>,
    pub nodes: Vec<NodeInfo>,
    /// iterate count of each map (0 for a bare jump)
    pub counts: Vec<u64>,
    pub jumps: Vec<Option<HomoclinicJump>>,
}

fn core_labels(m: usize, n: usize) -> Vec<Axis> {
    let mut l = vec![Axis::S; m];
    l.extend(vec![Axis::U; m]);
    l.extend(vec![Axis::Q; n]);
    l.extend(vec![Axis::P; n]);
    l
}

struct CoreWindowSpec<'a> {
    center: Vec<f64>,
    ratios: [f64; 4],
    /// true when q is an exit direction, otherwise p
    q_exit: bool,
    m: usize,
    n: usize,
    labels: &'a [Axis],
}

fn core_window(spec: CoreWindowSpec) -> Result<Window, WindowError> {
    let (m, n) = (spec.m, spec.n);
    let [a, b, g, d] = spec.ratios;
    let s_ax: Vec<usize> = (0..m).collect();
    let u_ax: Vec<usize> = (m..2 * m).collect();
    let q_ax: Vec<usize> = (2 * m..2 * m + n).collect();
    let p_ax: Vec<usize> = (2 * m + n..2 * m + 2 * n).collect();
    let (ex2, ex2e, en2, en2e) = if spec.q_exit { (q_ax, g, p_ax, d) } else { (p_ax, d, q_ax, g) };
    let exit_axes: Vec<usize> = u_ax.iter().chain(&ex2).copied().collect();
    let entry_axes: Vec<usize> = s_ax.iter().chain(&en2).copied().collect();
    let mut exit_edge = vec![b; m];
    exit_edge.extend(vec![ex2e; n]);
    let mut entry_edge = vec![a; m];
    entry_edge.extend(vec![en2e; n]);
    aligned_window(spec.labels.to_vec(), &spec.center, &exit_axes, &exit_edge, &entry_axes, &entry_edge)
}

fn entry_only(label: Axis, center: &[f64], half_width: &[f64]) -> Result<Window, WindowError> {
    let axes: Vec<usize> = (0..center.len()).collect();
    let edge: Vec<f64> = half_width.iter().map(|h| 2.0 * h).collect();
    aligned_window(vec![label; center.len()], center, &[], &[], &axes, &edge)
}

fn assemble(m: usize, n: usize, s: f64, u: f64, q: &[f64], p: &[f64]) -> Vec<f64> {
    let mut v = vec![s; m];
    v.extend(vec![u; m]);
    v.extend_from_slice(q);
    v.extend_from_slice(p);
    debug_assert_eq!(v.len(), 2 * (m + n));
    v
}

/// Instantiates plain, tilde, hat and prime windows for every link of the
/// schedule, with the jumps between links. In the extended system the jump
/// is fused into the following `Ψ^N` and the plain windows after the first
/// are dropped.
pub fn build_plan(system: &DiffusionSystem, schedule: &ChainSchedule) -> Result<ChainPlan, OrbitError> {
    let model = &system.model;
    let (m, n) = (model.m, model.n());
    let c = &schedule.constants;
    if (model.twist.epsilon - c.epsilon).abs() > 1e-15 {
        return Err(OrbitError::Invalid(format!(
            "system ε = {} does not match schedule ε = {}",
            model.twist.epsilon, c.epsilon
        )));
    }
    if system.jump_derivative.nrows() != system.core_dim() {
        return Err(OrbitError::Invalid("jump derivative has wrong size".into()));
    }
    let ext = match (&system.extension, &schedule.extended) {
        (Some((map, params)), Some(block)) => Some((map, params, block)),
        (None, None) => None,
        _ => return Err(OrbitError::Invalid("system and schedule disagree on the extension".into())),
    };
    for l in &schedule.links {
        for cnt in [l.n, l.k, l.m] {
            if c.mu_plus.powf(cnt as f64) >= GROWTH_CAP {
                return Err(OrbitError::Invalid(format!(
                    "μ₊^{cnt} exceeds {GROWTH_CAP:e}; the orbit cannot be represented in double precision"
                )));
            }
        }
    }
    let labels = core_labels(m, n);
    let twist = &model.twist;
    let leaves = &schedule.leaf_ps;
    let mut q0 = vec![system.q_start; n];
    let mut cores: Vec<(Window, NodeInfo)> = Vec::new();
    let mut link_jumps: Vec<HomoclinicJump> = Vec::new();
    let mut step = 0u64;
    for (i, link) in schedule.links.iter().enumerate() {
        let pstar = vec![leaves[i]; n];
        let mk = |center: Vec<f64>, r: &crate::schedule::StageRatios, q_exit: bool| {
            core_window(CoreWindowSpec { center, ratios: r.as_array(), q_exit, m, n, labels: &labels })
        };
        let (qn, pn) = twist.apply(&q0, &pstar, link.n as i64)?;
        let (qk, pk) = twist.apply(&qn, &pn, link.k as i64)?;
        let (qm, pm) = twist.apply(&qk, &pk, link.m as i64)?;
        let q_prime: Vec<f64> = qm.iter().map(|q| q + c.omega_prime).collect();
        let node = |stage, step| NodeInfo { link: i, stage, step, leaf_p: leaves[i] };
        if ext.is_none() || i == 0 {
            cores.push((mk(assemble(m, n, c.nu, 0.0, &q0, &pstar), &link.plain, false)?, node(Stage::Plain, step)));
        }
        step += link.n;
        cores.push((mk(assemble(m, n, 0.0, 0.0, &qn, &pn), &link.tilde, false)?, node(Stage::Tilde, step)));
        step += link.k;
        cores.push((mk(assemble(m, n, 0.0, 0.0, &qk, &pk), &link.hat, true)?, node(Stage::Hat, step)));
        step += link.m;
        let prime_center = assemble(m, n, 0.0, c.nu_prime, &q_prime, &pm);
        cores.push((mk(prime_center.clone(), &link.prime, true)?, node(Stage::Prime, step)));
        if i + 1 < schedule.links.len() {
            let next_p = vec![leaves[i + 1]; n];
            link_jumps.push(HomoclinicJump {
                derivative: system.jump_derivative.clone(),
                r_prime: system.r_prime,
                center_minus: prime_center,
                center_plus: assemble(m, n, c.nu, 0.0, &q_prime, &next_p),
                radius: link.prime.max(),
                extra: ext.map_or(0, |(map, _, _)| map.ell1 + map.ell2),
            });
        }
        q0 = q_prime;
    }
    let mut maps: Vec<Arc<dyn AlignMap>> = Vec::new();
    let mut counts = Vec::new();
    let mut jumps = Vec::new();
    for (i, link) in schedule.links.iter().enumerate() {
        for (t, cnt) in [link.n, link.k, link.m].into_iter().enumerate() {
            let it: Arc<dyn AlignMap> = match ext {
                Some((psi, _, _)) => Arc::new(Iterate::new(psi.clone(), cnt as usize)),
                None => Arc::new(Iterate::new(model.clone(), cnt as usize)),
            };
            if ext.is_some() && t == 0 && i > 0 {
                let j = link_jumps[i - 1].clone();
                maps.push(Arc::new(Compose { maps: vec![Arc::new(j.clone()), it] }));
                jumps.push(Some(j));
            } else {
                maps.push(it);
                jumps.push(None);
            }
            counts.push(cnt);
        }
        if ext.is_none() && i + 1 < schedule.links.len() {
            maps.push(Arc::new(link_jumps[i].clone()));
            counts.push(0);
            jumps.push(Some(link_jumps[i].clone()));
        }
    }
    let mut blocks = Vec::with_capacity(cores.len());
    let mut windows = Vec::with_capacity(cores.len());
    let mut nodes = Vec::with_capacity(cores.len());
    for (j, (core, info)) in cores.into_iter().enumerate() {
        match ext {
            None => {
                windows.push(core.clone());
                blocks.push(vec![core]);
            }
            Some((_, params, block)) => {
                let ew = &block.windows[j];
                let theta_c: Vec<f64> = ew.theta_lower.iter().zip(&ew.theta_upper).map(|(l, h)| 0.5 * (l + h)).collect();
                let theta_h: Vec<f64> = ew.theta_lower.iter().zip(&ew.theta_upper).map(|(l, h)| 0.5 * (h - l)).collect();
                let floor = block.c_j * c.epsilon.powf(block.big_l) / 4.0 + 1e-9 * (j as f64 + 1.0) * f64::from(block.c_j == 0.0);
                let xi_h = vec![ew.xi_half_width.max(floor); params.ell2];
                let theta = entry_only(Axis::Theta, &theta_c, &theta_h)?;
                let xi = entry_only(Axis::Xi, &params.xi_star, &xi_h)?;
                windows.push(core.product(&theta)?.product(&xi)?);
                blocks.push(vec![core, theta, xi]);
            }
        }
        nodes.push(info);
    }
    if maps.len() + 1 != windows.len() {
        return Err(OrbitError::Invalid(format!("plan has {} windows and {} maps", windows.len(), maps.len())));
    }
    Ok(ChainPlan { blocks, windows, maps, nodes, counts, jumps })
}

/// Checks every consecutive pair of the plan.
pub fn verify_plan(plan: &ChainPlan, samples: usize) -> Result<Vec<AlignmentReport>, OrbitError> {
    let mut reports = Vec::with_capacity(plan.maps.len());
    for (j, f) in plan.maps.iter().enumerate() {
        let (a, b) = (&plan.blocks[j], &plan.blocks[j + 1]);
        let report = if a.len() == 1 {
            check_alignment(&a[0], &b[0], f.as_ref(), samples)?
        } else {
            check_block_alignment(a, b, f.as_ref(), samples, 1)?
        };
        if !report.aligned {
            let from = &plan.nodes[j];
            let to = &plan.nodes[j + 1];
            let detail = report
                .witness
                .as_ref()
                .map(|w| format!("{} check on block {}: {} (clearance {:.3e})", w.check, w.block, w.detail, w.clearance))
                .unwrap_or_else(|| format!("margin {:.3e}", report.margin));
            return Err(OrbitError::Alignment {
                link: from.link,
                stage: format!("{}→{}", from.stage.name(), to.stage.name()),
                detail,
            });
        }
        tracing::debug!(transition = j, margin = report.margin, "aligned");
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafVisit {
    pub link: usize,
    pub step: u64,
    pub point: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub points: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    /// distance of each window point to its link's leaf
    pub point_leaf_distances: Vec<f64>,
    /// closest approach to the leaf per link
    pub leaf_distances: Vec<f64>,
    pub iterate_counts: Vec<[u64; 3]>,
    pub total_steps: u64,
    pub p_drift: f64,
    pub nodes: Vec<NodeInfo>,
    pub visits: Vec<LeafVisit>,
    pub margins: Vec<f64>,
    pub extended: bool,
    /// `max |ξ − ξ*|` over all iterates
    pub xi_excursion: Option<f64>,
    /// every window point lies in its Ξ_j
    pub xi_in_tube: Option<bool>,
    pub bisection_depth: usize,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub samples: usize,
    pub extract: ExtractOptions,
}

impl RunOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            samples: cfg.samples,
            extract: ExtractOptions { beam_width: cfg.beam_width, depth: cfg.depth, tol: cfg.tol, ..ExtractOptions::default() },
        }
    }
}

fn leaf_distance(z: &[f64], m: usize, n: usize, pstar: f64) -> f64 {
    let su = z[..2 * m].iter().map(|v| v.abs()).fold(0.0, f64::max);
    let p = z[2 * m + n..2 * m + 2 * n].iter().map(|v| (v - pstar).abs()).fold(0.0, f64::max);
    su.max(p)
}

/// Builds, verifies and follows the window chain of `schedule`.
pub fn run_diffusion(system: &DiffusionSystem, schedule: &ChainSchedule, opts: &RunOptions) -> Result<OrbitRecord, OrbitError> {
    let plan = build_plan(system, schedule)?;
    let reports = verify_plan(&plan, opts.samples)?;
    let orbit = extract_orbit(&plan.windows, &plan.maps, &opts.extract)?;
    let (m, n) = (system.model.m, system.model.n());
    let stepper: Box<dyn Fn(&[f64]) -> Vec<f64>> = match &system.extension {
        Some((psi, _)) => {
            let psi = psi.clone();
            Box::new(move |x: &[f64]| Step::step(&psi, x))
        }
        None => {
            let model = system.model.clone();
            Box::new(move |x: &[f64]| Step::step(&model, x))
        }
    };
    let point_leaf_distances: Vec<f64> = orbit
        .points
        .iter()
        .zip(&plan.nodes)
        .map(|(z, info)| leaf_distance(z, m, n, info.leaf_p))
        .collect();

    // closest approach to the leaf along each K-stretch; ξ excursion along every leg
    let xi_ref = system.extension.as_ref().map(|(_, p)| p.xi_star.clone());
    let xi_off = 2 * (m + n) + system.extension.as_ref().map_or(0, |(psi, _)| psi.ell1);
    let xi_dev = |z: &[f64]| -> f64 {
        xi_ref.as_ref().map_or(0.0, |xs| xs.iter().enumerate().map(|(i, x)| (z[xi_off + i] - x).abs()).fold(0.0, f64::max))
    };
    let mut visits = Vec::new();
    let mut xi_max: f64 = orbit.points.first().map_or(0.0, |z| xi_dev(z));
    for (j, z0) in orbit.points.iter().enumerate().take(plan.maps.len()) {
        let info = &plan.nodes[j];
        let mut z = z0.clone();
        if let Some(jump) = &plan.jumps[j] {
            z = jump.apply_checked(&z)?;
            xi_max = xi_max.max(xi_dev(&z));
        }
        let track = info.stage == Stage::Tilde;
        let mut best = (leaf_distance(&z, m, n, info.leaf_p), 0u64, z.clone());
        for t in 1..=plan.counts[j] {
            z = stepper(&z);
            xi_max = xi_max.max(xi_dev(&z));
            if track {
                let d = leaf_distance(&z, m, n, info.leaf_p);
                if d < best.0 {
                    best = (d, t, z.clone());
                }
            }
        }
        if track {
            visits.push(LeafVisit { link: info.link, step: info.step + best.1, point: best.2, distance: best.0 });
        }
    }
    let xi_in_tube = schedule.extended.as_ref().map(|block| {
        orbit.points.iter().zip(&plan.windows).all(|(z, w)| {
            let _ = block;
            w.membership(z).is_ok_and(|mm| mm != Membership::Outside)
        })
    });
    let p_idx = 2 * m + n;
    let p_drift = orbit.points.last().unwrap()[p_idx] - orbit.points[0][p_idx];
    Ok(OrbitRecord {
        leaf_distances: visits.iter().map(|v| v.distance).collect(),
        iterate_counts: schedule.links.iter().map(|l| [l.n, l.k, l.m]).collect(),
        total_steps: schedule.total_steps,
        p_drift,
        nodes: plan.nodes.clone(),
        visits,
        margins: reports.iter().map(|r| r.margin).collect(),
        extended: system.extension.is_some(),
        xi_excursion: xi_ref.as_ref().map(|_| xi_max),
        xi_in_tube,
        bisection_depth: orbit.bisection_depth,
        newton_iterations: orbit.newton_iterations,
        point_leaf_distances,
        residuals: orbit.residuals,
        points: orbit.points,
    })
}

impl OrbitRecord {
    /// CSV with one row per window point and one `visit` row per link.
    pub fn write_csv<W: Write>(&self, out: W, m: usize, n: usize, ell1: usize, ell2: usize) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["link".to_string(), "stage".into(), "step".into()];
        for (name, cnt) in [("s", m), ("u", m), ("q", n), ("p", n), ("theta", ell1), ("xi", ell2)] {
            for i in 0..cnt {
                header.push(format!("{name}{}", i + 1));
            }
        }
        header.push("residual".into());
        header.push("leaf_distance".into());
        w.write_record(&header)?;
        let dim = 2 * (m + n) + ell1 + ell2;
        let fmt = |v: f64| format!("{v:e}");
        let mut visits = self.visits.iter().peekable();
        for (j, (z, info)) in self.points.iter().zip(&self.nodes).enumerate() {
            let mut row = vec![(info.link + 1).to_string(), info.stage.name().to_string(), info.step.to_string()];
            row.extend(z[..dim].iter().map(|&v| fmt(v)));
            row.push(fmt(if j == 0 { 0.0 } else { self.residuals[j - 1] }));
            row.push(fmt(self.point_leaf_distances[j]));
            w.write_record(&row)?;
            if info.stage == Stage::Tilde {
                if let Some(v) = visits.next_if(|v| v.link == info.link) {
                    let mut row = vec![(v.link + 1).to_string(), "visit".to_string(), v.step.to_string()];
                    row.extend(v.point[..dim].iter().map(|&x| fmt(x)));
                    row.push(fmt(0.0));
                    row.push(fmt(v.distance));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx > 0.0 && sxy.is_finite() {
        Some(sxy / sxx)
    } else {
        None
    }
}
