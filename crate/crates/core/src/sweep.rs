//! Diffusion time against ε: one schedule (and optionally one orbit) per ε,
//! run on a worker pool, with a log-log fit of the time for unit drift.

use crate::config::RunConfig;
use crate::orbit::{fit_loglog_slope, run_diffusion, DiffusionSystem, RunOptions};
use crate::schedule::{leaves_required, ScheduleError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub epsilon: f64,
    /// `None` when the run was rejected; see `error`
    pub links: Option<usize>,
    pub total_steps: Option<u64>,
    /// leaf-to-leaf drift covered by the chain
    pub scheduled_drift: Option<f64>,
    pub steps_per_unit_drift: Option<f64>,
    pub mean_k: Option<f64>,
    /// p-drift of the extracted orbit, when orbits were requested and fit
    /// in double precision
    pub orbit_drift: Option<f64>,
    pub error: Option<String>,
    /// name of the failing inequality for infeasible schedules
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// `−(ρ+τ+υ)`
    pub predicted_slope: f64,
    pub fitted_slope: Option<f64>,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

impl ScalingReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epsilon",
            "total_steps",
            "p_drift",
            "fitted_slope",
            "links",
            "steps_per_unit_drift",
            "mean_k",
            "orbit_drift",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for p in &self.points {
            w.write_record([
                format!("{:e}", p.epsilon),
                p.total_steps.map_or(String::new(), |v| v.to_string()),
                opt(p.orbit_drift.or(p.scheduled_drift)),
                opt(self.fitted_slope),
                p.links.map_or(String::new(), |v| v.to_string()),
                opt(p.steps_per_unit_drift),
                opt(p.mean_k),
                opt(p.orbit_drift),
                p.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Schedules enough leaves for `cfg.drift` (as many as fit in `[0,1]`) at
/// one value of ε.
pub fn scaling_point(cfg: &RunConfig, epsilon: f64, orbits: bool) -> ScalingPoint {
    let cfg = cfg.with_epsilon(epsilon);
    let mut point = ScalingPoint {
        epsilon,
        links: None,
        total_steps: None,
        scheduled_drift: None,
        steps_per_unit_drift: None,
        mean_k: None,
        orbit_drift: None,
        error: None,
        witness: None,
    };
    if let Err(e) = cfg.validate() {
        point.error = Some(e.to_string());
        return point;
    }
    let spacing = cfg.leaf_spacing();
    let fit = ((1.0 - cfg.leaf_start) / spacing).floor() as usize + 1;
    let count = (leaves_required(cfg.drift, spacing) + 1).min(fit).max(2);
    let cfg = RunConfig { leaves: count, ..cfg };
    let schedule = match cfg.schedule() {
        Ok(s) => s,
        Err(e) => {
            point.witness = e.witness().map(|w| w.inequality.clone());
            point.error = Some(e.to_string());
            return point;
        }
    };
    let drift = (count - 1) as f64 * spacing;
    point.links = Some(schedule.links.len());
    point.total_steps = Some(schedule.total_steps);
    point.scheduled_drift = Some(drift);
    point.steps_per_unit_drift = Some(schedule.total_steps as f64 / drift);
    point.mean_k = Some(schedule.links.iter().map(|l| l.k as f64).sum::<f64>() / schedule.links.len() as f64);
    if orbits {
        let run = DiffusionSystem::from_config(&cfg)
            .and_then(|sys| run_diffusion(&sys, &schedule, &RunOptions::from_config(&cfg)));
        match run {
            Ok(r) => point.orbit_drift = Some(r.p_drift),
            Err(e) => point.error = Some(format!("orbit: {e}")),
        }
    }
    point
}

/// Sweeps `epsilons` on a pool of `jobs` workers; points keep input order.
pub fn scaling_sweep(
    cfg: &RunConfig,
    epsilons: &[f64],
    jobs: usize,
    orbits: bool,
    tolerance: f64,
) -> Result<ScalingReport, ScheduleError> {
    let orders = cfg.orders()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ScheduleError::Invalid(e.to_string()))?;
    let points: Vec<ScalingPoint> =
        pool.install(|| epsilons.par_iter().map(|&e| scaling_point(cfg, e, orbits)).collect());
    let ok: Vec<&ScalingPoint> = points.iter().filter(|p| p.steps_per_unit_drift.is_some()).collect();
    let fitted_slope = if ok.len() == points.len() {
        let x: Vec<f64> = ok.iter().map(|p| p.epsilon).collect();
        let y: Vec<f64> = ok.iter().filter_map(|p| p.steps_per_unit_drift).collect();
        fit_loglog_slope(&x, &y)
    } else {
        None
    };
    let predicted_slope = -(orders.rho + orders.tau + orders.upsilon);
    Ok(ScalingReport {
        within_tolerance: fitted_slope.is_some_and(|s| (s - predicted_slope).abs() <= tolerance),
        points,
        predicted_slope,
        fitted_slope,
        tolerance,
    })
}
