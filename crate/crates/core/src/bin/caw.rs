//! `caw`: alignment checks, shear audits, schedules, diffusion runs and
//! ε-sweeps, each writing its artifact plus a manifest.

use anyhow::Context;
use caw::config::RunConfig;
use caw::maps::{AffineMap, AlignMap, Iterate};
use caw::orbit::{run_diffusion, DiffusionSystem, OrbitError, RunOptions};
use caw::schedule::{ChainSchedule, ScheduleError};
use caw::sweep::scaling_sweep;
use caw::twist::shear_audit;
use caw::window::Window;
use caw::check_alignment;
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "caw", version, about = "Correctly aligned windows along a normally hyperbolic cylinder")]
struct Cli {
    /// Worker threads for parallel stages
    #[arg(long, global = true, default_value_t = default_jobs())]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Subcommand)]
enum Command {
    /// Check that window w1 is correctly aligned with w2 under a map
    CheckAlign {
        #[arg(long)]
        w1: PathBuf,
        #[arg(long)]
        w2: PathBuf,
        /// `affine:a11,...;b1,...[;amp,freq]` or `phi:N` (needs --config)
        #[arg(long)]
        map: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value = "alignment.json")]
        out: PathBuf,
    },
    /// Compare measured shear with the lower and upper bounds
    ShearAudit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        grid: usize,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value = "shear.csv")]
        out: PathBuf,
    },
    /// Solve the iterate counts and aspect ratios of a chain
    Schedule {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `leaves` in the config
        #[arg(long)]
        leaves: Option<usize>,
        #[arg(long, default_value = "schedule.json")]
        out: PathBuf,
    },
    /// Verify the chain and extract a drifting orbit
    Diffuse {
        #[arg(long)]
        config: PathBuf,
        /// Precomputed schedule; solved from the config when absent
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value = "orbit.csv")]
        out: PathBuf,
    },
    /// Diffusion time against ε over `epsilon_list`
    Scaling {
        #[arg(long)]
        config: PathBuf,
        /// Also extract an orbit at every ε
        #[arg(long)]
        orbits: bool,
        #[arg(long, default_value_t = 0.3)]
        tolerance: f64,
        #[arg(long, default_value = "scaling.csv")]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes 2 and 1.
enum Failure {
    Infeasible { witness: serde_json::Value, message: String },
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn schedule_failure(e: ScheduleError) -> Failure {
    match &e {
        ScheduleError::Invalid(_) => Failure::Usage(e.into()),
        _ => Failure::Infeasible { witness: witness_json(&e), message: e.to_string() },
    }
}

fn witness_json(e: &ScheduleError) -> serde_json::Value {
    match e {
        ScheduleError::Infeasible(w) => serde_json::to_value(w).expect("witness serializes"),
        ScheduleError::Escape { window, half_width, a_star, minimal_l } => serde_json::json!({
            "inequality": "xi-escape",
            "window": window,
            "half_width": half_width,
            "a_star": a_star,
            "minimal_L": minimal_l,
        }),
        other => serde_json::json!({ "detail": other.to_string() }),
    }
}

fn orbit_failure(e: OrbitError) -> Failure {
    match e {
        OrbitError::Schedule(s) => schedule_failure(s),
        OrbitError::Alignment { link, ref stage, ref detail } => Failure::Infeasible {
            witness: serde_json::json!({ "check": "alignment", "link": link + 1, "stage": stage, "detail": detail }),
            message: e.to_string(),
        },
        OrbitError::NoCandidate | OrbitError::NoConvergence { .. } | OrbitError::Containment { .. } => {
            Failure::Infeasible { witness: serde_json::json!({ "check": "extraction", "detail": e.to_string() }), message: e.to_string() }
        }
        other => Failure::Usage(other.into()),
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    status: String,
    config_hash: String,
    caw_version: String,
    versions: serde_json::Value,
    wall_time_s: f64,
    artifacts: Vec<Artifact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    witness: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<serde_json::Value>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn read_config(path: &Path) -> anyhow::Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    cfg.validate()?;
    Ok((cfg, sha256_hex(text.as_bytes())))
}

struct Outcome {
    out: PathBuf,
    hash: String,
    artifact: Option<Vec<u8>>,
    summary: Option<serde_json::Value>,
    failure: Option<Failure>,
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    match cli.command {
        Command::CheckAlign { w1, w2, map, config, samples, out } => {
            let t1 = std::fs::read_to_string(&w1).with_context(|| format!("cannot read {}", w1.display()))?;
            let t2 = std::fs::read_to_string(&w2).with_context(|| format!("cannot read {}", w2.display()))?;
            let a = Window::from_json(&t1).map_err(anyhow::Error::from)?;
            let b = Window::from_json(&t2).map_err(anyhow::Error::from)?;
            let mut hasher = Sha256::new();
            hasher.update(t1.as_bytes());
            hasher.update(t2.as_bytes());
            hasher.update(map.as_bytes());
            let f: Box<dyn AlignMap> = if let Some(steps) = map.strip_prefix("phi:") {
                let steps: usize = steps.trim().parse().context("phi:N needs an integer N")?;
                let path = config.as_ref().context("phi:N needs --config")?;
                let (cfg, h) = read_config(path)?;
                hasher.update(h.as_bytes());
                Box::new(Iterate::new(cfg.normal_form().map_err(anyhow::Error::from)?, steps))
            } else {
                Box::new(AffineMap::parse(&map).map_err(anyhow::Error::from)?)
            };
            let report = check_alignment(&a, &b, f.as_ref(), samples).map_err(anyhow::Error::from)?;
            let failure = (!report.aligned).then(|| Failure::Infeasible {
                witness: serde_json::to_value(&report.witness).expect("witness serializes"),
                message: "windows are not correctly aligned".into(),
            });
            Ok(Outcome {
                out,
                hash: hex::encode(hasher.finalize()),
                artifact: Some(report.to_json().into_bytes()),
                summary: Some(serde_json::json!({ "aligned": report.aligned, "margin": report.margin })),
                failure,
            })
        }
        Command::ShearAudit { config, grid, instances, out } => {
            let (cfg, hash) = read_config(&config)?;
            let map = cfg.twist().map_err(anyhow::Error::from)?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build().map_err(anyhow::Error::from)?;
            let rows = pool.install(|| shear_audit(&map, cfg.seed, instances, grid)).map_err(anyhow::Error::from)?;
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["axis_j", "N", "delta_lower", "delta_measured", "omega_upper", "omega_measured"])
                    .map_err(anyhow::Error::from)?;
                for r in &rows {
                    w.write_record([
                        r.axis_j.to_string(),
                        r.n_iter.to_string(),
                        format!("{:e}", r.delta_lower),
                        format!("{:e}", r.delta_measured),
                        format!("{:e}", r.omega_upper),
                        format!("{:e}", r.omega_measured),
                    ])
                    .map_err(anyhow::Error::from)?;
                }
                w.flush().map_err(anyhow::Error::from)?;
            }
            let violations = rows.iter().filter(|r| !r.brackets()).count();
            let failure = (violations > 0).then(|| Failure::Infeasible {
                witness: serde_json::to_value(rows.iter().find(|r| !r.brackets())).expect("row serializes"),
                message: format!("{violations} rows violate the shear bounds"),
            });
            Ok(Outcome {
                out,
                hash,
                artifact: Some(buf),
                summary: Some(serde_json::json!({ "rows": rows.len(), "violations": violations })),
                failure,
            })
        }
        Command::Schedule { config, leaves, out } => {
            let (mut cfg, hash) = read_config(&config)?;
            if let Some(l) = leaves {
                cfg.leaves = l;
            }
            match cfg.schedule() {
                Ok(s) => Ok(Outcome {
                    out,
                    hash,
                    summary: Some(serde_json::json!({
                        "links": s.links.len(),
                        "total_steps": s.total_steps,
                        "predicted_exponent": s.predicted_exponent,
                    })),
                    artifact: Some(s.to_json().into_bytes()),
                    failure: None,
                }),
                Err(e) => Ok(Outcome { out, hash, artifact: None, summary: None, failure: Some(schedule_failure(e)) }),
            }
        }
        Command::Diffuse { config, schedule, out } => {
            let (cfg, mut hash) = read_config(&config)?;
            let sched = match &schedule {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
                    hash = sha256_hex(format!("{hash}{}", sha256_hex(text.as_bytes())).as_bytes());
                    ChainSchedule::from_json(&text).map_err(anyhow::Error::from)?
                }
                None => match cfg.schedule() {
                    Ok(s) => s,
                    Err(e) => return Ok(Outcome { out, hash, artifact: None, summary: None, failure: Some(schedule_failure(e)) }),
                },
            };
            let system = DiffusionSystem::from_config(&cfg).map_err(|e| Failure::Usage(e.into()))?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build().map_err(anyhow::Error::from)?;
            match pool.install(|| run_diffusion(&system, &sched, &RunOptions::from_config(&cfg))) {
                Ok(rec) => {
                    let ext = cfg.extension();
                    let (e1, e2) = ext.as_ref().map_or((0, 0), |e| (e.ell1, e.ell2));
                    let mut buf = Vec::new();
                    rec.write_csv(&mut buf, cfg.m, cfg.n, e1, e2).map_err(anyhow::Error::from)?;
                    let max_res = rec.residuals.iter().copied().fold(0.0, f64::max);
                    let max_leaf = rec.leaf_distances.iter().copied().fold(0.0, f64::max);
                    Ok(Outcome {
                        out,
                        hash,
                        artifact: Some(buf),
                        summary: Some(serde_json::json!({
                            "windows": rec.points.len(),
                            "total_steps": rec.total_steps,
                            "p_drift": rec.p_drift,
                            "max_residual": max_res,
                            "max_leaf_distance": max_leaf,
                            "xi_excursion": rec.xi_excursion,
                            "xi_in_tube": rec.xi_in_tube,
                        })),
                        failure: None,
                    })
                }
                Err(e) => Ok(Outcome { out, hash, artifact: None, summary: None, failure: Some(orbit_failure(e)) }),
            }
        }
        Command::Scaling { config, orbits, tolerance, out } => {
            let (cfg, hash) = read_config(&config)?;
            let eps = cfg.epsilon_list.clone().context("scaling needs epsilon_list in the config")?;
            let report = scaling_sweep(&cfg, &eps, cli.jobs, orbits, tolerance).map_err(schedule_failure)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf).map_err(anyhow::Error::from)?;
            let failed: Vec<&caw::sweep::ScalingPoint> = report.points.iter().filter(|p| p.error.is_some()).collect();
            let failure = (!failed.is_empty()).then(|| Failure::Infeasible {
                witness: serde_json::json!(failed
                    .iter()
                    .map(|p| serde_json::json!({ "epsilon": p.epsilon, "inequality": p.witness, "detail": p.error }))
                    .collect::<Vec<_>>()),
                message: format!("{} of {} sweep points failed", failed.len(), report.points.len()),
            });
            Ok(Outcome {
                out,
                hash,
                artifact: Some(buf),
                summary: Some(serde_json::json!({
                    "predicted_slope": report.predicted_slope,
                    "fitted_slope": report.fitted_slope,
                    "within_tolerance": report.within_tolerance,
                })),
                failure,
            })
        }
    }
}

fn init_logging() {
    let level = match std::env::var("CAW_LOG").unwrap_or_default().to_ascii_lowercase().as_str() {
        "error" => tracing::Level::ERROR,
        "info" => tracing::Level::INFO,
        "debug" => tracing::Level::DEBUG,
        _ => tracing::Level::WARN,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let command = std::env::args().nth(1).unwrap_or_default();
    let start = Instant::now();
    let outcome = match run(cli) {
        Ok(o) => o,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
        Err(Failure::Infeasible { message, .. }) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    };
    let mut artifacts = Vec::new();
    if let Some(bytes) = &outcome.artifact {
        if let Err(e) = write_atomic(&outcome.out, bytes) {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
        artifacts.push(Artifact { path: outcome.out.display().to_string(), sha256: sha256_hex(bytes) });
    }
    let (status, witness, code) = match outcome.failure {
        None => ("ok", None, 0),
        Some(Failure::Infeasible { witness, message }) => {
            eprintln!("{message}");
            ("infeasible", Some(witness), 2)
        }
        Some(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let manifest = Manifest {
        command,
        status: status.into(),
        config_hash: outcome.hash,
        caw_version: env!("CARGO_PKG_VERSION").into(),
        versions: serde_json::json!({
            "caw-core": env!("CARGO_PKG_VERSION"),
            "manifest_format": 1,
        }),
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts,
        witness,
        summary: outcome.summary,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = write_atomic(&manifest_path(&outcome.out), text.as_bytes()) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}
