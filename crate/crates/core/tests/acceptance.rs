//! Acceptance run: one PASS/FAIL line per criterion, then a determinism
//! rerun of everything on a single worker thread.
//!
//! Criterion 7 is a known failure: the literal configuration violates the
//! k-admissibility gate. The process exits non-zero only if a criterion
//! other than 7 fails, or if 7 fails for any other reason.

mod common;

use std::time::{Duration, Instant};

use caw::config::RunConfig;
use caw::orbit::{fit_loglog_slope, run_diffusion, DiffusionSystem, RunOptions};
use caw::schedule::{build_chain, check_link, compute_orders, leaf_sequence, ModelConstants, ScheduleError};
use caw::sweep::scaling_sweep;
use caw::twist::shear_audit;
use caw::{check_alignment, TwistMap};
use common::chain::displayed;
use common::{brute_force, brute_force_against, eval, random_instance, samples_for, Instance};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
    /// bytes compared across the two runs
    artifact: Vec<u8>,
    elapsed: Duration,
}

fn timed(f: impl FnOnce() -> (bool, String, Vec<u8>)) -> Outcome {
    let start = Instant::now();
    let (pass, detail, artifact) = f();
    Outcome { pass, detail, artifact, elapsed: start.elapsed() }
}

fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..200).map(|_| random_instance(&mut rng)).collect()
}

fn criterion1(set: &[Instance]) -> (bool, String, Vec<u8>) {
    let rows: Vec<(bool, bool, String)> = set
        .par_iter()
        .map(|inst| {
            let s = samples_for(inst.w1.dim());
            let r = check_alignment(&inst.w1, &inst.w2, &inst.map, s).expect("engine runs");
            let oracle = brute_force(&inst.w1, &inst.w2, &eval(&inst.map), 10 * s).is_ok();
            (r.aligned, oracle, r.to_json())
        })
        .collect();
    let agree = rows.iter().filter(|(e, o, _)| e == o).count();
    let aligned = rows.iter().filter(|(e, _, _)| *e).count();
    let artifact = rows.iter().map(|r| r.2.as_str()).collect::<Vec<_>>().join("\n").into_bytes();
    (agree == set.len(), format!("{agree}/{} agree with the 10x oracle, {aligned} aligned", set.len()), artifact)
}

/// `p_i(x) = a_i sin(ω_i·x + φ_i)` with `|a_i| < bound`.
struct Perturbation {
    amp: Vec<f64>,
    freq: Vec<DVector<f64>>,
    phase: Vec<f64>,
}

impl Perturbation {
    fn draw<R: Rng>(rng: &mut R, d: usize, bound: f64) -> Self {
        Self {
            amp: (0..d).map(|_| rng.gen_range(-0.98..0.98) * bound).collect(),
            freq: (0..d).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-12.0..12.0))).collect(),
            phase: (0..d).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    fn apply(&self, mut y: Vec<f64>, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        for (i, v) in y.iter_mut().enumerate() {
            *v += self.amp[i] * (self.freq[i].dot(&x) + self.phase[i]).sin();
        }
        y
    }
}

fn criterion2(set: &[Instance]) -> (bool, String, Vec<u8>) {
    let aligned: Vec<(usize, &Instance, f64)> = set
        .iter()
        .enumerate()
        .filter_map(|(i, inst)| {
            let r = check_alignment(&inst.w1, &inst.w2, &inst.map, samples_for(inst.w1.dim())).ok()?;
            r.aligned.then_some((i, inst, r.margin))
        })
        .collect();
    let results: Vec<(usize, usize, String)> = aligned
        .par_iter()
        .map(|&(i, inst, margin)| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let f = eval(&inst.map);
            let density = 3 * samples_for(inst.w1.dim());
            let mut failures = 0;
            let mut log = String::new();
            for _ in 0..100 {
                let p = Perturbation::draw(&mut rng, inst.w1.dim(), margin);
                let g = |x: &[f64]| p.apply(f(x), x);
                if brute_force_against(&inst.w1, &inst.w2, &g, &f, density).is_err() {
                    failures += 1;
                }
                log.push_str(&format!("{:e};", p.amp.iter().fold(0.0f64, |a, v| a.max(v.abs()))));
            }
            (i, failures, log)
        })
        .collect();
    let failures: usize = results.iter().map(|r| r.1).sum();
    let artifact = results.iter().map(|r| format!("{} {} {}\n", r.0, r.1, r.2)).collect::<String>().into_bytes();
    (
        failures == 0,
        format!("{} perturbations of {} aligned instances, {failures} failures", 100 * results.len(), results.len()),
        artifact,
    )
}

fn criterion3() -> (bool, String, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    let mut configs = 0;
    while configs < 100 {
        let eps = rng.gen_range(0.05..0.3);
        let tau = [0.0, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
        let k = rng.gen_range(3.0..8.0);
        let c = rng.gen_range(0.0..2.0);
        let a = rng.gen_range(-0.4..0.4);
        let map = TwistMap::new(1, eps, tau, k, c).unwrap().with_nonlinearity(a).unwrap();
        // configurations without a positive lower bound are skipped
        let Ok(audit) = shear_audit(&map, rng.gen(), 1, 50) else { continue };
        configs += 1;
        rows.extend(audit);
    }
    let bad = rows.iter().filter(|r| !r.brackets()).count();
    let artifact = serde_json::to_vec(&rows).unwrap();
    (bad == 0, format!("{} configurations, {bad} bracket violations", configs), artifact)
}

const ORDER_SETS: [(f64, f64, f64, f64); 3] = [(0.0, 0.0, 0.0, 1.0), (1.0, 1.0, 1.0, 7.0), (1.0, 0.0, 1.0, 5.0)];

fn epsilons() -> Vec<f64> {
    (3..=7).map(|i| 2f64.powi(-i)).collect()
}

fn criterion4() -> (bool, String, Vec<u8>) {
    let mut artifact = Vec::new();
    let (mut links, mut failures) = (0, Vec::new());
    for (s, t, u, k) in ORDER_SETS {
        let o = compute_orders(s, t, u, k).unwrap();
        for e in epsilons() {
            let c = ModelConstants::benchmark(e);
            match build_chain(&o, &c, &leaf_sequence(0.05, 0.1 * e.powf(u), 3)) {
                Ok(chain) => {
                    for l in &chain.links {
                        links += 1;
                        let lib = check_link(l, &o, &chain.constants).iter().all(|i| i.holds());
                        let own = displayed(l, &o, &chain.constants).iter().all(|(_, ok)| *ok);
                        if !(lib && own) {
                            failures.push(format!("({s},{t},{u},{k}) eps {e} link {}", l.index));
                        }
                    }
                    artifact.extend(chain.to_json().into_bytes());
                }
                Err(err) => failures.push(format!("({s},{t},{u},{k}) eps {e}: {err}")),
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("{links} links over 3 order sets x 5 epsilons re-verify (16 inequalities each)")
    } else {
        format!("{} failures: {}", failures.len(), failures.join("; "))
    };
    (failures.is_empty(), detail, artifact)
}

fn criterion5() -> (bool, String, Vec<u8>) {
    let eps = epsilons();
    let mut worst_k: f64 = 0.0;
    let mut worst_stage: f64 = 0.0;
    let mut worst_at = String::new();
    let mut artifact = String::new();
    for (s, t, u, k) in ORDER_SETS {
        let o = compute_orders(s, t, u, k).unwrap();
        let mut ks = Vec::new();
        let mut ratios = vec![Vec::new(); 16];
        for &e in &eps {
            let chain = build_chain(&o, &ModelConstants::benchmark(e), &leaf_sequence(0.05, 0.1 * e.powf(u), 2)).unwrap();
            let l = &chain.links[0];
            ks.push(l.k as f64);
            for (j, r) in [&l.plain, &l.tilde, &l.hat, &l.prime].iter().enumerate() {
                for (q, v) in r.as_array().into_iter().enumerate() {
                    ratios[4 * j + q].push(v);
                }
            }
        }
        let k_slope = fit_loglog_slope(&eps, &ks).unwrap_or(f64::NAN);
        let k_err = (k_slope + o.rho + o.tau).abs();
        worst_k = worst_k.max(if k_err.is_nan() { f64::INFINITY } else { k_err });
        artifact.push_str(&format!("({s},{t},{u},{k}) K slope {k_slope:e}\n"));
        let table = o.table();
        for (j, series) in ratios.iter().enumerate() {
            let slope = fit_loglog_slope(&eps, series).unwrap_or(f64::NAN);
            let err = (slope - table[j / 4][j % 4]).abs();
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst_stage {
                worst_stage = err;
                let stage = ["plain", "tilde", "hat", "prime"][j / 4];
                worst_at = format!("{stage} {} at ({s},{t},{u},{k})", ["alpha", "beta", "gamma", "delta"][j % 4]);
            }
            artifact.push_str(&format!("  stage {} ratio {} slope {slope:e}\n", j / 4, j % 4));
        }
    }
    (
        worst_k <= 0.3 && worst_stage <= 0.15,
        format!("worst K-slope error {worst_k:.3} (tol 0.3), worst stage-slope error {worst_stage:.3} (tol 0.15, {worst_at})"),
        artifact.into_bytes(),
    )
}

fn diffuse(cfg: &RunConfig) -> Result<(caw::orbit::OrbitRecord, Vec<u8>), String> {
    let sys = DiffusionSystem::from_config(cfg).map_err(|e| e.to_string())?;
    let sched = cfg.schedule().map_err(|e| e.to_string())?;
    let rec = run_diffusion(&sys, &sched, &RunOptions::from_config(cfg)).map_err(|e| e.to_string())?;
    let (e1, e2) = cfg.extension().map_or((0, 0), |e| (e.ell1, e.ell2));
    let mut csv = Vec::new();
    rec.write_csv(&mut csv, cfg.m, cfg.n, e1, e2).unwrap();
    Ok((rec, csv))
}

fn criterion6() -> (bool, String, Vec<u8>) {
    let cfg = RunConfig::uniform();
    match diffuse(&cfg) {
        Ok((rec, csv)) => {
            let res = rec.residuals.iter().copied().fold(0.0, f64::max);
            let leaf = rec.leaf_distances.iter().copied().fold(0.0, f64::max);
            let need = 0.9 - 2.0 * cfg.eta;
            let pass = res <= 1e-9 && leaf < cfg.eta && rec.leaf_distances.len() == 10 && rec.p_drift >= need;
            let detail = format!(
                "max residual {res:.2e}, max leaf distance {leaf:.2e} over {} visits, p_drift {:.4} (need {need:.2})",
                rec.leaf_distances.len(),
                rec.p_drift
            );
            (pass, detail, csv)
        }
        Err(e) => (false, e, Vec::new()),
    }
}

/// `(pass, failed only on k-admissibility, detail, artifact)`.
fn criterion7() -> (bool, bool, String, Vec<u8>) {
    let configs = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let literal = RunConfig::load(&configs.join("sweep.toml")).unwrap();
    let eps = literal.epsilon_list.clone().unwrap();
    let report = scaling_sweep(&literal, &eps, rayon::current_num_threads(), false, 0.3).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let gate_only = report.points.iter().all(|p| p.witness.as_deref() == Some("k-admissibility"));
    let k5 = RunConfig::load(&configs.join("sweep_admissible.toml")).unwrap();
    let diag = scaling_sweep(&k5, &eps, rayon::current_num_threads(), false, 0.3).unwrap();
    diag.write_csv(&mut csv).unwrap();
    let detail = match report.fitted_slope {
        Some(s) => format!("fitted slope {s:.3} vs predicted {:.1}", report.predicted_slope),
        None => format!(
            "sigma=upsilon=0, tau=1, k=3 rejected at every epsilon by {} (k < 2(rho+tau)+1 = 5; predicted slope {:.0}); \
             diagnostic k=5 fits {:.3}",
            report.points.first().and_then(|p| p.witness.clone()).unwrap_or_default(),
            report.predicted_slope,
            diag.fitted_slope.unwrap_or(f64::NAN),
        ),
    };
    (report.within_tolerance, gate_only && report.fitted_slope.is_none(), detail, csv)
}

fn criterion8() -> (bool, String, Vec<u8>) {
    let cfg = RunConfig::extended(10.0);
    let (ten, mut artifact, detail10) = match diffuse(&cfg) {
        Ok((rec, csv)) => {
            let bound = cfg.c_ext.unwrap() * rec.total_steps as f64 * cfg.epsilon.powf(10.0);
            let exc = rec.xi_excursion.unwrap_or(f64::INFINITY);
            let ok = rec.xi_in_tube == Some(true) && exc <= bound && rec.points.len() == 10;
            (ok, csv, format!("L=10: {} windows, xi excursion {exc:.2e} <= {bound:.2e}", rec.points.len()))
        }
        Err(e) => (false, Vec::new(), format!("L=10: {e}")),
    };
    let (three, detail3) = match RunConfig::extended(3.0).schedule() {
        Err(ScheduleError::Escape { window, minimal_l, .. }) => {
            artifact.extend(format!("escape {window} {minimal_l}").into_bytes());
            (true, format!("L=3 escapes at window {window}, minimal L = {minimal_l}"))
        }
        Err(e) => (false, format!("L=3: unexpected {e}")),
        Ok(_) => (false, "L=3: no escape reported".into()),
    };
    (ten && three, format!("{detail10}; {detail3}"), artifact)
}

struct Run {
    outcomes: Vec<Outcome>,
    c7_gate_only: bool,
}

fn run_all() -> Run {
    let set = instances();
    let mut outcomes = vec![timed(|| criterion1(&set)), timed(|| criterion2(&set)), timed(criterion3)];
    outcomes.push(timed(criterion4));
    outcomes.push(timed(criterion5));
    outcomes.push(timed(criterion6));
    let mut gate_only = false;
    outcomes.push(timed(|| {
        let (pass, gate, detail, csv) = criterion7();
        gate_only = gate;
        (pass, detail, csv)
    }));
    outcomes.push(timed(criterion8));
    Run { outcomes, c7_gate_only: gate_only }
}

fn main() {
    let budgets: [Option<u64>; 8] = [Some(60), None, Some(120), None, None, Some(300), Some(900), None];
    let first = run_all();
    let mut unexpected = Vec::new();
    for (i, (o, budget)) in first.outcomes.iter().zip(budgets).enumerate() {
        let n = i + 1;
        let in_time = budget.is_none_or(|b| o.elapsed.as_secs_f64() < b as f64);
        let pass = o.pass && in_time;
        let time = match budget {
            Some(b) => format!(" [{:.1}s, budget {b}s]", o.elapsed.as_secs_f64()),
            None => format!(" [{:.1}s]", o.elapsed.as_secs_f64()),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        let note = if n == 7 && !pass { " (known: literal configuration is inadmissible)" } else { "" };
        println!("criterion {n} {verdict}{note}: {}{time}", o.detail);
        let expected = if n == 7 { pass || first.c7_gate_only } else { pass };
        if !expected {
            unexpected.push(n);
        }
    }

    // rerun everything on one worker thread and compare artifacts
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let second = pool.install(run_all);
    let digest = |run: &Run| -> Vec<String> {
        run.outcomes.iter().map(|o| hex::encode(Sha256::digest(&o.artifact))).collect()
    };
    let (a, b) = (digest(&first), digest(&second));
    let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).map(|i| i + 1).collect();
    let empty = first.outcomes.iter().filter(|o| o.artifact.is_empty()).count();
    if differing.is_empty() {
        println!("criterion 9 PASS: artifacts of criteria 1-8 byte-identical on rerun with one thread ({empty} empty)");
    } else {
        println!("criterion 9 FAIL: artifacts differ for criteria {differing:?}");
        unexpected.push(9);
    }

    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
