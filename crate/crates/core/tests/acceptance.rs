//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 1 3`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3n::diagnostics::{run_suite, SuiteOptions};
use s3n::eval::{auc, rank_sum_prob, EvalReport};
use s3n::game::{simulate, GameConfig};
use s3n::inject::{inject, verify_labels, AnomalyType, InjectionConfig};
use s3n::tensor::{gradcheck, pairwise_sq_dist, Tensor};
use s3n::triplet::batch_triplet_loss;

type Outcome = Result<String, String>;

const S3N: &str = env!("CARGO_BIN_EXE_s3n");

fn s3n(args: &[&str]) -> Result<(), String> {
    let out = Command::new(S3N)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawning s3n: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`s3n {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let report = run_suite(&SuiteOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let worst = report
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let all_below = report.checks.iter().all(|c| c.probes == 100 && c.max_rel_error < 1e-4);
    if report.passed && all_below && elapsed < Duration::from_secs(60) {
        Ok(format!("{worst}; {:.1}s", elapsed.as_secs_f64()))
    } else {
        Err(format!("{worst}; {:.1}s", elapsed.as_secs_f64()))
    }
}

fn enumerate_triplets(z: &[f64], zp: &[f64], n: usize, d: usize, margin: f64) -> f64 {
    let dist = |i: usize, k: usize| -> f64 {
        (0..d).map(|c| (z[i * d + c] - zp[k * d + c]).powi(2)).sum()
    };
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..n {
            if k != i {
                total += (dist(i, i) - dist(i, k) + margin).max(0.0);
            }
        }
    }
    total
}

/// Distance of the closest hinge to its kink; finite differences are only
/// meaningful away from it.
fn min_hinge_gap(z: &Tensor<f64>, zp: &Tensor<f64>, n: usize, margin: f64) -> f64 {
    let y = pairwise_sq_dist(z, zp).unwrap();
    let y = y.data();
    let mut gap = f64::INFINITY;
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            gap = gap.min((y[i * n + i] - y[i * n + k] + margin).abs());
        }
    }
    gap
}

fn triplet_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let margin = 0.2;
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for case in 0..200u64 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let z = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        let zp = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        let got = batch_triplet_loss(&z, &zp, margin).map_err(|e| e.to_string())?.loss;
        let want = enumerate_triplets(z.data(), zp.data(), n, d, margin);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        worst_loss = worst_loss.max(if want == 0.0 { got.abs() } else { rel });
        if !(rel <= 1e-6 || (want == 0.0 && got == 0.0)) {
            return Err(format!("case {case}: loss {got} vs enumeration {want}"));
        }

        // same shape, redrawn until every hinge is clear of its kink
        let (gz, gzp) = loop {
            let a = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
            if min_hinge_gap(&a, &b, n, margin) > 1e-3 {
                break (a, b);
            }
        };
        let report = gradcheck(
            "triplet",
            &[gz, gzp],
            |xs| {
                let o = batch_triplet_loss(&xs[0], &xs[1], margin)?;
                Ok((o.loss, vec![o.grad_anchors, o.grad_positives]))
            },
            32,
            1e-4,
            case,
        )
        .map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(report.max_rel_error);
        if !report.passed {
            return Err(format!("case {case}: gradient rel error {:.2e}", report.max_rel_error));
        }
    }
    Ok(format!(
        "200 batches; worst loss rel error {worst_loss:.1e}, worst gradient rel error {worst_grad:.1e}"
    ))
}

fn brute_force(a: &[f64], b: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in a {
        for &y in b {
            wins += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        }
    }
    wins / (a.len() * b.len()) as f64
}

fn rank_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut tied_instances = 0;
    for case in 0..500 {
        let levels = rng.random_range(2..20);
        let total = rng.random_range(2..=200);
        let scores: Vec<f64> = (0..total)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..total).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let pos: Vec<f64> = scores.iter().zip(&labels).filter(|s| *s.1).map(|s| *s.0).collect();
        let neg: Vec<f64> = scores.iter().zip(&labels).filter(|s| !*s.1).map(|s| *s.0).collect();
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if distinct.len() < scores.len() {
            tied_instances += 1;
        }
        let want = brute_force(&pos, &neg);
        let got_auc = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let got_rank = rank_sum_prob(&pos, &neg).map_err(|e| e.to_string())?;
        let err = (got_auc - want).abs().max((got_rank - want).abs());
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("case {case}: auc {got_auc}, rank-sum {got_rank}, brute force {want}"));
        }
    }
    Ok(format!("500 instances ({tied_instances} with ties); worst difference {worst:.1e}"))
}

fn labeling_correctness() -> Outcome {
    let mut checked = 0;
    let mut frozen_transitions = 0;
    for seed in 0..50u64 {
        let original = simulate(&GameConfig { seed, ..GameConfig::default() }, 300).map_err(|e| e.to_string())?;
        for kind in AnomalyType::ALL {
            let config = InjectionConfig {
                rate: 0.02,
                types: [kind].into_iter().collect(),
                seed: seed * 31 + kind as u64,
                ..InjectionConfig::default()
            };
            let out = inject(&original, &config).map_err(|e| e.to_string())?;
            let ok = verify_labels(&out.trajectory, &original, &out.labels).map_err(|e| e.to_string())?;
            if !ok {
                return Err(format!("seed {seed}, {kind}: labels disagree with the corruption"));
            }
            if out.events.is_empty() {
                return Err(format!("seed {seed}, {kind}: no events placed"));
            }
            if kind == AnomalyType::FreezeSkip {
                for ev in &out.events {
                    // held frames start..start+duration-1; the last transition resumes
                    for t in ev.start..ev.start + ev.duration - 1 {
                        let label = &out.labels[t];
                        if out.trajectory.frame(t) != out.trajectory.frame(t + 1) || label.anomalous {
                            return Err(format!("seed {seed}: freeze-skip transition {t} is not a normal self-transition"));
                        }
                        frozen_transitions += 1;
                    }
                    let resume = ev.start + ev.duration - 1;
                    if !out.labels[resume].anomalous {
                        return Err(format!("seed {seed}: freeze-skip resume {resume} not labelled"));
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} injections verified; {frozen_transitions} freeze-skip hold transitions are exact and normal"
    ))
}

struct Pipeline {
    report: EvalReport,
    elapsed: Duration,
}

fn run_pipeline(
    dir: &Path,
    train_trajectories: usize,
    test_trajectories: usize,
    frames: usize,
    train_flags: &[&str],
) -> Result<Pipeline, String> {
    let started = Instant::now();
    let frames = frames.to_string();
    let (train, held, test) = (dir.join("train"), dir.join("held"), dir.join("test"));
    let (model, scores, report) = (dir.join("model.s3nm"), dir.join("scores.csv"), dir.join("report"));
    s3n(&["generate", "--frames", &frames, "--trajectories", &train_trajectories.to_string(), "--seed", "101", "--out", p(&train)])?;
    s3n(&["generate", "--frames", &frames, "--trajectories", &test_trajectories.to_string(), "--seed", "202", "--out", p(&held)])?;
    s3n(&["inject", "--in", p(&held), "--out", p(&test), "--seed", "303"])?;
    let mut args = vec!["train", "--data", p(&train), "--out", p(&model), "--seed", "404"];
    args.extend_from_slice(train_flags);
    s3n(&args)?;
    s3n(&["score", "--model", p(&model), "--data", p(&test), "--out", p(&scores)])?;
    s3n(&["eval", "--model", p(&model), "--data", p(&test), "--out", p(&report)])?;
    let text = fs::read_to_string(report.join("report.json")).map_err(|e| e.to_string())?;
    Ok(Pipeline {
        report: serde_json::from_str(&text).map_err(|e| e.to_string())?,
        elapsed: started.elapsed(),
    })
}

fn auc_pattern(run: &Pipeline) -> Outcome {
    use AnomalyType::*;
    let bounds = [
        (Flicker, ">=", 0.95),
        (SplitHorizontal, ">=", 0.90),
        (SplitVertical, ">=", 0.90),
        (FreezeSkip, ">=", 0.90),
        (VisualArtefact, ">=", 0.85),
        (Freeze, "<=", 0.10),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (kind, op, bound) in bounds {
        match run.report.auc.get(&kind) {
            Some(&v) => {
                let pass = if op == ">=" { v >= bound } else { v <= bound };
                ok &= pass;
                let n = run.report.counts.get(&kind).map_or(0, |c| c.anomalous);
                parts.push(format!("{kind} {v:.4} (n={n}, want {op} {bound})"));
            }
            None => {
                ok = false;
                parts.push(format!("{kind} missing"));
            }
        }
    }
    let fast = run.elapsed <= Duration::from_secs(15 * 60);
    ok &= fast;
    parts.push(format!("pipeline {:.0}s (limit 900s)", run.elapsed.as_secs_f64()));
    if ok {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

fn consistency_pattern(run: &Pipeline) -> Outcome {
    let r = &run.report.rank_sum;
    let (Some(&j2), Some(&j50)) = (r.get(&2), r.get(&50)) else {
        return Err("rank-sum values for j=2 and j=50 missing".into());
    };
    let line = r.iter().map(|(j, v)| format!("j={j} {v:.4}")).collect::<Vec<_>>().join(", ");
    if j50 <= j2 && j50 <= 0.15 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn uds_sanity(run: &Pipeline) -> Outcome {
    let u = run.report.uds;
    let line = format!(
        "UDS {u:.4} over {} held-out normal trajectories, margin {}",
        run.report.normal_trajectories, run.report.margin
    );
    if u.is_finite() && u <= 1.0 && run.report.normal_trajectories > 0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism(root: &Path) -> Outcome {
    let flags = ["--epochs", "2", "--batch", "64"];
    let a = root.join("a");
    let b = root.join("b");
    run_pipeline(&a, 4, 6, 300, &flags)?;
    run_pipeline(&b, 4, 6, 300, &flags)?;
    let files = ["model.s3nm", "scores.csv", "report/report.json", "report/report.csv"];
    for f in files {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} byte-identical across two runs", files.join(", ")))
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, outcome: Outcome| {
        let (tag, text) = match &outcome {
            Ok(t) => ("PASS", t),
            Err(t) => ("FAIL", t),
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {n} [{tag}] {name}: {text}");
        let _ = out.flush();
        results.push((n, name, outcome));
    };

    if want(1) {
        record(1, "gradient correctness", gradient_correctness());
    }
    if want(2) {
        record(2, "triplet-loss oracle", triplet_oracle());
    }
    if want(3) {
        record(3, "AUC and rank-sum oracles", rank_oracles());
    }
    if want(4) {
        record(4, "labeling correctness", labeling_correctness());
    }
    if want(5) || want(6) || want(7) {
        // 20 x 1000 training frames, default hyperparameters, fixed seeds
        match run_pipeline(&tmp.path().join("e2e"), 20, 20, 1000, &[]) {
            Ok(run) => {
                if want(5) {
                    record(5, "end-to-end AUC pattern", auc_pattern(&run));
                }
                if want(6) {
                    record(6, "embedding consistency", consistency_pattern(&run));
                }
                if want(7) {
                    record(7, "UDS sanity", uds_sanity(&run));
                }
            }
            Err(e) => {
                for (n, name) in [(5, "end-to-end AUC pattern"), (6, "embedding consistency"), (7, "UDS sanity")] {
                    if want(n) {
                        record(n, name, Err(e.clone()));
                    }
                }
            }
        }
    }
    if want(8) {
        record(8, "determinism", determinism(&tmp.path().join("det")));
    }

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
