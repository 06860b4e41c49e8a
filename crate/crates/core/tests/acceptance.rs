//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! MNIST criteria read the IDX files from `MNIST_DIR`, defaulting to
//! `data/mnist` at the workspace root.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use learndrop::dataio::{load_mnist, split, stratified_subset, synth, Dataset, SplitTag};
use learndrop::featcache::{write_epoch, Backend, CachePlan, Target};
use learndrop::gradstats::{spearman, standardize, GradAccumulator};
use learndrop::trainer::{delta_t, train, EpochReport, RunConfig, Strategy, TrainOutput};
use learndrop::{build, ArchPreset, NetGraph, Tensor};
use rand::Rng;

const OP_TOLERANCE: f64 = 1e-4;
const ORACLE_TOLERANCE: f64 = 1e-6;
const ACCURACY_GAP_POINTS: f64 = 2.0;
const TIME_RATIO: f64 = 0.60;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synth_split(seed: u64) -> (Dataset, Dataset) {
    let ds = synth(4, 200, &[1, 16, 16], seed).unwrap();
    let [tr, va, _] = split(&ds, (0.8, 0.2, 0.0), seed).unwrap();
    (tr.unwrap(), va.unwrap())
}

fn config(arch: ArchPreset, strategy: Strategy, epochs: usize, warmup: usize, lr: f64, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(arch, strategy);
    c.epochs = epochs;
    c.warmup = warmup;
    c.lr = lr;
    c.batch = 32;
    c.seed = seed;
    c
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (op, e) in common::op_errors() {
        worst = worst.max(e);
        parts.push(format!("{op} {e:.1e}"));
    }
    let net = common::network_error(ArchPreset::TinyVgg, 60, 1);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= OP_TOLERANCE && net <= OP_TOLERANCE && secs <= 60.0,
        format!(
            "{} trials/op, worst op {worst:.1e} [{}], tiny-vgg network {net:.1e}, {secs:.1}s",
            common::TRIALS,
            parts.join(", ")
        ),
    )
}

fn score_math() -> Outcome {
    let (tr, va) = synth_split(2);
    let out = train(&config(ArchPreset::TinyVgg, Strategy::Drop, 12, 2, 0.05, 2), &tr, &va).unwrap();
    let epochs: std::collections::BTreeSet<usize> = out.scores.iter().map(|s| s.epoch).collect();
    let in_range = out.scores.iter().all(|s| (0.0..=1.0).contains(&s.p));

    let unit = |trace: &[&[f64]]| {
        let n = trace[0].len();
        let mut acc = GradAccumulator::new(0, &[vec![n]]);
        for g in trace {
            acc.accumulate(&[&Tensor::new(vec![n], g.to_vec()).unwrap()]).unwrap();
        }
        acc.score().unwrap()
    };
    let hand = unit(&[&[1.0], &[-1.0]]) == 1.0 && unit(&[&[1.0], &[1.0]]) == 0.0 && unit(&[&[1.0, 1.0], &[1.0, -1.0]]) == 0.5;

    let mut rng = common::rng(5);
    let mut invariance = 0.0f64;
    for _ in 0..50 {
        let trace: Vec<Vec<f64>> = (0..6).map(|_| (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let score = |c: f64| {
            let scaled: Vec<Vec<f64>> = trace.iter().map(|g| g.iter().map(|v| v * c).collect()).collect();
            let refs: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
            unit(&refs)
        };
        let base = score(1.0);
        for c in [0.5, 10.0, -1.0] {
            invariance = invariance.max((score(c) - base).abs());
        }
    }
    let z = standardize(&[0.2, 0.4, 0.6]).unwrap();
    let closed = (z[2] - 1.5f64.sqrt()).abs() < 1e-12 && z[1].abs() < 1e-12;
    outcome(
        in_range && hand && invariance <= 1e-12 && closed && epochs.len() >= 10,
        format!(
            "P in [0,1] over {} rows / {} epochs: {in_range}; hand cases: {hand}; scale/sign drift {invariance:.1e}",
            out.scores.len(),
            epochs.len()
        ),
    )
}

fn split_cache_fidelity() -> Outcome {
    let t = Instant::now();
    let mut rng = common::rng(9);
    let x = Tensor::<f32>::from_fn(&[64, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let ds = Dataset::new(x, (0..64).map(|i| i % 4).collect(), 4, SplitTag::Full, 0).unwrap();
    let all: Vec<usize> = (0..64).collect();
    let dir = tempfile::tempdir().unwrap();
    let (mut checked, mut failed, mut in_block) = (0, Vec::new(), 0);
    for arch in [ArchPreset::TinyVgg, ArchPreset::TinyResnet] {
        let g = build::<f32>(arch, &[1, 16, 16], 4, 3).unwrap();
        let full = g.eval_logits(ds.images()).unwrap();
        for cut in g.legal_cuts() {
            let (tail, head) = g.split(cut).unwrap();
            let plan = CachePlan {
                target: Target::new(Backend::Disk, dir.path().join(format!("{arch}-{checked}"))),
                cut,
                fingerprint: ds.fingerprint().into(),
                order_seed: 0,
                batch_size: 16,
            };
            let cache = write_epoch(&tail, &ds, &all, plan, |_| Ok(())).unwrap();
            let (slots, _) = cache.fetch(&all).unwrap();
            let out = head.eval(slots).unwrap();
            if !out[0].bitwise_eq(&full) {
                failed.push(format!("{arch} {cut:?}"));
            }
            in_block += matches!(cut, learndrop::CutPoint::InBlock(_)) as usize;
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && in_block > 0 && secs <= 60.0,
        format!("{checked} cuts ({in_block} inside residual blocks) bitwise on 64 samples, mismatches {failed:?}, {secs:.1}s"),
    )
}

fn max_rel_diff(a: &NetGraph<f32>, b: &NetGraph<f32>) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for (sa, sb) in a.stages().iter().zip(b.stages()) {
        for ((_, ta), (_, tb)) in sa.state().into_iter().zip(sb.state()) {
            bitwise &= ta.bitwise_eq(tb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                let d = (x - y).abs() as f64;
                let scale = (x.abs().max(y.abs()) as f64).max(1e-12);
                worst = worst.max(d / scale);
            }
        }
    }
    (worst, bitwise)
}

struct OracleRuns {
    sgd: TrainOutput,
    freeze: TrainOutput,
    drop: TrainOutput,
}

fn freeze_drop_oracle(runs: &mut Vec<(ArchPreset, OracleRuns)>) -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in [ArchPreset::TinyVgg, ArchPreset::TinyResnet] {
        let (tr, va) = synth_split(2);
        let freeze = train(&config(arch, Strategy::Freeze, 12, 2, 0.05, 2), &tr, &va).unwrap();
        let mut dc = config(arch, Strategy::Drop, 12, 2, 0.05, 2);
        dc.drop_schedule = Some(freeze.schedule());
        let drop = train(&dc, &tr, &va).unwrap();
        let sgd = train(&config(arch, Strategy::Sgd, 12, 2, 0.05, 2), &tr, &va).unwrap();
        let (rel, bitwise) = max_rel_diff(&freeze.model, &drop.model);
        let events = freeze.drops.len();
        pass &= rel <= ORACLE_TOLERANCE && events >= 1 && drop.drops.len() == events;
        parts.push(format!("{arch}: {events} events {:?}, max rel diff {rel:.1e}, bitwise {bitwise}", freeze.schedule().iter().map(|s| (s.epoch, s.units.clone())).collect::<Vec<_>>()));
        runs.push((arch, OracleRuns { sgd, freeze, drop }));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(pass && secs <= 300.0, format!("{}; {secs:.1}s", parts.join("; ")))
}

fn macs_trajectory(runs: &[(ArchPreset, OracleRuns)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (arch, r) in runs {
        let macs = |reps: &[EpochReport]| reps.iter().map(|x| x.head_macs).collect::<Vec<_>>();
        let d = macs(&r.drop.reports);
        let non_increasing = d.windows(2).all(|w| w[1] <= w[0]);
        let strict = r.drop.reports.iter().filter(|x| !x.drops.is_empty()).all(|x| d[x.epoch + 1] < d[x.epoch]);
        let constant = |v: Vec<u64>| v.windows(2).all(|w| w[0] == w[1]);
        let base_const = constant(macs(&r.sgd.reports)) && constant(macs(&r.freeze.reports));
        pass &= non_increasing && strict && base_const;
        parts.push(format!("{arch}: drop {:?} -> {:?}, sgd/freeze constant {base_const}", d.first().unwrap(), d.last().unwrap()));
    }
    outcome(pass, parts.join("; "))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct MnistRuns {
    sgd: TrainOutput,
    drop: TrainOutput,
    secs: f64,
}

fn mnist_runs() -> Result<MnistRuns, String> {
    let dir = mnist_dir();
    let full = load_mnist(&dir, true).map_err(|e| format!("MNIST not readable at {}: {e}", dir.display()))?;
    let test = load_mnist(&dir, false).map_err(|e| format!("MNIST not readable at {}: {e}", dir.display()))?;
    if full.len() != 60_000 || full.sample_shape() != [1, 28, 28] {
        return Err(format!("unexpected MNIST training set {} x {:?}", full.len(), full.sample_shape()));
    }
    let train_set = stratified_subset(&full, 10_000, 0).unwrap();
    let t = Instant::now();
    let sgd = train(&config(ArchPreset::TinyVgg, Strategy::Sgd, 15, 3, 0.05, 1), &train_set, &test).map_err(|e| e.to_string())?;
    let drop = train(&config(ArchPreset::TinyVgg, Strategy::Drop, 15, 3, 0.05, 1), &train_set, &test).map_err(|e| e.to_string())?;
    Ok(MnistRuns {
        sgd,
        drop,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn accuracy_parity(m: &Result<MnistRuns, String>) -> Outcome {
    let m = match m {
        Ok(m) => m,
        Err(e) => return outcome(false, e.clone()),
    };
    let a_sgd = m.sgd.reports.last().unwrap().val_acc * 100.0;
    let a_drop = m.drop.reports.last().unwrap().val_acc * 100.0;
    let gap = (a_sgd - a_drop).abs();
    let events = m.drop.drops.len();
    outcome(
        events >= 1 && gap <= ACCURACY_GAP_POINTS && m.secs <= 900.0,
        format!(
            "10k-sample MNIST subset, 15 epochs: sgd {a_sgd:.2}%, drop {a_drop:.2}%, gap {gap:.2} points, {events} drop events, {:.0}s",
            m.secs
        ),
    )
}

fn wall_clock_direction(m: &Result<MnistRuns, String>) -> Outcome {
    let m = match m {
        Ok(m) => m,
        Err(e) => return outcome(false, e.clone()),
    };
    let total = |r: &[EpochReport]| r.iter().map(|x| x.times.epoch()).sum::<f64>();
    let (t_sgd, t_drop) = (total(&m.sgd.reports), total(&m.drop.reports));
    let events = &m.drop.drops;
    let Some(first) = events.first() else {
        return outcome(false, "no drop event occurred");
    };
    let last = events.last().unwrap();
    let mean = |r: &[EpochReport]| r.iter().map(|x| x.times.epoch()).sum::<f64>() / r.len() as f64;
    let before = mean(&m.drop.reports[..=first.epoch]);
    let after_from = last.epoch + 2;
    if after_from >= m.drop.reports.len() {
        return outcome(false, "no epoch trains on cached features after the last drop");
    }
    let after = mean(&m.drop.reports[after_from..]);
    let ratio = after / before;
    outcome(
        t_drop < t_sgd && ratio <= TIME_RATIO,
        format!(
            "{} drop events; total {t_drop:.1}s vs sgd {t_sgd:.1}s (delta T {:.1}%); epoch after last drop {after:.2}s vs before {before:.2}s, ratio {ratio:.2}",
            events.len(),
            delta_t(t_sgd, t_drop).unwrap()
        ),
    )
}

fn delta_t_arithmetic() -> Outcome {
    let a = format!("{:.2}", delta_t(20.83, 8.74).unwrap());
    let b = format!("{:.2}", delta_t(23.67, 8.64).unwrap());
    outcome(a == "58.04" && b == "63.50", format!("(20.83, 8.74) -> {a}%, (23.67, 8.64) -> {b}%"))
}

/// Spearman correlation between unit depth and mean score over the last
/// three warm-up epochs.
fn depth_correlation(arch: ArchPreset) -> f64 {
    let (tr, va) = synth_split(6);
    let warmup = 9;
    let out = train(&config(arch, Strategy::Drop, 10, warmup, 0.05, 6), &tr, &va).unwrap();
    let units: Vec<usize> = {
        let mut u: Vec<usize> = out.scores.iter().map(|s| s.unit_id).collect();
        u.sort();
        u.dedup();
        u
    };
    let means: Vec<f64> = units
        .iter()
        .map(|&u| {
            let p: Vec<f64> = out
                .scores
                .iter()
                .filter(|s| s.unit_id == u && s.epoch + 3 >= warmup && s.epoch < warmup)
                .map(|s| s.p)
                .collect();
            p.iter().sum::<f64>() / p.len() as f64
        })
        .collect();
    let depth: Vec<f64> = (0..units.len()).map(|d| d as f64).collect();
    spearman(&depth, &means).unwrap()
}

fn score_ordering() -> Outcome {
    let with_bn = depth_correlation(ArchPreset::TinyVgg);
    let without = depth_correlation(ArchPreset::TinyVggNobn);
    outcome(
        with_bn <= 0.0 && without > with_bn,
        format!("spearman(depth, mean P) with batch norm {with_bn:+.3}, without {without:+.3}"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "score math", score_math());
    report(3, "split/cache fidelity", split_cache_fidelity());
    let mut runs = Vec::new();
    report(4, "freeze/drop equivalence", freeze_drop_oracle(&mut runs));
    report(5, "MACs trajectory", macs_trajectory(&runs));
    let mnist = mnist_runs();
    report(6, "accuracy parity", accuracy_parity(&mnist));
    report(7, "wall-clock direction", wall_clock_direction(&mnist));
    report(8, "delta T arithmetic", delta_t_arithmetic());
    report(9, "score ordering", score_ordering());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
