use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use learndrop::trainer::{delta_t, EpochReport, Strategy};

use crate::train::{ResolvedConfig, REPORTS_JSON};
use crate::Failure;

pub const COMPARE_CSV_HEADER: &str = "run,strategy,time_min,accuracy,delta_t,drop_events";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run: String,
    pub strategy: Strategy,
    /// Training wall-clock in minutes, validation excluded.
    pub time_min: f64,
    /// Final validation accuracy in percent.
    pub accuracy: f64,
    pub delta_t: f64,
    pub drop_events: usize,
}

struct Run {
    dir: PathBuf,
    config: ResolvedConfig,
    reports: Vec<EpochReport>,
}

fn load(dir: &Path) -> anyhow::Result<Run> {
    let config = ResolvedConfig::read(dir)?;
    let path = dir.join(REPORTS_JSON);
    let raw = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let reports: Vec<EpochReport> = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    if reports.is_empty() {
        bail!("{} holds no epochs", path.display());
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        config,
        reports,
    })
}

/// Refuses runs that differ in anything but strategy and timing.
fn check_comparable(base: &Run, other: &Run) -> anyhow::Result<()> {
    let (a, b) = (&base.config, &other.config);
    let fields = [
        ("arch", a.run.arch.to_string(), b.run.arch.to_string()),
        ("seed", a.run.seed.to_string(), b.run.seed.to_string()),
        ("data", a.data.clone(), b.data.clone()),
        ("training set", a.train_fingerprint.clone(), b.train_fingerprint.clone()),
        ("validation set", a.val_fingerprint.clone(), b.val_fingerprint.clone()),
        ("epochs", a.run.epochs.to_string(), b.run.epochs.to_string()),
        ("batch", a.run.batch.to_string(), b.run.batch.to_string()),
        ("lr", a.run.lr.to_string(), b.run.lr.to_string()),
    ];
    for (name, x, y) in fields {
        if x != y {
            bail!(
                "runs {} and {} differ in {name}: {x} vs {y}",
                base.dir.display(),
                other.dir.display()
            );
        }
    }
    Ok(())
}

fn summarize(runs: &[Run]) -> anyhow::Result<Vec<Row>> {
    let baselines: Vec<&Run> = runs.iter().filter(|r| r.config.run.strategy == Strategy::Sgd).collect();
    let [base] = baselines[..] else {
        bail!("expected exactly one sgd run, found {}", baselines.len());
    };
    for r in runs {
        check_comparable(base, r)?;
    }
    let minutes = |r: &Run| r.reports.iter().map(|x| x.times.epoch()).sum::<f64>() / 60.0;
    let t_sgd = minutes(base);
    runs.iter()
        .map(|r| {
            let t = minutes(r);
            Ok(Row {
                run: r.dir.display().to_string(),
                strategy: r.config.run.strategy,
                time_min: t,
                accuracy: r.reports.last().map_or(0.0, |x| x.val_acc * 100.0),
                delta_t: delta_t(t_sgd, t)?,
                drop_events: r.reports.iter().filter(|x| !x.drops.is_empty()).count(),
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(mut w: W, rows: &[Row]) -> std::io::Result<()> {
    writeln!(w, "{COMPARE_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.4},{:.2},{:.2},{}", r.run, r.strategy, r.time_min, r.accuracy, r.delta_t, r.drop_events)?;
    }
    Ok(())
}

fn write_text<W: Write>(mut w: W, rows: &[Row]) -> std::io::Result<()> {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(0).max(3);
    writeln!(w, "{:<width$}  {:<8}  {:>8}  {:>7}  {:>7}  {:>5}", "run", "strategy", "T (min)", "A (%)", "ΔT (%)", "drops")?;
    for r in rows {
        writeln!(
            w,
            "{:<width$}  {:<8}  {:>8.3}  {:>7.2}  {:>7.2}  {:>5}",
            r.run,
            r.strategy.to_string(),
            r.time_min,
            r.accuracy,
            r.delta_t,
            r.drop_events
        )?;
    }
    Ok(())
}

pub fn run(dirs: &[PathBuf], csv: Option<&Path>) -> Result<(), Failure> {
    let runs = dirs.iter().map(|d| load(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let rows = summarize(&runs)?;
    write_text(std::io::stdout().lock(), &rows)?;
    if let Some(path) = csv {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(std::io::BufWriter::new(file), &rows)?;
    }
    Ok(())
}
