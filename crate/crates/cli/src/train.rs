use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use learndrop::dataio::{load_mnist, split, stratified_subset, synth, Dataset};
use learndrop::dropctl::write_drop_log;
use learndrop::featcache::Backend;
use learndrop::gradstats::write_score_csv;
use learndrop::trainer::{save_checkpoint, train, write_reports_csv, write_reports_json, LrStep, RunConfig, ScheduledDrop, Strategy};
use learndrop::ArchPreset;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const CONFIG_FILE: &str = "config.json";
pub const REPORTS_CSV: &str = "reports.csv";
pub const REPORTS_JSON: &str = "reports.json";
pub const DROPS_LOG: &str = "drops.jsonl";
pub const SCORES_CSV: &str = "scores.csv";
pub const CHECKPOINT: &str = "model.ldck";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON config file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// tiny-vgg, tiny-vgg-nobn, tiny-resnet, vgg11-bn or resnet18.
    #[arg(long)]
    arch: Option<ArchPreset>,
    /// sgd, freeze or drop.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Multiply the learning rate by F from epoch E on; repeatable.
    #[arg(long = "lr-step", value_name = "E,F", value_parser = parse_lr_step)]
    lr_steps: Vec<LrStep>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `idx:<dir>` with MNIST IDX files, or `synth:<classes>x<per-class>x<size>`.
    #[arg(long)]
    data: Option<String>,
    /// Train on a stratified subset of this many samples.
    #[arg(long)]
    subset: Option<usize>,
    /// Validate on this many samples held out of the training files
    /// instead of the test files (idx data only).
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, env = "LEARNDROP_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// disk or memory.
    #[arg(long, value_parser = parse_backend)]
    cache_backend: Option<Backend>,
    /// Output directory for the report bundle.
    #[arg(long)]
    out: PathBuf,
}

fn parse_lr_step(s: &str) -> Result<LrStep, String> {
    let (e, f) = s.split_once(',').ok_or("expected EPOCH,FACTOR")?;
    Ok(LrStep {
        epoch: e.trim().parse().map_err(|_| format!("bad epoch {e:?}"))?,
        factor: f.trim().parse().map_err(|_| format!("bad factor {f:?}"))?,
    })
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "disk" => Ok(Backend::Disk),
        "memory" => Ok(Backend::Memory),
        _ => Err(format!("unknown cache backend {s:?}")),
    }
}

/// Settings readable from a config file. A resolved `config.json` from an
/// earlier run is accepted as-is.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    arch: Option<ArchPreset>,
    strategy: Option<Strategy>,
    epochs: Option<usize>,
    warmup: Option<usize>,
    lr: Option<f64>,
    lr_steps: Option<Vec<LrStep>>,
    batch: Option<usize>,
    seed: Option<u64>,
    data: Option<String>,
    subset: Option<usize>,
    holdout: Option<usize>,
    cache_dir: Option<PathBuf>,
    cache_backend: Option<Backend>,
    drop_schedule: Option<Vec<ScheduledDrop>>,
}

/// Everything needed to reproduce a run, written as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub data: String,
    pub subset: Option<usize>,
    pub holdout: Option<usize>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_fingerprint: String,
    pub val_fingerprint: String,
}

impl ResolvedConfig {
    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let raw = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum DataSpec {
    Idx(PathBuf),
    Synth { classes: usize, per_class: usize, size: usize },
}

fn parse_data(s: &str) -> Result<DataSpec, String> {
    if let Some(dir) = s.strip_prefix("idx:") {
        return Ok(DataSpec::Idx(PathBuf::from(dir)));
    }
    if let Some(spec) = s.strip_prefix("synth:") {
        let parts: Vec<usize> = spec
            .split('x')
            .map(|p| p.parse::<usize>().ok().filter(|&v| v > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| format!("bad synthetic spec {spec:?}"))?;
        if let [classes, per_class, size] = parts[..] {
            return Ok(DataSpec::Synth { classes, per_class, size });
        }
        return Err(format!("synthetic spec needs <classes>x<per-class>x<size>, got {spec:?}"));
    }
    Err(format!("data must be idx:<dir> or synth:<spec>, got {s:?}"))
}

fn load(spec: &DataSpec, subset: Option<usize>, holdout: Option<usize>, seed: u64) -> Result<(Dataset, Dataset), Failure> {
    let (train, val) = match spec {
        DataSpec::Synth { classes, per_class, size } => {
            if holdout.is_some() {
                return Err(Failure::Usage("--holdout applies to idx data only".into()));
            }
            let ds = synth(*classes, *per_class, &[1, *size, *size], seed)?;
            let [tr, va, _] = split(&ds, (0.8, 0.2, 0.0), seed)?;
            (tr.context("empty training split")?, va.context("empty validation split")?)
        }
        DataSpec::Idx(dir) => {
            let full = load_mnist(dir, true)?;
            match holdout {
                Some(n) => {
                    if n == 0 || n >= full.len() {
                        return Err(Failure::Usage(format!("--holdout {n} must be in 1..{}", full.len())));
                    }
                    let f = n as f64 / full.len() as f64;
                    let [va, tr, _] = split(&full, (f, 1.0 - f, 0.0), seed)?;
                    (tr.context("empty training split")?, va.context("empty holdout split")?)
                }
                None => (full, load_mnist(dir, false)?),
            }
        }
    };
    let train = match subset {
        Some(n) if n == 0 || n > train.len() => return Err(Failure::Usage(format!("--subset {n} must be in 1..={}", train.len()))),
        Some(n) => stratified_subset(&train, n, seed)?,
        None => train,
    };
    Ok((train, val))
}

fn resolve(args: &TrainArgs) -> Result<(RunConfig, String, Option<usize>, Option<usize>), Failure> {
    let file = match &args.config {
        Some(path) => {
            let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<FileConfig>(&raw).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let arch = args.arch.or(file.arch).ok_or_else(|| Failure::Usage("--arch is required".into()))?;
    let strategy = args.strategy.or(file.strategy).ok_or_else(|| Failure::Usage("--strategy is required".into()))?;
    let data = args.data.clone().or(file.data).ok_or_else(|| Failure::Usage("--data is required".into()))?;
    let mut cfg = RunConfig::new(arch, strategy);
    cfg.epochs = args.epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.warmup = args.warmup.or(file.warmup).unwrap_or(cfg.warmup);
    cfg.lr = args.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.lr_steps = if args.lr_steps.is_empty() {
        file.lr_steps.unwrap_or_default()
    } else {
        args.lr_steps.clone()
    };
    cfg.batch = args.batch.or(file.batch).unwrap_or(cfg.batch);
    cfg.seed = args.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.cache_dir = args.cache_dir.clone().or(file.cache_dir);
    cfg.cache_backend = args.cache_backend.or(file.cache_backend).unwrap_or_default();
    cfg.drop_schedule = file.drop_schedule;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, data, args.subset.or(file.subset), args.holdout.or(file.holdout)))
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let (cfg, data, subset, holdout) = resolve(&args)?;
    let spec = parse_data(&data).map_err(Failure::Usage)?;
    let (train_set, val_set) = load(&spec, subset, holdout, cfg.seed)?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = ResolvedConfig {
        run: cfg.clone(),
        data,
        subset,
        holdout,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        train_fingerprint: train_set.fingerprint().to_string(),
        val_fingerprint: val_set.fingerprint().to_string(),
    };
    serde_json::to_writer_pretty(create(out, CONFIG_FILE)?, &resolved)?;

    eprintln!(
        "training {} with {} on {} samples, validating on {}",
        cfg.arch,
        cfg.strategy,
        train_set.len(),
        val_set.len()
    );
    let started = Instant::now();
    let result = train(&cfg, &train_set, &val_set)?;
    write_reports_csv(create(out, REPORTS_CSV)?, &result.reports)?;
    write_reports_json(create(out, REPORTS_JSON)?, &result.reports)?;
    write_drop_log(create(out, DROPS_LOG)?, &result.drops)?;
    write_score_csv(create(out, SCORES_CSV)?, &result.scores)?;
    save_checkpoint(out.join(CHECKPOINT), &result.model)?;

    for r in &result.reports {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val {:.4}  macs {:>10}  {:.2}s{}",
            r.epoch,
            r.train_loss,
            r.val_acc,
            r.head_macs,
            r.times.epoch(),
            if r.drops.is_empty() { String::new() } else { format!("  dropped {:?}", r.drops) }
        );
    }
    let last = result.reports.last().context("no epochs ran")?;
    println!(
        "final validation accuracy {:.2}% after {} epochs, {} drop events, {:.1}s; reports in {}",
        last.val_acc * 100.0,
        result.reports.len(),
        result.drops.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}
