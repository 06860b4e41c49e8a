//! Training loops: plain SGD, prefix freezing and layer dropping.
//!
//! All three strategies share the data order (one seeded permutation per
//! run), the batch loop and the score bookkeeping. They differ in which
//! stages run and which receive updates:
//!
//! * `sgd` trains every stage every epoch.
//! * `freeze` keeps every stage in the forward pass but runs the chosen
//!   prefix in eval mode without gradients.
//! * `drop` splits the model at the chosen cut, caches the tail's output
//!   during the next epoch and afterwards trains the head on the cache
//!   alone.
//!
//! `freeze` and `drop` make the same decisions at the end of every epoch
//! after warm-up, except the last epoch and the epoch that writes a cache.

mod checkpoint;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use report::{write_reports_csv, write_reports_json, EpochReport, EpochTimes, REPORT_CSV_HEADER};

use crate::dataio::Dataset;
use crate::dropctl::{decide, gate, DropDecision, DropEvent, DropState};
use crate::error::{Error, Result};
use crate::featcache::{self, Backend, CachePlan, FeatureCache, Target};
use crate::gradstats::{GradStats, ScoreRow};
use crate::graph::{build, ArchPreset, CutPoint, NetGraph};
use crate::tensor::{softmax_xent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sgd,
    Freeze,
    Drop,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Sgd => "sgd",
            Strategy::Freeze => "freeze",
            Strategy::Drop => "drop",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Strategy::Sgd),
            "freeze" => Ok(Strategy::Freeze),
            "drop" => Ok(Strategy::Drop),
            _ => Err(Error::Argument(format!("unknown strategy {s:?}"))),
        }
    }
}

/// From `epoch` on, the learning rate is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub epoch: usize,
    pub factor: f64,
}

/// A drop or freeze forced at the end of `epoch`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledDrop {
    pub epoch: usize,
    pub units: Vec<usize>,
}

impl From<&DropEvent> for ScheduledDrop {
    fn from(e: &DropEvent) -> Self {
        ScheduledDrop {
            epoch: e.epoch,
            units: e.units.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchPreset,
    pub strategy: Strategy,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub warmup: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_steps: Vec<LrStep>,
    pub batch: usize,
    pub seed: u64,
    /// Replaces the score-based decisions. An empty schedule never drops.
    #[serde(default)]
    pub drop_schedule: Option<Vec<ScheduledDrop>>,
    /// Directory for feature caches; a temporary directory when unset.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_backend: Backend,
}

impl RunConfig {
    pub fn new(arch: ArchPreset, strategy: Strategy) -> Self {
        RunConfig {
            arch,
            strategy,
            epochs: 12,
            warmup: 2,
            lr: 0.01,
            lr_steps: Vec::new(),
            batch: 32,
            seed: 0,
            drop_schedule: None,
            cache_dir: None,
            cache_backend: Backend::Disk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs <= self.warmup {
            return Err(Error::Argument(format!(
                "epochs ({}) must exceed warm-up ({})",
                self.epochs, self.warmup
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if let Some(s) = self.lr_steps.iter().find(|s| !(s.factor > 0.0)) {
            return Err(Error::Argument(format!("learning-rate factor must be positive, got {}", s.factor)));
        }
        if self.strategy == Strategy::Sgd && self.drop_schedule.as_ref().is_some_and(|s| !s.is_empty()) {
            return Err(Error::Argument("a drop schedule needs strategy freeze or drop".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_steps.iter().filter(|s| s.epoch <= epoch).fold(self.lr, |lr, s| lr * s.factor)
    }
}

/// Result of a run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// The full model with the latest weights of every stage.
    pub model: NetGraph<f32>,
    pub reports: Vec<EpochReport>,
    pub drops: Vec<DropEvent>,
    pub scores: Vec<ScoreRow>,
}

impl TrainOutput {
    /// Drop or freeze events as a schedule for another run.
    pub fn schedule(&self) -> Vec<ScheduledDrop> {
        self.drops.iter().map(ScheduledDrop::from).collect()
    }
}

/// `(T_sgd − T) / T_sgd · 100`.
pub fn delta_t(t_sgd: f64, t: f64) -> Result<f64> {
    if !(t_sgd > 0.0) {
        return Err(Error::Argument(format!("baseline time must be positive, got {t_sgd}")));
    }
    Ok((t_sgd - t) / t_sgd * 100.0)
}

const EVAL_BATCH: usize = 256;

/// Eval-mode argmax accuracy of a full model.
pub fn validate(model: &NetGraph<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for idx in all.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(idx)?;
        let logits = model.eval_logits(&x)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Rows whose first maximal logit is at the label.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.sample(i);
            let arg = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            arg == l
        })
        .count()
}

/// The seeded sample order shared by every epoch of a run.
pub fn data_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct Step {
    loss: f64,
    correct: usize,
}

fn train_step(g: &mut NetGraph<f32>, from: usize, x: Vec<Tensor<f32>>, y: &[usize], lr: f64, stats: &mut GradStats) -> Result<Step> {
    let (logits, record) = g.forward_train(x, from)?;
    let out = softmax_xent(&logits, y)?;
    let grads = g.backward(&record, out.grad)?;
    stats.observe(g, &grads)?;
    g.sgd_update(&grads, lr)?;
    Ok(Step {
        loss: out.loss,
        correct: out.correct,
    })
}

fn in_context(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ (Error::Numeric(_) | Error::DegenerateBatch(_)) => Error::Training {
            epoch,
            batch,
            msg: e.to_string(),
        },
        other => other,
    }
}

#[derive(Default)]
struct Tally {
    loss: f64,
    correct: usize,
    seen: usize,
    batches: usize,
}

impl Tally {
    fn add(&mut self, s: Step, n: usize, epoch: usize) -> Result<()> {
        if !s.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: self.batches,
                msg: format!("loss is {}", s.loss),
            });
        }
        self.loss += s.loss * n as f64;
        self.correct += s.correct;
        self.seen += n;
        self.batches += 1;
        Ok(())
    }
}

/// Where the trained stages get their input from.
enum Feed {
    /// Raw images through the whole model; stages before the index are
    /// frozen.
    Full(usize),
    /// Cache being written this epoch: `suffix` turns `source` into the
    /// head's input.
    Writing { suffix: NetGraph<f32>, cut: CutPoint },
    /// Head trains on the stored cache.
    Cached,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    train: &'a Dataset,
    order: Vec<usize>,
    model: NetGraph<f32>,
    head: Option<NetGraph<f32>>,
    cache: Option<FeatureCache>,
    feed: Feed,
    stats: GradStats,
    state: DropState,
    cache_dir: PathBuf,
    _tmp: Option<TempDir>,
}

/// A directory removed on drop.
struct TempDir(PathBuf);

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn temp_cache_dir(seed: u64) -> Result<TempDir> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("learndrop-cache-{}-{seed}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(TempDir(dir))
}

impl Run<'_> {
    /// Trains one epoch, returning its tally and times.
    fn epoch(&mut self, epoch: usize, lr: f64) -> Result<(Tally, EpochTimes)> {
        let mut tally = Tally::default();
        let mut times = EpochTimes::default();
        let bs = self.cfg.batch;
        let ctx = |b| in_context(epoch, b);
        match std::mem::replace(&mut self.feed, Feed::Cached) {
            Feed::Full(from) => {
                let t0 = Instant::now();
                for idx in self.order.chunks(bs) {
                    let (x, y) = self.train.batch(idx)?;
                    let s = train_step(&mut self.model, from, vec![x], &y, lr, &mut self.stats).map_err(ctx(tally.batches))?;
                    tally.add(s, idx.len(), epoch)?;
                }
                times.train = t0.elapsed().as_secs_f64();
                self.feed = Feed::Full(from);
            }
            Feed::Writing { suffix, cut } => {
                let head = self.head.as_mut().expect("head exists once dropping starts");
                let path = self.cache_dir.join(format!("cut-{}.ldfc", cut.tail_stages()));
                let plan = CachePlan {
                    target: Target::new(self.cfg.cache_backend, path),
                    cut,
                    fingerprint: self.train.fingerprint().to_owned(),
                    order_seed: self.cfg.seed,
                    batch_size: bs,
                };
                let stats = &mut self.stats;
                let mut train_secs = 0.0;
                let t0 = Instant::now();
                let step = |b: featcache::Batch| -> Result<()> {
                    let t = Instant::now();
                    let s = train_step(head, 0, b.slots, &b.labels, lr, stats).map_err(ctx(tally.batches))?;
                    tally.add(s, b.indices.len(), epoch)?;
                    train_secs += t.elapsed().as_secs_f64();
                    Ok(())
                };
                let new_cache = match self.cache.take() {
                    None => featcache::write_epoch(&suffix, self.train, &self.order, plan, step)?,
                    Some(old) => {
                        let c = featcache::write_epoch(&suffix, &old, &self.order, plan, step)?;
                        old.delete()?;
                        c
                    }
                };
                let total = t0.elapsed().as_secs_f64();
                times.train = train_secs;
                times.cache_write = total - train_secs;
                self.cache = Some(new_cache);
            }
            Feed::Cached => {
                let head = self.head.as_mut().expect("head exists once dropping starts");
                let cache = self.cache.as_ref().expect("cache written before it is read");
                let mut read = 0.0;
                let t0 = Instant::now();
                for idx in self.order.chunks(bs) {
                    let t = Instant::now();
                    let (slots, y) = cache.fetch(idx)?;
                    read += t.elapsed().as_secs_f64();
                    let s = train_step(head, 0, slots, &y, lr, &mut self.stats).map_err(ctx(tally.batches))?;
                    tally.add(s, idx.len(), epoch)?;
                }
                times.train = t0.elapsed().as_secs_f64() - read;
                times.cache_read = read;
            }
        }
        if let Some(head) = &self.head {
            head.write_back(&mut self.model)?;
        }
        Ok((tally, times))
    }

    /// Parameters and per-sample MACs of what trains this epoch.
    fn head_cost(&self) -> Result<(usize, u64)> {
        match (&self.feed, &self.head) {
            (Feed::Full(from), _) => Ok((self.model.count_params(*from), self.model.total_macs()?)),
            (_, Some(head)) => Ok((head.count_params(0), head.total_macs()?)),
            (_, None) => unreachable!("cache feeds imply a head"),
        }
    }

    /// Stage index at which the trained part starts.
    fn boundary(&self) -> usize {
        match self.head.as_ref() {
            Some(h) => self.model.len() - h.len(),
            None => match self.feed {
                Feed::Full(from) => from,
                _ => 0,
            },
        }
    }

    fn head_units(&self) -> Vec<usize> {
        match &self.head {
            Some(h) => h.droppable_units().iter().map(|&i| h.stages()[i].id).collect(),
            None => {
                let from = self.boundary();
                self.model.droppable_units().into_iter().filter(|&i| i >= from).collect()
            }
        }
    }

    fn decision(&self, epoch: usize, sb: &crate::gradstats::ScoreBoard) -> Result<DropDecision> {
        let units = self.head_units();
        let Some(schedule) = &self.cfg.drop_schedule else {
            return decide(sb, &self.state, &units);
        };
        let Some(entry) = schedule.iter().find(|s| s.epoch == epoch) else {
            return Ok(DropDecision {
                drop: false,
                n_star: None,
                units: Vec::new(),
                scores: Vec::new(),
                gate: None,
            });
        };
        let k = entry.units.len();
        if k == 0 || k >= units.len() || entry.units[..] != units[..k] {
            return Err(Error::Argument(format!(
                "scheduled drop {:?} at epoch {epoch} is not a proper prefix of the head units {units:?}",
                entry.units
            )));
        }
        let scores: Vec<f64> = entry
            .units
            .iter()
            .map(|u| sb.units.iter().position(|x| x == u).map(|p| sb.standardized[p]).unwrap_or(0.0))
            .collect();
        let g = gate(&scores, &self.state.dropped_scores)?;
        Ok(DropDecision {
            drop: true,
            n_star: Some(k - 1),
            units: entry.units.clone(),
            scores,
            gate: Some(g),
        })
    }

    /// Applies a positive decision; returns the head parameter count after
    /// it.
    fn apply(&mut self, d: &DropDecision) -> Result<usize> {
        let last = *d.units.last().expect("non-empty drop");
        let cut = self.model.cut_after(last);
        let n = cut.tail_stages();
        self.stats.remove(&d.units);
        match self.cfg.strategy {
            Strategy::Freeze => {
                self.feed = Feed::Full(n);
                Ok(self.model.count_params(n))
            }
            Strategy::Drop => {
                let prev = self.boundary();
                let (_, rest) = self.model.split(CutPoint::Boundary(prev))?;
                let (suffix, _) = rest.split(CutPoint::Boundary(n - prev))?;
                let (_, head) = self.model.split(cut)?;
                let params = head.count_params(0);
                self.head = Some(head);
                self.feed = Feed::Writing { suffix, cut };
                Ok(params)
            }
            Strategy::Sgd => unreachable!("sgd makes no decisions"),
        }
    }
}

/// Trains `cfg.arch` on `train`, validating the full model on `val` after
/// every epoch.
pub fn train(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if train.sample_shape() != val.sample_shape() || train.classes() != val.classes() {
        return Err(Error::Data("training and validation splits differ in shape or classes".into()));
    }
    let model = build::<f32>(cfg.arch, train.sample_shape(), train.classes(), cfg.seed)?;
    let (cache_dir, tmp) = match &cfg.cache_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            (d.clone(), None)
        }
        None if cfg.strategy == Strategy::Drop && cfg.cache_backend == Backend::Disk => {
            let t = temp_cache_dir(cfg.seed)?;
            (t.0.clone(), Some(t))
        }
        None => (PathBuf::new(), None),
    };
    let mut run = Run {
        cfg,
        train,
        order: data_order(train.len(), cfg.seed),
        stats: GradStats::for_graph(&model),
        model,
        head: None,
        cache: None,
        feed: Feed::Full(0),
        state: DropState::new(),
        cache_dir,
        _tmp: tmp,
    };
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut scores = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let writing = matches!(run.feed, Feed::Writing { .. });
        let (head_params, head_macs) = run.head_cost()?;
        let units_out = run.state.z;
        run.stats.reset();
        let (tally, mut times) = run.epoch(epoch, lr)?;

        let mut drops = Vec::new();
        if !writing {
            let sb = run.stats.scoreboard(epoch)?;
            scores.extend(sb.rows());
            let may_decide = cfg.strategy != Strategy::Sgd && epoch >= cfg.warmup && epoch + 1 < cfg.epochs;
            if may_decide {
                let d = run.decision(epoch, &sb)?;
                if d.drop {
                    let params = run.apply(&d)?;
                    run.state.apply(epoch, &d, params)?;
                    log::info!("epoch {epoch}: {} units {:?}", cfg.strategy, d.units);
                    drops = d.units;
                }
            }
        }

        let t = Instant::now();
        let val_acc = validate(&run.model, val).map_err(in_context(epoch, tally.batches))?;
        times.validate = t.elapsed().as_secs_f64();
        let report = EpochReport {
            epoch,
            strategy: cfg.strategy,
            lr,
            train_loss: tally.loss / tally.seen as f64,
            train_acc: tally.correct as f64 / tally.seen as f64,
            val_acc,
            head_params,
            head_macs,
            units_out,
            times,
            drops,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val {:.4} macs {} time {:.2}s",
            report.train_loss,
            report.val_acc,
            report.head_macs,
            report.times.epoch()
        );
        reports.push(report);
    }
    if let Some(c) = run.cache.take() {
        c.delete()?;
    }
    Ok(TrainOutput {
        model: run.model,
        reports,
        drops: run.state.history,
        scores,
    })
}
