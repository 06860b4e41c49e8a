//! Networks as ordered chains of stages.
//!
//! A [`NetGraph`] is a single chain: every stage consumes the activation
//! slots of its predecessor. Most stages exchange one slot; the two halves
//! of a residual block cut in the middle exchange two (main path and skip
//! path), which is how intra-block cut points carry the skip connection
//! across a split.

mod preset;
mod stage;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use preset::{build, ArchPreset};
pub use stage::{
    BatchNorm, BlockBack, BlockFront, Conv2d, ConvUnit, Linear, Pool, ResidualBlock, SlotShapes,
    Stage, StageCache, StageKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a graph is split into tail and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "stage", rename_all = "snake_case")]
pub enum CutPoint {
    /// The tail holds the first `n` stages; one slot crosses.
    Boundary(usize),
    /// Cut inside the residual block at this stage index: the tail ends
    /// with the block's first conv unit and its skip path, and both
    /// activations cross.
    InBlock(usize),
}

impl CutPoint {
    /// Number of whole stages in the tail.
    pub fn tail_stages(&self) -> usize {
        match *self {
            CutPoint::Boundary(n) | CutPoint::InBlock(n) => n,
        }
    }
}

/// Activations retained by a train-mode forward pass for backward.
#[derive(Debug)]
pub struct Record<T> {
    trainable_from: usize,
    caches: Vec<StageCache<T>>,
}

impl<T> Record<T> {
    pub fn trainable_from(&self) -> usize {
        self.trainable_from
    }
}

#[derive(Debug)]
pub struct Forward<T> {
    pub output: Tensor<T>,
    pub record: Option<Record<T>>,
}

#[derive(Debug, Clone)]
pub struct NetGraph<T> {
    arch: String,
    input: SlotShapes,
    classes: usize,
    seed: u64,
    frozen: bool,
    stages: Vec<Stage<T>>,
}

impl<T: Scalar> NetGraph<T> {
    pub fn from_stages(arch: impl Into<String>, input: SlotShapes, classes: usize, seed: u64, stages: Vec<Stage<T>>) -> Result<Self> {
        let g = NetGraph {
            arch: arch.into(),
            input,
            classes,
            seed,
            frozen: false,
            stages,
        };
        g.stage_shapes()?;
        Ok(g)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-sample shapes of the input slots.
    pub fn input_shapes(&self) -> &SlotShapes {
        &self.input
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage<T>] {
        &mut self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Indices of stages the drop controller may remove, input to output.
    pub fn droppable_units(&self) -> Vec<usize> {
        (0..self.stages.len()).filter(|&i| self.stages[i].droppable).collect()
    }

    /// Slot shapes entering each stage, followed by the output shapes.
    pub fn stage_shapes(&self) -> Result<Vec<SlotShapes>> {
        let mut shapes = Vec::with_capacity(self.stages.len() + 1);
        let mut cur = self.input.clone();
        for s in &self.stages {
            let next = s.output_shapes(&cur)?;
            shapes.push(cur);
            cur = next;
        }
        shapes.push(cur);
        Ok(shapes)
    }

    pub fn output_shapes(&self) -> Result<SlotShapes> {
        Ok(self.stage_shapes()?.pop().expect("at least the input entry"))
    }

    /// Parameter elements in stages `from_stage..`.
    pub fn count_params(&self, from_stage: usize) -> usize {
        self.stages.iter().skip(from_stage).map(Stage::param_count).sum()
    }

    /// Per-sample forward MACs of each stage.
    pub fn stage_macs(&self) -> Result<Vec<u64>> {
        let shapes = self.stage_shapes()?;
        self.stages.iter().zip(&shapes).map(|(s, x)| s.macs(x)).collect()
    }

    /// Per-sample forward MACs of stages `from_stage..`, where `input` is
    /// the slot shape entering `from_stage`.
    pub fn count_macs(&self, from_stage: usize, input: &[Vec<usize>]) -> Result<u64> {
        if from_stage > self.stages.len() {
            return Err(Error::Argument(format!(
                "stage {from_stage} out of range for {} stages",
                self.stages.len()
            )));
        }
        let mut cur = input.to_vec();
        let mut total = 0;
        for s in &self.stages[from_stage..] {
            total += s.macs(&cur)?;
            cur = s.output_shapes(&cur)?;
        }
        Ok(total)
    }

    /// Whole-graph forward MACs per sample.
    pub fn total_macs(&self) -> Result<u64> {
        self.count_macs(0, &self.input)
    }

    /// Pure eval-mode evaluation; returns every output slot.
    pub fn eval(&self, inputs: Vec<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        self.check_inputs(&inputs)?;
        let mut cur = inputs;
        for s in &self.stages {
            cur = s.eval(cur)?;
        }
        Ok(cur)
    }

    /// Eval-mode forward of a single-slot graph with a single-slot output.
    pub fn eval_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = self.eval(vec![x.clone()])?;
        if out.len() != 1 {
            return Err(Error::dim(format!("graph emits {} slots, expected 1", out.len())));
        }
        Ok(out.pop().expect("length checked"))
    }

    pub fn forward(&mut self, inputs: Vec<Tensor<T>>, mode: Mode) -> Result<Forward<T>> {
        match mode {
            Mode::Eval => {
                let mut out = self.eval(inputs)?;
                if out.len() != 1 {
                    return Err(Error::dim(format!("graph emits {} slots, expected 1", out.len())));
                }
                Ok(Forward {
                    output: out.pop().expect("length checked"),
                    record: None,
                })
            }
            Mode::Train => {
                let (output, record) = self.forward_train(inputs, 0)?;
                Ok(Forward {
                    output,
                    record: Some(record),
                })
            }
        }
    }

    /// Train-mode forward. Stages before `trainable_from` run in eval mode
    /// and keep no activations; they receive no gradients in backward.
    pub fn forward_train(&mut self, inputs: Vec<Tensor<T>>, trainable_from: usize) -> Result<(Tensor<T>, Record<T>)> {
        if self.frozen {
            return Err(Error::Argument("cannot train a frozen graph".into()));
        }
        if trainable_from >= self.stages.len() {
            return Err(Error::Argument(format!(
                "trainable_from {trainable_from} leaves no trainable stage"
            )));
        }
        self.check_inputs(&inputs)?;
        let mut cur = inputs;
        for s in &self.stages[..trainable_from] {
            cur = s.eval(cur)?;
        }
        let mut caches = Vec::with_capacity(self.stages.len() - trainable_from);
        for s in &mut self.stages[trainable_from..] {
            let (next, cache) = s.forward_train(cur)?;
            caches.push(cache);
            cur = next;
        }
        if cur.len() != 1 {
            return Err(Error::dim(format!("graph emits {} slots, expected 1", cur.len())));
        }
        Ok((
            cur.pop().expect("length checked"),
            Record {
                trainable_from,
                caches,
            },
        ))
    }

    /// Parameter gradients for every stage (empty for stages that were not
    /// trainable in the recorded pass). The first trainable stage does not
    /// compute an input gradient.
    pub fn backward(&self, record: &Record<T>, grad_output: Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let start = record.trainable_from;
        if record.caches.len() != self.stages.len() - start {
            return Err(Error::Consistency("record does not match this graph".into()));
        }
        let mut grads = vec![Vec::new(); self.stages.len()];
        let mut upstream = vec![grad_output];
        for i in (start..self.stages.len()).rev() {
            let need_input = i > start;
            let (p, dx) = self.stages[i].backward(&record.caches[i - start], upstream, need_input)?;
            grads[i] = p;
            upstream = dx.unwrap_or_default();
        }
        Ok(grads)
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.input.len() {
            return Err(Error::dim(format!(
                "graph takes {} input slots, got {}",
                self.input.len(),
                inputs.len()
            )));
        }
        for (t, want) in inputs.iter().zip(&self.input) {
            if t.ndim() == 0 || &t.shape()[1..] != want.as_slice() {
                return Err(Error::dim(format!(
                    "input shape {:?} does not match [N, {want:?}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Every cut that leaves a non-empty head.
    pub fn legal_cuts(&self) -> Vec<CutPoint> {
        let mut cuts = Vec::new();
        for i in 0..self.stages.len() {
            cuts.push(CutPoint::Boundary(i));
            if matches!(self.stages[i].kind, StageKind::Residual(_)) {
                cuts.push(CutPoint::InBlock(i));
            }
        }
        cuts
    }

    /// The chain cut that puts stage `stage` and any parameter-free stages
    /// directly after it into the tail.
    pub fn cut_after(&self, stage: usize) -> CutPoint {
        let mut n = stage + 1;
        while n < self.stages.len() && !self.stages[n].has_params() && !matches!(self.stages[n].kind, StageKind::Flatten) {
            n += 1;
        }
        CutPoint::Boundary(n)
    }

    /// Per-sample shapes of the tensors crossing `cut`.
    pub fn frontier(&self, cut: CutPoint) -> Result<SlotShapes> {
        let (tail, _) = self.split(cut)?;
        tail.output_shapes()
    }

    fn check_cut(&self, cut: CutPoint) -> Result<()> {
        match cut {
            CutPoint::Boundary(n) if n < self.stages.len() => Ok(()),
            CutPoint::Boundary(n) => Err(Error::Cut(format!(
                "boundary {n} leaves an empty head ({} stages)",
                self.stages.len()
            ))),
            CutPoint::InBlock(i) => match self.stages.get(i).map(|s| &s.kind) {
                Some(StageKind::Residual(_)) => Ok(()),
                _ => Err(Error::Cut(format!("stage {i} is not a whole residual block"))),
            },
        }
    }

    /// Splits into `(tail, head)`. The tail is frozen (eval only); the head
    /// keeps the stage ids of this graph so its weights can be written back.
    pub fn split(&self, cut: CutPoint) -> Result<(NetGraph<T>, NetGraph<T>)> {
        self.check_cut(cut)?;
        let n = cut.tail_stages();
        let mut tail_stages: Vec<Stage<T>> = self.stages[..n].to_vec();
        let mut head_stages: Vec<Stage<T>> = Vec::with_capacity(self.stages.len() - n + 1);
        match cut {
            CutPoint::Boundary(_) => head_stages.extend_from_slice(&self.stages[n..]),
            CutPoint::InBlock(i) => {
                let StageKind::Residual(block) = &self.stages[i].kind else {
                    unreachable!("checked by check_cut");
                };
                let id = self.stages[i].id;
                tail_stages.push(Stage::new(
                    id,
                    StageKind::BlockFront(BlockFront {
                        main1: block.main1.clone(),
                        projection: block.projection.clone(),
                    }),
                ));
                head_stages.push(Stage::new(
                    id,
                    StageKind::BlockBack(BlockBack {
                        main2: block.main2.clone(),
                    }),
                ));
                head_stages.extend_from_slice(&self.stages[i + 1..]);
            }
        }
        let tail = NetGraph {
            arch: self.arch.clone(),
            input: self.input.clone(),
            classes: self.classes,
            seed: self.seed,
            frozen: true,
            stages: tail_stages,
        };
        let head_input = tail.output_shapes()?;
        let head = NetGraph {
            arch: self.arch.clone(),
            input: head_input,
            classes: self.classes,
            seed: self.seed,
            frozen: false,
            stages: head_stages,
        };
        Ok((tail, head))
    }

    /// Copies every stage of this (head) graph back into `full`, matching
    /// by stage id. Batch-norm running statistics travel with the weights.
    pub fn write_back(&self, full: &mut NetGraph<T>) -> Result<()> {
        for s in &self.stages {
            let target = full
                .stages
                .iter_mut()
                .find(|t| t.id == s.id)
                .ok_or_else(|| Error::Consistency(format!("stage id {} not in target graph", s.id)))?;
            match (&s.kind, &mut target.kind) {
                (StageKind::BlockBack(b), StageKind::Residual(r)) => r.main2 = b.main2.clone(),
                (StageKind::BlockFront(f), StageKind::Residual(r)) => {
                    r.main1 = f.main1.clone();
                    r.projection = f.projection.clone();
                }
                (src, dst) if std::mem::discriminant(src) == std::mem::discriminant(dst) => {
                    *dst = src.clone();
                }
                _ => {
                    return Err(Error::Consistency(format!(
                        "stage {} is a {} here but a {} in the target",
                        s.id,
                        s.kind_name(),
                        target.kind_name()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Applies `p ← p − lr·g` to the listed stages.
    pub fn sgd_update(&mut self, grads: &[Vec<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.stages.len() {
            return Err(Error::dim("one gradient set per stage expected"));
        }
        for (s, g) in self.stages.iter_mut().zip(grads) {
            if g.is_empty() {
                continue;
            }
            crate::tensor::sgd_step(&mut s.params_mut(), g, lr)?;
        }
        Ok(())
    }

    /// Serializable description of the graph's structure.
    pub fn describe(&self) -> Result<GraphDesc> {
        let shapes = self.stage_shapes()?;
        let macs = self.stage_macs()?;
        let stages = self
            .stages
            .iter()
            .zip(shapes.iter().zip(&macs))
            .map(|(s, (input, &macs))| StageDesc {
                id: s.id,
                kind: s.kind_name().to_string(),
                droppable: s.droppable,
                input: input.clone(),
                params: s
                    .state()
                    .into_iter()
                    .map(|(name, t)| ParamDesc {
                        name,
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                param_count: s.param_count(),
                macs,
            })
            .collect();
        Ok(GraphDesc {
            arch: self.arch.clone(),
            input: self.input.clone(),
            classes: self.classes,
            seed: self.seed,
            dtype: T::DTYPE,
            stages,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDesc {
    pub id: usize,
    pub kind: String,
    pub droppable: bool,
    pub input: SlotShapes,
    pub params: Vec<ParamDesc>,
    pub param_count: usize,
    pub macs: u64,
}

/// JSON-serializable record of a graph; `(arch, input, classes, seed)`
/// rebuilds it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDesc {
    pub arch: String,
    pub input: SlotShapes,
    pub classes: usize,
    pub seed: u64,
    pub dtype: crate::tensor::DType,
    pub stages: Vec<StageDesc>,
}
