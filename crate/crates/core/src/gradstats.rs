//! Per-unit gradient statistics and layer scores.
//!
//! For each droppable unit the accumulator keeps, per scored weight, the
//! running sum of gradients and of their absolute values over one epoch.
//! The unit score is `P = 1 − Σ|signed| / Σabs`: close to 1 when the
//! epoch's updates cancel, close to 0 when they point the same way.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NetGraph, Stage};
use crate::tensor::{Scalar, Tensor};

/// Standardized scores below this spread are treated as all equal.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GradAccumulator {
    unit_id: usize,
    signed_sum: Vec<Tensor<f64>>,
    abs_sum: Vec<Tensor<f64>>,
    iterations: usize,
}

impl GradAccumulator {
    pub fn new(unit_id: usize, shapes: &[Vec<usize>]) -> Self {
        GradAccumulator {
            unit_id,
            signed_sum: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            abs_sum: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            iterations: 0,
        }
    }

    /// Accumulator over the scored weights of `stage`.
    pub fn for_stage<T: Scalar>(stage: &Stage<T>) -> Self {
        let params = stage.params();
        let shapes: Vec<Vec<usize>> = stage.scored_weights().iter().map(|&i| params[i].shape().to_vec()).collect();
        Self::new(stage.id, &shapes)
    }

    pub fn unit_id(&self) -> usize {
        self.unit_id
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn signed_sum(&self) -> &[Tensor<f64>] {
        &self.signed_sum
    }

    pub fn abs_sum(&self) -> &[Tensor<f64>] {
        &self.abs_sum
    }

    /// Number of scored weights.
    pub fn weight_count(&self) -> usize {
        self.abs_sum.iter().map(Tensor::len).sum()
    }

    /// Adds one iteration's gradients, one tensor per scored weight.
    pub fn accumulate<T: Scalar>(&mut self, grads: &[&Tensor<T>]) -> Result<()> {
        if grads.len() != self.signed_sum.len() {
            return Err(Error::dim(format!(
                "unit {} scores {} tensors, got {}",
                self.unit_id,
                self.signed_sum.len(),
                grads.len()
            )));
        }
        for (g, s) in grads.iter().zip(&self.signed_sum) {
            if g.shape() != s.shape() {
                return Err(Error::dim(format!(
                    "unit {}: gradient shape {:?} does not match weight {:?}",
                    self.unit_id,
                    g.shape(),
                    s.shape()
                )));
            }
        }
        for ((g, s), a) in grads.iter().zip(&mut self.signed_sum).zip(&mut self.abs_sum) {
            for ((&v, s), a) in g.data().iter().zip(s.data_mut()).zip(a.data_mut()) {
                let v = v.as_f64();
                *s += v;
                *a += v.abs();
            }
        }
        self.iterations += 1;
        Ok(())
    }

    /// `Σ abs_sum / N` over the unit's N scored weights.
    pub fn mean_abs_grad(&self) -> Result<f64> {
        if self.iterations == 0 {
            return Err(Error::EmptyEpoch(self.unit_id));
        }
        let total: f64 = self.abs_sum.iter().map(Tensor::sum).sum();
        Ok(total / self.weight_count() as f64)
    }

    /// Score in `[0, 1]`. A unit whose gradients were all exactly zero
    /// scores 1.
    pub fn score(&self) -> Result<f64> {
        if self.iterations == 0 {
            return Err(Error::EmptyEpoch(self.unit_id));
        }
        let signed: f64 = self.signed_sum.iter().flat_map(|t| t.data()).map(|v| v.abs()).sum();
        let abs: f64 = self.abs_sum.iter().map(Tensor::sum).sum();
        if abs == 0.0 {
            log::warn!("unit {} received only zero gradients this epoch", self.unit_id);
            return Ok(1.0);
        }
        Ok((1.0 - signed / abs).clamp(0.0, 1.0))
    }

    pub fn reset(&mut self) {
        for t in self.signed_sum.iter_mut().chain(&mut self.abs_sum) {
            t.data_mut().fill(0.0);
        }
        self.iterations = 0;
    }
}

/// Population mean and standard deviation.
pub fn population_stats(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// z-scores with the population standard deviation; all zeros when the
/// spread is below [`DEGENERATE_STD`].
pub fn standardize(scores: &[f64]) -> Result<Vec<f64>> {
    let (mean, std) = population_stats(scores)?;
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|p| (p - mean) / std).collect())
}

/// Scores of the head's droppable units at the end of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBoard {
    pub epoch: usize,
    /// Stage ids, input to output.
    pub units: Vec<usize>,
    pub raw: Vec<f64>,
    pub standardized: Vec<f64>,
    pub mean_abs_grad: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ScoreBoard {
    pub fn from_accumulators(epoch: usize, accs: &[GradAccumulator]) -> Result<Self> {
        let raw = accs.iter().map(GradAccumulator::score).collect::<Result<Vec<_>>>()?;
        let mean_abs_grad = accs.iter().map(GradAccumulator::mean_abs_grad).collect::<Result<Vec<_>>>()?;
        let (mean, std) = population_stats(&raw)?;
        Ok(ScoreBoard {
            epoch,
            units: accs.iter().map(GradAccumulator::unit_id).collect(),
            standardized: standardize(&raw)?,
            raw,
            mean_abs_grad,
            mean,
            std,
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = ScoreRow> + '_ {
        (0..self.units.len()).map(move |i| ScoreRow {
            epoch: self.epoch,
            unit_id: self.units[i],
            p: self.raw[i],
            p_std: self.standardized[i],
            mean_abs_grad: self.mean_abs_grad[i],
        })
    }
}

/// One line of the score dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub epoch: usize,
    pub unit_id: usize,
    pub p: f64,
    pub p_std: f64,
    pub mean_abs_grad: f64,
}

pub const SCORE_CSV_HEADER: &str = "epoch,unit_id,p,p_std,mean_abs_grad";

pub fn write_score_csv<W: Write>(mut w: W, rows: &[ScoreRow]) -> Result<()> {
    writeln!(w, "{SCORE_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.unit_id, r.p, r.p_std, r.mean_abs_grad)?;
    }
    Ok(())
}

/// Accumulators for the droppable units of a (head) graph.
#[derive(Debug, Clone)]
pub struct GradStats {
    accs: Vec<GradAccumulator>,
}

impl GradStats {
    pub fn for_graph<T: Scalar>(graph: &NetGraph<T>) -> Self {
        let accs = graph.droppable_units().into_iter().map(|i| GradAccumulator::for_stage(&graph.stages()[i])).collect();
        GradStats { accs }
    }

    pub fn accumulators(&self) -> &[GradAccumulator] {
        &self.accs
    }

    /// Stage ids being tracked.
    pub fn units(&self) -> Vec<usize> {
        self.accs.iter().map(GradAccumulator::unit_id).collect()
    }

    /// Feeds one iteration's per-stage gradients, as returned by
    /// [`NetGraph::backward`] on `graph`.
    pub fn observe<T: Scalar>(&mut self, graph: &NetGraph<T>, grads: &[Vec<Tensor<T>>]) -> Result<()> {
        if grads.len() != graph.len() {
            return Err(Error::dim(format!("{} gradient sets for {} stages", grads.len(), graph.len())));
        }
        for acc in &mut self.accs {
            let Some(pos) = graph.stages().iter().position(|s| s.id == acc.unit_id && s.droppable) else {
                return Err(Error::Consistency(format!("unit {} is not in the graph", acc.unit_id)));
            };
            let stage_grads = &grads[pos];
            if stage_grads.is_empty() {
                continue;
            }
            let picked: Vec<&Tensor<T>> = graph.stages()[pos].scored_weights().iter().map(|&i| &stage_grads[i]).collect();
            acc.accumulate(&picked)?;
        }
        Ok(())
    }

    /// Scores the units that received at least one iteration.
    pub fn scoreboard(&self, epoch: usize) -> Result<ScoreBoard> {
        let live: Vec<GradAccumulator> = self.accs.iter().filter(|a| a.iterations > 0).cloned().collect();
        ScoreBoard::from_accumulators(epoch, &live)
    }

    /// Stops tracking the given units.
    pub fn remove(&mut self, units: &[usize]) {
        self.accs.retain(|a| !units.contains(&a.unit_id));
    }

    pub fn reset(&mut self) {
        self.accs.iter_mut().for_each(GradAccumulator::reset);
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("spearman over {} and {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("spearman needs at least two pairs"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, sx) = population_stats(&rx)?;
    let (my, sy) = population_stats(&ry)?;
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    let cov = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    Ok(cov / (sx * sy))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn one_weight(trace: &[f64]) -> GradAccumulator {
        let mut acc = GradAccumulator::new(0, &[vec![1]]);
        for &g in trace {
            acc.accumulate(&[&Tensor::scalar(g)]).unwrap();
        }
        acc
    }

    #[test]
    fn cancellation_and_alignment() {
        let acc = one_weight(&[1.0, -1.0]);
        assert_eq!(acc.signed_sum()[0].data(), &[0.0]);
        assert_eq!(acc.abs_sum()[0].data(), &[2.0]);
        assert_eq!(acc.score().unwrap(), 1.0);
        assert_eq!(one_weight(&[1.0, 1.0]).score().unwrap(), 0.0);
        let single = one_weight(&[-0.75]);
        assert_eq!(single.signed_sum()[0].data(), &[-0.75]);
        assert_eq!(single.abs_sum()[0].data(), &[0.75]);
        let repeated = one_weight(&[-0.5; 4]);
        assert_eq!(repeated.signed_sum()[0].data(), &[-2.0]);
        assert_eq!(repeated.abs_sum()[0].data(), &[2.0]);
    }

    #[test]
    fn mixed_two_weight_unit_scores_half() {
        let mut acc = GradAccumulator::new(3, &[vec![2]]);
        for g in [[1.0, 1.0], [1.0, -1.0]] {
            acc.accumulate(&[&Tensor::new(vec![2], g.to_vec()).unwrap()]).unwrap();
        }
        assert_eq!(acc.score().unwrap(), 0.5);
    }

    #[test]
    fn mean_abs_grad_cases() {
        let mut acc = GradAccumulator::new(0, &[vec![2]]);
        acc.accumulate(&[&Tensor::new(vec![2], vec![2.0f64, -4.0]).unwrap()]).unwrap();
        assert_eq!(acc.mean_abs_grad().unwrap(), 3.0);
        let zero = one_weight(&[0.0, 0.0]);
        assert_eq!(zero.mean_abs_grad().unwrap(), 0.0);
        assert_eq!(zero.score().unwrap(), 1.0);
    }

    #[test]
    fn empty_epoch_is_an_error() {
        let acc = GradAccumulator::new(5, &[vec![1]]);
        assert!(matches!(acc.score(), Err(Error::EmptyEpoch(5))));
        assert!(matches!(acc.mean_abs_grad(), Err(Error::EmptyEpoch(5))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut acc = GradAccumulator::new(0, &[vec![2, 2]]);
        let err = acc.accumulate(&[&Tensor::<f32>::zeros(&[4])]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert_eq!(acc.iterations(), 0);
    }

    #[test]
    fn reset_clears_everything() {
        let mut acc = one_weight(&[1.0, 2.0]);
        acc.reset();
        assert_eq!(acc.iterations(), 0);
        assert_eq!(acc.abs_sum()[0].data(), &[0.0]);
    }

    #[test]
    fn standardize_closed_form() {
        let z = standardize(&[0.2, 0.4, 0.6]).unwrap();
        let expected = 1.5f64.sqrt();
        assert!((z[0] + expected).abs() < 1e-12);
        assert!(z[1].abs() < 1e-12);
        assert!((z[2] - expected).abs() < 1e-12);
        assert!((expected - 1.224744).abs() < 1e-6);
        assert_eq!(standardize(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(standardize(&[0.9]).unwrap(), vec![0.0]);
        assert!(matches!(standardize(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn csv_dump_layout() {
        let sb = ScoreBoard {
            epoch: 2,
            units: vec![0, 1],
            raw: vec![0.25, 0.75],
            standardized: vec![-1.0, 1.0],
            mean_abs_grad: vec![0.5, 0.125],
            mean: 0.5,
            std: 0.25,
        };
        let rows: Vec<_> = sb.rows().collect();
        let mut out = Vec::new();
        write_score_csv(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,unit_id,p,p_std,mean_abs_grad\n2,0,0.25,-1,0.5\n2,1,0.75,1,0.125\n"
        );
    }

    fn trace() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), 1..8))
    }

    fn run(trace: &[Vec<f64>], scale: f64) -> GradAccumulator {
        let n = trace[0].len();
        let mut acc = GradAccumulator::new(0, &[vec![n]]);
        for g in trace {
            let t = Tensor::new(vec![n], g.iter().map(|v| v * scale).collect()).unwrap();
            acc.accumulate(&[&t]).unwrap();
        }
        acc
    }

    proptest! {
        #[test]
        fn triangle_inequality_and_range(tr in trace()) {
            let acc = run(&tr, 1.0);
            for (s, a) in acc.signed_sum()[0].data().iter().zip(acc.abs_sum()[0].data()) {
                prop_assert!(s.abs() <= *a);
            }
            let p = acc.score().unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn score_is_scale_and_sign_invariant(tr in trace()) {
            let base = run(&tr, 1.0).score().unwrap();
            for c in [0.5, 10.0, -1.0] {
                prop_assert!((run(&tr, c).score().unwrap() - base).abs() <= 1e-12);
            }
        }

        #[test]
        fn mean_abs_matches_log_replay(tr in trace()) {
            let acc = run(&tr, 1.0);
            let n = tr[0].len() as f64;
            let brute: f64 = tr.iter().flatten().map(|v| v.abs()).sum::<f64>() / n;
            prop_assert!((acc.mean_abs_grad().unwrap() - brute).abs() <= 1e-12 * brute.max(1.0));
        }

        #[test]
        fn standardized_moments(xs in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let (_, std) = population_stats(&xs).unwrap();
            prop_assume!(std >= 1e-6);
            let z = standardize(&xs).unwrap();
            let (m, s) = population_stats(&z).unwrap();
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
