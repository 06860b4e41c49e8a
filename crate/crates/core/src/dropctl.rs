//! Drop decisions over standardized unit scores.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstats::ScoreBoard;

/// Smallest `t` with `pp[t] > 0` and `pp[t + 1] < 0`.
pub fn find_candidate(pp: &[f64]) -> Option<usize> {
    pp.windows(2).position(|w| w[0] > 0.0 && w[1] < 0.0)
}

/// Median; the mean of the middle two for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub allowed: bool,
    pub m_c: f64,
    /// `-inf` before the first drop.
    pub m_d: f64,
}

pub fn gate(candidate: &[f64], dropped: &[f64]) -> Result<Gate> {
    let m_c = median(candidate).ok_or(Error::EmptyInput("candidate scores"))?;
    let m_d = median(dropped).unwrap_or(f64::NEG_INFINITY);
    Ok(Gate {
        allowed: m_c >= m_d,
        m_c,
        m_d,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropDecision {
    pub drop: bool,
    /// Position of the last candidate unit within the head's droppable units.
    pub n_star: Option<usize>,
    /// Stage ids of the candidate prefix.
    pub units: Vec<usize>,
    /// Standardized scores of the candidate prefix.
    pub scores: Vec<f64>,
    pub gate: Option<Gate>,
}

impl DropDecision {
    fn none() -> Self {
        DropDecision {
            drop: false,
            n_star: None,
            units: Vec::new(),
            scores: Vec::new(),
            gate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropEvent {
    pub epoch: usize,
    pub units: Vec<usize>,
    pub m_c: f64,
    /// `None` stands for the `-inf` floor of the first drop.
    pub m_d: Option<f64>,
    pub head_params: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropState {
    /// Number of droppable units already dropped.
    pub z: usize,
    pub dropped_scores: Vec<f64>,
    pub history: Vec<DropEvent>,
}

impl DropState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a positive decision. `head_params` is the parameter count of
    /// the head after the drop.
    pub fn apply(&mut self, epoch: usize, decision: &DropDecision, head_params: usize) -> Result<()> {
        let Some(g) = decision.gate.filter(|_| decision.drop) else {
            return Err(Error::Argument("cannot apply a decision that does not drop".into()));
        };
        self.z += decision.units.len();
        self.dropped_scores.extend_from_slice(&decision.scores);
        self.history.push(DropEvent {
            epoch,
            units: decision.units.clone(),
            m_c: g.m_c,
            m_d: g.m_d.is_finite().then_some(g.m_d),
            head_params,
        });
        Ok(())
    }

    pub fn dropped_units(&self) -> Vec<usize> {
        self.history.iter().flat_map(|e| e.units.iter().copied()).collect()
    }
}

/// Pure decision for the head whose droppable units (stage ids, input to
/// output) are `head_units`.
pub fn decide(sb: &ScoreBoard, st: &DropState, head_units: &[usize]) -> Result<DropDecision> {
    if sb.units != head_units {
        return Err(Error::Consistency(format!(
            "scores cover units {:?} but the head has {:?}",
            sb.units, head_units
        )));
    }
    if head_units.len() < 2 {
        return Ok(DropDecision::none());
    }
    let Some(t) = find_candidate(&sb.standardized) else {
        return Ok(DropDecision::none());
    };
    let scores = sb.standardized[..=t].to_vec();
    let g = gate(&scores, &st.dropped_scores)?;
    Ok(DropDecision {
        drop: g.allowed,
        n_star: Some(t),
        units: head_units[..=t].to_vec(),
        scores,
        gate: Some(g),
    })
}

pub fn write_drop_log<W: Write>(mut w: W, events: &[DropEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
