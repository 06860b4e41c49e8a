use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::error::Result;

/// Wall-clock seconds spent in each part of an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTimes {
    /// Forward, backward and update of the trained stages, plus reading
    /// raw input batches.
    pub train: f64,
    /// Running the tail and writing the feature cache.
    pub cache_write: f64,
    pub cache_read: f64,
    pub validate: f64,
}

impl EpochTimes {
    /// Training cost of the epoch: everything except validation.
    pub fn epoch(&self) -> f64 {
        self.train + self.cache_write + self.cache_read
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub strategy: Strategy,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Parameters updated this epoch.
    pub head_params: usize,
    /// Forward MACs per sample of the stages that ran this epoch from
    /// their input (raw images or cached features).
    pub head_macs: u64,
    /// Droppable units removed or frozen before this epoch.
    pub units_out: usize,
    pub times: EpochTimes,
    /// Units dropped or frozen at the end of this epoch.
    pub drops: Vec<usize>,
}

impl EpochReport {
    /// Same report with every wall-clock field zeroed.
    pub fn without_times(&self) -> EpochReport {
        EpochReport {
            times: EpochTimes::default(),
            ..self.clone()
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "epoch,strategy,lr,train_loss,train_acc,val_acc,head_params,head_macs,units_out,\
time_train,time_cache_write,time_cache_read,time_validate,time_epoch,drops";

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[EpochReport]) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        let drops: Vec<String> = r.drops.iter().map(ToString::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch,
            r.strategy,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            r.head_params,
            r.head_macs,
            r.units_out,
            r.times.train,
            r.times.cache_write,
            r.times.cache_read,
            r.times.validate,
            r.times.epoch(),
            drops.join(";")
        )?;
    }
    Ok(())
}

pub fn write_reports_json<W: Write>(w: W, reports: &[EpochReport]) -> Result<()> {
    serde_json::to_writer_pretty(w, reports)?;
    Ok(())
}
