use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::regularizers::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Accuracy on the step's minibatch.
    pub accuracy: f64,
    /// Kept-token fraction for gated blocks 2..L.
    pub kept_frac: Vec<f64>,
    pub polarization_fraction: f64,
}

pub fn metrics_header(blocks: usize) -> String {
    let mut h = String::from("step,epoch,task_loss,l_filter,bi_modal,polar,total,accuracy");
    for b in 2..=blocks {
        let _ = write!(h, ",kept_frac_block_{b}");
    }
    h.push_str(",polarization_fraction");
    h
}

/// CSV with one row per logged step. Floats use shortest round-trip formatting.
pub fn metrics_csv(rows: &[MetricsRow], blocks: usize) -> String {
    let mut out = metrics_header(blocks);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, l.task, l.l_filter, l.bi_modal, l.polar, l.total, r.accuracy
        );
        for b in 0..blocks.saturating_sub(1) {
            // ungated runs keep every token
            let v = r.kept_frac.get(b).copied().unwrap_or(1.0);
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.polarization_fraction);
    }
    out
}
