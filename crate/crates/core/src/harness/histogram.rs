use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::Model;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    /// 1-based encoder block index (gated blocks start at 2).
    pub block: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

/// Per-block counts of gated `σ(m)` over uniform bins of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskHistogram {
    pub bins: usize,
    pub rows: Vec<HistogramRow>,
}

pub fn export_mask_histogram(model: &Model, bins: usize) -> Result<MaskHistogram> {
    if bins < 2 {
        return Err(Error::config("bins", format!("{bins} < 2")));
    }
    let mut rows = Vec::with_capacity(model.gates.len() * bins);
    for (l, gate) in model.gates.iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for &s in gate.sigmoid().iter().skip(1) {
            let b = ((s * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, count) in counts.into_iter().enumerate() {
            rows.push(HistogramRow {
                block: l + 2,
                bin_lo: b as f64 / bins as f64,
                bin_hi: (b + 1) as f64 / bins as f64,
                count,
            });
        }
    }
    Ok(MaskHistogram { bins, rows })
}

impl MaskHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,bin_lo,bin_hi,count\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.block, r.bin_lo, r.bin_hi, r.count);
        }
        out
    }

    pub fn block_counts(&self, block: usize) -> Vec<usize> {
        self.rows.iter().filter(|r| r.block == block).map(|r| r.count).collect()
    }
}
