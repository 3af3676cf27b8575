//! Analytic FLOPs under the projection-only convention.
//!
//! A block costs `12 · active · J²`: one FLOP per multiply-accumulate in the
//! four `J×J` attention projections (`4J²`) and the two FFN projections with
//! a `4J` inner width (`8J²`). Attention score/context products, softmax,
//! layer norm and bias adds are not counted. With `L = 12`, `I = 128`,
//! `J = 768` this gives 10 871 635 968, printed as `10872M`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub blocks: usize,
    pub seq_len: usize,
    pub hidden: usize,
}

impl Dims {
    pub const BERT_BASE: Dims = Dims {
        blocks: 12,
        seq_len: 128,
        hidden: 768,
    };

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("blocks", self.blocks),
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    /// 1-based block index.
    pub block: usize,
    pub active: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_block: Vec<BlockFlops>,
    pub total: u64,
    pub baseline: u64,
    pub speedup: f64,
    /// Adds the `2·active²·J` attention products; never below `total`.
    pub extended_total: u64,
}

pub fn block_flops(active: usize, hidden: usize) -> u64 {
    12 * active as u64 * (hidden as u64).pow(2)
}

fn attention_product_flops(active: usize, hidden: usize) -> u64 {
    2 * (active as u64).pow(2) * hidden as u64
}

pub fn model_flops(active_counts: &[usize], dims: Dims) -> Result<FlopsReport> {
    dims.validate()?;
    if active_counts.len() != dims.blocks {
        return Err(Error::Shape {
            op: "model_flops",
            left: vec![active_counts.len()],
            right: vec![dims.blocks],
        });
    }
    if let Some(&bad) = active_counts.iter().find(|&&c| c > dims.seq_len) {
        return Err(Error::Index {
            what: "active count",
            index: bad,
            size: dims.seq_len,
        });
    }
    let per_block: Vec<BlockFlops> = active_counts
        .iter()
        .enumerate()
        .map(|(i, &a)| BlockFlops {
            block: i + 1,
            active: a,
            flops: block_flops(a, dims.hidden),
        })
        .collect();
    let total = per_block.iter().map(|b| b.flops).sum();
    let baseline = dims.blocks as u64 * block_flops(dims.seq_len, dims.hidden);
    let extended_total = total
        + active_counts
            .iter()
            .map(|&a| attention_product_flops(a, dims.hidden))
            .sum::<u64>();
    let speedup = if total == 0 {
        f64::INFINITY
    } else {
        baseline as f64 / total as f64
    };
    Ok(FlopsReport {
        per_block,
        total,
        baseline,
        speedup,
        extended_total,
    })
}

/// First block at `I`, every later block at `round(gamma · I)`.
pub fn gamma_schedule(gamma: f64, dims: Dims) -> Result<Vec<usize>> {
    crate::config::check_gamma(gamma)?;
    let gated = (gamma * dims.seq_len as f64).round() as usize;
    let mut counts = vec![dims.seq_len];
    counts.extend(std::iter::repeat_n(gated, dims.blocks.saturating_sub(1)));
    Ok(counts)
}

/// FLOPs in millions, e.g. `10872M`.
pub fn format_mflops(flops: u64) -> String {
    format!("{}M", (flops as f64 / 1e6).round() as u64)
}

/// `baseline / total` to two decimals with a `×` suffix.
pub fn speedup_format(baseline: u64, total: u64) -> Result<String> {
    if total == 0 {
        return Err(Error::config("total", "speedup undefined for zero FLOPs"));
    }
    Ok(format!("{:.2}×", baseline as f64 / total as f64))
}

impl FlopsReport {
    pub fn speedup_label(&self) -> Result<String> {
        speedup_format(self.baseline, self.total)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `block,active,flops` rows followed by total/baseline/speedup footer rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,active,flops\n");
        for b in &self.per_block {
            let _ = writeln!(out, "{},{},{}", b.block, b.active, b.flops);
        }
        let _ = writeln!(out, "total,,{}", self.total);
        let _ = writeln!(out, "baseline,,{}", self.baseline);
        let _ = writeln!(out, "speedup,,{:.6}", self.speedup);
        out
    }

    /// Human-readable summary used by the CLI.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.per_block {
            let _ = writeln!(out, "block {:>3}  active {:>5}  {}", b.block, b.active, format_mflops(b.flops));
        }
        let _ = writeln!(out, "total     {}", format_mflops(self.total));
        let _ = writeln!(out, "baseline  {}", format_mflops(self.baseline));
        let label = self.speedup_label().unwrap_or_else(|_| "inf×".into());
        let _ = writeln!(out, "speedup   {label}");
        out
    }
}
