//! Minibatch training of weights and gate masks with two Adam instances.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::data::{generate_synthetic, Dataset, SyntheticData};
use super::histogram::{export_mask_histogram, MaskHistogram};
use super::metrics::MetricsRow;
use super::RunConfig;
use crate::autograd::{Tape, Var};
use crate::encoder::{infer, model_forward, Model, RoutingMode};
use crate::error::{Error, Result};
use crate::flops::{model_flops, Dims, FlopsReport};
use crate::gate::keep_flags;
use crate::regularizers::{polar_on_tape, polarization_fraction, LossBreakdown, RegularizerSettings};
use crate::tensor::Tensor;

/// Distance from 0 or 1 under which a gate counts as polarized.
pub const POLARIZATION_TOL: f64 = 0.05;

const SHUFFLE_SALT: u64 = 0x5eed_cafe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub model_optimizer: AdamConfig,
    pub mask_optimizer: AdamConfig,
    /// Log a metrics row every this many steps (the final step is always logged).
    pub log_every: usize,
    pub histogram_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            model_optimizer: AdamConfig::with_lr(1e-3),
            mask_optimizer: AdamConfig::with_lr(0.05),
            log_every: 1,
            histogram_bins: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        if self.histogram_bins < 2 {
            return Err(Error::config("train.histogram_bins", "need at least 2 bins"));
        }
        self.model_optimizer.validate("train.model_optimizer")?;
        self.mask_optimizer.validate("train.mask_optimizer")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub examples: usize,
    /// Mean active tokens entering each block.
    pub mean_active_counts: Vec<f64>,
    /// FLOPs at the rounded mean counts.
    pub flops: FlopsReport,
}

impl EvalResult {
    /// Mean kept fraction over gated blocks (blocks 2..L).
    pub fn gated_kept_fraction(&self, seq_len: usize) -> f64 {
        let gated = &self.mean_active_counts[1..];
        gated.iter().sum::<f64>() / (gated.len() * seq_len) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    Completed,
    /// Non-finite loss or gradient; the model holds the last good parameters.
    Diverged { step: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    /// Histogram of gate values at the end of each epoch.
    pub histograms: Vec<MaskHistogram>,
    pub outcome: TrainOutcome,
    /// Evaluation on the held-out split; absent when training diverged.
    pub eval: Option<EvalResult>,
}

impl TrainRun {
    pub fn into_result(self) -> Result<Self> {
        match &self.outcome {
            TrainOutcome::Completed => Ok(self),
            TrainOutcome::Diverged { step, reason } => Err(Error::Divergence {
                step: *step,
                reason: reason.clone(),
            }),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn add_grad(acc: &mut Tensor, grad: Option<&Tensor>) {
    if let Some(g) = grad {
        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

fn scale(t: &mut Tensor, s: f64) {
    for v in t.data_mut() {
        *v *= s;
    }
}

/// Kept fraction per gated block from the current masks.
pub fn kept_fractions(model: &Model) -> Vec<f64> {
    let n = model.config.seq_len as f64;
    model
        .gates
        .iter()
        .map(|g| keep_flags(g).iter().filter(|&&k| k).count() as f64 / n)
        .collect()
}

struct StepResult {
    loss: LossBreakdown,
    accuracy: f64,
    weight_grads: Vec<Tensor>,
    mask_grads: Vec<Tensor>,
}

fn batch_gradients(model: &Model, data: &Dataset, batch: &[usize]) -> Result<StepResult> {
    let mut weight_grads: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut mask_grads: Vec<Tensor> = model.gates.iter().map(|g| Tensor::zeros(g.m.shape())).collect();
    let mut task_sum = 0.0;
    let mut correct = 0usize;

    for &idx in batch {
        let ex = &data.examples[idx];
        let mut tape = Tape::new();
        let pass = model_forward(&mut tape, model, &ex.tokens, RoutingMode::Dynamic, true)?;
        let loss = tape.cross_entropy(pass.logits, ex.label)?;
        task_sum += tape.value(loss).item();
        if argmax(tape.value(pass.logits).data()) == ex.label {
            correct += 1;
        }
        tape.backward(loss)?;
        for (acc, v) in weight_grads.iter_mut().zip(&pass.weight_vars) {
            add_grad(acc, tape.grad(*v));
        }
        for (acc, v) in mask_grads.iter_mut().zip(&pass.mask_vars) {
            add_grad(acc, tape.grad(*v));
        }
    }

    let inv = 1.0 / batch.len() as f64;
    weight_grads.iter_mut().for_each(|g| scale(g, inv));
    mask_grads.iter_mut().for_each(|g| scale(g, inv));
    let task = task_sum * inv;

    let cfg = &model.config;
    let loss = if model.gates.is_empty() {
        LossBreakdown::new(task, 0.0, 0.0, cfg.lambda_filter, cfg.lambda_bi)
    } else {
        let settings = RegularizerSettings::from_config(cfg);
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.gates.iter().map(|g| tape.leaf(g.m.clone())).collect();
        let pv = polar_on_tape(&mut tape, &vars, &settings)?;
        let (l_filter, bi) = (tape.value(pv.l_filter).item(), tape.value(pv.bi_modal).item());
        tape.backward(pv.polar)?;
        for (acc, v) in mask_grads.iter_mut().zip(&vars) {
            add_grad(acc, tape.grad(*v));
        }
        LossBreakdown::new(task, l_filter, bi, cfg.lambda_filter, cfg.lambda_bi)
    };

    Ok(StepResult {
        loss,
        accuracy: correct as f64 * inv,
        weight_grads,
        mask_grads,
    })
}

/// Generates the configured synthetic data and trains on it.
pub fn train(run: &RunConfig) -> Result<TrainRun> {
    run.validate()?;
    let data = generate_synthetic(&run.task)?;
    train_on(run, &data)
}

pub fn train_on(run: &RunConfig, data: &SyntheticData) -> Result<TrainRun> {
    run.validate()?;
    let tc = &run.train;
    let mut model = Model::new(run.model.clone())?;
    let mut weight_opt = AdamState::new(tc.model_optimizer, &model.params.tensors);
    let mut mask_opt = AdamState::new(tc.mask_optimizer, model.gates.iter().map(|g| &g.m));
    let mask_names: Vec<String> = (2..=model.config.blocks).map(|b| format!("gate.block{b}")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(run.model.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let steps_per_epoch = data.train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;

    let mut metrics = Vec::new();
    let mut histograms = Vec::new();
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let kept = kept_fractions(&model);
            let polarization = polarization_fraction(
                &model.gates.iter().map(|g| g.m.clone()).collect::<Vec<_>>(),
                POLARIZATION_TOL,
            );
            let result = batch_gradients(&model, &data.train, batch)?;
            if !result.loss.total.is_finite() {
                return Ok(diverged(model, metrics, histograms, step, "non-finite loss".into()));
            }
            if step.is_multiple_of(tc.log_every) || step == total_steps {
                metrics.push(MetricsRow {
                    step,
                    epoch,
                    loss: result.loss,
                    accuracy: result.accuracy,
                    kept_frac: kept,
                    polarization_fraction: polarization,
                });
            }

            let last_good = model.clone();
            let update = weight_opt
                .step(&mut model.params.tensors, &result.weight_grads, &model.params.names)
                .and_then(|_| {
                    mask_opt.step(model.gates.iter_mut().map(|g| &mut g.m), &result.mask_grads, &mask_names)
                });
            if let Err(e) = update {
                return Ok(diverged(last_good, metrics, histograms, step, e.to_string()));
            }
        }
        if !model.gates.is_empty() {
            histograms.push(export_mask_histogram(&model, tc.histogram_bins)?);
        }
    }

    let eval = evaluate(&model, &data.eval)?;
    Ok(TrainRun {
        model,
        metrics,
        histograms,
        outcome: TrainOutcome::Completed,
        eval: Some(eval),
    })
}

fn diverged(
    model: Model,
    metrics: Vec<MetricsRow>,
    histograms: Vec<MaskHistogram>,
    step: usize,
    reason: String,
) -> TrainRun {
    TrainRun {
        model,
        metrics,
        histograms,
        outcome: TrainOutcome::Diverged { step, reason },
        eval: None,
    }
}

/// Accuracy, mean per-block active counts and FLOPs with frozen parameters.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalResult> {
    let cfg = &model.config;
    let mut correct = 0usize;
    let mut count_sums = vec![0usize; cfg.blocks];
    for ex in &data.examples {
        let (logits, counts) = infer(model, &ex.tokens)?;
        if argmax(logits.data()) == ex.label {
            correct += 1;
        }
        for (s, c) in count_sums.iter_mut().zip(counts) {
            *s += c;
        }
    }
    let n = data.len().max(1) as f64;
    let mean_active_counts: Vec<f64> = count_sums.iter().map(|&s| s as f64 / n).collect();
    let rounded: Vec<usize> = mean_active_counts.iter().map(|c| c.round() as usize).collect();
    let dims = Dims {
        blocks: cfg.blocks,
        seq_len: cfg.seq_len,
        hidden: cfg.hidden,
    };
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        examples: data.len(),
        mean_active_counts,
        flops: model_flops(&rounded, dims)?,
    })
}
