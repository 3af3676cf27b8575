//! Post-LN transformer encoder with per-block token gates.
//!
//! Every sub-layer output (attention, feed-forward, both layer norms) is
//! re-masked so that tokens dropped by the gate stay exactly zero despite
//! bias terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{AttentionExclusion, ModelConfig};
use crate::error::{Error, Result};
use crate::gate::{apply_routing, mask_match, GateParams, Routing};
use crate::tensor::Tensor;

pub type ParamId = usize;

/// Named, ordered model weights (gate masks are kept separately).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Puts every parameter on the tape, as leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Vec<ParamId>,
    pub bq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub bk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub bv: Vec<ParamId>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub token: ParamId,
    pub position: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub pooler_w: ParamId,
    pub pooler_b: ParamId,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

/// Tokens whose rows are live entering a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSet {
    pub keep: Vec<bool>,
    pub count: usize,
}

impl ActiveSet {
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            count: n,
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        if keep.first() != Some(&true) {
            return Err(Error::config("active_set", "CLS position must stay active"));
        }
        let count = keep.iter().filter(|&&k| k).count();
        Ok(Self { keep, count })
    }

    pub fn is_full(&self) -> bool {
        self.count == self.keep.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    /// One gate per block from the second block on; empty when ungated.
    pub gates: Vec<GateParams>,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape");
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.normal(format!("{name}.weight"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        (w, b)
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> (ParamId, ParamId) {
        let g = self.store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        (g, b)
    }
}

impl Model {
    /// Seeded initialization: N(0, 1) embeddings, N(0, 1/fan_in) weights,
    /// zero biases, unit layer-norm gains, uniform `[0, 1)` gate masks.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: ParamStore::default(),
        };
        let (j, d) = (config.hidden, config.head_dim());

        let embedding = EmbeddingParams {
            token: init.normal("embed.token".into(), &[config.vocab, j], 1.0),
            position: init.normal("embed.position".into(), &[config.seq_len, j], 1.0),
        };

        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let p = format!("block{}", l + 1);
            let mut per_head = |kind: &str| -> (Vec<ParamId>, Vec<ParamId>) {
                (0..config.heads)
                    .map(|h| init.linear(&format!("{p}.attn.{kind}{h}"), j, d))
                    .unzip()
            };
            let (wq, bq) = per_head("q");
            let (wk, bk) = per_head("k");
            let (wv, bv) = per_head("v");
            let (wo, bo) = init.linear(&format!("{p}.attn.out"), j, j);
            let (ln1_gain, ln1_bias) = init.layer_norm(&format!("{p}.ln1"), j);
            let (w1, b1) = init.linear(&format!("{p}.ffn.in"), j, config.ffn_dim);
            let (w2, b2) = init.linear(&format!("{p}.ffn.out"), config.ffn_dim, j);
            let (ln2_gain, ln2_bias) = init.layer_norm(&format!("{p}.ln2"), j);
            blocks.push(BlockParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                w1,
                b1,
                w2,
                b2,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }

        let (pooler_w, pooler_b) = init.linear("pooler", j, j);
        let (classifier_w, classifier_b) = init.linear("classifier", j, config.classes);
        let head = HeadParams {
            pooler_w,
            pooler_b,
            classifier_w,
            classifier_b,
        };

        let gates = if config.gated {
            (1..config.blocks)
                .map(|_| GateParams::uniform(config.seq_len, config.alpha, &mut init.rng))
                .collect()
        } else {
            Vec::new()
        };

        Ok(Self {
            config,
            params: init.store,
            embedding,
            blocks,
            head,
            gates,
        })
    }

    /// Sets every gate mask entry to `value`.
    pub fn set_gates(&mut self, value: f64) {
        for g in &mut self.gates {
            g.m = Tensor::full(g.m.shape(), value);
        }
    }

    /// Same weights with the gates removed.
    pub fn ungated(&self) -> Self {
        let mut m = self.clone();
        m.config.gated = false;
        m.gates.clear();
        m
    }

    /// Rebuilds a model around stored weights and masks, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore, gates: Vec<GateParams>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.names != model.params.names {
            return Err(Error::Format {
                what: "checkpoint".into(),
                message: "parameter names do not match the configured architecture".into(),
            });
        }
        for (i, (have, want)) in params.tensors.iter().zip(&model.params.tensors).enumerate() {
            if have.shape() != want.shape() {
                return Err(Error::Format {
                    what: "checkpoint".into(),
                    message: format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        params.names[i],
                        have.shape(),
                        want.shape()
                    ),
                });
            }
        }
        if gates.len() != model.gates.len()
            || gates.iter().any(|g| g.m.shape() != [model.config.seq_len])
        {
            return Err(Error::Format {
                what: "checkpoint".into(),
                message: "gate masks do not match the configured architecture".into(),
            });
        }
        model.params = params;
        model.gates = gates;
        Ok(model)
    }
}

/// Token plus positional embedding.
pub fn embed(tape: &mut Tape, model: &Model, vars: &[Var], tokens: &[usize]) -> Result<Var> {
    let cfg = &model.config;
    if tokens.len() != cfg.seq_len {
        return Err(Error::Shape {
            op: "embed",
            left: vec![tokens.len()],
            right: vec![cfg.seq_len],
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            size: cfg.vocab,
        });
    }
    let tok = tape.index_rows(vars[model.embedding.token], tokens)?;
    tape.add(tok, vars[model.embedding.position])
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row_bias(h, b)
}

pub struct AttentionOutput {
    pub output: Var,
    /// Softmax weights per head, `[I, I]`.
    pub probs: Vec<Var>,
}

pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    vars: &[Var],
    p: &BlockParams,
    active: &ActiveSet,
    mode: AttentionExclusion,
) -> Result<AttentionOutput> {
    let n = tape.value(x).rows();
    let d = tape.value(vars[p.wq[0]]).cols();
    let scale = 1.0 / (d as f64).sqrt();

    let key_mask = (mode == AttentionExclusion::AdditiveMask && !active.is_full()).then(|| {
        let row: Vec<f64> = active
            .keep
            .iter()
            .map(|&k| if k { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        row.repeat(n)
    });
    let ones = vec![1.0; n * n];

    let mut heads = Vec::with_capacity(p.wq.len());
    let mut probs = Vec::with_capacity(p.wq.len());
    for h in 0..p.wq.len() {
        let q = linear(tape, x, vars[p.wq[h]], vars[p.bq[h]])?;
        let k = linear(tape, x, vars[p.wk[h]], vars[p.bk[h]])?;
        let v = linear(tape, x, vars[p.wv[h]], vars[p.bv[h]])?;
        let kt = tape.transpose(k)?;
        let raw = tape.matmul(q, kt)?;
        let mut scores = tape.affine(raw, scale, 0.0);
        if let Some(shift) = &key_mask {
            scores = tape.mul_add_const(scores, &ones, shift)?;
        }
        let a = tape.row_softmax(scores);
        probs.push(a);
        heads.push(tape.matmul(a, v)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = linear(tape, cat, vars[p.wo], vars[p.bo])?;
    let output = tape.mask_rows(out, &active.keep)?;
    Ok(AttentionOutput { output, probs })
}

pub fn feed_forward(tape: &mut Tape, x: Var, vars: &[Var], p: &BlockParams, active: &ActiveSet) -> Result<Var> {
    let h = linear(tape, x, vars[p.w1], vars[p.b1])?;
    let h = tape.gelu(h);
    let o = linear(tape, h, vars[p.w2], vars[p.b2])?;
    tape.mask_rows(o, &active.keep)
}

/// `Y = LN(X + MHA(X))`, `Z = LN(Y + FFN(Y))`, re-masking after each sub-layer.
pub fn encoder_block_forward(
    tape: &mut Tape,
    x: Var,
    vars: &[Var],
    p: &BlockParams,
    active: &ActiveSet,
    mode: AttentionExclusion,
    eps: f64,
) -> Result<Var> {
    let attn = multi_head_attention(tape, x, vars, p, active, mode)?.output;
    let r1 = tape.add(x, attn)?;
    let y = tape.layer_norm_rows(r1, vars[p.ln1_gain], vars[p.ln1_bias], eps)?;
    let y = tape.mask_rows(y, &active.keep)?;
    let f = feed_forward(tape, y, vars, p, active)?;
    let r2 = tape.add(y, f)?;
    let z = tape.layer_norm_rows(r2, vars[p.ln2_gain], vars[p.ln2_bias], eps)?;
    tape.mask_rows(z, &active.keep)
}

/// `tanh(Z[0]·W_p + b_p)·W_c + b_c`, shape `[1, classes]`.
pub fn classify(tape: &mut Tape, z: Var, vars: &[Var], head: &HeadParams) -> Result<Var> {
    let cls = tape.index_rows(z, &[0])?;
    let pooled = linear(tape, cls, vars[head.pooler_w], vars[head.pooler_b])?;
    let pooled = tape.tanh(pooled);
    linear(tape, pooled, vars[head.classifier_w], vars[head.classifier_b])
}

/// Whether gates recompute their routing or reuse a fixed one.
#[derive(Clone, Copy, Debug)]
pub enum RoutingMode<'a> {
    Dynamic,
    Frozen(&'a [Routing]),
}

pub struct ForwardPass {
    pub logits: Var,
    /// Active tokens entering each block; the first block always sees all.
    pub active_counts: Vec<usize>,
    pub routings: Vec<Routing>,
    pub block_inputs: Vec<Var>,
    pub weight_vars: Vec<Var>,
    pub mask_vars: Vec<Var>,
}

pub fn model_forward(
    tape: &mut Tape,
    model: &Model,
    tokens: &[usize],
    routing: RoutingMode<'_>,
    trainable: bool,
) -> Result<ForwardPass> {
    let cfg = &model.config;
    let weight_vars = model.params.register(tape, trainable);
    let mask_vars: Vec<Var> = model
        .gates
        .iter()
        .map(|g| {
            if trainable {
                tape.leaf(g.m.clone())
            } else {
                tape.constant(g.m.clone())
            }
        })
        .collect();

    let mut x = embed(tape, model, &weight_vars, tokens)?;
    let mut active = ActiveSet::all(cfg.seq_len);
    let mut active_counts = Vec::with_capacity(cfg.blocks);
    let mut routings = Vec::new();
    let mut block_inputs = Vec::with_capacity(cfg.blocks);

    for (l, block) in model.blocks.iter().enumerate() {
        if l > 0 && !model.gates.is_empty() {
            let gate = &model.gates[l - 1];
            let outcome = match routing {
                RoutingMode::Dynamic => mask_match(tape, x, mask_vars[l - 1], gate.alpha)?,
                RoutingMode::Frozen(fixed) => {
                    let r = fixed.get(l - 1).ok_or(Error::Index {
                        what: "frozen routing",
                        index: l - 1,
                        size: fixed.len(),
                    })?;
                    apply_routing(tape, x, mask_vars[l - 1], r.clone())?
                }
            };
            x = outcome.x_m;
            // a row zeroed upstream stays dead even if a gate would keep it
            let keep = outcome.keep.iter().zip(&active.keep).map(|(&k, &a)| k && a).collect();
            active = ActiveSet::from_keep(keep)?;
            routings.push(outcome.routing);
        }
        active_counts.push(active.count);
        block_inputs.push(x);
        x = encoder_block_forward(
            tape,
            x,
            &weight_vars,
            block,
            &active,
            cfg.attention_exclusion,
            cfg.layer_norm_eps,
        )?;
    }

    let logits = classify(tape, x, &weight_vars, &model.head)?;
    Ok(ForwardPass {
        logits,
        active_counts,
        routings,
        block_inputs,
        weight_vars,
        mask_vars,
    })
}

/// Logits and active counts for one sequence, off any training tape.
pub fn infer(model: &Model, tokens: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let mut tape = Tape::new();
    let pass = model_forward(&mut tape, model, tokens, RoutingMode::Dynamic, false)?;
    Ok((tape.value(pass.logits).clone(), pass.active_counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            blocks: 3,
            seq_len: 4,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 10,
            classes: 2,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let mut model = Model::new(small()).unwrap();
        for id in [model.embedding.token, model.embedding.position] {
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let x = embed(&mut tape, &model, &vars, &[0, 1, 2, 3]).unwrap();
        assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rows_are_table_rows() {
        let mut model = Model::new(small()).unwrap();
        let pos = model.embedding.position;
        let shape = model.params.get(pos).shape().to_vec();
        *model.params.get_mut(pos) = Tensor::zeros(&shape);
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let tokens = [3, 9, 3, 0];
        let x = embed(&mut tape, &model, &vars, &tokens).unwrap();
        let table = model.params.get(model.embedding.token);
        for (i, &t) in tokens.iter().enumerate() {
            assert_eq!(tape.value(x).row(i), table.row(t));
        }
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let model = Model::new(small()).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let err = embed(&mut tape, &model, &vars, &[0, 1, 10, 2]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 10, .. }));
    }

    #[test]
    fn additive_mask_zeroes_weights_on_inactive_key() {
        let model = Model::new(small()).unwrap();
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, false);
        let mut x = embed(&mut tape, &model, &vars, &[1, 2, 3, 4]).unwrap();
        let keep = vec![true, true, false, true];
        x = tape.mask_rows(x, &keep).unwrap();
        let active = ActiveSet::from_keep(keep).unwrap();
        let out = multi_head_attention(
            &mut tape,
            x,
            &vars,
            &model.blocks[0],
            &active,
            AttentionExclusion::AdditiveMask,
        )
        .unwrap();
        for &p in &out.probs {
            let w = tape.value(p);
            for i in 0..4 {
                assert_eq!(w.get(i, 2), 0.0);
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(tape.value(out.output).row(2), &[0.0; 8]);
    }

    #[test]
    fn modes_coincide_when_all_active() {
        let model = Model::new(small()).unwrap();
        let run = |mode| {
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, false);
            let x = embed(&mut tape, &model, &vars, &[1, 2, 3, 4]).unwrap();
            let y = encoder_block_forward(&mut tape, x, &vars, &model.blocks[0], &ActiveSet::all(4), mode, 1e-12)
                .unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(AttentionExclusion::AdditiveMask), run(AttentionExclusion::Literal));
    }

    #[test]
    fn inactive_rows_stay_zero_through_block() {
        let mut model = Model::new(small()).unwrap();
        // nonzero biases everywhere
        for (name, t) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            if name.ends_with(".bias") {
                *t = Tensor::full(t.shape(), 0.3);
            }
        }
        for mode in [AttentionExclusion::AdditiveMask, AttentionExclusion::Literal] {
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, false);
            let keep = vec![true, false, true, false];
            let x = embed(&mut tape, &model, &vars, &[1, 2, 3, 4]).unwrap();
            let x = tape.mask_rows(x, &keep).unwrap();
            let active = ActiveSet::from_keep(keep).unwrap();
            let ffn = feed_forward(&mut tape, x, &vars, &model.blocks[0], &active).unwrap();
            assert_eq!(tape.value(ffn).row(1), &[0.0; 8]);
            let z = encoder_block_forward(&mut tape, x, &vars, &model.blocks[0], &active, mode, 1e-12).unwrap();
            assert_eq!(tape.value(z).row(1), &[0.0; 8]);
            assert_eq!(tape.value(z).row(3), &[0.0; 8]);
            assert!(tape.value(z).row(0).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut model = Model::new(small()).unwrap();
        let h = model.head.clone();
        for id in [h.pooler_w, h.pooler_b, h.classifier_w, h.classifier_b] {
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let (logits, _) = infer(&model, &[0, 1, 2, 3]).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
    }

    #[test]
    fn closed_gates_keep_only_cls() {
        let mut model = Model::new(small()).unwrap();
        model.set_gates(-40.0);
        let (logits, counts) = infer(&model, &[0, 5, 6, 7]).unwrap();
        assert_eq!(counts, vec![4, 1, 1]);
        assert!(logits.is_finite());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::new(small()).unwrap();
        let b = Model::new(small()).unwrap();
        assert_eq!(a, b);
        let (la, _) = infer(&a, &[0, 1, 2, 3]).unwrap();
        let (lb, _) = infer(&b, &[0, 1, 2, 3]).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn from_parts_rejects_shape_drift() {
        let model = Model::new(small()).unwrap();
        let mut params = model.params.clone();
        params.tensors[0] = Tensor::zeros(&[1, 1]);
        assert!(Model::from_parts(model.config.clone(), params, model.gates.clone()).is_err());
    }
}
