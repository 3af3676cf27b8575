//! Mask matching: score token rows, sort them, pair them with sorted gate
//! values, threshold, and restore the original token order.
//!
//! Position 0 (CLS) never takes part: it keeps gate value 1 and its row
//! passes through untouched. Gate parameters are a pool of values rather
//! than per-position switches; the largest gate goes to the most important
//! token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable mask vector for one gated block. Entry 0 is inert (CLS slot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub m: Tensor,
    pub alpha: f64,
}

impl GateParams {
    /// Uniform `[0, 1)` initialization.
    pub fn uniform<R: Rng>(seq_len: usize, alpha: f64, rng: &mut R) -> Self {
        let m = (0..seq_len).map(|_| rng.random::<f64>()).collect();
        Self {
            m: Tensor::vector(m),
            alpha,
        }
    }

    pub fn constant(seq_len: usize, value: f64, alpha: f64) -> Self {
        Self {
            m: Tensor::full(&[seq_len], value),
            alpha,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.m.numel()
    }

    /// σ(m_i) for every slot, CLS slot included.
    pub fn sigmoid(&self) -> Vec<f64> {
        self.m.data().iter().map(|&v| sigmoid_scalar(v)).collect()
    }
}

/// `s_i = Σ_j |X_ij|`, computed off the tape.
pub fn importance_scores(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v.abs()).sum())
        .collect()
}

/// Positions 1.. ordered by descending `values`, ties kept in index order;
/// position 0 stays first.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (1..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut out = Vec::with_capacity(values.len());
    if !values.is_empty() {
        out.push(0);
    }
    out.extend(order);
    out
}

/// Token order by descending importance, CLS fixed at position 0.
pub fn sort_permutation(scores: &[f64]) -> Vec<usize> {
    descending_order(scores)
}

/// `σ(m_i) ≥ α` per slot; slot 0 always true.
pub fn keep_flags(gate: &GateParams) -> Vec<bool> {
    gate.sigmoid()
        .iter()
        .enumerate()
        .map(|(i, &s)| i == 0 || s >= gate.alpha)
        .collect()
}

/// Discrete routing decisions for one gate application. Carries no gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Routing {
    /// `token_order[k]` is the token occupying sorted slot `k`.
    pub token_order: Vec<usize>,
    /// `gate_order[k]` is the gate parameter matched to sorted slot `k`.
    pub gate_order: Vec<usize>,
    /// Threshold decision per sorted slot.
    pub slot_keep: Vec<bool>,
}

impl Routing {
    pub fn compute(x: &Tensor, gate: &GateParams) -> Result<Self> {
        if x.rows() != gate.seq_len() {
            return Err(Error::Shape {
                op: "mask_match",
                left: x.shape().to_vec(),
                right: gate.m.shape().to_vec(),
            });
        }
        let sig = gate.sigmoid();
        let token_order = sort_permutation(&importance_scores(x));
        let gate_order = descending_order(&sig);
        let slot_keep = gate_order
            .iter()
            .enumerate()
            .map(|(k, &g)| k == 0 || sig[g] >= gate.alpha)
            .collect();
        Ok(Self {
            token_order,
            gate_order,
            slot_keep,
        })
    }

    /// Keep flag per original token position.
    pub fn token_keep(&self) -> Vec<bool> {
        let mut keep = vec![false; self.token_order.len()];
        for (k, &tok) in self.token_order.iter().enumerate() {
            keep[tok] = self.slot_keep[k];
        }
        keep
    }

    /// Applies the routing on the tape: sort rows, scale by matched gates,
    /// zero thresholded slots, unsort.
    pub fn apply(&self, tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
        let n = self.token_order.len();
        let sig = tape.sigmoid(m);
        let sorted_gates = tape.gather_rows(sig, &self.gate_order)?;
        // slot 0 becomes exactly 1; thresholded slots exactly 0
        let mut scale = vec![0.0; n];
        let mut shift = vec![0.0; n];
        shift[0] = 1.0;
        for k in 1..n {
            if self.slot_keep[k] {
                scale[k] = 1.0;
            }
        }
        let matched = tape.mul_add_const(sorted_gates, &scale, &shift)?;
        let sorted_rows = tape.gather_rows(x, &self.token_order)?;
        let masked = tape.scale_rows(sorted_rows, matched)?;
        tape.scatter_rows(masked, &self.token_order)
    }
}

/// Result of one mask matching pass.
#[derive(Clone, Debug)]
pub struct GateOutcome {
    pub x_m: Var,
    pub keep: Vec<bool>,
    pub routing: Routing,
    pub scores: Vec<f64>,
}

impl GateOutcome {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Routes with a routing computed from the current values.
pub fn mask_match(tape: &mut Tape, x: Var, m: Var, alpha: f64) -> Result<GateOutcome> {
    let gate = GateParams {
        m: tape.value(m).clone(),
        alpha,
    };
    let routing = Routing::compute(tape.value(x), &gate)?;
    apply_routing(tape, x, m, routing)
}

/// Routes with a fixed routing (used to freeze the permutation).
pub fn apply_routing(tape: &mut Tape, x: Var, m: Var, routing: Routing) -> Result<GateOutcome> {
    let scores = importance_scores(tape.value(x));
    let x_m = routing.apply(tape, x, m)?;
    Ok(GateOutcome {
        x_m,
        keep: routing.token_keep(),
        routing,
        scores,
    })
}
