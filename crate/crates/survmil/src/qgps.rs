//! Quantile-gated patch selection.
//!
//! A small MLP scores every patch; the bag is split at the q-quantile of the
//! scores, keeping the top (1-q) fraction. Selection is a hard gate: the
//! threshold is reported for audit, but membership is decided by rank with
//! index tie-breaking so the retained count is exact for every q and n.

use crate::error::{Error, Result};
use crate::tensor::{init_uniform, NodeId, ParamId, ParamSet, Tape, Tensor};
use rand::Rng;

/// Two-layer perceptron (d -> hidden -> 1) producing one logit per patch.
#[derive(Debug, Clone)]
pub struct PatchScorer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl PatchScorer {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let w1 = params.add("scorer.w1", init_uniform(rng, input_dim, hidden, input_dim));
        let b1 = params.add("scorer.b1", Tensor::zeros(1, hidden));
        let w2 = params.add("scorer.w2", init_uniform(rng, hidden, 1, hidden));
        let b2 = params.add("scorer.b2", Tensor::zeros(1, 1));
        PatchScorer {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden,
        }
    }

    /// Differentiable logits, one per row of `features` (n x d -> n x 1).
    pub fn score_patches(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        features: NodeId,
    ) -> Result<NodeId> {
        let (_, d) = tape.shape(features);
        if d != self.input_dim {
            return Err(Error::DimMismatch {
                op: "score_patches",
                left: vec![tape.shape(features).0, d],
                right: vec![self.input_dim, self.hidden],
            });
        }
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let w2 = tape.param(params, self.w2);
        let b2 = tape.param(params, self.b2);
        let h = tape.matmul(features, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.tanh(h);
        let out = tape.matmul(h, w2)?;
        tape.add_row_broadcast(out, b2)
    }
}

/// Hard split of a bag's indices at the q-quantile of its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    pub selected: Vec<usize>,
    pub remaining: Vec<usize>,
    pub threshold: f64,
}

/// Empirical q-quantile with linear interpolation between order statistics.
pub fn quantile_threshold(logits: &[f64], q: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Contract("quantile of empty logits".into()));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Contract(format!("quantile q must be in [0,1), got {q}")));
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    } else {
        Ok(sorted[lo])
    }
}

/// Number of patches a gate keeps: ceil((1-q) * n).
pub fn selected_count(n: usize, q: f64) -> usize {
    ((1.0 - q) * n as f64).ceil() as usize
}

/// Splits indices 0..n by logit rank: the top ceil((1-q)*n) are selected,
/// ties broken toward the lower patch index. Both halves keep ascending
/// index order.
pub fn select_patches(logits: &[f64], q: f64) -> Result<GateResult> {
    let threshold = quantile_threshold(logits, q)?;
    let n = logits.len();
    let keep = selected_count(n, q);
    debug_assert!(keep >= 1, "q < 1 guarantees a nonempty selection");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        logits[j]
            .partial_cmp(&logits[i])
            .expect("finite logits")
            .then(i.cmp(&j))
    });
    let mut selected: Vec<usize> = order[..keep].to_vec();
    let mut remaining: Vec<usize> = order[keep..].to_vec();
    selected.sort_unstable();
    remaining.sort_unstable();
    Ok(GateResult {
        selected,
        remaining,
        threshold,
    })
}
