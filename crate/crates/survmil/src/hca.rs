//! Hierarchical context attention.
//!
//! Clusters from the grouping stage are refined independently by a shared
//! multi-head self-attention layer (post-norm residual), summarized by their
//! means, related globally by a second attention layer, and broadcast back as
//! a residual. The reassembled bag is pooled into one slide embedding by
//! gated attention. No positional encodings anywhere; spatial structure
//! enters only through the clustering.

use crate::error::{Error, Result};
use crate::tensor::{init_uniform, NodeId, ParamId, ParamSet, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Dropout behaviour for one forward pass.
pub enum AttnMode<'r> {
    Eval,
    Train {
        rate: f64,
        rng: &'r mut ChaCha12Rng,
    },
}

impl AttnMode<'_> {
    fn reborrow(&mut self) -> AttnMode<'_> {
        match self {
            AttnMode::Eval => AttnMode::Eval,
            AttnMode::Train { rate, rng } => AttnMode::Train { rate: *rate, rng },
        }
    }

    /// Applies inverted dropout to a node when training with a positive rate.
    fn dropout(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            AttnMode::Eval => Ok(x),
            AttnMode::Train { rate, rng } => {
                if *rate <= 0.0 {
                    return Ok(x);
                }
                let (r, c) = tape.shape(x);
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.constant(r, c, mask)?;
                tape.mul(x, m)
            }
        }
    }
}

/// Multi-head self-attention with post-norm residual:
/// LayerNorm(x + OutProj(Concat_h(softmax(Q_h K_h^T / sqrt(d/H)) V_h))).
#[derive(Debug, Clone)]
pub struct MhsaLayer {
    pub heads: usize,
    pub dim: usize,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl MhsaLayer {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Contract(format!(
                "model width {dim} must be divisible by head count {heads}"
            )));
        }
        let dh = dim / heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            wq.push(params.add(format!("{prefix}.h{h}.wq"), init_uniform(rng, dim, dh, dim)));
            wk.push(params.add(format!("{prefix}.h{h}.wk"), init_uniform(rng, dim, dh, dim)));
            wv.push(params.add(format!("{prefix}.h{h}.wv"), init_uniform(rng, dim, dh, dim)));
        }
        let wo = params.add(format!("{prefix}.wo"), init_uniform(rng, dim, dim, dim));
        let ln_gain = params.add(format!("{prefix}.ln_gain"), Tensor::new(1, dim, vec![1.0; dim])?);
        let ln_bias = params.add(format!("{prefix}.ln_bias"), Tensor::zeros(1, dim));
        Ok(MhsaLayer {
            heads,
            dim,
            wq,
            wk,
            wv,
            wo,
            ln_gain,
            ln_bias,
        })
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        mode: &mut AttnMode<'_>,
    ) -> Result<NodeId> {
        let (s, d) = tape.shape(x);
        if d != self.dim {
            return Err(Error::DimMismatch {
                op: "mhsa",
                left: vec![s, d],
                right: vec![s, self.dim],
            });
        }
        if s == 0 {
            return Err(Error::Contract("mhsa over an empty cluster".into()));
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = tape.param(params, self.wq[h]);
            let wk = tape.param(params, self.wk[h]);
            let wv = tape.param(params, self.wv[h]);
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let attn = mode.dropout(tape, attn)?;
            head_outs.push(tape.matmul(attn, v)?);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let wo = tape.param(params, self.wo);
        let proj = tape.matmul(concat, wo)?;
        let res = tape.add(x, proj)?;
        let gain = tape.param(params, self.ln_gain);
        let bias = tape.param(params, self.ln_bias);
        tape.layer_norm(res, gain, bias)
    }
}

/// Shared-weight attention over each cluster independently; perturbing one
/// cluster never changes another's output.
pub fn intra_cluster_attend(
    tape: &mut Tape,
    params: &ParamSet,
    layer: &MhsaLayer,
    clusters: &[NodeId],
    mode: &mut AttnMode<'_>,
) -> Result<Vec<NodeId>> {
    if clusters.is_empty() {
        return Err(Error::Contract("no clusters to attend over".into()));
    }
    clusters
        .iter()
        .map(|&c| {
            if tape.shape(c).0 == 0 {
                return Err(Error::Contract("empty cluster".into()));
            }
            layer.apply(tape, params, c, &mut mode.reborrow())
        })
        .collect()
}

/// Stacks per-cluster mean rows into a G x d summary matrix.
pub fn summarize_clusters(tape: &mut Tape, refined: &[NodeId]) -> Result<NodeId> {
    let means: Vec<NodeId> = refined.iter().map(|&c| tape.mean_rows(c)).collect();
    tape.concat_rows(&means)
}

/// Adds the cluster-mean of the global summary to every row.
pub fn broadcast_residual(tape: &mut Tape, p_tilde: NodeId, r_prime: NodeId) -> Result<NodeId> {
    let rbar = tape.mean_rows(r_prime);
    tape.add_row_broadcast(p_tilde, rbar)
}

/// Row-concatenates the processed selected patches with the untouched
/// remaining ones (either side may be absent).
pub fn assemble_final(tape: &mut Tape, processed: NodeId, remaining: Option<NodeId>) -> Result<NodeId> {
    match remaining {
        None => Ok(processed),
        Some(rem) => tape.concat_rows(&[processed, rem]),
    }
}

/// Gated attention pooling: alpha = softmax(W_a tanh(W_h x_i^T)) over rows,
/// z = sum_i alpha_i x_i.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub dim: usize,
    pub hidden: usize,
    wh: ParamId,
    wa: ParamId,
}

impl AttentionPool {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let wh = params.add("pool.wh", init_uniform(rng, dim, hidden, dim));
        let wa = params.add("pool.wa", init_uniform(rng, hidden, 1, hidden));
        AttentionPool { dim, hidden, wh, wa }
    }

    /// Pools n x d rows into a 1 x d slide embedding. Returns the embedding
    /// and the attention weights (1 x n) for inspection.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        mode: &mut AttnMode<'_>,
    ) -> Result<(NodeId, NodeId)> {
        let (_, d) = tape.shape(x);
        if d != self.dim {
            return Err(Error::DimMismatch {
                op: "attention_pool",
                left: vec![tape.shape(x).0, d],
                right: vec![1, self.dim],
            });
        }
        let wh = tape.param(params, self.wh);
        let wa = tape.param(params, self.wa);
        let hidden = tape.matmul(x, wh)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matmul(hidden, wa)?; // n x 1
        let scores_row = tape.transpose(scores); // 1 x n
        let alpha = tape.softmax_rows(scores_row);
        let z = tape.matmul(alpha, x)?; // 1 x d
        let z = mode.dropout(tape, z)?;
        Ok((z, alpha))
    }
}
