//! Block-causal multi-head attention over a sink/window KV cache.
//!
//! The query block attends to every visible cached token and, within the
//! block, to tokens of its own or earlier latent frames. Rotary positions
//! are assigned at read time over `[sink ‖ visible window ‖ query block]`.

use std::sync::Arc;

use crate::cache::{KVCache, PositionPolicy};
use crate::error::{Error, Result};
use crate::rope::RotaryEmbedding;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    /// Window capacity W in tokens.
    pub window_tokens: usize,
    /// Sink capacity S in tokens.
    pub sink_tokens: usize,
    pub tokens_per_frame: usize,
    pub rope_base: f64,
    pub positions: PositionPolicy,
}

impl AttentionConfig {
    pub fn new(
        n_heads: usize,
        model_dim: usize,
        tokens_per_frame: usize,
        sink_tokens: usize,
        window_tokens: usize,
        rope_base: f64,
    ) -> Result<Self> {
        if n_heads == 0 || !model_dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by n_heads {n_heads}"
            )));
        }
        let head_dim = model_dim / n_heads;
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {head_dim} must be even for rotary pairs")));
        }
        Ok(Self {
            n_heads,
            model_dim,
            head_dim,
            window_tokens,
            sink_tokens,
            tokens_per_frame,
            rope_base,
            positions: PositionPolicy::Compact,
        })
    }

    pub fn rope(&self) -> Result<RotaryEmbedding> {
        RotaryEmbedding::new(self.head_dim, self.rope_base)
    }
}

/// Projected queries of the current chunk plus, optionally, its own keys and
/// values (attended block-causally).
#[derive(Debug, Clone)]
pub struct QueryBlock {
    pub q: Tensor,
    pub own: Option<(Tensor, Tensor)>,
}

/// Output `[n_q × model_dim]` and the per-head attention weights.
pub struct AttendOutput {
    pub output: Tensor,
    pub weights: Vec<Tensor>,
}

/// `[n_q × (n_past + n_own)]` additive mask: cached tokens are always
/// visible, own-block token `j` is visible to query `i` iff its frame is not
/// later than `i`'s.
pub fn block_causal_mask(n_past: usize, n_q: usize, n_own: usize, tokens_per_frame: usize) -> Tensor {
    let cols = n_past + n_own;
    let mut data = vec![0.0; n_q * cols];
    for i in 0..n_q {
        for j in 0..n_own {
            if j / tokens_per_frame > i / tokens_per_frame {
                data[i * cols + n_past + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(data, &[n_q, cols]).expect("mask shape")
}

pub fn attend(query: &QueryBlock, cache: &KVCache, cfg: &AttentionConfig, rope: &RotaryEmbedding) -> Result<Tensor> {
    Ok(attend_raw(query, cache, cfg, rope)?.0)
}

pub fn attend_with_weights(
    query: &QueryBlock,
    cache: &KVCache,
    cfg: &AttentionConfig,
    rope: &RotaryEmbedding,
) -> Result<AttendOutput> {
    let (output, probs) = attend_raw(query, cache, cfg, rope)?;
    let n_q = output.shape()[0];
    let n_k = if n_q == 0 { 0 } else { probs.len() / (cfg.n_heads * n_q) };
    let weights = if n_q == 0 {
        Vec::new()
    } else {
        (0..cfg.n_heads)
            .map(|h| Tensor::new(probs[h * n_q * n_k..(h + 1) * n_q * n_k].to_vec(), &[n_q, n_k]))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(AttendOutput { output, weights })
}

/// Output and the flat `[head][query][key]` weights.
fn attend_raw(
    query: &QueryBlock,
    cache: &KVCache,
    cfg: &AttentionConfig,
    rope: &RotaryEmbedding,
) -> Result<(Tensor, Arc<Vec<f64>>)> {
    let q = &query.q;
    if q.rank() != 2 || q.shape()[1] != cfg.model_dim {
        return Err(Error::Dimension {
            op: "attend",
            lhs: q.shape().to_vec(),
            rhs: vec![cfg.model_dim],
        });
    }
    if cache.geometry().dim != cfg.model_dim || cache.geometry().tokens_per_frame != cfg.tokens_per_frame {
        return Err(Error::Config(format!(
            "cache geometry {:?} does not match attention config",
            cache.geometry()
        )));
    }
    let n_q = q.shape()[0];
    let past = cache.rotated_visible(cfg.positions, rope)?;
    let n_past = past.as_ref().map_or(0, |(k, _)| k.shape()[0]);
    let n_own = match &query.own {
        Some((k, v)) => {
            if k.shape() != q.shape() || v.shape() != q.shape() {
                return Err(Error::Dimension {
                    op: "attend own kv",
                    lhs: k.shape().to_vec(),
                    rhs: q.shape().to_vec(),
                });
            }
            n_q
        }
        None => 0,
    };
    if n_q == 0 {
        if n_past == 0 {
            return Err(Error::Contract("attend called with an empty cache and an empty query".into()));
        }
        return Ok((Tensor::zeros(&[0, cfg.model_dim]), Arc::new(Vec::new())));
    }
    if n_past + n_own == 0 {
        return Err(Error::Contract("attend has no keys: empty cache and no own keys".into()));
    }

    let mut keys = Vec::with_capacity(2);
    let mut values = Vec::with_capacity(2);
    if let Some((k, v)) = past {
        keys.push(k);
        values.push(v);
    }
    let (_, q_pos) = cache.positions(cfg.positions, n_q);
    if let Some((k, v)) = &query.own {
        keys.push(rope.rotate(k, &q_pos[..n_own])?);
        values.push(v.clone());
    }
    let k_rot = Tensor::concat(&keys, 0)?;
    let v_all = Tensor::concat(&values, 0)?;
    let q_rot = rope.rotate(q, &q_pos)?;

    let mask = (n_own > 0).then(|| block_causal_mask(n_past, n_q, n_own, cfg.tokens_per_frame));
    q_rot.multi_head_attention(&k_rot, &v_all, cfg.n_heads, mask.as_ref())
}
