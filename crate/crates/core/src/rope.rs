//! Rotary positional embedding.
//!
//! Channel pairs `(2j, 2j+1)` of each head are rotated by `θ_j · p` with
//! `θ_j = base^(-2j/head_dim)`. Positions are supplied by the caller, which
//! lets the attention layer assign them over the live cache at read time.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Positions below this read their angles from a precomputed table.
pub const TABLE_POSITIONS: usize = 1024;

#[derive(Debug, Clone)]
pub struct RotaryEmbedding {
    head_dim: usize,
    base: f64,
    /// `(cos, sin)` of `θ_j · p`, row `p`, column `j`.
    table: Arc<[(f64, f64)]>,
}

impl PartialEq for RotaryEmbedding {
    fn eq(&self, other: &Self) -> bool {
        self.head_dim == other.head_dim && self.base == other.base
    }
}

impl RotaryEmbedding {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary head_dim must be even and positive, got {head_dim}")));
        }
        if !(base > 0.0) {
            return Err(Error::Config(format!("rotary base must be positive, got {base}")));
        }
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|j| base.powf(-2.0 * j as f64 / head_dim as f64)).collect();
        let table = (0..TABLE_POSITIONS)
            .flat_map(|p| freqs.iter().map(move |f| angle_cos_sin(*f, p)))
            .collect();
        Ok(Self { head_dim, base, table })
    }

    fn cos_sin(&self, freqs: &[f64], j: usize, p: usize) -> (f64, f64) {
        if p < TABLE_POSITIONS {
            self.table[p * freqs.len() + j]
        } else {
            angle_cos_sin(freqs[j], p)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angular frequency of channel pair `j`.
    pub fn frequency(&self, j: usize) -> f64 {
        self.base.powf(-2.0 * j as f64 / self.head_dim as f64)
    }

    /// Rotates every head block of `x` (`[tokens × k·head_dim]`), token `i` at
    /// `positions[i]`.
    pub fn rotate(&self, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
        if x.rank() != 2 || !x.shape()[1].is_multiple_of(self.head_dim) {
            return Err(Error::Shape(format!(
                "rope input {:?} is not [tokens × multiple of {}]",
                x.shape(),
                self.head_dim
            )));
        }
        let (tokens, width) = (x.shape()[0], x.shape()[1]);
        if positions.len() != tokens {
            return Err(Error::Shape(format!(
                "{} positions for {tokens} tokens",
                positions.len()
            )));
        }
        let half = self.head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|j| self.frequency(j)).collect();
        let pairs_per_row = width / 2;
        let mut cos = Vec::with_capacity(tokens * pairs_per_row);
        let mut sin = Vec::with_capacity(tokens * pairs_per_row);
        for &p in positions {
            for pair in 0..pairs_per_row {
                let (c, s) = self.cos_sin(&freqs, pair % half, p);
                cos.push(c);
                sin.push(s);
            }
        }
        x.rotate_pairs(Arc::new(cos), Arc::new(sin))
    }
}

fn angle_cos_sin(freq: f64, p: usize) -> (f64, f64) {
    let angle = freq * p as f64;
    (angle.cos(), angle.sin())
}

/// Free-function form of [`RotaryEmbedding::rotate`] for a single head.
pub fn rope_rotate(rope: &RotaryEmbedding, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    if x.rank() == 2 && x.shape()[1] != rope.head_dim() {
        return Err(Error::Shape(format!(
            "rope_rotate expects [tokens × {}], got {:?}",
            rope.head_dim(),
            x.shape()
        )));
    }
    rope.rotate(x, positions)
}
