//! Position information: a learned absolute table (vanilla) or 2-D rotary
//! embeddings applied to queries and keys.

use crate::error::{Error, Result};
use crate::layers::{join, param, Parameters, INIT_STD};
use crate::rng::Rng;
use crate::tensor::{RopeTables, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Learnable `[N, d_model]` table added to the token embeddings.
#[derive(Debug, Clone)]
pub struct PosEmbedTable {
    pub table: Tensor,
}

impl PosEmbedTable {
    pub fn new(n_tokens: usize, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            table: param(&[n_tokens, d_model], INIT_STD, rng),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.table.shape()[0]
    }
}

impl Parameters for PosEmbedTable {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "table"), &mut self.table));
    }
}

/// `tokens + table`, with tokens `[.., N, d]`.
pub fn add_absolute(tokens: &Tensor, table: &PosEmbedTable) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() < 2 || s[s.len() - 2..] != *table.table.shape() {
        return Err(Error::Config(format!(
            "position table {:?} does not match tokens {s:?}",
            table.table.shape()
        )));
    }
    tokens.add(&table.table)
}

/// Axial 2-D rotary embedding parameters.
///
/// The head dimension is split in half: pairs `(2i, 2i+1)` in the first half rotate
/// by `row·θᵢ`, pairs in the second half by `col·θᵢ`, with
/// `θᵢ = base^(-i / (head_dim/4))` for `i < head_dim/4`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    pub freqs: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "rotary embeddings need a head dimension divisible by 4, got {head_dim}"
            )));
        }
        let quarter = head_dim / 4;
        let freqs = (0..quarter)
            .map(|i| base.powf(-(i as f64) / quarter as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            freqs,
        })
    }

    /// Rotation tables for tokens at the given `(row, col)` grid positions.
    pub fn tables(&self, positions: &[(f64, f64)]) -> RopeTables {
        let quarter = self.freqs.len();
        let mut angles = Vec::with_capacity(positions.len() * 2 * quarter);
        for &(row, col) in positions {
            angles.extend(self.freqs.iter().map(|f| row * f));
            angles.extend(self.freqs.iter().map(|f| col * f));
        }
        RopeTables::from_angles(positions.len(), 2 * quarter, &angles)
    }
}

/// Rotates queries or keys `[.., N, head_dim]` according to token positions.
pub fn apply_rope(qk: &Tensor, positions: &[(f64, f64)], params: &RopeParams) -> Result<Tensor> {
    let s = qk.shape();
    if s.len() < 2 || s[s.len() - 1] != params.head_dim || s[s.len() - 2] != positions.len() {
        return Err(Error::Config(format!(
            "rope: input {s:?} needs {} positions and head dim {}",
            positions.len(),
            params.head_dim
        )));
    }
    qk.rotate_pairs(&params.tables(positions))
}
