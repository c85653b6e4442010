use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::taskgen::TokenId;

/// Lookup table from a context window to an output vector.
///
/// Rows are materialized lazily; an absent row reads as all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabular<F> {
    pub(crate) vocab: usize,
    pub(crate) window: usize,
    pub(crate) out: usize,
    pub(crate) rows: BTreeMap<u64, Vec<F>>,
}

impl<F: Scalar> Tabular<F> {
    pub fn zeros(vocab: usize, window: usize, out: usize) -> Self {
        Self { vocab, window, out, rows: BTreeMap::new() }
    }

    /// Mixed-radix code of a context window.
    pub fn key(&self, ctx: &[TokenId]) -> u64 {
        ctx.iter().fold(0u64, |k, &t| k * self.vocab as u64 + t as u64)
    }

    pub fn decode_key(&self, mut key: u64) -> Vec<TokenId> {
        let mut ctx = vec![0; self.window];
        for slot in ctx.iter_mut().rev() {
            *slot = (key % self.vocab as u64) as TokenId;
            key /= self.vocab as u64;
        }
        ctx
    }

    pub fn forward(&self, ctx: &[TokenId]) -> Vec<F> {
        self.rows.get(&self.key(ctx)).cloned().unwrap_or_else(|| vec![F::zero(); self.out])
    }

    pub fn row_mut(&mut self, ctx: &[TokenId]) -> &mut Vec<F> {
        let key = self.key(ctx);
        let out = self.out;
        self.rows.entry(key).or_insert_with(|| vec![F::zero(); out])
    }

    pub fn backward(&self, ctx: &[TokenId], dout: &[F], grad: &mut Tabular<F>) {
        if dout.iter().all(|&d| d == F::zero()) {
            return;
        }
        for (g, &d) in grad.row_mut(ctx).iter_mut().zip(dout) {
            *g = *g + d;
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
