#![allow(clippy::needless_range_loop)]

use rand::Rng;

use crate::scalar::Scalar;
use crate::taskgen::TokenId;

/// Single-hidden-layer network over a window of token embeddings:
/// `out = W2ᵀ tanh(W1ᵀ concat(E[ctx]) + b1) + b2`.
///
/// `w1` is row-major `(window·dim) × hidden`, `w2` is row-major `hidden × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub(crate) vocab: usize,
    pub(crate) window: usize,
    pub(crate) dim: usize,
    pub(crate) hidden: usize,
    pub(crate) out: usize,
    pub(crate) embed: Vec<F>,
    pub(crate) w1: Vec<F>,
    pub(crate) b1: Vec<F>,
    pub(crate) w2: Vec<F>,
    pub(crate) b2: Vec<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn zeros(vocab: usize, window: usize, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            vocab,
            window,
            dim,
            hidden,
            out,
            embed: vec![F::zero(); vocab * dim],
            w1: vec![F::zero(); window * dim * hidden],
            b1: vec![F::zero(); hidden],
            w2: vec![F::zero(); hidden * out],
            b2: vec![F::zero(); out],
        }
    }

    /// Embeddings `U(-s, s)`, dense layers `U(-s, s) / sqrt(fan_in)`, zero biases.
    pub fn random<R: Rng>(vocab: usize, window: usize, dim: usize, hidden: usize, out: usize, scale: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(vocab, window, dim, hidden, out);
        let mut fill = |v: &mut Vec<F>, s: f64| {
            for x in v.iter_mut() {
                *x = F::of(rng.gen_range(-s..=s));
            }
        };
        fill(&mut m.embed, scale);
        fill(&mut m.w1, scale / ((window * dim) as f64).sqrt());
        fill(&mut m.w2, scale / (hidden as f64).sqrt());
        m
    }

    fn input(&self, ctx: &[TokenId]) -> Vec<F> {
        let mut x = Vec::with_capacity(self.window * self.dim);
        for &t in ctx {
            let t = t as usize;
            x.extend_from_slice(&self.embed[t * self.dim..(t + 1) * self.dim]);
        }
        x
    }

    /// Returns `(input, hidden activations, output)`.
    fn forward_full(&self, ctx: &[TokenId]) -> (Vec<F>, Vec<F>, Vec<F>) {
        let x = self.input(ctx);
        let h = self.hidden;
        let mut z = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == F::zero() {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            for (zj, &wij) in z.iter_mut().zip(row) {
                *zj = *zj + xi * wij;
            }
        }
        let a: Vec<F> = z.into_iter().map(F::tanh).collect();
        let mut out = self.b2.clone();
        for (j, &aj) in a.iter().enumerate() {
            let row = &self.w2[j * self.out..(j + 1) * self.out];
            for (ok, &wjk) in out.iter_mut().zip(row) {
                *ok = *ok + aj * wjk;
            }
        }
        (x, a, out)
    }

    pub fn forward(&self, ctx: &[TokenId]) -> Vec<F> {
        self.forward_full(ctx).2
    }

    /// Accumulates `dout · ∂out/∂θ` into `grad`.
    pub fn backward(&self, ctx: &[TokenId], dout: &[F], grad: &mut Mlp<F>) {
        let (x, a, _) = self.forward_full(ctx);
        let (h, o) = (self.hidden, self.out);
        let mut da = vec![F::zero(); h];
        for j in 0..h {
            let mut acc = F::zero();
            for k in 0..o {
                grad.w2[j * o + k] = grad.w2[j * o + k] + a[j] * dout[k];
                acc = acc + self.w2[j * o + k] * dout[k];
            }
            da[j] = acc;
        }
        for k in 0..o {
            grad.b2[k] = grad.b2[k] + dout[k];
        }
        let dz: Vec<F> = da.iter().zip(&a).map(|(&d, &aj)| d * (F::one() - aj * aj)).collect();
        for j in 0..h {
            grad.b1[j] = grad.b1[j] + dz[j];
        }
        for (i, &xi) in x.iter().enumerate() {
            let mut dx = F::zero();
            for j in 0..h {
                grad.w1[i * h + j] = grad.w1[i * h + j] + xi * dz[j];
                dx = dx + self.w1[i * h + j] * dz[j];
            }
            let t = ctx[i / self.dim] as usize;
            let e = t * self.dim + i % self.dim;
            grad.embed[e] = grad.embed[e] + dx;
        }
    }

    pub(crate) fn slices(&self) -> [&[F]; 5] {
        [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [F]; 5] {
        [&mut self.embed, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}
