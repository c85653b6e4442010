use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{GradBuffer, Net};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub scheme: Scheme,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { scheme: Scheme::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }

    pub fn sgd(lr: f64) -> Self {
        Self { scheme: Scheme::Sgd, ..Self::adam(lr) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub config: OptimizerConfig,
    pub m: Option<Net<F>>,
    pub v: Option<Net<F>>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, m: None, v: None, step: 0 }
    }

    /// Applies one descent step of `grad` to `params`.
    ///
    /// A non-finite gradient is rejected before anything is modified.
    pub fn step(&mut self, params: &mut Net<F>, grad: &GradBuffer<F>) -> Result<()> {
        grad.check_shape(params)?;
        if !grad.net.is_finite() {
            return Err(Error::numerical(self.step as usize, "non-finite gradient; step rejected"));
        }
        let mut g = grad.net.clone();
        if let Some(max) = self.config.max_grad_norm {
            let norm = g.sq_norm().sqrt();
            if norm > F::of(max) {
                g.scale(F::of(max) / norm);
            }
        }
        g.materialize_like(params);
        params.materialize_like(&g);
        let lr = F::of(self.config.lr);
        self.step += 1;
        match self.config.scheme {
            Scheme::Sgd => {
                for (p, gb) in params.blocks_mut().into_iter().zip(g.blocks()) {
                    for (x, &d) in p.iter_mut().zip(gb) {
                        *x = *x - lr * d;
                    }
                }
            }
            Scheme::Adam => {
                let m = self.m.get_or_insert_with(|| params.zeros_like());
                let v = self.v.get_or_insert_with(|| params.zeros_like());
                m.materialize_like(params);
                v.materialize_like(params);
                let (b1, b2, eps) = (F::of(self.config.beta1), F::of(self.config.beta2), F::of(self.config.eps));
                let t = self.step as i32;
                let c1 = F::one() - b1.powi(t);
                let c2 = F::one() - b2.powi(t);
                for (((p, gb), mb), vb) in params.blocks_mut().into_iter().zip(g.blocks()).zip(m.blocks_mut()).zip(v.blocks_mut()) {
                    for i in 0..p.len() {
                        let d = gb[i];
                        mb[i] = b1 * mb[i] + (F::one() - b1) * d;
                        vb[i] = b2 * vb[i] + (F::one() - b2) * d * d;
                        let mhat = mb[i] / c1;
                        let vhat = vb[i] / c2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::numerical(self.step as usize, "parameters became non-finite"));
        }
        Ok(())
    }
}
