use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequential::{Grads, Sequential};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Normal(0, sqrt(2 / fan_in)) draws. Sampling happens in `f64` so `f32`
/// and `f64` models built from one seed agree up to rounding.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter buffer. `t` is the
/// 1-based step count.
pub fn adam_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam moments for every parameter of one [`Sequential`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Sequential<T>, config: AdamConfig) -> Self {
        let zeros = |net: &Sequential<T>| {
            net.layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect())
                .collect()
        };
        Self {
            m: zeros(net),
            v: zeros(net),
            t: 0,
            config,
        }
    }

    /// Apply one step; parameters without a gradient are left untouched.
    pub fn step(&mut self, net: &mut Sequential<T>, grads: &Grads<T>) -> Result<()> {
        use rayon::prelude::*;

        if grads.len() != net.layers.len() {
            return Err(Error::Shape("gradient list does not match network".into()));
        }
        self.t += 1;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for (pi, param) in layer.params.iter_mut().enumerate() {
                let Some(g) = &grads[li][pi] else { continue };
                if g.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} vs parameter {:?} in {}",
                        g.shape(),
                        param.shape(),
                        layer.name
                    )));
                }
                const CHUNK: usize = 1 << 14;
                let (t, cfg) = (self.t, self.config);
                param
                    .data_mut()
                    .par_chunks_mut(CHUNK)
                    .zip(g.data().par_chunks(CHUNK))
                    .zip(self.m[li][pi].data_mut().par_chunks_mut(CHUNK))
                    .zip(self.v[li][pi].data_mut().par_chunks_mut(CHUNK))
                    .for_each(|(((p, g), m), v)| adam_update(p, g, m, v, t, &cfg));
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` (floored at `min_lr`) after
/// `patience` consecutive epochs without a strictly lower validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Record one epoch's validation loss. Returns true on a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            return true;
        }
        self.wait += 1;
        if self.patience > 0 && self.wait >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.wait = 0;
        }
        false
    }
}
