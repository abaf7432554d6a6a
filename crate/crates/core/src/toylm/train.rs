//! Next-token pretraining with Adam.
//!
//! Update rule per parameter `w` with gradient `g` at step `t` (1-based):
//!
//! ```text
//! m = β1·m + (1-β1)·g
//! v = β2·v + (1-β2)·g²
//! w -= lr · (m / (1-β1^t)) / (sqrt(v / (1-β2^t)) + eps)
//! ```
//!
//! Gradients are clipped to a global L2 norm of `clip_norm` before the update.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::softmax;
use super::ToyLm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training NLL per epoch, measured on the minibatches as they were seen.
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
    /// Mean NLL over the whole corpus with the final weights.
    pub final_nll: f64,
}

struct AdamState {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl AdamState {
    fn new(model: &ToyLm) -> Self {
        let mut m = Vec::new();
        model.for_each_param(|_, p| m.push(DMatrix::zeros(p.nrows(), p.ncols())));
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyLm, grads: &ToyLm, cfg: &AdamConfig) {
        let mut gs = Vec::new();
        grads.for_each_param(|_, g| gs.push(g));
        let norm = gs.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(|_, w| {
            let g = gs[i];
            let m = &mut ms[i];
            let v = &mut vs[i];
            for k in 0..w.len() {
                let gk = g[k] * clip;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
            i += 1;
        });
    }
}

impl ToyLm {
    /// Trains on `corpus` for `epochs` passes. `hook` runs after every epoch
    /// with the epoch index and mean loss; returning `false` stops early.
    pub fn pretrain_with(
        &mut self,
        corpus: &[Vec<usize>],
        epochs: usize,
        adam: &AdamConfig,
        seed: u64,
        mut hook: impl FnMut(usize, &ToyLm, f64) -> bool,
    ) -> Result<PretrainReport> {
        if corpus.is_empty() {
            return Err(Error::input("empty pretraining corpus"));
        }
        if adam.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for s in corpus {
            self.check_tokens(s)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut state = AdamState::new(self);
        let mut history = Vec::with_capacity(epochs);
        let mut step = 0usize;
        let mut epochs_run = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_count = 0usize;
            for chunk in order.chunks(adam.batch_size) {
                let seqs: Vec<&[usize]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
                let (loss, count, grads) = self.batch_loss_and_grads(&seqs);
                step += 1;
                if !loss.is_finite() {
                    return Err(Error::Training { step, loss });
                }
                epoch_loss += loss * count as f64;
                epoch_count += count;
                state.step(self, &grads, adam);
            }
            let mean = epoch_loss / epoch_count.max(1) as f64;
            history.push(mean);
            epochs_run = epoch + 1;
            if !hook(epoch, self, mean) {
                break;
            }
        }
        let (final_nll, _) = self.corpus_nll(corpus)?;
        if !final_nll.is_finite() {
            return Err(Error::Training {
                step,
                loss: final_nll,
            });
        }
        Ok(PretrainReport {
            loss_history: history,
            epochs_run,
            final_nll,
        })
    }

    /// Plain pretraining without an epoch hook.
    pub fn pretrain(
        &mut self,
        corpus: &[Vec<usize>],
        epochs: usize,
        adam: &AdamConfig,
        seed: u64,
    ) -> Result<PretrainReport> {
        self.pretrain_with(corpus, epochs, adam, seed, |_, _, _| true)
    }

    /// Mean next-token NLL over a packed minibatch and its parameter gradient.
    pub fn batch_loss_and_grads(&self, seqs: &[&[usize]]) -> (f64, usize, ToyLm) {
        let cache = self.run(seqs, &[]);
        let count: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
        let mut dlogits = DMatrix::zeros(cache.logits.nrows(), cache.logits.ncols());
        let mut loss = 0.0;
        let inv = 1.0 / count.max(1) as f64;
        for (seg, s) in cache.segments.iter().zip(seqs) {
            for i in 0..s.len().saturating_sub(1) {
                let col = seg.start + i;
                let p = softmax(cache.logits.column(col).as_slice());
                let target = s[i + 1];
                loss -= p[target].max(1e-300).ln();
                for (r, pr) in p.iter().enumerate() {
                    dlogits[(r, col)] = pr * inv;
                }
                dlogits[(target, col)] -= inv;
            }
        }
        let mut grads = self.zeros_like();
        self.backward(&cache, &dlogits, Some(&mut grads));
        (loss * inv, count, grads)
    }
}
