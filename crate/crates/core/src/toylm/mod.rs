//! A small pre-norm GPT-style transformer with hidden-state hooks.
//!
//! All activations are stored column-major with one column per token
//! position, so a `d × T` matrix holds the residual stream of a sequence.

mod checkpoint;
mod engine;
pub mod loss;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use engine::{live_columns, Cache, FrozenPrefix, Segment, SitePatch};
pub use loss::{ConstantLoss, KlToReference, OutputLoss, SumLoss, TokenNll};
pub use train::{AdamConfig, PretrainReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Width of the first MLP projection (the key dimension for editing).
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gamma: DMatrix::from_element(d, 1, 1.0),
            beta: DMatrix::zeros(d, 1),
        }
    }
}

/// One transformer block: `h' = h + Attn(LN1(h))`, `out = h' + W_out·gelu(W_in·LN2(h') + b_in) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: DMatrix<f64>,
    pub b_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub b_o: DMatrix<f64>,
    pub ln2: LayerNorm,
    /// `d_mlp × d_model`
    pub w_in: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    /// `d_model × d_mlp`; the matrix the editors rewrite.
    pub w_out: DMatrix<f64>,
    pub b_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub token_embedding: DMatrix<f64>,
    /// `max_seq_len × d_model`
    pub positional_embedding: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// `d_model × vocab`
    pub unembedding: DMatrix<f64>,
}

/// Where an additive intervention is applied inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSite {
    /// Block output (residual stream after the MLP).
    HiddenState,
    /// MLP output `z` before it joins the residual stream.
    MlpOutput,
    /// Attention output before it joins the residual stream.
    AttnOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub site: PatchSite,
    pub layer: usize,
    pub position: usize,
    pub delta: DVector<f64>,
}

impl PatchSpec {
    pub fn zero(site: PatchSite, layer: usize, position: usize, d_model: usize) -> Self {
        PatchSpec {
            site,
            layer,
            position,
            delta: DVector::zeros(d_model),
        }
    }
}

/// Per-layer readouts of one forward pass. Each entry is `dim × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    /// Block outputs `h^l`.
    pub hidden: Vec<DMatrix<f64>>,
    /// Attention module outputs.
    pub attn: Vec<DMatrix<f64>>,
    /// Post-GELU MLP activations, the inputs to `W_out`.
    pub keys: Vec<DMatrix<f64>>,
    /// MLP outputs `z^l`.
    pub mlp_out: Vec<DMatrix<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl ToyLm {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let h = config.d_mlp;
        let in_std = 1.0 / (d as f64).sqrt();
        let proj_std = in_std / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = gaussian(&mut rng, config.vocab_size, d, 0.5);
        let positional_embedding = gaussian(&mut rng, config.max_seq_len, d, 0.1);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                w_q: gaussian(&mut rng, d, d, in_std),
                b_q: DMatrix::zeros(d, 1),
                w_k: gaussian(&mut rng, d, d, in_std),
                b_k: DMatrix::zeros(d, 1),
                w_v: gaussian(&mut rng, d, d, in_std),
                b_v: DMatrix::zeros(d, 1),
                w_o: gaussian(&mut rng, d, d, proj_std),
                b_o: DMatrix::zeros(d, 1),
                ln2: LayerNorm::new(d),
                w_in: gaussian(&mut rng, h, d, in_std),
                b_in: DMatrix::zeros(h, 1),
                w_out: gaussian(&mut rng, d, h, 1.0 / (h as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()),
                b_out: DMatrix::zeros(d, 1),
            })
            .collect();
        let unembedding = gaussian(&mut rng, d, config.vocab_size, in_std);
        Ok(ToyLm {
            token_embedding,
            positional_embedding,
            blocks,
            ln_final: LayerNorm::new(d),
            unembedding,
            config,
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(|_, m| m.fill(0.0));
        z
    }

    /// Visits every parameter tensor in a fixed order with a stable name.
    pub fn for_each_param<'a>(&'a self, mut f: impl FnMut(&str, &'a DMatrix<f64>)) {
        f("token_embedding", &self.token_embedding);
        f("positional_embedding", &self.positional_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            f(&p("ln1.gamma"), &b.ln1.gamma);
            f(&p("ln1.beta"), &b.ln1.beta);
            f(&p("w_q"), &b.w_q);
            f(&p("b_q"), &b.b_q);
            f(&p("w_k"), &b.w_k);
            f(&p("b_k"), &b.b_k);
            f(&p("w_v"), &b.w_v);
            f(&p("b_v"), &b.b_v);
            f(&p("w_o"), &b.w_o);
            f(&p("b_o"), &b.b_o);
            f(&p("ln2.gamma"), &b.ln2.gamma);
            f(&p("ln2.beta"), &b.ln2.beta);
            f(&p("w_in"), &b.w_in);
            f(&p("b_in"), &b.b_in);
            f(&p("w_out"), &b.w_out);
            f(&p("b_out"), &b.b_out);
        }
        f("ln_final.gamma", &self.ln_final.gamma);
        f("ln_final.beta", &self.ln_final.beta);
        f("unembedding", &self.unembedding);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut DMatrix<f64>)) {
        f("token_embedding", &mut self.token_embedding);
        f("positional_embedding", &mut self.positional_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            f(&p("ln1.gamma"), &mut b.ln1.gamma);
            f(&p("ln1.beta"), &mut b.ln1.beta);
            f(&p("w_q"), &mut b.w_q);
            f(&p("b_q"), &mut b.b_q);
            f(&p("w_k"), &mut b.w_k);
            f(&p("b_k"), &mut b.b_k);
            f(&p("w_v"), &mut b.w_v);
            f(&p("b_v"), &mut b.b_v);
            f(&p("w_o"), &mut b.w_o);
            f(&p("b_o"), &mut b.b_o);
            f(&p("ln2.gamma"), &mut b.ln2.gamma);
            f(&p("ln2.beta"), &mut b.ln2.beta);
            f(&p("w_in"), &mut b.w_in);
            f(&p("b_in"), &mut b.b_in);
            f(&p("w_out"), &mut b.w_out);
            f(&p("b_out"), &mut b.b_out);
        }
        f("ln_final.gamma", &mut self.ln_final.gamma);
        f("ln_final.beta", &mut self.ln_final.beta);
        f("unembedding", &mut self.unembedding);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, m| n += m.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|_, m| ok &= m.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_patch(&self, tokens: &[usize], patch: &PatchSpec) -> Result<()> {
        if patch.layer >= self.config.n_layers {
            return Err(Error::input(format!(
                "patch layer {} out of range ({} layers)",
                patch.layer, self.config.n_layers
            )));
        }
        if patch.position >= tokens.len() {
            return Err(Error::input(format!(
                "patch position {} out of range for sequence of length {}",
                patch.position,
                tokens.len()
            )));
        }
        if patch.delta.len() != self.config.d_model {
            return Err(Error::input(format!(
                "patch delta has dimension {}, expected {}",
                patch.delta.len(),
                self.config.d_model
            )));
        }
        if !patch.delta.iter().all(|v| v.is_finite()) {
            return Err(Error::input("patch delta is not finite"));
        }
        Ok(())
    }

    /// Logits (`positions × vocab`) and the full hidden trace.
    pub fn forward(&self, tokens: &[usize]) -> Result<(DMatrix<f64>, HiddenTrace)> {
        self.check_tokens(tokens)?;
        let cache = self.run(&[tokens], &[]);
        Ok((cache.logits.transpose(), cache.trace(0)))
    }

    /// Forward pass with `patch.delta` added at the named site.
    pub fn forward_patched(
        &self,
        tokens: &[usize],
        patch: &PatchSpec,
    ) -> Result<(DMatrix<f64>, HiddenTrace)> {
        self.check_tokens(tokens)?;
        self.check_patch(tokens, patch)?;
        let cache = self.run(&[tokens], &[SitePatch::from_spec(0, patch)]);
        Ok((cache.logits.transpose(), cache.trace(0)))
    }

    /// Gradient of `loss` with respect to the patch delta, evaluated at `patch.delta`.
    ///
    /// The loss receives the `vocab × T` logits of the patched pass.
    pub fn grad_wrt_delta(
        &self,
        tokens: &[usize],
        patch: &PatchSpec,
        loss: &dyn OutputLoss,
    ) -> Result<DVector<f64>> {
        self.check_tokens(tokens)?;
        self.check_patch(tokens, patch)?;
        let cache = self.run(&[tokens], &[SitePatch::from_spec(0, patch)]);
        let (_, dlogits) = loss.value_and_grad(&cache.logits);
        let back = self.backward(&cache, &dlogits, None);
        back.check_finite()?;
        Ok(back.site_grad(patch.site, patch.layer, patch.position))
    }

    /// Mean NLL of next-token predictions and predicted-token count over `sequences`.
    pub fn corpus_nll(&self, sequences: &[Vec<usize>]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in sequences.chunks(64) {
            for s in chunk {
                self.check_tokens(s)?;
            }
            let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
            let cache = self.run(&refs, &[]);
            for (seg, s) in cache.segments.iter().zip(chunk) {
                for i in 0..s.len().saturating_sub(1) {
                    let col = cache.logits.column(seg.start + i);
                    total -= loss::log_softmax_at(col.as_slice(), s[i + 1]);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::input("no next-token predictions in input"));
        }
        Ok((total / count as f64, count))
    }

    /// `exp` of the mean token-level NLL over every next-token prediction.
    pub fn sequence_perplexity(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::input("perplexity of an empty sequence set"));
        }
        let (nll, _) = self.corpus_nll(sequences)?;
        Ok(nll.exp())
    }

    /// Greedy next-token prediction at the final position.
    pub fn predict_next(&self, tokens: &[usize]) -> Result<usize> {
        let probs = self.next_token_probs(tokens)?;
        Ok(argmax(probs.as_slice()))
    }

    /// Softmax distribution over the token following `tokens`.
    pub fn next_token_probs(&self, tokens: &[usize]) -> Result<DVector<f64>> {
        self.check_tokens(tokens)?;
        let cache = self.run(&[tokens], &[]);
        let col = cache.logits.column(tokens.len() - 1);
        Ok(DVector::from_vec(loss::softmax(col.as_slice())))
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// True when `token` is the strict maximum; exact ties do not count.
pub fn is_strict_argmax(values: &[f64], token: usize) -> bool {
    let v = values[token];
    values
        .iter()
        .enumerate()
        .all(|(i, &x)| i == token || x < v)
}
