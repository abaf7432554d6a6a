//! Closed-form writes of latent targets into the MLP output matrices.
//!
//! For every causal layer the edited matrix is `W_out` (`d_model × d_mlp`),
//! read by the post-GELU MLP activation (the key). The target of each edit is
//! the state `h̄ = h + δ` at the delta layer: an MLP output at the same layer
//! adds directly into the residual stream, so every site kind reduces to a
//! hidden-state residual there.
//!
//! Multi-layer algorithms sweep the causal layers in ascending order. At
//! layer `l_j` of `c` the residual `(h̄ − h_cur) / (c − j + 1)` is assigned to
//! the layer, where `h_cur` is recomputed after every earlier update.

pub mod linalg;
pub mod solvers;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrays::write_arrays;
use crate::error::{Error, Result};
use crate::factworld::{EditRequest, Rendered, World};
use crate::optimize::{edit_prompts, DeltaTarget, TargetSite};
use crate::toylm::ToyLm;

pub use linalg::SolveOptions;
pub use solvers::{
    alphaedit_with_projector, solve_alphaedit, solve_emmet, solve_encore, solve_memit, solve_rome, CovMatrix, KvSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Memit,
    Pmet,
    AlphaEdit,
    Rome,
    RRome,
    Emmet,
    Encore,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Memit,
        Algorithm::Pmet,
        Algorithm::AlphaEdit,
        Algorithm::Rome,
        Algorithm::RRome,
        Algorithm::Emmet,
        Algorithm::Encore,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Memit => "memit",
            Algorithm::Pmet => "pmet",
            Algorithm::AlphaEdit => "alpha-edit",
            Algorithm::Rome => "rome",
            Algorithm::RRome => "r-rome",
            Algorithm::Emmet => "emmet",
            Algorithm::Encore => "encore",
        }
    }

    /// ROME and R-ROME write a single layer.
    pub fn single_layer(&self) -> bool {
        matches!(self, Algorithm::Rome | Algorithm::RRome)
    }

    /// The optimization site this algorithm expects at the delta layer.
    pub fn target_site(&self, layer: usize) -> TargetSite {
        match self {
            Algorithm::Rome | Algorithm::RRome => TargetSite::MlpOutput(layer),
            Algorithm::Pmet => TargetSite::AttnAndMlp(layer),
            _ => TargetSite::HiddenState(layer),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == norm || a.name().replace('-', "") == norm)
            .ok_or_else(|| Error::config(format!("unknown algorithm {s:?}")))
    }
}

/// Strictly increasing layer indices. The last one is where the delta lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CausalLayerSet(Vec<usize>);

impl CausalLayerSet {
    pub fn new(layers: Vec<usize>, n_layers: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("causal layer set is empty"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("causal layers {layers:?} are not strictly increasing")));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::config(format!("causal layer {l} out of range ({n_layers} layers)")));
        }
        Ok(CausalLayerSet(layers))
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("nonempty")
    }

    /// The layers a given algorithm writes: ROME variants only touch the last.
    pub fn for_algorithm(&self, algo: Algorithm) -> Vec<usize> {
        if algo.single_layer() {
            vec![self.last()]
        } else {
            self.0.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpreadConfig {
    /// Covariance scale λ_c.
    pub lambda_c: f64,
    /// AlphaEdit ridge λ_r.
    pub lambda_r: f64,
    /// ENCORE preservation weight λ_p (on `C / λ_c`).
    pub lambda_p: f64,
    /// ENCORE norm penalty λ_n.
    pub lambda_n: f64,
    pub pinv_fallback: bool,
    /// Cap on preserved key columns.
    pub preserved_cap: usize,
    /// Cap on covariance sample sequences; `None` uses the whole corpus.
    #[serde(with = "crate::optser")]
    pub cov_sequences: Option<usize>,
    /// Multi-layer algorithms read keys averaged over the prefixed renderings.
    pub average_keys: bool,
    pub seed: u64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        SpreadConfig {
            lambda_c: 100.0,
            lambda_r: 1.0,
            lambda_p: 100.0,
            lambda_n: 1.0,
            pinv_fallback: true,
            preserved_cap: 512,
            cov_sequences: None,
            average_keys: false,
            seed: 0,
        }
    }
}

impl SpreadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("lambda_p", self.lambda_p),
            ("lambda_n", self.lambda_n),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            pinv_fallback: self.pinv_fallback,
        }
    }
}

/// Preserved keys (columns) at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservedSet {
    pub k: DMatrix<f64>,
    pub v: Option<DMatrix<f64>>,
}

/// Layer statistics computed once from the unedited model.
#[derive(Debug, Clone)]
pub struct SpreadContext {
    pub layers: Vec<usize>,
    pub cov: Vec<CovMatrix>,
    pub preserved: Vec<PreservedSet>,
    pub config: SpreadConfig,
}

impl SpreadContext {
    /// Estimates `C` on the pretraining corpus and collects preserved keys from
    /// the facts no request in `requests` touches.
    pub fn build(
        model: &ToyLm,
        world: &World,
        requests: &[EditRequest],
        layers: &CausalLayerSet,
        config: &SpreadConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut corpus: Vec<&[usize]> = world.pretrain_corpus.iter().map(|s| s.as_slice()).collect();
        if let Some(cap) = config.cov_sequences {
            corpus.shuffle(&mut rng);
            corpus.truncate(cap);
        }
        let edited: HashSet<&[usize]> = requests.iter().map(|r| r.triple.subject.as_slice()).collect();
        let mut kept: Vec<Rendered> = world
            .facts
            .iter()
            .filter(|f| !edited.contains(f.subject.as_slice()))
            .map(|f| world.render_fact(f, &world.schema(f.relation).edit_template))
            .collect();
        if kept.len() > config.preserved_cap {
            kept.shuffle(&mut rng);
            kept.truncate(config.preserved_cap);
        }
        let ls = layers.layers().to_vec();
        let all_keys = sample_keys(model, &corpus, &ls)?;
        let mut cov = Vec::new();
        for (l, keys) in ls.iter().zip(all_keys) {
            if keys.ncols() < model.config.d_mlp / 4 {
                warn!(
                    "layer {l}: only {} key samples for a {}-dimensional covariance",
                    keys.ncols(),
                    model.config.d_mlp
                );
            }
            cov.push(CovMatrix::from_keys(&keys, config.lambda_c)?);
        }
        let preserved = last_subject_keys(model, &kept, &ls)?
            .into_iter()
            .map(|k| PreservedSet { k, v: None })
            .collect();
        Ok(SpreadContext {
            layers: ls,
            cov,
            preserved,
            config: config.clone(),
        })
    }

    fn index(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::config(format!("no spread statistics for layer {layer}")))
    }
}

/// Key activations at every position of `prompts`, one matrix per layer.
fn sample_keys(model: &ToyLm, prompts: &[&[usize]], layers: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    for p in prompts {
        model.check_tokens(p)?;
    }
    let mut out: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); layers.len()];
    for chunk in prompts.chunks(64) {
        let cache = model.run(chunk, &[]);
        for (i, &l) in layers.iter().enumerate() {
            out[i].push(cache.keys(l).clone());
        }
    }
    Ok(out.into_iter().map(|ms| hcat(&ms, model.config.d_mlp)).collect())
}

/// Keys at the last subject token of each prompt, one matrix per layer.
fn last_subject_keys(model: &ToyLm, prompts: &[Rendered], layers: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    let n = prompts.len();
    let mut out = vec![DMatrix::zeros(model.config.d_mlp, n); layers.len()];
    for p in prompts {
        model.check_tokens(&p.tokens)?;
    }
    let mut col = 0;
    for chunk in prompts.chunks(64) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        let cache = model.run(&seqs, &[]);
        for (s, r) in chunk.iter().enumerate() {
            for (i, &l) in layers.iter().enumerate() {
                out[i].set_column(col, &cache.key_at(l, s, r.last_subject));
            }
            col += 1;
        }
    }
    Ok(out)
}

fn hcat(ms: &[DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let n: usize = ms.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(rows, n);
    let mut c = 0;
    for m in ms {
        out.columns_mut(c, m.ncols()).copy_from(m);
        c += m.ncols();
    }
    out
}

/// Uncentered key covariance `λ_c / N · Σ k kᵀ` at `layer`, over every
/// position of `sample_prompts`.
pub fn estimate_cov(model: &ToyLm, sample_prompts: &[Vec<usize>], layer: usize, lambda_c: f64) -> Result<CovMatrix> {
    if layer >= model.config.n_layers {
        return Err(Error::input(format!("layer {layer} out of range")));
    }
    let seqs: Vec<&[usize]> = sample_prompts.iter().map(|s| s.as_slice()).collect();
    let keys = sample_keys(model, &seqs, &[layer])?.remove(0);
    if keys.ncols() < model.config.d_mlp / 4 {
        warn!("only {} key samples for covariance at layer {layer}", keys.ncols());
    }
    CovMatrix::from_keys(&keys, lambda_c)
}

/// Key at the last subject token and the value that absorbs `1/share` of the
/// remaining residual at `layer`.
///
/// The goal is taken relative to this model, `h̄ = h_cur + δ`, so
/// `v = W k_bare + δ / share`. With `averaging` the key is the mean over the
/// bare and prefixed renderings.
pub fn extract_key_value(
    model: &ToyLm,
    request: &EditRequest,
    target: &DeltaTarget,
    layer: usize,
    averaging: bool,
    prefixes: &[Vec<usize>],
    share: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if layer > target.site.layer() {
        return Err(Error::input(format!(
            "layer {layer} lies above the delta layer {}",
            target.site.layer()
        )));
    }
    let bare = request.edit_prompt(&[]);
    if target.position != bare.last_subject {
        return Err(Error::input(format!(
            "target position {} does not match the prompt's last subject token {}",
            target.position, bare.last_subject
        )));
    }
    let k_bare = last_subject_keys(model, std::slice::from_ref(&bare), &[layer])?.remove(0);
    let k_bare = k_bare.column(0).into_owned();
    let k = if averaging {
        averaged_key(model, request, layer, prefixes)?
    } else {
        k_bare.clone()
    };
    let v = &model.blocks[layer].w_out * k_bare + target.spread_delta() / share.max(1) as f64;
    Ok((k, v))
}

fn averaged_key(model: &ToyLm, request: &EditRequest, layer: usize, prefixes: &[Vec<usize>]) -> Result<DVector<f64>> {
    let prompts = edit_prompts(request, prefixes, true);
    let keys = last_subject_keys(model, &prompts, &[layer])?.remove(0);
    Ok(keys.column_mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// `‖R‖_F` handed to the solver.
    pub residual_norm: f64,
    /// `‖(W+Δ)K − V‖_F` right after the update.
    pub residual_after: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub algorithm: Algorithm,
    pub edits: usize,
    /// Set when ROME-style editing processed a batch one edit at a time.
    pub sequential: bool,
    pub layers: Vec<LayerReport>,
}

/// Where solver inputs and outputs are dumped.
#[derive(Debug, Clone, Copy)]
pub struct DumpTarget<'a> {
    pub dir: &'a Path,
    pub label: &'a str,
}

/// How the target state is formed from a delta target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `h̄` is the target's stored state.
    Absolute,
    /// `h̄ = h(θ) + δ` on the model being edited.
    Relative,
}

/// Writes `targets` into a copy of `model`.
#[allow(clippy::too_many_arguments)]
pub fn apply_edit(
    model: &ToyLm,
    requests: &[EditRequest],
    targets: &[DeltaTarget],
    algo: Algorithm,
    layers: &CausalLayerSet,
    ctx: &SpreadContext,
    mode: TargetMode,
    prefixes: &[Vec<usize>],
    dump: Option<DumpTarget<'_>>,
) -> Result<(ToyLm, ApplyReport)> {
    let mut out = model.clone();
    let mut report = ApplyReport {
        algorithm: algo,
        edits: targets.len(),
        sequential: false,
        layers: Vec::new(),
    };
    if targets.is_empty() {
        return Ok((out, report));
    }
    let edit_layers = layers.for_algorithm(algo);
    let top = layers.last();
    let mut reqs = Vec::with_capacity(targets.len());
    for t in targets {
        if t.site.layer() != top {
            return Err(Error::config(format!(
                "request {}: delta at layer {} but the last causal layer is {top}",
                t.request_id,
                t.site.layer()
            )));
        }
        let r = requests
            .iter()
            .find(|r| r.id == t.request_id)
            .ok_or_else(|| Error::input(format!("no request with id {}", t.request_id)))?;
        reqs.push(r);
    }
    let prompts: Vec<Rendered> = reqs.iter().map(|r| r.edit_prompt(&[])).collect();
    for (p, t) in prompts.iter().zip(targets) {
        model.check_tokens(&p.tokens)?;
        if p.last_subject != t.position {
            return Err(Error::input(format!(
                "request {}: target position {} but last subject token is {}",
                t.request_id, t.position, p.last_subject
            )));
        }
    }
    let goal = target_states(model, &prompts, targets, top, mode);
    let opts = ctx.config.solve_options();

    if algo.single_layer() {
        let l = top;
        let idx = ctx.index(l)?;
        let c = &ctx.cov[idx].c;
        report.sequential = targets.len() > 1;
        if report.sequential {
            info!("{algo}: {} edits applied one at a time", targets.len());
        }
        let mut ks = DMatrix::zeros(model.config.d_mlp, targets.len());
        let mut vs = DMatrix::zeros(model.config.d_model, targets.len());
        let mut res0 = 0.0;
        let w_before = out.blocks[l].w_out.clone();
        for (i, (req, p)) in reqs.iter().zip(&prompts).enumerate() {
            let cache = out.run(&[&p.tokens], &[]);
            let h = cache.hidden_at(l, 0, p.last_subject);
            let k_bare = cache.key_at(l, 0, p.last_subject);
            let k = if algo == Algorithm::RRome {
                averaged_key(&out, req, l, prefixes)?
            } else {
                k_bare.clone()
            };
            let w = &out.blocks[l].w_out;
            let r = goal.column(i) - h;
            let v = w * &k_bare + &r;
            res0 += (&v - w * &k).norm_squared();
            out.blocks[l].w_out = solve_rome(w, &k, &v, c, opts)?;
            ks.set_column(i, &k);
            vs.set_column(i, &v);
        }
        let delta = &out.blocks[l].w_out - &w_before;
        report.layers.push(LayerReport {
            layer: l,
            residual_norm: res0.sqrt(),
            residual_after: (&out.blocks[l].w_out * &ks - &vs).norm(),
            delta_norm: delta.norm(),
        });
        if let Some(d) = dump {
            let r = &vs - &w_before * &ks;
            dump_layer(d, algo, l, &ks, &vs, &r, c, &delta)?;
        }
        check_finite(&out)?;
        return Ok((out, report));
    }

    let c_total = edit_layers.len();
    for (j, &l) in edit_layers.iter().enumerate() {
        let idx = ctx.index(l)?;
        let seqs: Vec<&[usize]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
        let cache = out.run(&seqs, &[]);
        let m = prompts.len();
        let mut k = DMatrix::zeros(model.config.d_mlp, m);
        let mut r = DMatrix::zeros(model.config.d_model, m);
        let share = (c_total - j) as f64;
        for (i, p) in prompts.iter().enumerate() {
            if ctx.config.average_keys {
                k.set_column(i, &averaged_key(&out, reqs[i], l, prefixes)?);
            } else {
                k.set_column(i, &cache.key_at(l, i, p.last_subject));
            }
            let h = cache.hidden_at(top, i, p.last_subject);
            r.set_column(i, &((goal.column(i) - h) / share));
        }
        let w = &out.blocks[l].w_out;
        let v = w * &k + &r;
        let kv = KvSet::new(w, k, v)?;
        let c = &ctx.cov[idx].c;
        let delta = match algo {
            Algorithm::Memit | Algorithm::Pmet => solve_memit(&kv, c, opts)?,
            Algorithm::AlphaEdit => solve_alphaedit(&kv, c, &ctx.preserved[idx].k, ctx.config.lambda_r, opts)?,
            Algorithm::Emmet => solve_emmet(w, &kv, c, opts)? - w,
            Algorithm::Encore => {
                let k0 = linalg::psd_sqrt(&(c / ctx.config.lambda_c.max(f64::MIN_POSITIVE)));
                solve_encore(&kv, &k0, ctx.config.lambda_p, ctx.config.lambda_n, opts)?
            }
            Algorithm::Rome | Algorithm::RRome => unreachable!("single-layer algorithms handled above"),
        };
        let updated = w + &delta;
        report.layers.push(LayerReport {
            layer: l,
            residual_norm: kv.r.norm(),
            residual_after: (&updated * &kv.k - &kv.v).norm(),
            delta_norm: delta.norm(),
        });
        if let Some(d) = dump {
            dump_layer(d, algo, l, &kv.k, &kv.v, &kv.r, c, &delta)?;
        }
        out.blocks[l].w_out = updated;
    }
    check_finite(&out)?;
    Ok((out, report))
}

/// `h̄` per edit column at the delta layer.
fn target_states(model: &ToyLm, prompts: &[Rendered], targets: &[DeltaTarget], top: usize, mode: TargetMode) -> DMatrix<f64> {
    let d = model.config.d_model;
    let mut goal = DMatrix::zeros(d, targets.len());
    let seqs: Vec<&[usize]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    let cache = model.run(&seqs, &[]);
    for (i, (p, t)) in prompts.iter().zip(targets).enumerate() {
        let h = cache.hidden_at(top, i, p.last_subject);
        let state = match (mode, t.site) {
            (TargetMode::Relative, _) => h + t.spread_delta(),
            (TargetMode::Absolute, TargetSite::HiddenState(_)) => t.target_state.clone(),
            // stored state is an MLP output; shift it into the residual stream
            (TargetMode::Absolute, _) => {
                let z = cache.mlp_out_at(top, i, p.last_subject);
                h - z + &t.target_state
            }
        };
        goal.set_column(i, &state);
    }
    goal
}

fn check_finite(model: &ToyLm) -> Result<()> {
    if model.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric("edited weights are not finite"))
    }
}

#[allow(clippy::too_many_arguments)]
fn dump_layer(
    d: DumpTarget<'_>,
    algo: Algorithm,
    layer: usize,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    r: &DMatrix<f64>,
    c: &DMatrix<f64>,
    delta: &DMatrix<f64>,
) -> Result<()> {
    let path = d.dir.join(format!("{}_layer{layer}.bin", d.label));
    let meta = serde_json::json!({ "algorithm": algo, "layer": layer, "label": d.label });
    write_arrays(
        &path,
        "spread-debug",
        meta,
        &[
            ("K".to_string(), k),
            ("V".to_string(), v),
            ("R".to_string(), r),
            ("C".to_string(), c),
            ("delta".to_string(), delta),
        ],
    )
}
