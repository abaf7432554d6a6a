//! Search for the latent delta that makes the new object likely.
//!
//! The objective for a delta `δ` added at the last subject token is
//!
//! ```text
//! g(δ) = -(1/n) Σ_i ln f(ξ_i ⊕ p, h+δ)[o*]
//!        + kl_weight · KL(f(s, h+δ) || f(s))
//!        + neighbor_weight · -ln f(x̃, h+δ)[o]
//! ```
//!
//! where `ξ_i` are the batch prefixes, `s` is the bare subject and `x̃` the
//! assist neighbor prompt. With `include_bare` the bare prompt joins the sum
//! as one more term; with an empty prefix pool it is the only one.
//!
//! Descent runs on the normalized variable `u = δ / ‖a‖`, where `a` is the
//! unpatched activation at the patch site on the bare edit prompt:
//! `u ← u − step_size · ∇_u g`. Clamping bounds `‖u‖` by `clamp_norm`.

use std::io::{BufRead, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factworld::{subject_prompt, EditBatch, EditRequest, Rendered};
use crate::toylm::loss::{log_softmax, log_softmax_at, LOG_PROB_FLOOR};
use crate::toylm::{is_strict_argmax, live_columns, FrozenPrefix, PatchSite, Segment, SitePatch, ToyLm};

/// Where the searched delta is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum TargetSite {
    /// Block output at the last causal layer (MEMIT, AlphaEdit, EMMET, ENCORE).
    HiddenState(usize),
    /// MLP output at the edited layer (ROME, R-ROME).
    MlpOutput(usize),
    /// Attention and MLP outputs optimized jointly (PMET).
    AttnAndMlp(usize),
}

impl TargetSite {
    pub fn layer(&self) -> usize {
        match *self {
            TargetSite::HiddenState(l) | TargetSite::MlpOutput(l) | TargetSite::AttnAndMlp(l) => l,
        }
    }

    /// Patch sites in delta order. The last one is the delta handed to spread.
    pub fn patch_sites(&self) -> Vec<PatchSite> {
        match self {
            TargetSite::HiddenState(_) => vec![PatchSite::HiddenState],
            TargetSite::MlpOutput(_) => vec![PatchSite::MlpOutput],
            TargetSite::AttnAndMlp(_) => vec![PatchSite::AttnOutput, PatchSite::MlpOutput],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    None,
    /// Stop once o* is the argmax on every prefixed prompt.
    Mpes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSpec {
    pub target_site: TargetSite,
    pub steps: usize,
    pub step_size: f64,
    pub kl_weight: f64,
    pub neighbor_weight: f64,
    pub neighbor_prefixed: bool,
    pub early_stop: EarlyStop,
    /// Maximum `‖δ‖` as a multiple of the norm of the unpatched activation.
    #[serde(default = "default_clamp", with = "crate::optser")]
    pub clamp_norm: Option<f64>,
    /// Also score the unprefixed edit prompt (the empty prefix).
    #[serde(default = "default_true")]
    pub include_bare: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_clamp() -> Option<f64> {
    Some(4.0)
}

impl OptimizeSpec {
    pub fn new(target_site: TargetSite) -> Self {
        OptimizeSpec {
            target_site,
            steps: 100,
            step_size: 0.05,
            kl_weight: 0.0625,
            neighbor_weight: 0.0,
            neighbor_prefixed: false,
            early_stop: EarlyStop::None,
            clamp_norm: Some(4.0),
            include_bare: true,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ToyLm) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("optimize steps must be positive"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config("step_size must be positive"));
        }
        if !(self.kl_weight >= 0.0) || !(self.neighbor_weight >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if let Some(c) = self.clamp_norm {
            if !(c > 0.0) {
                return Err(Error::config("clamp_norm must be positive"));
            }
        }
        if self.target_site.layer() >= model.config.n_layers {
            return Err(Error::config(format!(
                "target layer {} out of range",
                self.target_site.layer()
            )));
        }
        Ok(())
    }

    fn uses_neighbor(&self) -> bool {
        self.neighbor_weight > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Prefix-averaged `-ln p(o*)`.
    pub nll: f64,
    /// KL term before weighting.
    pub kl: f64,
    /// Neighbor `-ln p(o)` before weighting.
    pub neighbor: f64,
    /// Log-probabilities that hit the `ln(1e-300)` floor.
    pub floored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTarget {
    pub request_id: usize,
    pub site: TargetSite,
    /// Last subject index in the bare edit prompt.
    pub position: usize,
    /// One vector per entry of `site.patch_sites()`.
    #[serde(with = "crate::vecser::many")]
    pub deltas: Vec<DVector<f64>>,
    /// Unpatched activation plus delta at the spread site, on the bare edit prompt.
    #[serde(with = "crate::vecser")]
    pub target_state: DVector<f64>,
    pub loss: LossBreakdown,
    pub initial_loss: f64,
    pub steps_run: usize,
    pub early_stopped: bool,
}

impl DeltaTarget {
    /// The delta spread distributes into the weights (the MLP delta for PMET).
    pub fn spread_delta(&self) -> &DVector<f64> {
        self.deltas.last().expect("at least one delta")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Edit,
    Kl,
    Neighbor,
}

/// Packed prompts for one request with everything below the patch layer cached.
struct Objective<'a> {
    model: &'a ToyLm,
    layer: usize,
    /// First layer that is recomputed. A hidden-state patch at `layer` is
    /// added directly to the cached output, so recomputation starts above it.
    start: usize,
    sites: Vec<PatchSite>,
    /// Live input columns at `start`.
    base: DMatrix<f64>,
    frozen: FrozenPrefix,
    /// Live column ranges; every patch sits at live index 0.
    segments: Vec<Segment>,
    tokens: Vec<Vec<usize>>,
    roles: Vec<Role>,
    /// Patch position (last subject token) per segment.
    positions: Vec<usize>,
    reference: Vec<f64>,
    new_object: usize,
    old_object: usize,
    kl_weight: f64,
    neighbor_weight: f64,
    n_edit: usize,
    n_neighbor: usize,
    site_norms: Vec<f64>,
}

struct Eval {
    loss: LossBreakdown,
    grads: Vec<DVector<f64>>,
    edit_all_argmax: bool,
}

/// The edit prompt under each prefix, led by the bare prompt when requested.
pub fn edit_prompts(req: &EditRequest, prefixes: &[Vec<usize>], include_bare: bool) -> Vec<Rendered> {
    let mut out = Vec::with_capacity(prefixes.len() + 1);
    if include_bare || prefixes.is_empty() {
        out.push(req.edit_prompt(&[]));
    }
    out.extend(prefixes.iter().map(|p| req.edit_prompt(p)));
    out
}

impl<'a> Objective<'a> {
    fn new(
        model: &'a ToyLm,
        req: &EditRequest,
        prefixes: &[Vec<usize>],
        spec: &OptimizeSpec,
        with_neighbor: bool,
    ) -> Result<Self> {
        spec.validate(model)?;
        let mut prompts: Vec<(Role, Rendered)> = edit_prompts(req, prefixes, spec.include_bare)
            .into_iter()
            .map(|r| (Role::Edit, r))
            .collect();
        let n_edit = prompts.len();
        prompts.push((Role::Kl, subject_prompt(&req.triple.subject)));
        let mut n_neighbor = 0;
        if with_neighbor {
            let nb = req.assist_neighbor.as_ref().ok_or_else(|| {
                Error::config(format!("request {} has no assist neighbor", req.id))
            })?;
            if spec.neighbor_prefixed && !prefixes.is_empty() {
                for p in prefixes {
                    prompts.push((Role::Neighbor, nb.render(p)));
                }
            } else {
                prompts.push((Role::Neighbor, nb.render(&[])));
            }
            n_neighbor = prompts.len() - n_edit - 1;
        }
        for (_, r) in &prompts {
            model.check_tokens(&r.tokens)?;
        }
        let for_check = [req.new_object, req.triple.object];
        if let Some(&t) = for_check.iter().find(|&&t| t >= model.config.vocab_size) {
            return Err(Error::input(format!("object token {t} out of range")));
        }

        let layer = spec.target_site.layer();
        let sites = spec.target_site.patch_sites();
        let seqs: Vec<&[usize]> = prompts.iter().map(|(_, r)| r.tokens.as_slice()).collect();
        let full = model.run(&seqs, &[]);
        let split: Vec<usize> = prompts.iter().map(|(_, r)| r.last_subject).collect();
        let (start, below) = if sites == [PatchSite::HiddenState] {
            (layer + 1, full.layer_output(layer))
        } else {
            (layer, full.layer_input(layer))
        };
        // Positions before the patch never see the delta; only the rest is recomputed.
        let frozen = full.freeze(start, &split);
        let (base, segments) = live_columns(below, &full.segments, &split);
        let positions = vec![0; prompts.len()];
        let kl_col = full.segments[n_edit].start + split[n_edit];
        let reference = log_softmax(full.logits.column(kl_col).as_slice());

        // Norms of the unpatched activations on the bare edit prompt.
        let bare = req.edit_prompt(&[]);
        let bare_cache = model.run(&[bare.tokens.as_slice()], &[]);
        let site_norms = sites
            .iter()
            .map(|s| site_activation(&bare_cache, *s, layer, bare.last_subject).norm())
            .collect();

        Ok(Objective {
            model,
            layer,
            start,
            sites,
            base,
            frozen,
            segments,
            tokens: full.tokens,
            roles: prompts.iter().map(|(r, _)| *r).collect(),
            positions,
            reference,
            new_object: req.new_object,
            old_object: req.triple.object,
            kl_weight: spec.kl_weight,
            neighbor_weight: if with_neighbor { spec.neighbor_weight } else { 0.0 },
            n_edit,
            n_neighbor,
            site_norms,
        })
    }

    fn patches(&self, deltas: &[DVector<f64>]) -> Vec<SitePatch> {
        let mut out = Vec::new();
        for seg in 0..self.segments.len() {
            for (site, d) in self.sites.iter().zip(deltas) {
                out.push(SitePatch {
                    segment: seg,
                    position: self.positions[seg],
                    layer: self.layer,
                    site: *site,
                    delta: d.clone(),
                });
            }
        }
        out
    }

    fn eval(&self, deltas: &[DVector<f64>], want_grad: bool) -> Eval {
        let mut input = self.base.clone();
        let patches = if self.start > self.layer {
            for (seg, s) in self.segments.iter().enumerate() {
                let mut c = input.column_mut(s.start + self.positions[seg]);
                c += &deltas[0];
            }
            Vec::new()
        } else {
            self.patches(deltas)
        };
        let cache = self.model.run_from(
            self.start,
            input,
            self.segments.clone(),
            self.tokens.clone(),
            &patches,
            Some(&self.frozen),
        );
        let logits = &cache.logits;
        let mut dlogits = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut loss = LossBreakdown::default();
        let mut edit_all_argmax = true;
        for (seg, role) in self.roles.iter().enumerate() {
            let s = self.segments[seg];
            match role {
                Role::Edit | Role::Neighbor => {
                    let col = s.start + s.len - 1;
                    let (target, w) = if *role == Role::Edit {
                        (self.new_object, 1.0 / self.n_edit as f64)
                    } else {
                        (self.old_object, self.neighbor_weight / self.n_neighbor as f64)
                    };
                    let column = logits.column(col);
                    if *role == Role::Edit {
                        edit_all_argmax &= is_strict_argmax(column.as_slice(), target);
                    }
                    let lp = log_softmax_at(column.as_slice(), target);
                    let term = if lp < LOG_PROB_FLOOR {
                        loss.floored += 1;
                        -LOG_PROB_FLOOR
                    } else {
                        if want_grad && w != 0.0 {
                            let logp = log_softmax(column.as_slice());
                            for (i, l) in logp.iter().enumerate() {
                                dlogits[(i, col)] += w * l.exp();
                            }
                            dlogits[(target, col)] -= w;
                        }
                        -lp
                    };
                    if *role == Role::Edit {
                        loss.nll += term / self.n_edit as f64;
                    } else {
                        loss.neighbor += term / self.n_neighbor as f64;
                    }
                }
                Role::Kl => {
                    let col = s.start + self.positions[seg];
                    let logp = log_softmax(logits.column(col).as_slice());
                    let diff: Vec<f64> = logp.iter().zip(&self.reference).map(|(a, b)| a - b).collect();
                    let kl: f64 = logp.iter().zip(&diff).map(|(l, d)| l.exp() * d).sum();
                    loss.kl = kl;
                    if want_grad && self.kl_weight != 0.0 {
                        for (i, (l, d)) in logp.iter().zip(&diff).enumerate() {
                            dlogits[(i, col)] += self.kl_weight * l.exp() * (d - kl);
                        }
                    }
                }
            }
        }
        loss.total = loss.nll + self.kl_weight * loss.kl + self.neighbor_weight * loss.neighbor;
        let grads = if want_grad {
            let back = self.model.backward(&cache, &dlogits, None);
            self.sites
                .iter()
                .map(|site| {
                    let mut g = DVector::zeros(self.model.config.d_model);
                    for (seg, s) in self.segments.iter().enumerate() {
                        if self.start > self.layer {
                            g += back.d_input.column(s.start + self.positions[seg]);
                        } else {
                            g += back.site_grad_seg(*site, self.layer, seg, self.positions[seg]);
                        }
                    }
                    g
                })
                .collect()
        } else {
            Vec::new()
        };
        Eval {
            loss,
            grads,
            edit_all_argmax,
        }
    }
}

fn site_activation(
    cache: &crate::toylm::Cache,
    site: PatchSite,
    layer: usize,
    pos: usize,
) -> DVector<f64> {
    match site {
        PatchSite::HiddenState => cache.hidden_at(layer, 0, pos),
        PatchSite::MlpOutput => cache.mlp_out_at(layer, 0, pos),
        PatchSite::AttnOutput => cache.attn_at(layer, 0, pos),
    }
}

fn check_deltas(model: &ToyLm, spec: &OptimizeSpec, deltas: &[DVector<f64>]) -> Result<()> {
    let n = spec.target_site.patch_sites().len();
    if deltas.len() != n {
        return Err(Error::input(format!("expected {n} delta vectors, got {}", deltas.len())));
    }
    for d in deltas {
        if d.len() != model.config.d_model || !d.iter().all(|v| v.is_finite()) {
            return Err(Error::input("delta must be finite with dimension d_model"));
        }
    }
    Ok(())
}

/// Prefix-averaged NLL of o* plus the weighted KL anchor.
pub fn loss_g(
    model: &ToyLm,
    request: &EditRequest,
    prefixes: &[Vec<usize>],
    deltas: &[DVector<f64>],
    spec: &OptimizeSpec,
) -> Result<LossBreakdown> {
    check_deltas(model, spec, deltas)?;
    let obj = Objective::new(model, request, prefixes, spec, false)?;
    Ok(obj.eval(deltas, false).loss)
}

/// [`loss_g`] plus the weighted assist-neighbor term.
pub fn loss_g_neighbor(
    model: &ToyLm,
    request: &EditRequest,
    prefixes: &[Vec<usize>],
    deltas: &[DVector<f64>],
    spec: &OptimizeSpec,
) -> Result<LossBreakdown> {
    check_deltas(model, spec, deltas)?;
    let obj = Objective::new(model, request, prefixes, spec, true)?;
    Ok(obj.eval(deltas, false).loss)
}

/// Loss and its gradient with respect to each delta vector. The neighbor term
/// is included when `spec.neighbor_weight > 0`.
pub fn loss_and_grad(
    model: &ToyLm,
    request: &EditRequest,
    prefixes: &[Vec<usize>],
    deltas: &[DVector<f64>],
    spec: &OptimizeSpec,
) -> Result<(LossBreakdown, Vec<DVector<f64>>)> {
    check_deltas(model, spec, deltas)?;
    let obj = Objective::new(model, request, prefixes, spec, spec.uses_neighbor())?;
    let e = obj.eval(deltas, true);
    Ok((e.loss, e.grads))
}

/// Plain gradient descent from zero with norm clamping; returns the best delta seen.
pub fn find_delta(
    model: &ToyLm,
    request: &EditRequest,
    prefixes: &[Vec<usize>],
    spec: &OptimizeSpec,
) -> Result<DeltaTarget> {
    let obj = Objective::new(model, request, prefixes, spec, spec.uses_neighbor())?;
    let d = model.config.d_model;
    let mut deltas: Vec<DVector<f64>> = obj.sites.iter().map(|_| DVector::zeros(d)).collect();
    let scales: Vec<f64> = obj
        .site_norms
        .iter()
        .map(|&n| if n > 0.0 { n } else { 1.0 })
        .collect();
    let limits: Vec<Option<f64>> = scales.iter().map(|n| spec.clamp_norm.map(|c| c * n)).collect();

    let mut best: Option<(LossBreakdown, Vec<DVector<f64>>)> = None;
    let mut initial_loss = f64::NAN;
    let mut steps_run = 0;
    let mut early_stopped = false;
    for step in 0..=spec.steps {
        let want_grad = step < spec.steps;
        let e = obj.eval(&deltas, want_grad);
        if !e.loss.total.is_finite() {
            return Err(Error::Optimization {
                step,
                reason: format!("non-finite loss {}", e.loss.total),
            });
        }
        if step == 0 {
            initial_loss = e.loss.total;
        }
        if best.as_ref().is_none_or(|(b, _)| e.loss.total < b.total) {
            best = Some((e.loss, deltas.clone()));
        }
        if spec.early_stop == EarlyStop::Mpes && e.edit_all_argmax {
            best = Some((e.loss, deltas.clone()));
            early_stopped = true;
            break;
        }
        if !want_grad {
            break;
        }
        for (i, g) in e.grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Optimization {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            // δ = a·u, so a step on u moves δ by step_size · a² · ∇_δ g
            deltas[i].axpy(-spec.step_size * scales[i] * scales[i], g, 1.0);
            if let Some(limit) = limits[i] {
                let n = deltas[i].norm();
                if n > limit && n > 0.0 {
                    deltas[i] *= limit / n;
                }
            }
        }
        steps_run = step + 1;
    }
    let (loss, deltas) = best.expect("at least one evaluation");
    if loss.floored > 0 {
        warn!(
            "request {}: {} log-probabilities clamped at the floor",
            request.id, loss.floored
        );
    }

    let bare = request.edit_prompt(&[]);
    let cache = model.run(&[bare.tokens.as_slice()], &[]);
    let spread_site = *obj.sites.last().expect("one site");
    let target_state =
        site_activation(&cache, spread_site, obj.layer, bare.last_subject) + deltas.last().unwrap();
    Ok(DeltaTarget {
        request_id: request.id,
        site: spec.target_site,
        position: bare.last_subject,
        deltas,
        target_state,
        loss,
        initial_loss,
        steps_run,
        early_stopped,
    })
}

#[derive(Debug)]
pub struct BatchTargets {
    /// Successful targets in batch order.
    pub targets: Vec<DeltaTarget>,
    /// Failures, each an [`Error::Request`] naming the request id.
    pub failures: Vec<Error>,
}

/// Independent delta searches for every request against the same frozen model.
pub fn find_targets_batch(model: &ToyLm, batch: &EditBatch, spec: &OptimizeSpec) -> Result<BatchTargets> {
    if batch.is_empty() {
        return Err(Error::input("empty edit batch"));
    }
    let results: Vec<Result<DeltaTarget>> = batch
        .requests
        .par_iter()
        .map(|r| {
            find_delta(model, r, &batch.prefix_pool, spec).map_err(|e| Error::Request {
                id: r.id,
                source: Box::new(e),
            })
        })
        .collect();
    let mut targets = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(t) => targets.push(t),
            Err(e) => failures.push(e),
        }
    }
    if targets.is_empty() {
        return Err(failures.into_iter().next().expect("nonempty batch"));
    }
    Ok(BatchTargets { targets, failures })
}

pub fn write_targets_jsonl(out: &mut impl Write, targets: &[DeltaTarget]) -> Result<()> {
    for t in targets {
        let line = serde_json::to_string(t)?;
        writeln!(out, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn read_targets_jsonl(input: impl BufRead) -> Result<Vec<DeltaTarget>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
