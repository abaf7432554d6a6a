//! Iterative editing: alternate delta search and spread, tracking how far the
//! realized states land from the ideal ones.
//!
//! For iteration `k` (1-based) with weights `θ_k`:
//!
//! ```text
//! p_bar = p(θ_k, h̄_k)        δ_k patched on the bare edit prompt
//! p_hat = p(θ_{k+1})          plain forward after the spread step
//! gap   = |p_hat - p_bar|
//! dp2   = |p_hat_k - p_hat_{k-1}|   (k ≥ 2)
//! ```
//!
//! where `p` is the mean over edits of `1 / f(x)[o*]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate, MetricsReport, ReportRow};
use crate::factworld::{EditBatch, EditRequest, World};
use crate::optimize::{find_targets_batch, DeltaTarget, OptimizeSpec};
use crate::spread::{apply_edit, Algorithm, CausalLayerSet, DumpTarget, SpreadConfig, SpreadContext, TargetMode};
use crate::toylm::loss::softmax;
use crate::toylm::{SitePatch, ToyLm};

/// Probability floor shared with the delta loss.
pub const PROB_FLOOR: f64 = 1e-300;

/// Collapse is flagged when probe perplexity exceeds this multiple of its pre-edit value.
pub const COLLAPSE_FACTOR: f64 = 100.0;

/// Mean inverse probability of `o*` on each request's bare edit prompt. With
/// `targets`, every delta of the matching target is patched in at its site;
/// requests without a target are skipped in that case.
pub fn target_perplexity(model: &ToyLm, requests: &[EditRequest], targets: Option<&[DeltaTarget]>) -> Result<f64> {
    let mut prompts = Vec::new();
    let mut objects = Vec::new();
    let mut patches = Vec::new();
    for r in requests {
        let target = match targets {
            Some(ts) => match ts.iter().find(|t| t.request_id == r.id) {
                Some(t) => Some(t),
                None => continue,
            },
            None => None,
        };
        let p = r.edit_prompt(&[]);
        model.check_tokens(&p.tokens)?;
        if let Some(t) = target {
            if t.position != p.last_subject {
                return Err(Error::input(format!(
                    "target for request {} sits at position {}, prompt subject ends at {}",
                    r.id, t.position, p.last_subject
                )));
            }
            for (site, delta) in t.site.patch_sites().into_iter().zip(&t.deltas) {
                patches.push(SitePatch {
                    segment: prompts.len(),
                    position: t.position,
                    layer: t.site.layer(),
                    site,
                    delta: delta.clone(),
                });
            }
        }
        prompts.push(p.tokens);
        objects.push(r.new_object);
    }
    if prompts.is_empty() {
        return Err(Error::input("no requests to score"));
    }
    let seqs: Vec<&[usize]> = prompts.iter().map(|p| p.as_slice()).collect();
    let cache = model.run(&seqs, &patches);
    let probs: Vec<f64> = cache
        .segments
        .iter()
        .zip(&objects)
        .map(|(seg, &o)| softmax(cache.logits.column(seg.start + seg.len - 1).as_slice())[o])
        .collect();
    Ok(perplexity_from_probs(&probs))
}

/// `mean(1 / p)` with each probability floored at [`PROB_FLOOR`].
pub fn perplexity_from_probs(probs: &[f64]) -> f64 {
    probs.iter().map(|p| 1.0 / p.max(PROB_FLOOR)).sum::<f64>() / probs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopKind {
    /// Stop at the first `k` with `gap_k ≤ eps`.
    GapBelowEps { eps: f64 },
    /// Stop once the gap stops shrinking, keeping the weights from before the rise.
    MonotonicGap,
    /// Stop at the first `k ≥ 2` with `dp2_k ≤ eps`.
    ConsecutiveSpreadGap { eps: f64 },
}

impl StopKind {
    pub fn name(&self) -> &'static str {
        match self {
            StopKind::GapBelowEps { .. } => "gap_below_eps",
            StopKind::MonotonicGap => "monotonic_gap",
            StopKind::ConsecutiveSpreadGap { .. } => "consecutive_spread_gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    #[serde(flatten)]
    pub kind: StopKind,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_iterations() -> usize {
    10
}

impl Default for StoppingPolicy {
    fn default() -> Self {
        StoppingPolicy {
            kind: StopKind::GapBelowEps { eps: 1.0 },
            max_iterations: default_max_iterations(),
        }
    }
}

impl StoppingPolicy {
    pub fn new(kind: StopKind) -> Self {
        StoppingPolicy {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        match self.kind {
            StopKind::GapBelowEps { eps } | StopKind::ConsecutiveSpreadGap { eps } if !(eps > 0.0) => {
                Err(Error::config(format!("stopping eps must be positive, got {eps}")))
            }
            _ => Ok(()),
        }
    }

    /// The 1-based iteration whose output the rule selects, given the
    /// per-iteration gaps and `dp2` values seen so far (`dp2[0]` is unused).
    /// `None` when the rule has not fired yet; the iteration cap is not applied.
    pub fn triggered(&self, gaps: &[f64], dp2: &[Option<f64>]) -> Option<usize> {
        match self.kind {
            StopKind::GapBelowEps { eps } => gaps.iter().position(|&g| g <= eps).map(|i| i + 1),
            StopKind::MonotonicGap => gaps.windows(2).position(|w| w[1] >= w[0]).map(|i| i + 1),
            StopKind::ConsecutiveSpreadGap { eps } => dp2
                .iter()
                .enumerate()
                .skip(1)
                .find(|(_, d)| d.is_some_and(|d| d <= eps))
                .map(|(i, _)| i + 1),
        }
    }

    /// [`triggered`](Self::triggered) with the iteration cap applied, for a
    /// trajectory of `gaps.len()` iterations. Always at least 1.
    pub fn choose(&self, gaps: &[f64], dp2: &[Option<f64>]) -> usize {
        let cap = self.max_iterations.min(gaps.len()).max(1);
        let dp2 = &dp2[..cap.min(dp2.len())];
        self.triggered(&gaps[..cap.min(gaps.len())], dp2).unwrap_or(cap)
    }
}

/// `|p_hat_k - p_hat_{k-1}|`, `None` for the first iteration.
pub fn consecutive_gaps(p_hat: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None];
    out.extend(p_hat.windows(2).map(|w| Some((w[1] - w[0]).abs())));
    out.truncate(p_hat.len());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterateMode {
    /// Fresh targets every iteration.
    Full,
    /// Iteration 1's deltas re-applied on top of the current states every iteration.
    SpreadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRetention {
    #[default]
    None,
    Last,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub algorithm: Algorithm,
    pub layers: CausalLayerSet,
    pub optimize: OptimizeSpec,
    pub spread: SpreadConfig,
    pub stopping: StoppingPolicy,
    pub mode: IterateMode,
    pub snapshots: SnapshotRetention,
}

/// One row of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub p_bar: f64,
    pub p_hat: f64,
    pub gap: f64,
    /// `|p_hat_k - p_hat_{k-1}|`; absent at `k = 1`.
    pub dp2: Option<f64>,
    /// Metrics of the weights produced by this iteration.
    pub metrics: MetricsReport,
    pub collapsed: bool,
    pub targets: usize,
    pub target_failures: usize,
    pub mean_delta_norm: f64,
    pub sequential: bool,
    /// The stopping rule selected this row.
    pub stop: bool,
}

#[derive(Debug, Clone)]
pub struct IterateOutcome {
    /// Weights at the selected iteration.
    pub model: ToyLm,
    /// Metrics of the unedited model.
    pub baseline: MetricsReport,
    pub records: Vec<IterationRecord>,
    /// Selected row (1-based).
    pub stop_k: usize,
    /// Some iteration's probe perplexity exceeded the collapse threshold.
    pub collapsed: bool,
    /// `(k, weights after iteration k)`: every iteration under `All`, the
    /// selected one under `Last`.
    pub snapshots: Vec<(usize, ToyLm)>,
}

impl IterateOutcome {
    /// Report rows: the baseline as `k = 0`, then one per iteration.
    pub fn report_rows(&self) -> Vec<ReportRow> {
        let mut rows = vec![ReportRow {
            k: 0,
            metrics: self.baseline.clone(),
            p_bar: None,
            p_hat: None,
            gap: None,
        }];
        rows.extend(self.records.iter().map(|r| ReportRow {
            k: r.k,
            metrics: r.metrics.clone(),
            p_bar: Some(r.p_bar),
            p_hat: Some(r.p_hat),
            gap: Some(r.gap),
        }));
        rows
    }
}

pub fn write_trace_jsonl(mut out: impl Write, records: &[IterationRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

/// Runs the edit loop on `batch` until `config.stopping` fires. The spread
/// context (covariance, preserved keys) is built once from the input model.
pub fn run_iterative(model: &ToyLm, world: &World, batch: &EditBatch, config: &IterateConfig) -> Result<IterateOutcome> {
    config.stopping.validate()?;
    run_with(model, world, batch, config, Some(&config.stopping), config.stopping.max_iterations, None)
}

/// Same as [`run_iterative`], dumping solver matrices under `dump_dir`.
pub fn run_iterative_dump(
    model: &ToyLm,
    world: &World,
    batch: &EditBatch,
    config: &IterateConfig,
    dump_dir: &std::path::Path,
) -> Result<IterateOutcome> {
    config.stopping.validate()?;
    let max = config.stopping.max_iterations;
    run_with(model, world, batch, config, Some(&config.stopping), max, Some(dump_dir))
}

fn run_with(
    model: &ToyLm,
    world: &World,
    batch: &EditBatch,
    config: &IterateConfig,
    stopping: Option<&StoppingPolicy>,
    max_iterations: usize,
    dump_dir: Option<&std::path::Path>,
) -> Result<IterateOutcome> {
    config.optimize.validate(model)?;
    if batch.is_empty() {
        return Err(Error::input("empty edit batch"));
    }
    let want = config.algorithm.target_site(config.layers.last());
    if config.optimize.target_site != want {
        return Err(Error::config(format!(
            "{} needs target site {want:?}, optimize spec has {:?}",
            config.algorithm, config.optimize.target_site
        )));
    }
    let probes = &world.probe_utterances;
    let ctx = SpreadContext::build(model, world, &batch.requests, &config.layers, &config.spread)?;
    let baseline = evaluate(model, &batch.requests, probes)?;
    let collapse_limit = COLLAPSE_FACTOR * baseline.collapse_ppl;
    let target_mode = match config.mode {
        IterateMode::Full => TargetMode::Absolute,
        IterateMode::SpreadOnly => TargetMode::Relative,
    };

    let mut current = model.clone();
    // θ_k while iteration k runs, kept so a rule may select the row before the last.
    let mut previous: Option<ToyLm> = None;
    let mut first_targets: Option<Vec<DeltaTarget>> = None;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut p_hats = Vec::new();
    let mut snapshots = Vec::new();
    let mut stop_k = None;

    for k in 1..=max_iterations {
        let (targets, failures) = match (&first_targets, config.mode) {
            (Some(t), IterateMode::SpreadOnly) => (t.clone(), 0),
            _ => {
                let bt = find_targets_batch(&current, batch, &config.optimize)?;
                for e in &bt.failures {
                    log::warn!("iteration {k}: {e}");
                }
                if bt.targets.is_empty() {
                    return Err(Error::numeric(format!("iteration {k}: every delta search failed")));
                }
                (bt.targets, bt.failures.len())
            }
        };
        if first_targets.is_none() {
            first_targets = Some(targets.clone());
        }
        let p_bar = target_perplexity(&current, &batch.requests, Some(&targets))?;
        let label = format!("iter{k}");
        let dump = dump_dir.map(|dir| DumpTarget { dir, label: &label });
        let (next, report) = apply_edit(
            &current,
            &batch.requests,
            &targets,
            config.algorithm,
            &config.layers,
            &ctx,
            target_mode,
            &batch.prefix_pool,
            dump,
        )?;
        let edited: Vec<EditRequest> = batch
            .requests
            .iter()
            .filter(|r| targets.iter().any(|t| t.request_id == r.id))
            .cloned()
            .collect();
        let p_hat = target_perplexity(&next, &edited, None)?;
        let dp2 = p_hats.last().map(|&prev: &f64| (p_hat - prev).abs());
        p_hats.push(p_hat);
        let metrics = evaluate(&next, &batch.requests, probes)?;
        let collapsed = metrics.collapse_ppl > collapse_limit;
        if collapsed {
            log::warn!(
                "iteration {k}: probe perplexity {:.3} exceeds {COLLAPSE_FACTOR}x the pre-edit {:.3}",
                metrics.collapse_ppl,
                baseline.collapse_ppl
            );
        }
        let mean_delta_norm = targets.iter().map(|t| t.spread_delta().norm()).sum::<f64>() / targets.len() as f64;
        let gap = (p_hat - p_bar).abs();
        log::info!(
            "iteration {k}: p_bar {p_bar:.4} p_hat {p_hat:.4} gap {gap:.4} eff {:.3} spec {:.3} ppl {:.3}",
            metrics.efficacy_acc,
            metrics.specificity_acc,
            metrics.collapse_ppl
        );
        records.push(IterationRecord {
            k,
            p_bar,
            p_hat,
            gap,
            dp2,
            metrics,
            collapsed,
            targets: targets.len(),
            target_failures: failures,
            mean_delta_norm,
            sequential: report.sequential,
            stop: false,
        });
        if config.snapshots == SnapshotRetention::All {
            snapshots.push((k, next.clone()));
        }
        let prev_model = std::mem::replace(&mut current, next);
        previous = Some(prev_model);

        let gaps: Vec<f64> = records.iter().map(|r| r.gap).collect();
        let dp2s: Vec<Option<f64>> = records.iter().map(|r| r.dp2).collect();
        if let Some(row) = stopping.and_then(|p| p.triggered(&gaps, &dp2s)) {
            stop_k = Some(row);
            break;
        }
    }

    let stop_k = stop_k.unwrap_or(records.len());
    // Rows are checked as they arrive, so the selection is the last row or
    // (for the monotonic rule) the one before it.
    let model_out = if stop_k == records.len() {
        current
    } else {
        debug_assert_eq!(stop_k + 1, records.len());
        previous.take().expect("previous weights retained")
    };
    if config.snapshots == SnapshotRetention::Last {
        snapshots = vec![(stop_k, model_out.clone())];
    }
    records[stop_k - 1].stop = true;
    let collapsed = records.iter().any(|r| r.collapsed);
    Ok(IterateOutcome {
        model: model_out,
        baseline,
        records,
        stop_k,
        collapsed,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChoice {
    pub policy: StoppingPolicy,
    /// Selected iteration (1-based).
    pub k: usize,
    pub metrics: MetricsReport,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct StoppingComparison {
    pub baseline: MetricsReport,
    pub records: Vec<IterationRecord>,
    pub choices: Vec<PolicyChoice>,
}

/// Runs one trajectory for the longest iteration cap among `policies` and
/// scores each policy offline on it.
pub fn compare_stopping(
    model: &ToyLm,
    world: &World,
    batch: &EditBatch,
    config: &IterateConfig,
    policies: &[StoppingPolicy],
) -> Result<StoppingComparison> {
    if policies.is_empty() {
        return Err(Error::config("no stopping policies to compare"));
    }
    for p in policies {
        p.validate()?;
    }
    let max = policies.iter().map(|p| p.max_iterations).max().expect("nonempty");
    let mut cfg = config.clone();
    cfg.snapshots = SnapshotRetention::None;
    let run = run_with(model, world, batch, &cfg, None, max, None)?;
    let gaps: Vec<f64> = run.records.iter().map(|r| r.gap).collect();
    let dp2: Vec<Option<f64>> = run.records.iter().map(|r| r.dp2).collect();
    let choices = policies
        .iter()
        .map(|p| {
            let k = p.choose(&gaps, &dp2);
            PolicyChoice {
                policy: *p,
                k,
                metrics: run.records[k - 1].metrics.clone(),
                gap: gaps[k - 1],
            }
        })
        .collect();
    let mut records = run.records;
    for r in &mut records {
        r.stop = false;
    }
    Ok(StoppingComparison {
        baseline: run.baseline,
        records,
        choices,
    })
}
