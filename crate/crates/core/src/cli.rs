//! Experiment configuration and the commands behind the `editlab` binary.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.resolved     the fully resolved TOML config
//! <out>/checkpoints/        pretrained weights, retained snapshots
//! <out>/traces/             one JSONL iteration trace per trial
//! <out>/reports/            per-trial CSV, summary.csv, stopping.csv
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate, write_report_csv, MetricsReport, ReportRow};
use crate::factworld::{
    filter_neighbors, generate_world, make_edit_batch, write_batch_jsonl, EditBatch, World, WorldConfig,
};
use crate::iterate::{
    compare_stopping, run_iterative, write_trace_jsonl, IterateConfig, IterateMode, IterationRecord,
    SnapshotRetention, StopKind, StoppingPolicy,
};
use crate::optimize::{EarlyStop, OptimizeSpec};
use crate::recipe::{
    pretrain_on_world, reference_world_config, PretrainConfig, REFERENCE_BATCH_SIZE, REFERENCE_CAUSAL_LAYERS,
    REFERENCE_NEIGHBOR_WEIGHT, REFERENCE_PREFIXES,
};
use crate::spread::{Algorithm, CausalLayerSet, SpreadConfig};
use crate::toylm::{load_checkpoint, save_checkpoint, ModelConfig, PretrainReport, ToyLm};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "EDITLAB_OUT";

const PRETRAINED: &str = "pretrained.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            seed: 0,
        }
    }
}

impl ModelSection {
    /// Vocabulary size and context length come from the world.
    pub fn model_config(&self, world: &World) -> ModelConfig {
        ModelConfig {
            vocab_size: world.vocab.len(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            max_seq_len: world.max_seq_len,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub algorithm: Algorithm,
    pub layers: Vec<usize>,
    /// Edits per trial (m).
    pub batch_size: usize,
    pub prefixes: usize,
    /// One trial per seed, each with its own batch of edits.
    pub trial_seeds: Vec<u64>,
    pub mode: IterateMode,
    pub snapshots: SnapshotRetention,
    pub neighbor_assist: bool,
    pub neighbor_weight: f64,
    pub parallel_trials: bool,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            algorithm: Algorithm::Memit,
            layers: REFERENCE_CAUSAL_LAYERS.to_vec(),
            batch_size: REFERENCE_BATCH_SIZE,
            prefixes: REFERENCE_PREFIXES,
            trial_seeds: vec![1, 2, 3],
            mode: IterateMode::Full,
            snapshots: SnapshotRetention::None,
            neighbor_assist: false,
            neighbor_weight: REFERENCE_NEIGHBOR_WEIGHT,
            parallel_trials: false,
        }
    }
}

/// Delta search settings; the patch site follows from the algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub steps: usize,
    pub step_size: f64,
    pub kl_weight: f64,
    pub neighbor_prefixed: bool,
    pub early_stop: EarlyStop,
    #[serde(with = "crate::optser")]
    pub clamp_norm: Option<f64>,
    pub include_bare: bool,
    pub seed: u64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let d = OptimizeSpec::new(crate::optimize::TargetSite::HiddenState(0));
        OptimizeSection {
            steps: d.steps,
            step_size: d.step_size,
            kl_weight: d.kl_weight,
            neighbor_prefixed: d.neighbor_prefixed,
            early_stop: EarlyStop::Mpes,
            clamp_norm: d.clamp_norm,
            include_bare: d.include_bare,
            seed: d.seed,
        }
    }
}

/// Everything a command needs. Defaults are the reference recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory; falls back to `$EDITLAB_OUT/<config name>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Pretrained weights to edit; defaults to `<out>/checkpoints/pretrained.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub edit: EditSection,
    pub optimize: OptimizeSection,
    pub spread: SpreadConfig,
    pub stopping: StoppingPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: None,
            checkpoint: None,
            world: reference_world_config(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            edit: EditSection::default(),
            optimize: OptimizeSection::default(),
            spread: SpreadConfig {
                lambda_c: 300.0,
                average_keys: true,
                ..SpreadConfig::default()
            },
            stopping: StoppingPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that does not need the world.
    pub fn validate(&self) -> Result<()> {
        CausalLayerSet::new(self.edit.layers.clone(), self.model.n_layers)?;
        if self.edit.trial_seeds.is_empty() {
            return Err(Error::config("no trial seeds"));
        }
        if self.edit.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.edit.batch_size > self.world.n_subjects {
            return Err(Error::config(format!(
                "batch_size {} exceeds the {} facts of the world",
                self.edit.batch_size, self.world.n_subjects
            )));
        }
        if !(self.edit.neighbor_weight >= 0.0) {
            return Err(Error::config("neighbor_weight must be non-negative"));
        }
        self.stopping.validate()?;
        self.spread.validate()
    }

    pub fn iterate_config(&self) -> Result<IterateConfig> {
        let layers = CausalLayerSet::new(self.edit.layers.clone(), self.model.n_layers)?;
        let o = &self.optimize;
        let optimize = OptimizeSpec {
            target_site: self.edit.algorithm.target_site(layers.last()),
            steps: o.steps,
            step_size: o.step_size,
            kl_weight: o.kl_weight,
            neighbor_weight: if self.edit.neighbor_assist {
                self.edit.neighbor_weight
            } else {
                0.0
            },
            neighbor_prefixed: o.neighbor_prefixed,
            early_stop: o.early_stop,
            clamp_norm: o.clamp_norm,
            include_bare: o.include_bare,
            seed: o.seed,
        };
        Ok(IterateConfig {
            algorithm: self.edit.algorithm,
            layers,
            optimize,
            spread: self.spread.clone(),
            stopping: self.stopping,
            mode: self.edit.mode,
            snapshots: self.edit.snapshots,
        })
    }

    /// `explicit`, then `output_dir`, then `$EDITLAB_OUT/<name>`, then `runs/<name>`.
    pub fn resolve_out(&self, explicit: Option<&Path>, name: &str) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn create_file(p: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = p.parent() {
        create_dir(dir)?;
    }
    fs::File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e))
}

fn flush(mut w: BufWriter<fs::File>, p: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(p, e))
}

fn write_string(p: &Path, s: &str) -> Result<()> {
    if let Some(dir) = p.parent() {
        create_dir(dir)?;
    }
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

/// The edit batch of one trial, before neighbor filtering.
pub fn trial_batch(world: &World, cfg: &RunConfig, seed: u64) -> Result<EditBatch> {
    let (batch, stats) = make_edit_batch(world, cfg.edit.batch_size, cfg.edit.prefixes, seed)?;
    if stats.shortfall > 0 {
        return Err(Error::Data(format!(
            "requested {} edits but only {} are eligible ({} facts excluded)",
            stats.requested, stats.selected, stats.excluded
        )));
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenDataReport {
    pub facts: usize,
    pub probes: usize,
    pub corpus_sequences: usize,
    pub vocab: usize,
    /// `(seed, requests)` per trial.
    pub batches: Vec<(u64, usize)>,
}

/// Writes `data/world.json`, `data/probes.txt` and `data/edits_seed<s>.jsonl`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataReport> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let data = out.join("data");
    write_string(&data.join("world.json"), &world.to_json()?)?;
    let probes: String = world
        .probe_utterances
        .iter()
        .map(|p| world.vocab.decode(p) + "\n")
        .collect();
    write_string(&data.join("probes.txt"), &probes)?;
    let mut batches = Vec::new();
    for &seed in &cfg.edit.trial_seeds {
        let batch = trial_batch(&world, cfg, seed)?;
        let path = data.join(format!("edits_seed{seed}.jsonl"));
        let mut w = create_file(&path)?;
        write_batch_jsonl(&mut w, &batch.requests, &world)?;
        flush(w, &path)?;
        batches.push((seed, batch.len()));
    }
    Ok(GenDataReport {
        facts: world.facts.len(),
        probes: world.probe_utterances.len(),
        corpus_sequences: world.pretrain_corpus.len(),
        vocab: world.vocab.len(),
        batches,
    })
}

/// Pretrains a fresh model and writes `checkpoints/pretrained.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(ToyLm, PretrainReport)> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    pretrain_into(cfg, &world, out)
}

fn pretrain_into(cfg: &RunConfig, world: &World, out: &Path) -> Result<(ToyLm, PretrainReport)> {
    let mut model = ToyLm::new(cfg.model.model_config(world))?;
    let report = pretrain_on_world(&mut model, world, &cfg.pretrain)?;
    let dir = out.join("checkpoints");
    save_checkpoint(&model, &dir.join(PRETRAINED))?;
    write_string(&dir.join("pretrain_report.json"), &serde_json::to_string_pretty(&report)?)?;
    info!("pretrained {} epochs, final NLL {:.4}", report.epochs_run, report.final_nll);
    Ok((model, report))
}

/// The configured checkpoint, else the run directory's, else (with `pretrain`) a new one.
pub fn base_model(cfg: &RunConfig, world: &World, out: &Path, pretrain: bool) -> Result<ToyLm> {
    let local = out.join("checkpoints").join(PRETRAINED);
    let model = match &cfg.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None if local.exists() => load_checkpoint(&local)?,
        None if pretrain => pretrain_into(cfg, world, out)?.0,
        None => {
            return Err(Error::config(format!(
                "no checkpoint at {}; set `checkpoint` or pass --pretrain",
                local.display()
            )))
        }
    };
    world.check_model(&model.config)?;
    if model.config.n_layers != cfg.model.n_layers {
        return Err(Error::config(format!(
            "checkpoint has {} layers, config says {}",
            model.config.n_layers, cfg.model.n_layers
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    pub baseline: MetricsReport,
    pub records: Vec<IterationRecord>,
    pub stop_k: usize,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub trials: Vec<TrialResult>,
    pub failures: Vec<(u64, Error)>,
}

impl RunSummary {
    /// 0 when every trial finished, 5 when only some did.
    pub fn exit_code(&self) -> i32 {
        match (self.trials.is_empty(), self.failures.first()) {
            (_, None) => 0,
            (true, Some((_, e))) => e.exit_code(),
            (false, Some(_)) => 5,
        }
    }
}

fn filtered_batch(model: &ToyLm, world: &World, cfg: &RunConfig, seed: u64) -> Result<EditBatch> {
    let batch = trial_batch(world, cfg, seed)?;
    let (batch, report) = filter_neighbors(model, &batch)?;
    info!(
        "trial {seed}: {} of {} evaluation neighbors removed, {} requests kept",
        report.neighbors_removed, report.neighbors_checked, report.requests_kept
    );
    if batch.is_empty() {
        return Err(Error::Data(format!("trial {seed}: every request lost its neighbors")));
    }
    Ok(batch)
}

fn run_trial(model: &ToyLm, world: &World, cfg: &RunConfig, it: &IterateConfig, out: &Path, seed: u64) -> Result<TrialResult> {
    let batch = filtered_batch(model, world, cfg, seed)?;
    let outcome = run_iterative(model, world, &batch, it)?;
    if outcome.records.iter().any(|r| r.sequential) {
        warn!("trial {seed}: {} applied edits one at a time", it.algorithm.name());
    }
    let rows = outcome.report_rows();
    let csv = out.join("reports").join(format!("trial_{seed}.csv"));
    let w = create_file(&csv)?;
    write_report_csv(w, &rows)?;
    let trace = out.join("traces").join(format!("trial_{seed}.jsonl"));
    let mut w = create_file(&trace)?;
    write_trace_jsonl(&mut w, &outcome.records)?;
    flush(w, &trace)?;
    for (k, snap) in &outcome.snapshots {
        save_checkpoint(snap, &out.join("checkpoints").join(format!("trial_{seed}_k{k}.ckpt")))?;
    }
    Ok(TrialResult {
        seed,
        baseline: outcome.baseline,
        records: outcome.records,
        stop_k: outcome.stop_k,
    })
}

fn prepare_run(cfg: &RunConfig, out: &Path, pretrain: bool) -> Result<(World, ToyLm)> {
    cfg.validate()?;
    for d in ["checkpoints", "traces", "reports"] {
        create_dir(&out.join(d))?;
    }
    write_string(&out.join("config.resolved"), &cfg.to_toml()?)?;
    let world = generate_world(&cfg.world)?;
    let model = base_model(cfg, &world, out, pretrain)?;
    Ok((world, model))
}

fn for_each_trial<T: Send>(cfg: &RunConfig, f: impl Fn(u64) -> Result<T> + Sync) -> (Vec<T>, Vec<(u64, Error)>) {
    let results: Vec<(u64, Result<T>)> = if cfg.edit.parallel_trials {
        cfg.edit.trial_seeds.par_iter().map(|&s| (s, f(s))).collect()
    } else {
        cfg.edit.trial_seeds.iter().map(|&s| (s, f(s))).collect()
    };
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => {
                error!("trial {seed} failed: {e}");
                failed.push((seed, e));
            }
        }
    }
    (ok, failed)
}

/// Edits every trial batch iteratively and writes traces, per-trial reports
/// and `reports/summary.csv`. A failing trial does not stop the others.
pub fn cmd_run(cfg: &RunConfig, out: &Path, pretrain: bool) -> Result<RunSummary> {
    let (world, model) = prepare_run(cfg, out, pretrain)?;
    let it = cfg.iterate_config()?;
    let (trials, failures) = for_each_trial(cfg, |seed| run_trial(&model, &world, cfg, &it, out, seed));
    if !trials.is_empty() {
        let traces: Vec<(u64, Vec<IterationRecord>)> = trials.iter().map(|t| (t.seed, t.records.clone())).collect();
        let path = out.join("reports").join("summary.csv");
        write_summary_csv(create_file(&path)?, &traces)?;
    }
    Ok(RunSummary {
        out: out.to_path_buf(),
        trials,
        failures,
    })
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "trial", "stop_k", "eff_acc", "eff_succ", "gen_acc", "gen_succ", "spec_acc", "spec_succ", "score_acc",
    "score_succ", "me_ppl", "gap", "collapsed", "sequential",
];

fn summary_values(r: &IterationRecord) -> [f64; 13] {
    let m = &r.metrics;
    [
        r.k as f64,
        m.efficacy_acc,
        m.efficacy_succ,
        m.generalization_acc,
        m.generalization_succ,
        m.specificity_acc,
        m.specificity_succ,
        m.score_acc,
        m.score_succ,
        m.collapse_ppl,
        r.gap,
        r.collapsed as u8 as f64,
        r.sequential as u8 as f64,
    ]
}

/// One row per trial at its selected iteration, then the trial mean.
pub fn write_summary_csv(out: impl Write, traces: &[(u64, Vec<IterationRecord>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(SUMMARY_HEADER).map_err(fmt)?;
    let mut sum = [0.0; 13];
    let mut n = 0;
    for (seed, records) in traces {
        let Some(r) = records.iter().find(|r| r.stop).or(records.last()) else {
            continue;
        };
        let v = summary_values(r);
        let mut row = vec![seed.to_string(), r.k.to_string()];
        row.extend(v[1..11].iter().map(|x| x.to_string()));
        row.push(r.collapsed.to_string());
        row.push(r.sequential.to_string());
        w.write_record(&row).map_err(fmt)?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    if n > 0 {
        let mut row = vec!["mean".to_string()];
        row.extend(sum.iter().map(|s| (s / n as f64).to_string()));
        w.write_record(&row).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_trace_jsonl(input: impl BufRead) -> Result<Vec<IterationRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Evaluates `checkpoint` (default: the base model) on the trial batch of `seed`.
/// Neighbors are filtered with the base model so edited weights are judged on
/// the same prompts as in `run`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, seed: u64) -> Result<MetricsReport> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let base = base_model(cfg, &world, out, false)?;
    let batch = filtered_batch(&base, &world, cfg, seed)?;
    let model = match checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            world.check_model(&m.config)?;
            m
        }
        None => base,
    };
    evaluate(&model, &batch.requests, &world.probe_utterances)
}

/// Writes one CSV row in the per-trial report layout with `k` left at 0.
pub fn write_eval_csv(out: impl Write, metrics: &MetricsReport) -> Result<()> {
    let row = ReportRow {
        k: 0,
        metrics: metrics.clone(),
        p_bar: None,
        p_hat: None,
        gap: None,
    };
    write_report_csv(out, &[row])
}

/// The three stopping rules with the config's iteration cap and `eps`.
pub fn all_policies(eps: f64, max_iterations: usize) -> Vec<StoppingPolicy> {
    [
        StopKind::GapBelowEps { eps },
        StopKind::MonotonicGap,
        StopKind::ConsecutiveSpreadGap { eps },
    ]
    .into_iter()
    .map(|kind| StoppingPolicy { kind, max_iterations })
    .collect()
}

/// Parses names such as `gap_below_eps,monotonic_gap`.
pub fn parse_policies(names: &str, eps: f64, max_iterations: usize) -> Result<Vec<StoppingPolicy>> {
    let all = all_policies(eps, max_iterations);
    names
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|n| {
            all.iter()
                .find(|p| p.kind.name() == n)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown stopping policy {n:?}")))
        })
        .collect()
}

pub fn stopping_header(policies: &[StoppingPolicy]) -> Vec<String> {
    let mut h = vec!["trial".to_string()];
    for p in policies {
        let n = p.kind.name();
        h.extend([format!("{n}_k"), format!("{n}_score_acc"), format!("{n}_score_succ")]);
    }
    h
}

/// Stop index, accuracy score and success score chosen by one policy.
pub type PolicyCell = (usize, f64, f64);

#[derive(Debug)]
pub struct SweepSummary {
    pub policies: Vec<StoppingPolicy>,
    /// `(seed, cells)`, one cell per policy.
    pub rows: Vec<(u64, Vec<PolicyCell>)>,
    pub failures: Vec<(u64, Error)>,
}

impl SweepSummary {
    pub fn exit_code(&self) -> i32 {
        match (self.rows.is_empty(), self.failures.first()) {
            (_, None) => 0,
            (true, Some((_, e))) => e.exit_code(),
            (false, Some(_)) => 5,
        }
    }
}

/// One trajectory per trial, scored under each policy; writes `reports/stopping.csv`.
pub fn cmd_sweep_stopping(cfg: &RunConfig, out: &Path, policies: &[StoppingPolicy], pretrain: bool) -> Result<SweepSummary> {
    if policies.is_empty() {
        return Err(Error::config("no stopping policies given"));
    }
    let (world, model) = prepare_run(cfg, out, pretrain)?;
    let it = cfg.iterate_config()?;
    let (rows, failures) = for_each_trial(cfg, |seed| {
        let batch = filtered_batch(&model, &world, cfg, seed)?;
        let cmp = compare_stopping(&model, &world, &batch, &it, policies)?;
        let trace = out.join("traces").join(format!("sweep_trial_{seed}.jsonl"));
        let mut w = create_file(&trace)?;
        write_trace_jsonl(&mut w, &cmp.records)?;
        flush(w, &trace)?;
        let cells: Vec<PolicyCell> = cmp
            .choices
            .iter()
            .map(|c| (c.k, c.metrics.score_acc, c.metrics.score_succ))
            .collect();
        Ok((seed, cells))
    });
    let path = out.join("reports").join("stopping.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(stopping_header(policies)).map_err(fmt)?;
    for (seed, cells) in &rows {
        let mut row = vec![seed.to_string()];
        for (k, a, s) in cells {
            row.extend([k.to_string(), a.to_string(), s.to_string()]);
        }
        w.write_record(&row).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(SweepSummary {
        policies: policies.to_vec(),
        rows,
        failures,
    })
}

/// Rebuilds `reports/summary.csv` from the traces of a finished run and
/// returns it as text.
pub fn cmd_report(run_dir: &Path) -> Result<String> {
    let dir = run_dir.join("traces");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut traces = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(seed) = name
            .strip_prefix("trial_")
            .and_then(|s| s.strip_suffix(".jsonl"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        traces.push((seed, read_trace_jsonl(BufReader::new(f))?));
    }
    if traces.is_empty() {
        return Err(Error::Data(format!("no trial traces under {}", dir.display())));
    }
    traces.sort_by_key(|(s, _)| *s);
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &traces)?;
    write_string(&run_dir.join("reports").join("summary.csv"), &String::from_utf8_lossy(&buf))?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
