use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use editlab::cli::{self, RunConfig};
use editlab::iterate::{IterateMode, SnapshotRetention, StopKind};
use editlab::spread::Algorithm;
use editlab::{Error, Result};

#[derive(Parser)]
#[command(name = "editlab", version, about = "Iterative locate-and-edit experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world, probe utterances and edit batches.
    GenData(Common),
    /// Pretrain a model on the world corpus.
    Pretrain(Common),
    /// Run iterative editing for every trial seed.
    Run(RunArgs),
    /// Evaluate a checkpoint on one trial batch.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weights to score; defaults to the pretrained model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Trial seed selecting the batch; defaults to the first configured one.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score several stopping rules on one trajectory per trial.
    SweepStopping {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated: gap_below_eps, monotonic_gap, consecutive_spread_gap.
        #[arg(long, default_value = "gap_below_eps,monotonic_gap,consecutive_spread_gap")]
        policies: String,
    },
    /// Rebuild and print the summary of a finished run.
    Report {
        /// Run directory.
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; omitted sections take the reference defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` and $EDITLAB_OUT).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Number of edits per trial.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated trial seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Pretrained checkpoint to edit.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pretrain when no checkpoint is found.
    #[arg(long)]
    pretrain: bool,
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algorithm>,
    /// Comma-separated causal layers.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Threshold for the gap rules.
    #[arg(long)]
    eps: Option<f64>,
    /// on | off
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    neighbor_assist: Option<bool>,
    #[arg(long)]
    neighbor_weight: Option<f64>,
    /// full | spread-only
    #[arg(long, value_parser = parse_mode)]
    mode: Option<IterateMode>,
    /// none | last | all
    #[arg(long, value_parser = parse_snapshots)]
    snapshots: Option<SnapshotRetention>,
    /// Run trials concurrently.
    #[arg(long)]
    parallel_trials: bool,
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    Algorithm::ALL
        .into_iter()
        .find(|a| a.name() == s.to_ascii_lowercase())
        .ok_or_else(|| {
            let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            format!("expected one of {}", names.join(", "))
        })
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

fn parse_mode(s: &str) -> std::result::Result<IterateMode, String> {
    match s {
        "full" => Ok(IterateMode::Full),
        "spread-only" | "spread_only" => Ok(IterateMode::SpreadOnly),
        _ => Err("expected full or spread-only".into()),
    }
}

fn parse_snapshots(s: &str) -> std::result::Result<SnapshotRetention, String> {
    match s {
        "none" => Ok(SnapshotRetention::None),
        "last" => Ok(SnapshotRetention::Last),
        "all" => Ok(SnapshotRetention::All),
        _ => Err("expected none, last or all".into()),
    }
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.batch_size {
            cfg.edit.batch_size = m;
        }
        if let Some(s) = &self.seeds {
            cfg.edit.trial_seeds = s.clone();
        }
        let name = self
            .config
            .as_deref()
            .and_then(Path::file_stem)
            .and_then(|s| s.to_str())
            .unwrap_or("default");
        let out = cfg.resolve_out(self.out.as_deref(), name);
        Ok((cfg, out))
    }
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let (mut cfg, out) = self.common.load()?;
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(a) = self.algo {
            cfg.edit.algorithm = a;
        }
        if let Some(l) = &self.layers {
            cfg.edit.layers = l.clone();
        }
        if let Some(n) = self.max_iterations {
            cfg.stopping.max_iterations = n;
        }
        if let Some(e) = self.eps {
            match &mut cfg.stopping.kind {
                StopKind::GapBelowEps { eps } | StopKind::ConsecutiveSpreadGap { eps } => *eps = e,
                StopKind::MonotonicGap => return Err(Error::config("--eps has no effect with monotonic_gap")),
            }
        }
        if let Some(b) = self.neighbor_assist {
            cfg.edit.neighbor_assist = b;
        }
        if let Some(w) = self.neighbor_weight {
            cfg.edit.neighbor_weight = w;
        }
        if let Some(m) = self.mode {
            cfg.edit.mode = m;
        }
        if let Some(s) = self.snapshots {
            cfg.edit.snapshots = s;
        }
        if self.parallel_trials {
            cfg.edit.parallel_trials = true;
        }
        Ok((cfg, out))
    }

    fn eps(&self, cfg: &RunConfig) -> f64 {
        match (self.eps, cfg.stopping.kind) {
            (Some(e), _) => e,
            (None, StopKind::GapBelowEps { eps } | StopKind::ConsecutiveSpreadGap { eps }) => eps,
            (None, StopKind::MonotonicGap) => 1.0,
        }
    }
}

fn report_failures(failures: &[(u64, Error)]) {
    for (seed, e) in failures {
        eprintln!("trial {seed} failed: {e}");
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(c) => {
            let (cfg, out) = c.load()?;
            let r = cli::cmd_gen_data(&cfg, &out)?;
            println!(
                "{} facts, {} probes, {} corpus sequences, vocabulary {}",
                r.facts, r.probes, r.corpus_sequences, r.vocab
            );
            for (seed, n) in r.batches {
                println!("seed {seed}: {n} edit requests");
            }
            println!("wrote {}", out.join("data").display());
            Ok(0)
        }
        Command::Pretrain(c) => {
            let (cfg, out) = c.load()?;
            let (_, r) = cli::cmd_pretrain(&cfg, &out)?;
            println!("{} epochs, final NLL {:.4}", r.epochs_run, r.final_nll);
            println!("wrote {}", out.join("checkpoints").display());
            Ok(0)
        }
        Command::Run(a) => {
            let (cfg, out) = a.load()?;
            let s = cli::cmd_run(&cfg, &out, a.pretrain)?;
            for t in &s.trials {
                let r = &t.records[t.stop_k - 1];
                println!(
                    "trial {}: stop k={} eff_acc {:.3} spec_acc {:.3} score_acc {:.3} gap {:.3}",
                    t.seed, t.stop_k, r.metrics.efficacy_acc, r.metrics.specificity_acc, r.metrics.score_acc, r.gap
                );
            }
            report_failures(&s.failures);
            println!("wrote {}", s.out.display());
            Ok(s.exit_code())
        }
        Command::Eval { common, model, seed } => {
            let (cfg, out) = common.load()?;
            let seed = seed.unwrap_or(cfg.edit.trial_seeds[0]);
            let m = cli::cmd_eval(&cfg, &out, model.as_deref(), seed)?;
            cli::write_eval_csv(std::io::stdout().lock(), &m)?;
            Ok(0)
        }
        Command::SweepStopping { run, policies } => {
            let (cfg, out) = run.load()?;
            let policies = cli::parse_policies(&policies, run.eps(&cfg), cfg.stopping.max_iterations)?;
            let s = cli::cmd_sweep_stopping(&cfg, &out, &policies, run.pretrain)?;
            let text = std::fs::read_to_string(out.join("reports").join("stopping.csv"))
                .map_err(|e| Error::io(out.join("reports"), e))?;
            print!("{text}");
            report_failures(&s.failures);
            Ok(s.exit_code())
        }
        Command::Report { dir } => {
            print!("{}", cli::cmd_report(&dir)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    let code = match execute(args.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
