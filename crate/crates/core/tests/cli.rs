use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use editlab::arrays::hash_hex;
use editlab::cli::*;
use editlab::iterate::{StopKind, StoppingPolicy};
use editlab::spread::Algorithm;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&p);
    p
}

/// Tiny config pointing at a checkpoint pretrained once per test binary.
fn tiny() -> RunConfig {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    let ckpt = CKPT.get_or_init(|| {
        let out = scratch("pretrain");
        cmd_pretrain(&RunConfig::from_toml(TINY).unwrap(), &out).unwrap();
        out.join("checkpoints").join("pretrained.ckpt")
    });
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.checkpoint = Some(ckpt.clone());
    cfg
}

fn dir_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), hash_hex(&fs::read(&p).unwrap()))
        })
        .collect();
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn gen_data_is_reproducible() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let (a, b) = (scratch("gen_a"), scratch("gen_b"));
    let ra = cmd_gen_data(&cfg, &a).unwrap();
    cmd_gen_data(&cfg, &b).unwrap();
    assert_eq!(ra.batches, vec![(1, 6), (2, 6)]);
    assert_eq!(dir_hashes(&a.join("data")), dir_hashes(&b.join("data")));
}

#[test]
fn oversized_batch_reports_shortfall() {
    let mut cfg = RunConfig::from_toml(TINY).unwrap();
    cfg.edit.batch_size = 30;
    let e = cmd_gen_data(&cfg, &scratch("short")).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("only"), "{e}");
}

#[test]
fn reference_data_counts() {
    let r = cmd_gen_data(&RunConfig::default(), &scratch("reference")).unwrap();
    assert_eq!(r.facts, 200);
    assert_eq!(r.probes, 50);
    assert!(r.batches.iter().all(|&(_, n)| n == 50));
}

#[test]
fn run_directory_layout_and_single_iteration() {
    let mut cfg = tiny();
    cfg.stopping.max_iterations = 1;
    let out = scratch("single");
    let s = cmd_run(&cfg, &out, false).unwrap();
    assert_eq!(s.exit_code(), 0);
    for d in ["checkpoints", "traces", "reports"] {
        assert!(out.join(d).is_dir());
    }
    let resolved = RunConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(resolved, cfg);
    let rows = csv_rows(&out.join("reports").join("summary.csv"));
    assert_eq!(rows[0], SUMMARY_HEADER);
    let trials: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(trials, ["1", "2", "mean"]);
    assert!(rows[1..].iter().all(|r| r[1] == "1"));
    for seed in [1, 2] {
        let trial = csv_rows(&out.join("reports").join(format!("trial_{seed}.csv")));
        assert_eq!(trial.len(), 3, "header, baseline and k=1");
        let trace = fs::read_to_string(out.join("traces").join(format!("trial_{seed}.jsonl"))).unwrap();
        assert_eq!(trace.lines().count(), 1);
    }
    // The report command rebuilds the same summary from the traces.
    let before = fs::read(out.join("reports").join("summary.csv")).unwrap();
    let text = cmd_report(&out).unwrap();
    assert_eq!(text.as_bytes(), before.as_slice());
}

#[test]
fn sequential_algorithms_are_flagged() {
    let mut cfg = tiny();
    cfg.edit.algorithm = Algorithm::Rome;
    cfg.edit.layers = vec![1];
    cfg.edit.trial_seeds = vec![1];
    cfg.stopping.max_iterations = 2;
    let out = scratch("rome");
    let s = cmd_run(&cfg, &out, false).unwrap();
    assert!(s.trials[0].records.iter().all(|r| r.sequential));
    let rows = csv_rows(&out.join("reports").join("summary.csv"));
    assert_eq!(rows[1][13], "true");
}

#[test]
fn parallel_trials_match_serial() {
    let cfg = tiny();
    let serial = scratch("serial");
    cmd_run(&cfg, &serial, false).unwrap();
    let mut par = cfg.clone();
    par.edit.parallel_trials = true;
    let parallel = scratch("parallel");
    cmd_run(&par, &parallel, false).unwrap();
    assert_eq!(dir_hashes(&serial.join("reports")), dir_hashes(&parallel.join("reports")));
    assert_eq!(dir_hashes(&serial.join("traces")), dir_hashes(&parallel.join("traces")));
}

#[test]
fn sweep_table_schema() {
    let mut cfg = tiny();
    cfg.stopping.max_iterations = 3;
    let out = scratch("sweep");
    let all = all_policies(1.0, 3);
    cmd_sweep_stopping(&cfg, &out, &all, false).unwrap();
    let rows = csv_rows(&out.join("reports").join("stopping.csv"));
    let golden = "trial,gap_below_eps_k,gap_below_eps_score_acc,gap_below_eps_score_succ,\
monotonic_gap_k,monotonic_gap_score_acc,monotonic_gap_score_succ,\
consecutive_spread_gap_k,consecutive_spread_gap_score_acc,consecutive_spread_gap_score_succ";
    assert_eq!(rows[0].join(","), golden);
    assert_eq!(rows.len(), 3);

    let one = [StoppingPolicy {
        kind: StopKind::GapBelowEps { eps: f64::INFINITY },
        max_iterations: 3,
    }];
    cmd_sweep_stopping(&cfg, &out, &one, false).unwrap();
    let rows = csv_rows(&out.join("reports").join("stopping.csv"));
    assert_eq!(rows[0].len(), 4);
    assert!(rows[1..].iter().all(|r| r[1] == "1"));
}

#[test]
fn cli_flags_override_the_file_and_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_editlab");
    let dir = scratch("bin");
    fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("tiny.toml");
    fs::write(&cfg_path, tiny().to_toml().unwrap()).unwrap();
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("RUST_LOG", "off")
            .env(OUT_ENV, &dir)
            .output()
            .unwrap()
    };
    let c = cfg_path.to_str().unwrap();
    let o = run(&["run", "-c", c, "--max-iterations", "1", "--seeds", "2", "--neighbor-assist"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = RunConfig::load(&dir.join("tiny").join("config.resolved")).unwrap();
    assert_eq!(resolved.stopping.max_iterations, 1);
    assert_eq!(resolved.edit.trial_seeds, [2]);
    assert!(resolved.edit.neighbor_assist);

    assert_eq!(run(&["run", "-c", c, "--layers", "0,9"]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "-c", c, "--batch-size", "30"]).status.code(), Some(3));
    fs::write(dir.join("broken.toml"), "[edit]\nalgorithm = \"nope\"\n").unwrap();
    assert_eq!(run(&["run", "-c", dir.join("broken.toml").to_str().unwrap()]).status.code(), Some(2));
    let o = run(&["eval", "-c", c, "--seed", "1"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("k,eff_acc"));
}

#[test]
fn eval_matches_the_run_baseline() {
    let cfg = tiny();
    let out = scratch("eval");
    let s = cmd_run(&cfg, &out, false).unwrap();
    let m = cmd_eval(&cfg, &out, None, 1).unwrap();
    assert_eq!(m, s.trials[0].baseline);
}
