mod common;

use std::sync::OnceLock;

use editlab::factworld::{EditBatch, World};
use editlab::iterate::*;
use editlab::optimize::{find_targets_batch, EarlyStop, OptimizeSpec};
use editlab::spread::{apply_edit, Algorithm, CausalLayerSet, SpreadConfig, SpreadContext, TargetMode};
use editlab::toylm::{PatchSpec, ToyLm};

struct Fixture {
    world: World,
    model: ToyLm,
    batch: EditBatch,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = common::tiny_world();
        let model = common::tiny_model(&world, 60);
        let batch = common::tiny_batch(&world, &model, 6, 2);
        assert!(batch.len() >= 3, "fixture batch too small: {}", batch.len());
        Fixture { world, model, batch }
    })
}

fn config(max_iterations: usize) -> IterateConfig {
    let f = fixture();
    let layers = CausalLayerSet::new(vec![0, 1], f.model.config.n_layers).unwrap();
    let mut optimize = OptimizeSpec::new(Algorithm::Memit.target_site(1));
    optimize.steps = 30;
    optimize.early_stop = EarlyStop::Mpes;
    IterateConfig {
        algorithm: Algorithm::Memit,
        layers,
        optimize,
        spread: SpreadConfig {
            average_keys: true,
            ..SpreadConfig::default()
        },
        stopping: StoppingPolicy {
            kind: StopKind::GapBelowEps { eps: 1.0 },
            max_iterations,
        },
        mode: IterateMode::Full,
        snapshots: SnapshotRetention::None,
    }
}

fn policy(kind: StopKind) -> StoppingPolicy {
    StoppingPolicy::new(kind)
}

#[test]
fn perplexity_of_known_probabilities() {
    assert_eq!(perplexity_from_probs(&[1.0, 1.0]), 1.0);
    assert_eq!(perplexity_from_probs(&[0.5, 0.25]), 3.0);
    assert_eq!(perplexity_from_probs(&[0.0]), 1.0 / PROB_FLOOR);
}

#[test]
fn target_perplexity_matches_per_request_loop() {
    let f = fixture();
    let cfg = config(1);
    let targets = find_targets_batch(&f.model, &f.batch, &cfg.optimize).unwrap().targets;
    let mut plain = Vec::new();
    let mut patched = Vec::new();
    for r in &f.batch.requests {
        let p = r.edit_prompt(&[]);
        plain.push(f.model.next_token_probs(&p.tokens).unwrap()[r.new_object]);
        let t = targets.iter().find(|t| t.request_id == r.id).unwrap();
        let spec = PatchSpec {
            site: t.site.patch_sites()[0],
            layer: t.site.layer(),
            position: t.position,
            delta: t.spread_delta().clone(),
        };
        let (logits, _) = f.model.forward_patched(&p.tokens, &spec).unwrap();
        let row: Vec<f64> = logits.row(p.tokens.len() - 1).iter().copied().collect();
        patched.push(editlab::toylm::loss::softmax(&row)[r.new_object]);
    }
    let naive = |ps: &[f64]| ps.iter().map(|p| 1.0 / p).sum::<f64>() / ps.len() as f64;
    let a = target_perplexity(&f.model, &f.batch.requests, None).unwrap();
    let b = target_perplexity(&f.model, &f.batch.requests, Some(&targets)).unwrap();
    assert!((a - naive(&plain)).abs() <= 1e-10 * a);
    assert!((b - naive(&patched)).abs() <= 1e-10 * b);
    assert!(b < a, "the delta should make o* more likely");
}

#[test]
fn paper_gap_sequences_replay() {
    let gap = policy(StopKind::GapBelowEps { eps: 1.0 });
    let mono = policy(StopKind::MonotonicGap);
    let cons = policy(StopKind::ConsecutiveSpreadGap { eps: 1.0 });
    let d = |v: &[f64]| {
        let mut out = vec![None];
        out.extend(v.iter().map(|&x| Some(x)));
        out
    };
    let none: Vec<Option<f64>> = vec![];

    let g = [11359.60, 77.12, 9.11, 0.47];
    assert_eq!(gap.triggered(&g, &none), Some(4));
    assert_eq!(gap.triggered(&g[..1], &none), None);
    assert_eq!(cons.triggered(&[], &d(&[1.13e4, 68.01, 8.65])), None);

    assert_eq!(gap.triggered(&[2034.31, 39.39, 0.03, 0.01], &none), Some(3));
    assert_eq!(cons.triggered(&[], &d(&[1994.93, 39.36, 0.02])), Some(4));

    let g = [1.15, 4.23, 0.05, 0.02];
    assert_eq!(mono.triggered(&g, &none), Some(1));
    assert_eq!(gap.triggered(&g, &none), Some(3));
    assert_eq!(cons.triggered(&[], &d(&[3.05, 4.18, 0.03])), Some(4));

    let g = [111052.45, 3094.74, 489.28, 48.69, 1.45, 0.19];
    assert_eq!(gap.triggered(&g, &none), Some(6));
    assert_eq!(mono.triggered(&g, &none), None);
    let dp = d(&[113317.73, 2618.47, 441.40, 47.33, 1.29, 0.11]);
    assert_eq!(cons.triggered(&[], &dp), Some(7));

    assert_eq!(gap.triggered(&[3.32, 0.09, 0.16, 0.00], &none), Some(2));
    assert_eq!(mono.triggered(&[3.32, 0.09, 0.16, 0.00], &none), Some(2));
    assert_eq!(cons.triggered(&[], &d(&[3.18, 0.07])), Some(3));
}

#[test]
fn choose_applies_the_iteration_cap() {
    let p = StoppingPolicy {
        kind: StopKind::GapBelowEps { eps: 1.0 },
        max_iterations: 2,
    };
    assert_eq!(p.choose(&[5.0, 4.0, 0.5], &[None, Some(1.0), Some(3.5)]), 2);
    assert_eq!(policy(StopKind::GapBelowEps { eps: 1.0 }).choose(&[5.0, 4.0], &[None, Some(1.0)]), 2);
    let inf = policy(StopKind::ConsecutiveSpreadGap { eps: f64::INFINITY });
    assert_eq!(inf.choose(&[5.0, 4.0, 3.0], &[None, Some(1.0), Some(1.0)]), 2);
}

#[test]
fn consecutive_gaps_skip_the_first_iteration() {
    assert_eq!(consecutive_gaps(&[]), vec![]);
    assert_eq!(consecutive_gaps(&[4.0]), vec![None]);
    assert_eq!(consecutive_gaps(&[4.0, 1.5, 2.0]), vec![None, Some(2.5), Some(0.5)]);
}

#[test]
fn invalid_policies_are_rejected() {
    assert!(policy(StopKind::GapBelowEps { eps: 0.0 }).validate().is_err());
    assert!(policy(StopKind::ConsecutiveSpreadGap { eps: -1.0 }).validate().is_err());
    let p = StoppingPolicy {
        kind: StopKind::MonotonicGap,
        max_iterations: 0,
    };
    assert!(p.validate().is_err());
    assert!(policy(StopKind::MonotonicGap).validate().is_ok());
}

#[test]
fn huge_eps_runs_one_iteration() {
    let f = fixture();
    let mut cfg = config(10);
    cfg.stopping.kind = StopKind::GapBelowEps { eps: 1e12 };
    let out = run_iterative(&f.model, &f.world, &f.batch, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.stop_k, 1);
    assert!(out.records[0].stop);
}

#[test]
fn single_iteration_equals_one_edit() {
    let f = fixture();
    let cfg = config(1);
    let out = run_iterative(&f.model, &f.world, &f.batch, &cfg).unwrap();
    let targets = find_targets_batch(&f.model, &f.batch, &cfg.optimize).unwrap().targets;
    let ctx = SpreadContext::build(&f.model, &f.world, &f.batch.requests, &cfg.layers, &cfg.spread).unwrap();
    let (once, _) = apply_edit(
        &f.model,
        &f.batch.requests,
        &targets,
        cfg.algorithm,
        &cfg.layers,
        &ctx,
        TargetMode::Absolute,
        &f.batch.prefix_pool,
        None,
    )
    .unwrap();
    assert_eq!(out.model, once);
    let r = &out.records[0];
    assert_eq!(r.gap, (r.p_hat - r.p_bar).abs());
    assert_eq!(r.dp2, None);
    assert!(r.p_bar > 0.0 && r.p_hat > 0.0);
}

#[test]
fn trace_rows_are_consistent_and_snapshots_match() {
    let f = fixture();
    let mut cfg = config(4);
    cfg.stopping.kind = StopKind::MonotonicGap;
    cfg.snapshots = SnapshotRetention::All;
    let out = run_iterative(&f.model, &f.world, &f.batch, &cfg).unwrap();
    assert_eq!(out.snapshots.len(), out.records.len());
    assert_eq!(out.model, out.snapshots[out.stop_k - 1].1);
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.k, i + 1);
        assert!((r.gap - (r.p_hat - r.p_bar).abs()).abs() <= 1e-12);
        assert_eq!(r.stop, r.k == out.stop_k);
        if i > 0 {
            assert_eq!(r.dp2, Some((r.p_hat - out.records[i - 1].p_hat).abs()));
        }
    }
    let rows = out.report_rows();
    assert_eq!(rows.len(), out.records.len() + 1);
    assert_eq!(rows[0].k, 0);
    assert!(rows[0].gap.is_none());

    cfg.snapshots = SnapshotRetention::Last;
    let last = run_iterative(&f.model, &f.world, &f.batch, &cfg).unwrap();
    assert_eq!(last.snapshots.len(), 1);
    assert_eq!(last.snapshots[0], (last.stop_k, last.model.clone()));
    assert_eq!(last.records, out.records);
}

#[test]
fn spread_only_reuses_first_targets() {
    let f = fixture();
    let mut cfg = config(3);
    cfg.mode = IterateMode::SpreadOnly;
    cfg.stopping.kind = StopKind::GapBelowEps { eps: 1e-300 };
    let out = run_iterative(&f.model, &f.world, &f.batch, &cfg).unwrap();
    assert_eq!(out.records.len(), 3);
    let n0 = out.records[0].mean_delta_norm;
    assert!(out.records.iter().all(|r| r.mean_delta_norm == n0));
    let full = run_iterative(&f.model, &f.world, &f.batch, &config(1)).unwrap();
    let mut first = out.records[0].clone();
    first.stop = true;
    assert_eq!(full.records[0], first);
}

#[test]
fn compare_stopping_scores_one_trajectory() {
    let f = fixture();
    let cfg = config(3);
    let cap = |kind| StoppingPolicy { kind, max_iterations: 3 };
    let policies = [
        cap(StopKind::GapBelowEps { eps: 1.0 }),
        cap(StopKind::GapBelowEps { eps: 1.0 }),
        cap(StopKind::MonotonicGap),
        cap(StopKind::ConsecutiveSpreadGap { eps: 1.0 }),
        cap(StopKind::GapBelowEps { eps: f64::INFINITY }),
    ];
    let cmp = compare_stopping(&f.model, &f.world, &f.batch, &cfg, &policies).unwrap();
    assert_eq!(cmp.records.len(), 3);
    assert_eq!(cmp.choices[0].k, cmp.choices[1].k);
    assert_eq!(cmp.choices[4].k, 1);
    for c in &cmp.choices {
        assert_eq!(c.metrics, cmp.records[c.k - 1].metrics);
    }
    // The online run with the same rule lands on the same row.
    let mut online = cfg.clone();
    online.stopping = policies[2];
    let run = run_iterative(&f.model, &f.world, &f.batch, &online).unwrap();
    assert_eq!(run.stop_k, cmp.choices[2].k);
    assert!(compare_stopping(&f.model, &f.world, &f.batch, &cfg, &[]).is_err());
}

#[test]
fn trace_jsonl_has_one_line_per_iteration() {
    let f = fixture();
    let out = run_iterative(&f.model, &f.world, &f.batch, &config(2)).unwrap();
    let mut buf = Vec::new();
    write_trace_jsonl(&mut buf, &out.records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<IterationRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, out.records);
}
