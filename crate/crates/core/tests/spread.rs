mod common;

use std::sync::OnceLock;

use editlab::factworld::{EditBatch, World};
use editlab::optimize::{find_targets_batch, DeltaTarget, EarlyStop, OptimizeSpec};
use editlab::spread::linalg::{null_space_projector, psd_sqrt};
use editlab::spread::*;
use editlab::toylm::ToyLm;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const OPTS: SolveOptions = SolveOptions { pinv_fallback: true };
const STRICT: SolveOptions = SolveOptions { pinv_fallback: false };

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = randn(rng, n, n);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

struct Instance {
    w: DMatrix<f64>,
    kv: KvSet,
    c: DMatrix<f64>,
}

fn instance(rng: &mut ChaCha8Rng, d_out: usize, d_key: usize, m: usize) -> Instance {
    let w = randn(rng, d_out, d_key);
    let kv = KvSet::new(&w, randn(rng, d_key, m), randn(rng, d_out, m)).unwrap();
    Instance {
        c: rand_spd(rng, d_key),
        w,
        kv,
    }
}

fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().pseudo_inverse(1e-12).unwrap()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

// Solver algebra.

#[test]
fn memit_exact_fit_without_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = randn(&mut rng, 3, 4);
    let kv = KvSet::new(&w, DMatrix::identity(4, 4), randn(&mut rng, 3, 4)).unwrap();
    let d = solve_memit(&kv, &DMatrix::zeros(4, 4), OPTS).unwrap();
    assert!((&d - &kv.r).norm() < 1e-12);
}

#[test]
fn memit_single_key_identity_cov_halves_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = randn(&mut rng, 3, 2);
    let k = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let v = randn(&mut rng, 3, 1);
    let kv = KvSet::new(&w, k.clone(), v.clone()).unwrap();
    let d = solve_memit(&kv, &DMatrix::identity(2, 2), OPTS).unwrap();
    let after = (&w + d) * &k - &v;
    assert!((after + &kv.r * 0.5).norm() < 1e-12);
}

#[test]
fn memit_matches_tikhonov_least_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = instance(&mut rng, 8, 8, 5);
    let d = solve_memit(&inst.kv, &inst.c, OPTS).unwrap();
    // min ‖ΔK − R‖² + ‖Δ C^{1/2}‖² as one stacked least-squares problem.
    let a = DMatrix::from_fn(8, 13, |i, j| if j < 5 { inst.kv.k[(i, j)] } else { psd_sqrt(&inst.c)[(i, j - 5)] });
    let b = DMatrix::from_fn(8, 13, |i, j| if j < 5 { inst.kv.r[(i, j)] } else { 0.0 });
    let oracle = b * pinv(&a);
    assert!((&d - &oracle).norm() < 1e-8 * oracle.norm().max(1.0));
}

#[test]
fn singular_system_without_fallback_is_numeric_error() {
    let w = DMatrix::zeros(2, 3);
    let k = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    let kv = KvSet::new(&w, k, DMatrix::from_element(2, 1, 1.0)).unwrap();
    let c = DMatrix::zeros(3, 3);
    assert!(matches!(solve_memit(&kv, &c, STRICT), Err(editlab::Error::Numeric(_))));
    let d = solve_memit(&kv, &c, OPTS).unwrap();
    assert!((d * &kv.k - &kv.r).norm() < 1e-10);
}

#[test]
fn rome_identity_case_and_no_op() {
    let w = DMatrix::identity(3, 3);
    let k = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
    let v = DVector::from_column_slice(&[2.0, 0.0, 0.0]);
    let c = DMatrix::identity(3, 3);
    let wh = solve_rome(&w, &k, &v, &c, OPTS).unwrap();
    let mut want = DMatrix::identity(3, 3);
    want[(0, 0)] = 2.0;
    assert_eq!(wh, want);
    assert_eq!(&wh * &k, v);
    let same = solve_rome(&w, &k, &(&w * &k), &c, OPTS).unwrap();
    assert_eq!(same, w);
    assert!(matches!(
        solve_rome(&w, &DVector::zeros(3), &v, &c, OPTS),
        Err(editlab::Error::Input(_))
    ));
}

#[test]
fn rome_is_the_weighted_minimum_norm_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = randn(&mut rng, 8, 8);
    let c = rand_spd(&mut rng, 8);
    let k = randn(&mut rng, 8, 1).column(0).into_owned();
    let v = randn(&mut rng, 8, 1).column(0).into_owned();
    let wh = solve_rome(&w, &k, &v, &c, OPTS).unwrap();
    // Lagrangian: with X = Δ C^{1/2}, minimize ‖X‖ subject to X (C^{-1/2} k) = r.
    let s = psd_sqrt(&c);
    let si = pinv(&s);
    let u = &si * &k;
    let r = &v - &w * &k;
    let x = &r * u.transpose() / u.norm_squared();
    let oracle = &w + x * &si;
    assert!(rel(&wh, &oracle) < 1e-9);
    let cost = |m: &DMatrix<f64>| ((m - &w) * &s).norm();
    // Any other feasible update costs more.
    for _ in 0..5 {
        let e = randn(&mut rng, 8, 8);
        let proj = &e - (&e * &k) * (&c.clone().try_inverse().unwrap() * &k).transpose() / k.dot(&(c.clone().try_inverse().unwrap() * &k));
        let alt = &wh + proj * 1e-3;
        assert!(((&alt * &k) - &v).norm() < 1e-9);
        assert!(cost(&alt) > cost(&wh));
    }
}

#[test]
fn alphaedit_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = randn(&mut rng, 3, 3);
    let kv = KvSet::new(&w, randn(&mut rng, 3, 2), randn(&mut rng, 3, 2)).unwrap();
    let d = solve_alphaedit(&kv, &DMatrix::identity(3, 3), &randn(&mut rng, 3, 5), 1.0, OPTS).unwrap();
    assert!(d.norm() < 1e-12, "full-rank K_E leaves no room");

    let w = DMatrix::zeros(2, 2);
    let k = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let v = DMatrix::from_column_slice(2, 1, &[3.0, -1.0]);
    let kv = KvSet::new(&w, k, v.clone()).unwrap();
    let ke = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let d = solve_alphaedit(&kv, &DMatrix::zeros(2, 2), &ke, 1e-9, OPTS).unwrap();
    let want = DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 3.0, -1.0]);
    assert!((&d - &want).norm() < 1e-6);
    assert_eq!((&d * &ke).norm(), 0.0);
}

#[test]
fn emmet_hand_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = randn(&mut rng, 4, 4);
    let v = randn(&mut rng, 4, 4);
    let kv = KvSet::new(&w, DMatrix::identity(4, 4), v.clone()).unwrap();
    let wh = solve_emmet(&w, &kv, &DMatrix::identity(4, 4), OPTS).unwrap();
    assert!((&wh - &v).norm() < 1e-12);

    let inst = instance(&mut rng, 6, 6, 1);
    let wh = solve_emmet(&inst.w, &inst.kv, &inst.c, OPTS).unwrap();
    let k = inst.kv.k.column(0).into_owned();
    let v = inst.kv.v.column(0).into_owned();
    let rome = solve_rome(&inst.w, &k, &v, &inst.c, OPTS).unwrap();
    assert!((&wh - &rome).norm() < 1e-10 * rome.norm());

    let k = DMatrix::from_fn(4, 2, |i, _| (i + 1) as f64);
    let kv = KvSet::new(&w, k, randn(&mut rng, 4, 2)).unwrap();
    match solve_emmet(&w, &kv, &DMatrix::identity(4, 4), OPTS) {
        Err(editlab::Error::Numeric(msg)) => assert!(msg.contains("[1]"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn encore_reductions_and_ridge_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = instance(&mut rng, 5, 8, 8);
    let k0 = randn(&mut rng, 8, 6);
    let e = solve_encore(&inst.kv, &k0, 0.0, 0.0, OPTS).unwrap();
    let m = solve_memit(&inst.kv, &DMatrix::zeros(8, 8), OPTS).unwrap();
    assert!((&e - &m).norm() < 1e-9 * m.norm());
    let inst = instance(&mut rng, 4, 4, 2);
    let tiny = solve_encore(&inst.kv, &k0.rows(0, 4).into_owned(), 1.0, 1e12, OPTS).unwrap();
    assert!(tiny.norm() < 1e-6);
    assert!(matches!(
        solve_encore(&inst.kv, &k0.rows(0, 4).into_owned(), -1.0, 1.0, OPTS),
        Err(editlab::Error::Input(_))
    ));
    let norms: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&n| solve_encore(&inst.kv, &k0.rows(0, 4).into_owned(), 1.0, n, OPTS).unwrap().norm())
        .collect();
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
}

#[test]
fn solvers_are_scale_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = instance(&mut rng, 5, 6, 3);
    let ke = randn(&mut rng, 6, 2);
    let k0 = randn(&mut rng, 6, 4);
    let scaled = KvSet::new(&inst.w, inst.kv.k.clone(), &inst.w * &inst.kv.k + &inst.kv.r * 2.5).unwrap();
    for (a, b) in [
        (solve_memit(&inst.kv, &inst.c, OPTS), solve_memit(&scaled, &inst.c, OPTS)),
        (
            solve_alphaedit(&inst.kv, &inst.c, &ke, 1.0, OPTS),
            solve_alphaedit(&scaled, &inst.c, &ke, 1.0, OPTS),
        ),
        (
            solve_encore(&inst.kv, &k0, 2.0, 1.0, OPTS),
            solve_encore(&scaled, &k0, 2.0, 1.0, OPTS),
        ),
    ] {
        let (a, b) = (a.unwrap(), b.unwrap());
        assert!((a * 2.5 - &b).norm() < 1e-10 * b.norm());
    }
}

#[test]
fn random_instance_properties_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let inst = instance(&mut rng, 8, 10, 4);
        // ROME and R-ROME (averaged key) hit their constraint.
        let k = inst.kv.k.column(0).into_owned();
        let v = inst.kv.v.column(0).into_owned();
        let wh = solve_rome(&inst.w, &k, &v, &inst.c, OPTS).unwrap();
        assert!((&wh * &k - &v).norm() <= 1e-8 * v.norm());
        let kbar = inst.kv.k.column_mean();
        let wh = solve_rome(&inst.w, &kbar, &v, &inst.c, OPTS).unwrap();
        assert!((&wh * &kbar - &v).norm() <= 1e-8 * v.norm());

        let wh = solve_emmet(&inst.w, &inst.kv, &inst.c, OPTS).unwrap();
        assert!((&wh * &inst.kv.k - &inst.kv.v).norm() <= 1e-8 * inst.kv.v.norm());

        let ke = randn(&mut rng, 10, 3);
        let d = solve_alphaedit(&inst.kv, &inst.c, &ke, 1.0, OPTS).unwrap();
        assert!((&d * &ke).amax() <= 1e-12);

        let d = solve_memit(&inst.kv, &inst.c, OPTS).unwrap();
        let s = psd_sqrt(&inst.c);
        let obj = |d: &DMatrix<f64>| (d * &inst.kv.k - &inst.kv.r).norm_squared() + (d * &s).norm_squared();
        assert!(obj(&d) <= obj(&DMatrix::zeros(8, 10)) + 1e-9);

        let k0 = randn(&mut rng, 10, 5);
        let mut last = f64::INFINITY;
        for n in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let norm = solve_encore(&inst.kv, &k0, 1.0, n, OPTS).unwrap().norm();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
    }
}

#[test]
fn projector_annihilates_preserved_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ke = randn(&mut rng, 6, 2);
    let p = null_space_projector(&ke);
    assert!((&p * &ke).amax() < 1e-12);
    assert!((&p * &p - &p).amax() < 1e-12);
}

#[test]
fn covariance_from_keys() {
    let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    let c = CovMatrix::from_keys(&e1, 1.0).unwrap();
    assert_eq!(c.c, &e1 * e1.transpose());
    assert_eq!(CovMatrix::from_keys(&e1, 0.0).unwrap().c, DMatrix::zeros(3, 3));
    assert!(CovMatrix::from_keys(&DMatrix::zeros(3, 0), 1.0).is_err());
}

// Model-level behavior.

struct Fixture {
    world: World,
    model: ToyLm,
    batch: EditBatch,
    targets: Vec<DeltaTarget>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = common::tiny_world();
        let model = common::tiny_model(&world, 60);
        let batch = common::tiny_batch(&world, &model, 6, 4);
        let mut spec = OptimizeSpec::new(Algorithm::Memit.target_site(1));
        spec.steps = 40;
        spec.early_stop = EarlyStop::Mpes;
        let targets = find_targets_batch(&model, &batch, &spec).unwrap().targets;
        Fixture {
            world,
            model,
            batch,
            targets,
        }
    })
}

fn layers(ls: &[usize]) -> CausalLayerSet {
    CausalLayerSet::new(ls.to_vec(), fixture().model.config.n_layers).unwrap()
}

fn context(layers: &CausalLayerSet) -> SpreadContext {
    let f = fixture();
    SpreadContext::build(&f.model, &f.world, &f.batch.requests, layers, &SpreadConfig::default()).unwrap()
}

fn edit(algo: Algorithm, ls: &CausalLayerSet, targets: &[DeltaTarget]) -> (ToyLm, ApplyReport) {
    let f = fixture();
    apply_edit(
        &f.model,
        &f.batch.requests,
        targets,
        algo,
        ls,
        &context(ls),
        TargetMode::Absolute,
        &f.batch.prefix_pool,
        None,
    )
    .unwrap()
}

#[test]
fn causal_layer_sets_are_validated() {
    assert!(CausalLayerSet::new(vec![], 3).is_err());
    assert!(CausalLayerSet::new(vec![1, 0], 3).is_err());
    assert!(CausalLayerSet::new(vec![0, 3], 3).is_err());
    assert_eq!(layers(&[0, 1]).for_algorithm(Algorithm::Rome), vec![1]);
}

#[test]
fn covariance_estimate_matches_naive_loop() {
    let f = fixture();
    let prompts: Vec<Vec<usize>> = f.world.pretrain_corpus.iter().take(40).cloned().collect();
    let c = estimate_cov(&f.model, &prompts, 1, 3.0).unwrap();
    let d = f.model.config.d_mlp;
    let mut naive = DMatrix::zeros(d, d);
    let mut n = 0;
    for p in &prompts {
        let (_, tr) = f.model.forward(p).unwrap();
        for t in 0..p.len() {
            let k = tr.keys[1].column(t);
            for i in 0..d {
                for j in 0..d {
                    naive[(i, j)] += k[i] * k[j];
                }
            }
            n += 1;
        }
    }
    naive *= 3.0 / n as f64;
    assert!((&c.c - &naive).amax() < 1e-10 * naive.amax());
    assert_eq!(c.c, c.c.transpose());
    assert!(c.c.clone().symmetric_eigen().eigenvalues.min() > -1e-10);
}

#[test]
fn key_value_extraction() {
    let f = fixture();
    let (req, t) = (&f.batch.requests[0], &f.targets[0]);
    assert_eq!(req.id, t.request_id);
    let (k1, v1) = extract_key_value(&f.model, req, t, 1, false, &f.batch.prefix_pool, 1).unwrap();
    let (k2, v2) = extract_key_value(&f.model, req, t, 1, true, &[], 1).unwrap();
    assert_eq!(k1, k2);
    assert_eq!(v1, v2);
    let (_, tr) = f.model.forward(&req.edit_prompt(&[]).tokens).unwrap();
    assert_eq!(k1, tr.keys[1].column(t.position).into_owned());
    let (_, vh) = extract_key_value(&f.model, req, t, 1, false, &[], 2).unwrap();
    assert!((&v1 - &vh - t.spread_delta() / 2.0).amax() < 1e-12);
    assert!(extract_key_value(&f.model, req, t, 2, false, &[], 1).is_err());
}

#[test]
fn averaged_keys_vary_less_across_prefix_draws() {
    let f = fixture();
    let (req, t) = (&f.batch.requests[0], &f.targets[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool = &f.world.prefix_tokens;
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let len = 1 + (rand::Rng::random_range(rng, 0..3usize));
                (0..len).map(|_| pool[rand::Rng::random_range(rng, 0..pool.len())]).collect()
            })
            .collect()
    };
    let spread = |keys: &[DVector<f64>]| {
        let mean = keys.iter().fold(DVector::zeros(keys[0].len()), |a, k| a + k) / keys.len() as f64;
        keys.iter().map(|k| (k - &mean).norm_squared()).sum::<f64>() / keys.len() as f64
    };
    let mut single = Vec::new();
    let mut averaged = Vec::new();
    for _ in 0..20 {
        let one = draw(&mut rng, 1);
        let p = req.edit_prompt(&one[0]);
        let (_, tr) = f.model.forward(&p.tokens).unwrap();
        single.push(tr.keys[1].column(p.last_subject).into_owned());
        let many = draw(&mut rng, 5);
        averaged.push(extract_key_value(&f.model, req, t, 1, true, &many, 1).unwrap().0);
    }
    assert!(spread(&averaged) < spread(&single));
}

#[test]
fn empty_targets_leave_model_unchanged() {
    let ls = layers(&[0, 1]);
    let (m, rep) = edit(Algorithm::Memit, &ls, &[]);
    assert_eq!(m, fixture().model);
    assert_eq!(rep.edits, 0);
}

#[test]
fn single_layer_memit_equals_solver_output() {
    let f = fixture();
    let ls = layers(&[1]);
    let ctx = context(&ls);
    let (m, _) = edit(Algorithm::Memit, &ls, &f.targets);
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for t in &f.targets {
        let req = f.batch.requests.iter().find(|r| r.id == t.request_id).unwrap();
        let (k, v) = extract_key_value(&f.model, req, t, 1, false, &f.batch.prefix_pool, 1).unwrap();
        ks.push(k);
        vs.push(v);
    }
    let w = &f.model.blocks[1].w_out;
    let kv = KvSet::new(w, DMatrix::from_columns(&ks), DMatrix::from_columns(&vs)).unwrap();
    let d = solve_memit(&kv, &ctx.cov[0].c, OPTS).unwrap();
    assert!((&m.blocks[1].w_out - w - d).amax() < 1e-12);
    for (l, (a, b)) in m.blocks.iter().zip(&f.model.blocks).enumerate() {
        if l != 1 {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn apply_edit_is_pure_and_deterministic() {
    let f = fixture();
    let before = f.model.clone();
    let ls = layers(&[0, 1]);
    for algo in Algorithm::ALL {
        let site = algo.target_site(1);
        let targets = if site == f.targets[0].site {
            f.targets.clone()
        } else {
            let mut spec = OptimizeSpec::new(site);
            spec.steps = 20;
            find_targets_batch(&f.model, &f.batch, &spec).unwrap().targets
        };
        let (a, ra) = edit(algo, &ls, &targets);
        let (b, _) = edit(algo, &ls, &targets);
        assert_eq!(a, b, "{algo}");
        assert_ne!(a, f.model, "{algo}");
        assert_eq!(ra.sequential, algo.single_layer() && targets.len() > 1, "{algo}");
    }
    assert_eq!(f.model, before);
}

#[test]
fn memit_lowers_target_perplexity() {
    let f = fixture();
    let ls = layers(&[0, 1]);
    let (m, _) = edit(Algorithm::Memit, &ls, &f.targets);
    let before = editlab::iterate::target_perplexity(&f.model, &f.batch.requests, None).unwrap();
    let after = editlab::iterate::target_perplexity(&m, &f.batch.requests, None).unwrap();
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn misplaced_targets_are_rejected() {
    let f = fixture();
    let ls = layers(&[0, 1]);
    let mut bad = f.targets.clone();
    bad[0].site = editlab::optimize::TargetSite::HiddenState(2);
    let ctx = context(&ls);
    let r = apply_edit(&f.model, &f.batch.requests, &bad, Algorithm::Memit, &ls, &ctx, TargetMode::Absolute, &[], None);
    assert!(r.is_err());
}

#[test]
fn solver_dump_round_trips() {
    let f = fixture();
    let ls = layers(&[0, 1]);
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(&ls);
    let dump = DumpTarget {
        dir: dir.path(),
        label: "t",
    };
    apply_edit(&f.model, &f.batch.requests, &f.targets, Algorithm::Memit, &ls, &ctx, TargetMode::Absolute, &f.batch.prefix_pool, Some(dump)).unwrap();
    let (h, arrays) = editlab::arrays::read_arrays(&dir.path().join("t_layer1.bin")).unwrap();
    assert_eq!(h.kind, "spread-debug");
    let names: Vec<&str> = arrays.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["K", "V", "R", "C", "delta"]);
}
