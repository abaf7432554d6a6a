use editlab::toylm::loss::{log_softmax, softmax};
use editlab::toylm::{
    load_checkpoint, save_checkpoint, AdamConfig, ConstantLoss, KlToReference, ModelConfig,
    OutputLoss, PatchSite, PatchSpec, SumLoss, TokenNll, ToyLm,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        d_mlp: 32,
        max_seq_len: 12,
        seed,
    }
}

fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn softmax_rows_sum_to_one() {
    let m = ToyLm::new(config(1)).unwrap();
    let (logits, _) = m.forward(&[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
    for r in 0..logits.nrows() {
        let row: Vec<f64> = logits.row(r).iter().cloned().collect();
        let s: f64 = softmax(&row).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn changing_future_tokens_leaves_prefix_rows_identical() {
    let m = ToyLm::new(config(2)).unwrap();
    let a = [3, 1, 4, 1, 5, 9, 2, 6];
    let mut b = a;
    b[5] = 7;
    b[7] = 0;
    let (la, _) = m.forward(&a).unwrap();
    let (lb, _) = m.forward(&b).unwrap();
    for r in 0..5 {
        assert_eq!(la.row(r), lb.row(r));
    }
    assert_ne!(la.row(5), lb.row(5));
}

#[test]
fn forward_is_deterministic_across_instances() {
    let a = ToyLm::new(config(42)).unwrap();
    let b = ToyLm::new(config(42)).unwrap();
    assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    let t = [1, 2, 3, 4, 5];
    let (la, ta) = a.forward(&t).unwrap();
    let (lb, tb) = b.forward(&t).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ta, tb);
}

#[test]
fn packing_does_not_change_results() {
    let m = ToyLm::new(config(3)).unwrap();
    let a = [1usize, 2, 3, 4];
    let b = [7usize, 8, 9];
    let packed = m.run(&[&a, &b], &[]);
    let (la, _) = m.forward(&a).unwrap();
    let (lb, _) = m.forward(&b).unwrap();
    let pa = packed.logits_of(0).transpose();
    let pb = packed.logits_of(1).transpose();
    assert!((pa - la).abs().max() < 1e-12);
    assert!((pb - lb).abs().max() < 1e-12);
}

#[test]
fn trace_shapes_match_config() {
    let c = config(4);
    let m = ToyLm::new(c.clone()).unwrap();
    let (_, tr) = m.forward(&[1, 2, 3]).unwrap();
    assert_eq!(tr.hidden.len(), c.n_layers);
    assert_eq!(tr.hidden[0].shape(), (c.d_model, 3));
    assert_eq!(tr.attn[1].shape(), (c.d_model, 3));
    assert_eq!(tr.keys[2].shape(), (c.d_mlp, 3));
    assert_eq!(tr.mlp_out[3].shape(), (c.d_model, 3));
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = ToyLm::new(config(5)).unwrap();
    assert!(m.forward(&[]).is_err());
    assert!(m.forward(&[23]).is_err());
    assert!(m.forward(&[0; 13]).is_err());
    let bad_layer = PatchSpec::zero(PatchSite::HiddenState, 4, 0, 16);
    assert!(m.forward_patched(&[1, 2], &bad_layer).is_err());
    let bad_pos = PatchSpec::zero(PatchSite::HiddenState, 1, 2, 16);
    assert!(m.forward_patched(&[1, 2], &bad_pos).is_err());
    let mut nan = PatchSpec::zero(PatchSite::MlpOutput, 1, 0, 16);
    nan.delta[0] = f64::NAN;
    assert!(m.forward_patched(&[1, 2], &nan).is_err());
    let mut bad_cfg = config(0);
    bad_cfg.n_heads = 3;
    assert!(ToyLm::new(bad_cfg).is_err());
    let mut one_layer = config(0);
    one_layer.n_layers = 1;
    assert!(ToyLm::new(one_layer).is_err());
}

#[test]
fn zero_patch_is_exact_identity() {
    let m = ToyLm::new(config(6)).unwrap();
    let t = [5, 4, 3, 2, 1];
    let (l0, _) = m.forward(&t).unwrap();
    for site in [PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput] {
        for layer in 0..4 {
            let p = PatchSpec::zero(site, layer, 2, 16);
            let (l1, _) = m.forward_patched(&t, &p).unwrap();
            assert_eq!(l0, l1);
        }
    }
}

#[test]
fn patch_only_affects_later_positions() {
    let m = ToyLm::new(config(7)).unwrap();
    let t = [5, 4, 3, 2, 1, 0];
    let (l0, _) = m.forward(&t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for site in [PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput] {
        let mut p = PatchSpec::zero(site, 3, 3, 16);
        p.delta = DVector::from_fn(16, |_, _| rng.random_range(-0.1..0.1));
        let (l1, _) = m.forward_patched(&t, &p).unwrap();
        for r in 0..3 {
            assert_eq!(l0.row(r), l1.row(r));
        }
        let p0 = softmax(&l0.row(3).iter().cloned().collect::<Vec<_>>());
        let p1 = softmax(&l1.row(3).iter().cloned().collect::<Vec<_>>());
        let l1d: f64 = p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1d > 0.0);
    }
}

fn loss_at_position(
    m: &ToyLm,
    t: &[usize],
    patch: &PatchSpec,
    loss: &dyn OutputLoss,
) -> f64 {
    let (logits, _) = m.forward_patched(t, patch).unwrap();
    loss.value_and_grad(&logits.transpose()).0
}

/// Central differences on every coordinate of delta.
fn fd_grad(m: &ToyLm, t: &[usize], patch: &PatchSpec, loss: &dyn OutputLoss) -> DVector<f64> {
    let h = 1e-5;
    DVector::from_fn(patch.delta.len(), |i, _| {
        let mut up = patch.clone();
        up.delta[i] += h;
        let mut dn = patch.clone();
        dn.delta[i] -= h;
        (loss_at_position(m, t, &up, loss) - loss_at_position(m, t, &dn, loss)) / (2.0 * h)
    })
}

fn rel_max_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn delta_gradient_matches_finite_differences() {
    let sites = [PatchSite::HiddenState, PatchSite::MlpOutput, PatchSite::AttnOutput];
    for seed in 0..20u64 {
        let mut c = config(seed);
        c.n_heads = [1, 2, 4][seed as usize % 3];
        let m = ToyLm::new(c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let len = rng.random_range(3..10);
        let t = tokens(&mut rng, len, 23);
        let pos = rng.random_range(0..len - 1);
        let layer = rng.random_range(0..3);
        let mut p = PatchSpec::zero(sites[seed as usize % 3], layer, pos, 16);
        p.delta = DVector::from_fn(16, |_, _| rng.random_range(-0.5..0.5));
        let reference = {
            let (l, _) = m.forward(&t).unwrap();
            log_softmax(&l.row(pos).iter().cloned().collect::<Vec<_>>())
        };
        let nll = TokenNll::new(len - 1, rng.random_range(0..23));
        let kl = KlToReference {
            position: pos,
            reference_log_probs: reference,
            weight: 0.7,
        };
        let loss = SumLoss(vec![&nll, &kl]);
        let g = m.grad_wrt_delta(&t, &p, &loss).unwrap();
        let fd = fd_grad(&m, &t, &p, &loss);
        let err = rel_max_err(&g, &fd);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let m = ToyLm::new(config(8)).unwrap();
    let p = PatchSpec::zero(PatchSite::HiddenState, 1, 1, 16);
    let g = m.grad_wrt_delta(&[1, 2, 3], &p, &ConstantLoss(3.0)).unwrap();
    assert_eq!(g.amax(), 0.0);
}

#[test]
fn near_one_hot_nll_gradient_vanishes() {
    let mut m = ToyLm::new(config(9)).unwrap();
    let target = 5;
    // After the final norm every column equals 50·e_0 (tiny gamma), so the
    // logit margin of the target is ~50 · 50.
    m.ln_final.gamma.fill(1e-6);
    m.ln_final.beta.fill(0.0);
    m.ln_final.beta[(0, 0)] = 50.0;
    m.unembedding.fill(0.0);
    m.unembedding[(0, target)] = 50.0;
    let p = PatchSpec::zero(PatchSite::HiddenState, 2, 2, 16);
    let g = m
        .grad_wrt_delta(&[1, 2, 3], &p, &TokenNll::new(2, target))
        .unwrap();
    assert!(g.norm() < 1e-6, "norm {}", g.norm());
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let mut m = ToyLm::new(config(10)).unwrap();
    let before = m.clone();
    let corpus = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
    let (nll0, _) = m.corpus_nll(&corpus).unwrap();
    let rep = m.pretrain(&corpus, 0, &AdamConfig::default(), 1).unwrap();
    assert_eq!(m, before);
    assert_eq!(rep.epochs_run, 0);
    assert_eq!(rep.final_nll, nll0);
}

#[test]
fn pretraining_is_deterministic_and_reduces_loss() {
    let corpus: Vec<Vec<usize>> = (0..20).map(|i| vec![0, 1 + i % 5, 6 + i % 7, 13 + i % 3]).collect();
    let run = || {
        let mut m = ToyLm::new(config(11)).unwrap();
        let rep = m.pretrain(&corpus, 15, &AdamConfig::default(), 3).unwrap();
        (m, rep)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.loss_history.last().unwrap() < &ra.loss_history[0]);
}

#[test]
fn uniform_model_has_vocab_perplexity() {
    let mut m = ToyLm::new(config(12)).unwrap();
    m.unembedding.fill(0.0);
    let ppl = m.sequence_perplexity(&[vec![1, 2, 3, 4], vec![5, 6]]).unwrap();
    assert!((ppl - 23.0).abs() < 1e-6);
}

#[test]
fn certain_model_has_unit_perplexity() {
    // Every position predicts token 0 with overwhelming margin.
    let mut m = ToyLm::new(config(13)).unwrap();
    m.ln_final.gamma.fill(0.0);
    m.ln_final.beta.fill(0.0);
    m.ln_final.beta[(0, 0)] = 1.0;
    m.unembedding.fill(0.0);
    m.unembedding[(0, 0)] = 1e4;
    let ppl = m.sequence_perplexity(&[vec![0, 0, 0, 0]]).unwrap();
    assert!((ppl - 1.0).abs() < 1e-12);
    assert!(m.sequence_perplexity(&[]).is_err());
}

#[test]
fn perplexity_matches_naive_log_sum() {
    let m = ToyLm::new(config(14)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<Vec<usize>> = (0..50)
        .map(|_| {
            let len = rng.random_range(2..12);
            tokens(&mut rng, len, 23)
        })
        .collect();
    let mut total = 0.0;
    let mut n = 0.0;
    for s in &seqs {
        let (logits, _) = m.forward(s).unwrap();
        for i in 0..s.len() - 1 {
            let row: Vec<f64> = logits.row(i).iter().cloned().collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[s[i + 1]];
            n += 1.0;
        }
    }
    let oracle = (total / n).exp();
    let ppl = m.sequence_perplexity(&seqs).unwrap();
    assert!(((ppl - oracle) / oracle).abs() < 1e-9);
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let m = ToyLm::new(config(15)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let m = ToyLm::new(config(16)).unwrap();
    let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (_, _, grads) = m.batch_loss_and_grads(&refs);
    let mut names = Vec::new();
    m.for_each_param(|n, _| names.push(n.to_string()));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in &names {
        let mut analytic = None;
        let mut shape = (0, 0);
        grads.for_each_param(|n, g| {
            if n == name {
                shape = g.shape();
                analytic = Some(g.clone());
            }
        });
        let analytic: DMatrix<f64> = analytic.unwrap();
        for _ in 0..3 {
            let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
            let eval = |eps: f64| {
                let mut p = m.clone();
                p.for_each_param_mut(|n, w| {
                    if n == name {
                        w[(r, c)] += eps;
                    }
                });
                p.batch_loss_and_grads(&refs).0
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let a = analytic[(r, c)];
            assert!(
                (a - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "{name}[{r},{c}]: {a} vs {fd}"
            );
        }
    }
}
