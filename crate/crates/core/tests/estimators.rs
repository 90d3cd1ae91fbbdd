use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slu_core::exec::Execution;
use slu_core::grad::{Tape, Var};
use slu_core::model::InterfaceMode;
use slu_core::seqloss::{
    nbest_expected_loss, objective_with, score_function_surrogate, Baseline, CandidateSource, Draw, Estimator, Method,
    SeqLossConfig,
};
use slu_core::tensor::Tensor;
use slu_core::toy::{nbest_check, sampling_check, ToyProblem};

/// Gradient of the surrogate with respect to two logits for the given
/// sampled outcomes of a 2-way softmax.
fn two_outcome_gradient(outcomes: &[usize], metric: [f64; 2], baseline: Baseline) -> [f64; 2] {
    let mut tape = Tape::new();
    let l = tape.param(0, &Tensor::row_vector(vec![0.0, 0.0]));
    let lp = tape.log_softmax(l);
    let logps: Vec<Var> = outcomes
        .iter()
        .map(|&o| {
            let g = tape.gather(lp, &[o]).unwrap();
            tape.sum(g)
        })
        .collect();
    let m: Vec<f64> = outcomes.iter().map(|&o| metric[o]).collect();
    let s = score_function_surrogate(&mut tape, &logps, &m, baseline).unwrap();
    let g = tape.backward(s).unwrap();
    let d = g.param(0).unwrap().data();
    [d[0], d[1]]
}

#[test]
fn two_outcome_score_function_matches_exact_gradient() {
    // E[M] = p_1 for M = (0, 1) and equal logits, so dE/dl_0 = -p_0 p_1.
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for (baseline, per_call) in [(Baseline::None, 1), (Baseline::BatchMean, 2)] {
        let calls = 200_000 / per_call;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..calls {
            let outcomes: Vec<usize> = (0..per_call).map(|_| r.random_range(0..2)).collect();
            let g = two_outcome_gradient(&outcomes, [0.0, 1.0], baseline)[0];
            s1 += g;
            s2 += g * g;
        }
        let k = calls as f64;
        let mean = s1 / k;
        let se = ((s2 / k - mean * mean) / (k - 1.0)).sqrt();
        assert!((mean + 0.25).abs() <= 3.0 * se, "{baseline:?}: {mean} ± {se}");
    }
}

#[test]
fn batch_mean_cancels_a_constant_shift_exactly() {
    let outcomes = [0, 1, 1, 0, 1];
    let a = two_outcome_gradient(&outcomes, [0.0, 1.0], Baseline::BatchMean);
    let b = two_outcome_gradient(&outcomes, [5.0, 6.0], Baseline::BatchMean);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn full_space_nbest_is_exact_on_the_toy_model() {
    for interface in [InterfaceMode::Text, InterfaceMode::Neural] {
        let toy = ToyProblem::new(2, 3, 2, interface);
        for m in Method::ALL.into_iter().filter(|m| m.needs_transcript()) {
            let r = nbest_check(&toy, &SeqLossConfig::new(m, toy.max_len)).unwrap();
            assert!(r.value_error < 1e-9 && r.max_gradient_error < 1e-9, "{m}: {r:?}");
        }
    }
}

#[test]
fn batch_mean_baseline_reduces_variance() {
    let toy = ToyProblem::new(1, 3, 2, InterfaceMode::Neural);
    let mut cfg = SeqLossConfig::new(Method::MSlu, toy.max_len);
    cfg.estimator = Estimator::Sampling { samples: 4 };
    let with = sampling_check(&toy, &cfg, 8000, 5, Execution::Sequential).unwrap();
    cfg.baseline = Baseline::None;
    let without = sampling_check(&toy, &cfg, 8000, 5, Execution::Sequential).unwrap();
    assert!(with.mean_variance < without.mean_variance, "{with:?} vs {without:?}");
    assert!(without.fraction_within >= 0.95);
}

#[test]
fn identical_samples_with_batch_mean_are_flagged_and_give_no_metric_gradient() {
    let toy = ToyProblem::new(1, 3, 2, InterfaceMode::Neural);
    let mut cfg = SeqLossConfig::new(Method::MSemEr, toy.max_len);
    cfg.estimator = Estimator::Sampling { samples: 3 };
    cfg.lambda = 0.0;
    let d = Draw {
        tokens: vec![1],
        ended: true,
        slot_tags: vec![1],
        intent: 0,
    };
    let draws = vec![d.clone(), d.clone(), d];
    let source = CandidateSource::Fixed {
        draws: &draws,
        pseudo: None,
        metrics: None,
    };
    let o = objective_with(&toy.params, &toy.inventory, &toy.example(), &cfg, source).unwrap();
    assert!(o.flags.degenerate);
    assert!(o.gradients.iter().all(|(_, g)| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn lambda_zero_is_the_pure_expected_metric() {
    let toy = ToyProblem::new(4, 3, 2, InterfaceMode::Neural);
    let mut cfg = SeqLossConfig::new(Method::MWer, toy.max_len);
    cfg.lambda = 0.0;
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let o = objective_with(&toy.params, &toy.inventory, &toy.example(), &cfg, CandidateSource::Model(&mut r)).unwrap();
    assert!((o.loss - o.expected_metric).abs() < 1e-12);
    let probs: f64 = o.candidates.iter().map(|c| c.renorm_prob.unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-12);
}

#[test]
fn perfect_nbest_leaves_only_the_weighted_cross_entropy() {
    let toy = ToyProblem::new(4, 3, 2, InterfaceMode::Neural);
    let mut cfg = SeqLossConfig::new(Method::MWer, toy.max_len);
    cfg.lambda = 0.3;
    cfg.estimator = Estimator::NBest { beam: 1 };
    let perfect = vec![Draw {
        tokens: toy.tokens.clone(),
        ended: true,
        slot_tags: toy.slot_tags.clone(),
        intent: toy.intent,
    }];
    let source = CandidateSource::Fixed {
        draws: &perfect,
        pseudo: None,
        metrics: None,
    };
    let o = objective_with(&toy.params, &toy.inventory, &toy.example(), &cfg, source).unwrap();
    assert_eq!(o.expected_metric, 0.0);
    assert!((o.loss - 0.3 * o.ce).abs() < 1e-12);
}

fn nbest_gradient(logits: &[f64], metric: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let l = tape.param(0, &Tensor::row_vector(logits.to_vec()));
    let lp = tape.log_softmax(l);
    let parts: Vec<Var> = (0..logits.len())
        .map(|i| {
            let g = tape.gather(lp, &[i]).unwrap();
            tape.sum(g)
        })
        .collect();
    let (e, _) = nbest_expected_loss(&mut tape, &parts, metric).unwrap();
    let g = tape.backward(e).unwrap();
    (tape.scalar(e), g.param(0).unwrap().data().to_vec())
}

proptest! {
    #[test]
    fn nbest_gradient_ignores_constant_shifts(
        logits in prop::collection::vec(-4.0f64..4.0, 2..6),
        seed in 0u64..1000,
        shift in -10.0f64..10.0,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = logits.iter().map(|_| r.random_range(0.0..2.0)).collect();
        let shifted: Vec<f64> = m.iter().map(|v| v + shift).collect();
        let (e0, g0) = nbest_gradient(&logits, &m);
        let (e1, g1) = nbest_gradient(&logits, &shifted);
        prop_assert!((e1 - e0 - shift).abs() < 1e-9);
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_metric_has_zero_nbest_gradient(
        logits in prop::collection::vec(-4.0f64..4.0, 1..6),
        m in 0.0f64..3.0,
    ) {
        let metric = vec![m; logits.len()];
        let (e, g) = nbest_gradient(&logits, &metric);
        prop_assert!((e - m).abs() < 1e-12);
        prop_assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batch_mean_surrogate_ignores_constant_shifts(
        outcomes in prop::collection::vec(0usize..2, 2..8),
        shift in -10.0f64..10.0,
    ) {
        let a = two_outcome_gradient(&outcomes, [0.0, 1.0], Baseline::BatchMean);
        let b = two_outcome_gradient(&outcomes, [shift, 1.0 + shift], Baseline::BatchMean);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
