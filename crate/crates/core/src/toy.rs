//! A tiny fully enumerable joint model for checking estimators against
//! exact expectations.

use serde::Serialize;

use crate::corpus::Inventory;
use crate::decode::{candidate_vars, complete_candidate, enumerate_sequences, enumerate_tags};
use crate::exec::Execution;
use crate::grad::Tape;
use crate::metrics::SlotEntry;
use crate::model::{InterfaceMode, ModelConfig, ModelParameters, SluNet};
use crate::rng;
use crate::seqloss::{
    self, metric_value, objective_with, CandidateSource, Draw, Estimator, Example, HypProb, Hypothesis, Result,
    SeqLossConfig,
};
use crate::tensor::Tensor;

pub struct ToyProblem {
    pub inventory: Inventory,
    pub params: ModelParameters,
    pub frames: Tensor,
    pub tokens: Vec<usize>,
    pub slot_tags: Vec<usize>,
    pub intent: usize,
    pub slots: Vec<SlotEntry>,
    pub max_len: usize,
}

impl ToyProblem {
    /// `vocab` counts EOS. Two intents, two slot tags.
    pub fn new(seed: u64, vocab: usize, max_len: usize, interface: InterfaceMode) -> Self {
        assert!(vocab >= 2 && max_len >= 1);
        let words: Vec<String> = std::iter::once(crate::corpus::EOS.to_string())
            .chain((1..vocab).map(|i| ((b'a' + (i as u8 - 1) % 26) as char).to_string().repeat(1 + (i - 1) / 26)))
            .collect();
        let inventory = Inventory::new(
            words,
            vec![crate::corpus::OUTSIDE.into(), "X".into()],
            vec!["I0".into(), "I1".into()],
        );
        let config = ModelConfig {
            frame_dim: 2,
            vocab_size: vocab,
            n_slot_tags: 2,
            n_intents: 2,
            enc_hidden: 3,
            enc_layers: 1,
            embed_dim: 3,
            dec_hidden: 4,
            attn_dim: 3,
            nlu: crate::model::NluKind::Recurrent,
            nlu_embed_dim: 3,
            nlu_hidden: 3,
            intent_ff_dim: 3,
            intent_ff_layers: 1,
            interface,
            init_seed: seed,
        };
        let mut params = ModelParameters::init(&config).expect("toy config is valid");
        // Sharper output layers make the candidate distribution non-uniform.
        for id in [params.layout.asr.vocab_w, params.layout.nlu.slot_w, params.layout.nlu.intent_w] {
            params.tensors_mut()[id].scale_assign(4.0);
        }
        let mut r = rng::stream(seed, &[0x70F]);
        let frames = Tensor::from_vec(
            3,
            2,
            (0..6)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r))
                .collect(),
        );
        let tokens: Vec<usize> = (0..max_len.min(2)).map(|i| 1 + i % (vocab - 1)).collect();
        let slot_tags: Vec<usize> = (0..tokens.len()).map(|i| usize::from(i == 0)).collect();
        let slots = inventory.slots(&tokens, &slot_tags);
        Self {
            inventory,
            params,
            frames,
            tokens,
            slot_tags,
            intent: 0,
            slots,
            max_len,
        }
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            frames: &self.frames,
            transcript: Some((&self.tokens, &self.slot_tags)),
            intent: self.intent,
            slots: &self.slots,
        }
    }

    /// Every candidate the estimator can draw: all joint labellings for
    /// joint probabilities, argmax-completed token sequences otherwise.
    pub fn candidate_space(&self, hyp_prob: HypProb) -> Result<Vec<Draw>> {
        let net = SluNet::new(&self.params);
        let mut tape = Tape::new();
        let enc = net.encode(&mut tape, &self.frames)?;
        let mut out = Vec::new();
        for (tokens, ended) in enumerate_sequences(self.params.config.vocab_size, self.max_len) {
            match hyp_prob {
                HypProb::AsrOnly => {
                    let c = complete_candidate(&net, &mut tape, &enc, &tokens, ended)?;
                    out.push(Draw {
                        tokens,
                        ended,
                        slot_tags: c.slot_tags,
                        intent: c.intent,
                    });
                }
                HypProb::Joint => {
                    for tags in enumerate_tags(self.params.config.n_slot_tags, tokens.len()) {
                        for intent in 0..self.params.config.n_intents {
                            out.push(Draw {
                                tokens: tokens.clone(),
                                ended,
                                slot_tags: tags.clone(),
                                intent,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Log-probability (of the kind `hyp_prob`), metric and gradient of the
    /// log-probability for each candidate, each on its own tape.
    pub fn scored_space(&self, cfg: &SeqLossConfig, draws: &[Draw]) -> Result<Vec<(f64, f64, Vec<Tensor>)>> {
        let hp = cfg.method.spec().hyp_prob;
        let net = SluNet::new(&self.params);
        let ex = self.example();
        draws
            .iter()
            .map(|d| {
                let mut tape = Tape::new();
                let enc = net.encode(&mut tape, &self.frames)?;
                let (v, _) = candidate_vars(&net, &mut tape, &enc, &d.tokens, d.ended, &d.slot_tags, d.intent)?;
                let lp = match hp {
                    HypProb::AsrOnly => v.asr,
                    HypProb::Joint => tape.add_all(&[v.asr, v.slot, v.intent])?,
                };
                let ref_lp = tape.value(v.intent_logp).get(0, self.intent);
                let h = Hypothesis {
                    tokens: &d.tokens,
                    slot_tags: &d.slot_tags,
                    intent: d.intent,
                    ref_intent_logprob: ref_lp,
                };
                let m = metric_value(&h, &ex, cfg, &self.inventory)?;
                let g = tape.backward(lp)?;
                Ok((tape.scalar(lp), m, self.params.dense_gradients(&g)))
            })
            .collect()
    }

    /// Exact `E[M]` and `Σ_c M(c) ∇p(c)` over the full candidate space.
    pub fn exact_expectation(&self, cfg: &SeqLossConfig) -> Result<(f64, Vec<Tensor>, f64)> {
        let space = self.candidate_space(cfg.method.spec().hyp_prob)?;
        let scored = self.scored_space(cfg, &space)?;
        let mut grad = zeros_like(&self.params);
        let mut e = 0.0;
        let mut mass = 0.0;
        for (lp, m, g) in &scored {
            let p = lp.exp();
            e += p * m;
            mass += p;
            for (acc, gi) in grad.iter_mut().zip(g) {
                let mut t = gi.clone();
                t.scale_assign(p * m);
                acc.add_assign(&t);
            }
        }
        Ok((e, grad, mass))
    }
}

fn zeros_like(p: &ModelParameters) -> Vec<Tensor> {
    p.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplingReport {
    pub method: String,
    pub draws: usize,
    pub calls: usize,
    pub coordinates: usize,
    pub within_3se: usize,
    pub fraction_within: f64,
    pub max_abs_z: f64,
    /// Mean per-coordinate variance of the per-call estimate.
    pub mean_variance: f64,
    pub exact_expectation: f64,
    pub probability_mass: f64,
}

/// Mean of the sampling estimator over `draws` samples, compared per
/// coordinate with the exact gradient.
pub fn sampling_check(
    problem: &ToyProblem,
    cfg: &SeqLossConfig,
    draws: usize,
    seed: u64,
    execution: Execution,
) -> Result<SamplingReport> {
    let Estimator::Sampling { samples } = cfg.estimator else {
        return Err(seqloss::SeqLossError::Invalid("sampling_check needs a sampling estimator".into()));
    };
    let mut cfg = cfg.clone();
    cfg.lambda = 0.0;
    cfg.max_len = problem.max_len;
    let (e, exact, mass) = problem.exact_expectation(&cfg)?;
    let exact = flatten(&exact);
    let calls = draws.div_ceil(samples);
    let chunk = 500;
    let n_chunks = calls.div_ceil(chunk);
    let ex = problem.example();
    let partial = execution.map_range(n_chunks, |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut s1 = vec![0.0; exact.len()];
        let mut s2 = vec![0.0; exact.len()];
        for k in c * chunk..((c + 1) * chunk).min(calls) {
            let mut r = rng::stream(seed, &[0xE57, k as u64]);
            let o = objective_with(&problem.params, &problem.inventory, &ex, &cfg, CandidateSource::Model(&mut r))?;
            let g = flatten(&problem.params.dense_gradients(&o.gradients));
            for (i, v) in g.into_iter().enumerate() {
                s1[i] += v;
                s2[i] += v * v;
            }
        }
        Ok((s1, s2))
    });
    let mut s1 = vec![0.0; exact.len()];
    let mut s2 = vec![0.0; exact.len()];
    for p in partial {
        let (a, b) = p?;
        s1.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        s2.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
    let k = calls as f64;
    let mut within = 0;
    let mut max_z: f64 = 0.0;
    let mut var_sum = 0.0;
    for i in 0..exact.len() {
        let mean = s1[i] / k;
        let var = ((s2[i] / k - mean * mean) * k / (k - 1.0)).max(0.0);
        var_sum += var;
        let se = (var / k).sqrt();
        let diff = (mean - exact[i]).abs();
        if diff <= 1e-12 || diff <= 3.0 * se {
            within += 1;
        }
        if se > 0.0 {
            max_z = max_z.max(diff / se);
        }
    }
    Ok(SamplingReport {
        method: cfg.method.name().into(),
        draws: calls * samples,
        calls,
        coordinates: exact.len(),
        within_3se: within,
        fraction_within: within as f64 / exact.len() as f64,
        max_abs_z: max_z,
        mean_variance: var_sum / exact.len() as f64,
        exact_expectation: e,
        probability_mass: mass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NBestReport {
    pub method: String,
    pub candidates: usize,
    pub value: f64,
    pub reference_value: f64,
    pub value_error: f64,
    pub max_gradient_error: f64,
}

/// The n-best objective with a beam covering every token sequence,
/// against an independent computation over the same candidate set.
///
/// For ASR-only probabilities that set is the full space and the reference
/// is the exact expectation. For joint probabilities the reference is
/// `Σ M p̄` with `∇p̄_c = p̄_c (∇log p_c - Σ_c' p̄_c' ∇log p_c')` built from
/// per-candidate gradients.
pub fn nbest_check(problem: &ToyProblem, cfg: &SeqLossConfig) -> Result<NBestReport> {
    let mut cfg = cfg.clone();
    cfg.lambda = 0.0;
    cfg.max_len = problem.max_len;
    let n_seq = enumerate_sequences(problem.params.config.vocab_size, problem.max_len).len();
    cfg.estimator = Estimator::NBest { beam: n_seq };
    let mut dummy = rng::stream(0, &[]);
    let ex = problem.example();
    let o = objective_with(&problem.params, &problem.inventory, &ex, &cfg, CandidateSource::Model(&mut dummy))?;
    let got = flatten(&problem.params.dense_gradients(&o.gradients));

    let (value, grad) = match cfg.method.spec().hyp_prob {
        HypProb::AsrOnly => {
            let (e, g, _) = problem.exact_expectation(&cfg)?;
            (e, flatten(&g))
        }
        HypProb::Joint => {
            let space = problem.candidate_space(HypProb::AsrOnly)?;
            let scored = problem.scored_space(&cfg, &space)?;
            let z = crate::tensor::log_sum_exp(&scored.iter().map(|s| s.0).collect::<Vec<_>>());
            let pbar: Vec<f64> = scored.iter().map(|s| (s.0 - z).exp()).collect();
            let gl: Vec<Vec<f64>> = scored.iter().map(|s| flatten(&s.2)).collect();
            let dim = gl[0].len();
            let mut avg = vec![0.0; dim];
            for (p, g) in pbar.iter().zip(&gl) {
                avg.iter_mut().zip(g).for_each(|(a, v)| *a += p * v);
            }
            let mut grad = vec![0.0; dim];
            let mut e = 0.0;
            for ((p, g), s) in pbar.iter().zip(&gl).zip(&scored) {
                e += p * s.1;
                for i in 0..dim {
                    grad[i] += s.1 * p * (g[i] - avg[i]);
                }
            }
            (e, grad)
        }
    };
    let max_err = got
        .iter()
        .zip(&grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(NBestReport {
        method: cfg.method.name().into(),
        candidates: o.draws.len(),
        value: o.expected_metric,
        reference_value: value,
        value_error: (o.expected_metric - value).abs(),
        max_gradient_error: max_err,
    })
}
