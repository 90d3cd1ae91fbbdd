//! Training objectives: cross-entropies, expected-metric losses with
//! n-best and sampling estimators, and the transcript-free objective.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Inventory;
use crate::decode::{self, candidate_vars, complete_candidate, DecodeError};
use crate::grad::{Axis, Gradients, Tape, Var};
use crate::metrics::{self, semer_counts, MetricsError, SlotEntry};
use crate::model::{ModelError, ModelParameters, NoiseSource, SluNet, Trace};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SeqLossError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("method {method} needs the reference {field}")]
    MissingField { method: Method, field: &'static str },
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::grad::GradError> for SeqLossError {
    fn from(e: crate::grad::GradError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, SeqLossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mWER")]
    MWer,
    #[serde(rename = "mSLU-ASR")]
    MSluAsr,
    #[serde(rename = "mSemER")]
    MSemEr,
    #[serde(rename = "mNLU")]
    MNlu,
    #[serde(rename = "mSLU")]
    MSlu,
    TranscriptFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricComponent {
    Wer,
    Semer,
    Irer,
    IntentCe,
}

/// Which probability the estimator weights candidates by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HypProb {
    /// `p(w)` from the ASR factors alone.
    AsrOnly,
    /// `p(w) · p(s|w) · p(intent|w)`.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularizer {
    CeAsr,
    CeTotal,
    /// Cross-entropy against the model's own 1-best.
    PseudoReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSpec {
    pub metric: &'static [MetricComponent],
    pub hyp_prob: HypProb,
    pub regularizer: Regularizer,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MWer,
        Method::MSluAsr,
        Method::MSemEr,
        Method::MNlu,
        Method::MSlu,
        Method::TranscriptFree,
    ];

    pub fn spec(self) -> MethodSpec {
        use MetricComponent::*;
        match self {
            Method::MWer => MethodSpec {
                metric: &[Wer],
                hyp_prob: HypProb::AsrOnly,
                regularizer: Regularizer::CeAsr,
            },
            Method::MSluAsr => MethodSpec {
                metric: &[Wer, Semer],
                hyp_prob: HypProb::AsrOnly,
                regularizer: Regularizer::CeAsr,
            },
            Method::MSemEr => MethodSpec {
                metric: &[Semer],
                hyp_prob: HypProb::Joint,
                regularizer: Regularizer::CeTotal,
            },
            Method::MNlu => MethodSpec {
                metric: &[Semer, Irer, IntentCe],
                hyp_prob: HypProb::Joint,
                regularizer: Regularizer::CeTotal,
            },
            Method::MSlu => MethodSpec {
                metric: &[Wer, Semer, Irer, IntentCe],
                hyp_prob: HypProb::Joint,
                regularizer: Regularizer::CeTotal,
            },
            Method::TranscriptFree => MethodSpec {
                metric: &[Semer, Irer, IntentCe],
                hyp_prob: HypProb::Joint,
                regularizer: Regularizer::PseudoReference,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::MWer => "mWER",
            Method::MSluAsr => "mSLU-ASR",
            Method::MSemEr => "mSemER",
            Method::MNlu => "mNLU",
            Method::MSlu => "mSLU",
            Method::TranscriptFree => "transcript-free",
        }
    }

    /// Whether the method reads the reference transcript.
    pub fn needs_transcript(self) -> bool {
        let s = self.spec();
        s.metric.contains(&MetricComponent::Wer) || s.regularizer != Regularizer::PseudoReference
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let key = s.to_ascii_lowercase().replace(['_', ' '], "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key || (key == "transcriptfree" && *m == Method::TranscriptFree))
            .ok_or_else(|| format!("unknown method {s:?} (expected mWER, mSLU-ASR, mSemER, mNLU, mSLU, transcript-free)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub wer: f64,
    pub semer: f64,
    pub irer: f64,
    pub intent_ce: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self {
            wer: 1.0,
            semer: 1.0,
            irer: 1.0,
            intent_ce: 1.0,
        }
    }
}

impl MetricWeights {
    pub fn weight(&self, c: MetricComponent) -> f64 {
        match c {
            MetricComponent::Wer => self.wer,
            MetricComponent::Semer => self.semer,
            MetricComponent::Irer => self.irer,
            MetricComponent::IntentCe => self.intent_ce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    NBest { beam: usize },
    Sampling { samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Baseline {
    /// Mean metric of the other samples drawn for the same utterance.
    #[default]
    BatchMean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLossConfig {
    pub method: Method,
    pub lambda: f64,
    pub metric_weights: MetricWeights,
    pub estimator: Estimator,
    pub baseline: Baseline,
    /// Decoder step limit for beams, samples and the pseudo-reference.
    pub max_len: usize,
    /// Put the intent cross-entropy component on the tape instead of
    /// treating it as a constant inside the metric.
    pub differentiable_intent_ce: bool,
}

impl SeqLossConfig {
    pub fn new(method: Method, max_len: usize) -> Self {
        Self {
            method,
            lambda: 0.1,
            metric_weights: MetricWeights::default(),
            estimator: Estimator::NBest { beam: 4 },
            baseline: Baseline::BatchMean,
            max_len,
            differentiable_intent_ce: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SeqLossError::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_len == 0 {
            return Err(SeqLossError::Invalid("max_len must be at least 1".into()));
        }
        match self.estimator {
            Estimator::NBest { beam: 0 } => Err(SeqLossError::Invalid("beam size must be at least 1".into())),
            Estimator::Sampling { samples: 0 } => {
                Err(SeqLossError::Invalid("n_samples must be at least 1".into()))
            }
            Estimator::Sampling { samples } if samples < 2 && self.baseline == Baseline::BatchMean => Err(
                SeqLossError::Invalid("the batch-mean baseline needs at least 2 samples".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// What an objective may read about an utterance.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub frames: &'a Tensor,
    /// `(tokens, slot tags)`; absent for transcript-free data.
    pub transcript: Option<(&'a [usize], &'a [usize])>,
    pub intent: usize,
    pub slots: &'a [SlotEntry],
}

/// Differentiable cross-entropies of a teacher-forced trace.
#[derive(Debug, Clone, Copy)]
pub struct CeVars {
    pub asr: Var,
    pub intent: Var,
    pub slot: Var,
    pub total: Var,
}

pub fn ce_components(tape: &mut Tape, trace: &Trace, tokens: &[usize], slot_tags: &[usize], intent: usize) -> Result<CeVars> {
    if trace.asr.logp.len() != tokens.len() + 1 {
        return Err(SeqLossError::Invalid(format!(
            "trace has {} steps for {} tokens plus EOS",
            trace.asr.logp.len(),
            tokens.len()
        )));
    }
    if slot_tags.len() != tokens.len() {
        return Err(MetricsError::LengthMismatch {
            tokens: tokens.len(),
            tags: slot_tags.len(),
        }
        .into());
    }
    let lp = decode::asr_logprob_var(tape, &trace.asr, tokens, true)?;
    let asr = tape.scale(lp, -1.0);
    let ig = tape.gather(trace.nlu.intent_logp, &[intent])?;
    let ig = tape.sum(ig);
    let intent_v = tape.scale(ig, -1.0);
    let slot = if tokens.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let g = tape.gather(trace.nlu.slot_logp, slot_tags)?;
        let g = tape.sum(g);
        tape.scale(g, -1.0)
    };
    let total = tape.add_all(&[asr, intent_v, slot])?;
    Ok(CeVars {
        asr,
        intent: intent_v,
        slot,
        total,
    })
}

/// Per-component metric values of one candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricParts {
    pub wer: f64,
    pub semer: f64,
    pub irer: f64,
    pub intent_ce: f64,
}

impl MetricParts {
    pub fn get(&self, c: MetricComponent) -> f64 {
        match c {
            MetricComponent::Wer => self.wer,
            MetricComponent::Semer => self.semer,
            MetricComponent::Irer => self.irer,
            MetricComponent::IntentCe => self.intent_ce,
        }
    }
}

/// Weighted sum of `components`.
pub fn combine(parts: &MetricParts, components: &[MetricComponent], weights: &MetricWeights) -> f64 {
    components.iter().map(|&c| weights.weight(c) * parts.get(c)).sum()
}

/// A candidate as seen by the metric.
#[derive(Debug, Clone, Copy)]
pub struct Hypothesis<'a> {
    pub tokens: &'a [usize],
    pub slot_tags: &'a [usize],
    pub intent: usize,
    /// `log p_intent(reference intent)` on this candidate's interface.
    pub ref_intent_logprob: f64,
}

/// Components needed by `components`, computed for one candidate.
pub fn metric_parts(
    hyp: &Hypothesis<'_>,
    example: &Example<'_>,
    components: &[MetricComponent],
    method: Method,
    inventory: &Inventory,
) -> Result<MetricParts> {
    let mut parts = MetricParts::default();
    if components.contains(&MetricComponent::Wer) {
        let (reference, _) = example.transcript.ok_or(SeqLossError::MissingField {
            method,
            field: "transcript",
        })?;
        parts.wer = metrics::wer(reference, hyp.tokens)?;
    }
    if components.contains(&MetricComponent::Semer) || components.contains(&MetricComponent::Irer) {
        let hyp_slots = inventory.slots(hyp.tokens, hyp.slot_tags);
        let c = semer_counts(&example.intent, example.slots, &hyp.intent, &hyp_slots);
        parts.semer = metrics::semer(&c)?;
        parts.irer = if c.errors() > 0 { 1.0 } else { 0.0 };
    }
    parts.intent_ce = -hyp.ref_intent_logprob;
    Ok(parts)
}

/// The method's metric `M(c)`.
pub fn metric_value(hyp: &Hypothesis<'_>, example: &Example<'_>, cfg: &SeqLossConfig, inventory: &Inventory) -> Result<f64> {
    let comps = metric_components(cfg);
    let parts = metric_parts(hyp, example, &comps, cfg.method, inventory)?;
    Ok(combine(&parts, &comps, &cfg.metric_weights))
}

/// Components held constant inside `M`.
fn metric_components(cfg: &SeqLossConfig) -> Vec<MetricComponent> {
    cfg.method
        .spec()
        .metric
        .iter()
        .copied()
        .filter(|&c| !(cfg.differentiable_intent_ce && c == MetricComponent::IntentCe))
        .collect()
}

fn differentiable_ce_weight(cfg: &SeqLossConfig) -> Option<f64> {
    (cfg.differentiable_intent_ce && cfg.method.spec().metric.contains(&MetricComponent::IntentCe))
        .then_some(cfg.metric_weights.intent_ce)
}

/// `Σ_c M(c) · p̄(c)` where `p̄` is the softmax of `logps` (each `1 x 1`).
/// Returns the scalar and the `1 x n` renormalised probabilities.
pub fn nbest_expected_loss(tape: &mut Tape, logps: &[Var], metric: &[f64]) -> Result<(Var, Var)> {
    if logps.is_empty() || logps.len() != metric.len() {
        return Err(SeqLossError::Invalid(format!(
            "{} candidates with {} metric values",
            logps.len(),
            metric.len()
        )));
    }
    let row = tape.concat(logps, Axis::Cols)?;
    let pbar = tape.softmax(row, 1.0)?;
    let m = tape.constant(Tensor::from_vec(metric.len(), 1, metric.to_vec()));
    let e = tape.matmul(pbar, m)?;
    Ok((tape.sum(e), pbar))
}

/// `(1/n) Σ_i (M_i - b_i) log p(c_i)` for samples `c_i`; its gradient is
/// the score-function estimate of `∇E[M]`. With [`Baseline::BatchMean`],
/// `b_i` is the mean metric of the other samples, which keeps the estimate
/// unbiased.
pub fn score_function_surrogate(tape: &mut Tape, logps: &[Var], metric: &[f64], baseline: Baseline) -> Result<Var> {
    let n = logps.len();
    if n == 0 || n != metric.len() {
        return Err(SeqLossError::Invalid(format!("{n} samples with {} metric values", metric.len())));
    }
    if n < 2 && baseline == Baseline::BatchMean {
        return Err(SeqLossError::Invalid("the batch-mean baseline needs at least 2 samples".into()));
    }
    let total: f64 = metric.iter().sum();
    let terms: Vec<Var> = logps
        .iter()
        .zip(metric)
        .map(|(&lp, &m)| {
            let b = match baseline {
                Baseline::BatchMean => (total - m) / (n as f64 - 1.0),
                Baseline::None => 0.0,
            };
            tape.scale(lp, (m - b) / n as f64)
        })
        .collect();
    Ok(tape.add_all(&terms)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// All samples had the same metric under the batch-mean baseline.
    pub degenerate: bool,
    /// Transcript-free utterance whose 1-best was empty.
    pub skipped: bool,
    /// The beam returned fewer hypotheses than requested.
    pub exhausted: bool,
}

/// One scored candidate of an estimator term.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub tokens: Vec<usize>,
    pub ended: bool,
    pub slot_tags: Vec<usize>,
    pub intent: usize,
    pub metric_value: f64,
    /// Log-probability the estimator used (ASR-only or joint).
    pub logprob: f64,
    /// `p̄(c)` for n-best terms, `None` for samples.
    pub renorm_prob: Option<f64>,
}

pub struct EstimatorTerm {
    /// Scalar whose gradient is the estimator.
    pub surrogate: Var,
    /// `E[M]` over the n-best, or the sample mean of `M`.
    pub expected_metric: f64,
    pub candidates: Vec<ScoredCandidate>,
    pub flags: Flags,
}

fn hyp_logprob(tape: &mut Tape, v: &decode::CandidateVars, hp: HypProb) -> Result<Var> {
    Ok(match hp {
        HypProb::AsrOnly => v.asr,
        HypProb::Joint => tape.add_all(&[v.asr, v.slot, v.intent])?,
    })
}

/// A candidate's labels, without scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub tokens: Vec<usize>,
    pub ended: bool,
    pub slot_tags: Vec<usize>,
    pub intent: usize,
}

/// The n-best list or the samples the estimator averages over.
pub fn draw_candidates(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    cfg: &SeqLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Draw>, Flags)> {
    let spec = cfg.method.spec();
    let mut flags = Flags::default();
    let complete = |tape: &mut Tape, tokens: &[usize], ended: bool| -> Result<Draw> {
        let c = complete_candidate(net, tape, enc, tokens, ended)?;
        Ok(Draw {
            tokens: c.tokens,
            ended: c.ended,
            slot_tags: c.slot_tags,
            intent: c.intent,
        })
    };
    let drawn = match cfg.estimator {
        Estimator::NBest { beam } => {
            let hyps = decode::beam_tokens(net, tape, enc, beam, cfg.max_len)?;
            flags.exhausted = hyps.len() < beam;
            hyps.iter()
                .map(|(tokens, ended, _)| complete(tape, tokens, *ended))
                .collect::<Result<Vec<_>>>()?
        }
        Estimator::Sampling { samples } => {
            let mut out = Vec::with_capacity(samples);
            for _ in 0..samples {
                match spec.hyp_prob {
                    HypProb::Joint => {
                        let (tokens, ended, slot_tags, intent) =
                            decode::sample_candidate(net, tape, enc, cfg.max_len, rng)?;
                        out.push(Draw {
                            tokens,
                            ended,
                            slot_tags,
                            intent,
                        });
                    }
                    HypProb::AsrOnly => {
                        let (tokens, ended) = decode::sample_tokens(net, tape, enc, cfg.max_len, rng)?;
                        out.push(complete(tape, &tokens, ended)?);
                    }
                }
            }
            out
        }
    };
    Ok((drawn, flags))
}

/// Estimator term for one utterance on an existing tape.
pub fn estimator_term(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    example: &Example<'_>,
    cfg: &SeqLossConfig,
    inventory: &Inventory,
    rng: &mut ChaCha8Rng,
) -> Result<EstimatorTerm> {
    cfg.validate()?;
    let (drawn, flags) = draw_candidates(net, tape, enc, cfg, rng)?;
    score_draws(net, tape, enc, example, cfg, inventory, &drawn, None, flags)
}

/// Estimator term over given candidates: n-best renormalisation or the
/// score-function average, depending on `cfg.estimator`.
#[allow(clippy::too_many_arguments)]
pub fn score_draws(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    example: &Example<'_>,
    cfg: &SeqLossConfig,
    inventory: &Inventory,
    drawn: &[Draw],
    frozen_metrics: Option<&[f64]>,
    mut flags: Flags,
) -> Result<EstimatorTerm> {
    let spec = cfg.method.spec();
    let comps = metric_components(cfg);
    let ce_weight = differentiable_ce_weight(cfg);
    if drawn.is_empty() {
        return Err(SeqLossError::Invalid("no candidates to score".into()));
    }
    if frozen_metrics.is_some_and(|m| m.len() != drawn.len()) {
        return Err(SeqLossError::Invalid("one frozen metric value per candidate required".into()));
    }
    let mut logps = Vec::with_capacity(drawn.len());
    let mut metric = Vec::with_capacity(drawn.len());
    let mut ref_ce = Vec::with_capacity(drawn.len());
    for (k, d) in drawn.iter().enumerate() {
        let (vars, _) = candidate_vars(net, tape, enc, &d.tokens, d.ended, &d.slot_tags, d.intent)?;
        let ref_lp = tape.gather(vars.intent_logp, &[example.intent])?;
        let ref_lp = tape.sum(ref_lp);
        let hyp = Hypothesis {
            tokens: &d.tokens,
            slot_tags: &d.slot_tags,
            intent: d.intent,
            ref_intent_logprob: tape.scalar(ref_lp),
        };
        let parts = metric_parts(&hyp, example, &comps, cfg.method, inventory)?;
        metric.push(match frozen_metrics {
            Some(m) => m[k],
            None => combine(&parts, &comps, &cfg.metric_weights),
        });
        logps.push(hyp_logprob(tape, &vars, spec.hyp_prob)?);
        ref_ce.push(tape.scale(ref_lp, -1.0));
    }

    let (surrogate, expected, renorm) = match cfg.estimator {
        Estimator::NBest { .. } => {
            let (e, pbar) = nbest_expected_loss(tape, &logps, &metric)?;
            let mut s = e;
            let expected = tape.scalar(e);
            if let Some(w) = ce_weight {
                let ce = tape.concat(&ref_ce, Axis::Rows)?;
                let wce = tape.matmul(pbar, ce)?;
                let wce = tape.sum(wce);
                let wce = tape.scale(wce, w);
                s = tape.add(s, wce)?;
            }
            let renorm = tape.value(pbar).data().iter().map(|&p| Some(p)).collect();
            (s, expected, renorm)
        }
        Estimator::Sampling { .. } => {
            let n = drawn.len() as f64;
            if cfg.baseline == Baseline::BatchMean && metric.iter().all(|&m| m == metric[0]) {
                flags.degenerate = true;
            }
            let mut s = score_function_surrogate(tape, &logps, &metric, cfg.baseline)?;
            if let Some(w) = ce_weight {
                let ce = tape.add_all(&ref_ce)?;
                let ce = tape.scale(ce, w / n);
                s = tape.add(s, ce)?;
            }
            (s, metric.iter().sum::<f64>() / n, vec![None; drawn.len()])
        }
    };

    let candidates = drawn
        .iter()
        .zip(&metric)
        .zip(&logps)
        .zip(renorm)
        .map(|(((d, &m), &lp), r)| ScoredCandidate {
            tokens: d.tokens.clone(),
            ended: d.ended,
            slot_tags: d.slot_tags.clone(),
            intent: d.intent,
            metric_value: m,
            logprob: tape.scalar(lp),
            renorm_prob: r,
        })
        .collect();
    Ok(EstimatorTerm {
        surrogate,
        expected_metric: expected,
        candidates,
        flags,
    })
}

/// The model's own greedy 1-best `(w̃, s̃)`; `None` when it is empty.
pub fn pseudo_reference(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    max_len: usize,
) -> Result<Option<Draw>> {
    let (tokens, ended) = decode::greedy_tokens(net, tape, enc, max_len)?;
    if tokens.is_empty() {
        return Ok(None);
    }
    let best = complete_candidate(net, tape, enc, &tokens, ended)?;
    Ok(Some(Draw {
        tokens,
        ended,
        slot_tags: best.slot_tags,
        intent: best.intent,
    }))
}

/// `CE_intent - Σ_i [log p_w,i(w̃_i) + log p_s,i(s̃_i)]` against a pseudo-reference.
pub fn transcript_free_ce(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &crate::model::Encoded,
    intent: usize,
    pseudo: &Draw,
) -> Result<Var> {
    let (vars, _) = candidate_vars(net, tape, enc, &pseudo.tokens, pseudo.ended, &pseudo.slot_tags, intent)?;
    let lp = tape.add_all(&[vars.asr, vars.slot, vars.intent])?;
    Ok(tape.scale(lp, -1.0))
}

/// Scalar form of the transcript-free cross-entropy from factor probabilities.
pub fn transcript_free_value(token_probs: &[f64], slot_probs: &[f64], intent_prob: f64) -> f64 {
    -intent_prob.ln() - token_probs.iter().chain(slot_probs).map(|p| p.ln()).sum::<f64>()
}

/// Result of one utterance's objective.
#[derive(Debug, Clone)]
pub struct Objective {
    /// Value of the differentiated scalar.
    pub loss: f64,
    pub expected_metric: f64,
    /// Value of the regulariser before weighting.
    pub ce: f64,
    pub gradients: Gradients,
    pub flags: Flags,
    /// Candidates the estimator used.
    pub draws: Vec<Draw>,
    /// Metric value and hyp-probability of each draw.
    pub candidates: Vec<ScoredCandidate>,
    /// Transcript-free pseudo-reference.
    pub pseudo: Option<Draw>,
}

/// Where the estimator's candidates come from.
pub enum CandidateSource<'r> {
    /// Decode or sample from the current model.
    Model(&'r mut ChaCha8Rng),
    /// Re-score fixed candidates (and pseudo-reference), e.g. for
    /// finite-difference checks.
    /// `metrics` optionally pins each candidate's metric value, which
    /// otherwise depends on the parameters through the intent
    /// cross-entropy component.
    Fixed {
        draws: &'r [Draw],
        pseudo: Option<&'r Draw>,
        metrics: Option<&'r [f64]>,
    },
}

/// Estimator term plus `λ ·` the method's cross-entropy, with gradients.
pub fn total_objective(
    params: &ModelParameters,
    inventory: &Inventory,
    example: &Example<'_>,
    cfg: &SeqLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    objective_with(params, inventory, example, cfg, CandidateSource::Model(rng))
}

pub fn objective_with(
    params: &ModelParameters,
    inventory: &Inventory,
    example: &Example<'_>,
    cfg: &SeqLossConfig,
    source: CandidateSource<'_>,
) -> Result<Objective> {
    cfg.validate()?;
    let net = SluNet::new(params);
    let mut tape = Tape::new();
    let enc = net.encode(&mut tape, example.frames)?;
    let spec = cfg.method.spec();
    let mut pseudo = None;
    let ce = match spec.regularizer {
        Regularizer::PseudoReference => {
            let p = match &source {
                CandidateSource::Model(_) => pseudo_reference(&net, &mut tape, &enc, cfg.max_len)?,
                CandidateSource::Fixed { pseudo, .. } => pseudo.cloned(),
            };
            let Some(p) = p else {
                return Ok(Objective {
                    loss: 0.0,
                    expected_metric: 0.0,
                    ce: 0.0,
                    gradients: Gradients::default(),
                    flags: Flags {
                        skipped: true,
                        ..Flags::default()
                    },
                    draws: vec![],
                    candidates: vec![],
                    pseudo: None,
                });
            };
            let v = transcript_free_ce(&net, &mut tape, &enc, example.intent, &p)?;
            pseudo = Some(p);
            v
        }
        Regularizer::CeAsr | Regularizer::CeTotal => {
            let (tokens, tags) = example.transcript.ok_or(SeqLossError::MissingField {
                method: cfg.method,
                field: "transcript",
            })?;
            let trace = net.forced_on(&mut tape, &enc, tokens, true, NoiseSource::None)?;
            let c = ce_components(&mut tape, &trace, tokens, tags, example.intent)?;
            if spec.regularizer == Regularizer::CeAsr {
                c.asr
            } else {
                c.total
            }
        }
    };
    let (draws, frozen, flags) = match source {
        CandidateSource::Model(rng) => {
            let (d, f) = draw_candidates(&net, &mut tape, &enc, cfg, rng)?;
            (d, None, f)
        }
        CandidateSource::Fixed { draws, metrics, .. } => (draws.to_vec(), metrics, Flags::default()),
    };
    let term = score_draws(&net, &mut tape, &enc, example, cfg, inventory, &draws, frozen, flags)?;
    let weighted = tape.scale(ce, cfg.lambda);
    let out = tape.add(term.surrogate, weighted)?;
    let gradients = tape.backward(out)?;
    Ok(Objective {
        loss: tape.scalar(out),
        expected_metric: term.expected_metric,
        ce: tape.scalar(ce),
        gradients,
        flags: term.flags,
        candidates: term.candidates,
        draws,
        pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_metric_arithmetic() {
        let parts = MetricParts {
            wer: 0.5,
            semer: 1.0 / 3.0,
            irer: 1.0,
            intent_ce: 0.2,
        };
        let m = combine(&parts, Method::MSlu.spec().metric, &MetricWeights::default());
        assert!((m - 2.033_333_333_333_333).abs() < 1e-12);
        let w = MetricWeights {
            wer: 2.0,
            ..MetricWeights::default()
        };
        assert!((combine(&parts, Method::MSlu.spec().metric, &w) - 2.533_333_333_333_333).abs() < 1e-12);
    }

    #[test]
    fn two_candidate_expectation() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.75f64.ln()));
        let b = tape.constant(Tensor::scalar(0.25f64.ln()));
        let (e, _) = nbest_expected_loss(&mut tape, &[a, b], &[0.0, 1.0]).unwrap();
        assert!((tape.scalar(e) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_metric_has_zero_gradient() {
        let mut tape = Tape::new();
        let logits = Tensor::row_vector(vec![0.3, -1.2, 2.0]);
        let l = tape.param(0, &logits);
        let lp = tape.log_softmax(l);
        let parts: Vec<Var> = (0..3).map(|i| tape.gather(lp, &[i]).unwrap()).collect();
        let (e, _) = nbest_expected_loss(&mut tape, &parts, &[0.7, 0.7, 0.7]).unwrap();
        assert!((tape.scalar(e) - 0.7).abs() < 1e-12);
        let g = tape.backward(e).unwrap();
        assert!(g.param(0).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn transcript_free_arithmetic() {
        let v = transcript_free_value(&[0.5], &[0.5], 0.25);
        assert!((v - (2f64.ln() + 2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert_eq!(transcript_free_value(&[1.0, 1.0], &[1.0, 1.0], 0.5), 2f64.ln());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("mslu".parse::<Method>().unwrap(), Method::MSlu);
        assert!("mBLEU".parse::<Method>().is_err());
        assert!(!Method::TranscriptFree.needs_transcript());
        assert!(Method::MSemEr.needs_transcript());
    }

    #[test]
    fn config_validation() {
        let mut c = SeqLossConfig::new(Method::MWer, 4);
        assert!(c.validate().is_ok());
        c.estimator = Estimator::Sampling { samples: 1 };
        assert!(c.validate().is_err());
        c.baseline = Baseline::None;
        assert!(c.validate().is_ok());
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }
}
