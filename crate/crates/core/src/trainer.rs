//! Staged training: ASR pretraining, NLU on a frozen ASR, joint
//! cross-entropy, and sequence-loss or transcript-free fine-tuning.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Inventory, SemanticUtterance, Utterance};
use crate::decode::{self, DecodeError};
use crate::exec::Execution;
use crate::grad::{Gradients, Tape};
use crate::metrics::{MetricAccumulator, MetricReport, MetricsError, SlotEntry};
use crate::model::{quantize, ModelError, ModelParameters, NoiseSource, SluNet};
use crate::rng;
use crate::seqloss::{self, ce_components, Example, Flags, Method, SeqLossConfig, SeqLossError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    SeqLoss(#[from] SeqLossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss in stage {stage} epoch {epoch} on utterance {utterance}")]
    NonFinite {
        stage: Stage,
        epoch: usize,
        utterance: String,
        /// Parameters before the failing update.
        params: Box<ModelParameters>,
    },
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::grad::GradError> for TrainError {
    fn from(e: crate::grad::GradError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AsrPretrain,
    NluTrain,
    JointCe,
    JointSeqLoss,
    TranscriptFree,
}

impl Stage {
    fn key(self) -> u64 {
        match self {
            Stage::AsrPretrain => 1,
            Stage::NluTrain => 2,
            Stage::JointCe => 3,
            Stage::JointSeqLoss => 4,
            Stage::TranscriptFree => 5,
        }
    }

    pub fn is_sequence_level(self) -> bool {
        matches!(self, Stage::JointSeqLoss | Stage::TranscriptFree)
    }

    /// Which tensors the stage may update.
    pub fn updates(self, params: &ModelParameters, id: usize) -> bool {
        match self {
            Stage::AsrPretrain => params.is_asr(id),
            Stage::NluTrain => params.is_nlu(id),
            _ => true,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::AsrPretrain => "asr_pretrain",
            Stage::NluTrain => "nlu_train",
            Stage::JointCe => "joint_ce",
            Stage::JointSeqLoss => "joint_seqloss",
            Stage::TranscriptFree => "transcript_free",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr_ce: f64,
    pub lr_seq: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Decoder step limit for evaluation and sequence losses.
    pub max_len: usize,
    /// Keep the best epoch on the dev set instead of the last one.
    pub early_stopping: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl TrainConfig {
    pub fn new(seed: u64, max_len: usize) -> Self {
        Self {
            seed,
            batch_size: 16,
            lr_ce: 1e-3,
            lr_seq: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            max_len,
            early_stopping: true,
            execution: Execution::default(),
        }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        if stage.is_sequence_level() {
            self.lr_seq
        } else {
            self.lr_ce
        }
    }
}

/// Twice the longest reference transcript.
pub fn default_max_len(utts: &[Utterance]) -> usize {
    2 * utts.iter().map(|u| u.tokens.len()).max().unwrap_or(1).max(1)
}

/// An utterance prepared for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub frames: Tensor,
    /// `(tokens, slot tags)`; `None` for transcript-free data.
    pub transcript: Option<(Vec<usize>, Vec<usize>)>,
    pub intent: usize,
    pub slots: Vec<SlotEntry>,
}

impl Sample {
    pub fn from_utterance(u: &Utterance, inventory: &Inventory) -> Self {
        Self {
            id: u.id.clone(),
            frames: u.frames_tensor(),
            transcript: Some((u.tokens.clone(), u.slot_tags.clone())),
            intent: u.intent,
            slots: inventory.slots(&u.tokens, &u.slot_tags),
        }
    }

    pub fn from_semantic(u: &SemanticUtterance) -> Self {
        Self {
            id: u.id.clone(),
            frames: crate::corpus::frames_tensor(&u.frames),
            transcript: None,
            intent: u.intent,
            slots: u.slots.clone(),
        }
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            frames: &self.frames,
            transcript: self.transcript.as_ref().map(|(t, s)| (t.as_slice(), s.as_slice())),
            intent: self.intent,
            slots: &self.slots,
        }
    }

    fn transcript(&self) -> Result<(&[usize], &[usize])> {
        self.transcript
            .as_ref()
            .map(|(t, s)| (t.as_slice(), s.as_slice()))
            .ok_or_else(|| TrainError::Invalid(format!("utterance {} has no transcript", self.id)))
    }
}

pub fn prepare(utts: &[Utterance], inventory: &Inventory) -> Vec<Sample> {
    utts.iter().map(|u| Sample::from_utterance(u, inventory)).collect()
}

pub fn prepare_semantic(utts: &[SemanticUtterance]) -> Vec<Sample> {
    utts.iter().map(Sample::from_semantic).collect()
}

/// Corpus metrics of greedy decodes. WER covers samples with transcripts.
pub fn evaluate(
    params: &ModelParameters,
    data: &[Sample],
    inventory: &Inventory,
    max_len: usize,
    execution: Execution,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let decoded = execution.map(data, |_, s| decode::greedy_decode(params, &s.frames, max_len));
    let mut acc = MetricAccumulator::new();
    for (s, c) in data.iter().zip(decoded) {
        let c = c?;
        let slots = c.slots(inventory);
        acc.add(
            s.transcript.as_ref().map(|(t, _)| (t.as_slice(), c.tokens.as_slice())),
            s.intent,
            &s.slots,
            c.intent,
            &slots,
        );
    }
    Ok(acc.report()?)
}

/// Corpus metrics of the NLU run on gold transcripts instead of decodes.
pub fn evaluate_on_transcripts(
    params: &ModelParameters,
    data: &[Sample],
    inventory: &Inventory,
    execution: Execution,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let decoded = execution.map(data, |_, s| -> Result<decode::Candidate> {
        let net = SluNet::new(params);
        let mut tape = Tape::new();
        let (tokens, _) = s.transcript()?;
        let enc = net.encode(&mut tape, &s.frames)?;
        Ok(decode::complete_candidate(&net, &mut tape, &enc, tokens, true)?)
    });
    let mut acc = MetricAccumulator::new();
    for (s, c) in data.iter().zip(decoded) {
        let c = c?;
        let slots = c.slots(inventory);
        acc.add(
            s.transcript.as_ref().map(|(t, _)| (t.as_slice(), c.tokens.as_slice())),
            s.intent,
            &s.slots,
            c.intent,
            &slots,
        );
    }
    Ok(acc.report()?)
}

/// Adam with per-tensor moments. Updated values are rounded to f32.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParameters, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Updates tensors where `mask[i]`; others are left untouched.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Tensor], mask: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w = quantize(*w - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(k));
    }
    norm
}

/// Cross-entropy loss of a CE stage for one sample, with gradients.
pub fn ce_loss(params: &ModelParameters, sample: &Sample, stage: Stage, noise_seed: u64) -> Result<(f64, Gradients)> {
    let net = SluNet::new(params);
    let mut tape = Tape::new();
    let (tokens, tags) = sample.transcript()?;
    let enc = net.encode(&mut tape, &sample.frames)?;
    let loss = match stage {
        Stage::AsrPretrain => {
            let asr = net.force(&mut tape, &enc, tokens, true)?;
            let lp = decode::asr_logprob_var(&mut tape, &asr, tokens, true)?;
            tape.scale(lp, -1.0)
        }
        Stage::NluTrain | Stage::JointCe => {
            let mut r = rng::stream(noise_seed, &[]);
            let trace = net.forced_on(&mut tape, &enc, tokens, true, NoiseSource::Gumbel(&mut r))?;
            let ce = ce_components(&mut tape, &trace, tokens, tags, sample.intent)?;
            if stage == Stage::NluTrain {
                tape.add(ce.intent, ce.slot)?
            } else {
                ce.total
            }
        }
        _ => return Err(TrainError::Invalid(format!("{stage} is not a cross-entropy stage"))),
    };
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricReport,
    pub flags: FlagCounts,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub degenerate: usize,
    pub skipped: usize,
    pub exhausted: usize,
}

impl FlagCounts {
    fn add(&mut self, f: &Flags) {
        self.degenerate += usize::from(f.degenerate);
        self.skipped += usize::from(f.skipped);
        self.exhausted += usize::from(f.exhausted);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub entries: Vec<EpochLog>,
}

impl RunLog {
    pub fn push(&mut self, e: EpochLog) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.entries.extend(other.entries);
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serialises") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { entries })
    }

    /// The log with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|e| e.wall_clock_secs = 0.0);
        out
    }

    pub fn last_dev(&self) -> Option<&MetricReport> {
        self.entries.last().map(|e| &e.dev)
    }
}

/// One stage of a training plan.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    /// Required for sequence-level stages.
    pub seq: Option<SeqLossConfig>,
}

impl StagePlan {
    pub fn ce(stage: Stage, epochs: usize) -> Self {
        Self { stage, epochs, seq: None }
    }

    pub fn seq(stage: Stage, epochs: usize, cfg: SeqLossConfig) -> Self {
        Self {
            stage,
            epochs,
            seq: Some(cfg),
        }
    }
}

fn add_sparse(acc: &mut [Tensor], g: &Gradients) {
    for (id, t) in g.iter() {
        acc[id].add_assign(t);
    }
}

fn dev_score(stage: Stage, r: &MetricReport) -> f64 {
    if stage == Stage::AsrPretrain {
        r.wer
    } else {
        r.semer
    }
}

/// Runs one stage from `start`. Returns the kept parameters and the log.
pub fn train_stage(
    start: &ModelParameters,
    plan: &StagePlan,
    train: &[Sample],
    dev: &[Sample],
    inventory: &Inventory,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, RunLog)> {
    let stage = plan.stage;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::Invalid("training and dev sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    let seq_cfg = match (stage.is_sequence_level(), &plan.seq) {
        (true, Some(s)) => {
            let want_tf = stage == Stage::TranscriptFree;
            if want_tf != (s.method == Method::TranscriptFree) {
                return Err(TrainError::Invalid(format!("stage {stage} cannot run method {}", s.method)));
            }
            s.validate()?;
            Some(s)
        }
        (true, None) => return Err(TrainError::Invalid(format!("stage {stage} needs a sequence-loss config"))),
        (false, _) => None,
    };
    if stage == Stage::TranscriptFree && train.iter().any(|s| s.transcript.is_some()) {
        return Err(TrainError::Invalid("transcript-free training data must not carry transcripts".into()));
    }

    let mask: Vec<bool> = (0..start.len()).map(|i| stage.updates(start, i)).collect();
    let digest = start.config.digest();
    let mut params = start.clone();
    let mut adam = Adam::new(&params, cfg.lr(stage), cfg.beta1, cfg.beta2, cfg.eps);
    let mut log = RunLog::default();
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..plan.epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5EF1, stage.key(), epoch as u64]));
        let mut loss_sum = 0.0;
        let mut flags = FlagCounts::default();
        for batch in order.chunks(cfg.batch_size) {
            let results = cfg.execution.map(batch, |_, &i| {
                let keys = [0xB47C, stage.key(), epoch as u64, i as u64];
                match seq_cfg {
                    None => ce_loss(&params, &train[i], stage, rng::derive_seed(cfg.seed, &keys))
                        .map(|(l, g)| (l, g, Flags::default())),
                    Some(sc) => {
                        let mut r = rng::stream(cfg.seed, &keys);
                        seqloss::total_objective(&params, inventory, &train[i].example(), sc, &mut r)
                            .map(|o| (o.loss, o.gradients, o.flags))
                            .map_err(TrainError::from)
                    }
                }
            });
            let mut acc: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            for (&i, r) in batch.iter().zip(results) {
                let (l, g, f) = r?;
                if !l.is_finite() {
                    return Err(TrainError::NonFinite {
                        stage,
                        epoch,
                        utterance: train[i].id.clone(),
                        params: Box::new(params),
                    });
                }
                loss_sum += l;
                flags.add(&f);
                add_sparse(&mut acc, &g);
            }
            let k = 1.0 / batch.len() as f64;
            for (g, &m) in acc.iter_mut().zip(&mask) {
                if m {
                    g.scale_assign(k);
                } else {
                    *g = Tensor::zeros(g.rows(), g.cols());
                }
            }
            clip_global_norm(&mut acc, cfg.clip_norm);
            adam.step(&mut params, &acc, &mask);
        }
        let report = evaluate(&params, dev, inventory, cfg.max_len, cfg.execution)?;
        let score = dev_score(stage, &report);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, params.clone()));
        }
        log.push(EpochLog {
            stage,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev: report,
            flags,
            seed: cfg.seed,
            config_digest: digest.clone(),
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        });
    }
    let kept = match best {
        Some((_, p)) if cfg.early_stopping => p,
        _ => params,
    };
    Ok((kept, log))
}

/// Applies the transcript-free objective to data that has no transcripts.
pub fn transcript_free_update(
    start: &ModelParameters,
    train: &[SemanticUtterance],
    dev: &[SemanticUtterance],
    inventory: &Inventory,
    seq: &SeqLossConfig,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, RunLog)> {
    let plan = StagePlan::seq(Stage::TranscriptFree, epochs, seq.clone());
    train_stage(start, &plan, &prepare_semantic(train), &prepare_semantic(dev), inventory, cfg)
}

/// Runs stages in order, each from the previous stage's kept parameters.
pub fn run_plan(
    start: &ModelParameters,
    plans: &[StagePlan],
    train: &[Sample],
    dev: &[Sample],
    inventory: &Inventory,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, RunLog)> {
    let mut params = start.clone();
    let mut log = RunLog::default();
    for plan in plans {
        let (p, l) = train_stage(&params, plan, train, dev, inventory, cfg)?;
        params = p;
        log.extend(l);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 4.0]), Tensor::row_vector(vec![0.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-12);
        let mut g = vec![Tensor::row_vector(vec![0.3])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].get(0, 0), 0.3);
    }

    #[test]
    fn run_log_round_trips_through_jsonl() {
        let report = MetricReport {
            wer: 0.1,
            semer: 0.2,
            irer: 0.3,
            icer: 0.0,
            icer_macro: 0.0,
            counts: Default::default(),
            word_errors: 1,
            reference_words: 10,
            utterances: 2,
        };
        let mut log = RunLog::default();
        log.push(EpochLog {
            stage: Stage::JointCe,
            epoch: 0,
            train_loss: 1.5,
            dev: report,
            flags: FlagCounts::default(),
            seed: 3,
            config_digest: "ab".into(),
            wall_clock_secs: 0.25,
        });
        let back = RunLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.without_timing().entries[0].wall_clock_secs, 0.0);
    }
}
