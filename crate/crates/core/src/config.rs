//! Experiment settings in a `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Later assignments override
//! earlier ones, so command-line overrides are applied with [`ExperimentConfig::set`]
//! after the file.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Inventory;
use crate::model::{InterfaceMode, ModelConfig, NluKind};
use crate::seqloss::{Baseline, Estimator, Method, MetricWeights, SeqLossConfig};
use crate::trainer::{Stage, StagePlan, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed for data order, sampling and noise"),
    ("noise_sigma", "std of additive frame noise in generated corpora"),
    ("frame_dim", "acoustic frame width"),
    ("enc_hidden", "ASR encoder hidden size per direction"),
    ("enc_layers", "ASR encoder bidirectional layers (1-2)"),
    ("embed_dim", "ASR decoder token embedding size"),
    ("dec_hidden", "ASR decoder hidden size"),
    ("attn_dim", "attention key/query size"),
    ("nlu", "NLU encoder: recurrent | self_attention"),
    ("nlu_layers", "self-attention layers (1-2)"),
    ("nlu_embed_dim", "NLU token embedding size"),
    ("nlu_hidden", "NLU hidden size per direction"),
    ("intent_ff_dim", "intent feed-forward width"),
    ("intent_ff_layers", "intent feed-forward layers (1-2)"),
    ("interface", "ASR-to-NLU interface: text | neural | gumbel"),
    ("gumbel_tau", "Gumbel-softmax temperature"),
    ("init_seed", "parameter initialisation seed"),
    ("batch_size", "utterances per update"),
    ("lr_ce", "Adam learning rate for cross-entropy stages"),
    ("lr_seq", "Adam learning rate for sequence-loss stages"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("adam_eps", "Adam epsilon"),
    ("clip_norm", "global gradient-norm clip"),
    ("early_stopping", "keep the best dev epoch of each stage (true | false)"),
    ("max_len", "decoder step limit; 0 = twice the longest training transcript"),
    ("epochs.asr_pretrain", "epochs of ASR pretraining"),
    ("epochs.nlu_train", "epochs of NLU training on the frozen ASR"),
    ("epochs.joint_ce", "epochs of joint cross-entropy training"),
    ("epochs.seq", "epochs of sequence-loss training"),
    ("epochs.transcript_free", "epochs of transcript-free training"),
    ("method", "sequence loss: mWER | mSLU-ASR | mSemER | mNLU | mSLU | transcript-free"),
    ("lambda", "cross-entropy weight in the sequence objective"),
    ("estimator", "nbest | sampling"),
    ("beam_size", "n-best size"),
    ("n_samples", "samples per utterance for the sampling estimator"),
    ("baseline", "batch_mean | none"),
    ("metric_weights.wer", "weight of the WER metric component"),
    ("metric_weights.semer", "weight of the SemER metric component"),
    ("metric_weights.irer", "weight of the IRER metric component"),
    ("metric_weights.intent_ce", "weight of the intent cross-entropy metric component"),
    ("differentiable_intent_ce", "backpropagate through the intent cross-entropy component (true | false)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Epochs {
    pub asr_pretrain: usize,
    pub nlu_train: usize,
    pub joint_ce: usize,
    pub seq: usize,
    pub transcript_free: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub noise_sigma: f64,
    pub frame_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub embed_dim: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub nlu: NluKind,
    pub nlu_embed_dim: usize,
    pub nlu_hidden: usize,
    pub intent_ff_dim: usize,
    pub intent_ff_layers: usize,
    pub interface: InterfaceMode,
    pub init_seed: u64,
    pub batch_size: usize,
    pub lr_ce: f64,
    pub lr_seq: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub early_stopping: bool,
    pub max_len: usize,
    pub epochs: Epochs,
    pub method: Method,
    pub lambda: f64,
    pub estimator: Estimator,
    pub beam_size: usize,
    pub n_samples: usize,
    pub baseline: Baseline,
    pub metric_weights: MetricWeights,
    pub differentiable_intent_ce: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            noise_sigma: 1.0,
            frame_dim: 8,
            enc_hidden: 32,
            enc_layers: 1,
            embed_dim: 24,
            dec_hidden: 48,
            attn_dim: 32,
            nlu: NluKind::Recurrent,
            nlu_embed_dim: 24,
            nlu_hidden: 32,
            intent_ff_dim: 32,
            intent_ff_layers: 1,
            interface: InterfaceMode::Neural,
            init_seed: 1,
            batch_size: 16,
            lr_ce: 1e-3,
            lr_seq: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            early_stopping: true,
            max_len: 0,
            epochs: Epochs {
                asr_pretrain: 12,
                nlu_train: 3,
                joint_ce: 6,
                seq: 2,
                transcript_free: 2,
            },
            method: Method::MSemEr,
            lambda: 0.1,
            estimator: Estimator::NBest { beam: 4 },
            beam_size: 4,
            n_samples: 4,
            baseline: Baseline::BatchMean,
            metric_weights: MetricWeights::default(),
            differentiable_intent_ce: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "noise_sigma" => {
                self.noise_sigma = parse(key, v)?;
                if !(self.noise_sigma >= 0.0) {
                    return Err(bad(key, v, "must be non-negative"));
                }
            }
            "frame_dim" => self.frame_dim = parse(key, v)?,
            "enc_hidden" => self.enc_hidden = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "dec_hidden" => self.dec_hidden = parse(key, v)?,
            "attn_dim" => self.attn_dim = parse(key, v)?,
            "nlu" => {
                let layers = match self.nlu {
                    NluKind::SelfAttention { layers } => layers,
                    NluKind::Recurrent => 1,
                };
                self.nlu = match v {
                    "recurrent" => NluKind::Recurrent,
                    "self_attention" | "self-attention" => NluKind::SelfAttention { layers },
                    _ => return Err(bad(key, v, "expected recurrent or self_attention")),
                }
            }
            "nlu_layers" => {
                let layers = parse(key, v)?;
                if let NluKind::SelfAttention { layers: l } = &mut self.nlu {
                    *l = layers;
                } else {
                    self.nlu = NluKind::SelfAttention { layers };
                }
            }
            "nlu_embed_dim" => self.nlu_embed_dim = parse(key, v)?,
            "nlu_hidden" => self.nlu_hidden = parse(key, v)?,
            "intent_ff_dim" => self.intent_ff_dim = parse(key, v)?,
            "intent_ff_layers" => self.intent_ff_layers = parse(key, v)?,
            "interface" => {
                let tau = match self.interface {
                    InterfaceMode::GumbelToken { tau } => tau,
                    _ => 1.0,
                };
                self.interface = match v {
                    "text" => InterfaceMode::Text,
                    "neural" => InterfaceMode::Neural,
                    "gumbel" => InterfaceMode::GumbelToken { tau },
                    _ => return Err(bad(key, v, "expected text, neural or gumbel")),
                }
            }
            "gumbel_tau" => {
                let tau: f64 = parse(key, v)?;
                if !(tau > 0.0) {
                    return Err(bad(key, v, "must be positive"));
                }
                if let InterfaceMode::GumbelToken { tau: t } = &mut self.interface {
                    *t = tau;
                } else {
                    self.interface = InterfaceMode::GumbelToken { tau };
                }
            }
            "init_seed" => self.init_seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_ce" => self.lr_ce = parse(key, v)?,
            "lr_seq" => self.lr_seq = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "early_stopping" => self.early_stopping = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "epochs.asr_pretrain" => self.epochs.asr_pretrain = parse(key, v)?,
            "epochs.nlu_train" => self.epochs.nlu_train = parse(key, v)?,
            "epochs.joint_ce" => self.epochs.joint_ce = parse(key, v)?,
            "epochs.seq" => self.epochs.seq = parse(key, v)?,
            "epochs.transcript_free" => self.epochs.transcript_free = parse(key, v)?,
            "method" => self.method = v.parse().map_err(|e: String| bad(key, v, &e))?,
            "lambda" => {
                self.lambda = parse(key, v)?;
                if !(self.lambda >= 0.0) {
                    return Err(bad(key, v, "must be non-negative"));
                }
            }
            "estimator" => {
                self.estimator = match v {
                    "nbest" | "n-best" => Estimator::NBest { beam: self.beam_size },
                    "sampling" => Estimator::Sampling {
                        samples: self.n_samples,
                    },
                    _ => return Err(bad(key, v, "expected nbest or sampling")),
                }
            }
            "beam_size" => {
                self.beam_size = parse(key, v)?;
                if let Estimator::NBest { beam } = &mut self.estimator {
                    *beam = self.beam_size;
                }
            }
            "n_samples" => {
                self.n_samples = parse(key, v)?;
                if let Estimator::Sampling { samples } = &mut self.estimator {
                    *samples = self.n_samples;
                }
            }
            "baseline" => {
                self.baseline = match v {
                    "batch_mean" | "batch-mean" | "mean" => Baseline::BatchMean,
                    "none" => Baseline::None,
                    _ => return Err(bad(key, v, "expected batch_mean or none")),
                }
            }
            "metric_weights.wer" => self.metric_weights.wer = parse(key, v)?,
            "metric_weights.semer" => self.metric_weights.semer = parse(key, v)?,
            "metric_weights.irer" => self.metric_weights.irer = parse(key, v)?,
            "metric_weights.intent_ce" => self.metric_weights.intent_ce = parse(key, v)?,
            "differentiable_intent_ce" => self.differentiable_intent_ce = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// All settings in the file format; parsing the output gives `self` back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (nlu, nlu_layers) = match self.nlu {
            NluKind::Recurrent => ("recurrent", 1),
            NluKind::SelfAttention { layers } => ("self_attention", layers),
        };
        let (interface, tau) = match self.interface {
            InterfaceMode::Text => ("text", None),
            InterfaceMode::Neural => ("neural", None),
            InterfaceMode::GumbelToken { tau } => ("gumbel", Some(tau)),
        };
        let estimator = match self.estimator {
            Estimator::NBest { .. } => "nbest",
            Estimator::Sampling { .. } => "sampling",
        };
        let baseline = match self.baseline {
            Baseline::BatchMean => "batch_mean",
            Baseline::None => "none",
        };
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("noise_sigma", self.noise_sigma.to_string());
        put("frame_dim", self.frame_dim.to_string());
        put("enc_hidden", self.enc_hidden.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("dec_hidden", self.dec_hidden.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("nlu", nlu.into());
        if nlu != "recurrent" {
            put("nlu_layers", nlu_layers.to_string());
        }
        put("nlu_embed_dim", self.nlu_embed_dim.to_string());
        put("nlu_hidden", self.nlu_hidden.to_string());
        put("intent_ff_dim", self.intent_ff_dim.to_string());
        put("intent_ff_layers", self.intent_ff_layers.to_string());
        put("interface", interface.into());
        if let Some(t) = tau {
            put("gumbel_tau", t.to_string());
        }
        put("init_seed", self.init_seed.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_ce", self.lr_ce.to_string());
        put("lr_seq", self.lr_seq.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("early_stopping", self.early_stopping.to_string());
        put("max_len", self.max_len.to_string());
        put("epochs.asr_pretrain", self.epochs.asr_pretrain.to_string());
        put("epochs.nlu_train", self.epochs.nlu_train.to_string());
        put("epochs.joint_ce", self.epochs.joint_ce.to_string());
        put("epochs.seq", self.epochs.seq.to_string());
        put("epochs.transcript_free", self.epochs.transcript_free.to_string());
        put("method", self.method.name().into());
        put("lambda", self.lambda.to_string());
        put("beam_size", self.beam_size.to_string());
        put("n_samples", self.n_samples.to_string());
        put("estimator", estimator.into());
        put("baseline", baseline.into());
        put("metric_weights.wer", self.metric_weights.wer.to_string());
        put("metric_weights.semer", self.metric_weights.semer.to_string());
        put("metric_weights.irer", self.metric_weights.irer.to_string());
        put("metric_weights.intent_ce", self.metric_weights.intent_ce.to_string());
        put("differentiable_intent_ce", self.differentiable_intent_ce.to_string());
        s
    }

    pub fn model_config(&self, inventory: &Inventory) -> ModelConfig {
        ModelConfig {
            frame_dim: self.frame_dim,
            vocab_size: inventory.vocabulary.len(),
            n_slot_tags: inventory.slot_tags.len(),
            n_intents: inventory.intents.len(),
            enc_hidden: self.enc_hidden,
            enc_layers: self.enc_layers,
            embed_dim: self.embed_dim,
            dec_hidden: self.dec_hidden,
            attn_dim: self.attn_dim,
            nlu: self.nlu,
            nlu_embed_dim: self.nlu_embed_dim,
            nlu_hidden: self.nlu_hidden,
            intent_ff_dim: self.intent_ff_dim,
            intent_ff_layers: self.intent_ff_layers,
            interface: self.interface,
            init_seed: self.init_seed,
        }
    }

    /// `auto_max_len` is used when `max_len` is 0.
    pub fn resolved_max_len(&self, auto_max_len: usize) -> usize {
        if self.max_len == 0 {
            auto_max_len
        } else {
            self.max_len
        }
    }

    pub fn train_config(&self, max_len: usize) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            lr_ce: self.lr_ce,
            lr_seq: self.lr_seq,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: self.clip_norm,
            max_len,
            early_stopping: self.early_stopping,
            execution: Default::default(),
        }
    }

    pub fn seq_config(&self, method: Method, max_len: usize) -> SeqLossConfig {
        SeqLossConfig {
            method,
            lambda: self.lambda,
            metric_weights: self.metric_weights,
            estimator: self.estimator,
            baseline: self.baseline,
            max_len,
            differentiable_intent_ce: self.differentiable_intent_ce,
        }
    }

    /// ASR pretraining, NLU training on the frozen ASR, joint cross-entropy.
    pub fn ce_plan(&self) -> Vec<StagePlan> {
        vec![
            StagePlan::ce(Stage::AsrPretrain, self.epochs.asr_pretrain),
            StagePlan::ce(Stage::NluTrain, self.epochs.nlu_train),
            StagePlan::ce(Stage::JointCe, self.epochs.joint_ce),
        ]
    }
}

/// `--help` text listing every key.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, d)| format!("  {k:width$}  {d}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = ExperimentConfig::from_text(
            "# comment\nmethod = mSLU\nlambda = 0.5  # trailing\n\nestimator = sampling\nn_samples = 8\nmetric_weights.wer = 2\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::MSlu);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.estimator, Estimator::Sampling { samples: 8 });
        assert_eq!(c.metric_weights.wer, 2.0);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = ExperimentConfig::default();
        c.set("interface", "gumbel").unwrap();
        c.set("gumbel_tau", "0.5").unwrap();
        c.set("nlu_layers", "2").unwrap();
        c.set("estimator", "sampling").unwrap();
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(
            ExperimentConfig::from_text(&ExperimentConfig::default().to_text()).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::from_text("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::from_text("lambda"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(
            ExperimentConfig::from_text("lambda = -1"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(ExperimentConfig::from_text("gumbel_tau = 0").is_err());
        assert!(ExperimentConfig::from_text("method = mBLEU").is_err());
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let c = ExperimentConfig::default();
        let text = c.to_text();
        for line in text.lines() {
            let k = line.split('=').next().unwrap().trim();
            assert!(KEYS.iter().any(|(n, _)| *n == k), "{k} undocumented");
        }
        for (k, _) in KEYS {
            let v = text
                .lines()
                .find_map(|l| l.split_once('=').filter(|(a, _)| a.trim() == *k).map(|(_, b)| b.trim().to_string()));
            if let Some(v) = v {
                ExperimentConfig::default().set(k, &v).unwrap();
            }
        }
    }
}
