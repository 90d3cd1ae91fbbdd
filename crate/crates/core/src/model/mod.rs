//! Joint SLU network: attention encoder-decoder ASR, an NLU tagger and
//! intent classifier, and the interface between them.
//!
//! - [`ModelConfig`] fixes every size; [`ModelParameters`] holds the named
//!   weight tensors in a fixed order.
//! - [`net`] has the forward computations on a [`crate::grad::Tape`].
//! - [`checkpoint`] reads and writes the binary checkpoint format.

pub mod checkpoint;
pub mod net;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Inventory;
use crate::grad::{GradError, Gradients};
use crate::rng;
use crate::tensor::Tensor;

pub use net::{AsrTrace, DecoderState, Encoded, NluOutput, NoiseSource, PosteriorTrace, SluNet, StepOutput, Trace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("frame dimension {got} does not match configured {expected}")]
    FrameDim { expected: usize, got: usize },
    #[error("empty frame sequence")]
    EmptyFrames,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("gumbel temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InterfaceMode {
    /// NLU embeds the ASR token sequence.
    Text,
    /// NLU embeds a straight-through hard token sampled with Gumbel noise.
    GumbelToken { tau: f64 },
    /// NLU sees `[token embedding ; decoder hidden output]`.
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NluKind {
    Recurrent,
    SelfAttention { layers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub n_slot_tags: usize,
    pub n_intents: usize,
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
}

impl ModelConfig {
    pub fn for_inventory(inventory: &Inventory, frame_dim: usize) -> Self {
        Self {
            frame_dim,
            vocab_size: inventory.vocabulary.len(),
            n_slot_tags: inventory.slot_tags.len(),
            n_intents: inventory.intents.len(),
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
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_dim", self.frame_dim),
            ("vocab_size", self.vocab_size),
            ("n_slot_tags", self.n_slot_tags),
            ("n_intents", self.n_intents),
            ("enc_hidden", self.enc_hidden),
            ("embed_dim", self.embed_dim),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
            ("nlu_embed_dim", self.nlu_embed_dim),
            ("nlu_hidden", self.nlu_hidden),
            ("intent_ff_dim", self.intent_ff_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(1..=2).contains(&self.enc_layers) {
            return Err(ModelError::Invalid("enc_layers must be 1 or 2".into()));
        }
        if !(1..=2).contains(&self.intent_ff_layers) {
            return Err(ModelError::Invalid("intent_ff_layers must be 1 or 2".into()));
        }
        if let NluKind::SelfAttention { layers } = self.nlu {
            if !(1..=2).contains(&layers) {
                return Err(ModelError::Invalid("self-attention layers must be 1 or 2".into()));
            }
        }
        if let InterfaceMode::GumbelToken { tau } = self.interface {
            if !(tau > 0.0) {
                return Err(ModelError::InvalidTemperature(tau));
            }
        }
        Ok(())
    }

    /// Width of one NLU input step.
    pub fn nlu_input_dim(&self) -> usize {
        match self.interface {
            InterfaceMode::Neural => self.nlu_embed_dim + self.dec_hidden,
            InterfaceMode::Text | InterfaceMode::GumbelToken { .. } => self.nlu_embed_dim,
        }
    }

    /// Width of the NLU encoder output fed to the slot and intent heads.
    pub fn nlu_output_dim(&self) -> usize {
        2 * self.nlu_hidden
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIds {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmIds {
    pub fwd: LstmIds,
    pub bwd: LstmIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsrIds {
    pub encoder: Vec<BiLstmIds>,
    pub dec_embed: usize,
    pub dec_bos: usize,
    pub decoder: LstmIds,
    pub att_wk: usize,
    pub att_wq: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub vocab_w: usize,
    pub vocab_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayerIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NluEncoderIds {
    Recurrent(BiLstmIds),
    SelfAttention {
        in_w: usize,
        in_b: usize,
        layers: Vec<AttentionLayerIds>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NluIds {
    pub embed: usize,
    pub encoder: NluEncoderIds,
    pub slot_w: usize,
    pub slot_b: usize,
    pub ff: Vec<(usize, usize)>,
    pub intent_w: usize,
    pub intent_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub asr: AsrIds,
    pub nlu: NluIds,
}

#[derive(Clone, Copy)]
enum Init {
    /// uniform(-0.08, 0.08)
    Recurrent,
    /// normal(0, 1/sqrt(fan_in))
    Scaled(usize),
    Zeros,
    /// zeros with the forget-gate block set to 1
    LstmBias(usize),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmIds {
        LstmIds {
            wx: self.add(format!("{prefix}.wx"), input, 4 * hidden, Init::Recurrent),
            wh: self.add(format!("{prefix}.wh"), hidden, 4 * hidden, Init::Recurrent),
            b: self.add(format!("{prefix}.b"), 1, 4 * hidden, Init::LstmBias(hidden)),
            hidden,
        }
    }

    fn bilstm(&mut self, prefix: &str, input: usize, hidden: usize) -> BiLstmIds {
        BiLstmIds {
            fwd: self.lstm(&format!("{prefix}.fwd"), input, hidden),
            bwd: self.lstm(&format!("{prefix}.bwd"), input, hidden),
        }
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.w"), input, output, Init::Scaled(input)),
            self.add(format!("{prefix}.b"), 1, output, Init::Zeros),
        )
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let enc_out = 2 * c.enc_hidden;
    let mut encoder = Vec::new();
    let mut input = c.frame_dim;
    for l in 0..c.enc_layers {
        encoder.push(b.bilstm(&format!("asr.enc.l{l}"), input, c.enc_hidden));
        input = enc_out;
    }
    let dec_embed = b.add("asr.dec.embed".into(), c.vocab_size, c.embed_dim, Init::Scaled(c.embed_dim));
    let dec_bos = b.add("asr.dec.bos".into(), 1, c.embed_dim, Init::Scaled(c.embed_dim));
    let decoder = b.lstm("asr.dec.lstm", c.embed_dim + enc_out, c.dec_hidden);
    let att_wk = b.add("asr.att.wk".into(), enc_out, c.attn_dim, Init::Scaled(enc_out));
    let att_wq = b.add("asr.att.wq".into(), c.dec_hidden, c.attn_dim, Init::Scaled(c.dec_hidden));
    let (out_w, out_b) = b.linear("asr.dec.out", c.dec_hidden + enc_out, c.dec_hidden);
    let (vocab_w, vocab_b) = b.linear("asr.dec.vocab", c.dec_hidden, c.vocab_size);
    let asr = AsrIds {
        encoder,
        dec_embed,
        dec_bos,
        decoder,
        att_wk,
        att_wq,
        out_w,
        out_b,
        vocab_w,
        vocab_b,
    };

    let embed = b.add(
        "nlu.embed".into(),
        c.vocab_size,
        c.nlu_embed_dim,
        Init::Scaled(c.nlu_embed_dim),
    );
    let width = c.nlu_output_dim();
    let nlu_input = c.nlu_input_dim();
    let encoder = match c.nlu {
        NluKind::Recurrent => NluEncoderIds::Recurrent(b.bilstm("nlu.enc", nlu_input, c.nlu_hidden)),
        NluKind::SelfAttention { layers } => {
            let (in_w, in_b) = b.linear("nlu.enc.in", nlu_input, width);
            let layers = (0..layers)
                .map(|l| {
                    let p = format!("nlu.enc.sa{l}");
                    let wq = b.add(format!("{p}.wq"), width, width, Init::Scaled(width));
                    let wk = b.add(format!("{p}.wk"), width, width, Init::Scaled(width));
                    let wv = b.add(format!("{p}.wv"), width, width, Init::Scaled(width));
                    let wo = b.add(format!("{p}.wo"), width, width, Init::Scaled(width));
                    let (w1, b1) = b.linear(&format!("{p}.ff1"), width, width);
                    let (w2, b2) = b.linear(&format!("{p}.ff2"), width, width);
                    AttentionLayerIds {
                        wq,
                        wk,
                        wv,
                        wo,
                        w1,
                        b1,
                        w2,
                        b2,
                    }
                })
                .collect();
            NluEncoderIds::SelfAttention { in_w, in_b, layers }
        }
    };
    let (slot_w, slot_b) = b.linear("nlu.slot", width, c.n_slot_tags);
    let mut ff = Vec::new();
    let mut input = width;
    for l in 0..c.intent_ff_layers {
        ff.push(b.linear(&format!("nlu.intent.ff{l}"), input, c.intent_ff_dim));
        input = c.intent_ff_dim;
    }
    let (intent_w, intent_b) = b.linear("nlu.intent.out", input, c.n_intents);
    let nlu = NluIds {
        embed,
        encoder,
        slot_w,
        slot_b,
        ff,
        intent_w,
        intent_b,
    };
    (Layout { asr, nlu }, b)
}

/// Rounds to the nearest 32-bit value. Parameters are kept on the f32 grid
/// so checkpoints round-trip exactly.
pub fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParameters {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .enumerate()
            .map(|(i, (&(r, c), init))| {
                let mut rng = rng::stream(config.init_seed, &[0x1417, i as u64]);
                let data = match *init {
                    Init::Recurrent => (0..r * c).map(|_| rng.random_range(-0.08..0.08)).collect(),
                    Init::Scaled(fan_in) => {
                        let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                        (0..r * c).map(|_| n.sample(&mut rng)).collect()
                    }
                    Init::Zeros => vec![0.0; r * c],
                    Init::LstmBias(h) => (0..r * c)
                        .map(|k| if (h..2 * h).contains(&k) { 1.0 } else { 0.0 })
                        .collect(),
                };
                let mut t = Tensor::from_vec(r, c, data);
                t.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
                t
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors; names and shapes must match
    /// the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        if named.len() != b.names.len() {
            return Err(ModelError::Invalid(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, &(r, c))) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != [r, c] {
                return Err(ModelError::Invalid(format!(
                    "tensor {name:?} {:?} does not match expected {want:?} [{r}, {c}]",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            layout,
            names: b.names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_asr(&self, id: usize) -> bool {
        self.names[id].starts_with("asr.")
    }

    pub fn is_nlu(&self, id: usize) -> bool {
        self.names[id].starts_with("nlu.")
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same structure with different values (used by finite differences).
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        Self {
            tensors: tensors.to_vec(),
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Expands sparse gradients into one tensor per parameter (zeros where
    /// a parameter took no part).
    pub fn dense_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                grads
                    .param(i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Grammar;

    fn config() -> ModelConfig {
        let g = Grammar::default_grammar().compile().unwrap();
        ModelConfig::for_inventory(&g.inventory, 8)
    }

    #[test]
    fn head_widths_follow_the_inventory() {
        let c = config();
        let p = ModelParameters::init(&c).unwrap();
        assert_eq!(p.tensor(p.layout.asr.vocab_w).cols(), c.vocab_size);
        assert_eq!(p.tensor(p.layout.nlu.slot_w).cols(), c.n_slot_tags);
        assert_eq!(p.tensor(p.layout.nlu.intent_w).cols(), c.n_intents);
        assert!(p.all_finite());
        assert!(p.names().iter().all(|n| n.starts_with("asr.") || n.starts_with("nlu.")));
    }

    #[test]
    fn init_is_deterministic_and_on_the_f32_grid() {
        let c = config();
        let a = ModelParameters::init(&c).unwrap();
        let b = ModelParameters::init(&c).unwrap();
        assert_eq!(a, b);
        for t in a.tensors() {
            for &v in t.data() {
                assert_eq!(v, quantize(v));
            }
        }
        let other = ModelParameters::init(&ModelConfig { init_seed: 1, ..c }).unwrap();
        assert_ne!(a.tensors(), other.tensors());
    }

    #[test]
    fn neural_interface_width_is_embedding_plus_hidden() {
        let mut c = config();
        assert_eq!(c.nlu_input_dim(), c.nlu_embed_dim + c.dec_hidden);
        c.interface = InterfaceMode::Text;
        assert_eq!(c.nlu_input_dim(), c.nlu_embed_dim);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = config();
        c.interface = InterfaceMode::GumbelToken { tau: 0.0 };
        assert!(matches!(ModelParameters::init(&c), Err(ModelError::InvalidTemperature(_))));
        let mut c = config();
        c.enc_layers = 3;
        assert!(ModelParameters::init(&c).is_err());
    }

    #[test]
    fn digest_changes_with_config() {
        let c = config();
        let mut d = c.clone();
        d.dec_hidden += 1;
        assert_ne!(c.digest(), d.digest());
        assert_eq!(c.digest(), config().digest());
    }
}
