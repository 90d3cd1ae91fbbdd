//! Synthetic SLU corpora: grammar-driven text plus pseudo-audio.
//!
//! A [`Grammar`] lists intent templates such as `"set an <NotificationType>
//! for <Time>"` and one lexicon per slot. Each word of the vocabulary owns a
//! fixed acoustic signature (2 to 4 Gaussian frames); an utterance's frames
//! are the concatenated signatures of its words, each frame repeated a
//! jittered number of times, plus i.i.d. Gaussian noise.
//!
//! # Dataset file
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"utt-7-000000","tokens":["wake","me","up","at","noon"],
//!  "slot_tags":["O","O","O","O","Time"],"intent":"SetNotification",
//!  "frames":[[0.12,-1.5,...],...]}
//! ```
//!
//! Frames are 32-bit values written as the decimal expansion of their exact
//! 64-bit widening, so reading a file back reproduces every bit.
//!
//! Semantic-only files (used for transcript-free training) carry `id`,
//! `intent`, `slots` (`[{"name":..,"value":..}]`) and `frames`; a record with
//! a `tokens` or `slot_tags` field is rejected.
//!
//! # Grammar file
//!
//! ```text
//! {"intents":[{"name":"PlayMusic","templates":["play some <Genre>"]}, ...],
//!  "slot_lexicons":[{"name":"Genre","values":["jazz","hip hop"]}, ...],
//!  "vocabulary":["<eos>", ...]}        // optional; derived when absent
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::exec::Execution;
use crate::metrics::SlotEntry;
use crate::rng;
use crate::tensor::Tensor;

pub const EOS: &str = "<eos>";
pub const OUTSIDE: &str = "O";
pub const EOS_ID: usize = 0;
pub const OUTSIDE_ID: usize = 0;

const DEFAULT_GRAMMAR: &str = include_str!("../grammars/default.json");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("grammar: intent {intent:?} template {template:?} references unknown slot lexicon {slot:?}")]
    UnknownSlot {
        intent: String,
        template: String,
        slot: String,
    },
    #[error("grammar: {0}")]
    InvalidGrammar(String),
    #[error("line {line}: field `{field}`: {reason}")]
    Malformed {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("record {id:?} (line {line}): {reason}")]
    Inconsistent {
        line: usize,
        id: String,
        reason: String,
    },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("cannot generate an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentTemplates {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotLexicon {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub intents: Vec<IntentTemplates>,
    pub slot_lexicons: Vec<SlotLexicon>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
}

/// Index spaces shared by the corpus, the model and the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    /// Index 0 is [`EOS`].
    pub vocabulary: Vec<String>,
    /// Index 0 is [`OUTSIDE`]; the rest are slot names in lexicon order.
    pub slot_tags: Vec<String>,
    pub intents: Vec<String>,
    word_ids: HashMap<String, usize>,
}

impl Inventory {
    pub fn new(vocabulary: Vec<String>, slot_tags: Vec<String>, intents: Vec<String>) -> Self {
        let word_ids = vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            vocabulary,
            slot_tags,
            intents,
            word_ids,
        }
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_ids.get(w).copied()
    }

    pub fn tag_id(&self, t: &str) -> Option<usize> {
        self.slot_tags.iter().position(|x| x == t)
    }

    pub fn intent_id(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|x| x == name)
    }

    pub fn words(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.vocabulary[i].as_str()).collect()
    }

    pub fn tags(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.slot_tags[i].as_str()).collect()
    }

    /// Slot name/value pairs of a tagged word sequence.
    pub fn slots(&self, tokens: &[usize], tags: &[usize]) -> Vec<SlotEntry> {
        crate::metrics::extract_slots(&self.words(tokens), &self.tags(tags))
            .expect("token and tag sequences from the model have equal length")
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Word(usize),
    Slot(usize),
}

/// A validated grammar with resolved indices.
#[derive(Debug, Clone)]
pub struct CompiledGrammar {
    pub grammar: Grammar,
    pub inventory: Inventory,
    templates: Vec<(usize, Vec<Piece>)>,
    /// slot -> value -> word ids
    lexicon: Vec<Vec<Vec<usize>>>,
}

impl Grammar {
    pub fn default_grammar() -> Self {
        serde_json::from_str(DEFAULT_GRAMMAR).expect("bundled grammar parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `"default"` selects the bundled grammar; anything else is a path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "default" {
            Ok(Self::default_grammar())
        } else {
            Self::from_json(&std::fs::read_to_string(spec)?)
        }
    }

    pub fn compile(&self) -> Result<CompiledGrammar> {
        if self.intents.len() < 2 {
            return Err(CorpusError::InvalidGrammar(
                "at least 2 intents are required".into(),
            ));
        }
        if self.slot_lexicons.len() < 2 {
            return Err(CorpusError::InvalidGrammar(
                "at least 2 slot lexicons are required".into(),
            ));
        }
        let mut slot_names: Vec<String> = Vec::new();
        for lex in &self.slot_lexicons {
            if lex.name == OUTSIDE || lex.name.starts_with('<') {
                return Err(CorpusError::InvalidGrammar(format!(
                    "slot lexicon name {:?} is reserved",
                    lex.name
                )));
            }
            if slot_names.contains(&lex.name) {
                return Err(CorpusError::InvalidGrammar(format!(
                    "duplicate slot lexicon {:?}",
                    lex.name
                )));
            }
            if lex.values.iter().all(|v| v.split_whitespace().next().is_none()) {
                return Err(CorpusError::InvalidGrammar(format!(
                    "slot lexicon {:?} has no non-empty values",
                    lex.name
                )));
            }
            slot_names.push(lex.name.clone());
        }
        let mut intent_names: Vec<String> = Vec::new();
        for it in &self.intents {
            if intent_names.contains(&it.name) {
                return Err(CorpusError::InvalidGrammar(format!(
                    "duplicate intent {:?}",
                    it.name
                )));
            }
            if it.templates.is_empty() {
                return Err(CorpusError::InvalidGrammar(format!(
                    "intent {:?} has no templates",
                    it.name
                )));
            }
            intent_names.push(it.name.clone());
        }

        // Words in first-appearance order: templates, then lexicons.
        let mut derived: Vec<String> = vec![EOS.to_string()];
        let push_word = |w: &str, derived: &mut Vec<String>| {
            if !derived.iter().any(|x| x == w) {
                derived.push(w.to_string());
            }
        };
        let mut raw_templates = Vec::new();
        for (ii, it) in self.intents.iter().enumerate() {
            for tpl in &it.templates {
                let mut pieces = Vec::new();
                for tok in tpl.split_whitespace() {
                    if let Some(name) = tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
                        let slot = slot_names.iter().position(|s| s == name).ok_or_else(|| {
                            CorpusError::UnknownSlot {
                                intent: it.name.clone(),
                                template: tpl.clone(),
                                slot: name.to_string(),
                            }
                        })?;
                        pieces.push(Err(slot));
                    } else {
                        push_word(tok, &mut derived);
                        pieces.push(Ok(tok.to_string()));
                    }
                }
                if pieces.is_empty() {
                    return Err(CorpusError::InvalidGrammar(format!(
                        "intent {:?} has an empty template",
                        it.name
                    )));
                }
                raw_templates.push((ii, pieces));
            }
        }
        for lex in &self.slot_lexicons {
            for v in &lex.values {
                for w in v.split_whitespace() {
                    push_word(w, &mut derived);
                }
            }
        }

        let vocabulary = if self.vocabulary.is_empty() {
            derived
        } else {
            if self.vocabulary.first().map(String::as_str) != Some(EOS) {
                return Err(CorpusError::InvalidGrammar(format!(
                    "vocabulary must start with {EOS}"
                )));
            }
            for w in &derived {
                if !self.vocabulary.contains(w) {
                    return Err(CorpusError::InvalidGrammar(format!(
                        "word {w:?} is producible but missing from the vocabulary"
                    )));
                }
            }
            let mut seen = std::collections::HashSet::new();
            for w in &self.vocabulary {
                if !seen.insert(w) {
                    return Err(CorpusError::InvalidGrammar(format!(
                        "duplicate vocabulary entry {w:?}"
                    )));
                }
            }
            self.vocabulary.clone()
        };

        let mut slot_tags = vec![OUTSIDE.to_string()];
        slot_tags.extend(slot_names);
        let inventory = Inventory::new(vocabulary, slot_tags, intent_names);
        let id = |w: &str| inventory.word_id(w).expect("word registered above");
        let templates = raw_templates
            .into_iter()
            .map(|(ii, pieces)| {
                let pieces = pieces
                    .into_iter()
                    .map(|p| match p {
                        Ok(w) => Piece::Word(id(&w)),
                        Err(s) => Piece::Slot(s),
                    })
                    .collect();
                (ii, pieces)
            })
            .collect();
        let lexicon = self
            .slot_lexicons
            .iter()
            .map(|lex| {
                lex.values
                    .iter()
                    .map(|v| v.split_whitespace().map(id).collect::<Vec<_>>())
                    .filter(|v| !v.is_empty())
                    .collect()
            })
            .collect();
        Ok(CompiledGrammar {
            grammar: self.clone(),
            inventory,
            templates,
            lexicon,
        })
    }
}

impl CompiledGrammar {
    pub fn n_templates(&self) -> usize {
        self.templates.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Vec<Vec<f32>>,
    pub tokens: Vec<usize>,
    pub slot_tags: Vec<usize>,
    pub intent: usize,
}

/// An utterance with NLU labels only; it has no transcript to read.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticUtterance {
    pub id: String,
    pub frames: Vec<Vec<f32>>,
    pub intent: usize,
    pub slots: Vec<SlotEntry>,
}

pub fn frames_tensor(frames: &[Vec<f32>]) -> Tensor {
    let rows: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.iter().map(|&v| f64::from(v)).collect())
        .collect();
    Tensor::from_rows(&rows)
}

impl Utterance {
    pub fn frames_tensor(&self) -> Tensor {
        frames_tensor(&self.frames)
    }

    /// Drops the transcript and keeps the slot name/value pairs.
    pub fn semantics(&self, inventory: &Inventory) -> SemanticUtterance {
        SemanticUtterance {
            id: self.id.clone(),
            frames: self.frames.clone(),
            intent: self.intent,
            slots: inventory.slots(&self.tokens, &self.slot_tags),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub frame_dim: usize,
    pub duration_jitter: usize,
    pub noise_sigma: f64,
    pub bank_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            duration_jitter: 1,
            noise_sigma: 0.0,
            bank_seed: 0x5EED_0001,
        }
    }
}

/// Per-word base signatures. [`EOS`] has none.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticSignatureBank {
    pub signatures: Vec<Vec<Vec<f32>>>,
    pub frame_dim: usize,
}

impl AcousticSignatureBank {
    pub fn new(vocab_len: usize, frame_dim: usize, seed: u64) -> Self {
        let signatures = (0..vocab_len)
            .map(|w| {
                if w == EOS_ID {
                    return Vec::new();
                }
                let mut r = rng::stream(seed, &[w as u64]);
                let n = r.random_range(2..=4);
                (0..n)
                    .map(|_| {
                        (0..frame_dim)
                            .map(|_| {
                                let v: f64 = StandardNormal.sample(&mut r);
                                v as f32
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            signatures,
            frame_dim,
        }
    }
}

pub fn generate_corpus(
    grammar: &CompiledGrammar,
    n: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<Utterance>> {
    let config = CorpusConfig {
        noise_sigma,
        ..CorpusConfig::default()
    };
    generate_corpus_with(grammar, n, seed, &config)
}

pub fn generate_corpus_with(
    grammar: &CompiledGrammar,
    n: usize,
    seed: u64,
    config: &CorpusConfig,
) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let bank = AcousticSignatureBank::new(
        grammar.inventory.vocabulary.len(),
        config.frame_dim,
        config.bank_seed,
    );
    Ok(Execution::Parallel.map_range(n, |i| sample_utterance(grammar, &bank, config, seed, i)))
}

fn sample_utterance(
    grammar: &CompiledGrammar,
    bank: &AcousticSignatureBank,
    config: &CorpusConfig,
    seed: u64,
    index: usize,
) -> Utterance {
    let mut r = rng::stream(seed, &[index as u64]);
    let (intent, pieces) = &grammar.templates[r.random_range(0..grammar.templates.len())];
    let mut tokens = Vec::new();
    let mut slot_tags = Vec::new();
    for piece in pieces {
        match piece {
            Piece::Word(w) => {
                tokens.push(*w);
                slot_tags.push(OUTSIDE_ID);
            }
            Piece::Slot(s) => {
                let values = &grammar.lexicon[*s];
                for &w in &values[r.random_range(0..values.len())] {
                    tokens.push(w);
                    slot_tags.push(s + 1);
                }
            }
        }
    }
    let mut frames = Vec::new();
    for &w in &tokens {
        for sig in &bank.signatures[w] {
            let reps = 1 + r.random_range(0..=config.duration_jitter);
            for _ in 0..reps {
                let frame = sig
                    .iter()
                    .map(|&v| {
                        if config.noise_sigma > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut r);
                            (f64::from(v) + config.noise_sigma * z) as f32
                        } else {
                            v
                        }
                    })
                    .collect();
                frames.push(frame);
            }
        }
    }
    Utterance {
        id: format!("utt-{seed}-{index:06}"),
        frames,
        tokens,
        slot_tags,
        intent: *intent,
    }
}

fn frames_json(frames: &[Vec<f32>]) -> Value {
    Value::Array(
        frames
            .iter()
            .map(|f| Value::Array(f.iter().map(|&v| json!(f64::from(v))).collect()))
            .collect(),
    )
}

pub fn write_dataset(utts: &[Utterance], inventory: &Inventory, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        let rec = json!({
            "id": u.id,
            "tokens": inventory.words(&u.tokens),
            "slot_tags": inventory.tags(&u.slot_tags),
            "intent": inventory.intents[u.intent],
            "frames": frames_json(&u.frames),
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_semantic_dataset(
    utts: &[SemanticUtterance],
    inventory: &Inventory,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in utts {
        let rec = json!({
            "id": u.id,
            "intent": inventory.intents[u.intent],
            "slots": u.slots,
            "frames": frames_json(&u.frames),
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            field: "<record>",
            reason: e.to_string(),
        })?;
        match value {
            Value::Object(m) => out.push((lineno, m)),
            _ => {
                return Err(CorpusError::Malformed {
                    line: lineno,
                    field: "<record>",
                    reason: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(out)
}

struct Fields<'a> {
    line: usize,
    map: &'a serde_json::Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn bad(&self, field: &'static str, reason: impl Into<String>) -> CorpusError {
        CorpusError::Malformed {
            line: self.line,
            field,
            reason: reason.into(),
        }
    }

    fn get(&self, field: &'static str) -> Result<&'a Value> {
        self.map
            .get(field)
            .ok_or_else(|| self.bad(field, "missing"))
    }

    fn string(&self, field: &'static str) -> Result<&'a str> {
        self.get(field)?
            .as_str()
            .ok_or_else(|| self.bad(field, "expected a string"))
    }

    fn strings(&self, field: &'static str) -> Result<Vec<&'a str>> {
        let arr = self
            .get(field)?
            .as_array()
            .ok_or_else(|| self.bad(field, "expected an array of strings"))?;
        arr.iter()
            .map(|v| v.as_str().ok_or_else(|| self.bad(field, "expected an array of strings")))
            .collect()
    }

    fn frames(&self) -> Result<Vec<Vec<f32>>> {
        let arr = self
            .get("frames")?
            .as_array()
            .ok_or_else(|| self.bad("frames", "expected an array of arrays"))?;
        let mut out = Vec::with_capacity(arr.len());
        let mut width = None;
        for row in arr {
            let row = row
                .as_array()
                .ok_or_else(|| self.bad("frames", "expected an array of arrays"))?;
            let vals = row
                .iter()
                .map(|v| {
                    v.as_f64()
                        .map(|x| x as f32)
                        .ok_or_else(|| self.bad("frames", "expected numbers"))
                })
                .collect::<Result<Vec<f32>>>()?;
            if *width.get_or_insert(vals.len()) != vals.len() {
                return Err(self.bad("frames", "frames have unequal dimension"));
            }
            out.push(vals);
        }
        Ok(out)
    }

    fn intent(&self, inventory: &Inventory) -> Result<usize> {
        let name = self.string("intent")?;
        inventory
            .intent_id(name)
            .ok_or_else(|| self.bad("intent", format!("unknown intent {name:?}")))
    }
}

pub fn read_dataset(path: &Path, inventory: &Inventory) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (line, map) in read_records(path)? {
        let f = Fields { line, map: &map };
        let id = f.string("id")?.to_string();
        let tokens = f
            .strings("tokens")?
            .into_iter()
            .map(|w| {
                inventory
                    .word_id(w)
                    .ok_or_else(|| f.bad("tokens", format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let slot_tags = f
            .strings("slot_tags")?
            .into_iter()
            .map(|t| {
                inventory
                    .tag_id(t)
                    .ok_or_else(|| f.bad("slot_tags", format!("unknown slot tag {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if slot_tags.len() != tokens.len() {
            return Err(CorpusError::Inconsistent {
                line,
                id,
                reason: format!(
                    "slot_tags has {} entries but tokens has {}",
                    slot_tags.len(),
                    tokens.len()
                ),
            });
        }
        let intent = f.intent(inventory)?;
        let frames = f.frames()?;
        if frames.is_empty() && !tokens.is_empty() {
            return Err(CorpusError::Inconsistent {
                line,
                id,
                reason: "frames are empty but tokens are not".into(),
            });
        }
        out.push(Utterance {
            id,
            frames,
            tokens,
            slot_tags,
            intent,
        });
    }
    Ok(out)
}

pub fn read_semantic_dataset(path: &Path, inventory: &Inventory) -> Result<Vec<SemanticUtterance>> {
    let mut out = Vec::new();
    for (line, map) in read_records(path)? {
        let f = Fields { line, map: &map };
        for forbidden in ["tokens", "slot_tags"] {
            if map.contains_key(forbidden) {
                return Err(CorpusError::Malformed {
                    line,
                    field: if forbidden == "tokens" { "tokens" } else { "slot_tags" },
                    reason: "transcript fields are not accepted in semantic-only records".into(),
                });
            }
        }
        let id = f.string("id")?.to_string();
        let intent = f.intent(inventory)?;
        let slots: Vec<SlotEntry> = serde_json::from_value(f.get("slots")?.clone())
            .map_err(|e| f.bad("slots", e.to_string()))?;
        for s in &slots {
            if inventory.tag_id(&s.name).is_none_or(|t| t == OUTSIDE_ID) || s.value.is_empty() {
                return Err(f.bad("slots", format!("invalid slot entry {s:?}")));
            }
        }
        let frames = f.frames()?;
        if frames.is_empty() {
            return Err(f.bad("frames", "empty"));
        }
        out.push(SemanticUtterance {
            id,
            frames,
            intent,
            slots,
        });
    }
    Ok(out)
}

/// Deterministic shuffle-and-cut into (train, dev, test).
///
/// Train and dev sizes are `round(n * fraction)`; test takes the remainder.
pub fn split_dataset<T: Clone>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(fractions));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5117]));
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_dev = (((n as f64) * fractions[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}
