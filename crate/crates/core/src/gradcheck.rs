//! Finite-difference checks of every differentiable loss on small random
//! models and inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Inventory, EOS, OUTSIDE};
use crate::exec::Execution;
use crate::grad::{finite_difference_check, sample_coordinates, FdReport};
use crate::metrics::SlotEntry;
use crate::model::{InterfaceMode, ModelConfig, ModelParameters, NluKind};
use crate::rng;
use crate::seqloss::{objective_with, Baseline, CandidateSource, Estimator, Method, SeqLossConfig};
use crate::tensor::Tensor;
use crate::trainer::{ce_loss, Sample, Stage, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossPath {
    AsrCe,
    NluCe,
    JointCe,
    /// n-best expected metric plus weighted cross-entropy.
    NBest,
    /// Score-function surrogate over fixed samples.
    Sampling,
    TranscriptFree,
}

impl LossPath {
    pub const ALL: [LossPath; 6] = [
        LossPath::AsrCe,
        LossPath::NluCe,
        LossPath::JointCe,
        LossPath::NBest,
        LossPath::Sampling,
        LossPath::TranscriptFree,
    ];
}

/// A random model and a labelled utterance.
#[derive(Debug, Clone)]
pub struct Case {
    pub inventory: Inventory,
    pub params: ModelParameters,
    pub sample: Sample,
    pub max_len: usize,
}

/// `index` selects the interface: even is Text, odd is Neural.
pub fn random_case(seed: u64, index: usize) -> Case {
    let mut r = rng::stream(seed, &[0x6C4E, index as u64]);
    let vocab = r.random_range(3..=6);
    let n_tags = r.random_range(2..=3);
    let n_intents = r.random_range(2..=3);
    let words = std::iter::once(EOS.to_string())
        .chain((1..vocab).map(|i| format!("w{i}")))
        .collect();
    let tags = std::iter::once(OUTSIDE.to_string())
        .chain((1..n_tags).map(|i| format!("T{i}")))
        .collect();
    let intents = (0..n_intents).map(|i| format!("I{i}")).collect();
    let inventory = Inventory::new(words, tags, intents);
    let mut dim = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let config = ModelConfig {
        frame_dim: dim(2, 3),
        vocab_size: vocab,
        n_slot_tags: n_tags,
        n_intents,
        enc_hidden: dim(2, 4),
        enc_layers: dim(1, 2),
        embed_dim: dim(2, 4),
        dec_hidden: dim(2, 5),
        attn_dim: dim(2, 4),
        nlu: match dim(0, 2) {
            0 => NluKind::Recurrent,
            n => NluKind::SelfAttention { layers: n },
        },
        nlu_embed_dim: dim(2, 4),
        nlu_hidden: dim(2, 4),
        intent_ff_dim: dim(2, 4),
        intent_ff_layers: dim(1, 2),
        interface: if index.is_multiple_of(2) {
            InterfaceMode::Text
        } else {
            InterfaceMode::Neural
        },
        init_seed: r.random(),
    };
    let params = ModelParameters::init(&config).expect("random config is valid");
    let frames_len = r.random_range(2..=5);
    let frames = Tensor::from_vec(
        frames_len,
        config.frame_dim,
        (0..frames_len * config.frame_dim).map(|_| r.random_range(-1.5..1.5)).collect(),
    );
    let n_tokens = r.random_range(1..=3);
    let tokens: Vec<usize> = (0..n_tokens).map(|_| r.random_range(1..vocab)).collect();
    let slot_tags: Vec<usize> = (0..n_tokens).map(|_| r.random_range(0..n_tags)).collect();
    let intent = r.random_range(0..n_intents);
    let slots: Vec<SlotEntry> = inventory.slots(&tokens, &slot_tags);
    Case {
        inventory,
        params,
        sample: Sample {
            id: format!("fd{index}"),
            frames,
            transcript: Some((tokens, slot_tags)),
            intent,
            slots,
        },
        max_len: n_tokens + 2,
    }
}

fn with_tensors(base: &ModelParameters, tensors: &[Tensor]) -> ModelParameters {
    let mut p = base.clone();
    for (dst, src) in p.tensors_mut().iter_mut().zip(tensors) {
        dst.data_mut().copy_from_slice(src.data());
    }
    p
}

fn seq_config(case: &Case, path: LossPath, index: usize, r: &mut ChaCha8Rng) -> SeqLossConfig {
    let transcript_methods = [Method::MWer, Method::MSluAsr, Method::MSemEr, Method::MNlu, Method::MSlu];
    let method = match path {
        LossPath::TranscriptFree => Method::TranscriptFree,
        _ => transcript_methods[index / 2 % transcript_methods.len()],
    };
    let mut cfg = SeqLossConfig::new(method, case.max_len);
    cfg.lambda = r.random_range(0.05..1.0);
    cfg.differentiable_intent_ce = r.random_bool(0.5);
    cfg.estimator = match path {
        LossPath::Sampling => Estimator::Sampling {
            samples: r.random_range(2..=4),
        },
        _ => Estimator::NBest {
            beam: r.random_range(1..=4),
        },
    };
    cfg.baseline = if r.random_bool(0.5) {
        Baseline::BatchMean
    } else {
        Baseline::None
    };
    cfg
}

/// Checks one path of `case` at `coords` randomly chosen coordinates.
pub fn check_path(case: &Case, path: LossPath, index: usize, coords: usize, eps: f64) -> Result<FdReport, TrainError> {
    let mut r = rng::stream(index as u64, &[0xFDC, path as u64]);
    let params = &case.params;
    let stage = match path {
        LossPath::AsrCe => Some(Stage::AsrPretrain),
        LossPath::NluCe => Some(Stage::NluTrain),
        LossPath::JointCe => Some(Stage::JointCe),
        _ => None,
    };
    let (analytic, mut f): (Vec<Tensor>, Box<dyn FnMut(&[Tensor]) -> f64>) = match stage {
        Some(stage) => {
            let (_, g) = ce_loss(params, &case.sample, stage, 0)?;
            let f = move |t: &[Tensor]| {
                ce_loss(&with_tensors(params, t), &case.sample, stage, 0)
                    .expect("ce loss")
                    .0
            };
            (params.dense_gradients(&g), Box::new(f))
        }
        None => {
            let cfg = seq_config(case, path, index, &mut r);
            let mut sample = case.sample.clone();
            if path == LossPath::TranscriptFree {
                sample.transcript = None;
            }
            let mut draw_rng = rng::stream(index as u64, &[0xD4A, path as u64]);
            let first = objective_with(
                params,
                &case.inventory,
                &sample.example(),
                &cfg,
                CandidateSource::Model(&mut draw_rng),
            )?;
            let metrics: Vec<f64> = first.candidates.iter().map(|c| c.metric_value).collect();
            let (draws, pseudo) = (first.draws, first.pseudo);
            let inv = &case.inventory;
            let f = move |t: &[Tensor]| {
                let source = CandidateSource::Fixed {
                    draws: &draws,
                    pseudo: pseudo.as_ref(),
                    metrics: Some(&metrics),
                };
                objective_with(&with_tensors(params, t), inv, &sample.example(), &cfg, source)
                    .expect("objective")
                    .loss
            };
            (params.dense_gradients(&first.gradients), Box::new(f))
        }
    };
    let at = sample_coordinates(params.tensors(), coords, &mut r);
    Ok(finite_difference_check(&mut f, params.tensors(), &analytic, &at, eps))
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub path: LossPath,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub configurations: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub per_path: Vec<PathSummary>,
    /// `(configuration, path, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, LossPath, f64, f64)>,
}

/// Runs every path on `configurations` random cases.
pub fn grad_check(
    configurations: usize,
    seed: u64,
    coords: usize,
    eps: f64,
    execution: Execution,
) -> Result<GradCheckReport, TrainError> {
    let results = execution.map_range(configurations, |i| {
        let case = random_case(seed, i);
        LossPath::ALL
            .iter()
            .map(|&p| check_path(&case, p, i, coords, eps).map(|r| (i, p, r)))
            .collect::<Result<Vec<_>, _>>()
    });
    let mut report = GradCheckReport {
        configurations,
        checked: 0,
        max_rel_error: 0.0,
        per_path: LossPath::ALL
            .iter()
            .map(|&path| PathSummary {
                path,
                checked: 0,
                max_rel_error: 0.0,
            })
            .collect(),
        worst: None,
    };
    for rows in results {
        for (i, path, r) in rows? {
            let s = report.per_path.iter_mut().find(|s| s.path == path).expect("listed path");
            s.checked += r.checked;
            s.max_rel_error = s.max_rel_error.max(r.max_rel_error);
            report.checked += r.checked;
            if report.worst.is_none() || r.max_rel_error > report.max_rel_error {
                report.max_rel_error = r.max_rel_error;
                report.worst = Some((i, path, r.worst_analytic, r.worst_numeric));
            }
        }
    }
    Ok(report)
}
