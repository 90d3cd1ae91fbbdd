//! Greedy and beam decoding, joint candidates and n-best renormalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Inventory, EOS_ID};
use crate::grad::{Tape, Var};
use crate::metrics::SlotEntry;
use crate::model::net::sample_log_row;
use crate::model::{AsrTrace, Encoded, ModelError, ModelParameters, NoiseSource, SluNet, Trace};
use crate::tensor::{argmax, log_sum_exp, Tensor};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("every candidate has zero probability")]
    AllZero,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// A joint hypothesis `{tokens, slot tags, intent}` with its log-factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Word tokens, without EOS.
    pub tokens: Vec<usize>,
    /// Whether the decoder emitted EOS (otherwise it hit the length limit).
    pub ended: bool,
    pub slot_tags: Vec<usize>,
    pub intent: usize,
    pub asr_logprob: f64,
    pub slot_logprob: f64,
    pub intent_logprob: f64,
    /// Full intent log-distribution for this candidate's interface.
    pub intent_logprobs: Vec<f64>,
}

impl Candidate {
    pub fn joint_logprob(&self) -> f64 {
        self.asr_logprob + self.slot_logprob + self.intent_logprob
    }

    pub fn slots(&self, inventory: &Inventory) -> Vec<SlotEntry> {
        inventory.slots(&self.tokens, &self.slot_tags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub candidates: Vec<Candidate>,
    /// Joint probabilities renormalised over `candidates`.
    pub renorm_probs: Vec<f64>,
    /// Fewer than the requested number of hypotheses were reachable.
    pub exhausted: bool,
}

/// Differentiable log-factors of a candidate.
#[derive(Debug, Clone, Copy)]
pub struct CandidateVars {
    pub asr: Var,
    pub slot: Var,
    pub intent: Var,
    /// `1 x n_intents`
    pub intent_logp: Var,
}

/// Sum of log token factors of `tokens` (plus EOS when `ended`) in a forced trace.
pub fn asr_logprob_var(tape: &mut Tape, asr: &AsrTrace, tokens: &[usize], ended: bool) -> Result<Var> {
    let mut parts = Vec::with_capacity(asr.logp.len());
    for (i, &lp) in asr.logp.iter().enumerate() {
        let t = if i < tokens.len() {
            tokens[i]
        } else if ended && i == tokens.len() {
            EOS_ID
        } else {
            return Err(DecodeError::Invalid("trace longer than candidate".into()));
        };
        parts.push(tape.gather(lp, &[t]).map_err(ModelError::from)?);
    }
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.add_all(&parts).map_err(ModelError::from)?;
    Ok(tape.sum(all))
}

/// Log-factors of `{tokens, slot_tags, intent}` under a forced pass on `enc`.
pub fn candidate_vars(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &Encoded,
    tokens: &[usize],
    ended: bool,
    slot_tags: &[usize],
    intent: usize,
) -> Result<(CandidateVars, Trace)> {
    if slot_tags.len() != tokens.len() {
        return Err(DecodeError::Invalid(format!(
            "{} slot tags for {} tokens",
            slot_tags.len(),
            tokens.len()
        )));
    }
    let trace = net.forced_on(tape, enc, tokens, ended, NoiseSource::None)?;
    let asr = asr_logprob_var(tape, &trace.asr, tokens, ended)?;
    let slot = if tokens.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let g = tape.gather(trace.nlu.slot_logp, slot_tags).map_err(ModelError::from)?;
        tape.sum(g)
    };
    let ig = tape.gather(trace.nlu.intent_logp, &[intent]).map_err(ModelError::from)?;
    let intent_v = tape.sum(ig);
    Ok((
        CandidateVars {
            asr,
            slot,
            intent: intent_v,
            intent_logp: trace.nlu.intent_logp,
        },
        trace,
    ))
}

/// Runs the NLU on a token hypothesis and takes argmax slots and intent.
pub fn complete_candidate(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &Encoded,
    tokens: &[usize],
    ended: bool,
) -> Result<Candidate> {
    let trace = net.forced_on(tape, enc, tokens, ended, NoiseSource::None)?;
    let asr_lp = asr_logprob_var(tape, &trace.asr, tokens, ended)?;
    let asr_logprob = tape.scalar(asr_lp);
    let slot_logp = tape.value(trace.nlu.slot_logp);
    let mut slot_tags = Vec::with_capacity(tokens.len());
    let mut slot_logprob = 0.0;
    for r in 0..tokens.len() {
        let row = slot_logp.row(r);
        let t = argmax(row);
        slot_tags.push(t);
        slot_logprob += row[t];
    }
    let intent_logprobs = tape.value(trace.nlu.intent_logp).data().to_vec();
    let intent = argmax(&intent_logprobs);
    Ok(Candidate {
        tokens: tokens.to_vec(),
        ended,
        slot_tags,
        intent,
        asr_logprob,
        slot_logprob,
        intent_logprob: intent_logprobs[intent],
        intent_logprobs,
    })
}

/// Argmax token per step until EOS or `max_len` steps.
pub fn greedy_tokens(net: &SluNet<'_>, tape: &mut Tape, enc: &Encoded, max_len: usize) -> Result<(Vec<usize>, bool)> {
    if max_len == 0 {
        return Err(DecodeError::Invalid("max_len must be at least 1".into()));
    }
    let mut state = net.initial_state(tape);
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let out = net.decode_step(tape, enc, &state)?;
        let t = argmax(tape.value(out.logp).data());
        if t == EOS_ID {
            return Ok((tokens, true));
        }
        tokens.push(t);
        state = out.next_state(t);
    }
    Ok((tokens, false))
}

pub fn greedy_decode(params: &ModelParameters, frames: &Tensor, max_len: usize) -> Result<Candidate> {
    let net = SluNet::new(params);
    let mut tape = Tape::new();
    let enc = net.encode(&mut tape, frames)?;
    let (tokens, ended) = greedy_tokens(&net, &mut tape, &enc, max_len)?;
    complete_candidate(&net, &mut tape, &enc, &tokens, ended)
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    state: crate::model::DecoderState,
}

/// Token hypotheses `(tokens, ended, asr_logprob)` ranked by log-probability.
pub fn beam_tokens(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &Encoded,
    beam: usize,
    max_len: usize,
) -> Result<Vec<(Vec<usize>, bool, f64)>> {
    if beam == 0 {
        return Err(DecodeError::Invalid("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(DecodeError::Invalid("max_len must be at least 1".into()));
    }
    let mut live = vec![Hyp {
        tokens: vec![],
        score: 0.0,
        state: net.initial_state(tape),
    }];
    let mut finished: Vec<(Vec<usize>, bool, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::new();
        let mut outs = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let out = net.decode_step(tape, enc, &hyp.state)?;
            for (v, &lp) in tape.value(out.logp).data().iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    expansions.push((hyp.score + lp, h, v));
                }
            }
            outs.push(out);
        }
        // Stable sort keeps (hypothesis, token) order among equal scores.
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for &(score, h, v) in expansions.iter().take(beam) {
            if v == EOS_ID {
                finished.push((live[h].tokens.clone(), true, score));
            } else {
                let mut tokens = live[h].tokens.clone();
                tokens.push(v);
                next.push(Hyp {
                    tokens,
                    score,
                    state: outs[h].next_state(v),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= beam {
            let mut s: Vec<f64> = finished.iter().map(|f| f.2).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            if live.iter().all(|h| h.score < s[beam - 1]) {
                live.clear();
                break;
            }
        }
    }
    finished.extend(live.into_iter().map(|h| (h.tokens, false, h.score)));
    finished.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut out: Vec<(Vec<usize>, bool, f64)> = Vec::new();
    for f in finished {
        if !out.iter().any(|o| o.0 == f.0) {
            out.push(f);
        }
    }
    out.truncate(beam);
    Ok(out)
}

pub fn beam_decode(params: &ModelParameters, frames: &Tensor, beam: usize, max_len: usize) -> Result<NBestList> {
    let net = SluNet::new(params);
    let mut tape = Tape::new();
    let enc = net.encode(&mut tape, frames)?;
    let hyps = beam_tokens(&net, &mut tape, &enc, beam, max_len)?;
    let mut candidates = Vec::with_capacity(hyps.len());
    for (tokens, ended, _) in &hyps {
        candidates.push(complete_candidate(&net, &mut tape, &enc, tokens, *ended)?);
    }
    nbest_from(candidates, beam)
}

/// Drops zero-probability candidates and renormalises joint probabilities.
pub fn nbest_from(candidates: Vec<Candidate>, requested: usize) -> Result<NBestList> {
    let candidates: Vec<Candidate> = candidates
        .into_iter()
        .filter(|c| c.joint_logprob() > f64::NEG_INFINITY)
        .collect();
    let logps: Vec<f64> = candidates.iter().map(Candidate::joint_logprob).collect();
    let renorm_probs = renormalize(&logps)?;
    Ok(NBestList {
        exhausted: candidates.len() < requested,
        candidates,
        renorm_probs,
    })
}

/// `log(p_intent · Π p_w · Π p_s)`; a zero factor gives `-inf`.
pub fn candidate_probability(intent_prob: f64, token_probs: &[f64], slot_probs: &[f64]) -> f64 {
    std::iter::once(intent_prob)
        .chain(token_probs.iter().copied())
        .chain(slot_probs.iter().copied())
        .map(f64::ln)
        .sum()
}

/// `p(c) / Σ p(c')` from log-probabilities.
pub fn renormalize(logps: &[f64]) -> Result<Vec<f64>> {
    let z = log_sum_exp(logps);
    if z == f64::NEG_INFINITY {
        return Err(DecodeError::AllZero);
    }
    Ok(logps.iter().map(|&l| (l - z).exp()).collect())
}

/// Every terminal token sequence of a decoder with `vocab` entries (EOS at
/// 0) and `max_len` steps, as `(tokens, ended)`.
pub fn enumerate_sequences(vocab: usize, max_len: usize) -> Vec<(Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for step in 0..max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            out.push((prefix.clone(), true));
            for v in 1..vocab {
                let mut p = prefix.clone();
                p.push(v);
                if step + 1 == max_len {
                    out.push((p, false));
                } else {
                    next.push(p);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Every slot-tag sequence of length `len` over `n_tags` tags.
pub fn enumerate_tags(n_tags: usize, len: usize) -> Vec<Vec<usize>> {
    (0..len).fold(vec![vec![]], |acc, _| {
        acc.into_iter()
            .flat_map(|p| {
                (0..n_tags).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect()
    })
}

/// Ancestral sample of a token sequence.
pub fn sample_tokens<R: Rng>(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &Encoded,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, bool)> {
    let mut state = net.initial_state(tape);
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let out = net.decode_step(tape, enc, &state)?;
        let t = sample_log_row(tape.value(out.logp).data(), rng);
        if t == EOS_ID {
            return Ok((tokens, true));
        }
        tokens.push(t);
        state = out.next_state(t);
    }
    Ok((tokens, false))
}

/// A candidate drawn from the model: tokens by ancestral sampling, then
/// slot tags and intent from the NLU posteriors on those tokens.
pub fn sample_candidate<R: Rng>(
    net: &SluNet<'_>,
    tape: &mut Tape,
    enc: &Encoded,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, bool, Vec<usize>, usize)> {
    let (tokens, ended) = sample_tokens(net, tape, enc, max_len, rng)?;
    let trace = net.forced_on(tape, enc, &tokens, ended, NoiseSource::None)?;
    let slot_logp = tape.value(trace.nlu.slot_logp).clone();
    let tags = (0..tokens.len()).map(|r| sample_log_row(slot_logp.row(r), rng)).collect();
    let intent = sample_log_row(tape.value(trace.nlu.intent_logp).data(), rng);
    Ok((tokens, ended, tags, intent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_factors() {
        let lp = candidate_probability(0.9, &[0.8, 0.5], &[0.7, 0.6]);
        assert!((lp.exp() - 0.1512).abs() < 1e-12);
        assert_eq!(candidate_probability(1.0, &[1.0], &[1.0]), 0.0);
        assert_eq!(candidate_probability(0.5, &[0.0], &[]), f64::NEG_INFINITY);
    }

    #[test]
    fn renormalisation() {
        let p = renormalize(&[0.3f64.ln(), 0.1f64.ln()]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let p = renormalize(&[0.2f64.ln(), 0.2f64.ln()]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(renormalize(&[0.07f64.ln()]).unwrap(), vec![1.0]);
        let shifted = renormalize(&[0.3f64.ln() + 40.0, 0.1f64.ln() + 40.0]).unwrap();
        assert!((shifted[0] - 0.75).abs() < 1e-12);
        assert!(matches!(renormalize(&[f64::NEG_INFINITY]), Err(DecodeError::AllZero)));
    }

    #[test]
    fn toy_sequence_space() {
        let seqs = enumerate_sequences(3, 2);
        assert_eq!(seqs.len(), 7);
        assert!(seqs.contains(&(vec![], true)));
        assert!(seqs.contains(&(vec![2], true)));
        assert!(seqs.contains(&(vec![1, 2], false)));
        let joint: usize = seqs.iter().map(|(t, _)| enumerate_tags(2, t.len()).len() * 2).sum();
        assert_eq!(joint, 42);
        assert_eq!(enumerate_sequences(3, 1), vec![(vec![], true), (vec![1], false), (vec![2], false)]);
    }
}
