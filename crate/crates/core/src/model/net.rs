//! Forward computations of the joint network, recorded on a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01};

use super::{BiLstmIds, InterfaceMode, LstmIds, ModelError, ModelParameters, NluEncoderIds, Result};
use crate::corpus::EOS_ID;
use crate::grad::{Axis, Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Where Gumbel noise for the token interface comes from.
pub enum NoiseSource<'r> {
    /// Noise-free: the interface uses the given tokens.
    None,
    /// Draw `-log(-log u)` per vocabulary entry and step.
    Gumbel(&'r mut ChaCha8Rng),
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `T x 2·enc_hidden`
    pub states: Var,
    /// `attn_dim x T`
    pub keys_t: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub ctx: Var,
    /// Previous token; `None` before the first step.
    pub prev: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `1 x V` token log-distribution.
    pub logp: Var,
    /// `1 x T`
    pub attention: Var,
    /// `1 x dec_hidden`, the output layer below the vocabulary projection.
    pub hidden: Var,
    pub state: DecoderState,
}

impl StepOutput {
    pub fn next_state(&self, token: usize) -> DecoderState {
        DecoderState {
            prev: Some(token),
            ..self.state
        }
    }
}

/// Per-step ASR outputs of a forced pass.
#[derive(Debug, Clone, Default)]
pub struct AsrTrace {
    pub logp: Vec<Var>,
    pub hidden: Vec<Var>,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct NluOutput {
    /// `L x n_slot_tags`
    pub slot_logp: Var,
    /// `1 x n_intents`
    pub intent_logp: Var,
    /// `1 x nlu_output_dim`, max over time of `encoded`.
    pub pooled: Var,
    /// `L x nlu_output_dim`
    pub encoded: Var,
}

/// A full teacher-forced pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub asr: AsrTrace,
    pub features: Var,
    /// Tokens the NLU consumed: the forced tokens, the Gumbel-sampled ones,
    /// or `[EOS]` for an empty sequence.
    pub nlu_tokens: Vec<usize>,
    pub nlu: NluOutput,
}

/// Detached values of a [`Trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTrace {
    /// `steps x V`, one row per decoder step including EOS.
    pub token_logp: Tensor,
    pub slot_logp: Tensor,
    pub intent_logp: Tensor,
    pub hidden: Tensor,
}

impl Trace {
    pub fn posterior(&self, tape: &Tape) -> PosteriorTrace {
        let stack = |vs: &[Var]| {
            let rows: Vec<Vec<f64>> = vs.iter().map(|&v| tape.value(v).data().to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        PosteriorTrace {
            token_logp: stack(&self.asr.logp),
            slot_logp: tape.value(self.nlu.slot_logp).clone(),
            intent_logp: tape.value(self.nlu.intent_logp).clone(),
            hidden: stack(&self.asr.hidden),
        }
    }
}

pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax with a straight-through hard token.
///
/// Returns `(hard one-hot, relaxed sample)`. The hard row is the argmax of
/// `logits + noise` (ties to the lowest index); its gradient flows through
/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax_sample(tape: &mut Tape, logits: Var, tau: f64, noise: &[f64]) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(ModelError::InvalidTemperature(tau));
    }
    let cols = tape.value(logits).cols();
    let noise = tape.constant(Tensor::from_vec(1, cols, noise.to_vec()));
    let perturbed = tape.add(logits, noise)?;
    let relaxed = tape.softmax(perturbed, tau)?;
    let hard = tape.straight_through_argmax(relaxed)?;
    Ok((hard, relaxed))
}

fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

/// Forward passes over one set of parameters.
#[derive(Clone, Copy)]
pub struct SluNet<'a> {
    pub params: &'a ModelParameters,
}

impl<'a> SluNet<'a> {
    pub fn new(params: &'a ModelParameters) -> Self {
        Self { params }
    }

    fn p(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, self.params.tensor(id))
    }

    fn zeros(&self, tape: &mut Tape, cols: usize) -> Var {
        tape.constant(Tensor::zeros(1, cols))
    }

    fn check_token(&self, t: usize) -> Result<()> {
        let vocab = self.params.config.vocab_size;
        if t >= vocab {
            Err(ModelError::TokenOutOfRange { token: t, vocab })
        } else {
            Ok(())
        }
    }

    /// One LSTM step; `xw` is the input projection including bias.
    fn lstm_cell(&self, tape: &mut Tape, ids: &LstmIds, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = self.p(tape, ids.wh);
        let hw = tape.matmul(h, wh)?;
        let gates = tape.add(xw, hw)?;
        let n = ids.hidden;
        let i = tape.slice(gates, Axis::Cols, 0, n)?;
        let f = tape.slice(gates, Axis::Cols, n, n)?;
        let g = tape.slice(gates, Axis::Cols, 2 * n, n)?;
        let o = tape.slice(gates, Axis::Cols, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }

    fn lstm_sequence(&self, tape: &mut Tape, ids: &LstmIds, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let steps = tape.value(x).rows();
        let wx = self.p(tape, ids.wx);
        let b = self.p(tape, ids.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add(xw, b)?;
        let mut h = self.zeros(tape, ids.hidden);
        let mut c = self.zeros(tape, ids.hidden);
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.row(xw, t)?;
            let (h2, c2) = self.lstm_cell(tape, ids, xt, h, c)?;
            h = h2;
            c = c2;
            out[t] = h;
        }
        Ok(out)
    }

    fn bilstm(&self, tape: &mut Tape, ids: &BiLstmIds, x: Var) -> Result<Var> {
        let f = self.lstm_sequence(tape, &ids.fwd, x, false)?;
        let b = self.lstm_sequence(tape, &ids.bwd, x, true)?;
        let f = tape.concat(&f, Axis::Rows)?;
        let b = tape.concat(&b, Axis::Rows)?;
        Ok(tape.concat(&[f, b], Axis::Cols)?)
    }

    /// One state per frame, `[forward ; backward]`.
    pub fn encode(&self, tape: &mut Tape, frames: &Tensor) -> Result<Encoded> {
        let cfg = &self.params.config;
        if frames.rows() == 0 {
            return Err(ModelError::EmptyFrames);
        }
        if frames.cols() != cfg.frame_dim {
            return Err(ModelError::FrameDim {
                expected: cfg.frame_dim,
                got: frames.cols(),
            });
        }
        let mut x = tape.constant(frames.clone());
        for layer in &self.params.layout.asr.encoder {
            x = self.bilstm(tape, layer, x)?;
        }
        let wk = self.p(tape, self.params.layout.asr.att_wk);
        let keys = tape.matmul(x, wk)?;
        let keys_t = tape.transpose(keys);
        Ok(Encoded {
            states: x,
            keys_t,
            len: frames.rows(),
        })
    }

    pub fn initial_state(&self, tape: &mut Tape) -> DecoderState {
        let cfg = &self.params.config;
        DecoderState {
            h: self.zeros(tape, cfg.dec_hidden),
            c: self.zeros(tape, cfg.dec_hidden),
            ctx: self.zeros(tape, 2 * cfg.enc_hidden),
            prev: None,
        }
    }

    pub fn decode_step(&self, tape: &mut Tape, enc: &Encoded, state: &DecoderState) -> Result<StepOutput> {
        let ids = &self.params.layout.asr;
        let emb = match state.prev {
            None => self.p(tape, ids.dec_bos),
            Some(t) => {
                self.check_token(t)?;
                let table = self.p(tape, ids.dec_embed);
                tape.embedding(table, &[t])?
            }
        };
        let x = tape.concat(&[emb, state.ctx], Axis::Cols)?;
        let wx = self.p(tape, ids.decoder.wx);
        let b = self.p(tape, ids.decoder.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add(xw, b)?;
        let (h, c) = self.lstm_cell(tape, &ids.decoder, xw, state.h, state.c)?;

        let wq = self.p(tape, ids.att_wq);
        let q = tape.matmul(h, wq)?;
        let scores = tape.matmul(q, enc.keys_t)?;
        let attention = tape.softmax(scores, 1.0)?;
        let ctx = tape.matmul(attention, enc.states)?;

        let hc = tape.concat(&[h, ctx], Axis::Cols)?;
        let ow = self.p(tape, ids.out_w);
        let ob = self.p(tape, ids.out_b);
        let o = tape.matmul(hc, ow)?;
        let o = tape.add(o, ob)?;
        let hidden = tape.tanh(o);
        let vw = self.p(tape, ids.vocab_w);
        let vb = self.p(tape, ids.vocab_b);
        let logits = tape.matmul(hidden, vw)?;
        let logits = tape.add(logits, vb)?;
        let logp = tape.log_softmax(logits);
        Ok(StepOutput {
            logp,
            attention,
            hidden,
            state: DecoderState {
                h,
                c,
                ctx,
                prev: state.prev,
            },
        })
    }

    /// Decoder fed with `tokens` (plus a final EOS step when `with_eos`).
    pub fn force(&self, tape: &mut Tape, enc: &Encoded, tokens: &[usize], with_eos: bool) -> Result<AsrTrace> {
        let steps = tokens.len() + usize::from(with_eos);
        let mut trace = AsrTrace::default();
        let mut state = self.initial_state(tape);
        for i in 0..steps {
            let out = self.decode_step(tape, enc, &state)?;
            trace.logp.push(out.logp);
            trace.hidden.push(out.hidden);
            trace.attention.push(out.attention);
            if i < tokens.len() {
                state = out.next_state(tokens[i]);
            }
        }
        Ok(trace)
    }

    /// Interface features for the NLU, one row per token (or one `[EOS]`
    /// row for an empty sequence). Returns the features and the tokens they
    /// represent.
    pub fn nlu_features(
        &self,
        tape: &mut Tape,
        asr: &AsrTrace,
        tokens: &[usize],
        noise: NoiseSource<'_>,
    ) -> Result<(Var, Vec<usize>)> {
        let positions: Vec<usize> = if tokens.is_empty() { vec![EOS_ID] } else { tokens.to_vec() };
        if asr.logp.len() < positions.len() {
            return Err(ModelError::Invalid(format!(
                "ASR trace has {} steps, {} needed by the interface",
                asr.logp.len(),
                positions.len()
            )));
        }
        for &t in &positions {
            self.check_token(t)?;
        }
        let ids = &self.params.layout.nlu;
        let table = self.p(tape, ids.embed);
        match self.params.config.interface {
            InterfaceMode::Text => Ok((tape.embedding(table, &positions)?, positions)),
            InterfaceMode::Neural => {
                let emb = tape.embedding(table, &positions)?;
                let hid = tape.concat(&asr.hidden[..positions.len()], Axis::Rows)?;
                Ok((tape.concat(&[emb, hid], Axis::Cols)?, positions))
            }
            InterfaceMode::GumbelToken { tau } => {
                let mut rows = Vec::with_capacity(positions.len());
                let mut chosen = Vec::with_capacity(positions.len());
                let mut noise = noise;
                for (i, &t) in positions.iter().enumerate() {
                    let logp = asr.logp[i];
                    match &mut noise {
                        NoiseSource::Gumbel(rng) => {
                            let g = gumbel_noise(rng, self.params.config.vocab_size);
                            let (hard, _) = gumbel_softmax_sample(tape, logp, tau, &g)?;
                            chosen.push(argmax(tape.value(hard).data()));
                            rows.push(hard);
                        }
                        NoiseSource::None => {
                            let relaxed = tape.softmax(logp, tau)?;
                            rows.push(tape.straight_through(relaxed, &[t])?);
                            chosen.push(t);
                        }
                    }
                }
                let onehots = tape.concat(&rows, Axis::Rows)?;
                Ok((tape.matmul(onehots, table)?, chosen))
            }
        }
    }

    pub fn nlu_forward(&self, tape: &mut Tape, features: Var) -> Result<NluOutput> {
        let cfg = &self.params.config;
        let ids = &self.params.layout.nlu;
        let len = tape.value(features).rows();
        if len == 0 {
            return Err(ModelError::Invalid("empty NLU input".into()));
        }
        if tape.value(features).cols() != cfg.nlu_input_dim() {
            return Err(ModelError::Invalid(format!(
                "NLU input width {} does not match {}",
                tape.value(features).cols(),
                cfg.nlu_input_dim()
            )));
        }
        let encoded = match &ids.encoder {
            NluEncoderIds::Recurrent(bi) => self.bilstm(tape, bi, features)?,
            NluEncoderIds::SelfAttention { in_w, in_b, layers } => {
                let width = cfg.nlu_output_dim();
                let w = self.p(tape, *in_w);
                let b = self.p(tape, *in_b);
                let x = tape.matmul(features, w)?;
                let x = tape.add(x, b)?;
                let pe = tape.constant(positional_encoding(len, width));
                let mut x = tape.add(x, pe)?;
                let scale = 1.0 / (width as f64).sqrt();
                for l in layers {
                    let wq = self.p(tape, l.wq);
                    let wk = self.p(tape, l.wk);
                    let wv = self.p(tape, l.wv);
                    let wo = self.p(tape, l.wo);
                    let q = tape.matmul(x, wq)?;
                    let k = tape.matmul(x, wk)?;
                    let v = tape.matmul(x, wv)?;
                    let kt = tape.transpose(k);
                    let s = tape.matmul(q, kt)?;
                    let s = tape.scale(s, scale);
                    let a = tape.softmax(s, 1.0)?;
                    let av = tape.matmul(a, v)?;
                    let av = tape.matmul(av, wo)?;
                    x = tape.add(x, av)?;
                    let w1 = self.p(tape, l.w1);
                    let b1 = self.p(tape, l.b1);
                    let w2 = self.p(tape, l.w2);
                    let b2 = self.p(tape, l.b2);
                    let f = tape.matmul(x, w1)?;
                    let f = tape.add(f, b1)?;
                    let f = tape.relu(f);
                    let f = tape.matmul(f, w2)?;
                    let f = tape.add(f, b2)?;
                    x = tape.add(x, f)?;
                }
                x
            }
        };
        let sw = self.p(tape, ids.slot_w);
        let sb = self.p(tape, ids.slot_b);
        let slot = tape.matmul(encoded, sw)?;
        let slot = tape.add(slot, sb)?;
        let slot_logp = tape.log_softmax(slot);

        let pooled = tape.max_pool(encoded)?;
        let mut z = pooled;
        for &(w, b) in &ids.ff {
            let w = self.p(tape, w);
            let b = self.p(tape, b);
            let y = tape.matmul(z, w)?;
            let y = tape.add(y, b)?;
            z = tape.relu(y);
        }
        let iw = self.p(tape, ids.intent_w);
        let ib = self.p(tape, ids.intent_b);
        let logits = tape.matmul(z, iw)?;
        let logits = tape.add(logits, ib)?;
        let intent_logp = tape.log_softmax(logits);
        Ok(NluOutput {
            slot_logp,
            intent_logp,
            pooled,
            encoded,
        })
    }

    /// Forced ASR pass over `tokens` + EOS, then NLU on the interface.
    pub fn teacher_forced_pass(
        &self,
        tape: &mut Tape,
        frames: &Tensor,
        tokens: &[usize],
        noise: NoiseSource<'_>,
    ) -> Result<Trace> {
        let enc = self.encode(tape, frames)?;
        self.forced_on(tape, &enc, tokens, true, noise)
    }

    /// [`SluNet::teacher_forced_pass`] over an existing encoding.
    pub fn forced_on(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        tokens: &[usize],
        with_eos: bool,
        noise: NoiseSource<'_>,
    ) -> Result<Trace> {
        for &t in tokens {
            self.check_token(t)?;
        }
        let asr = self.force(tape, enc, tokens, with_eos)?;
        let (features, nlu_tokens) = self.nlu_features(tape, &asr, tokens, noise)?;
        let nlu = self.nlu_forward(tape, features)?;
        Ok(Trace {
            asr,
            features,
            nlu_tokens,
            nlu,
        })
    }
}

/// Samples an index from a log-distribution row.
pub fn sample_log_row<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last entry with non-zero mass.
    logp.iter().rposition(|v| v.is_finite()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Grammar};
    use crate::model::{ModelConfig, NluKind};
    use crate::rng;

    fn setup(mode: InterfaceMode) -> (ModelParameters, Vec<crate::corpus::Utterance>) {
        let g = Grammar::default_grammar().compile().unwrap();
        let mut c = ModelConfig::for_inventory(&g.inventory, 8);
        c.interface = mode;
        c.enc_hidden = 8;
        c.dec_hidden = 12;
        c.embed_dim = 6;
        c.attn_dim = 6;
        c.nlu_hidden = 6;
        c.nlu_embed_dim = 5;
        c.intent_ff_dim = 7;
        let utts = generate_corpus(&g, 3, 1, 0.5).unwrap();
        (ModelParameters::init(&c).unwrap(), utts)
    }

    fn row_sums_to_one(t: &Tensor) {
        for r in 0..t.rows() {
            let s: f64 = t.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
        }
    }

    #[test]
    fn encoder_shape_determinism_and_errors() {
        let (p, utts) = setup(InterfaceMode::Neural);
        let net = SluNet::new(&p);
        let frames = utts[0].frames_tensor();
        let mut t1 = Tape::new();
        let e1 = net.encode(&mut t1, &frames).unwrap();
        assert_eq!(t1.value(e1.states).shape(), [frames.rows(), 16]);
        let mut t2 = Tape::new();
        let e2 = net.encode(&mut t2, &frames).unwrap();
        assert_eq!(t1.value(e1.states), t2.value(e2.states));
        let mut t3 = Tape::new();
        assert!(matches!(net.encode(&mut t3, &Tensor::zeros(0, 8)), Err(ModelError::EmptyFrames)));
        assert!(matches!(
            net.encode(&mut t3, &Tensor::zeros(4, 3)),
            Err(ModelError::FrameDim { expected: 8, got: 3 })
        ));
    }

    #[test]
    fn attention_is_a_distribution() {
        let (p, utts) = setup(InterfaceMode::Neural);
        let net = SluNet::new(&p);
        let mut tape = Tape::new();
        let single = Tensor::from_rows(&[utts[0].frames[0].iter().map(|&v| f64::from(v)).collect()]);
        let enc = net.encode(&mut tape, &single).unwrap();
        let s0 = net.initial_state(&mut tape);
        let out = net.decode_step(&mut tape, &enc, &s0).unwrap();
        assert_eq!(tape.value(out.attention).data(), &[1.0]);

        let enc = net.encode(&mut tape, &utts[1].frames_tensor()).unwrap();
        let trace = net.force(&mut tape, &enc, &utts[1].tokens, true).unwrap();
        for a in &trace.attention {
            let a = tape.value(*a);
            assert!(a.data().iter().all(|&w| w >= 0.0));
            assert!((a.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn teacher_forced_trace_shapes_and_normalisation() {
        for mode in [InterfaceMode::Text, InterfaceMode::Neural, InterfaceMode::GumbelToken { tau: 0.7 }] {
            let (p, utts) = setup(mode);
            let net = SluNet::new(&p);
            let u = &utts[0];
            let mut tape = Tape::new();
            let trace = net
                .teacher_forced_pass(&mut tape, &u.frames_tensor(), &u.tokens, NoiseSource::None)
                .unwrap();
            let post = trace.posterior(&tape);
            assert_eq!(post.token_logp.rows(), u.tokens.len() + 1);
            assert_eq!(post.slot_logp.rows(), u.tokens.len());
            row_sums_to_one(&post.token_logp);
            row_sums_to_one(&post.slot_logp);
            row_sums_to_one(&post.intent_logp);
        }
    }

    #[test]
    fn text_and_neural_share_the_asr_trace() {
        let (pn, utts) = setup(InterfaceMode::Neural);
        let (pt, _) = setup(InterfaceMode::Text);
        let u = &utts[2];
        let run = |p: &ModelParameters| {
            let mut tape = Tape::new();
            let tr = SluNet::new(p)
                .teacher_forced_pass(&mut tape, &u.frames_tensor(), &u.tokens, NoiseSource::None)
                .unwrap();
            tr.posterior(&tape)
        };
        let (a, b) = (run(&pn), run(&pt));
        // ASR parameters come first in the layout and share init streams.
        assert_eq!(a.token_logp, b.token_logp);
        assert_eq!(a.hidden, b.hidden);
        assert_ne!(a.intent_logp, b.intent_logp);
    }

    #[test]
    fn neural_with_zeroed_hidden_half_equals_text_mode() {
        let (pn, utts) = setup(InterfaceMode::Neural);
        let u = &utts[0];
        let cfg = &pn.config;
        // Text-mode parameters whose NLU input weights are the embedding
        // rows of the neural model.
        let mut tc = cfg.clone();
        tc.interface = InterfaceMode::Text;
        let mut named: Vec<(String, Tensor)> = pn
            .names()
            .iter()
            .cloned()
            .zip(pn.tensors().iter().cloned())
            .collect();
        for (name, t) in &mut named {
            if name == "nlu.enc.fwd.wx" || name == "nlu.enc.bwd.wx" {
                let rows: Vec<Vec<f64>> = (0..cfg.nlu_embed_dim).map(|r| t.row(r).to_vec()).collect();
                *t = Tensor::from_rows(&rows);
            }
        }
        let pt = ModelParameters::from_named(&tc, named).unwrap();

        let mut tape = Tape::new();
        let netn = SluNet::new(&pn);
        let table = tape.param(pn.layout.nlu.embed, pn.tensor(pn.layout.nlu.embed));
        let emb = tape.embedding(table, &u.tokens).unwrap();
        let zeros = tape.constant(Tensor::zeros(u.tokens.len(), cfg.dec_hidden));
        let feats = tape.concat(&[emb, zeros], Axis::Cols).unwrap();
        let on = netn.nlu_forward(&mut tape, feats).unwrap();

        let mut tape2 = Tape::new();
        let nett = SluNet::new(&pt);
        let table = tape2.param(pt.layout.nlu.embed, pt.tensor(pt.layout.nlu.embed));
        let emb = tape2.embedding(table, &u.tokens).unwrap();
        let ot = nett.nlu_forward(&mut tape2, emb).unwrap();
        assert_eq!(tape.value(on.slot_logp), tape2.value(ot.slot_logp));
        assert_eq!(tape.value(on.intent_logp), tape2.value(ot.intent_logp));
    }

    #[test]
    fn nlu_variants_share_output_shapes_and_pool_dominates() {
        let (mut p, utts) = setup(InterfaceMode::Text);
        let u = &utts[0];
        let mut shapes = Vec::new();
        for kind in [NluKind::Recurrent, NluKind::SelfAttention { layers: 2 }] {
            let mut c = p.config.clone();
            c.nlu = kind;
            p = ModelParameters::init(&c).unwrap();
            let net = SluNet::new(&p);
            let mut tape = Tape::new();
            let tr = net
                .teacher_forced_pass(&mut tape, &u.frames_tensor(), &u.tokens, NoiseSource::None)
                .unwrap();
            let enc = tape.value(tr.nlu.encoded);
            let pooled = tape.value(tr.nlu.pooled);
            for c in 0..enc.cols() {
                for r in 0..enc.rows() {
                    assert!(pooled.get(0, c) >= enc.get(r, c));
                }
            }
            shapes.push((tape.value(tr.nlu.slot_logp).shape(), tape.value(tr.nlu.intent_logp).shape()));
        }
        assert_eq!(shapes[0], shapes[1]);
        assert_eq!(shapes[0].0, [u.tokens.len(), p.config.n_slot_tags]);
    }

    #[test]
    fn gumbel_sample_conventions() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row_vector(vec![1.0, 1.0]));
        let (hard, relaxed) = gumbel_softmax_sample(&mut tape, l, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(relaxed).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(hard).data(), &[1.0, 0.0]);

        let l = tape.constant(Tensor::row_vector(vec![0.2, 1.5, -0.3]));
        let noise = [0.4, -0.1, 0.9];
        let (_, r) = gumbel_softmax_sample(&mut tape, l, 1e-3, &noise).unwrap();
        let v = tape.value(r).data();
        assert!((v[1] - 1.0).abs() < 1e-12 && v[0] < 1e-12 && v[2] < 1e-12);
        assert!(matches!(
            gumbel_softmax_sample(&mut tape, l, 0.0, &noise),
            Err(ModelError::InvalidTemperature(_))
        ));
    }

    #[test]
    fn gumbel_interface_passes_gradient_to_asr_logits() {
        let (p, utts) = setup(InterfaceMode::GumbelToken { tau: 0.5 });
        let net = SluNet::new(&p);
        let u = &utts[0];
        let mut r = rng::stream(3, &[]);
        let mut tape = Tape::new();
        let tr = net
            .teacher_forced_pass(&mut tape, &u.frames_tensor(), &u.tokens, NoiseSource::Gumbel(&mut r))
            .unwrap();
        let intent = tape.gather(tr.nlu.intent_logp, &[u.intent]).unwrap();
        let loss = tape.sum(intent);
        let g = tape.backward(loss).unwrap();
        let vw = g.param(p.layout.asr.vocab_w).expect("ASR projection on the path");
        assert!(vw.sq_norm() > 0.0);
    }

    #[test]
    fn sampling_a_degenerate_row() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(sample_log_row(&[f64::NEG_INFINITY, 0.0], &mut r), 1);
    }
}
