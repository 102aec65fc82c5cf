//! Attention-based encoder-decoder translation agents.
//!
//! The encoder is a single unidirectional GRU over source embeddings. The
//! decoder GRU starts from the final encoder state; at every step its new
//! state attends over the encoder annotations with additive scoring
//! `vᵀ tanh(W s + U h_j + b)`, and `tanh(C [s; c])` feeds the output
//! projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{dropout, Embedding, GruCell, Linear, INIT_SCALE};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{entropy, log_softmax, softmax};

const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb: usize,
    pub hidden: usize,
}

impl AgentConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize, hidden: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            emb: hidden,
            hidden,
        }
    }
}

/// Parameters of one agent plus the layer handles into them.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub store: ParamStore,
    src_emb: Embedding,
    encoder: GruCell,
    tgt_emb: Embedding,
    decoder: GruCell,
    att_query: Linear,
    att_key: Linear,
    att_score: Linear,
    combine: Linear,
    out: Linear,
}

/// Inverted dropout applied to embeddings and pre-projection states.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, drop: &mut Option<&mut Dropout>) -> Var {
    match drop {
        Some(d) => dropout(tape, x, d.rate, &mut d.rng),
        None => x,
    }
}

/// A decoded pivot sequence with what the policy recorded at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    /// Token ids; ends with EOS iff `terminated`.
    pub tokens: Vec<usize>,
    /// Log-probability of each token under the distribution it was drawn from.
    pub logprobs: Vec<f64>,
    /// Entropy of that distribution.
    pub entropies: Vec<f64>,
    /// Logits of that distribution.
    pub logits: Vec<Vec<f64>>,
    pub terminated: bool,
}

impl Message {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens without the final EOS.
    pub fn content(&self) -> &[usize] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// The sequence handed to a listener: the content, or `[EOS]` when the
    /// message is a lone EOS.
    pub fn as_input(&self) -> Vec<usize> {
        let c = self.content();
        if c.is_empty() {
            vec![EOS]
        } else {
            c.to_vec()
        }
    }

    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// One `[batch, hidden]` annotation per source position.
    pub states: Vec<Var>,
    keys: Vec<Var>,
    /// `[batch, positions]` additive mask: 0 for real tokens.
    mask: Var,
    /// State after each sequence's last real token.
    pub final_state: Var,
    pub batch: usize,
    pub lens: Vec<usize>,
}

/// Per-step tape nodes of a batched decode.
#[derive(Debug, Clone)]
pub struct StepVars {
    /// `[batch, 1]` log-probability of the emitted token.
    pub logp: Var,
    /// `[batch, 1]` entropy of the step distribution.
    pub entropy: Var,
    /// `[batch, hidden]` decoder state the distribution was computed from.
    pub state: Var,
    /// Rows still decoding at this step.
    pub active: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchDecode {
    pub messages: Vec<Message>,
    pub steps: Vec<StepVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Token ids; ends with EOS unless the length limit was reached.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// `logprob / tokens.len()`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub hypotheses: Vec<Hypothesis>,
    /// Fewer than K distinct hypotheses were reachable.
    pub shortfall: bool,
}

impl Agent {
    pub fn new(config: AgentConfig, seed: u64) -> Self {
        Self::with_scale(config, INIT_SCALE, seed)
    }

    pub fn with_scale(config: AgentConfig, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let AgentConfig {
            src_vocab,
            tgt_vocab,
            emb,
            hidden,
        } = config;
        let s = &mut store;
        let r = &mut rng;
        Self {
            src_emb: Embedding::new(s, "src_emb", src_vocab, emb, scale, r),
            encoder: GruCell::new(s, "encoder", emb, hidden, scale, r),
            tgt_emb: Embedding::new(s, "tgt_emb", tgt_vocab, emb, scale, r),
            decoder: GruCell::new(s, "decoder", emb, hidden, scale, r),
            att_query: Linear::new(s, "att_query", hidden, hidden, false, scale, r),
            att_key: Linear::new(s, "att_key", hidden, hidden, true, scale, r),
            att_score: Linear::new(s, "att_score", hidden, 1, false, scale, r),
            combine: Linear::new(s, "combine", 2 * hidden, hidden, true, scale, r),
            out: Linear::new(s, "out", hidden, tgt_vocab, true, scale, r),
            config,
            store,
        }
    }

    fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
        match ids.iter().find(|&&i| i >= vocab) {
            Some(&id) => Err(Error::OutOfVocab { id, vocab }),
            None => Ok(()),
        }
    }

    /// Runs the encoder over a batch of non-empty sequences.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        srcs: &[Vec<usize>],
        mut drop: Option<&mut Dropout>,
    ) -> Result<Encoded> {
        if srcs.is_empty() || srcs.iter().any(|s| s.is_empty()) {
            return Err(Error::Usage("encode needs non-empty sequences".into()));
        }
        for s in srcs {
            Self::check_ids(s, self.config.src_vocab)?;
        }
        let b = srcs.len();
        let hd = self.config.hidden;
        let lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let t_max = *lens.iter().max().unwrap();
        let uniform = lens.iter().all(|&l| l == t_max);
        let mut h = tape.constant(b, hd, vec![0.0; b * hd]);
        let mut states = Vec::with_capacity(t_max);
        let mut keys = Vec::with_capacity(t_max);
        let mut mask = vec![0.0; b * t_max];
        for t in 0..t_max {
            let ids: Vec<usize> = srcs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = self.src_emb.forward(tape, &self.store, &ids);
            let x = apply_dropout(tape, x, &mut drop);
            let h_new = self.encoder.forward(tape, &self.store, x, h);
            h = if uniform {
                h_new
            } else {
                // rows past their end keep the previous state
                let m: Vec<f64> = lens.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(b, 1, m);
                let d = tape.sub(h_new, h);
                let d = tape.mul_col(d, m);
                tape.add(h, d)
            };
            for (i, &l) in lens.iter().enumerate() {
                if t >= l {
                    mask[i * t_max + t] = MASKED;
                }
            }
            states.push(h);
            keys.push(self.att_key.forward(tape, &self.store, h));
        }
        let mask = tape.constant(b, t_max, mask);
        Ok(Encoded {
            states,
            keys,
            mask,
            final_state: h,
            batch: b,
            lens,
        })
    }

    /// Additive attention of `state` over `enc`; returns (context, weights).
    fn attend_vars(&self, tape: &mut Tape, enc: &Encoded, state: Var) -> (Var, Var) {
        let q = self.att_query.forward(tape, &self.store, state);
        let scores: Vec<Var> = enc
            .keys
            .iter()
            .map(|&k| {
                let e = tape.add(k, q);
                let e = tape.tanh(e);
                self.att_score.forward(tape, &self.store, e)
            })
            .collect();
        let scores = if scores.len() == 1 {
            scores[0]
        } else {
            tape.concat_cols(&scores)
        };
        let scores = tape.add(scores, enc.mask);
        let weights = tape.softmax(scores);
        let mut ctx: Option<Var> = None;
        for (j, &h) in enc.states.iter().enumerate() {
            let w = if enc.states.len() == 1 {
                weights
            } else {
                tape.slice_cols(weights, j, 1)
            };
            let term = tape.mul_col(h, w);
            ctx = Some(match ctx {
                Some(c) => tape.add(c, term),
                None => term,
            });
        }
        (ctx.unwrap(), weights)
    }

    /// One decoder step from previous tokens `prev` and state `s`.
    /// Returns (new state, logits).
    fn decode_step(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        prev: &[usize],
        s: Var,
        drop: &mut Option<&mut Dropout>,
    ) -> (Var, Var) {
        let x = self.tgt_emb.forward(tape, &self.store, prev);
        let x = apply_dropout(tape, x, drop);
        let s_new = self.decoder.forward(tape, &self.store, x, s);
        let (ctx, _) = self.attend_vars(tape, enc, s_new);
        let sc = tape.concat_cols(&[s_new, ctx]);
        let o = self.combine.forward(tape, &self.store, sc);
        let o = tape.tanh(o);
        let o = apply_dropout(tape, o, drop);
        let logits = self.out.forward(tape, &self.store, o);
        (s_new, logits)
    }

    /// Teacher-forced log-likelihood of each `outs[i]` followed by EOS, as a
    /// `[batch, 1]` column.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        srcs: &[Vec<usize>],
        outs: &[Vec<usize>],
        mut drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        if srcs.len() != outs.len() {
            return Err(Error::Shape(format!(
                "{} sources for {} outputs",
                srcs.len(),
                outs.len()
            )));
        }
        for o in outs {
            Self::check_ids(o, self.config.tgt_vocab)?;
        }
        let enc = self.encode_batch(tape, srcs, drop.as_deref_mut())?;
        let b = srcs.len();
        let steps = outs.iter().map(|o| o.len() + 1).max().unwrap();
        let mut s = enc.final_state;
        let mut prev = vec![BOS; b];
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let (s_new, logits) = self.decode_step(tape, &enc, &prev, s, &mut drop);
            s = s_new;
            let gold: Vec<usize> = outs
                .iter()
                .map(|o| if t < o.len() { o[t] } else { EOS })
                .collect();
            let lp = tape.log_softmax(logits);
            let mut picked = tape.pick(lp, &gold);
            if outs.iter().any(|o| t > o.len()) {
                let m: Vec<f64> = outs.iter().map(|o| if t <= o.len() { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(b, 1, m);
                picked = tape.mul(picked, m);
            }
            total = Some(match total {
                Some(acc) => tape.add(acc, picked),
                None => picked,
            });
            prev = gold;
        }
        Ok(total.unwrap())
    }

    /// Decodes a batch; row `i` stops at EOS or after `caps[i]` tokens.
    pub fn decode_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        srcs: &[Vec<usize>],
        caps: &[usize],
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<BatchDecode> {
        if caps.len() != srcs.len() || caps.contains(&0) {
            return Err(Error::Usage("decode needs one positive cap per source".into()));
        }
        if let DecodeMode::Sample { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(Error::Usage(format!("temperature {temperature} must be positive")));
            }
        }
        let enc = self.encode_batch(tape, srcs, None)?;
        let b = srcs.len();
        let v = self.config.tgt_vocab;
        let mut messages: Vec<Message> = (0..b)
            .map(|_| Message {
                tokens: vec![],
                logprobs: vec![],
                entropies: vec![],
                logits: vec![],
                terminated: false,
            })
            .collect();
        let mut active = vec![true; b];
        let mut prev = vec![BOS; b];
        let mut s = enc.final_state;
        let mut steps = Vec::new();
        let max_cap = *caps.iter().max().unwrap();
        for _ in 0..max_cap {
            let (s_new, logits) = self.decode_step(tape, &enc, &prev, s, &mut None);
            s = s_new;
            let scaled = match mode {
                DecodeMode::Sample { temperature } if temperature != 1.0 => {
                    tape.scale(logits, 1.0 / temperature)
                }
                _ => logits,
            };
            let lp = tape.log_softmax(scaled);
            let lpv = tape.value(lp).to_vec();
            let logit_v = tape.value(scaled).to_vec();
            let mut chosen = Vec::with_capacity(b);
            for i in 0..b {
                let row = &lpv[i * v..(i + 1) * v];
                let tok = match mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Sample { .. } => sample_log(row, rng),
                };
                chosen.push(tok);
                if active[i] {
                    let m = &mut messages[i];
                    m.tokens.push(tok);
                    m.logprobs.push(row[tok]);
                    m.entropies.push(entropy_of_log(row));
                    m.logits.push(logit_v[i * v..(i + 1) * v].to_vec());
                }
            }
            let logp = tape.pick(lp, &chosen);
            let p = tape.exp(lp);
            let plp = tape.mul(p, lp);
            let ent = tape.sum_rows(plp);
            let ent = tape.scale(ent, -1.0);
            steps.push(StepVars {
                logp,
                entropy: ent,
                state: s,
                active: active.clone(),
            });
            for i in 0..b {
                if active[i] {
                    if chosen[i] == EOS {
                        messages[i].terminated = true;
                        active[i] = false;
                    } else if messages[i].tokens.len() >= caps[i] {
                        active[i] = false;
                    }
                }
            }
            if !active.iter().any(|&a| a) {
                break;
            }
            prev = chosen;
        }
        Ok(BatchDecode { messages, steps })
    }

    /// Annotation states of a single sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &[tokens.to_vec()], None)?;
        Ok(enc.states.iter().map(|&s| tape.value(s).to_vec()).collect())
    }

    /// Attention of a decoder state over plain annotations.
    pub fn attend(&self, state: &[f64], annotations: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let hd = self.config.hidden;
        if annotations.is_empty() {
            return Err(Error::Usage("attend over no annotations".into()));
        }
        if state.len() != hd || annotations.iter().any(|a| a.len() != hd) {
            return Err(Error::Shape(format!("attend expects vectors of {hd}")));
        }
        let mut tape = Tape::new();
        let states: Vec<Var> = annotations
            .iter()
            .map(|a| tape.constant(1, hd, a.clone()))
            .collect();
        let keys = states
            .iter()
            .map(|&s| self.att_key.forward(&mut tape, &self.store, s))
            .collect();
        let mask = tape.constant(1, annotations.len(), vec![0.0; annotations.len()]);
        let enc = Encoded {
            final_state: *states.last().unwrap(),
            states,
            keys,
            mask,
            batch: 1,
            lens: vec![annotations.len()],
        };
        let s = tape.constant(1, hd, state.to_vec());
        let (ctx, w) = self.attend_vars(&mut tape, &enc, s);
        Ok((tape.value(ctx).to_vec(), tape.value(w).to_vec()))
    }

    pub fn decode_greedy(&self, src: &[usize], max_len: usize) -> Result<Message> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.decode_one(src, max_len, DecodeMode::Greedy, &mut rng)
    }

    pub fn decode_sample<R: Rng>(
        &self,
        src: &[usize],
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Message> {
        self.decode_one(src, max_len, DecodeMode::Sample { temperature }, rng)
    }

    /// Decoding with the message length capped at the source length.
    pub fn decode_capped<R: Rng>(&self, src: &[usize], mode: DecodeMode, rng: &mut R) -> Result<Message> {
        self.decode_one(src, src.len(), mode, rng)
    }

    fn decode_one<R: Rng>(&self, src: &[usize], max_len: usize, mode: DecodeMode, rng: &mut R) -> Result<Message> {
        if max_len == 0 {
            return Err(Error::Usage("max_len must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let out = self.decode_batch(&mut tape, &[src.to_vec()], &[max_len], mode, rng)?;
        Ok(out.messages.into_iter().next().unwrap())
    }

    /// Greedy decoding of many sources at once, in chunks of `chunk`.
    pub fn greedy_many(&self, srcs: &[Vec<usize>], caps: &[usize], chunk: usize) -> Result<Vec<Message>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(srcs.len());
        for (s, c) in srcs.chunks(chunk.max(1)).zip(caps.chunks(chunk.max(1))) {
            let mut tape = Tape::new();
            out.extend(self.decode_batch(&mut tape, s, c, DecodeMode::Greedy, &mut rng)?.messages);
        }
        Ok(out)
    }

    /// Teacher-forced log-probability of `out` followed by EOS.
    pub fn sequence_logprob(&self, src: &[usize], out: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.teacher_forced(&mut tape, &[src.to_vec()], &[out.to_vec()], None)?;
        Ok(tape.value(v)[0])
    }

    /// Per-example teacher-forced log-probabilities, in chunks of `chunk`.
    pub fn sequence_logprobs(&self, srcs: &[Vec<usize>], outs: &[Vec<usize>], chunk: usize) -> Result<Vec<f64>> {
        let mut res = Vec::with_capacity(srcs.len());
        for (s, o) in srcs.chunks(chunk.max(1)).zip(outs.chunks(chunk.max(1))) {
            let mut tape = Tape::new();
            let v = self.teacher_forced(&mut tape, s, o, None)?;
            res.extend_from_slice(tape.value(v));
        }
        Ok(res)
    }

    /// Beam search with `k` beams and at most `max_len` tokens per hypothesis.
    /// Hypotheses are ranked by length-normalized log-probability; the greedy
    /// hypothesis is always a candidate.
    pub fn beam_search(&self, src: &[usize], k: usize, max_len: usize) -> Result<BeamResult> {
        if k == 0 || max_len == 0 {
            return Err(Error::Usage("beam search needs k >= 1 and max_len >= 1".into()));
        }
        let v = self.config.tgt_vocab;
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &vec![src.to_vec(); k], None)?;
        // (tokens, logprob) of live beams; row i of `s` belongs to beam i
        let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut s = enc.final_state;
        for step in 0..max_len {
            let prev: Vec<usize> = (0..k)
                .map(|i| live.get(i).and_then(|(t, _)| t.last().copied()).unwrap_or(BOS))
                .collect();
            let (s_new, logits) = self.decode_step(&mut tape, &enc, &prev, s, &mut None);
            let lp = tape.log_softmax(logits);
            let lpv = tape.value(lp);
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
            for (i, (_, score)) in live.iter().enumerate() {
                for tok in 0..v {
                    cands.push((score + lpv[i * v + tok], i, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next: Vec<(Vec<usize>, f64)> = Vec::new();
            let mut parents = Vec::new();
            for (score, i, tok) in cands {
                if next.len() >= k {
                    break;
                }
                let mut toks = live[i].0.clone();
                toks.push(tok);
                if tok == EOS || step + 1 == max_len {
                    let n = toks.len() as f64;
                    finished.push(Hypothesis {
                        tokens: toks,
                        logprob: score,
                        score: score / n,
                    });
                } else {
                    next.push((toks, score));
                    parents.push(i);
                }
            }
            if next.is_empty() {
                break;
            }
            let mut rows: Vec<usize> = parents.clone();
            rows.resize(k, parents[0]);
            s = tape.gather(s_new, &rows);
            live = next;
        }
        let greedy = self.decode_greedy(src, max_len)?;
        let n = greedy.tokens.len() as f64;
        finished.push(Hypothesis {
            logprob: greedy.logprob(),
            score: greedy.logprob() / n,
            tokens: greedy.tokens,
        });
        finished.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tokens.cmp(&b.tokens)));
        let mut hyps: Vec<Hypothesis> = Vec::with_capacity(k);
        for h in finished {
            if hyps.len() == k {
                break;
            }
            if !hyps.iter().any(|x| x.tokens == h.tokens) {
                hyps.push(h);
            }
        }
        let shortfall = hyps.len() < k;
        Ok(BeamResult {
            hypotheses: hyps,
            shortfall,
        })
    }

    /// Greedy decoding that averages the next-token distributions obtained
    /// from each of `srcs` at every step.
    pub fn ensemble_decode(&self, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<usize>> {
        if srcs.is_empty() || max_len == 0 {
            return Err(Error::Usage("ensemble needs at least one source and max_len >= 1".into()));
        }
        let v = self.config.tgt_vocab;
        let k = srcs.len();
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, srcs, None)?;
        let mut s = enc.final_state;
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (s_new, logits) = self.decode_step(&mut tape, &enc, &vec![prev; k], s, &mut None);
            s = s_new;
            let lv = tape.value(logits);
            let mut avg = vec![0.0; v];
            for i in 0..k {
                let p = softmax(&lv[i * v..(i + 1) * v])?;
                avg.iter_mut().zip(&p).for_each(|(a, x)| *a += x / k as f64);
            }
            let tok = argmax(&avg);
            out.push(tok);
            if tok == EOS {
                break;
            }
            prev = tok;
        }
        Ok(out)
    }

    /// Next-token probabilities after `prefix` for one source; used by tests
    /// and diagnostics.
    pub fn next_distribution(&self, src: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &[src.to_vec()], None)?;
        let mut s = enc.final_state;
        let mut prev = BOS;
        let mut logits = None;
        for &tok in prefix.iter().chain(std::iter::once(&usize::MAX)) {
            let (s_new, l) = self.decode_step(&mut tape, &enc, &[prev], s, &mut None);
            s = s_new;
            logits = Some(l);
            prev = tok;
        }
        softmax(tape.value(logits.unwrap()))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_log<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    logp.iter()
        .enumerate()
        .rev()
        .find(|(_, &lp)| lp > f64::NEG_INFINITY)
        .map_or(0, |(i, _)| i)
}

fn entropy_of_log(logp: &[f64]) -> f64 {
    -logp.iter().map(|&lp| if lp > f64::NEG_INFINITY { lp.exp() * lp } else { 0.0 }).sum::<f64>()
}

/// Entropy recomputed from raw logits.
pub fn logits_entropy(logits: &[f64]) -> Result<f64> {
    Ok(entropy(&softmax(logits)?))
}

/// Log-probability of `tok` recomputed from raw logits.
pub fn logits_logprob(logits: &[f64], tok: usize) -> Result<f64> {
    Ok(log_softmax(logits)?[tok])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn toy(seed: u64) -> Agent {
        Agent::with_scale(
            AgentConfig {
                src_vocab: 7,
                tgt_vocab: 6,
                emb: 5,
                hidden: 4,
            },
            0.5,
            seed,
        )
    }

    #[test]
    fn single_token_encoding_is_one_step() {
        let a = toy(1);
        let states = a.encode(&[4]).unwrap();
        assert_eq!(states.len(), 1);
        let x = a.store.get(a.src_emb.table).row(4).to_vec();
        let h = a.encoder.step(&a.store, &x, &[0.0; 4]).unwrap();
        assert_eq!(states[0], h);
    }

    #[test]
    fn encoding_matches_manual_unroll_and_prefix() {
        let a = toy(2);
        let toks = [4, 5, 6, 4, 1];
        let states = a.encode(&toks).unwrap();
        let mut h = vec![0.0; 4];
        for (t, &tok) in toks.iter().enumerate() {
            let x = a.store.get(a.src_emb.table).row(tok).to_vec();
            h = a.encoder.step(&a.store, &x, &h).unwrap();
            for (p, q) in states[t].iter().zip(&h) {
                assert!((p - q).abs() < 1e-14);
            }
        }
        let prefix = a.encode(&toks[..3]).unwrap();
        assert_eq!(prefix[..], states[..3]);
    }

    #[test]
    fn padded_batch_matches_single() {
        let a = toy(3);
        let mut tape = Tape::new();
        let srcs = vec![vec![4, 5], vec![6, 4, 5, 4]];
        let enc = a.encode_batch(&mut tape, &srcs, None).unwrap();
        let single = a.encode(&srcs[0]).unwrap();
        for (x, y) in tape.value(enc.final_state)[..4].iter().zip(&single[1]) {
            assert!((x - y).abs() < 1e-14);
        }
        let lp = a.sequence_logprobs(&srcs, &[vec![3], vec![4, 5]], 8).unwrap();
        assert!((lp[0] - a.sequence_logprob(&srcs[0], &[3]).unwrap()).abs() < 1e-12);
        assert!((lp[1] - a.sequence_logprob(&srcs[1], &[4, 5]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_is_reported() {
        let a = toy(4);
        assert!(matches!(a.encode(&[9]), Err(Error::OutOfVocab { id: 9, vocab: 7 })));
        assert!(matches!(a.sequence_logprob(&[4], &[8]), Err(Error::OutOfVocab { .. })));
    }

    #[test]
    fn attention_cases() {
        let a = toy(5);
        let ann = vec![vec![0.1, -0.2, 0.3, 0.5]];
        let (ctx, w) = a.attend(&[0.2, 0.1, 0.0, -0.3], &ann).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(ctx, ann[0]);
        let same = vec![ann[0].clone(); 3];
        let (_, w) = a.attend(&[0.2, 0.1, 0.0, -0.3], &same).unwrap();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(a.attend(&[0.0; 4], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let a = toy(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ann: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ctx, w) = a.attend(&s, &ann).unwrap();
        let wq = a.store.get(a.att_query.weight);
        let wk = a.store.get(a.att_key.weight);
        let bk = a.store.get(a.att_key.bias.unwrap()).data();
        let v = a.store.get(a.att_score.weight).data();
        let dot = |r: &[f64], x: &[f64]| r.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
        let scores: Vec<f64> = ann
            .iter()
            .map(|h| {
                (0..4)
                    .map(|i| v[i] * (dot(wq.row(i), &s) + dot(wk.row(i), h) + bk[i]).tanh())
                    .sum()
            })
            .collect();
        let expect = softmax(&scores).unwrap();
        for j in 0..3 {
            assert!((w[j] - expect[j]).abs() < 1e-14);
        }
        for i in 0..4 {
            let c: f64 = (0..3).map(|j| expect[j] * ann[j][i]).sum();
            assert!((ctx[i] - c).abs() < 1e-14);
        }
        let _ = sigmoid(0.0);
    }

    #[test]
    fn greedy_boundaries_and_determinism() {
        let a = toy(7);
        let m = a.decode_greedy(&[4, 5], 1).unwrap();
        assert_eq!(m.len(), 1);
        let m1 = a.decode_greedy(&[4, 5, 6], 6).unwrap();
        let m2 = a.decode_greedy(&[4, 5, 6], 6).unwrap();
        assert_eq!(m1, m2);
        assert!(m1.logprobs.iter().all(|&l| l <= 0.0));
        if m1.terminated {
            assert_eq!(*m1.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn recorded_values_match_recomputation() {
        let a = toy(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = a.decode_sample(&[4, 6, 5], 5, 1.0, &mut rng).unwrap();
            for t in 0..m.len() {
                let lp = logits_logprob(&m.logits[t], m.tokens[t]).unwrap();
                assert!((lp - m.logprobs[t]).abs() < 1e-12);
                let h = logits_entropy(&m.logits[t]).unwrap();
                assert!((h - m.entropies[t]).abs() < 1e-10);
            }
        }
        let g = a.decode_greedy(&[4, 6, 5], 5).unwrap();
        let tf = a.sequence_logprob(&[4, 6, 5], g.content()).unwrap();
        if g.terminated {
            assert!((tf - g.logprob()).abs() < 1e-10);
        } else {
            let eos = a.next_distribution(&[4, 6, 5], &g.tokens).unwrap()[EOS].ln();
            assert!((tf - g.logprob() - eos).abs() < 1e-10);
        }
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let a = toy(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = a.decode_greedy(&[5, 4], 6).unwrap();
        let s = a.decode_sample(&[5, 4], 6, 1e-6, &mut rng).unwrap();
        assert_eq!(g.tokens, s.tokens);
        assert!(a.decode_sample(&[5], 3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn first_token_frequencies_match_distribution() {
        let a = toy(10);
        let p = a.next_distribution(&[4, 5], &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut counts = vec![0usize; p.len()];
        let srcs = vec![vec![4, 5]; 500];
        let caps = vec![1; 500];
        for _ in 0..n / 500 {
            let mut tape = Tape::new();
            let out = a
                .decode_batch(&mut tape, &srcs, &caps, DecodeMode::Sample { temperature: 1.0 }, &mut rng)
                .unwrap();
            for m in out.messages {
                counts[m.tokens[0]] += 1;
            }
        }
        for (c, &pi) in counts.iter().zip(&p) {
            let sd = (n as f64 * pi * (1.0 - pi)).sqrt();
            assert!((*c as f64 - n as f64 * pi).abs() <= 3.0 * sd + 1e-9, "{c} vs {}", n as f64 * pi);
        }
    }

    #[test]
    fn capped_lengths() {
        let a = toy(12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in 1..6 {
            let src: Vec<usize> = (0..len).map(|i| 4 + i % 3).collect();
            for _ in 0..30 {
                let m = a
                    .decode_capped(&src, DecodeMode::Sample { temperature: 1.0 }, &mut rng)
                    .unwrap();
                assert!(m.len() <= len && !m.is_empty());
                if !m.terminated {
                    assert_eq!(m.len(), len);
                } else {
                    assert_eq!(m.tokens.iter().position(|&t| t == EOS), Some(m.len() - 1));
                }
            }
        }
    }

    #[test]
    fn sequence_logprob_hand_oracle() {
        // tiny model: 1-dim hidden, 3-token output vocab
        let mut a = Agent::with_scale(
            AgentConfig {
                src_vocab: 4,
                tgt_vocab: 3,
                emb: 1,
                hidden: 1,
            },
            0.0,
            0,
        );
        let out_b = a.out.bias.unwrap();
        let vals = [0.5, -1.0, 2.0];
        a.store.get_mut(out_b).data_mut().copy_from_slice(&vals);
        // with zero weights every step's logits equal the output bias
        let lp = log_softmax(&vals).unwrap();
        let got = a.sequence_logprob(&[1], &[0, 1]).unwrap();
        assert!((got - (lp[0] + lp[1] + lp[EOS])).abs() < 1e-14);
        let total: f64 = [0usize, 1, 2].iter().map(|&t| lp[t]).sum();
        assert!((a.sequence_logprob(&[1, 3], &[0, 1]).unwrap() - (total)).abs() < 1e-14);
    }

    fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for t in 0..v {
                    let mut s = p.clone();
                    s.push(t);
                    if t == EOS || len == max_len {
                        out.push(s);
                    } else {
                        next.push(s);
                    }
                }
            }
            frontier = next;
        }
        out
    }

    fn enumerate_scores(a: &Agent, src: &[usize], max_len: usize) -> Vec<(Vec<usize>, f64)> {
        all_sequences(a.config.tgt_vocab, max_len)
            .into_iter()
            .map(|s| {
                let mut lp = 0.0;
                for t in 0..s.len() {
                    lp += a.next_distribution(src, &s[..t]).unwrap()[s[t]].ln();
                }
                let n = s.len() as f64;
                (s, lp / n)
            })
            .collect()
    }

    #[test]
    fn beam_matches_enumeration_on_toy() {
        let a = Agent::with_scale(
            AgentConfig {
                src_vocab: 5,
                tgt_vocab: 4,
                emb: 3,
                hidden: 3,
            },
            1.5,
            21,
        );
        let src = [4, 3];
        let mut all = enumerate_scores(&a, &src, 3);
        all.sort_by(|x, y| y.1.total_cmp(&x.1));
        let beam = a.beam_search(&src, 2, 3).unwrap();
        assert!(!beam.shortfall);
        for (h, (toks, score)) in beam.hypotheses.iter().zip(&all) {
            assert_eq!(&h.tokens, toks);
            assert!((h.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_dominates_greedy_and_k1_is_greedy() {
        for seed in 0..5 {
            let a = toy(30 + seed);
            let g = a.decode_greedy(&[4, 5, 6], 5).unwrap();
            let g_score = g.logprob() / g.len() as f64;
            let b = a.beam_search(&[4, 5, 6], 3, 5).unwrap();
            assert!(b.hypotheses[0].score >= g_score - 1e-12);
            for w in b.hypotheses.windows(2) {
                assert!(w[0].score >= w[1].score && w[0].tokens != w[1].tokens);
            }
            let b1 = a.beam_search(&[4, 5, 6], 1, 5).unwrap();
            assert_eq!(b1.hypotheses[0].tokens, g.tokens);
        }
    }

    #[test]
    fn beam_shortfall_on_tiny_space() {
        let a = toy(40);
        // max_len 1 allows at most |V| distinct hypotheses
        let b = a.beam_search(&[4], 10, 1).unwrap();
        assert!(b.shortfall);
        assert!(b.hypotheses.len() <= 6);
    }

    #[test]
    fn ensemble_cases() {
        let a = toy(50);
        let g = a.decode_greedy(&[4, 5], 6).unwrap();
        assert_eq!(a.ensemble_decode(&[vec![4, 5]], 6).unwrap(), g.tokens);
        assert_eq!(
            a.ensemble_decode(&[vec![4, 5], vec![4, 5], vec![4, 5]], 6).unwrap(),
            g.tokens
        );
        // two sources: first token is the argmax of the averaged distributions
        let p1 = a.next_distribution(&[4, 5], &[]).unwrap();
        let p2 = a.next_distribution(&[6, 6, 1], &[]).unwrap();
        let avg: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| (x + y) / 2.0).collect();
        let e = a.ensemble_decode(&[vec![4, 5], vec![6, 6, 1]], 1).unwrap();
        assert_eq!(e, vec![argmax(&avg)]);
    }
}
