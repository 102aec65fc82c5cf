//! Auxiliary scorers that constrain the pivot channel: a recurrent language
//! model over pivot sentences and a grounding ranker that embeds sentences
//! and grounding vectors in a joint space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{Embedding, GruCell, Linear, INIT_SCALE};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::log_softmax;

/// Reward mixing and objective weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub beta_lm: f64,
    pub beta_g: f64,
    pub alpha_pg: f64,
    pub alpha_entr: f64,
    pub alpha_b: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta_lm: 0.1,
            beta_g: 0.1,
            alpha_pg: 1.0,
            alpha_entr: 0.01,
            alpha_b: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta_lm", self.beta_lm),
            ("beta_g", self.beta_g),
            ("alpha_pg", self.alpha_pg),
            ("alpha_entr", self.alpha_entr),
            ("alpha_b", self.alpha_b),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// `logp_b + β_LM·lm + β_G·g`, skipping absent terms.
pub fn compose_reward(logp_b: f64, lm: Option<f64>, g: Option<f64>, cfg: &RewardConfig) -> f64 {
    logp_b + lm.map_or(0.0, |x| cfg.beta_lm * x) + g.map_or(0.0, |x| cfg.beta_g * x)
}

/// Shared settings of the supervised training loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub clip: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            adam: AdamConfig::default(),
            clip: 5.0,
            seed: 0,
        }
    }
}

pub(crate) fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One-layer recurrent language model over pivot tokens.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub store: ParamStore,
    pub vocab: usize,
    pub hidden: usize,
    emb: Embedding,
    cell: GruCell,
    out: Linear,
}

impl LanguageModel {
    pub fn new(vocab: usize, hidden: usize, seed: u64) -> Self {
        Self::with_scale(vocab, hidden, INIT_SCALE, seed)
    }

    pub fn with_scale(vocab: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "lm_emb", vocab, hidden, scale, &mut rng);
        let cell = GruCell::new(&mut store, "lm_cell", hidden, hidden, scale, &mut rng);
        let out = Linear::new(&mut store, "lm_out", hidden, vocab, true, scale, &mut rng);
        Self {
            store,
            vocab,
            hidden,
            emb,
            cell,
            out,
        }
    }

    /// Per-step log-probabilities (tokens then EOS) as one `[batch, 1]`
    /// column per step, with zeros past each sequence's end.
    fn step_logprobs(&self, tape: &mut Tape, seqs: &[Vec<usize>]) -> Result<Vec<Var>> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Usage("language model needs non-empty sentences".into()));
        }
        if let Some(&id) = seqs.iter().flatten().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfVocab { id, vocab: self.vocab });
        }
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len() + 1).max().unwrap();
        let mut h = tape.constant(b, self.hidden, vec![0.0; b * self.hidden]);
        let mut prev = vec![BOS; b];
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = self.emb.forward(tape, &self.store, &prev);
            h = self.cell.forward(tape, &self.store, x, h);
            let logits = self.out.forward(tape, &self.store, h);
            let lp = tape.log_softmax(logits);
            let gold: Vec<usize> = seqs
                .iter()
                .map(|s| if t < s.len() { s[t] } else { EOS })
                .collect();
            let mut picked = tape.pick(lp, &gold);
            if seqs.iter().any(|s| t > s.len()) {
                let m = seqs.iter().map(|s| if t <= s.len() { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(b, 1, m);
                picked = tape.mul(picked, m);
            }
            out.push(picked);
            prev = gold;
        }
        Ok(out)
    }

    /// Sentence log-likelihoods (including EOS) as a `[batch, 1]` column.
    pub fn loglik_var(&self, tape: &mut Tape, seqs: &[Vec<usize>]) -> Result<Var> {
        let steps = self.step_logprobs(tape, seqs)?;
        let mut acc = steps[0];
        for &s in &steps[1..] {
            acc = tape.add(acc, s);
        }
        Ok(acc)
    }

    /// Log-probability of each token followed by the EOS term.
    pub fn token_logprobs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let steps = self.step_logprobs(&mut tape, &[tokens.to_vec()])?;
        Ok(steps.iter().map(|&v| tape.value(v)[0]).collect())
    }

    pub fn loglikelihood(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.token_logprobs(tokens)?.iter().sum())
    }

    /// Sentence log-likelihoods in chunks of `chunk`.
    pub fn logliks(&self, seqs: &[Vec<usize>], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for c in seqs.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let v = self.loglik_var(&mut tape, c)?;
            out.extend_from_slice(tape.value(v));
        }
        Ok(out)
    }

    /// Maximum-likelihood training; returns the final-epoch mean NLL per
    /// token (including EOS).
    pub fn train(&mut self, corpus: &[Vec<usize>], sched: &Schedule) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Config("language model corpus is empty".into()));
        }
        let mut adam = AdamState::new(&self.store, sched.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        let mut last = f64::NAN;
        for _ in 0..sched.epochs {
            let (mut nll, mut toks) = (0.0, 0usize);
            for batch in batches(corpus.len(), sched.batch, &mut rng) {
                let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| corpus[i].clone()).collect();
                let mut tape = Tape::new();
                let ll = self.loglik_var(&mut tape, &seqs)?;
                let total = tape.sum(ll);
                nll -= tape.scalar(total);
                toks += seqs.iter().map(|s| s.len() + 1).sum::<usize>();
                let loss = tape.scale(total, -1.0 / seqs.len() as f64);
                let mut g = tape.backward(loss)?.for_store(&self.store);
                clip_global_norm(&mut g, sched.clip);
                adam.step(&mut self.store, &g)?;
            }
            last = nll / toks as f64;
        }
        Ok(last)
    }
}

/// Joint-embedding ranker between pivot sentences and grounding vectors.
#[derive(Debug, Clone)]
pub struct Ranker {
    pub store: ParamStore,
    pub vocab: usize,
    pub hidden: usize,
    pub grounding_dim: usize,
    pub margin: f64,
    /// Inverse temperature of the grounding softmax.
    pub scale: f64,
    emb: Embedding,
    cell: GruCell,
    image: Linear,
}

impl Ranker {
    pub fn new(vocab: usize, hidden: usize, grounding_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = INIT_SCALE;
        let emb = Embedding::new(&mut store, "rk_emb", vocab, hidden, s, &mut rng);
        let cell = GruCell::new(&mut store, "rk_cell", hidden, hidden, s, &mut rng);
        let image = Linear::new(&mut store, "rk_image", grounding_dim, hidden, true, s, &mut rng);
        Self {
            store,
            vocab,
            hidden,
            grounding_dim,
            margin: 0.2,
            scale: 10.0,
            emb,
            cell,
            image,
        }
    }

    /// L2-normalized sentence embeddings `[batch, hidden]`.
    pub fn embed_sentences(&self, tape: &mut Tape, seqs: &[Vec<usize>]) -> Result<Var> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Usage("ranker needs non-empty sentences".into()));
        }
        if let Some(&id) = seqs.iter().flatten().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfVocab { id, vocab: self.vocab });
        }
        let b = seqs.len();
        let steps = seqs.iter().map(Vec::len).max().unwrap();
        let mut h = tape.constant(b, self.hidden, vec![0.0; b * self.hidden]);
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = self.emb.forward(tape, &self.store, &ids);
            let h_new = self.cell.forward(tape, &self.store, x, h);
            h = if seqs.iter().all(|s| t < s.len()) {
                h_new
            } else {
                let m = seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(b, 1, m);
                let d = tape.sub(h_new, h);
                let d = tape.mul_col(d, m);
                tape.add(h, d)
            };
        }
        Ok(tape.normalize_rows(h))
    }

    /// L2-normalized grounding embeddings `[batch, hidden]`.
    pub fn embed_vectors(&self, tape: &mut Tape, vecs: &[Vec<f64>]) -> Result<Var> {
        if vecs.is_empty() || vecs.iter().any(|v| v.len() != self.grounding_dim) {
            return Err(Error::Shape(format!(
                "ranker expects grounding vectors of {}",
                self.grounding_dim
            )));
        }
        let flat: Vec<f64> = vecs.iter().flatten().copied().collect();
        let x = tape.constant(vecs.len(), self.grounding_dim, flat);
        let y = self.image.forward(tape, &self.store, x);
        Ok(tape.normalize_rows(y))
    }

    /// Cosine similarity matrix `[sentences, vectors]`.
    pub fn scores(&self, tape: &mut Tape, seqs: &[Vec<usize>], vecs: &[Vec<f64>]) -> Result<Var> {
        let c = self.embed_sentences(tape, seqs)?;
        let i = self.embed_vectors(tape, vecs)?;
        Ok(tape.matmul_t(c, i))
    }

    /// Sum over pairs of the hardest-negative hinge loss.
    pub fn hinge_loss(&self, tape: &mut Tape, seqs: &[Vec<usize>], vecs: &[Vec<f64>]) -> Result<Var> {
        if seqs.len() != vecs.len() {
            return Err(Error::Shape("ranker batch needs one vector per sentence".into()));
        }
        if seqs.len() < 2 {
            return Err(Error::Usage("hinge loss needs at least two pairs".into()));
        }
        let s = self.scores(tape, seqs, vecs)?;
        Ok(hinge_from_scores(tape, s, self.margin))
    }

    /// Log-softmax of the scaled similarities of each sentence over all
    /// `vecs`, evaluated at its own vector (row `i` pairs with `vecs[i]`).
    pub fn grounding_scores(&self, seqs: &[Vec<usize>], vecs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if seqs.len() != vecs.len() || seqs.len() < 2 {
            return Err(Error::Usage("grounding needs at least two aligned candidates".into()));
        }
        let mut tape = Tape::new();
        let s = self.scores(&mut tape, seqs, vecs)?;
        let n = vecs.len();
        let sv = tape.value(s);
        (0..n)
            .map(|i| Ok(scaled_log_softmax(&sv[i * n..(i + 1) * n], self.scale)?[i]))
            .collect()
    }

    /// Grounding log-probability of `vec` for one message among `candidates`.
    pub fn grounding_score(&self, message: &[usize], vec: &[f64], candidates: &[Vec<f64>]) -> Result<f64> {
        if candidates.len() < 2 {
            return Err(Error::Usage("grounding needs at least two candidates".into()));
        }
        let pos = candidates
            .iter()
            .position(|c| c.as_slice() == vec)
            .ok_or_else(|| Error::Usage("true grounding vector is not among the candidates".into()))?;
        let mut tape = Tape::new();
        let s = self.scores(&mut tape, &[message.to_vec()], candidates)?;
        let row = tape.value(s).to_vec();
        Ok(scaled_log_softmax(&row, self.scale)?[pos])
    }

    /// Hinge-loss training; returns the final-epoch mean loss per pair.
    pub fn train(&mut self, seqs: &[Vec<usize>], vecs: &[Vec<f64>], sched: &Schedule) -> Result<f64> {
        if seqs.is_empty() || seqs.len() != vecs.len() {
            return Err(Error::Config("ranker corpus is empty or misaligned".into()));
        }
        let mut adam = AdamState::new(&self.store, sched.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        let mut last = f64::NAN;
        for _ in 0..sched.epochs {
            let (mut total, mut pairs) = (0.0, 0usize);
            for batch in batches(seqs.len(), sched.batch, &mut rng) {
                if batch.len() < 2 {
                    continue;
                }
                let s: Vec<Vec<usize>> = batch.iter().map(|&i| seqs[i].clone()).collect();
                let v: Vec<Vec<f64>> = batch.iter().map(|&i| vecs[i].clone()).collect();
                let mut tape = Tape::new();
                let l = self.hinge_loss(&mut tape, &s, &v)?;
                total += tape.scalar(l);
                pairs += batch.len();
                let loss = tape.scale(l, 1.0 / batch.len() as f64);
                let mut g = tape.backward(loss)?.for_store(&self.store);
                clip_global_norm(&mut g, sched.clip);
                adam.step(&mut self.store, &g)?;
            }
            last = total / pairs.max(1) as f64;
        }
        Ok(last)
    }

    /// Recall@1 and recall@k of retrieving each sentence's vector among
    /// consecutive pools of `pool` candidates.
    pub fn recall(&self, seqs: &[Vec<usize>], vecs: &[Vec<f64>], pool: usize, k: usize) -> Result<(f64, f64)> {
        let (mut r1, mut rk, mut n) = (0usize, 0usize, 0usize);
        for (s, v) in seqs.chunks(pool.max(2)).zip(vecs.chunks(pool.max(2))) {
            if s.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let sc = self.scores(&mut tape, s, v)?;
            let m = v.len();
            let sv = tape.value(sc);
            for i in 0..s.len() {
                let row = &sv[i * m..(i + 1) * m];
                let rank = row.iter().filter(|&&x| x > row[i]).count();
                r1 += (rank == 0) as usize;
                rk += (rank < k) as usize;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Usage("recall needs at least two pairs".into()));
        }
        Ok((r1 as f64 / n as f64, rk as f64 / n as f64))
    }
}

fn scaled_log_softmax(row: &[f64], scale: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = row.iter().map(|x| x * scale).collect();
    log_softmax(&scaled)
}

/// Hardest-negative hinge loss from an `[n, n]` similarity matrix whose
/// diagonal holds the positive pairs.
pub fn hinge_from_scores(tape: &mut Tape, s: Var, margin: f64) -> Var {
    let (n, _) = tape.shape(s);
    let diag: Vec<usize> = (0..n).collect();
    let pos = tape.pick(s, &diag);
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = -1e9;
    }
    let mask = tape.constant(n, n, mask);
    let masked = tape.add(s, mask);
    let neg_img = tape.row_max(masked);
    let st = tape.transpose(s);
    let masked_t = tape.add(st, mask);
    let neg_cap = tape.row_max(masked_t);
    let d1 = tape.sub(neg_img, pos);
    let d1 = tape.affine(d1, 1.0, margin);
    let d1 = tape.relu(d1);
    let d2 = tape.sub(neg_cap, pos);
    let d2 = tape.affine(d2, 1.0, margin);
    let d2 = tape.relu(d2);
    let both = tape.add(d1, d2);
    tape.sum(both)
}
