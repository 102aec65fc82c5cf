//! Cross-entropy pretraining and joint policy-gradient fine-tuning.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{Agent, DecodeMode, Dropout, Message, StepVars};
use crate::constraints::{batches, compose_reward, LanguageModel, Ranker, RewardConfig};
use crate::corpus::{Triple, Vocabs};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, decode_chain, decode_targets, pivot_lm_nll};
use crate::nn::{Mlp, INIT_SCALE};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Two-layer ReLU perceptron mapping a decoder state to a reward estimate.
#[derive(Debug, Clone)]
pub struct BaselineNet {
    pub store: ParamStore,
    pub input: usize,
    mlp: Mlp,
}

impl BaselineNet {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "baseline", input, hidden, 1, INIT_SCALE, &mut rng);
        Self { store, input, mlp }
    }

    /// Baseline values `[batch, 1]`; the state is detached so no gradient
    /// reaches the policy through this path.
    pub fn forward(&self, tape: &mut Tape, state: Var) -> Var {
        let s = tape.detach(state);
        self.mlp.forward(tape, &self.store, s)
    }

    /// Shifts the output bias so that the baseline predicts `mean` on average
    /// over `states` (rows of a `[n, input]` matrix).
    pub fn warm_start(&mut self, states: &[f64], mean: f64) -> Result<()> {
        let n = states.len() / self.input.max(1);
        if n == 0 || n * self.input != states.len() {
            return Err(Error::Shape(format!("warm start expects rows of {}", self.input)));
        }
        let mut tape = Tape::new();
        let x = tape.constant(n, self.input, states.to_vec());
        let v = self.forward(&mut tape, x);
        let cur = tape.value(v).iter().sum::<f64>() / n as f64;
        let bias = self.mlp.out.bias.expect("baseline output has a bias");
        self.store.get_mut(bias).data_mut()[0] += mean - cur;
        Ok(())
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.input {
            return Err(Error::Shape(format!("baseline expects {} inputs", self.input)));
        }
        let mut tape = Tape::new();
        let x = tape.constant(1, self.input, state.to_vec());
        let v = self.forward(&mut tape, x);
        Ok(tape.value(v)[0])
    }
}

/// A triple in id space.
#[derive(Debug, Clone, PartialEq)]
pub struct GameExample {
    pub src: Vec<usize>,
    pub pivot: Vec<usize>,
    pub tgt: Vec<usize>,
    pub grounding: Vec<f64>,
}

pub fn encode_triples(triples: &[Triple], vocabs: &Vocabs) -> Vec<GameExample> {
    triples
        .iter()
        .map(|t| GameExample {
            src: vocabs.source.encode(&t.src),
            pivot: vocabs.pivot.encode(&t.pivot),
            tgt: vocabs.target.encode(&t.tgt),
            grounding: t.grounding.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pretraining

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub clip: f64,
    pub dropout: f64,
    /// Cap decoded outputs at the source length (the game's constraint);
    /// otherwise at twice the reference length plus two.
    pub cap_to_source: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            adam: AdamConfig::default(),
            clip: 5.0,
            dropout: 0.1,
            cap_to_source: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_bleu: f64,
    pub best_bleu: f64,
    pub best_epoch: usize,
    /// (epoch, mean training NLL per token, dev BLEU).
    pub history: Vec<(usize, f64, f64)>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |h| h.1)
    }
}

/// Greedy corpus BLEU of `agent` on `(source, reference)` id pairs.
pub fn agent_bleu(agent: &Agent, pairs: &[(Vec<usize>, Vec<usize>)], cap_to_source: bool) -> Result<f64> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
    let caps: Vec<usize> = pairs
        .iter()
        .map(|(s, r)| if cap_to_source { s.len() } else { 2 * r.len() + 2 })
        .collect();
    let hyps: Vec<Vec<usize>> = agent
        .greedy_many(&srcs, &caps, 100)?
        .iter()
        .map(|m| m.content().to_vec())
        .collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    corpus_bleu(&hyps, &refs, 4)
}

/// Teacher-forced cross-entropy training; leaves `agent` at the epoch with
/// the best dev BLEU (the initial parameters count as epoch 0).
pub fn pretrain(
    agent: &mut Agent,
    train: &[(Vec<usize>, Vec<usize>)],
    dev: &[(Vec<usize>, Vec<usize>)],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("pretraining needs non-empty train and dev corpora".into()));
    }
    let mut adam = AdamState::new(&agent.store, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop = Dropout::new(cfg.dropout, cfg.seed ^ 0x5eed);
    let initial = agent_bleu(agent, dev, cfg.cap_to_source)?;
    let mut best = (initial, 0, agent.store.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut nll, mut toks) = (0.0, 0usize);
        for batch in batches(train.len(), cfg.batch, &mut rng) {
            let srcs: Vec<Vec<usize>> = batch.iter().map(|&i| train[i].0.clone()).collect();
            let outs: Vec<Vec<usize>> = batch.iter().map(|&i| train[i].1.clone()).collect();
            let mut tape = Tape::new();
            let d = (cfg.dropout > 0.0).then_some(&mut drop);
            let ll = agent.teacher_forced(&mut tape, &srcs, &outs, d)?;
            let total = tape.sum(ll);
            let v = tape.scalar(total);
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    detail: format!("pretraining loss {v}"),
                });
            }
            nll -= v;
            toks += outs.iter().map(|o| o.len() + 1).sum::<usize>();
            let loss = tape.scale(total, -1.0 / batch.len() as f64);
            let mut g = tape.backward(loss)?.for_store(&agent.store);
            clip_global_norm(&mut g, cfg.clip);
            adam.step(&mut agent.store, &g)?;
        }
        let bleu = agent_bleu(agent, dev, cfg.cap_to_source)?;
        history.push((epoch, nll / toks as f64, bleu));
        if bleu > best.0 {
            best = (bleu, epoch, agent.store.clone());
        }
    }
    agent.store.copy_values_from(&best.2)?;
    Ok(PretrainReport {
        initial_bleu: initial,
        best_bleu: best.0,
        best_epoch: best.1,
        history,
    })
}

// ---------------------------------------------------------------------------
// rollouts and objectives

/// Frozen scorers whose log-probabilities enter the reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct Constraints<'a> {
    pub lm: Option<&'a LanguageModel>,
    pub ranker: Option<&'a Ranker>,
}

/// One sampled batch of the game, recorded on its own tape.
pub struct RolloutBatch {
    pub tape: Tape,
    pub messages: Vec<Message>,
    pub steps: Vec<StepVars>,
    /// Baseline column `[batch, 1]` per decoding step.
    pub baselines: Vec<Var>,
    pub rewards: Vec<f64>,
    pub logp_b: Vec<f64>,
    pub lm_scores: Option<Vec<f64>>,
    pub g_scores: Option<Vec<f64>>,
    /// Agent B's teacher-forced log-likelihood of the gold targets.
    pub loglik_b: Var,
    pub sources: Vec<Vec<usize>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Baseline values of example `k`, one per step it was active.
    pub fn baseline_values(&self, k: usize) -> Vec<f64> {
        self.steps
            .iter()
            .zip(&self.baselines)
            .filter(|(s, _)| s.active[k])
            .map(|(_, &b)| self.tape.value(b)[k])
            .collect()
    }

    /// Messages longer than their source (should always be zero).
    pub fn cap_violations(&self) -> usize {
        self.messages
            .iter()
            .zip(&self.sources)
            .filter(|(m, s)| m.len() > s.len())
            .count()
    }
}

/// Samples messages from `a`, scores them with `b` and the active
/// constraints, and evaluates the baseline at every decoder state.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    a: &Agent,
    b: &Agent,
    baseline: &BaselineNet,
    constraints: Constraints,
    batch: &[&GameExample],
    cfg: &RewardConfig,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let sources: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
    let caps: Vec<usize> = sources.iter().map(Vec::len).collect();
    let dec = a.decode_batch(&mut tape, &sources, &caps, DecodeMode::Sample { temperature }, rng)?;
    let baselines: Vec<Var> = dec.steps.iter().map(|s| baseline.forward(&mut tape, s.state)).collect();
    let inputs: Vec<Vec<usize>> = dec.messages.iter().map(Message::as_input).collect();
    let tgts: Vec<Vec<usize>> = batch.iter().map(|e| e.tgt.clone()).collect();
    let loglik_b = b.teacher_forced(&mut tape, &inputs, &tgts, None)?;
    let logp_b = tape.value(loglik_b).to_vec();
    let lm_scores = match constraints.lm {
        Some(lm) => Some(lm.logliks(&inputs, inputs.len())?),
        None => None,
    };
    let g_scores = match constraints.ranker {
        Some(r) => {
            let vecs: Vec<Vec<f64>> = batch.iter().map(|e| e.grounding.clone()).collect();
            Some(r.grounding_scores(&inputs, &vecs)?)
        }
        None => None,
    };
    let rewards = (0..batch.len())
        .map(|k| {
            compose_reward(
                logp_b[k],
                lm_scores.as_ref().map(|v| v[k]),
                g_scores.as_ref().map(|v| v[k]),
                cfg,
            )
        })
        .collect();
    Ok(RolloutBatch {
        tape,
        messages: dec.messages,
        steps: dec.steps,
        baselines,
        rewards,
        logp_b,
        lm_scores,
        g_scores,
        loglik_b,
        sources,
    })
}

/// Σ_k Σ_t [α_entr H − α_b (R_k − b_kt)² + α_pg (R_k − b_kt) log p] over the
/// active steps. The advantage enters the policy term as a constant; the
/// squared error reaches the baseline only.
pub fn policy_objective(
    tape: &mut Tape,
    steps: &[StepVars],
    baselines: &[Var],
    rewards: &[f64],
    cfg: &RewardConfig,
    standardize: bool,
) -> Result<Var> {
    if steps.len() != baselines.len() || steps.is_empty() {
        return Err(Error::Shape("one baseline column per decoding step required".into()));
    }
    let n = rewards.len();
    let r = tape.constant(n, 1, rewards.to_vec());
    let mut adv: Vec<Vec<f64>> = steps
        .iter()
        .zip(baselines)
        .map(|(_, &bv)| {
            let b = tape.value(bv);
            (0..n).map(|k| rewards[k] - b[k]).collect()
        })
        .collect();
    if standardize {
        let vals: Vec<f64> = steps
            .iter()
            .zip(&adv)
            .flat_map(|(s, a)| (0..n).filter(|&k| s.active[k]).map(|k| a[k]))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let sd = var.sqrt().max(1e-8);
        adv.iter_mut().flatten().for_each(|x| *x = (*x - mean) / sd);
    }
    let mut total: Option<Var> = None;
    for ((s, &bv), a) in steps.iter().zip(baselines).zip(&adv) {
        let mask: Vec<f64> = s.active.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        let coef: Vec<f64> = a.iter().zip(&mask).map(|(x, m)| x * m * cfg.alpha_pg).collect();
        let coef = tape.constant(n, 1, coef);
        let pg = tape.mul(s.logp, coef);
        let m = tape.constant(n, 1, mask);
        let ent = tape.mul(s.entropy, m);
        let ent = tape.scale(ent, cfg.alpha_entr);
        let err = tape.sub(r, bv);
        let err = tape.square(err);
        let err = tape.mul(err, m);
        let err = tape.scale(err, -cfg.alpha_b);
        let step = tape.add(pg, ent);
        let step = tape.add(step, err);
        total = Some(match total {
            Some(t) => tape.add(t, step),
            None => step,
        });
    }
    let t = total.unwrap();
    Ok(tape.sum(t))
}

/// 𝕃_A for a rollout.
pub fn agent_a_objective(ro: &mut RolloutBatch, cfg: &RewardConfig, standardize: bool) -> Result<Var> {
    policy_objective(&mut ro.tape, &ro.steps, &ro.baselines, &ro.rewards, cfg, standardize)
}

/// 𝕃_B for a rollout: Σ_k log p_B(target_k | message_k).
pub fn agent_b_objective(ro: &mut RolloutBatch) -> Var {
    ro.tape.sum(ro.loglik_b)
}

// ---------------------------------------------------------------------------
// fine-tuning

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub reward: RewardConfig,
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_baseline: f64,
    /// Set the baseline's output bias to the first batch's mean reward.
    pub warm_start: bool,
    pub batch: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Non-improving evaluations before the learning rate is halved.
    pub patience: usize,
    /// Non-improving evaluations before training stops.
    pub stop_after: usize,
    pub clip: f64,
    pub temperature: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            lr_a: 1e-3,
            lr_b: 1e-3,
            lr_baseline: 1e-2,
            warm_start: true,
            batch: 32,
            max_steps: 1000,
            eval_interval: 50,
            patience: 3,
            stop_after: 10,
            clip: 5.0,
            temperature: 1.0,
            standardize: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_a >= 0.0 && self.lr_b >= 0.0 && self.lr_baseline >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if self.batch < 2 {
            return bad("fine-tuning batch must hold at least two examples");
        }
        if self.eval_interval == 0 || self.patience == 0 || self.stop_after == 0 {
            return bad("eval interval, patience and stop count must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("sampling temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub task_bleu: f64,
    pub pivot_bleu: f64,
    pub lm_nll: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub lr: f64,
    pub cap_violations: usize,
}

const LOG_HEADER: &str =
    "step\tepoch\ttask_bleu\tpivot_bleu\tlm_nll\tmean_reward\tmean_entropy\tlr\tcap_violations";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_step: usize,
    pub messages: usize,
    pub cap_violations: usize,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch < last.epoch || r.step < last.step {
                return Err(Error::Usage("train log records must be appended in order".into()));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn first(&self) -> Option<&LogRecord> {
        self.records.first()
    }

    pub fn best(&self) -> Option<&LogRecord> {
        self.records.iter().find(|r| r.step == self.best_step)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.step,
                r.epoch,
                r.task_bleu,
                r.pivot_bleu,
                r.lm_nll,
                r.mean_reward,
                r.mean_entropy,
                r.lr,
                r.cap_violations
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Format("train log header mismatch".into()));
        }
        let mut log = TrainLog::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(Error::Format(format!("train log line {}: {} fields", i + 2, f.len())));
            }
            let bad = |_| Error::Format(format!("train log line {}: bad number", i + 2));
            let fl = |j: usize| f[j].parse::<f64>().map_err(bad);
            let us = |j: usize| f[j].parse::<usize>().map_err(|_| Error::Format(format!("train log line {}", i + 2)));
            log.push(LogRecord {
                step: us(0)?,
                epoch: us(1)?,
                task_bleu: fl(2)?,
                pivot_bleu: fl(3)?,
                lm_nll: fl(4)?,
                mean_reward: fl(5)?,
                mean_entropy: fl(6)?,
                lr: fl(7)?,
                cap_violations: us(8)?,
            })?;
        }
        Ok(log)
    }
}

/// Dev-set scores of the greedy chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainScores {
    pub task_bleu: f64,
    pub pivot_bleu: f64,
    pub lm_nll: f64,
}

pub fn evaluate_chain(
    a: &Agent,
    b: &Agent,
    dev: &[Triple],
    vocabs: &Vocabs,
    lm: Option<&LanguageModel>,
) -> Result<ChainScores> {
    let chain = decode_chain(a, b, dev, vocabs)?;
    chain_scores(&chain.pivot, &chain.target, dev, vocabs, lm)
}

fn chain_scores(
    pivot: &[Vec<usize>],
    target: &[Vec<usize>],
    dev: &[Triple],
    vocabs: &Vocabs,
    lm: Option<&LanguageModel>,
) -> Result<ChainScores> {
    let prefs: Vec<Vec<usize>> = dev.iter().map(|t| vocabs.pivot.encode(&t.pivot)).collect();
    let trefs: Vec<Vec<usize>> = dev.iter().map(|t| vocabs.target.encode(&t.tgt)).collect();
    Ok(ChainScores {
        task_bleu: corpus_bleu(target, &trefs, 4)?,
        pivot_bleu: corpus_bleu(pivot, &prefs, 4)?,
        lm_nll: match lm {
            Some(lm) => pivot_lm_nll(lm, pivot)?,
            None => f64::NAN,
        },
    })
}

struct Annealer {
    best: f64,
    bad: usize,
}

impl Annealer {
    /// Returns (improved, halve, stop).
    fn observe(&mut self, score: f64, cfg: &FinetuneConfig) -> (bool, bool, bool) {
        if score > self.best {
            self.best = score;
            self.bad = 0;
            return (true, false, false);
        }
        self.bad += 1;
        (false, self.bad % cfg.patience == 0, self.bad >= cfg.stop_after)
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Joint fine-tuning of both agents on the game objective 𝕃_A + 𝕃_B.
/// On return the agents and baseline hold the parameters of the evaluation
/// with the best dev task BLEU.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    a: &mut Agent,
    b: &mut Agent,
    baseline: &mut BaselineNet,
    constraints: Constraints,
    train: &[Triple],
    dev: &[Triple],
    vocabs: &Vocabs,
    eval_lm: Option<&LanguageModel>,
    cfg: &FinetuneConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < 2 || dev.is_empty() {
        return Err(Error::Config("fine-tuning needs training and dev triples".into()));
    }
    let examples = encode_triples(train, vocabs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam_a = AdamConfig { lr: cfg.lr_a, ..AdamConfig::default() };
    let adam_b = AdamConfig { lr: cfg.lr_b, ..AdamConfig::default() };
    let mut opt_a = AdamState::new(&a.store, adam_a);
    let adam_base = AdamConfig { lr: cfg.lr_baseline, ..AdamConfig::default() };
    let mut opt_base = AdamState::new(&baseline.store, adam_base);
    let mut opt_b = AdamState::new(&b.store, adam_b);

    let mut log = TrainLog::default();
    let s0 = evaluate_chain(a, b, dev, vocabs, eval_lm)?;
    log.push(LogRecord {
        step: 0,
        epoch: 0,
        task_bleu: s0.task_bleu,
        pivot_bleu: s0.pivot_bleu,
        lm_nll: s0.lm_nll,
        mean_reward: f64::NAN,
        mean_entropy: f64::NAN,
        lr: cfg.lr_a,
        cap_violations: 0,
    })?;
    let mut best = (a.store.clone(), b.store.clone(), baseline.store.clone());
    let mut anneal = Annealer { best: s0.task_bleu, bad: 0 };
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut epoch = 0;
    let (mut rsum, mut esum, mut rn, mut en, mut viol) = (0.0, 0.0, 0usize, 0usize, 0usize);

    for step in 1..=cfg.max_steps {
        if order.is_empty() {
            order = batches(examples.len(), cfg.batch, &mut rng);
            order.retain(|bt| bt.len() >= 2);
            order.reverse();
            epoch += 1;
        }
        let idx = order.pop().unwrap();
        let batch: Vec<&GameExample> = idx.iter().map(|&i| &examples[i]).collect();
        let mut ro = rollout(a, b, baseline, constraints, &batch, &cfg.reward, cfg.temperature, &mut rng)?;
        if step == 1 && cfg.warm_start {
            let states: Vec<f64> = ro.steps.iter().flat_map(|s| ro.tape.value(s.state).to_vec()).collect();
            let mean = ro.rewards.iter().sum::<f64>() / ro.len() as f64;
            baseline.warm_start(&states, mean)?;
            ro = rollout(a, b, baseline, constraints, &batch, &cfg.reward, cfg.temperature, &mut rng)?;
        }
        viol += ro.cap_violations();
        log.messages += ro.len();
        rsum += ro.rewards.iter().sum::<f64>();
        rn += ro.len();
        for m in &ro.messages {
            esum += m.entropies.iter().sum::<f64>();
            en += m.entropies.len();
        }
        let la = agent_a_objective(&mut ro, &cfg.reward, cfg.standardize)?;
        let lb = agent_b_objective(&mut ro);
        let tape = &mut ro.tape;
        let joint = tape.add(la, lb);
        let loss = tape.scale(joint, -1.0 / batch.len() as f64);
        check_finite(step, "loss", tape.scalar(loss))?;
        let grads = tape.backward(loss)?;
        let mut ga = grads.for_store(&a.store);
        let mut gbase = grads.for_store(&baseline.store);
        let mut gb = grads.for_store(&b.store);
        clip_global_norm(&mut ga, cfg.clip);
        clip_global_norm(&mut gbase, cfg.clip);
        clip_global_norm(&mut gb, cfg.clip);
        opt_a.step(&mut a.store, &ga)?;
        opt_base.step(&mut baseline.store, &gbase)?;
        opt_b.step(&mut b.store, &gb)?;
        if !(a.store.all_finite() && b.store.all_finite() && baseline.store.all_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let s = evaluate_chain(a, b, dev, vocabs, eval_lm)?;
            log.push(LogRecord {
                step,
                epoch,
                task_bleu: s.task_bleu,
                pivot_bleu: s.pivot_bleu,
                lm_nll: s.lm_nll,
                mean_reward: rsum / rn.max(1) as f64,
                mean_entropy: esum / en.max(1) as f64,
                lr: opt_a.lr(),
                cap_violations: viol,
            })?;
            log.cap_violations += viol;
            (rsum, esum, rn, en, viol) = (0.0, 0.0, 0, 0, 0);
            let (improved, halve, stop) = anneal.observe(s.task_bleu, cfg);
            if improved {
                best = (a.store.clone(), b.store.clone(), baseline.store.clone());
                log.best_step = step;
            }
            if halve {
                opt_a.set_lr(opt_a.lr() / 2.0);
                opt_base.set_lr(opt_base.lr() / 2.0);
                opt_b.set_lr(opt_b.lr() / 2.0);
            }
            if stop {
                break;
            }
        }
    }
    a.store.copy_values_from(&best.0)?;
    b.store.copy_values_from(&best.1)?;
    baseline.store.copy_values_from(&best.2)?;
    Ok(log)
}

/// Fine-tunes only Agent B on greedy messages of the frozen Agent A.
pub fn finetune_b_only(
    a: &Agent,
    b: &mut Agent,
    train: &[Triple],
    dev: &[Triple],
    vocabs: &Vocabs,
    eval_lm: Option<&LanguageModel>,
    cfg: &FinetuneConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < 2 || dev.is_empty() {
        return Err(Error::Config("fine-tuning needs training and dev triples".into()));
    }
    let examples = encode_triples(train, vocabs);
    let srcs: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
    let caps: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let msgs = a.greedy_many(&srcs, &caps, 100)?;
    let inputs: Vec<Vec<usize>> = msgs.iter().map(Message::as_input).collect();
    let dev_chain = decode_chain(a, b, dev, vocabs)?;
    let dev_inputs: Vec<Vec<usize>> = {
        let dsrc: Vec<Vec<usize>> = dev.iter().map(|t| vocabs.source.encode(&t.src)).collect();
        let dcaps: Vec<usize> = dsrc.iter().map(Vec::len).collect();
        a.greedy_many(&dsrc, &dcaps, 100)?.iter().map(Message::as_input).collect()
    };
    let eval = |b: &Agent| -> Result<ChainScores> {
        let target = decode_targets(b, &dev_inputs, dev)?;
        chain_scores(&dev_chain.pivot, &target, dev, vocabs, eval_lm)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_b = AdamState::new(&b.store, AdamConfig { lr: cfg.lr_b, ..AdamConfig::default() });
    let mut log = TrainLog::default();
    let s0 = eval(b)?;
    log.push(LogRecord {
        step: 0,
        epoch: 0,
        task_bleu: s0.task_bleu,
        pivot_bleu: s0.pivot_bleu,
        lm_nll: s0.lm_nll,
        mean_reward: f64::NAN,
        mean_entropy: f64::NAN,
        lr: cfg.lr_b,
        cap_violations: 0,
    })?;
    log.cap_violations = msgs.iter().zip(&srcs).filter(|(m, s)| m.len() > s.len()).count();
    let mut best = b.store.clone();
    let mut anneal = Annealer { best: s0.task_bleu, bad: 0 };
    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut epoch = 0;
    let (mut rsum, mut rn) = (0.0, 0usize);
    for step in 1..=cfg.max_steps {
        if order.is_empty() {
            order = batches(examples.len(), cfg.batch, &mut rng);
            order.reverse();
            epoch += 1;
        }
        let idx = order.pop().unwrap();
        let ins: Vec<Vec<usize>> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let tgts: Vec<Vec<usize>> = idx.iter().map(|&i| examples[i].tgt.clone()).collect();
        let mut tape = Tape::new();
        let ll = b.teacher_forced(&mut tape, &ins, &tgts, None)?;
        let total = tape.sum(ll);
        let v = tape.scalar(total);
        check_finite(step, "loss", v)?;
        rsum += v;
        rn += idx.len();
        log.messages += idx.len();
        let loss = tape.scale(total, -1.0 / idx.len() as f64);
        let mut g = tape.backward(loss)?.for_store(&b.store);
        clip_global_norm(&mut g, cfg.clip);
        opt_b.step(&mut b.store, &g)?;
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let s = eval(b)?;
            log.push(LogRecord {
                step,
                epoch,
                task_bleu: s.task_bleu,
                pivot_bleu: s.pivot_bleu,
                lm_nll: s.lm_nll,
                mean_reward: rsum / rn.max(1) as f64,
                mean_entropy: f64::NAN,
                lr: opt_b.lr(),
                cap_violations: 0,
            })?;
            (rsum, rn) = (0.0, 0);
            let (improved, halve, stop) = anneal.observe(s.task_bleu, cfg);
            if improved {
                best = b.store.clone();
                log.best_step = step;
            }
            if halve {
                opt_b.set_lr(opt_b.lr() / 2.0);
            }
            if stop {
                break;
            }
        }
    }
    b.store.copy_values_from(&best)?;
    Ok(log)
}
