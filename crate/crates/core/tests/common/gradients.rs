use driftlab::agents::{Agent, AgentConfig, StepVars};
use driftlab::constraints::{LanguageModel, Ranker, RewardConfig};
use driftlab::optim::{AdamConfig, AdamState};
use driftlab::params::ParamStore;
use driftlab::tape::{Tape, Var};
use driftlab::tensor::Tensor;
use driftlab::trainer::{
    agent_a_objective, agent_b_objective, policy_objective, rollout, BaselineNet, Constraints, GameExample,
    RolloutBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Relative error with a 1e-4 floor on the scale, so gradients that are
/// numerically zero are compared absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Central differences over every entry of the store selected by `store`.
fn fd_check<M>(
    m: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    eval: &dyn Fn(&M) -> f64,
    analytic: &[Tensor],
    label: &str,
) -> usize {
    let mut checked = 0;
    let sizes: Vec<usize> = store(m).tensors().iter().map(Tensor::len).collect();
    for (i, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = store(m).tensors()[i].data()[j];
            store(m).tensors_mut()[i].data_mut()[j] = orig + H;
            let up = eval(m);
            store(m).tensors_mut()[i].data_mut()[j] = orig - H;
            let down = eval(m);
            store(m).tensors_mut()[i].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * H);
            let an = analytic[i].data()[j];
            let name = store(m).names()[i].clone();
            assert!(rel_err(an, num) < TOL, "{label} {name}[{j}]: analytic {an} numeric {num}");
            checked += 1;
        }
    }
    checked
}

fn toy() -> (Agent, Agent, BaselineNet, Vec<GameExample>) {
    let a = Agent::with_scale(AgentConfig { src_vocab: 8, tgt_vocab: 9, emb: 4, hidden: 5 }, 0.4, 11);
    let b = Agent::with_scale(AgentConfig { src_vocab: 9, tgt_vocab: 7, emb: 3, hidden: 4 }, 0.4, 12);
    let base = BaselineNet::new(5, 6, 13);
    let ex = vec![
        GameExample { src: vec![4, 5, 6], pivot: vec![], tgt: vec![4, 6], grounding: vec![1.0, 0.0, 0.5] },
        GameExample { src: vec![7, 4, 5, 5], pivot: vec![], tgt: vec![5, 4, 4], grounding: vec![0.0, 1.0, -0.5] },
    ];
    (a, b, base, ex)
}

/// What a rollout recorded, kept fixed while parameters are perturbed:
/// messages, rewards, decoder states seen by the baseline and advantages.
struct Frozen {
    srcs: Vec<Vec<usize>>,
    msgs: Vec<Vec<usize>>,
    rewards: Vec<f64>,
    states: Vec<Vec<Vec<f64>>>,
    coefs: Vec<Vec<f64>>,
}

impl Frozen {
    fn from(ro: &RolloutBatch, ex: &[GameExample], hidden: usize) -> Self {
        let n = ro.len();
        Self {
            srcs: ex.iter().map(|e| e.src.clone()).collect(),
            msgs: ro.messages.iter().map(|m| m.tokens.clone()).collect(),
            rewards: ro.rewards.clone(),
            states: (0..n)
                .map(|k| {
                    ro.steps
                        .iter()
                        .filter(|s| s.active[k])
                        .map(|s| ro.tape.value(s.state)[k * hidden..(k + 1) * hidden].to_vec())
                        .collect()
                })
                .collect(),
            coefs: (0..n)
                .map(|k| ro.baseline_values(k).iter().map(|b| ro.rewards[k] - b).collect())
                .collect(),
        }
    }
}

/// 𝕃_A recomputed one step at a time from next-token distributions.
fn objective_a(a: &Agent, base: &BaselineNet, f: &Frozen, cfg: &RewardConfig) -> f64 {
    let mut total = 0.0;
    for k in 0..f.srcs.len() {
        for (t, &tok) in f.msgs[k].iter().enumerate() {
            let p = a.next_distribution(&f.srcs[k], &f.msgs[k][..t]).unwrap();
            let ent: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            let b = base.value(&f.states[k][t]).unwrap();
            total += cfg.alpha_entr * ent - cfg.alpha_b * (f.rewards[k] - b).powi(2)
                + cfg.alpha_pg * f.coefs[k][t] * p[tok].ln();
        }
    }
    total
}

fn full_cfg() -> RewardConfig {
    RewardConfig { beta_lm: 0.3, beta_g: 0.2, alpha_pg: 1.0, alpha_entr: 0.3, alpha_b: 0.5 }
}

fn constrained_rollout(a: &Agent, b: &Agent, base: &BaselineNet, ex: &[GameExample], seed: u64) -> RolloutBatch {
    let lm = LanguageModel::with_scale(9, 4, 0.4, 14);
    let rk = Ranker::new(9, 4, 3, 15);
    let refs: Vec<&GameExample> = ex.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cons = Constraints { lm: Some(&lm), ranker: Some(&rk) };
    rollout(a, b, base, cons, &refs, &full_cfg(), 1.0, &mut rng).unwrap()
}

pub fn agent_a_objective_matches_finite_differences() {
    let (a, b, base, ex) = toy();
    let cfg = full_cfg();
    let mut ro = constrained_rollout(&a, &b, &base, &ex, 3);
    let la = agent_a_objective(&mut ro, &cfg, false).unwrap();
    let grads = ro.tape.backward(la).unwrap();
    let ga = grads.for_store(&a.store);
    let gbase = grads.for_store(&base.store);
    let frozen = Frozen::from(&ro, &ex, 5);
    assert!(frozen.msgs.iter().all(|m| m.len() >= 2), "toy messages too short: {:?}", frozen.msgs);
    assert!(ga.iter().any(|g| g.data().iter().any(|&x| x != 0.0)));
    assert!(gbase.iter().any(|g| g.data().iter().any(|&x| x != 0.0)));

    let mut m = (a, base);
    assert!((objective_a(&m.0, &m.1, &frozen, &cfg) - ro.tape.scalar(la)).abs() < 1e-10);
    let eval = |m: &(Agent, BaselineNet)| objective_a(&m.0, &m.1, &frozen, &cfg);
    let n_a = fd_check(&mut m, |m| &mut m.0.store, &eval, &ga, "policy");
    let n_b = fd_check(&mut m, |m| &mut m.1.store, &eval, &gbase, "baseline");
    assert!(n_a > 400 && n_b > 40);
}

pub fn agent_b_objective_matches_finite_differences() {
    let (a, b, base, ex) = toy();
    let mut ro = constrained_rollout(&a, &b, &base, &ex, 5);
    let lb = agent_b_objective(&mut ro);
    let gb = ro.tape.backward(lb).unwrap().for_store(&b.store);
    let inputs: Vec<Vec<usize>> = ro.messages.iter().map(|m| m.as_input()).collect();
    let tgts: Vec<Vec<usize>> = ex.iter().map(|e| e.tgt.clone()).collect();
    let eval = |b: &Agent| -> f64 {
        inputs
            .iter()
            .zip(&tgts)
            .map(|(i, t)| b.sequence_logprob(i, t).unwrap())
            .sum()
    };
    let mut b = b;
    let n = fd_check(&mut b, |b| &mut b.store, &eval, &gb, "listener");
    assert!(n > 200);
}

fn grads_of(ro: &mut RolloutBatch, cols: &[Var], rewards: &[f64], cfg: &RewardConfig, store: &ParamStore) -> Vec<f64> {
    let obj = policy_objective(&mut ro.tape, &ro.steps, cols, rewards, cfg, false).unwrap();
    ro.tape
        .backward(obj)
        .unwrap()
        .for_store(store)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect()
}

pub fn baseline_perturbation_only_moves_the_regression_term() {
    let (a, b, base, ex) = toy();
    let mut shifted = base.clone();
    for t in shifted.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.3);
    }
    // without the policy term, the baseline cannot influence A's gradient
    let cfg = RewardConfig { alpha_pg: 0.0, ..full_cfg() };
    let run = |bn: &BaselineNet| {
        let mut ro = constrained_rollout(&a, &b, bn, &ex, 3);
        let la = agent_a_objective(&mut ro, &cfg, false).unwrap();
        let g = ro.tape.backward(la).unwrap();
        let flat = |v: Vec<Tensor>| v.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
        (flat(g.for_store(&a.store)), flat(g.for_store(&bn.store)))
    };
    let (ga0, gb0) = run(&base);
    let (ga1, gb1) = run(&shifted);
    assert_eq!(ga0, ga1);
    assert_ne!(gb0, gb1);

    // without the regression term, the baseline receives no gradient
    let cfg = RewardConfig { alpha_b: 0.0, ..full_cfg() };
    let mut ro = constrained_rollout(&a, &b, &base, &ex, 3);
    let la = agent_a_objective(&mut ro, &cfg, false).unwrap();
    let g = ro.tape.backward(la).unwrap().for_store(&base.store);
    assert!(g.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
}

pub fn reward_shift_scales_the_log_prob_gradient() {
    let (a, b, base, ex) = toy();
    let cfg = RewardConfig { alpha_entr: 0.0, alpha_b: 0.0, alpha_pg: 1.0, beta_lm: 0.0, beta_g: 0.0 };
    let c = 0.7;
    let delta = -1.9;
    let mut ro = constrained_rollout(&a, &b, &base, &ex, 7);
    let n = ro.len();
    let r = ro.rewards.clone();
    // constant advantage c: the gradient is c times that of Σ log p
    let cols: Vec<Var> = (0..ro.steps.len())
        .map(|_| ro.tape.constant(n, 1, r.iter().map(|x| x - c).collect()))
        .collect();
    let g_c = grads_of(&mut ro, &cols, &r, &cfg, &a.store);
    let mut ro2 = constrained_rollout(&a, &b, &base, &ex, 7);
    let mut total: Option<Var> = None;
    for s in ro2.steps.clone() {
        let m: Vec<f64> = s.active.iter().map(|&x| x as u8 as f64).collect();
        let m = ro2.tape.constant(n, 1, m);
        let lp = ro2.tape.mul(s.logp, m);
        let lp = ro2.tape.sum(lp);
        total = Some(match total {
            Some(t) => ro2.tape.add(t, lp),
            None => lp,
        });
    }
    let g_lp: Vec<f64> = ro2
        .tape
        .backward(total.unwrap())
        .unwrap()
        .for_store(&a.store)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    for (x, y) in g_c.iter().zip(&g_lp) {
        assert!((x - c * y).abs() <= 1e-9 * (1.0 + y.abs()));
    }
    // shifting every reward by delta adds delta times the same gradient
    let mut ro3 = constrained_rollout(&a, &b, &base, &ex, 7);
    let r3: Vec<f64> = r.iter().map(|x| x + delta).collect();
    let cols3: Vec<Var> = (0..ro3.steps.len())
        .map(|_| ro3.tape.constant(n, 1, r.iter().map(|x| x - c).collect()))
        .collect();
    let g_shift = grads_of(&mut ro3, &cols3, &r3, &cfg, &a.store);
    for ((s, x), y) in g_shift.iter().zip(&g_c).zip(&g_lp) {
        assert!((s - x - delta * y).abs() <= 1e-9 * (1.0 + y.abs()));
    }
}

/// A single-step, three-action policy whose logits are one parameter row.
struct Bandit {
    store: ParamStore,
    logits: driftlab::params::ParamId,
}

const REWARDS: [f64; 3] = [1.0, 2.5, 4.0];

impl Bandit {
    fn new() -> Self {
        let mut store = ParamStore::new();
        let logits = store.add("logits", Tensor::new(vec![1, 3], vec![0.2, -0.3, 0.1]).unwrap());
        Self { store, logits }
    }

    fn probs(&self) -> Vec<f64> {
        let l = self.store.get(self.logits).data();
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        l.iter().map(|x| x.exp() / z).collect()
    }

    fn exact_gradient(&self) -> Vec<f64> {
        let p = self.probs();
        let mean: f64 = p.iter().zip(REWARDS).map(|(p, r)| p * r).sum();
        p.iter().zip(REWARDS).map(|(p, r)| p * (r - mean)).collect()
    }

    /// Samples `n` pulls on a fresh tape; returns the tape, the step record
    /// and the rewards.
    fn pull(&self, n: usize, rng: &mut ChaCha8Rng) -> (Tape, StepVars, Vec<f64>) {
        let p = self.probs();
        let acts: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if u < p[0] {
                    0
                } else if u < p[0] + p[1] {
                    1
                } else {
                    2
                }
            })
            .collect();
        let mut tape = Tape::new();
        let row = tape.param(&self.store, self.logits);
        let logits = tape.gather(row, &vec![0; n]);
        let lp = tape.log_softmax(logits);
        let logp = tape.pick(lp, &acts);
        let pr = tape.exp(lp);
        let plp = tape.mul(pr, lp);
        let ent = tape.sum_rows(plp);
        let entropy = tape.scale(ent, -1.0);
        let state = tape.constant(n, 2, [1.0, -0.5].repeat(n));
        let rewards = acts.iter().map(|&a| REWARDS[a]).collect();
        (tape, StepVars { logp, entropy, state, active: vec![true; n] }, rewards)
    }

    /// Policy-gradient estimate averaged over `n` pulls.
    fn estimate(&self, n: usize, base: Option<&BaselineNet>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (mut tape, step, rewards) = self.pull(n, rng);
        let col = match base {
            Some(b) => b.forward(&mut tape, step.state),
            None => tape.constant(n, 1, vec![0.0; n]),
        };
        let cfg = RewardConfig { alpha_entr: 0.0, alpha_b: 0.0, ..RewardConfig::default() };
        let obj = policy_objective(&mut tape, &[step], &[col], &rewards, &cfg, false).unwrap();
        let g = tape.backward(obj).unwrap().for_store(&self.store);
        g[0].data().iter().map(|x| x / n as f64).collect()
    }
}

pub fn policy_gradient_is_unbiased_on_a_bandit() {
    let bandit = Bandit::new();
    let exact = bandit.exact_gradient();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batches: Vec<Vec<f64>> = (0..100).map(|_| bandit.estimate(1000, None, &mut rng)).collect();
    for j in 0..3 {
        let xs: Vec<f64> = batches.iter().map(|b| b[j]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let se = (var / xs.len() as f64).sqrt();
        assert!((mean - exact[j]).abs() < 3.0 * se, "component {j}: {mean} vs {} (se {se})", exact[j]);
    }
}

pub fn trained_baseline_reduces_gradient_variance() {
    let bandit = Bandit::new();
    let mut base = BaselineNet::new(2, 8, 5);
    let mut opt = AdamState::new(&base.store, AdamConfig { lr: 2e-2, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fit = RewardConfig { alpha_pg: 0.0, alpha_entr: 0.0, alpha_b: 1.0, ..RewardConfig::default() };
    for _ in 0..400 {
        let (mut tape, step, rewards) = bandit.pull(64, &mut rng);
        let col = base.forward(&mut tape, step.state);
        let obj = policy_objective(&mut tape, &[step], &[col], &rewards, &fit, false).unwrap();
        let loss = tape.scale(obj, -1.0 / 64.0);
        let g = tape.backward(loss).unwrap().for_store(&base.store);
        opt.step(&mut base.store, &g).unwrap();
    }
    let mean_r: f64 = bandit.probs().iter().zip(REWARDS).map(|(p, r)| p * r).sum();
    assert!((base.value(&[1.0, -0.5]).unwrap() - mean_r).abs() < 0.1);

    let variance = |b: Option<&BaselineNet>, rng: &mut ChaCha8Rng| -> f64 {
        let samples: Vec<Vec<f64>> = (0..4000).map(|_| bandit.estimate(1, b, rng)).collect();
        (0..3)
            .map(|j| {
                let m = samples.iter().map(|s| s[j]).sum::<f64>() / samples.len() as f64;
                samples.iter().map(|s| (s[j] - m).powi(2)).sum::<f64>() / samples.len() as f64
            })
            .sum()
    };
    let v0 = variance(None, &mut ChaCha8Rng::seed_from_u64(30));
    let v1 = variance(Some(&base), &mut ChaCha8Rng::seed_from_u64(30));
    assert!(v1 < v0, "trained {v1} vs zero {v0}");
}
