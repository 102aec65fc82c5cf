//! Flat `key=value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! [`ExperimentConfig::to_text`] writes every key in a fixed order, and the
//! SHA-256 of that text identifies the configuration in run manifests.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::constraints::RewardConfig;
use crate::error::{Error, Result};
use crate::trainer::FinetuneConfig;

/// Training regime or baseline row of the summary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Pg,
    PgG,
    PgLm,
    PgLmG,
    FixedA,
    Ensemble,
    Direct,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Pg,
        Regime::PgG,
        Regime::PgLm,
        Regime::PgLmG,
        Regime::FixedA,
        Regime::Ensemble,
        Regime::Direct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Pg => "PG",
            Regime::PgG => "PG+G",
            Regime::PgLm => "PG+LM",
            Regime::PgLmG => "PG+LM+G",
            Regime::FixedA => "FIXED_A",
            Regime::Ensemble => "ENSEMBLE",
            Regime::Direct => "DIRECT",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Regime::Pg => "pg",
            Regime::PgG => "pg_g",
            Regime::PgLm => "pg_lm",
            Regime::PgLmG => "pg_lm_g",
            Regime::FixedA => "fixed_a",
            Regime::Ensemble => "ensemble",
            Regime::Direct => "direct",
        }
    }

    /// Joint policy-gradient fine-tuning of both agents.
    pub fn is_policy(self) -> bool {
        matches!(self, Regime::Pg | Regime::PgG | Regime::PgLm | Regime::PgLmG)
    }

    pub fn uses_lm(self) -> bool {
        matches!(self, Regime::PgLm | Regime::PgLmG)
    }

    pub fn uses_grounding(self) -> bool {
        matches!(self, Regime::PgG | Regime::PgLmG)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Regime::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(t) || r.slug() == t)
            .ok_or_else(|| Error::Config(format!("unknown regime {t:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hidden: usize,
    pub grounding_dim: usize,
    pub grounding_noise: f64,
    pub grounding_seed: u64,

    pub pretrain_size: usize,
    pub pretrain_dev: usize,
    pub pretrain_seed_a: u64,
    pub pretrain_seed_b: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub dropout: f64,
    pub batch: usize,
    pub init_seed_a: u64,
    pub init_seed_b: u64,

    pub game_size: usize,
    pub game_seed: u64,
    pub split_train: f64,
    pub split_dev: f64,
    pub split_seed: u64,

    pub lm_size: usize,
    pub lm_seed: u64,
    pub lm_epochs: usize,
    pub lm_init_seed: u64,
    pub ranker_size: usize,
    pub ranker_seed: u64,
    pub ranker_epochs: usize,
    pub ranker_holdout: usize,
    pub ranker_init_seed: u64,

    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub reward: RewardConfig,
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_baseline: f64,
    pub warm_start: bool,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub stop_after: usize,
    pub clip: f64,
    pub temperature: f64,
    pub standardize: bool,
    pub baseline_seed_offset: u64,

    pub ensemble_k: usize,
    pub direct_epochs: usize,
    pub compare_a: Regime,
    pub compare_b: Regime,
    pub bootstrap_samples: usize,
    pub bootstrap_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            grounding_dim: 32,
            grounding_noise: 0.05,
            grounding_seed: 1,
            pretrain_size: 4000,
            pretrain_dev: 400,
            pretrain_seed_a: 11,
            pretrain_seed_b: 12,
            pretrain_epochs: 6,
            pretrain_lr: 3e-3,
            dropout: 0.1,
            batch: 32,
            init_seed_a: 1,
            init_seed_b: 2,
            game_size: 3000,
            game_seed: 13,
            split_train: 0.8,
            split_dev: 0.1,
            split_seed: 14,
            lm_size: 4000,
            lm_seed: 15,
            lm_epochs: 4,
            lm_init_seed: 3,
            ranker_size: 3000,
            ranker_seed: 16,
            ranker_epochs: 10,
            ranker_holdout: 300,
            ranker_init_seed: 4,
            regimes: vec![Regime::Pg, Regime::PgG, Regime::PgLm, Regime::PgLmG],
            seeds: vec![0, 1, 2],
            reward: RewardConfig {
                beta_lm: 0.1,
                beta_g: 0.5,
                alpha_pg: 1.0,
                alpha_entr: 0.05,
                alpha_b: 0.1,
            },
            lr_a: 1e-3,
            lr_b: 1e-3,
            lr_baseline: 1e-2,
            warm_start: true,
            max_steps: 1000,
            eval_interval: 50,
            patience: 3,
            stop_after: 10,
            clip: 5.0,
            temperature: 1.0,
            standardize: false,
            baseline_seed_offset: 100,
            ensemble_k: 3,
            direct_epochs: 8,
            compare_a: Regime::PgLm,
            compare_b: Regime::PgLmG,
            bootstrap_samples: 1000,
            bootstrap_seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "hidden" => self.hidden = parse(k, v)?,
            "grounding_dim" => self.grounding_dim = parse(k, v)?,
            "grounding_noise" => self.grounding_noise = parse(k, v)?,
            "grounding_seed" => self.grounding_seed = parse(k, v)?,
            "pretrain_size" => self.pretrain_size = parse(k, v)?,
            "pretrain_dev" => self.pretrain_dev = parse(k, v)?,
            "pretrain_seed_a" => self.pretrain_seed_a = parse(k, v)?,
            "pretrain_seed_b" => self.pretrain_seed_b = parse(k, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(k, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(k, v)?,
            "dropout" => self.dropout = parse(k, v)?,
            "batch" => self.batch = parse(k, v)?,
            "init_seed_a" => self.init_seed_a = parse(k, v)?,
            "init_seed_b" => self.init_seed_b = parse(k, v)?,
            "game_size" => self.game_size = parse(k, v)?,
            "game_seed" => self.game_seed = parse(k, v)?,
            "split_train" => self.split_train = parse(k, v)?,
            "split_dev" => self.split_dev = parse(k, v)?,
            "split_seed" => self.split_seed = parse(k, v)?,
            "lm_size" => self.lm_size = parse(k, v)?,
            "lm_seed" => self.lm_seed = parse(k, v)?,
            "lm_epochs" => self.lm_epochs = parse(k, v)?,
            "lm_init_seed" => self.lm_init_seed = parse(k, v)?,
            "ranker_size" => self.ranker_size = parse(k, v)?,
            "ranker_seed" => self.ranker_seed = parse(k, v)?,
            "ranker_epochs" => self.ranker_epochs = parse(k, v)?,
            "ranker_holdout" => self.ranker_holdout = parse(k, v)?,
            "ranker_init_seed" => self.ranker_init_seed = parse(k, v)?,
            "regimes" => self.regimes = parse_list(k, v)?,
            "seeds" => self.seeds = parse_list(k, v)?,
            "beta_lm" => self.reward.beta_lm = parse(k, v)?,
            "beta_g" => self.reward.beta_g = parse(k, v)?,
            "alpha_pg" => self.reward.alpha_pg = parse(k, v)?,
            "alpha_entr" => self.reward.alpha_entr = parse(k, v)?,
            "alpha_b" => self.reward.alpha_b = parse(k, v)?,
            "lr_a" => self.lr_a = parse(k, v)?,
            "lr_b" => self.lr_b = parse(k, v)?,
            "lr_baseline" => self.lr_baseline = parse(k, v)?,
            "warm_start" => self.warm_start = parse_bool(k, v)?,
            "max_steps" => self.max_steps = parse(k, v)?,
            "eval_interval" => self.eval_interval = parse(k, v)?,
            "patience" => self.patience = parse(k, v)?,
            "stop_after" => self.stop_after = parse(k, v)?,
            "clip" => self.clip = parse(k, v)?,
            "temperature" => self.temperature = parse(k, v)?,
            "standardize" => self.standardize = parse_bool(k, v)?,
            "baseline_seed_offset" => self.baseline_seed_offset = parse(k, v)?,
            "ensemble_k" => self.ensemble_k = parse(k, v)?,
            "direct_epochs" => self.direct_epochs = parse(k, v)?,
            "compare_a" => self.compare_a = v.parse()?,
            "compare_b" => self.compare_b = v.parse()?,
            "bootstrap_samples" => self.bootstrap_samples = parse(k, v)?,
            "bootstrap_seed" => self.bootstrap_seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.grounding_dim == 0 || self.batch < 2 {
            return bad("hidden and grounding_dim must be positive and batch at least 2".into());
        }
        if self.pretrain_dev == 0 || self.pretrain_dev >= self.pretrain_size {
            return bad("pretrain_dev must be in 1..pretrain_size".into());
        }
        if self.ranker_holdout == 0 || self.ranker_holdout >= self.ranker_size {
            return bad("ranker_holdout must be in 1..ranker_size".into());
        }
        let (tr, dv) = (self.split_train, self.split_dev);
        if !(tr > 0.0 && dv > 0.0 && tr + dv <= 1.0) {
            return bad(format!("split fractions {tr}/{dv} must be positive and sum to at most 1"));
        }
        if ((self.game_size as f64) * dv).round() < 1.0 || ((self.game_size as f64) * tr).round() < 2.0 {
            return bad("game corpus too small for its split".into());
        }
        if self.lm_size == 0 || self.pretrain_epochs == 0 || self.direct_epochs == 0 {
            return bad("corpus sizes and epoch counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.pretrain_lr > 0.0) {
            return bad("dropout must be in [0, 1) and pretrain_lr positive".into());
        }
        if self.regimes.is_empty() {
            return bad("regimes must list at least one regime".into());
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if !r.is_policy() {
                return bad(format!("{r} is a baseline row, not a fine-tuning regime; list only PG variants"));
            }
            if self.regimes[..i].contains(r) {
                return bad(format!("regime {r} listed twice"));
            }
        }
        if self.seeds.is_empty() || self.seeds.len() % 2 == 0 {
            return bad("seeds must hold an odd number of entries so a median run exists".into());
        }
        for r in [self.compare_a, self.compare_b] {
            if !self.regimes.contains(&r) {
                return bad(format!("compared regime {r} is not in regimes"));
            }
        }
        if self.compare_a == self.compare_b {
            return bad("compare_a and compare_b must differ".into());
        }
        if self.ensemble_k == 0 {
            return bad("ensemble_k must be at least 1".into());
        }
        if self.bootstrap_samples < 100 {
            return bad("bootstrap_samples must be at least 100".into());
        }
        self.reward.validate()?;
        self.finetune_config(Regime::Pg, 0).validate()
    }

    /// Reward configuration with the constraint weights a regime does not
    /// use set to zero.
    pub fn reward_for(&self, regime: Regime) -> RewardConfig {
        RewardConfig {
            beta_lm: if regime.uses_lm() { self.reward.beta_lm } else { 0.0 },
            beta_g: if regime.uses_grounding() { self.reward.beta_g } else { 0.0 },
            ..self.reward
        }
    }

    pub fn finetune_config(&self, regime: Regime, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            reward: self.reward_for(regime),
            lr_a: self.lr_a,
            lr_b: self.lr_b,
            lr_baseline: self.lr_baseline,
            warm_start: self.warm_start,
            batch: self.batch,
            max_steps: self.max_steps,
            eval_interval: self.eval_interval,
            patience: self.patience,
            stop_after: self.stop_after,
            clip: self.clip,
            temperature: self.temperature,
            standardize: self.standardize,
            seed,
        }
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("hidden", self.hidden.to_string());
        kv("grounding_dim", self.grounding_dim.to_string());
        kv("grounding_noise", self.grounding_noise.to_string());
        kv("grounding_seed", self.grounding_seed.to_string());
        kv("pretrain_size", self.pretrain_size.to_string());
        kv("pretrain_dev", self.pretrain_dev.to_string());
        kv("pretrain_seed_a", self.pretrain_seed_a.to_string());
        kv("pretrain_seed_b", self.pretrain_seed_b.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("dropout", self.dropout.to_string());
        kv("batch", self.batch.to_string());
        kv("init_seed_a", self.init_seed_a.to_string());
        kv("init_seed_b", self.init_seed_b.to_string());
        kv("game_size", self.game_size.to_string());
        kv("game_seed", self.game_seed.to_string());
        kv("split_train", self.split_train.to_string());
        kv("split_dev", self.split_dev.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("lm_size", self.lm_size.to_string());
        kv("lm_seed", self.lm_seed.to_string());
        kv("lm_epochs", self.lm_epochs.to_string());
        kv("lm_init_seed", self.lm_init_seed.to_string());
        kv("ranker_size", self.ranker_size.to_string());
        kv("ranker_seed", self.ranker_seed.to_string());
        kv("ranker_epochs", self.ranker_epochs.to_string());
        kv("ranker_holdout", self.ranker_holdout.to_string());
        kv("ranker_init_seed", self.ranker_init_seed.to_string());
        kv("regimes", join(&self.regimes));
        kv("seeds", join(&self.seeds));
        kv("beta_lm", self.reward.beta_lm.to_string());
        kv("beta_g", self.reward.beta_g.to_string());
        kv("alpha_pg", self.reward.alpha_pg.to_string());
        kv("alpha_entr", self.reward.alpha_entr.to_string());
        kv("alpha_b", self.reward.alpha_b.to_string());
        kv("lr_a", self.lr_a.to_string());
        kv("lr_b", self.lr_b.to_string());
        kv("lr_baseline", self.lr_baseline.to_string());
        kv("warm_start", self.warm_start.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("patience", self.patience.to_string());
        kv("stop_after", self.stop_after.to_string());
        kv("clip", self.clip.to_string());
        kv("temperature", self.temperature.to_string());
        kv("standardize", self.standardize.to_string());
        kv("baseline_seed_offset", self.baseline_seed_offset.to_string());
        kv("ensemble_k", self.ensemble_k.to_string());
        kv("direct_epochs", self.direct_epochs.to_string());
        kv("compare_a", self.compare_a.to_string());
        kv("compare_b", self.compare_b.to_string());
        kv("bootstrap_samples", self.bootstrap_samples.to_string());
        kv("bootstrap_seed", self.bootstrap_seed.to_string());
        s
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
