//! Experiment harness: corpus generation, pretraining, constraint models,
//! fine-tuning regimes, evaluation and comparison.
//!
//! Every step writes fixed-name artifacts under one run directory and, when
//! it actually runs, appends an entry to `manifest.txt` listing the SHA-256
//! of each input and output. A step whose outputs all exist is skipped, so
//! an interrupted pipeline resumes where it stopped. [`replay`] reruns
//! manifest entries in a scratch directory and compares output hashes.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::agents::{Agent, AgentConfig};
use crate::checkpoint;
use crate::config::{hex, ExperimentConfig, Regime};
use crate::constraints::{LanguageModel, Ranker, Schedule};
use crate::corpus::{
    generate_corpus, read_corpus, split, write_corpus, Domain, GroundingSpace, Languages, Splits, Triple, Vocabs, EOS,
};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, decode_chain, drift_report_from, ChainOutput, DriftReport, ReportInputs};
use crate::optim::AdamConfig;
use crate::stats::{bootstrap_test, median_run_selector, wilcoxon_signed_rank, PairedScores};
use crate::trainer::{finetune, finetune_b_only, pretrain, BaselineNet, Constraints, PretrainConfig, TrainLog};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "drift_report.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";

const PRE_A: &str = "data/pretrain_a.tsv";
const PRE_B: &str = "data/pretrain_b.tsv";
const GAME: &str = "data/game.tsv";
const LM_TEXT: &str = "data/lm_text.tsv";
const RANKER_DATA: &str = "data/ranker.tsv";
const AGENT_A: &str = "models/agent_a.ckpt";
const AGENT_B: &str = "models/agent_b.ckpt";
const PRETRAIN_LOG: &str = "models/pretrain.tsv";
const LM: &str = "models/lm.ckpt";
const LM_LOG: &str = "models/lm.txt";
const RANKER: &str = "models/ranker.ckpt";
const RANKER_LOG: &str = "models/ranker.txt";
const DIRECT: &str = "models/direct.ckpt";
const DIRECT_LOG: &str = "models/direct.tsv";

/// What an evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Pretrained,
    Ensemble,
    Direct,
    Run(Regime, u64),
}

/// One resumable unit of work; its `Display` form is the CLI argument list
/// that reruns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Generate,
    Pretrain,
    TrainLm,
    TrainRanker,
    Finetune(Regime, u64),
    DirectUpperBound,
    Evaluate(EvalTarget),
    Compare,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Generate => write!(f, "generate"),
            Step::Pretrain => write!(f, "pretrain"),
            Step::TrainLm => write!(f, "train-lm"),
            Step::TrainRanker => write!(f, "train-ranker"),
            Step::Finetune(r, s) => write!(f, "finetune --regime {r} --seed {s}"),
            Step::DirectUpperBound => write!(f, "direct-upper-bound"),
            Step::Evaluate(EvalTarget::Pretrained) => write!(f, "evaluate --pretrained"),
            Step::Evaluate(EvalTarget::Ensemble) => write!(f, "evaluate --regime ENSEMBLE"),
            Step::Evaluate(EvalTarget::Direct) => write!(f, "evaluate --regime DIRECT"),
            Step::Evaluate(EvalTarget::Run(r, s)) => write!(f, "evaluate --regime {r} --seed {s}"),
            Step::Compare => write!(f, "compare"),
        }
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let w: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Format(format!("unrecognized step {s:?}"));
        let flag = |name: &str| w.iter().position(|x| *x == name).and_then(|i| w.get(i + 1)).copied();
        let regime = || flag("--regime").ok_or_else(bad)?.parse::<Regime>();
        let seed = || flag("--seed").ok_or_else(bad)?.parse::<u64>().map_err(|_| bad());
        Ok(match *w.first().ok_or_else(bad)? {
            "generate" => Step::Generate,
            "pretrain" => Step::Pretrain,
            "train-lm" => Step::TrainLm,
            "train-ranker" => Step::TrainRanker,
            "direct-upper-bound" => Step::DirectUpperBound,
            "compare" => Step::Compare,
            "finetune" => Step::Finetune(regime()?, seed()?),
            "evaluate" if w.contains(&"--pretrained") => Step::Evaluate(EvalTarget::Pretrained),
            "evaluate" => match regime()? {
                Regime::Ensemble => Step::Evaluate(EvalTarget::Ensemble),
                Regime::Direct => Step::Evaluate(EvalTarget::Direct),
                r => Step::Evaluate(EvalTarget::Run(r, seed()?)),
            },
            _ => return Err(bad()),
        })
    }
}

/// A manifest entry: one executed step.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub step: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// (relative path, SHA-256)
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub elapsed_ms: u128,
}

/// The parsed `manifest.txt` of a run directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut cur: Option<ManifestEntry> = None;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("manifest line {}: {line:?}", i + 1));
            match (f[0], cur.as_mut()) {
                ("entry", None) => {
                    cur = Some(ManifestEntry {
                        step: String::new(),
                        config_hash: String::new(),
                        seeds: Vec::new(),
                        inputs: Vec::new(),
                        outputs: Vec::new(),
                        elapsed_ms: 0,
                    })
                }
                ("step", Some(e)) if f.len() == 2 => e.step = f[1].to_string(),
                ("config", Some(e)) if f.len() == 2 => e.config_hash = f[1].to_string(),
                ("seeds", Some(e)) if f.len() == 2 => {
                    e.seeds = f[1]
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                ("input", Some(e)) if f.len() == 3 => e.inputs.push((f[1].into(), f[2].into())),
                ("output", Some(e)) if f.len() == 3 => e.outputs.push((f[1].into(), f[2].into())),
                ("elapsed_ms", Some(e)) if f.len() == 2 => e.elapsed_ms = f[1].parse().map_err(|_| bad())?,
                ("end", Some(_)) => entries.push(cur.take().unwrap()),
                _ => return Err(bad()),
            }
        }
        if cur.is_some() {
            return Err(Error::Format("manifest ends inside an entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        Self::parse(&fs::read_to_string(p)?)
    }
}

fn render_entry(e: &ManifestEntry) -> String {
    let mut s = format!("entry\nstep\t{}\nconfig\t{}\n", e.step, e.config_hash);
    let seeds: Vec<String> = e.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds\t{}", seeds.join(","));
    for (p, h) in &e.inputs {
        let _ = writeln!(s, "input\t{p}\t{h}");
    }
    for (p, h) in &e.outputs {
        let _ = writeln!(s, "output\t{p}\t{h}");
    }
    let _ = writeln!(s, "elapsed_ms\t{}\nend", e.elapsed_ms);
    s
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Whether a step ran or found its outputs already present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// One row of `summary.tsv`; NaN marks a column the row does not have.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub runs: usize,
    pub task_bleu: (f64, f64),
    pub pivot_bleu: (f64, f64),
    pub lm_nll: (f64, f64),
    pub unique_ratio: (f64, f64),
}

const SUMMARY_HEADER: &str = "regime\truns\ttask_bleu\ttask_bleu_std\tpivot_bleu\tpivot_bleu_std\tlm_nll\tlm_nll_std\tunique_ratio\tunique_ratio_std";

fn cell(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{x:.6}")
    }
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = write!(s, "{}\t{}", r.name, r.runs);
        for (m, sd) in [r.task_bleu, r.pivot_bleu, r.lm_nll, r.unique_ratio] {
            let _ = write!(s, "\t{}\t{}", cell(m), cell(sd));
        }
        s.push('\n');
    }
    s
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Format("summary header mismatch".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Format(format!("summary row {l:?}"));
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |i: usize| -> Result<f64> {
                if f[i] == "-" {
                    Ok(f64::NAN)
                } else {
                    f[i].parse().map_err(|_| bad())
                }
            };
            Ok(SummaryRow {
                name: f[0].to_string(),
                runs: f[1].parse().map_err(|_| bad())?,
                task_bleu: (num(2)?, num(3)?),
                pivot_bleu: (num(4)?, num(5)?),
                lm_nll: (num(6)?, num(7)?),
                unique_ratio: (num(8)?, num(9)?),
            })
        })
        .collect()
}

/// Mean and sample standard deviation; zero deviation for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn kv_text(pairs: &[(&str, f64)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

/// Reads `key<TAB>number` lines.
pub fn read_kv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| {
            let (k, v) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}: {l:?}", path.display())))?;
            let v = v
                .parse()
                .map_err(|_| Error::Format(format!("{}: {l:?}", path.display())))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

fn score_csv(scores: &[f64]) -> String {
    let mut s = String::from("id,score\n");
    for (i, x) in scores.iter().enumerate() {
        let _ = writeln!(s, "dev{i:04},{x}");
    }
    s
}

/// Experiment state bound to one run directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    /// Rerun steps even when their outputs exist.
    pub force: bool,
    langs: Languages,
    space: GroundingSpace,
    vocabs: Vocabs,
}

impl Pipeline {
    /// Binds `cfg` to `dir`, writing `config.txt` on first use. A directory
    /// that already holds a different configuration is rejected.
    pub fn open(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir)?;
        let cp = dir.join(CONFIG_FILE);
        if cp.exists() {
            let old = ExperimentConfig::parse(&fs::read_to_string(&cp)?)?;
            if old.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} was created with config {}; this config is {}. Use a fresh directory",
                    dir.display(),
                    &old.hash()[..12],
                    &cfg.hash()[..12]
                )));
            }
        } else {
            fs::write(&cp, cfg.to_text())?;
        }
        Ok(Self::bind(cfg, dir))
    }

    /// Opens a directory using its stored `config.txt`.
    pub fn resume(dir: &Path) -> Result<Self> {
        let cp = dir.join(CONFIG_FILE);
        if !cp.exists() {
            return Err(Error::MissingArtifact {
                path: cp.display().to_string(),
                producer: "generate".into(),
            });
        }
        let cfg = ExperimentConfig::parse(&fs::read_to_string(cp)?)?;
        Ok(Self::bind(cfg, dir))
    }

    fn bind(cfg: ExperimentConfig, dir: &Path) -> Self {
        let langs = Languages::default();
        let space = GroundingSpace::new(&langs.inventory, cfg.grounding_dim, cfg.grounding_noise, cfg.grounding_seed);
        let vocabs = Vocabs::new(&langs);
        Self {
            cfg,
            dir: dir.to_path_buf(),
            force: false,
            langs,
            space,
            vocabs,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn languages(&self) -> &Languages {
        &self.langs
    }

    pub fn vocabs(&self) -> &Vocabs {
        &self.vocabs
    }

    pub fn run_dir(regime: Regime, seed: u64) -> String {
        format!("runs/{}/seed{seed}", regime.slug())
    }

    pub fn eval_dir(target: EvalTarget) -> String {
        match target {
            EvalTarget::Pretrained => "evals/pretrained".into(),
            EvalTarget::Ensemble => "evals/ensemble".into(),
            EvalTarget::Direct => "evals/direct".into(),
            EvalTarget::Run(r, s) => Self::run_dir(r, s),
        }
    }

    /// Fine-tuning runs of the configuration, the frozen-A baseline included.
    pub fn runs(&self) -> Vec<(Regime, u64)> {
        let mut v = Vec::new();
        for &r in self.cfg.regimes.iter().chain(std::iter::once(&Regime::FixedA)) {
            for &s in &self.cfg.seeds {
                v.push((r, s));
            }
        }
        v
    }

    pub fn eval_targets(&self) -> Vec<EvalTarget> {
        let mut v = vec![EvalTarget::Pretrained, EvalTarget::Ensemble, EvalTarget::Direct];
        v.extend(self.runs().into_iter().map(|(r, s)| EvalTarget::Run(r, s)));
        v
    }

    /// Every step of the full experiment in dependency order.
    pub fn all_steps(&self) -> Vec<Step> {
        let mut v = vec![Step::Generate, Step::Pretrain, Step::TrainLm, Step::TrainRanker];
        v.extend(self.runs().into_iter().map(|(r, s)| Step::Finetune(r, s)));
        v.push(Step::DirectUpperBound);
        v.extend(self.eval_targets().into_iter().map(Step::Evaluate));
        v.push(Step::Compare);
        v
    }

    /// (input path, producing subcommand) pairs a step reads.
    pub fn inputs(&self, step: Step) -> Vec<(String, &'static str)> {
        let gen = |p: &str| (p.to_string(), "generate");
        let pre = [(AGENT_A.to_string(), "pretrain"), (AGENT_B.to_string(), "pretrain")];
        let lm = (LM.to_string(), "train-lm");
        match step {
            Step::Generate => vec![],
            Step::Pretrain => vec![gen(PRE_A), gen(PRE_B)],
            Step::TrainLm => vec![gen(LM_TEXT), gen(PRE_A)],
            Step::TrainRanker => vec![gen(RANKER_DATA)],
            Step::DirectUpperBound => vec![gen(GAME)],
            Step::Finetune(r, _) => {
                let mut v = vec![gen(GAME)];
                v.extend(pre);
                v.push(lm);
                if r.uses_grounding() {
                    v.push((RANKER.into(), "train-ranker"));
                }
                v
            }
            Step::Evaluate(t) => {
                let mut v = vec![gen(GAME), lm];
                match t {
                    EvalTarget::Pretrained | EvalTarget::Ensemble => v.extend(pre),
                    EvalTarget::Direct => v.push((DIRECT.into(), "direct-upper-bound")),
                    EvalTarget::Run(r, s) => {
                        let d = Self::run_dir(r, s);
                        if r == Regime::FixedA {
                            v.push(pre[0].clone());
                        } else {
                            v.push((format!("{d}/agent_a.ckpt"), "finetune"));
                        }
                        v.push((format!("{d}/agent_b.ckpt"), "finetune"));
                    }
                }
                v
            }
            Step::Compare => self
                .eval_targets()
                .into_iter()
                .flat_map(|t| {
                    let d = Self::eval_dir(t);
                    let mut v = vec![(format!("{d}/scores.tsv"), "evaluate"), (format!("{d}/report.txt"), "evaluate")];
                    if matches!(t, EvalTarget::Run(..) | EvalTarget::Pretrained) {
                        v.push((format!("{d}/pivot_scores.csv"), "evaluate"));
                        v.push((format!("{d}/pivot_hyps.txt"), "evaluate"));
                    }
                    if let EvalTarget::Run(..) = t {
                        v.push((format!("{d}/log.tsv"), "finetune"));
                        v.push((format!("{d}/run.tsv"), "finetune"));
                    }
                    v
                })
                .collect(),
        }
    }

    /// Paths a step writes.
    pub fn outputs(&self, step: Step) -> Vec<String> {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        match step {
            Step::Generate => s(&[PRE_A, PRE_B, GAME, LM_TEXT, RANKER_DATA]),
            Step::Pretrain => s(&[AGENT_A, AGENT_B, PRETRAIN_LOG]),
            Step::TrainLm => s(&[LM, LM_LOG]),
            Step::TrainRanker => s(&[RANKER, RANKER_LOG]),
            Step::DirectUpperBound => s(&[DIRECT, DIRECT_LOG]),
            Step::Finetune(r, seed) => {
                let d = Self::run_dir(r, seed);
                let mut v = vec![format!("{d}/agent_b.ckpt"), format!("{d}/log.tsv"), format!("{d}/run.tsv")];
                if r != Regime::FixedA {
                    v.push(format!("{d}/agent_a.ckpt"));
                    v.push(format!("{d}/baseline.ckpt"));
                }
                v
            }
            Step::Evaluate(t) => {
                let d = Self::eval_dir(t);
                let mut v = vec![format!("{d}/scores.tsv"), format!("{d}/report.txt")];
                if matches!(t, EvalTarget::Run(..) | EvalTarget::Pretrained) {
                    v.push(format!("{d}/pivot_scores.csv"));
                    v.push(format!("{d}/pivot_hyps.txt"));
                }
                v
            }
            Step::Compare => s(&[SUMMARY_FILE, CURVES_FILE, REPORT_FILE, COMPARISON_FILE]),
        }
    }

    fn check_step(&self, step: Step) -> Result<()> {
        match step {
            Step::Finetune(r, _) if !(r.is_policy() || r == Regime::FixedA) => {
                Err(Error::Config(format!("{r} is not a fine-tuning regime")))
            }
            Step::Evaluate(EvalTarget::Run(r, _)) if !(r.is_policy() || r == Regime::FixedA) => {
                Err(Error::Config(format!("{r} has no per-seed runs")))
            }
            _ => Ok(()),
        }
    }

    /// Runs `step` unless its outputs already exist, then records it.
    pub fn run(&self, step: Step) -> Result<Outcome> {
        self.check_step(step)?;
        let outputs = self.outputs(step);
        if !self.force && outputs.iter().all(|o| self.path(o).exists()) {
            return Ok(Outcome::Skipped);
        }
        let inputs = self.inputs(step);
        for (p, producer) in &inputs {
            if !self.path(p).exists() {
                return Err(Error::MissingArtifact {
                    path: self.path(p).display().to_string(),
                    producer: producer.to_string(),
                });
            }
        }
        let t0 = Instant::now();
        self.execute(step)?;
        let hashes = |ps: Vec<String>| -> Result<Vec<(String, String)>> {
            ps.into_iter()
                .map(|p| {
                    let h = file_hash(&self.path(&p))?;
                    Ok((p, h))
                })
                .collect()
        };
        let seeds = match step {
            Step::Finetune(_, s) | Step::Evaluate(EvalTarget::Run(_, s)) => vec![s],
            Step::Compare => self.cfg.seeds.clone(),
            _ => vec![],
        };
        let entry = ManifestEntry {
            step: step.to_string(),
            config_hash: self.cfg.hash(),
            seeds,
            inputs: hashes(inputs.into_iter().map(|p| p.0).collect())?,
            outputs: hashes(outputs)?,
            elapsed_ms: t0.elapsed().as_millis(),
        };
        let mut text = if self.path(MANIFEST_FILE).exists() {
            fs::read_to_string(self.path(MANIFEST_FILE))?
        } else {
            String::new()
        };
        text.push_str(&render_entry(&entry));
        put(&self.path(MANIFEST_FILE), text.as_bytes())?;
        Ok(Outcome::Ran)
    }

    /// Runs every step of the experiment.
    pub fn run_all(&self) -> Result<()> {
        for step in self.all_steps() {
            self.run(step)?;
        }
        Ok(())
    }

    fn execute(&self, step: Step) -> Result<()> {
        match step {
            Step::Generate => self.generate(),
            Step::Pretrain => self.pretrain(),
            Step::TrainLm => self.train_lm(),
            Step::TrainRanker => self.train_ranker(),
            Step::DirectUpperBound => self.direct_upper_bound(),
            Step::Finetune(r, s) => self.finetune(r, s),
            Step::Evaluate(t) => self.evaluate(t),
            Step::Compare => self.compare(),
        }
    }

    // -- data and models -----------------------------------------------------

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        put(&self.path(rel), bytes)
    }

    fn corpus(&self, rel: &str) -> Result<Vec<Triple>> {
        let f = fs::File::open(self.path(rel))?;
        read_corpus(BufReader::new(f), &self.langs.inventory)
    }

    /// Train/dev/test split of the game corpus.
    pub fn game_splits(&self) -> Result<Splits<Triple>> {
        let c = &self.cfg;
        let test = (1.0 - c.split_train - c.split_dev).max(0.0);
        split(&self.corpus(GAME)?, (c.split_train, c.split_dev, test), c.split_seed)
    }

    fn agent_configs(&self) -> (AgentConfig, AgentConfig) {
        let v = &self.vocabs;
        let h = self.cfg.hidden;
        (
            AgentConfig::new(v.source.len(), v.pivot.len(), h),
            AgentConfig::new(v.pivot.len(), v.target.len(), h),
        )
    }

    fn load_agent(&self, config: AgentConfig, rel: &str) -> Result<Agent> {
        let mut a = Agent::new(config, 0);
        checkpoint::load_into(&mut a.store, &self.path(rel))?;
        Ok(a)
    }

    pub fn load_pretrained(&self) -> Result<(Agent, Agent)> {
        let (ca, cb) = self.agent_configs();
        Ok((self.load_agent(ca, AGENT_A)?, self.load_agent(cb, AGENT_B)?))
    }

    /// Agents of a fine-tuning run; the frozen-A regime reuses pretrained A.
    pub fn load_run(&self, regime: Regime, seed: u64) -> Result<(Agent, Agent)> {
        let (ca, cb) = self.agent_configs();
        let d = Self::run_dir(regime, seed);
        let a = if regime == Regime::FixedA {
            self.load_agent(ca, AGENT_A)?
        } else {
            self.load_agent(ca, &format!("{d}/agent_a.ckpt"))?
        };
        Ok((a, self.load_agent(cb, &format!("{d}/agent_b.ckpt"))?))
    }

    pub fn load_lm(&self) -> Result<LanguageModel> {
        let mut lm = LanguageModel::new(self.vocabs.pivot.len(), self.cfg.hidden, 0);
        checkpoint::load_into(&mut lm.store, &self.path(LM))?;
        Ok(lm)
    }

    pub fn load_ranker(&self) -> Result<Ranker> {
        let mut r = Ranker::new(self.vocabs.pivot.len(), self.cfg.hidden, self.cfg.grounding_dim, 0);
        checkpoint::load_into(&mut r.store, &self.path(RANKER))?;
        Ok(r)
    }

    fn save_store(&self, rel: &str, store: &crate::params::ParamStore) -> Result<()> {
        self.write(rel, &checkpoint::encode(store))
    }

    // -- steps -----------------------------------------------------------------

    fn generate(&self) -> Result<()> {
        let c = &self.cfg;
        let l = &self.langs;
        let pre = Domain::pretraining();
        let fine = Domain::finetuning();
        let sets = [
            (PRE_A, &pre, c.pretrain_size, c.pretrain_seed_a),
            (PRE_B, &pre, c.pretrain_size, c.pretrain_seed_b),
            (GAME, &fine, c.game_size, c.game_seed),
            (LM_TEXT, &Domain::lm_text(), c.lm_size, c.lm_seed),
            (RANKER_DATA, &fine, c.ranker_size, c.ranker_seed),
        ];
        for (rel, domain, n, seed) in sets {
            let triples = generate_corpus(l, domain, &self.space, n, seed)?;
            let mut buf = Vec::new();
            write_corpus(&mut buf, &triples, &l.inventory)?;
            self.write(rel, &buf)?;
        }
        Ok(())
    }

    fn pretrain_config(&self, epochs: usize, cap_to_source: bool) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch: self.cfg.batch,
            adam: AdamConfig {
                lr: self.cfg.pretrain_lr,
                ..AdamConfig::default()
            },
            dropout: self.cfg.dropout,
            cap_to_source,
            seed: 1,
            ..PretrainConfig::default()
        }
    }

    fn pretrain(&self) -> Result<()> {
        let v = &self.vocabs;
        let n_train = self.cfg.pretrain_size - self.cfg.pretrain_dev;
        let pairs = |d: &[Triple], a_side: bool| -> Vec<(Vec<usize>, Vec<usize>)> {
            d.iter()
                .map(|t| {
                    if a_side {
                        (v.source.encode(&t.src), v.pivot.encode(&t.pivot))
                    } else {
                        (v.pivot.encode(&t.pivot), v.target.encode(&t.tgt))
                    }
                })
                .collect()
        };
        let (ca, cb) = self.agent_configs();
        let mut log = String::from("agent\tepoch\tnll\tdev_bleu\n");
        let mut a = Agent::new(ca, self.cfg.init_seed_a);
        let pa = self.corpus(PRE_A)?;
        let ra = pretrain(
            &mut a,
            &pairs(&pa[..n_train], true),
            &pairs(&pa[n_train..], true),
            &self.pretrain_config(self.cfg.pretrain_epochs, true),
        )?;
        let mut b = Agent::new(cb, self.cfg.init_seed_b);
        let pb = self.corpus(PRE_B)?;
        let rb = pretrain(
            &mut b,
            &pairs(&pb[..n_train], false),
            &pairs(&pb[n_train..], false),
            &self.pretrain_config(self.cfg.pretrain_epochs, false),
        )?;
        for (name, r) in [("A", &ra), ("B", &rb)] {
            let _ = writeln!(log, "{name}\t0\t-\t{}", r.initial_bleu);
            for (e, nll, bleu) in &r.history {
                let _ = writeln!(log, "{name}\t{e}\t{nll}\t{bleu}");
            }
        }
        self.save_store(AGENT_A, &a.store)?;
        self.save_store(AGENT_B, &b.store)?;
        self.write(PRETRAIN_LOG, log.as_bytes())
    }

    fn train_lm(&self) -> Result<()> {
        let v = &self.vocabs;
        let mut seqs: Vec<Vec<usize>> = self.corpus(LM_TEXT)?.iter().map(|t| v.pivot.encode(&t.pivot)).collect();
        seqs.extend(self.corpus(PRE_A)?.iter().map(|t| v.pivot.encode(&t.pivot)));
        let mut lm = LanguageModel::new(v.pivot.len(), self.cfg.hidden, self.cfg.lm_init_seed);
        let sched = Schedule {
            epochs: self.cfg.lm_epochs,
            batch: self.cfg.batch,
            ..Schedule::default()
        };
        let nll = lm.train(&seqs, &sched)?;
        self.save_store(LM, &lm.store)?;
        self.write(LM_LOG, kv_text(&[("sentences", seqs.len() as f64), ("final_nll", nll)]).as_bytes())
    }

    fn train_ranker(&self) -> Result<()> {
        let v = &self.vocabs;
        let data = self.corpus(RANKER_DATA)?;
        let seqs: Vec<Vec<usize>> = data.iter().map(|t| v.pivot.encode(&t.pivot)).collect();
        let vecs: Vec<Vec<f64>> = data.iter().map(|t| t.grounding.clone()).collect();
        let n = data.len() - self.cfg.ranker_holdout;
        let mut rk = Ranker::new(v.pivot.len(), self.cfg.hidden, self.cfg.grounding_dim, self.cfg.ranker_init_seed);
        let sched = Schedule {
            epochs: self.cfg.ranker_epochs,
            batch: self.cfg.batch,
            ..Schedule::default()
        };
        let loss = rk.train(&seqs[..n], &vecs[..n], &sched)?;
        let (r1, r5) = rk.recall(&seqs[n..], &vecs[n..], 32, 5)?;
        self.save_store(RANKER, &rk.store)?;
        self.write(
            RANKER_LOG,
            kv_text(&[("final_loss", loss), ("recall_at_1", r1), ("recall_at_5", r5)]).as_bytes(),
        )
    }

    fn direct_upper_bound(&self) -> Result<()> {
        let v = &self.vocabs;
        let sp = self.game_splits()?;
        let pairs = |d: &[Triple]| -> Vec<(Vec<usize>, Vec<usize>)> {
            d.iter().map(|t| (v.source.encode(&t.src), v.target.encode(&t.tgt))).collect()
        };
        let mut m = Agent::new(AgentConfig::new(v.source.len(), v.target.len(), self.cfg.hidden), self.cfg.init_seed_a);
        let r = pretrain(
            &mut m,
            &pairs(&sp.train),
            &pairs(&sp.dev),
            &self.pretrain_config(self.cfg.direct_epochs, false),
        )?;
        let mut log = format!("epoch\tnll\tdev_bleu\n0\t-\t{}\n", r.initial_bleu);
        for (e, nll, bleu) in &r.history {
            let _ = writeln!(log, "{e}\t{nll}\t{bleu}");
        }
        self.save_store(DIRECT, &m.store)?;
        self.write(DIRECT_LOG, log.as_bytes())
    }

    fn finetune(&self, regime: Regime, seed: u64) -> Result<()> {
        let sp = self.game_splits()?;
        let (mut a, mut b) = self.load_pretrained()?;
        let lm = self.load_lm()?;
        let cfg = self.cfg.finetune_config(regime, seed);
        let d = Self::run_dir(regime, seed);
        let log: TrainLog = if regime == Regime::FixedA {
            finetune_b_only(&a, &mut b, &sp.train, &sp.dev, &self.vocabs, Some(&lm), &cfg)?
        } else {
            let ranker = if regime.uses_grounding() { Some(self.load_ranker()?) } else { None };
            let cons = Constraints {
                lm: regime.uses_lm().then_some(&lm),
                ranker: ranker.as_ref(),
            };
            let mut base = BaselineNet::new(self.cfg.hidden, self.cfg.hidden, self.cfg.baseline_seed_offset + seed);
            let log = finetune(&mut a, &mut b, &mut base, cons, &sp.train, &sp.dev, &self.vocabs, Some(&lm), &cfg)?;
            self.save_store(&format!("{d}/agent_a.ckpt"), &a.store)?;
            self.save_store(&format!("{d}/baseline.ckpt"), &base.store)?;
            log
        };
        self.save_store(&format!("{d}/agent_b.ckpt"), &b.store)?;
        self.write(&format!("{d}/log.tsv"), log.to_tsv().as_bytes())?;
        let run = kv_text(&[
            ("messages", log.messages as f64),
            ("cap_violations", log.cap_violations as f64),
            ("best_step", log.best_step as f64),
        ]);
        self.write(&format!("{d}/run.tsv"), run.as_bytes())
    }

    fn evaluate(&self, target: EvalTarget) -> Result<()> {
        let dev = self.game_splits()?.dev;
        let lm = self.load_lm()?;
        let v = &self.vocabs;
        let d = Self::eval_dir(target);
        let inp = ReportInputs {
            lm: &lm,
            data: &dev,
            vocabs: v,
            lexicon: &self.langs.pivot,
        };
        if target == EvalTarget::Direct {
            let m = self.load_agent(AgentConfig::new(v.source.len(), v.target.len(), self.cfg.hidden), DIRECT)?;
            let srcs: Vec<Vec<usize>> = dev.iter().map(|t| v.source.encode(&t.src)).collect();
            let caps: Vec<usize> = dev.iter().map(|t| 2 * t.tgt.len() + 2).collect();
            let hyps: Vec<Vec<String>> = m
                .greedy_many(&srcs, &caps, 100)?
                .iter()
                .map(|h| v.target.decode(h.content()))
                .collect();
            let refs: Vec<Vec<String>> = dev.iter().map(|t| t.tgt.clone()).collect();
            let bleu = corpus_bleu(&hyps, &refs, 4)?;
            self.write(&format!("{d}/scores.tsv"), kv_text(&[("task_bleu", bleu)]).as_bytes())?;
            return self.write(&format!("{d}/report.txt"), format!("task_bleu\t{bleu:.4}\n").as_bytes());
        }
        let (a, b) = match target {
            EvalTarget::Run(r, s) => self.load_run(r, s)?,
            _ => self.load_pretrained()?,
        };
        let chain = if target == EvalTarget::Ensemble {
            self.ensemble_chain(&a, &b, &dev)?
        } else {
            decode_chain(&a, &b, &dev, v)?
        };
        let rep = drift_report_from(&chain, &inp)?;
        let long = chain
            .pivot
            .iter()
            .zip(&dev)
            .filter(|(p, t)| p.len() > t.src.len())
            .count();
        self.write(&format!("{d}/scores.tsv"), scores_text(&rep, long).as_bytes())?;
        self.write(&format!("{d}/report.txt"), rep.to_text().as_bytes())?;
        if target != EvalTarget::Ensemble {
            self.write(&format!("{d}/pivot_scores.csv"), score_csv(&rep.pivot_sentence_bleu).as_bytes())?;
            let hyps: String = rep.pivot_hyps.iter().map(|h| h.join(" ") + "\n").collect();
            self.write(&format!("{d}/pivot_hyps.txt"), hyps.as_bytes())?;
        }
        Ok(())
    }

    /// Beam hypotheses from A, ensembled by B; the pivot column uses the
    /// top hypothesis.
    fn ensemble_chain(&self, a: &Agent, b: &Agent, dev: &[Triple]) -> Result<ChainOutput> {
        let v = &self.vocabs;
        let mut out = ChainOutput {
            pivot: Vec::with_capacity(dev.len()),
            target: Vec::with_capacity(dev.len()),
        };
        let strip = |t: &[usize]| -> Vec<usize> { t.iter().copied().filter(|&x| x != EOS).collect() };
        for t in dev {
            let src = v.source.encode(&t.src);
            let beam = a.beam_search(&src, self.cfg.ensemble_k, src.len())?;
            let contents: Vec<Vec<usize>> = beam.hypotheses.iter().map(|h| strip(&h.tokens)).collect();
            let inputs: Vec<Vec<usize>> = contents
                .iter()
                .map(|c| if c.is_empty() { vec![EOS] } else { c.clone() })
                .collect();
            out.target.push(strip(&b.ensemble_decode(&inputs, 2 * t.tgt.len() + 2)?));
            out.pivot.push(contents[0].clone());
        }
        Ok(out)
    }

    fn scores(&self, target: EvalTarget) -> Result<BTreeMap<String, f64>> {
        read_kv(&self.path(&format!("{}/scores.tsv", Self::eval_dir(target))))
    }

    fn compare(&self) -> Result<()> {
        let row = |name: &str, targets: &[EvalTarget]| -> Result<SummaryRow> {
            let maps: Vec<BTreeMap<String, f64>> = targets.iter().map(|&t| self.scores(t)).collect::<Result<_>>()?;
            let col = |k: &str| -> (f64, f64) {
                let xs: Vec<f64> = maps.iter().filter_map(|m| m.get(k).copied()).collect();
                mean_std(&xs)
            };
            Ok(SummaryRow {
                name: name.to_string(),
                runs: targets.len(),
                task_bleu: col("task_bleu"),
                pivot_bleu: col("pivot_bleu"),
                lm_nll: col("pivot_lm_nll"),
                unique_ratio: col("unique_ratio"),
            })
        };
        let seeds = &self.cfg.seeds;
        let runs = |r: Regime| -> Vec<EvalTarget> { seeds.iter().map(|&s| EvalTarget::Run(r, s)).collect() };
        let mut rows = vec![
            row("pretrained", &[EvalTarget::Pretrained])?,
            row(Regime::Ensemble.name(), &[EvalTarget::Ensemble])?,
            row(Regime::FixedA.name(), &runs(Regime::FixedA))?,
        ];
        for &r in &self.cfg.regimes {
            rows.push(row(r.name(), &runs(r))?);
        }
        rows.push(row(Regime::Direct.name(), &[EvalTarget::Direct])?);

        let mut curves = String::from("regime,seed,step,epoch,task_bleu,pivot_bleu,lm_nll,mean_reward,mean_entropy,lr\n");
        for (r, s) in self.runs() {
            let log = TrainLog::from_tsv(&fs::read_to_string(self.path(&format!("{}/log.tsv", Self::run_dir(r, s))))?)?;
            for x in &log.records {
                let _ = writeln!(
                    curves,
                    "{r},{s},{},{},{},{},{},{},{},{}",
                    x.step, x.epoch, x.task_bleu, x.pivot_bleu, x.lm_nll, x.mean_reward, x.mean_entropy, x.lr
                );
            }
        }

        // median run per regime by dev task BLEU
        let mut medians = BTreeMap::new();
        for r in self.cfg.regimes.iter().copied().chain(std::iter::once(Regime::FixedA)) {
            let finals: Vec<f64> = seeds
                .iter()
                .map(|&s| Ok(self.scores(EvalTarget::Run(r, s))?["task_bleu"]))
                .collect::<Result<_>>()?;
            medians.insert(r, seeds[median_run_selector(&finals)?]);
        }
        let mut report = String::new();
        let mut section = |title: String, dir: String| -> Result<()> {
            let _ = writeln!(report, "== {title}");
            report.push_str(&fs::read_to_string(self.path(&format!("{dir}/report.txt")))?);
            let hyp_path = self.path(&format!("{dir}/pivot_hyps.txt"));
            if hyp_path.exists() {
                for h in fs::read_to_string(hyp_path)?.lines().take(5) {
                    let _ = writeln!(report, "sample\t{h}");
                }
            }
            report.push('\n');
            Ok(())
        };
        section("pretrained".into(), Self::eval_dir(EvalTarget::Pretrained))?;
        section(Regime::Ensemble.name().into(), Self::eval_dir(EvalTarget::Ensemble))?;
        for (&r, &s) in &medians {
            section(format!("{r} median seed {s}"), Self::run_dir(r, s))?;
        }
        section(Regime::Direct.name().into(), Self::eval_dir(EvalTarget::Direct))?;

        let (ra, rb) = (self.cfg.compare_a, self.cfg.compare_b);
        let pairs = self.pivot_pairs(EvalTarget::Run(ra, medians[&ra]), EvalTarget::Run(rb, medians[&rb]))?;
        let wil = wilcoxon_signed_rank(&pairs);
        let boot = bootstrap_test(&pairs, self.cfg.bootstrap_samples, self.cfg.bootstrap_seed)?;
        let comparison = format!(
            "a\t{ra}\tseed\t{}\nb\t{rb}\tseed\t{}\nmetric\tpivot_sentence_bleu\nwilcoxon\t{wil}\nbootstrap\t{boot}\n",
            medians[&ra], medians[&rb]
        );

        self.write(SUMMARY_FILE, render_summary(&rows).as_bytes())?;
        self.write(CURVES_FILE, curves.as_bytes())?;
        self.write(REPORT_FILE, report.as_bytes())?;
        self.write(COMPARISON_FILE, comparison.as_bytes())
    }

    /// Per-sentence pivot scores of two evaluated targets, paired by id.
    pub fn pivot_pairs(&self, x: EvalTarget, y: EvalTarget) -> Result<PairedScores> {
        let read = |t: EvalTarget| -> Result<Vec<(String, f64)>> {
            let p = self.path(&format!("{}/pivot_scores.csv", Self::eval_dir(t)));
            crate::stats::parse_score_csv(&fs::read_to_string(p)?)
        };
        PairedScores::from_tables(&read(x)?, &read(y)?)
    }

    /// Greedy chain outputs for raw source sentences.
    pub fn decode(&self, regime: Option<(Regime, u64)>, sentences: &[Vec<String>]) -> Result<Vec<(Vec<String>, Vec<String>)>> {
        let (a, b) = match regime {
            Some((r, s)) => self.load_run(r, s)?,
            None => self.load_pretrained()?,
        };
        let v = &self.vocabs;
        sentences
            .iter()
            .map(|s| {
                let src: Vec<usize> = s.iter().map(|t| v.source.try_id(t)).collect::<Result<_>>()?;
                let msg = a.decode_greedy(&src, src.len())?;
                let out = b.decode_greedy(&msg.as_input(), 2 * src.len() + 4)?;
                Ok((v.pivot.decode(msg.content()), v.target.decode(out.content())))
            })
            .collect()
    }
}

fn scores_text(rep: &DriftReport, long_messages: usize) -> String {
    kv_text(&[
        ("task_bleu", rep.task_bleu),
        ("pivot_bleu", rep.pivot_bleu),
        ("pivot_lm_nll", rep.pivot_lm_nll),
        ("unique_ratio", rep.freq.hyp.ratio),
        ("unique_per_sentence", rep.freq.hyp.per_sentence),
        ("unique_total", rep.freq.hyp.unique as f64),
        ("ref_unique_ratio", rep.freq.reference.ratio),
        ("curve_sum", rep.freq.curve.iter().sum::<i64>() as f64),
        ("hyp_tokens", rep.freq.hyp.total as f64),
        ("ref_tokens", rep.freq.reference.total as f64),
        ("long_messages", long_messages as f64),
        ("flips", rep.flips.len() as f64),
    ])
}

/// Writes through a temporary file so a partial artifact never looks done.
fn put(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Result of rerunning one manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub step: String,
    /// Output paths whose fresh hash differs from the recorded one.
    pub mismatches: Vec<String>,
}

impl ReplayOutcome {
    pub fn reproduced(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Reruns manifest entries of `dir` (all of them when `only` is empty) in
/// `scratch`, seeded with the recorded inputs, and compares output hashes.
pub fn replay(dir: &Path, scratch: &Path, only: &[usize]) -> Result<Vec<ReplayOutcome>> {
    let src = Pipeline::resume(dir)?;
    let manifest = RunManifest::load(dir)?;
    let mut out = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if !only.is_empty() && !only.contains(&i) {
            continue;
        }
        if e.config_hash != src.cfg.hash() {
            return Err(Error::Config(format!("manifest entry {i} was produced under another config")));
        }
        let work = scratch.join(format!("entry{i}"));
        if work.exists() {
            fs::remove_dir_all(&work)?;
        }
        fs::create_dir_all(&work)?;
        fs::write(work.join(CONFIG_FILE), src.cfg.to_text())?;
        for (p, h) in &e.inputs {
            let from = dir.join(p);
            if !from.exists() || &file_hash(&from)? != h {
                return Err(Error::MissingArtifact {
                    path: format!("{} (recorded hash {})", from.display(), &h[..12]),
                    producer: e.step.clone(),
                });
            }
            let to = work.join(p);
            fs::create_dir_all(to.parent().unwrap())?;
            fs::copy(from, to)?;
        }
        let p = Pipeline::resume(&work)?;
        p.run(e.step.parse()?)?;
        let mut mismatches = Vec::new();
        for (path, h) in &e.outputs {
            if &file_hash(&work.join(path))? != h {
                mismatches.push(path.clone());
            }
        }
        out.push(ReplayOutcome {
            step: e.step.clone(),
            mismatches,
        });
    }
    Ok(out)
}
