//! `driftlab`: run and inspect pivot-translation drift experiments.

use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftlab::config::{ExperimentConfig, Regime};
use driftlab::pipeline::{replay, EvalTarget, Outcome, Pipeline, Step, CONFIG_FILE};
use driftlab::stats::{bootstrap_test, parse_score_csv, wilcoxon_signed_rank, PairedScores};
use driftlab::{Error, Result};

/// Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
/// divergence, 1 anything else.
#[derive(Parser)]
#[command(name = "driftlab", version, about = "Language drift in pivot-translation games")]
struct Cli {
    /// Flat key=value configuration file; defaults to OUT/config.txt if
    /// present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set hidden=32.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Recompute steps whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every step, skipping those already done.
    Run,
    /// Write the synthetic corpora under data/.
    Generate,
    /// Supervised pretraining of agents A and B.
    Pretrain,
    /// Train the pivot language model.
    TrainLm,
    /// Train the grounding ranker.
    TrainRanker,
    /// Fine-tune one regime and seed, or all configured runs.
    Finetune {
        /// PG, PG+G, PG+LM, PG+LM+G or FIXED_A.
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a source-to-target model without the pivot.
    DirectUpperBound,
    /// Score agents on the dev split; without flags, every target.
    Evaluate {
        /// A fine-tuning regime, ENSEMBLE or DIRECT.
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        seed: Option<u64>,
        /// Score the pretrained pair.
        #[arg(long)]
        pretrained: bool,
    },
    /// Build summary.tsv, curves.csv, drift_report.txt and comparison.txt.
    Compare,
    /// Translate source sentences (arguments or stdin lines) through the chain.
    Decode {
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        sentences: Vec<String>,
    },
    /// Wilcoxon and bootstrap test between two `id,score` CSV files.
    Significance {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rerun manifest entries in a scratch directory and compare outputs.
    Replay {
        #[arg(long)]
        scratch: Option<PathBuf>,
        /// Manifest entry index (repeatable); all entries by default.
        #[arg(long)]
        entry: Vec<usize>,
    },
    /// Print the effective configuration in canonical form.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let stored = cli.out.join(CONFIG_FILE);
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None if stored.exists() => ExperimentConfig::parse(&fs::read_to_string(stored)?)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_steps(p: &Pipeline, steps: &[Step]) -> Result<()> {
    for &s in steps {
        let t = std::time::Instant::now();
        match p.run(s)? {
            Outcome::Ran => eprintln!("{s}: done in {:.1}s", t.elapsed().as_secs_f64()),
            Outcome::Skipped => eprintln!("{s}: outputs present, skipped"),
        }
    }
    Ok(())
}

fn read_scores(p: &Path) -> Result<Vec<(String, f64)>> {
    parse_score_csv(&fs::read_to_string(p)?)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Significance { a, b, boot, seed } => {
            let pairs = PairedScores::from_tables(&read_scores(a)?, &read_scores(b)?)?;
            let w = wilcoxon_signed_rank(&pairs);
            let bs = bootstrap_test(&pairs, *boot, *seed)?;
            println!("{w}\t{bs}");
            return Ok(());
        }
        Command::Replay { scratch, entry } => {
            let scratch = scratch.clone().unwrap_or_else(|| cli.out.join("replay"));
            let results = replay(&cli.out, &scratch, entry)?;
            let mut ok = true;
            for r in &results {
                if r.reproduced() {
                    println!("reproduced\t{}", r.step);
                } else {
                    ok = false;
                    println!("differs\t{}\t{}", r.step, r.mismatches.join(","));
                }
            }
            return if ok {
                Ok(())
            } else {
                Err(Error::Format("replayed outputs differ from the manifest".into()))
            };
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let mut p = Pipeline::open(cfg, &cli.out)?;
    p.force = cli.force;
    match &cli.command {
        Command::Run => run_steps(&p, &p.all_steps()),
        Command::Generate => run_steps(&p, &[Step::Generate]),
        Command::Pretrain => run_steps(&p, &[Step::Pretrain]),
        Command::TrainLm => run_steps(&p, &[Step::TrainLm]),
        Command::TrainRanker => run_steps(&p, &[Step::TrainRanker]),
        Command::DirectUpperBound => run_steps(&p, &[Step::DirectUpperBound]),
        Command::Compare => run_steps(&p, &[Step::Compare]),
        Command::Finetune { regime, seed } => {
            let steps: Vec<Step> = p
                .runs()
                .into_iter()
                .filter(|(r, s)| regime.is_none_or(|x| x == *r) && seed.is_none_or(|x| x == *s))
                .map(|(r, s)| Step::Finetune(r, s))
                .collect();
            if steps.is_empty() {
                if let (Some(r), Some(s)) = (regime, seed) {
                    return run_steps(&p, &[Step::Finetune(*r, *s)]);
                }
                return Err(Error::Config("no configured run matches the given regime and seed".into()));
            }
            run_steps(&p, &steps)
        }
        Command::Evaluate { regime, seed, pretrained } => {
            let steps: Vec<Step> = if *pretrained {
                vec![Step::Evaluate(EvalTarget::Pretrained)]
            } else {
                match (regime, seed) {
                    (Some(Regime::Ensemble), _) => vec![Step::Evaluate(EvalTarget::Ensemble)],
                    (Some(Regime::Direct), _) => vec![Step::Evaluate(EvalTarget::Direct)],
                    (Some(r), Some(s)) => vec![Step::Evaluate(EvalTarget::Run(*r, *s))],
                    (r, s) => p
                        .eval_targets()
                        .into_iter()
                        .filter(|t| match t {
                            EvalTarget::Run(x, y) => r.is_none_or(|q| q == *x) && s.is_none_or(|q| q == *y),
                            _ => r.is_none() && s.is_none(),
                        })
                        .map(Step::Evaluate)
                        .collect(),
                }
            };
            run_steps(&p, &steps)
        }
        Command::Decode { regime, seed, sentences } => {
            let lines: Vec<String> = if sentences.is_empty() {
                io::stdin().lock().lines().collect::<io::Result<_>>()?
            } else {
                sentences.clone()
            };
            let toks: Vec<Vec<String>> = lines
                .iter()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect();
            for (pivot, target) in p.decode(regime.map(|r| (r, *seed)), &toks)? {
                println!("{}\t{}", pivot.join(" "), target.join(" "));
            }
            Ok(())
        }
        Command::Significance { .. } | Command::Replay { .. } | Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
