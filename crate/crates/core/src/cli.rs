//! `metric-forge` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, SEED_ENV};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport, EvalSplit};
use crate::gradcheck::{self, GradcheckOptions};
use crate::model::{FeatureTap, ModelParams};
use crate::synthdata::{self, SyntheticDataset};
use crate::trainer::{self, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metric-forge", version, about = "Train and evaluate ranking-plus-classification embeddings")]
pub struct Cli {
    /// TOML config file with flat `key = value` entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set radius=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic identity dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Also split off a held-out part (`holdout_fraction` of each class) into this file.
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint and a JSON-lines epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint with CMC / mAP, optionally re-ranked.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use this dataset as both query and gallery (junk filtering drops self matches).
        #[arg(long, conflicts_with_all = ["query", "gallery"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
        /// Add a k-reciprocal re-ranked report (k1, k2, lambda from config).
        #[arg(long)]
        rerank: bool,
        /// Write the query × gallery distance matrix as a binary dump.
        #[arg(long)]
        dump_dist: Option<PathBuf>,
        /// Write the joint (query ∪ gallery) distance matrix as a binary dump.
        #[arg(long)]
        dump_joint: Option<PathBuf>,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Train {lin_only, softmax_only, combined} × {pre_bn, post_bn} and compare.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Number of seeds to average (overrides `ablate_seeds`).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-rank a dumped joint distance matrix.
    Rerank {
        #[arg(long)]
        joint: PathBuf,
        #[arg(long)]
        n_query: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn command() -> clap::Command {
    Cli::command().after_long_help(format!(
        "Config keys and defaults (set in --config or with --set; {SEED_ENV} overrides `seed`;\n\
         `rotation_seed` and `shift_offset` are unset by default and enable the shifted domain):\n\n{}",
        RunConfig::defaults_toml()
    ))
}

#[derive(Debug, Serialize)]
struct AblationRow {
    mode: TrainMode,
    feature_tap: FeatureTap,
    seeds: usize,
    map: f64,
    rank1: f64,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Human-readable output goes to `out`, errors to `err`.
pub fn dispatch<I, S>(argv: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_CONFIG;
        }
    };
    match run(cli, env_seed, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::ConfigInvalid { .. } => EXIT_CONFIG,
                _ => EXIT_CHECK_FAILED,
            }
        }
    }
}

fn load_split_from(query: &Path, gallery: &Path) -> Result<EvalSplit> {
    EvalSplit::new(SyntheticDataset::load(query)?.to_batch()?, SyntheticDataset::load(gallery)?.to_batch()?)
}

fn self_split(data: &SyntheticDataset) -> Result<EvalSplit> {
    let batch: EmbeddingBatch = data.to_batch()?;
    EvalSplit::new(batch.clone(), batch)
}

fn print_report(out: &mut dyn Write, label: &str, r: &EvalReport) -> Result<()> {
    writeln!(
        out,
        "{label:<10} mAP {:.4}  rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  queries {} (skipped {})",
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10),
        r.n_queries_used,
        r.n_queries_skipped
    )?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value).expect("report serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli, env_seed: Option<&str>, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), env_seed, &cli.overrides)?;
    match cli.command {
        Command::Gen { out: path, holdout_out } => {
            let data = synthdata::generate(&cfg.synth_spec())?;
            match holdout_out {
                Some(held_path) => {
                    let (train, held) = data.split_holdout(cfg.holdout_fraction)?;
                    train.save(&path)?;
                    held.save(&held_path)?;
                    writeln!(out, "wrote {} training rows to {} and {} held-out rows to {}", train.len(), path.display(), held.len(), held_path.display())?;
                }
                None => {
                    data.save(&path)?;
                    writeln!(out, "wrote {} rows to {}", data.len(), path.display())?;
                }
            }
        }
        Command::Train { data, checkpoint, log } => {
            let dataset = SyntheticDataset::load(&data)?;
            let (params, train_log) = trainer::fit(&dataset, &cfg.train_config())?;
            params.save(&checkpoint)?;
            std::fs::write(&log, train_log.to_jsonl())?;
            if let Some(last) = train_log.records.last() {
                writeln!(
                    out,
                    "epoch {:>4}  lr {:.2e}  m_loss {:.6}  lp {:.6}  ln {:.6}  softmax_ls {:.6}",
                    last.epoch, last.lr, last.m_loss, last.lp, last.ln, last.softmax_ls
                )?;
            }
            writeln!(out, "checkpoint {}  log {}", checkpoint.display(), log.display())?;
        }
        Command::Eval {
            checkpoint,
            data,
            query,
            gallery,
            rerank,
            dump_dist,
            dump_joint,
            json,
        } => {
            let model = ModelParams::load(&checkpoint)?;
            let split = match (data, query, gallery) {
                (Some(d), _, _) => self_split(&SyntheticDataset::load(d)?)?,
                (None, Some(q), Some(g)) => load_split_from(&q, &g)?,
                _ => return Err(Error::config("data", "pass --data or both --query and --gallery")),
            };
            let embedded = split.embedded(&model)?;
            let rerank_cfg = cfg.rerank_config();
            let report = evalkit::evaluate_features(&embedded, rerank.then_some(&rerank_cfg))?;
            if let Some(path) = dump_dist {
                evalkit::write_matrix(path, &embedded.distances())?;
            }
            if let Some(path) = dump_joint {
                evalkit::write_matrix(path, &embedded.joint_distances())?;
            }
            print_report(out, "baseline", &report)?;
            if let Some(rr) = &report.reranked {
                print_report(out, "reranked", rr)?;
            }
            writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes"))?;
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Command::Gradcheck { seed, trials } => {
            let opts = GradcheckOptions {
                seed: seed.unwrap_or(cfg.seed),
                trials,
                ..Default::default()
            };
            let summary = gradcheck::run(&opts)?;
            writeln!(
                out,
                "trials {}  checked {}  skipped {}  max relative error {:.3e}  tolerance {:.0e}  {}",
                summary.trials.len(),
                summary.checked,
                summary.skipped,
                summary.max_rel_error,
                summary.tolerance,
                if summary.passed() { "PASS" } else { "FAIL" }
            )?;
            if !summary.passed() {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Ablate { train, test, seeds, json } => {
            let train_data = SyntheticDataset::load(&train)?;
            let split = self_split(&SyntheticDataset::load(&test)?)?;
            let n_seeds = seeds.unwrap_or(cfg.ablate_seeds).max(1);
            let mut rows = Vec::new();
            for mode in TrainMode::ALL {
                for tap in [FeatureTap::PreBn, FeatureTap::PostBn] {
                    let (mut map, mut rank1) = (0.0, 0.0);
                    for s in 0..n_seeds {
                        let mut tc = cfg.train_config();
                        tc.mode = mode;
                        tc.head.feature_tap = tap;
                        tc.seed = cfg.seed.wrapping_add(s as u64);
                        let (params, _) = trainer::fit(&train_data, &tc)?;
                        let report = evalkit::evaluate(&split, &params, None)?;
                        map += report.map;
                        rank1 += report.rank1();
                    }
                    rows.push(AblationRow {
                        mode,
                        feature_tap: tap,
                        seeds: n_seeds,
                        map: map / n_seeds as f64,
                        rank1: rank1 / n_seeds as f64,
                    });
                }
            }
            writeln!(out, "{:<14} {:<8} {:>8} {:>8}", "loss", "features", "mAP", "rank1")?;
            for r in &rows {
                let tap = match r.feature_tap {
                    FeatureTap::PreBn => "pre_bn",
                    FeatureTap::PostBn => "post_bn",
                };
                writeln!(out, "{:<14} {:<8} {:>8.4} {:>8.4}", r.mode.name(), tap, r.map, r.rank1)?;
            }
            for r in &rows {
                writeln!(out, "{}", serde_json::to_string(r).expect("row serializes"))?;
            }
            if let Some(path) = json {
                write_json(&path, &rows)?;
            }
        }
        Command::Rerank { joint, n_query, out: path } => {
            let matrix = evalkit::read_matrix(&joint)?;
            let reranked = evalkit::rerank_joint(matrix.view(), n_query, &cfg.rerank_config())?;
            evalkit::write_matrix(&path, &reranked)?;
            writeln!(out, "wrote {}x{} re-ranked distances to {}", reranked.nrows(), reranked.ncols(), path.display())?;
        }
    }
    Ok(EXIT_OK)
}
