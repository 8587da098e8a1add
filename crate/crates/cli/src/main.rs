use std::fs;
use std::io::{self, BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use wmguard_core::conformal::ConformalThreshold;
use wmguard_core::harness::{self, PipelineConfig, Workspace};
use wmguard_core::scorers::{Scorer, ScorerKind};
use wmguard_core::trajkit::read_archive;

#[derive(Parser)]
#[command(name = "wmguard", version, about = "World-model failure detection with conformal thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Root seed (for gen-data: the dataset base seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Pipeline configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Workspace directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(PipelineConfig, Workspace)> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok((cfg, Workspace::new(&self.out)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/calib/eval archives.
    GenData(Common),
    /// Train and freeze the image tokenizer.
    TrainTokenizer(Common),
    /// Train the world model with the horizon curriculum.
    TrainWm(Common),
    /// Fit the flow, autoencoder, safe set and PCA-K-means baselines.
    TrainBaselines(Common),
    /// Calibrate a conformal threshold on the calibration split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scorer: ScorerKind,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Fold evaluation of every configured scorer, with tables and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Single-step scoring latency of every configured scorer.
    Bench(Common),
    /// Stream JSON-line monitor events to standard output.
    Monitor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scorer: ScorerKind,
        #[arg(long)]
        threshold: PathBuf,
        /// Read framed records from standard input.
        #[arg(long, conflicts_with = "archive")]
        stdin: bool,
        /// Monitor every trajectory of an archive.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(c) => {
            let (mut cfg, ws) = c.load()?;
            if let Some(s) = c.seed {
                cfg.dataset.base_seed = s;
            }
            harness::gen_data(&cfg, &ws)?;
            eprintln!("wrote {} trajectories to {}", cfg.dataset.counts.total(), ws.data().display());
        }
        Command::TrainTokenizer(c) => {
            let (cfg, ws) = c.load()?;
            harness::train_tokenizer_stage(&cfg, &ws)?;
            eprintln!("saved {}", ws.model("tokenizer").display());
        }
        Command::TrainWm(c) => {
            let (cfg, ws) = c.load()?;
            let (wm, rep) = harness::train_wm_stage(&cfg, &ws)?;
            eprintln!(
                "world model: {} parameters, {} epochs, best epoch {}",
                wm.param_count(),
                rep.epochs.len(),
                rep.best_epoch
            );
        }
        Command::TrainBaselines(c) => {
            let (cfg, ws) = c.load()?;
            harness::train_baselines_stage(&cfg, &ws)?;
            eprintln!("saved baselines under {}", ws.models().display());
        }
        Command::Calibrate { common, scorer, alpha } => {
            let (mut cfg, ws) = common.load()?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            let thr = harness::calibrate_stage(&cfg, &ws, scorer)?;
            println!("{}", thr.to_json()?);
        }
        Command::Evaluate { common, alpha, folds } => {
            let (mut cfg, ws) = common.load()?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(f) = folds {
                cfg.folds = f;
            }
            let results = harness::evaluate_stage(&cfg, &ws)?;
            let reports: Vec<_> = results.iter().map(|r| &r.report).collect();
            print!("{}", harness::summary_md(&reports));
        }
        Command::Bench(c) => {
            let (cfg, ws) = c.load()?;
            let reports = harness::bench_stage(&cfg, &ws)?;
            print!("{}", harness::bench_csv(&reports));
        }
        Command::Monitor { common, scorer, threshold, stdin, archive } => {
            let (cfg, ws) = common.load()?;
            let text = fs::read_to_string(&threshold).with_context(|| format!("reading {}", threshold.display()))?;
            let thr = ConformalThreshold::from_json(&text)?;
            let scorer = Scorer::build(scorer, &harness::load_models(&cfg, &ws)?)?;
            let mut out = BufWriter::new(io::stdout().lock());
            match (stdin, archive) {
                (true, None) => {
                    harness::monitor_stream(&scorer, &thr, BufReader::new(io::stdin().lock()), &mut out)?;
                }
                (false, Some(dir)) => {
                    harness::monitor_trajectories(&scorer, &thr, &read_archive(&dir)?, &mut out)?;
                }
                _ => bail!("pass exactly one of --stdin or --archive"),
            }
        }
    }
    Ok(())
}
