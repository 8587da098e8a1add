//! End-to-end orchestration over a workspace directory: data generation,
//! model fitting, calibration, fold evaluation, latency benchmarks and
//! monitoring.
//!
//! Layout under the workspace root:
//! `data/<split>/`, `models/*.ckpt`, `thresholds/<kind>.json`,
//! `eval/{results.csv,summary.md,plots/}`, `bench.csv`.

mod bench;
mod eval;
mod monitor;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bench::{bench_csv, bench_scorer, tiers_ordered, BenchReport, LATENCY_TIERS, MIN_ITERATIONS};
pub use eval::{chance_weighted, round1, evaluate_stats, mean_std, roc_auc, weighted_total, Fold, FoldReport};
pub use monitor::{monitor_stream, monitor_trajectories, Event, Monitor, MonitorSummary};
pub use report::{emit_report, histogram_svg, padded_range, results_csv, summary_md, timeline_svg, ScorerResult, CSV_HEADER};

use crate::conformal::{jackknife_calibrate, smooth, ConformalThreshold, ScoreSeries, DEFAULT_PERMUTATIONS, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::par;
use crate::pushsim::{gen_dataset, rollout, DatasetConfig};
use crate::scorers::{
    build_safe_set_on, fit_ae_on, fit_flow_on, fit_pca_kmeans_on, score_trajectory, AeConfig, Autoencoder, Flow,
    FlowConfig, Models, PcaKmeans, SafeSet, Scorer, ScorerKind,
};
use crate::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig};
use crate::trajkit::{read_archive, Label, Mode, Trajectory};
use crate::worldmodel::{train_wm, TrainReport, WMConfig, WorldModel};

/// All pipeline settings. `seed` is the root training seed and overrides the
/// seeds of the individual model configs; the dataset keeps its own
/// `base_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub wm: WMConfig,
    pub flow: FlowConfig,
    pub ae: AeConfig,
    /// Frame stride when collecting fit data for the flow, autoencoder and
    /// PCA-K-means.
    pub baseline_stride: usize,
    pub n_safe: usize,
    /// Failure rollouts per mode generated (outside the dataset) for
    /// PCA-K-means fitting.
    pub pca_failures_per_mode: usize,
    pub alpha: f64,
    pub folds: usize,
    pub window: usize,
    pub permutations: usize,
    pub bench_iterations: usize,
    pub scorers: Vec<ScorerKind>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            tokenizer: TokenizerConfig::default(),
            wm: WMConfig::default(),
            flow: FlowConfig::default(),
            ae: AeConfig::default(),
            baseline_stride: 4,
            n_safe: 2048,
            pca_failures_per_mode: 8,
            alpha: 0.15,
            folds: 32,
            window: DEFAULT_WINDOW,
            permutations: DEFAULT_PERMUTATIONS,
            bench_iterations: MIN_ITERATIONS,
            scorers: ScorerKind::ALL.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Copy with every model seed derived from `seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.tokenizer.seed = s;
        c.wm.seed = s;
        c.flow.seed = s.wrapping_add(1);
        c.ae.seed = s.wrapping_add(2);
        c
    }
}

/// Paths inside a workspace directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data().join(name)
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.models().join(format!("{name}.ckpt"))
    }

    pub fn threshold(&self, kind: ScorerKind) -> PathBuf {
        self.root.join("thresholds").join(format!("{kind}.json"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn read_split(&self, name: &str) -> Result<Vec<Trajectory>> {
        read_archive(&self.split(name))
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn gen_data(cfg: &PipelineConfig, ws: &Workspace) -> Result<()> {
    gen_dataset(&cfg.dataset, &ws.data()).map(|_| ())
}

pub fn fit_tokenizer(cfg: &PipelineConfig, train: &[Trajectory]) -> Result<Tokenizer> {
    crate::trajkit::require_nominal(train, "tokenizer training")?;
    let frames: Vec<&[f32]> = train.iter().flat_map(|t| t.states.iter().map(|s| s.image.as_slice())).collect();
    train_tokenizer(&frames, &cfg.seeded().tokenizer)
}

pub fn train_tokenizer_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<Tokenizer> {
    let tok = fit_tokenizer(cfg, &ws.read_split("train")?)?;
    mkdir(&ws.models())?;
    tok.save(&ws.model("tokenizer"))?;
    Ok(tok)
}

pub fn train_wm_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<(WorldModel, TrainReport)> {
    let tok = Tokenizer::load(&ws.model("tokenizer"))?;
    let (wm, rep) = train_wm(&ws.read_split("train")?, &ws.read_split("val")?, &cfg.seeded().wm, &tok)?;
    wm.save(&ws.model("wm"))?;
    write(&ws.models().join("wm_train_log.json"), &serde_json::to_string_pretty(&rep.epochs)?)?;
    Ok((wm, rep))
}

/// Failure rollouts disjoint from every dataset split.
pub fn pca_failure_rollouts(cfg: &PipelineConfig) -> Vec<Trajectory> {
    let base = cfg.dataset.base_seed.wrapping_add(1 << 40);
    let plan: Vec<(u64, Mode)> = Mode::FAILURES
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, cfg.pca_failures_per_mode))
        .enumerate()
        .map(|(i, m)| (base.wrapping_add(i as u64), m))
        .collect();
    par::map(&plan, |&(seed, mode)| rollout(seed, mode, &cfg.dataset.env))
}

/// Fits the flow, autoencoder, safe set and PCA-K-means and saves them.
pub fn train_baselines_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<()> {
    let c = cfg.seeded();
    let tok = Tokenizer::load(&ws.model("tokenizer"))?;
    let train = ws.read_split("train")?;
    let flow = fit_flow_on(&train, &tok, c.baseline_stride, &c.flow)?;
    flow.save(&ws.model("flow"))?;
    let ae = fit_ae_on(&train, c.baseline_stride, &c.ae)?;
    ae.save(&ws.model("ae"))?;
    let safe = build_safe_set_on(&ws.read_split("calib")?, &ae, c.n_safe, c.seed)?;
    safe.save(&ws.model("safe_set"))?;
    let pk = fit_pca_kmeans_on(&train, &pca_failure_rollouts(&c), &tok, c.baseline_stride, c.seed)?;
    pk.save(&ws.model("pca_kmeans"))?;
    Ok(())
}

/// Loads every model present in the workspace.
pub fn load_models(cfg: &PipelineConfig, ws: &Workspace) -> Result<Models> {
    fn opt<T>(path: PathBuf, load: impl Fn(&Path) -> Result<T>) -> Result<Option<Arc<T>>> {
        if path.exists() {
            load(&path).map(|m| Some(Arc::new(m)))
        } else {
            Ok(None)
        }
    }
    Ok(Models {
        tokenizer: opt(ws.model("tokenizer"), Tokenizer::load)?,
        world_model: opt(ws.model("wm"), WorldModel::load)?,
        flow: opt(ws.model("flow"), Flow::load)?,
        ae: opt(ws.model("ae"), Autoencoder::load)?,
        safe_set: opt(ws.model("safe_set"), SafeSet::load)?,
        pca_kmeans: opt(ws.model("pca_kmeans"), PcaKmeans::load)?,
        random_seed: cfg.seed,
    })
}

/// Scores every trajectory, in input order.
pub fn score_all(scorer: &Scorer, trajs: &[Trajectory]) -> Result<Vec<ScoreSeries>> {
    par::map(trajs, |t| score_trajectory(scorer, t)).into_iter().collect()
}

/// Jackknife threshold from nominal calibration trajectories.
pub fn calibrate(scorer: &Scorer, calib: &[Trajectory], cfg: &PipelineConfig) -> Result<ConformalThreshold> {
    crate::trajkit::require_nominal(calib, "calibration")?;
    let stats = score_all(scorer, calib)?
        .iter()
        .map(|s| s.statistic(cfg.window))
        .collect::<Result<Vec<_>>>()?;
    jackknife_calibrate(&stats, cfg.alpha, cfg.permutations, cfg.window, cfg.seed)
}

pub fn calibrate_stage(cfg: &PipelineConfig, ws: &Workspace, kind: ScorerKind) -> Result<ConformalThreshold> {
    let scorer = Scorer::build(kind, &load_models(cfg, ws)?)?;
    let thr = calibrate(&scorer, &ws.read_split("calib")?, cfg)?;
    write(&ws.threshold(kind), &thr.to_json()?)?;
    Ok(thr)
}

/// Fold evaluation of one scorer on eval-nominal and eval-failure sets.
pub fn evaluate_scorer(
    scorer: &Scorer,
    nominal: &[Trajectory],
    failures: &[Trajectory],
    cfg: &PipelineConfig,
) -> Result<ScorerResult> {
    crate::trajkit::require_nominal(nominal, "evaluation nominal")?;
    if failures.iter().any(|t| t.label != Label::Failure) {
        return Err(Error::Label("evaluation failure set contains nominal trajectories".into()));
    }
    let ns = score_all(scorer, nominal)?;
    let fs = score_all(scorer, failures)?;
    let stat = |s: &ScoreSeries| s.statistic(cfg.window);
    let nom_stats = ns.iter().map(stat).collect::<Result<Vec<_>>>()?;
    let fail_stats = fs
        .iter()
        .zip(failures)
        .map(|(s, t)| Ok((t.mode, stat(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_stats(scorer.kind(), &nom_stats, &fail_stats, cfg.alpha, cfg.folds, cfg.seed)?;
    let mut timelines: Vec<(String, Label, Vec<f64>)> =
        ns.iter().take(3).map(|s| (s.traj_id.clone(), s.label, smooth(&s.values, cfg.window))).collect();
    for m in Mode::FAILURES {
        if let Some((s, _)) = fs.iter().zip(failures).find(|(_, t)| t.mode == m) {
            timelines.push((s.traj_id.clone(), s.label, smooth(&s.values, cfg.window)));
        }
    }
    Ok(ScorerResult { report, nominal: nom_stats, failures: fail_stats, timelines })
}

pub fn evaluate_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<Vec<ScorerResult>> {
    let models = load_models(cfg, ws)?;
    let nominal = ws.read_split("eval_nominal")?;
    let failures = ws.read_split("eval_failure")?;
    let mut results = Vec::with_capacity(cfg.scorers.len());
    for &kind in &cfg.scorers {
        let scorer = Scorer::build(kind, &models)?;
        results.push(evaluate_scorer(&scorer, &nominal, &failures, cfg)?);
    }
    emit_report(&results, &ws.eval())?;
    Ok(results)
}

pub fn bench_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<Vec<BenchReport>> {
    let models = load_models(cfg, ws)?;
    let nominal = ws.read_split("eval_nominal")?;
    let traj = nominal
        .iter()
        .max_by_key(|t| t.len())
        .ok_or_else(|| Error::InsufficientData("no eval-nominal trajectory to benchmark on".into()))?;
    let mut reports = Vec::with_capacity(cfg.scorers.len());
    for &kind in &cfg.scorers {
        reports.push(bench_scorer(&Scorer::build(kind, &models)?, traj, cfg.bench_iterations)?);
    }
    write(&ws.root.join("bench.csv"), &bench_csv(&reports))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pushsim::SplitCounts;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.dataset.counts = SplitCounts { train: 24, val: 2, calib: 4, eval_nominal: 4, eval_per_mode: 1 };
        c.tokenizer.steps = 50;
        c.wm = WMConfig { max_epochs: 2, epochs_per_stage: 1, batches_per_epoch: 2, val_windows: 4, ..WMConfig::default() };
        c.flow = FlowConfig { max_epochs: 1, steps_per_epoch: 2, max_samples: 64, ..FlowConfig::default() };
        c.ae = AeConfig { steps: 5, ..AeConfig::default() };
        c.pca_failures_per_mode = 1;
        c.folds = 3;
        c.permutations = 4;
        c.n_safe = 32;
        c
    }

    fn run(cfg: &PipelineConfig, dir: &Path) -> Vec<ScorerResult> {
        let ws = Workspace::new(dir);
        gen_data(cfg, &ws).unwrap();
        train_tokenizer_stage(cfg, &ws).unwrap();
        train_wm_stage(cfg, &ws).unwrap();
        train_baselines_stage(cfg, &ws).unwrap();
        calibrate_stage(cfg, &ws, ScorerKind::WmUncertainty).unwrap();
        evaluate_stage(cfg, &ws).unwrap()
    }

    #[test]
    fn tiny_pipeline_is_deterministic() {
        let cfg = tiny();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run(&cfg, a.path());
        let rb = run(&cfg, b.path());
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 8);
        for f in [
            "data/train/manifest.json",
            "models/tokenizer.ckpt",
            "models/wm.ckpt",
            "models/flow.ckpt",
            "models/ae.ckpt",
            "models/safe_set.ckpt",
            "models/pca_kmeans.ckpt",
            "thresholds/wm-uncertainty.json",
            "eval/results.csv",
        ] {
            let x = fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn seeds_propagate() {
        let c = PipelineConfig { seed: 9, ..PipelineConfig::default() }.seeded();
        assert_eq!((c.tokenizer.seed, c.wm.seed), (9, 9));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"alpha": 0.1}"#).unwrap();
        assert_eq!(partial.alpha, 0.1);
        assert_eq!(partial.folds, 32);
    }

    #[test]
    fn calibration_rejects_failures() {
        let cfg = tiny();
        let fails = vec![rollout(1, Mode::HalfFriction, &cfg.dataset.env), rollout(2, Mode::HalfFriction, &cfg.dataset.env)];
        assert!(matches!(calibrate(&Scorer::Sparc, &fails, &cfg), Err(Error::Label(_))));
    }
}
