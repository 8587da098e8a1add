//! Non-conformity scorers. Every kind maps a trajectory prefix to one scalar
//! per step, higher meaning more anomalous.

mod ae;
mod flow;
mod pca;
mod sparc;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ae::{build_safe_set, fit_ae, state_vector, AeConfig, Autoencoder, SafeSet};
pub use flow::{fit_flow, Flow, FlowConfig};
pub use pca::{fit_pca_kmeans, two_means, PcaKmeans, DEFAULT_COMPONENTS};
pub use sparc::{score_sparc, sparc_of_speed, speeds, MIN_STATES, SPARC_WINDOW};

use crate::conformal::ScoreSeries;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;
use crate::trajkit::{require_nominal, Action, Label, State, Trajectory};
use crate::worldmodel::{loss_latent_recon, GaussianLatent, StepInput, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    WmUncertainty,
    WmPredError,
    #[serde(rename = "logpzo")]
    LogpZO,
    AeRecon,
    AeSim,
    Sparc,
    PcaKmeans,
    Random,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 8] = [
        ScorerKind::WmUncertainty,
        ScorerKind::WmPredError,
        ScorerKind::LogpZO,
        ScorerKind::AeRecon,
        ScorerKind::AeSim,
        ScorerKind::Sparc,
        ScorerKind::PcaKmeans,
        ScorerKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::WmUncertainty => "wm-uncertainty",
            ScorerKind::WmPredError => "wm-pred-error",
            ScorerKind::LogpZO => "logpzo",
            ScorerKind::AeRecon => "ae-recon",
            ScorerKind::AeSim => "ae-sim",
            ScorerKind::Sparc => "sparc",
            ScorerKind::PcaKmeans => "pca-kmeans",
            ScorerKind::Random => "random",
        }
    }

    pub fn is_world_model(self) -> bool {
        matches!(self, ScorerKind::WmUncertainty | ScorerKind::WmPredError)
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer kind `{s}`")))
    }
}

/// Element mean of the predicted standard deviations.
pub fn score_wm_uncertainty(g: &GaussianLatent) -> f64 {
    g.mean_sigma()
}

/// Latent-space squared error of the predicted mean.
pub fn score_wm_pred_error(g: &GaussianLatent, z_next_true: &[f32]) -> Result<f64> {
    loss_latent_recon(z_next_true, &g.mu)
}

/// Fitted models a scorer may need. Missing entries make the corresponding
/// kinds unavailable.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub tokenizer: Option<Arc<Tokenizer>>,
    pub world_model: Option<Arc<WorldModel>>,
    pub flow: Option<Arc<Flow>>,
    pub ae: Option<Arc<Autoencoder>>,
    pub safe_set: Option<Arc<SafeSet>>,
    pub pca_kmeans: Option<Arc<PcaKmeans>>,
    pub random_seed: u64,
}

/// A frozen, ready-to-run scorer.
#[derive(Clone, Debug)]
pub enum Scorer {
    WmUncertainty { wm: Arc<WorldModel>, tok: Arc<Tokenizer> },
    WmPredError { wm: Arc<WorldModel>, tok: Arc<Tokenizer> },
    LogpZO { flow: Arc<Flow>, tok: Arc<Tokenizer> },
    AeRecon { ae: Arc<Autoencoder> },
    AeSim { ae: Arc<Autoencoder>, safe: Arc<SafeSet> },
    Sparc,
    PcaKmeans { pk: Arc<PcaKmeans>, tok: Arc<Tokenizer> },
    Random { seed: u64 },
}

fn need<T>(m: &Option<Arc<T>>, what: &str, kind: ScorerKind) -> Result<Arc<T>> {
    m.clone()
        .ok_or_else(|| Error::Config(format!("scorer {kind} is not fitted: missing {what}")))
}

impl Scorer {
    pub fn build(kind: ScorerKind, m: &Models) -> Result<Self> {
        let tok = || need(&m.tokenizer, "tokenizer", kind);
        Ok(match kind {
            ScorerKind::WmUncertainty => Scorer::WmUncertainty { wm: need(&m.world_model, "world model", kind)?, tok: tok()? },
            ScorerKind::WmPredError => Scorer::WmPredError { wm: need(&m.world_model, "world model", kind)?, tok: tok()? },
            ScorerKind::LogpZO => Scorer::LogpZO { flow: need(&m.flow, "flow", kind)?, tok: tok()? },
            ScorerKind::AeRecon => Scorer::AeRecon { ae: need(&m.ae, "autoencoder", kind)? },
            ScorerKind::AeSim => Scorer::AeSim { ae: need(&m.ae, "autoencoder", kind)?, safe: need(&m.safe_set, "safe set", kind)? },
            ScorerKind::Sparc => Scorer::Sparc,
            ScorerKind::PcaKmeans => Scorer::PcaKmeans { pk: need(&m.pca_kmeans, "PCA-K-means model", kind)?, tok: tok()? },
            ScorerKind::Random => Scorer::Random { seed: m.random_seed },
        })
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::WmUncertainty { .. } => ScorerKind::WmUncertainty,
            Scorer::WmPredError { .. } => ScorerKind::WmPredError,
            Scorer::LogpZO { .. } => ScorerKind::LogpZO,
            Scorer::AeRecon { .. } => ScorerKind::AeRecon,
            Scorer::AeSim { .. } => ScorerKind::AeSim,
            Scorer::Sparc => ScorerKind::Sparc,
            Scorer::PcaKmeans { .. } => ScorerKind::PcaKmeans,
            Scorer::Random { .. } => ScorerKind::Random,
        }
    }

    /// Number of leading steps without a score of their own.
    pub fn warmup(&self) -> usize {
        match self {
            Scorer::WmUncertainty { wm, .. } | Scorer::WmPredError { wm, .. } => wm.config().history,
            _ => 0,
        }
    }

    /// Fresh per-trajectory scoring state; `traj_seed` drives the random kind.
    pub fn stream(&self, traj_seed: u64) -> ScoreStream<'_> {
        let rng = match self {
            Scorer::Random { seed } => Some(ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ traj_seed,
            )),
            _ => None,
        };
        ScoreStream { scorer: self, history: VecDeque::new(), positions: VecDeque::new(), rng }
    }
}

/// Incremental scoring of one trajectory, one (state, action) pair at a time.
#[derive(Debug)]
pub struct ScoreStream<'a> {
    scorer: &'a Scorer,
    history: VecDeque<StepInput>,
    positions: VecDeque<[f64; 2]>,
    rng: Option<ChaCha8Rng>,
}

impl ScoreStream<'_> {
    /// Score of the newest step, or `None` while a world-model scorer is
    /// still filling its history.
    pub fn push(&mut self, state: &State, action: &Action) -> Result<Option<f64>> {
        match self.scorer {
            Scorer::WmUncertainty { wm, tok } | Scorer::WmPredError { wm, tok } => {
                let input = wm.step_input(tok, state, action)?;
                let h = wm.config().history;
                let out = if self.history.len() == h {
                    let window: Vec<StepInput> = self.history.iter().cloned().collect();
                    let (g, _) = wm.predict(&window)?;
                    Some(match self.scorer {
                        Scorer::WmUncertainty { .. } => score_wm_uncertainty(&g),
                        _ => score_wm_pred_error(&g, &input.latent)?,
                    })
                } else {
                    None
                };
                self.history.push_back(input);
                if self.history.len() > h {
                    self.history.pop_front();
                }
                Ok(out)
            }
            Scorer::LogpZO { flow, tok } => Ok(Some(flow.score(&tok.encode(&state.image)?)?)),
            Scorer::AeRecon { ae } => Ok(Some(ae.recon_error(state)?)),
            Scorer::AeSim { ae, safe } => Ok(Some(safe.min_mse(&ae.encode(state)?)?)),
            Scorer::Sparc => {
                if state.proprio.len() < 2 {
                    return Err(Error::Shape { expected: vec![2], actual: vec![state.proprio.len()] });
                }
                self.positions.push_back([state.proprio[0] as f64, state.proprio[1] as f64]);
                if self.positions.len() > SPARC_WINDOW {
                    self.positions.pop_front();
                }
                Ok(Some(score_sparc(self.positions.make_contiguous())))
            }
            Scorer::PcaKmeans { pk, tok } => Ok(Some(pk.score(&tok.encode(&state.image)?)?)),
            Scorer::Random { .. } => Ok(Some(self.rng.as_mut().expect("random stream").random::<f64>())),
        }
    }
}

/// Scores every step of `traj`. World-model kinds have no score for the first
/// `H` steps; those entries repeat the first computed score.
pub fn score_trajectory(scorer: &Scorer, traj: &Trajectory) -> Result<ScoreSeries> {
    let warm = scorer.warmup();
    if traj.len() <= warm || traj.is_empty() {
        return Err(Error::InsufficientData(format!(
            "trajectory {} has {} steps; {} needs more than {warm}",
            traj.id,
            traj.len(),
            scorer.kind()
        )));
    }
    let mut stream = scorer.stream(traj.seed);
    let mut values = Vec::with_capacity(traj.len());
    for (s, a) in traj.states.iter().zip(&traj.actions) {
        if let Some(v) = stream.push(s, a)? {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite {} score on {}", scorer.kind(), traj.id)));
            }
            if values.is_empty() {
                values.resize(warm, v);
            }
            values.push(v);
        }
    }
    Ok(ScoreSeries { values, kind: scorer.kind(), traj_id: traj.id.clone(), label: traj.label })
}

fn every_state(trajs: &[Trajectory], stride: usize) -> Vec<&State> {
    trajs.iter().flat_map(|t| t.states.iter().step_by(stride.max(1))).collect()
}

/// Fits the flow on tokenizer latents of nominal trajectories, keeping every
/// `stride`-th frame.
pub fn fit_flow_on(trajs: &[Trajectory], tok: &Tokenizer, stride: usize, cfg: &FlowConfig) -> Result<Flow> {
    require_nominal(trajs, "flow training")?;
    let latents = every_state(trajs, stride)
        .into_iter()
        .map(|s| tok.encode(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f32]> = latents.iter().map(|z| z.as_slice()).collect();
    fit_flow(&rows, cfg)
}

pub fn fit_ae_on(trajs: &[Trajectory], stride: usize, cfg: &AeConfig) -> Result<Autoencoder> {
    require_nominal(trajs, "autoencoder training")?;
    fit_ae(&every_state(trajs, stride), cfg)
}

/// Safe set of autoencoder embeddings of nominal states.
pub fn build_safe_set_on(trajs: &[Trajectory], ae: &Autoencoder, n_safe: usize, seed: u64) -> Result<SafeSet> {
    require_nominal(trajs, "safe set")?;
    let emb = every_state(trajs, 1)
        .into_iter()
        .map(|s| ae.encode(s))
        .collect::<Result<Vec<_>>>()?;
    build_safe_set(&emb, n_safe, seed)
}

/// Fits PCA-K-means on nominal latents plus an equal number of failure
/// latents drawn evenly from `failures`.
pub fn fit_pca_kmeans_on(
    nominal: &[Trajectory],
    failures: &[Trajectory],
    tok: &Tokenizer,
    stride: usize,
    seed: u64,
) -> Result<PcaKmeans> {
    require_nominal(nominal, "PCA-K-means nominal")?;
    if failures.is_empty() || failures.iter().any(|t| t.label != Label::Failure) {
        return Err(Error::Label("PCA-K-means failure set must be non-empty and failure-only".into()));
    }
    let nom = every_state(nominal, stride);
    let fail_all = every_state(failures, 1);
    let step = (fail_all.len() as f64 / nom.len() as f64).max(1e-9);
    let fail: Vec<&State> = (0..nom.len().min(fail_all.len()))
        .map(|i| fail_all[((i as f64 * step) as usize).min(fail_all.len() - 1)])
        .collect();
    let mut latents = Vec::with_capacity(nom.len() + fail.len());
    let mut labels = Vec::with_capacity(nom.len() + fail.len());
    for (set, label) in [(&nom, Label::Nominal), (&fail, Label::Failure)] {
        for s in set.iter() {
            latents.push(tok.encode(&s.image)?);
            labels.push(label);
        }
    }
    let rows: Vec<&[f32]> = latents.iter().map(|z| z.as_slice()).collect();
    fit_pca_kmeans(&rows, &labels, DEFAULT_COMPONENTS, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajkit::testutil::random_trajectory;
    use crate::trajkit::Mode;
    use crate::worldmodel::WMConfig;
    use proptest::{prop_assert_eq, proptest};

    fn small_models() -> Models {
        let tok = Arc::new(Tokenizer::untrained(0));
        let cfg = WMConfig { history: 4, model_dim: 16, mlp_dim: 16, max_horizon: 4, ..Default::default() };
        Models {
            tokenizer: Some(tok),
            world_model: Some(Arc::new(WorldModel::new(cfg, 1).unwrap())),
            random_seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ScorerKind::ALL {
            assert_eq!(k.as_str().parse::<ScorerKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("mahalanobis".parse::<ScorerKind>().is_err());
    }

    #[test]
    fn uncertainty_closed_forms() {
        let g = |sigma: Vec<f32>| GaussianLatent { mu: vec![0.0; sigma.len()], sigma };
        assert_eq!(score_wm_uncertainty(&g(vec![1.0; 512])), 1.0);
        let half: Vec<f32> = (0..512).map(|i| if i < 256 { 2.0 } else { 0.5 }).collect();
        assert_eq!(score_wm_uncertainty(&g(half)), 1.25);
    }

    #[test]
    fn uncertainty_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y, z) = (8, 8, 8);
        let sigma: Vec<f32> = (0..x * y * z).map(|_| rng.random_range(0.01..3.0)).collect();
        let mut acc = 0.0f64;
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    acc += sigma[(i * y + j) * z + k] as f64;
                }
            }
        }
        let want = acc / (x * y * z) as f64;
        let got = score_wm_uncertainty(&GaussianLatent { mu: vec![0.0; 512], sigma });
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn pred_error_closed_forms() {
        let z: Vec<f32> = (0..512).map(|i| i as f32 * 0.01).collect();
        let g = |mu: Vec<f32>| GaussianLatent { sigma: vec![1.0; mu.len()], mu };
        assert_eq!(score_wm_pred_error(&g(z.clone()), &z).unwrap(), 0.0);
        let shifted: Vec<f32> = z.iter().map(|v| v + 3.0).collect();
        assert!((score_wm_pred_error(&g(shifted.clone()), &z).unwrap() - 9.0).abs() < 1e-4);
        assert_eq!(score_wm_pred_error(&g(shifted.clone()), &z).unwrap(), loss_latent_recon(&z, &shifted).unwrap());
        assert!(score_wm_pred_error(&g(vec![0.0; 3]), &z).is_err());
    }

    #[test]
    fn random_draws_are_uniform_and_seeded() {
        let s = Scorer::Random { seed: 11 };
        let st = State { image: vec![], proprio: vec![0.0, 0.0], t: 0 };
        let a = Action::zero(2);
        let draw = |seed| {
            let mut stream = s.stream(seed);
            (0..100_000).map(|_| stream.push(&st, &a).unwrap().unwrap()).collect::<Vec<f64>>()
        };
        let mut xs = draw(5);
        assert_eq!(xs, draw(5));
        assert_ne!(xs[..10], draw(6)[..10]);
        assert!(xs.iter().all(|&v| (0.0..1.0).contains(&v)));
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "{ks}");
    }

    #[test]
    fn unfitted_kinds_are_rejected() {
        let m = Models::default();
        for k in [ScorerKind::WmUncertainty, ScorerKind::LogpZO, ScorerKind::AeRecon, ScorerKind::AeSim, ScorerKind::PcaKmeans] {
            assert!(Scorer::build(k, &m).is_err(), "{k}");
        }
        assert!(Scorer::build(ScorerKind::Sparc, &m).is_ok());
    }

    #[test]
    fn series_cover_every_step_with_backfill() {
        let m = small_models();
        let traj = random_trajectory("t", 12, Mode::None, 2);
        for k in [ScorerKind::WmUncertainty, ScorerKind::WmPredError, ScorerKind::Sparc, ScorerKind::Random] {
            let s = Scorer::build(k, &m).unwrap();
            let a = score_trajectory(&s, &traj).unwrap();
            assert_eq!(a.values.len(), traj.len());
            assert_eq!(a, score_trajectory(&s, &traj).unwrap());
            if k.is_world_model() {
                assert!(a.values[..=4].iter().all(|&v| v == a.values[4]));
            }
        }
        let short = random_trajectory("s", 4, Mode::None, 3);
        let s = Scorer::build(ScorerKind::WmUncertainty, &m).unwrap();
        assert!(score_trajectory(&s, &short).is_err());
    }

    #[test]
    fn streaming_matches_direct_prediction() {
        let m = small_models();
        let traj = random_trajectory("t", 8, Mode::None, 4);
        let wm = m.world_model.clone().unwrap();
        let tok = m.tokenizer.clone().unwrap();
        let series = score_trajectory(&Scorer::build(ScorerKind::WmPredError, &m).unwrap(), &traj).unwrap();
        let steps: Vec<StepInput> = (2..6).map(|t| wm.step_input(&tok, &traj.states[t], &traj.actions[t]).unwrap()).collect();
        let (g, _) = wm.predict(&steps).unwrap();
        let want = score_wm_pred_error(&g, &tok.encode(&traj.states[6].image).unwrap()).unwrap();
        assert_eq!(series.values[6], want);
    }

    #[test]
    fn nominal_only_fitting_is_enforced() {
        let tok = Tokenizer::untrained(0);
        let bad = vec![random_trajectory("f", 5, Mode::ZeroFriction, 1)];
        assert!(matches!(fit_flow_on(&bad, &tok, 1, &FlowConfig::default()), Err(Error::Label(_))));
        assert!(matches!(fit_ae_on(&bad, 1, &AeConfig::default()), Err(Error::Label(_))));
        let nom = vec![random_trajectory("n", 5, Mode::None, 2)];
        assert!(matches!(fit_pca_kmeans_on(&nom, &nom, &tok, 1, 0), Err(Error::Label(_))));
        let pk = fit_pca_kmeans_on(&nom, &bad, &tok, 1, 0).unwrap();
        assert!(pk.score(&tok.encode(&nom[0].states[0].image).unwrap()).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn sparc_stream_matches_window(xs in proptest::collection::vec(-1.0f32..1.0, 2..140)) {
            let states: Vec<State> = xs.chunks(2).enumerate().map(|(t, c)| State {
                image: vec![], proprio: vec![c[0], *c.last().unwrap()], t,
            }).collect();
            let s = Scorer::Sparc;
            let mut stream = s.stream(0);
            for (t, st) in states.iter().enumerate() {
                let got = stream.push(st, &Action::zero(2)).unwrap().unwrap();
                let lo = (t + 1).saturating_sub(SPARC_WINDOW);
                let pos: Vec<[f64; 2]> = states[lo..=t].iter().map(|s| [s.proprio[0] as f64, s.proprio[1] as f64]).collect();
                prop_assert_eq!(got, score_sparc(&pos));
            }
        }
    }
}
