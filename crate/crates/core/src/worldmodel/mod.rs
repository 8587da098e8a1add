//! History-conditioned Gaussian world model over tokenizer latents.
//!
//! Each history step contributes three tokens (visual, proprio, action) to a
//! small causal transformer. The feature at the last position parameterizes
//! a diagonal Gaussian over the next latent map and a point estimate of the
//! next proprio state.

mod loss;
mod model;
mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use loss::{
    loss_entropy, loss_kl, loss_latent_recon, loss_nll, loss_recon, mse, total_loss,
    LossComponents, LossWeights, NllVariant,
};
pub use model::{StepInput, WorldModel};
pub use model::pool_latent;
pub use train::{evaluate_loss, horizon_at, loss_grad_check, train_wm, train_wm_on, EpochLog, TrainReport, WmData};

use crate::error::{Error, Result};
use crate::nnkit::{load_checkpoint, save_checkpoint};

pub const SIGMA_FLOOR: f32 = 1e-4;

/// How a frame's latent map becomes the per-timestep visual token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualToken {
    /// Channel means over the spatial grid.
    #[default]
    MeanPool,
    /// The whole latent map, projected.
    Flatten,
}

impl VisualToken {
    pub fn width(self) -> usize {
        match self {
            VisualToken::MeanPool => crate::tokenizer::LATENT_DIM,
            VisualToken::Flatten => crate::tokenizer::LATENT_LEN,
        }
    }

    pub fn from_latent(self, latent: &[f32]) -> Vec<f32> {
        match self {
            VisualToken::MeanPool => pool_latent(latent),
            VisualToken::Flatten => latent.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WMConfig {
    /// History length `H`.
    pub history: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub epochs_per_stage: usize,
    pub max_horizon: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated once the final
    /// horizon is reached.
    pub patience: usize,
    pub visual_token: VisualToken,
    /// Predict the mean as an offset from the newest latent map.
    pub residual: bool,
    pub weights: LossWeights,
    pub nll: NllVariant,
    pub lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub val_windows: usize,
    pub grad_clip: f64,
    /// Actions are multiplied by this before projection.
    pub action_scale: f32,
    pub seed: u64,
}

impl Default for WMConfig {
    fn default() -> Self {
        WMConfig {
            history: 8,
            model_dim: 32,
            layers: 2,
            heads: 2,
            mlp_dim: 64,
            epochs_per_stage: 16,
            max_horizon: 32,
            max_epochs: 96,
            patience: 8,
            visual_token: VisualToken::MeanPool,
            residual: true,
            weights: LossWeights::default(),
            nll: NllVariant::GroundTruth,
            lr: 2e-3,
            batch_size: 16,
            batches_per_epoch: 8,
            val_windows: 32,
            grad_clip: 1.0,
            action_scale: 40.0,
            seed: 0,
        }
    }
}

impl WMConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.history == 0 || self.model_dim == 0 || self.layers == 0 || self.mlp_dim == 0 {
            return bad("history, model_dim, layers and mlp_dim must be positive");
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if !self.max_horizon.is_power_of_two() {
            return bad("max_horizon must be a power of two");
        }
        if self.epochs_per_stage == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 {
            return bad("epochs_per_stage, batch_size and batches_per_epoch must be positive");
        }
        if [w.recon, w.zrecon, w.kl, w.nll].iter().any(|&x| !(x > 0.0)) {
            return bad("loss weights must be positive");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over a latent map.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl GaussianLatent {
    /// Mean predicted standard deviation.
    pub fn mean_sigma(&self) -> f64 {
        self.sigma.iter().map(|&s| s as f64).sum::<f64>() / self.sigma.len() as f64
    }
}

/// Reparameterized draw `mu + sigma * eps`.
pub fn sample_latent<R: Rng>(g: &GaussianLatent, rng: &mut R) -> Vec<f32> {
    g.mu
        .iter()
        .zip(&g.sigma)
        .map(|(&m, &s)| m + s * rng.sample::<f32, _>(StandardNormal))
        .collect()
}

impl WorldModel {
    pub fn meta(&self) -> Value {
        json!({"kind": "worldmodel", "config": self.config()})
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self.params(), &self.meta(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(Value::as_str) != Some("worldmodel") {
            return Err(Error::Format {
                path: path.into(),
                reason: "checkpoint is not a world model".into(),
            });
        }
        let cfg: WMConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))?;
        WorldModel::from_params(cfg, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn floor_sigma_sample_is_mean() {
        let g = GaussianLatent { mu: vec![0.3; 64], sigma: vec![SIGMA_FLOOR; 64] };
        let z = sample_latent(&g, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(z.iter().all(|&v| (v - 0.3).abs() < 4e-4 + 1e-7));
    }

    #[test]
    fn sample_mean_converges() {
        let mu = vec![0.5, -1.0, 2.0];
        let sigma = vec![1.0, 0.3, 2.0];
        let g = GaussianLatent { mu: mu.clone(), sigma: sigma.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(sample_latent(&g, &mut rng)) {
                *a += v as f64;
            }
        }
        for i in 0..3 {
            let m = acc[i] / n as f64;
            assert!((m - mu[i] as f64).abs() < 3.0 * sigma[i] as f64 / (n as f64).sqrt());
        }
    }

    #[test]
    fn fixed_seed_same_sample() {
        let g = GaussianLatent { mu: vec![0.0; 8], sigma: vec![1.0; 8] };
        let a = sample_latent(&g, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_latent(&g, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(WMConfig::default().validate().is_ok());
        assert!(WMConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(WMConfig { max_horizon: 24, ..Default::default() }.validate().is_err());
        let mut c = WMConfig::default();
        c.weights.kl = 0.0;
        assert!(c.validate().is_err());
    }
}
