//! Frozen patch-wise linear autoencoder mapping 32x32 RGB frames to an 8x8
//! grid of 8-dim latents and back.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nnkit::{
    init, load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, Graph, ParamSet, Scalar,
    Tensor, Var,
};
use crate::trajkit::{IMG_C, IMG_H, IMG_LEN, IMG_W};

pub const PATCH: usize = 4;
pub const GRID: usize = IMG_H / PATCH;
pub const CELLS: usize = GRID * GRID;
pub const PATCH_LEN: usize = PATCH * PATCH * IMG_C;
pub const LATENT_DIM: usize = 8;
/// Flattened latent map length, laid out `[gy, gx, z]`.
pub const LATENT_LEN: usize = CELLS * LATENT_DIM;
pub const MIN_FRAMES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            steps: 2000,
            batch_frames: 16,
            lr: 2e-2,
            seed: 0,
        }
    }
}

/// Pixel index of every patch element, patch-major: entry `c * PATCH_LEN + j`
/// is element `j` (row, column, channel within the patch) of grid cell `c`.
pub fn patch_index() -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(IMG_LEN);
    for gy in 0..GRID {
        for gx in 0..GRID {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let base = ((gy * PATCH + dy) * IMG_W + gx * PATCH + dx) * IMG_C;
                    idx.extend(base..base + IMG_C);
                }
            }
        }
    }
    idx.into()
}

pub fn patchify(image: &[f32]) -> Vec<f32> {
    patch_index().iter().map(|&i| image[i]).collect()
}

pub fn unpatchify(patches: &[f32]) -> Vec<f32> {
    let mut img = vec![0.0; IMG_LEN];
    for (p, &i) in patch_index().iter().enumerate() {
        img[i] = patches[p];
    }
    img
}

fn init_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("enc.w", init::lecun(&mut rng, PATCH_LEN, LATENT_DIM));
    p.insert("enc.b", Tensor::zeros(&[LATENT_DIM]));
    p.insert("dec.w", init::lecun(&mut rng, LATENT_DIM, PATCH_LEN));
    p.insert("dec.b", Tensor::zeros(&[PATCH_LEN]));
    p
}

/// Patch encoder on a graph: `[n, PATCH_LEN] -> [n, LATENT_DIM]`.
pub fn encode_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, patches: Var) -> Var {
    g.linear(patches, p.var("enc.w"), p.var("enc.b"))
}

/// Patch decoder on a graph: `[n, LATENT_DIM] -> [n, PATCH_LEN]`, unclamped.
pub fn decode_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, latents: Var) -> Var {
    g.linear(latents, p.var("dec.w"), p.var("dec.b"))
}

fn shape_check(what: usize, expected: usize) -> Result<()> {
    if what != expected {
        return Err(Error::Shape {
            expected: vec![expected],
            actual: vec![what],
        });
    }
    Ok(())
}

/// Trained, immutable tokenizer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    params: ParamSet,
}

impl Tokenizer {
    pub fn from_params(params: ParamSet) -> Result<Self> {
        for (name, shape) in [
            ("enc.w", [PATCH_LEN, LATENT_DIM].as_slice()),
            ("enc.b", &[LATENT_DIM]),
            ("dec.w", &[LATENT_DIM, PATCH_LEN]),
            ("dec.b", &[PATCH_LEN]),
        ] {
            let t = params.require(name)?;
            if t.shape() != shape {
                return Err(Error::Shape {
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if params.len() != 4 {
            return Err(Error::Config("unexpected tensors in tokenizer parameters".into()));
        }
        Ok(Tokenizer { params })
    }

    /// Randomly initialized tokenizer, useful as a fixture.
    pub fn untrained(seed: u64) -> Self {
        Tokenizer { params: init_params(seed) }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn affine(x: &[f32], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f32> {
        let (k, m) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0f32; rows * m];
        for r in 0..rows {
            let o = &mut out[r * m..(r + 1) * m];
            o.copy_from_slice(b.data());
            for i in 0..k {
                let xv = x[r * k + i];
                for (ov, &wv) in o.iter_mut().zip(&w.data()[i * m..(i + 1) * m]) {
                    *ov += xv * wv;
                }
            }
        }
        out
    }

    /// Encodes patch rows `[CELLS, PATCH_LEN]` into a latent map.
    pub fn encode_patches(&self, patches: &[f32]) -> Vec<f32> {
        let p = &self.params;
        Self::affine(patches, p.get("enc.w").unwrap(), p.get("enc.b").unwrap(), patches.len() / PATCH_LEN)
    }

    /// Decodes a latent map into patch rows, unclamped.
    pub fn decode_patches(&self, latent: &[f32]) -> Vec<f32> {
        let p = &self.params;
        Self::affine(latent, p.get("dec.w").unwrap(), p.get("dec.b").unwrap(), latent.len() / LATENT_DIM)
    }

    pub fn encode(&self, image: &[f32]) -> Result<Vec<f32>> {
        shape_check(image.len(), IMG_LEN)?;
        Ok(self.encode_patches(&patchify(image)))
    }

    /// Decodes a latent map into an image clamped to `[0, 1]`.
    pub fn decode(&self, latent: &[f32]) -> Result<Vec<f32>> {
        shape_check(latent.len(), LATENT_LEN)?;
        let mut img = unpatchify(&self.decode_patches(latent));
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(img)
    }

    /// Per-element reconstruction MSE averaged over `frames`.
    pub fn reconstruction_mse(&self, frames: &[&[f32]]) -> Result<f64> {
        let mut total = 0.0;
        for f in frames {
            let r = self.decode(&self.encode(f)?)?;
            total += f.iter().zip(&r).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        Ok(total / (frames.len() * IMG_LEN) as f64)
    }

    pub fn meta() -> Value {
        json!({"kind": "tokenizer", "latent_shape": [GRID, GRID, LATENT_DIM], "patch": PATCH})
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, &Self::meta(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(Value::as_str) != Some("tokenizer") {
            return Err(Error::Format {
                path: path.into(),
                reason: "checkpoint is not a tokenizer".into(),
            });
        }
        Self::from_params(params)
    }
}

/// Cosine decay from `base` to a tenth of it over `total` steps.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Fits the patch autoencoder to `frames` by minimizing pixel MSE.
pub fn train_tokenizer(frames: &[&[f32]], cfg: &TokenizerConfig) -> Result<Tokenizer> {
    if frames.len() < MIN_FRAMES {
        return Err(Error::InsufficientData(format!(
            "tokenizer needs at least {MIN_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    for f in frames {
        shape_check(f.len(), IMG_LEN)?;
    }
    let mut params = init_params(cfg.seed);
    let mut adam = Adam::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x746f6b);
    let rows = cfg.batch_frames * CELLS;
    for step in 0..cfg.steps {
        adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut batch = Vec::with_capacity(rows * PATCH_LEN);
        for _ in 0..cfg.batch_frames {
            batch.extend(patchify(frames[rng.random_range(0..frames.len())]));
        }
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let x = g.constant(Tensor::new(vec![rows, PATCH_LEN], batch)?);
        let z = encode_graph(&mut g, &bound, x);
        let y = decode_graph(&mut g, &bound, z);
        let diff = g.sub(y, x);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("tokenizer loss non-finite at step {step}")));
        }
        let grads = g.backward(loss).to_params(&g, &bound);
        adam.step(&mut params, &grads)?;
    }
    Tokenizer::from_params(params)
}
