//! State autoencoder for the reconstruction and safe-set similarity scores.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nnkit::{init, load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, ParamSet, Tensor};
use crate::tokenizer::cosine_lr;
use crate::trajkit::State;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { hidden: 64, bottleneck: 32, batch: 32, steps: 1500, lr: 3e-3, seed: 0 }
    }
}

/// Concatenated image and proprio vector.
pub fn state_vector(s: &State) -> Vec<f32> {
    let mut v = Vec::with_capacity(s.image.len() + s.proprio.len());
    v.extend_from_slice(&s.image);
    v.extend_from_slice(&s.proprio);
    v
}

/// `input -> tanh(hidden) -> bottleneck -> tanh(hidden) -> input`.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    input: usize,
    hidden: usize,
    bottleneck: usize,
    params: ParamSet,
}

fn init_params(input: usize, hidden: usize, bottleneck: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, i, o) in [("e1", input, hidden), ("e2", hidden, bottleneck), ("d1", bottleneck, hidden), ("d2", hidden, input)] {
        p.insert(format!("{name}.w"), init::lecun(&mut rng, i, o));
        p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
    }
    p
}

fn dense(p: &ParamSet, name: &str, x: &[f32], act: bool) -> Vec<f32> {
    let w = p.get(&format!("{name}.w")).expect("layer weight");
    let b = p.get(&format!("{name}.b")).expect("layer bias").data();
    let o = b.len();
    let mut out = b.to_vec();
    for (row, &xi) in w.data().chunks_exact(o).zip(x) {
        if xi != 0.0 {
            for (acc, &wv) in out.iter_mut().zip(row) {
                *acc += xi * wv;
            }
        }
    }
    if act {
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
    out
}

impl Autoencoder {
    pub fn input_len(&self) -> usize {
        self.input
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    fn check(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input {
            return Err(Error::Shape { expected: vec![self.input], actual: vec![x.len()] });
        }
        Ok(())
    }

    pub fn encode_vec(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check(x)?;
        let h = dense(&self.params, "e1", x, true);
        Ok(dense(&self.params, "e2", &h, false))
    }

    pub fn decode_vec(&self, z: &[f32]) -> Vec<f32> {
        let h = dense(&self.params, "d1", z, true);
        dense(&self.params, "d2", &h, false)
    }

    pub fn encode(&self, s: &State) -> Result<Vec<f32>> {
        self.encode_vec(&state_vector(s))
    }

    /// Squared L2 norm of the reconstruction residual.
    pub fn recon_error(&self, s: &State) -> Result<f64> {
        let x = state_vector(s);
        let r = self.decode_vec(&self.encode_vec(&x)?);
        Ok(x.iter().zip(&r).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({"kind": "ae_recon", "input": self.input, "hidden": self.hidden, "bottleneck": self.bottleneck});
        save_checkpoint(&self.params, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let field = |k: &str| meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let bad = |reason: &str| Error::Format { path: path.into(), reason: reason.into() };
        if meta.get("kind").and_then(|v| v.as_str()) != Some("ae_recon") {
            return Err(bad("checkpoint is not an autoencoder"));
        }
        let (input, hidden, bottleneck) = match (field("input"), field("hidden"), field("bottleneck")) {
            (Some(i), Some(h), Some(b)) => (i, h, b),
            _ => return Err(bad("autoencoder meta lacks input/hidden/bottleneck")),
        };
        init_params(input, hidden, bottleneck, 0).check_same_layout(&params)?;
        Ok(Autoencoder { input, hidden, bottleneck, params })
    }
}

/// Fits the autoencoder to state vectors by mean squared reconstruction error.
pub fn fit_ae(states: &[&State], cfg: &AeConfig) -> Result<Autoencoder> {
    if states.len() < 2 {
        return Err(Error::InsufficientData(format!("autoencoder needs at least 2 states, got {}", states.len())));
    }
    let rows: Vec<Vec<f32>> = states.iter().map(|s| state_vector(s)).collect();
    let input = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != input) {
        return Err(Error::Shape { expected: vec![input], actual: vec![r.len()] });
    }
    let mut params = init_params(input, cfg.hidden, cfg.bottleneck, cfg.seed);
    let mut adam = Adam::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae);
    for step in 0..cfg.steps {
        adam.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
        let data: Vec<f32> = (0..cfg.batch).flat_map(|_| rows[rng.random_range(0..rows.len())].iter().copied()).collect();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&params);
        let x = g.constant(Tensor::new(vec![cfg.batch, input], data)?);
        let mut h = x;
        for (name, act) in [("e1", true), ("e2", false), ("d1", true), ("d2", false)] {
            h = g.linear(h, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
            if act {
                h = g.tanh(h);
            }
        }
        let d = g.sub(h, x);
        let sq = g.square(d);
        let loss = g.mean(sq);
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numeric("non-finite autoencoder loss".into()));
        }
        let grads = g.backward(loss).to_params(&g, &p);
        adam.step(&mut params, &grads)?;
    }
    Ok(Autoencoder { input, hidden: cfg.hidden, bottleneck: cfg.bottleneck, params })
}

/// Stored nominal embeddings for nearest-neighbour similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeSet {
    dim: usize,
    rows: Vec<f32>,
}

fn sq_dist_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

impl SafeSet {
    pub fn new(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(Error::InsufficientData("safe set must hold at least one embedding".into()));
        }
        Ok(SafeSet { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Smallest element-mean squared difference to any stored embedding.
    ///
    /// Exact: a vectorised single-precision pass finds every row whose
    /// distance can be within rounding of the minimum, and only those are
    /// recomputed in double precision.
    pub fn min_mse(&self, z: &[f32]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::Shape { expected: vec![self.dim], actual: vec![z.len()] });
        }
        let coarse: Vec<f32> = self.rows.chunks_exact(self.dim).map(|r| sq_dist_f32(r, z)).collect();
        let lo = coarse.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        // bound on the relative error of a non-negative f32 sum of squares
        let eps = 2.0 * (self.dim as f64 + 2.0) * f32::EPSILON as f64;
        // plus absolute slack for squares that underflow
        let tiny = self.dim as f64 * f32::MIN_POSITIVE as f64;
        let cutoff = lo * (1.0 + eps) / (1.0 - eps) + 2.0 * tiny;
        let mut best = f64::INFINITY;
        for (r, &c) in self.rows.chunks_exact(self.dim).zip(&coarse) {
            if best == 0.0 {
                break;
            }
            // rows that cannot beat the current best, or the cutoff, are skipped
            if c as f64 > cutoff || c as f64 * (1.0 - eps) - tiny >= best {
                continue;
            }
            best = best.min(r.iter().zip(z).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>());
        }
        Ok(best / self.dim as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = ParamSet::new();
        p.insert("safe", Tensor::new(vec![self.len(), self.dim], self.rows.clone())?);
        save_checkpoint(&p, &json!({"kind": "ae_sim"}), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("ae_sim") {
            return Err(Error::Format { path: path.into(), reason: "checkpoint is not a safe set".into() });
        }
        let t = p.require("safe")?;
        SafeSet::new(t.shape()[1], t.data().to_vec())
    }
}

/// Uniform subsample (without replacement, original order kept) of at most
/// `n_safe` embeddings.
pub fn build_safe_set(embeddings: &[Vec<f32>], n_safe: usize, seed: u64) -> Result<SafeSet> {
    let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
    if embeddings.is_empty() || n_safe == 0 {
        return Err(Error::InsufficientData("safe set needs at least one embedding".into()));
    }
    let mut keep: Vec<usize> = if embeddings.len() > n_safe {
        sample(&mut ChaCha8Rng::seed_from_u64(seed), embeddings.len(), n_safe).into_vec()
    } else {
        (0..embeddings.len()).collect()
    };
    keep.sort_unstable();
    let mut rows = Vec::with_capacity(keep.len() * dim);
    for i in keep {
        if embeddings[i].len() != dim {
            return Err(Error::Shape { expected: vec![dim], actual: vec![embeddings[i].len()] });
        }
        rows.extend_from_slice(&embeddings[i]);
    }
    SafeSet::new(dim, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajkit::testutil::random_trajectory;
    use crate::trajkit::Mode;

    #[test]
    fn safe_set_cases() {
        let s = build_safe_set(&[vec![0.0; 4]], 10, 0).unwrap();
        assert_eq!(s.min_mse(&[1.0; 4]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb: Vec<Vec<f32>> = (0..50).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = build_safe_set(&emb, 100, 0).unwrap();
        assert_eq!(s.min_mse(&emb[17]).unwrap(), 0.0);
        for _ in 0..20 {
            let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let brute = emb
                .iter()
                .map(|e| e.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 6.0)
                .fold(f64::INFINITY, f64::min);
            assert!((s.min_mse(&q).unwrap() - brute).abs() < 1e-12);
        }
        assert!(build_safe_set(&[], 10, 0).is_err());
        assert!(s.min_mse(&[0.0; 5]).is_err());
    }

    #[test]
    fn near_ties_match_double_precision_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 37;
        let base: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        // many rows within a few ulps of each other
        let rows: Vec<f32> = (0..300)
            .flat_map(|_| base.iter().map(|&v| v + rng.random_range(-3e-7f32..3e-7)).collect::<Vec<_>>())
            .collect();
        let s = SafeSet::new(dim, rows.clone()).unwrap();
        for _ in 0..50 {
            let q: Vec<f32> = base.iter().map(|&v| v + rng.random_range(-1e-3f32..1e-3)).collect();
            let brute = rows
                .chunks_exact(dim)
                .map(|r| r.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                / dim as f64;
            assert_eq!(s.min_mse(&q).unwrap(), brute);
        }
    }

    #[test]
    fn subsampling_is_seeded_and_bounded() {
        let emb: Vec<Vec<f32>> = (0..100).map(|i| vec![i as f32]).collect();
        let a = build_safe_set(&emb, 10, 4).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, build_safe_set(&emb, 10, 4).unwrap());
        assert_ne!(a, build_safe_set(&emb, 10, 5).unwrap());
    }

    #[test]
    fn fitted_autoencoder_reconstructs_and_is_pure() {
        let trajs: Vec<_> = (0..4).map(|i| random_trajectory(&format!("a{i}"), 20, Mode::None, i)).collect();
        let states: Vec<&State> = trajs.iter().flat_map(|t| &t.states).collect();
        let cfg = AeConfig { steps: 300, ..Default::default() };
        let ae = fit_ae(&states, &cfg).unwrap();
        let untrained = Autoencoder { input: ae.input, hidden: 64, bottleneck: 32, params: init_params(ae.input, 64, 32, 0) };
        let mean = |m: &Autoencoder| states.iter().map(|s| m.recon_error(s).unwrap()).sum::<f64>() / states.len() as f64;
        assert!(mean(&ae) < 0.5 * mean(&untrained));
        assert_eq!(ae.recon_error(states[3]).unwrap(), ae.recon_error(states[3]).unwrap());
        assert_eq!(ae.encode(states[0]).unwrap().len(), 32);
    }

    #[test]
    fn exact_reconstruction_scores_zero() {
        let mut p = ParamSet::new();
        let eye = |n: usize| Tensor::new(vec![n, n], (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        for name in ["e1", "e2", "d1", "d2"] {
            p.insert(format!("{name}.w"), eye(2));
            p.insert(format!("{name}.b"), Tensor::zeros(&[2]));
        }
        let ae = Autoencoder { input: 2, hidden: 2, bottleneck: 2, params: p };
        let s = State { image: vec![], proprio: vec![0.0, 0.0], t: 0 };
        assert_eq!(ae.recon_error(&s).unwrap(), 0.0);
    }

    #[test]
    fn checkpoints_round_trip() {
        let ae = Autoencoder { input: 10, hidden: 4, bottleneck: 2, params: init_params(10, 4, 2, 3) };
        let dir = tempfile::tempdir().unwrap();
        ae.save(&dir.path().join("ae")).unwrap();
        assert_eq!(Autoencoder::load(&dir.path().join("ae")).unwrap(), ae);
        let s = build_safe_set(&[vec![1.0, 2.0], vec![3.0, 4.0]], 5, 0).unwrap();
        s.save(&dir.path().join("safe")).unwrap();
        assert_eq!(SafeSet::load(&dir.path().join("safe")).unwrap(), s);
    }
}
