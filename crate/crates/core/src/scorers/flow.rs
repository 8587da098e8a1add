//! Affine-coupling normalizing flow over flattened latents.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nnkit::{init, load_checkpoint, save_checkpoint, Adam, AdamConfig, Bound, Graph, ParamSet, Tensor, Var};
use crate::par;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Training rows are subsampled to at most this many.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 4,
            hidden: 64,
            batch: 64,
            lr: 1e-3,
            steps_per_epoch: 50,
            max_epochs: 30,
            patience: 3,
            val_fraction: 0.1,
            max_samples: 4096,
            seed: 0,
        }
    }
}

/// Fitted flow: per-dimension standardization followed by coupling layers
/// with alternating even/odd masks. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    dim: usize,
    layers: usize,
    hidden: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
    params: ParamSet,
}

/// Dimensions that condition layer `l` and those it transforms.
fn split(dim: usize, l: usize) -> (Vec<usize>, Vec<usize>) {
    (0..dim).partition(|i| i % 2 == l % 2)
}

fn init_params(dim: usize, layers: usize, hidden: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for l in 0..layers {
        let (a, b) = split(dim, l);
        p.insert(format!("c{l}.w1"), init::lecun(&mut rng, a.len(), hidden));
        p.insert(format!("c{l}.b1"), Tensor::zeros(&[hidden]));
        // zero output layer: every coupling starts as the identity
        p.insert(format!("c{l}.w2"), Tensor::zeros(&[hidden, 2 * b.len()]));
        p.insert(format!("c{l}.b2"), Tensor::zeros(&[2 * b.len()]));
    }
    p
}

/// Scale and shift of one coupling for a single conditioning vector.
fn conditioner(p: &ParamSet, l: usize, xa: &[f64], hidden: usize, nb: usize) -> (Vec<f64>, Vec<f64>) {
    let get = |n: &str| p.get(&format!("c{l}.{n}")).expect("coupling parameter").data();
    let (w1, b1, w2, b2) = (get("w1"), get("b1"), get("w2"), get("b2"));
    let h: Vec<f64> = (0..hidden)
        .map(|j| {
            let s: f64 = xa.iter().enumerate().map(|(i, &x)| x * w1[i * hidden + j] as f64).sum();
            (s + b1[j] as f64).tanh()
        })
        .collect();
    let out: Vec<f64> = (0..2 * nb)
        .map(|k| h.iter().enumerate().map(|(j, &v)| v * w2[j * 2 * nb + k] as f64).sum::<f64>() + b2[k] as f64)
        .collect();
    let s = out[..nb].iter().map(|v| v.tanh()).collect();
    (s, out[nb..].to_vec())
}

impl Flow {
    /// Identity flow: no standardization, zero-initialized couplings.
    pub fn identity(dim: usize, layers: usize, hidden: usize) -> Self {
        Flow {
            dim,
            layers,
            hidden,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            params: init_params(dim, layers, hidden, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn check(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::Shape { expected: vec![self.dim], actual: vec![z.len()] });
        }
        Ok(())
    }

    /// `f(z)` and `log|det df/dz|`.
    pub fn forward(&self, z: &[f32]) -> Result<(Vec<f64>, f64)> {
        self.check(z)?;
        let mut x: Vec<f64> = z
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) as f64 / s as f64)
            .collect();
        let mut logdet: f64 = -self.std.iter().map(|&s| (s as f64).ln()).sum::<f64>();
        for l in 0..self.layers {
            let (a, b) = split(self.dim, l);
            let xa: Vec<f64> = a.iter().map(|&i| x[i]).collect();
            let (s, t) = conditioner(&self.params, l, &xa, self.hidden, b.len());
            for (k, &i) in b.iter().enumerate() {
                x[i] = x[i] * s[k].exp() + t[k];
                logdet += s[k];
            }
        }
        if !logdet.is_finite() {
            return Err(Error::Numeric("non-finite flow log-determinant".into()));
        }
        Ok((x, logdet))
    }

    /// `f^-1(y)`.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f32>> {
        if y.len() != self.dim {
            return Err(Error::Shape { expected: vec![self.dim], actual: vec![y.len()] });
        }
        let mut x = y.to_vec();
        for l in (0..self.layers).rev() {
            let (a, b) = split(self.dim, l);
            let xa: Vec<f64> = a.iter().map(|&i| x[i]).collect();
            let (s, t) = conditioner(&self.params, l, &xa, self.hidden, b.len());
            for (k, &i) in b.iter().enumerate() {
                x[i] = (x[i] - t[k]) * (-s[k]).exp();
            }
        }
        Ok(x
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v * s as f64 + m as f64) as f32)
            .collect())
    }

    /// Negative log-likelihood `-log p(z)` under the flow.
    pub fn score(&self, z: &[f32]) -> Result<f64> {
        let (y, logdet) = self.forward(z)?;
        let sq: f64 = y.iter().map(|v| v * v).sum();
        Ok(0.5 * sq + 0.5 * self.dim as f64 * LN_2PI - logdet)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = self.params.clone();
        p.insert("norm.mean", Tensor::new(vec![self.dim], self.mean.clone())?);
        p.insert("norm.std", Tensor::new(vec![self.dim], self.std.clone())?);
        let meta = json!({"kind": "logpzo", "dim": self.dim, "layers": self.layers, "hidden": self.hidden});
        save_checkpoint(&p, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut p, meta) = load_checkpoint(path)?;
        let field = |k: &str| meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let bad = |reason: &str| Error::Format { path: path.into(), reason: reason.into() };
        if meta.get("kind").and_then(|v| v.as_str()) != Some("logpzo") {
            return Err(bad("checkpoint is not a flow"));
        }
        let (dim, layers, hidden) = match (field("dim"), field("layers"), field("hidden")) {
            (Some(d), Some(l), Some(h)) => (d, l, h),
            _ => return Err(bad("flow meta lacks dim/layers/hidden")),
        };
        let mean = p.remove("norm.mean").ok_or_else(|| bad("missing norm.mean"))?.into_data();
        let std = p.remove("norm.std").ok_or_else(|| bad("missing norm.std"))?.into_data();
        init_params(dim, layers, hidden, 0).check_same_layout(&p)?;
        Ok(Flow { dim, layers, hidden, mean, std, params: p })
    }
}

/// Graph version of the coupling stack on a standardized batch `[n, dim]`;
/// returns the mean negative log-likelihood.
fn batch_nll(g: &mut Graph<f32>, p: &Bound, x: Var, dim: usize, layers: usize) -> Var {
    let n = g.shape(x)[0];
    let mut x = x;
    let mut logdet: Option<Var> = None;
    for l in 0..layers {
        let (a, b) = split(dim, l);
        let (na, nb) = (a.len(), b.len());
        let cols = |g: &mut Graph<f32>, v: Var, width: usize, pick: &[usize]| {
            let idx: Arc<[usize]> = (0..n).flat_map(|r| pick.iter().map(move |&c| r * width + c)).collect();
            g.gather(v, idx, &[n, pick.len()])
        };
        let xa = cols(g, x, dim, &a);
        let xb = cols(g, x, dim, &b);
        let w = |name: &str| p.var(&format!("c{l}.{name}"));
        let h = g.linear(xa, w("w1"), w("b1"));
        let h = g.tanh(h);
        let o = g.linear(h, w("w2"), w("b2"));
        let first: Vec<usize> = (0..nb).collect();
        let second: Vec<usize> = (nb..2 * nb).collect();
        let s_raw = cols(g, o, 2 * nb, &first);
        let s = g.tanh(s_raw);
        let t = cols(g, o, 2 * nb, &second);
        let es = g.exp(s);
        let scaled = g.mul(xb, es);
        let yb = g.add(scaled, t);
        let ca = g.reshape(xa, &[n * na, 1]);
        let cb = g.reshape(yb, &[n * nb, 1]);
        let stacked = g.concat(&[ca, cb]);
        let mut pos = vec![0usize; dim];
        for (k, &i) in a.iter().enumerate() {
            pos[i] = k;
        }
        for (k, &i) in b.iter().enumerate() {
            pos[i] = k;
        }
        let is_a: Vec<bool> = (0..dim).map(|i| i % 2 == l % 2).collect();
        let idx: Arc<[usize]> = (0..n)
            .flat_map(|r| {
                let (pos, is_a) = (&pos, &is_a);
                (0..dim).map(move |i| if is_a[i] { r * na + pos[i] } else { n * na + r * nb + pos[i] })
            })
            .collect();
        x = g.gather(stacked, idx, &[n, dim]);
        let ls = g.sum(s);
        logdet = Some(match logdet {
            None => ls,
            Some(acc) => g.add(acc, ls),
        });
    }
    let sq = g.square(x);
    let sq = g.sum(sq);
    let half = g.scale(sq, 0.5);
    let nll = match logdet {
        Some(ld) => g.sub(half, ld),
        None => half,
    };
    g.scale(nll, 1.0 / n as f64)
}

/// Fits a flow to `rows` by maximum likelihood with early stopping on a
/// held-out fraction.
pub fn fit_flow(rows: &[&[f32]], cfg: &FlowConfig) -> Result<Flow> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.len() < 4 || dim < 2 {
        return Err(Error::InsufficientData(format!(
            "flow needs at least 4 rows of dimension >= 2, got {} of {dim}",
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape { expected: vec![dim], actual: vec![r.len()] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(cfg.max_samples.max(4));
    let n_val = ((order.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, order.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for &i in train_idx {
        for (m, &v) in mean.iter_mut().zip(rows[i]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in train_idx {
        for ((s, &v), m) in var.iter_mut().zip(rows[i]).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f32> = var.iter().map(|s| ((s / train_idx.len() as f64).sqrt().max(1e-3)) as f32).collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let standard: Vec<f32> = train_idx
        .iter()
        .flat_map(|&i| rows[i].iter().zip(mean.iter().zip(&std)).map(|(&v, (&m, &s))| (v - m) / s))
        .collect();

    let mut flow = Flow { dim, layers: cfg.layers, hidden: cfg.hidden, mean, std, params: init_params(dim, cfg.layers, cfg.hidden, cfg.seed) };
    let val_nll = |f: &Flow| -> Result<f64> {
        let scores = par::map(val_idx, |&i| f.score(rows[i]));
        let mut sum = 0.0;
        for s in scores {
            sum += s?;
        }
        Ok(sum / val_idx.len() as f64)
    };
    let mut adam = Adam::new(&flow.params, AdamConfig::with_lr(cfg.lr));
    let mut best = (val_nll(&flow)?, flow.params.clone());
    let mut stale = 0;
    let batch = cfg.batch.min(train_idx.len()).max(1);
    for _ in 0..cfg.max_epochs {
        for _ in 0..cfg.steps_per_epoch {
            let data: Vec<f32> = (0..batch)
                .flat_map(|_| {
                    let r = rand::Rng::random_range(&mut rng, 0..train_idx.len());
                    standard[r * dim..(r + 1) * dim].iter().copied()
                })
                .collect();
            let mut g = Graph::<f32>::new();
            let p = g.bind(&flow.params);
            let x = g.constant(Tensor::new(vec![batch, dim], data)?);
            let loss = batch_nll(&mut g, &p, x, dim, cfg.layers);
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numeric("non-finite flow training loss".into()));
            }
            let grads = g.backward(loss).to_params(&g, &p);
            adam.step(&mut flow.params, &grads)?;
        }
        let v = val_nll(&flow)?;
        if v < best.0 {
            best = (v, flow.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    flow.params = best.1;
    Ok(flow)
}
