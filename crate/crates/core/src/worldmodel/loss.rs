//! Training objective: pixel/proprio reconstruction, latent reconstruction,
//! KL to the unit Gaussian and Gaussian negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{Graph, Scalar, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub zrecon: f64,
    pub kl: f64,
    pub nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0 / 10.0,
            zrecon: 2.0,
            kl: 1.0 / 20.0,
            nll: 1.0,
        }
    }
}

/// Which quantity the likelihood term measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllVariant {
    /// Negative log-density of the ground-truth latent under the prediction.
    #[default]
    GroundTruth,
    /// Expected negative log-density of the model's own samples, i.e. the
    /// entropy of the predicted Gaussian.
    Entropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub zrecon: f64,
    pub kl: f64,
    pub nll: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.recon * c.recon + w.zrecon * c.zrecon + w.kl * c.kl + w.nll * c.nll
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            expected: vec![a],
            actual: vec![b],
        });
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a.len(), b.len())?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// View-averaged pixel MSE plus half the proprio MSE.
pub fn loss_recon(
    pred_views: &[&[f32]],
    true_views: &[&[f32]],
    pred_proprio: &[f32],
    true_proprio: &[f32],
) -> Result<f64> {
    same_len(true_views.len(), pred_views.len())?;
    if pred_views.is_empty() {
        return Err(Error::Config("reconstruction loss needs at least one view".into()));
    }
    let mut views = 0.0;
    for (p, t) in pred_views.iter().zip(true_views) {
        views += mse(t, p)?;
    }
    Ok(views / pred_views.len() as f64 + 0.5 * mse(true_proprio, pred_proprio)?)
}

pub fn loss_latent_recon(z_true: &[f32], z_pred: &[f32]) -> Result<f64> {
    mse(z_true, z_pred)
}

/// Element-mean of `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn loss_kl(mu: &[f32], sigma: &[f32]) -> Result<f64> {
    same_len(mu.len(), sigma.len())?;
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let (m, s2) = (m as f64, (s as f64).powi(2));
            0.5 * (s2 + m * m - 1.0 - s2.ln())
        })
        .sum::<f64>()
        / mu.len() as f64)
}

/// Element-mean Gaussian negative log-density of `z_true`.
pub fn loss_nll(z_true: &[f32], mu: &[f32], sigma: &[f32]) -> Result<f64> {
    same_len(mu.len(), sigma.len())?;
    same_len(mu.len(), z_true.len())?;
    Ok(z_true
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&z, &m), &s)| {
            let r = (z as f64 - m as f64) / s as f64;
            0.5 * r * r + (s as f64).ln() + HALF_LN_2PI
        })
        .sum::<f64>()
        / mu.len() as f64)
}

/// Element-mean entropy of `N(mu, sigma^2)`.
pub fn loss_entropy(sigma: &[f32]) -> f64 {
    sigma.iter().map(|&s| (s as f64).ln() + HALF_LN_2PI + 0.5).sum::<f64>() / sigma.len() as f64
}

/// Graph versions of the loss terms. All operands share a shape.
pub(crate) mod graph {
    use super::*;

    pub fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let d = g.sub(a, b);
        let sq = g.square(d);
        g.mean(sq)
    }

    pub fn kl<T: Scalar>(g: &mut Graph<T>, mu: Var, sigma: Var) -> Var {
        let s2 = g.square(sigma);
        let m2 = g.square(mu);
        let ls = g.log(sigma);
        let two_ls = g.scale(ls, 2.0);
        let a = g.add(s2, m2);
        let b = g.sub(a, two_ls);
        let c = g.add_scalar(b, -1.0);
        let m = g.mean(c);
        g.scale(m, 0.5)
    }

    pub fn nll<T: Scalar>(g: &mut Graph<T>, z: Var, mu: Var, sigma: Var) -> Var {
        let ls = g.log(sigma);
        let neg = g.scale(ls, -1.0);
        let inv = g.exp(neg);
        let d = g.sub(z, mu);
        let r = g.mul(d, inv);
        let r2 = g.square(r);
        let half = g.scale(r2, 0.5);
        let e = g.add(half, ls);
        let m = g.mean(e);
        g.add_scalar(m, HALF_LN_2PI)
    }

    pub fn entropy<T: Scalar>(g: &mut Graph<T>, sigma: Var) -> Var {
        let ls = g.log(sigma);
        let m = g.mean(ls);
        g.add_scalar(m, HALF_LN_2PI + 0.5)
    }

    pub fn weighted<T: Scalar>(g: &mut Graph<T>, parts: [Var; 4], w: &LossWeights) -> Var {
        let ws = [w.recon, w.zrecon, w.kl, w.nll];
        let mut acc = g.scale(parts[0], ws[0]);
        for (&p, &wi) in parts[1..].iter().zip(&ws[1..]) {
            let t = g.scale(p, wi);
            acc = g.add(acc, t);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kl_closed_forms() {
        assert!(loss_kl(&[0.0], &[1.0]).unwrap().abs() < 1e-6);
        assert!((loss_kl(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-6);
        let want = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((loss_kl(&[0.0], &[2.0]).unwrap() - want).abs() < 1e-6);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn nll_closed_forms() {
        let v = loss_nll(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.918_938_5).abs() < 1e-6);
        let mu = [0.5f32, -0.2, 1.0];
        let sigma = [0.5f32, 2.0, 1.5];
        let z: Vec<f32> = mu.iter().zip(&sigma).map(|(m, s)| m + s).collect();
        let mean_ln: f64 = sigma.iter().map(|&s| (s as f64).ln()).sum::<f64>() / 3.0;
        let v = loss_nll(&z, &mu, &sigma).unwrap();
        assert!((v - (HALF_LN_2PI + 0.5 + mean_ln)).abs() < 1e-6);
    }

    #[test]
    fn nll_matches_monte_carlo_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mu: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f32> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let z: Vec<f32> = mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| m + s * rng.sample::<f32, _>(StandardNormal))
            .collect();
        let mc = loss_nll(&z, &mu, &sigma).unwrap();
        let exact = loss_entropy(&sigma);
        assert!((mc - exact).abs() / exact.abs() < 0.02, "{mc} vs {exact}");
    }

    #[test]
    fn recon_cases() {
        let img = [0.2f32; 12];
        assert_eq!(loss_recon(&[&img], &[&img], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = loss_recon(&[&img], &[&img], &[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let off: Vec<f32> = img.iter().map(|x| x + 0.25).collect();
        let v = loss_recon(&[&img, &off], &[&img, &img], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v - 0.5 * 0.0625).abs() < 1e-7);
        assert!(loss_recon(&[&img], &[&img, &img], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn latent_recon_cases() {
        assert_eq!(loss_latent_recon(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_latent_recon(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..97).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..97).map(|_| rng.random()).collect();
        let mut naive = 0.0f64;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            naive += d * d;
        }
        naive /= a.len() as f64;
        assert!((loss_latent_recon(&a, &b).unwrap() - naive).abs() < 1e-6);
    }

    #[test]
    fn weighting_arithmetic() {
        let w = LossWeights::default();
        let c = LossComponents { recon: 10.0, zrecon: 1.0, kl: 20.0, nll: 1.0 };
        assert_eq!(total_loss(&c, &w), 5.0);
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        assert_eq!((w.recon, w.zrecon, w.kl, w.nll), (0.1, 2.0, 0.05, 1.0));
    }

    #[test]
    fn graph_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::from_f64_slice(&[n], &mu).unwrap());
        let s = g.constant(Tensor::from_f64_slice(&[n], &sigma).unwrap());
        let zz = g.constant(Tensor::from_f64_slice(&[n], &z).unwrap());
        let kl = graph::kl(&mut g, m, s);
        let nll = graph::nll(&mut g, zz, m, s);
        let ent = graph::entropy(&mut g, s);
        let ms = graph::mse(&mut g, zz, m);
        assert!((g.value(kl).item() - loss_kl(&f(&mu), &f(&sigma)).unwrap()).abs() < 1e-5);
        assert!((g.value(nll).item() - loss_nll(&f(&z), &f(&mu), &f(&sigma)).unwrap()).abs() < 1e-5);
        assert!((g.value(ent).item() - loss_entropy(&f(&sigma))).abs() < 1e-5);
        assert!((g.value(ms).item() - mse(&f(&z), &f(&mu)).unwrap()).abs() < 1e-5);
    }
}
