//! PCA projection followed by 2-means clustering.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::nnkit::{load_checkpoint, save_checkpoint, ParamSet, Tensor};
use crate::trajkit::Label;

pub const DEFAULT_COMPONENTS: usize = 8;
const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaKmeans {
    dim: usize,
    mean: Vec<f64>,
    /// Row-major `[k, dim]`, one orthonormal principal direction per row.
    components: Vec<f64>,
    k: usize,
    centroids: [Vec<f64>; 2],
    /// Lloyd objective after seeding and after each iteration.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd iterations from farthest-point seeding; returns centroids and the
/// objective trace.
pub fn two_means(points: &[Vec<f64>], seed: u64) -> Result<([Vec<f64>; 2], Vec<f64>)> {
    let first = points
        .get(ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len().max(1)))
        .ok_or_else(|| Error::InsufficientData("no points to cluster".into()))?;
    let (far, d) = points
        .iter()
        .map(|p| sq_dist(p, first))
        .enumerate()
        .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    if d <= 0.0 {
        return Err(Error::InsufficientData("fewer than 2 distinct points".into()));
    }
    let mut c = [first.clone(), points[far].clone()];
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERS {
        let next: Vec<usize> = points
            .iter()
            .map(|p| usize::from(sq_dist(p, &c[1]) < sq_dist(p, &c[0])))
            .collect();
        let obj: f64 = points.iter().zip(&next).map(|(p, &a)| sq_dist(p, &c[a])).sum();
        trace.push(obj);
        if next == assign {
            break;
        }
        assign = next;
        for (j, cj) in c.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in cj.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    Ok((c, trace))
}

impl PcaKmeans {
    pub fn project(&self, z: &[f32]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::Shape { expected: vec![self.dim], actual: vec![z.len()] });
        }
        Ok(self
            .components
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(z.iter().zip(&self.mean)).map(|(w, (&v, m))| w * (v as f64 - m)).sum())
            .collect())
    }

    /// Euclidean distance to the nearest centroid in the projected space.
    pub fn score(&self, z: &[f32]) -> Result<f64> {
        let p = self.project(z)?;
        Ok(self.centroids.iter().map(|c| sq_dist(&p, c)).fold(f64::INFINITY, f64::min).sqrt())
    }

    pub fn centroids(&self) -> &[Vec<f64>; 2] {
        &self.centroids
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut p = ParamSet::new();
        p.insert("mean", Tensor::new(vec![self.dim], f(&self.mean))?);
        p.insert("components", Tensor::new(vec![self.k, self.dim], f(&self.components))?);
        p.insert("centroids", Tensor::new(vec![2, self.k], [f(&self.centroids[0]), f(&self.centroids[1])].concat())?);
        save_checkpoint(&p, &json!({"kind": "pca_kmeans", "components": self.k}), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (p, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("pca_kmeans") {
            return Err(Error::Format { path: path.into(), reason: "checkpoint is not a PCA-K-means model".into() });
        }
        let d = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let comps = p.require("components")?;
        let (k, dim) = (comps.shape()[0], comps.shape()[1]);
        let cents = d(p.require("centroids")?);
        Ok(PcaKmeans {
            dim,
            mean: d(p.require("mean")?),
            components: d(comps),
            k,
            centroids: [cents[..k].to_vec(), cents[k..].to_vec()],
            objective_trace: vec![],
        })
    }
}

/// Fits PCA (covariance eigendecomposition) and 2-means on `latents`, which
/// must contain both nominal and failure samples.
pub fn fit_pca_kmeans(latents: &[&[f32]], labels: &[Label], k: usize, seed: u64) -> Result<PcaKmeans> {
    if latents.len() != labels.len() {
        return Err(Error::Shape { expected: vec![latents.len()], actual: vec![labels.len()] });
    }
    if !labels.contains(&Label::Nominal) || !labels.contains(&Label::Failure) {
        return Err(Error::Label("PCA-K-means fit data must contain both nominal and failure samples".into()));
    }
    let dim = latents[0].len();
    if k == 0 || k > dim {
        return Err(Error::Config(format!("component count {k} outside 1..={dim}")));
    }
    let n = latents.len();
    let mut mean = vec![0.0f64; dim];
    for z in latents {
        if z.len() != dim {
            return Err(Error::Shape { expected: vec![dim], actual: vec![z.len()] });
        }
        for (m, &v) in mean.iter_mut().zip(z.iter()) {
            *m += v as f64 / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| latents[i][j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k * dim);
    for &c in &order[..k] {
        let v = eig.eigenvectors.column(c);
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|x| x * sign));
    }
    let mut pk = PcaKmeans { dim, mean, components, k, centroids: [vec![], vec![]], objective_trace: vec![] };
    let points = latents.iter().map(|z| pk.project(z)).collect::<Result<Vec<_>>>()?;
    let (centroids, trace) = two_means(&points, seed)?;
    pk.centroids = centroids;
    pk.objective_trace = trace;
    Ok(pk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn clusters(seed: u64) -> (Vec<Vec<f32>>, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = vec![];
        let mut labels = vec![];
        for i in 0..400 {
            let centre = if i % 2 == 0 { -3.0 } else { 3.0 };
            let z: Vec<f32> = (0..12)
                .map(|d| (if d < 2 { centre } else { 0.0 }) + 0.2 * rng.sample::<f32, _>(StandardNormal))
                .collect();
            zs.push(z);
            labels.push(if i % 2 == 0 { Label::Nominal } else { Label::Failure });
        }
        (zs, labels)
    }

    #[test]
    fn components_are_orthonormal() {
        let (zs, labels) = clusters(0);
        let refs: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        let pk = fit_pca_kmeans(&refs, &labels, 8, 1).unwrap();
        let c = pk.components();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..12).map(|d| c[a * 12 + d] * c[b * 12 + d]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn separated_clusters_are_found() {
        let (zs, labels) = clusters(2);
        let refs: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        let pk = fit_pca_kmeans(&refs, &labels, 8, 3).unwrap();
        for w in pk.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        for centre in [-3.0f64, 3.0] {
            let members: Vec<&Vec<f32>> = zs.iter().filter(|z| (z[0] as f64 - centre).abs() < 2.0).collect();
            let mut m = vec![0.0f32; 12];
            for z in &members {
                for (a, v) in m.iter_mut().zip(z.iter()) {
                    *a += v / members.len() as f32;
                }
            }
            let p = pk.project(&m).unwrap();
            let near = pk.centroids().iter().map(|c| sq_dist(c, &p).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(near < 0.05, "{near}");
        }
    }

    #[test]
    fn point_at_centroid_scores_zero() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![4.0, 4.0], vec![4.0, 4.0]];
        let (c, _) = two_means(&pts, 0).unwrap();
        let mut cs = c.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, [vec![0.0, 0.0], vec![4.0, 4.0]]);
        let pk = PcaKmeans {
            dim: 2,
            mean: vec![0.0; 2],
            components: vec![1.0, 0.0, 0.0, 1.0],
            k: 2,
            centroids: c,
            objective_trace: vec![],
        };
        assert_eq!(pk.score(&[4.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn input_checks() {
        let zs = [vec![1.0f32, 2.0], vec![1.0, 2.0]];
        let refs: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        assert!(matches!(fit_pca_kmeans(&refs, &[Label::Nominal, Label::Nominal], 1, 0), Err(Error::Label(_))));
        assert!(fit_pca_kmeans(&refs, &[Label::Nominal, Label::Failure], 1, 0).is_err());
    }

    #[test]
    fn save_load_preserves_scores() {
        let (zs, labels) = clusters(4);
        let refs: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        let pk = fit_pca_kmeans(&refs, &labels, 4, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pk.save(&dir.path().join("pk")).unwrap();
        let back = PcaKmeans::load(&dir.path().join("pk")).unwrap();
        for z in &zs[..10] {
            assert!((back.score(z).unwrap() - pk.score(z).unwrap()).abs() < 1e-4);
        }
    }
}
