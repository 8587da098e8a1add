use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rollout, EnvParams};
use crate::error::Result;
use crate::par;
use crate::trajkit::{write_archive, ArchiveManifest, Mode, Trajectory};

/// Archive directory names, in seed-assignment order.
pub const SPLITS: [&str; 5] = ["train", "val", "calib", "eval_nominal", "eval_failure"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub calib: usize,
    pub eval_nominal: usize,
    pub eval_per_mode: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 256,
            val: 32,
            calib: 64,
            eval_nominal: 64,
            eval_per_mode: 32,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.calib + self.eval_nominal + 4 * self.eval_per_mode
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub base_seed: u64,
    pub counts: SplitCounts,
    pub env: EnvParams,
}

/// `(split index, disturbance)` of every trajectory in global index order.
fn plan(counts: &SplitCounts) -> Vec<(usize, Mode)> {
    let mut out = Vec::with_capacity(counts.total());
    for (split, n) in [counts.train, counts.val, counts.calib, counts.eval_nominal].into_iter().enumerate() {
        out.extend(std::iter::repeat_n((split, Mode::None), n));
    }
    for mode in Mode::FAILURES {
        out.extend(std::iter::repeat_n((4, mode), counts.eval_per_mode));
    }
    out
}

/// Generates every split and writes one archive per split under `out`.
pub fn gen_dataset(config: &DatasetConfig, out: &Path) -> Result<Vec<ArchiveManifest>> {
    let plan = plan(&config.counts);
    let trajs: Vec<Trajectory> = par::map_range(plan.len(), |i| {
        let (split, mode) = plan[i];
        let seed = config.base_seed.wrapping_add(i as u64);
        let mut tr = rollout(seed, mode, &config.env);
        tr.id = format!("{}_{i:05}", SPLITS[split]);
        tr
    });
    let env = serde_json::to_value(config.env)?;
    let mut manifests = Vec::with_capacity(SPLITS.len());
    for (split, name) in SPLITS.iter().enumerate() {
        let members: Vec<Trajectory> = trajs
            .iter()
            .zip(&plan)
            .filter(|(_, (s, _))| *s == split)
            .map(|(t, _)| t.clone())
            .collect();
        manifests.push(write_archive(&members, &out.join(name), &env)?);
    }
    Ok(manifests)
}
