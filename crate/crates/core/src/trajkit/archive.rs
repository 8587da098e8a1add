//! Directory archive: `manifest.json` plus one `traj_<id>.bin` per trajectory.
//!
//! Trajectory files are little-endian: magic `WMTRAJ01`, six `u32`
//! (`T, H_img, W_img, C, p, d`), then all image values (time-major, row-major,
//! channel-last), all proprio values, and all action values as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Action, Dims, Label, Mode, State, Trajectory};
use crate::error::{Error, Result};

pub const TRAJ_MAGIC: &[u8; 8] = b"WMTRAJ01";
const MANIFEST: &str = "manifest.json";
const HEADER_LEN: usize = 8 + 6 * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub mode: Mode,
    pub seed: u64,
    pub length: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub env: Value,
    pub trajectories: Vec<ManifestEntry>,
}

fn encode_trajectory(traj: &Trajectory) -> Vec<u8> {
    let dims = traj.dims();
    let t = traj.len();
    let mut out =
        Vec::with_capacity(HEADER_LEN + 4 * t * (dims.image_len() + dims.p + dims.d));
    out.extend_from_slice(TRAJ_MAGIC);
    for v in [t, dims.h_img, dims.w_img, dims.c, dims.p, dims.d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for s in &traj.states {
        put(&s.image);
    }
    for s in &traj.states {
        put(&s.proprio);
    }
    for a in &traj.actions {
        put(&a.delta);
    }
    out
}

/// Writes `manifest.json` and the trajectory files into `dir`.
pub fn write_archive(trajectories: &[Trajectory], dir: &Path, env: &Value) -> Result<ArchiveManifest> {
    for tr in trajectories {
        tr.validate()?;
    }
    let mut seen = std::collections::BTreeSet::new();
    for tr in trajectories {
        if !seen.insert(tr.id.as_str()) {
            return Err(Error::InvalidTrajectory {
                id: tr.id.clone(),
                reason: "duplicate id in archive".into(),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(trajectories.len());
    for tr in trajectories {
        let file = format!("traj_{}.bin", tr.id);
        let path = dir.join(&file);
        fs::write(&path, encode_trajectory(tr)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: tr.id.clone(),
            label: tr.label,
            mode: tr.mode,
            seed: tr.seed,
            length: tr.len(),
            file,
        });
    }
    let manifest = ArchiveManifest {
        version: 1,
        env: env.clone(),
        trajectories: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ArchiveManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ArchiveManifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::Format {
            path,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a PathBuf,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.clone(),
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what} (needed {n} bytes at {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_trajectory(bytes: &[u8], path: &PathBuf, entry: &ManifestEntry) -> Result<Trajectory> {
    if bytes.len() < 8 || &bytes[..8] != TRAJ_MAGIC {
        return Err(Error::Format {
            path: path.clone(),
            reason: "bad trajectory magic".into(),
        });
    }
    let mut cur = Cursor { bytes, pos: 8, path };
    let t = cur.u32("T")?;
    let dims = Dims {
        h_img: cur.u32("H_img")?,
        w_img: cur.u32("W_img")?,
        c: cur.u32("C")?,
        p: cur.u32("p")?,
        d: cur.u32("d")?,
    };
    if t != entry.length {
        return Err(Error::Format {
            path: path.clone(),
            reason: format!("file holds {t} steps, manifest says {}", entry.length),
        });
    }
    let img_len = dims.image_len();
    let images = cur.f32s(t * img_len, "images")?;
    let proprio = cur.f32s(t * dims.p, "proprio")?;
    let actions = cur.f32s(t * dims.d, "actions")?;
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt {
            path: path.clone(),
            offset: cur.pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let states = (0..t)
        .map(|i| State {
            image: images[i * img_len..(i + 1) * img_len].to_vec(),
            proprio: proprio[i * dims.p..(i + 1) * dims.p].to_vec(),
            t: i,
        })
        .collect();
    let actions = (0..t)
        .map(|i| Action {
            delta: actions[i * dims.d..(i + 1) * dims.d].to_vec(),
        })
        .collect();
    Ok(Trajectory {
        id: entry.id.clone(),
        states,
        actions,
        label: entry.label,
        mode: entry.mode,
        seed: entry.seed,
    })
}

/// Reads every trajectory listed in the manifest, in manifest order.
pub fn read_archive(dir: &Path) -> Result<Vec<Trajectory>> {
    let manifest = read_manifest(dir)?;
    manifest
        .trajectories
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_trajectory(&bytes, &path, entry)
        })
        .collect()
}
