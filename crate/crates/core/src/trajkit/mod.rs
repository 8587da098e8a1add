//! Trajectory data model and its on-disk archive format.

mod archive;
mod stream;

use serde::{Deserialize, Serialize};

pub use archive::{read_archive, read_manifest, write_archive, ArchiveManifest, ManifestEntry, TRAJ_MAGIC};
pub use stream::{write_stream_header, write_stream_record, FrameError, StreamReader, STREAM_MAGIC};

use crate::error::{Error, Result};

pub const IMG_H: usize = 32;
pub const IMG_W: usize = 32;
pub const IMG_C: usize = 3;
pub const IMG_LEN: usize = IMG_H * IMG_W * IMG_C;
pub const PROPRIO_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

/// Tensor dimensions carried by every trajectory file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub h_img: usize,
    pub w_img: usize,
    pub c: usize,
    pub p: usize,
    pub d: usize,
}

impl Dims {
    pub const DEFAULT: Dims = Dims {
        h_img: IMG_H,
        w_img: IMG_W,
        c: IMG_C,
        p: PROPRIO_DIM,
        d: ACTION_DIM,
    };

    pub fn image_len(&self) -> usize {
        self.h_img * self.w_img * self.c
    }
}

/// One observation: a single RGB view (row-major, channel-last, values in
/// `[0, 1]`) and the end-effector position.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub image: Vec<f32>,
    pub proprio: Vec<f32>,
    pub t: usize,
}

/// Commanded change of end-effector position, issued at the same timestep as
/// the state it is paired with.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub delta: Vec<f32>,
}

impl Action {
    pub fn zero(d: usize) -> Self {
        Action { delta: vec![0.0; d] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Nominal,
    Failure,
}

/// Disturbance applied to a rollout. `None` is the only nominal mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    RecolorOrange,
    RecolorGreen,
    HalfFriction,
    ZeroFriction,
}

impl Mode {
    pub const FAILURES: [Mode; 4] = [
        Mode::RecolorOrange,
        Mode::RecolorGreen,
        Mode::HalfFriction,
        Mode::ZeroFriction,
    ];

    pub fn label(self) -> Label {
        match self {
            Mode::None => Label::Nominal,
            _ => Label::Failure,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::RecolorOrange => "recolor_orange",
            Mode::RecolorGreen => "recolor_green",
            Mode::HalfFriction => "half_friction",
            Mode::ZeroFriction => "zero_friction",
        }
    }
}

/// Fails unless `trajs` is non-empty and every trajectory is nominal.
pub fn require_nominal(trajs: &[Trajectory], what: &str) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::InsufficientData(format!("{what} set is empty")));
    }
    if let Some(t) = trajs.iter().find(|t| t.label != Label::Nominal) {
        return Err(Error::Label(format!(
            "{what} set contains failure trajectory {}; only nominal data is allowed",
            t.id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub label: Label,
    pub mode: Mode,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dims(&self) -> Dims {
        let (p, d) = match (self.states.first(), self.actions.first()) {
            (Some(s), Some(a)) => (s.proprio.len(), a.delta.len()),
            _ => (PROPRIO_DIM, ACTION_DIM),
        };
        Dims { p, d, ..Dims::DEFAULT }
    }

    /// Checks the structural invariants shared by every trajectory.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTrajectory {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(bad("id must be non-empty [A-Za-z0-9_-]".into()));
        }
        if self.states.is_empty() {
            return Err(bad("no states".into()));
        }
        if self.states.len() != self.actions.len() {
            return Err(bad(format!(
                "{} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.mode.label() != self.label {
            return Err(bad(format!("label {:?} inconsistent with mode {:?}", self.label, self.mode)));
        }
        let dims = self.dims();
        for (i, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            if s.t != i {
                return Err(bad(format!("state {i} carries timestep {}", s.t)));
            }
            if s.image.len() != dims.image_len() || s.proprio.len() != dims.p || a.delta.len() != dims.d {
                return Err(bad(format!("inconsistent tensor sizes at t={i}")));
            }
            if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad(format!("image value outside [0,1] at t={i}")));
            }
            if s.proprio.iter().chain(&a.delta).any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite proprio/action at t={i}")));
            }
        }
        Ok(())
    }
}

/// `H` contiguous, time-ordered state-action pairs.
#[derive(Clone, Copy, Debug)]
pub struct HistoryWindow<'a> {
    pub states: &'a [State],
    pub actions: &'a [Action],
}

impl HistoryWindow<'_> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Timestep of the newest pair.
    pub fn end_t(&self) -> usize {
        self.states.last().map(|s| s.t).unwrap_or(0)
    }
}

/// All `(window, next state)` training pairs of a trajectory: `T - H` of them,
/// the k-th targeting `states[H + k]`. Too-short trajectories give none.
pub fn slice_windows(traj: &Trajectory, h: usize) -> Vec<(HistoryWindow<'_>, &State)> {
    let t = traj.len();
    if h == 0 || t <= h {
        return Vec::new();
    }
    (0..t - h)
        .map(|k| {
            (
                HistoryWindow {
                    states: &traj.states[k..k + h],
                    actions: &traj.actions[k..k + h],
                },
                &traj.states[k + h],
            )
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub fn random_trajectory(id: &str, len: usize, mode: Mode, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = (0..len)
            .map(|t| State {
                image: (0..IMG_LEN).map(|_| rng.random::<f32>()).collect(),
                proprio: (0..PROPRIO_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                t,
            })
            .collect();
        let actions = (0..len)
            .map(|_| Action {
                delta: (0..ACTION_DIM).map(|_| rng.random_range(-0.02..0.02)).collect(),
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            states,
            actions,
            label: mode.label(),
            mode,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::random_trajectory;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_counts() {
        let tr = random_trajectory("a", 10, Mode::None, 1);
        assert_eq!(slice_windows(&tr, 4).len(), 6);
        let tr = random_trajectory("b", 5, Mode::None, 1);
        let w = slice_windows(&tr, 4);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].1.t, 4);
        let tr = random_trajectory("c", 4, Mode::None, 1);
        assert!(slice_windows(&tr, 4).is_empty());
    }

    #[test]
    fn validate_catches_label_mismatch() {
        let mut tr = random_trajectory("a", 3, Mode::None, 1);
        tr.label = Label::Failure;
        let err = tr.validate().unwrap_err();
        assert!(err.to_string().contains("invalid trajectory a"));
    }

    proptest! {
        #[test]
        fn windows_are_contiguous(t in 1usize..30, h in 1usize..12) {
            let tr = random_trajectory("p", t, Mode::None, 3);
            let ws = slice_windows(&tr, h);
            prop_assert_eq!(ws.len(), t.saturating_sub(h));
            for (k, (w, target)) in ws.iter().enumerate() {
                prop_assert_eq!(w.len(), h);
                for (i, s) in w.states.iter().enumerate() {
                    prop_assert_eq!(s.t, k + i);
                }
                prop_assert_eq!(target.t, k + h);
                prop_assert_eq!(w.end_t() + 1, target.t);
            }
        }
    }
}
