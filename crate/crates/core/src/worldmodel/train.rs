use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{graph as lg, LossComponents, NllVariant};
use super::model::{feedback_visual, forward_graph, init_params, row, WindowVars};
use super::{VisualToken, WMConfig, WorldModel};
use crate::error::{Error, Result};
use crate::nnkit::{clip_grad_norm, grad_check, Adam, AdamConfig, Bound, Graph, ParamSet, Scalar, Tensor, Var};
use crate::par;
use crate::tokenizer::{patchify, Tokenizer, CELLS, LATENT_DIM, LATENT_LEN, PATCH_LEN};
use crate::trajkit::{require_nominal, Trajectory, IMG_LEN};

/// Autoregressive horizon used during `epoch` (0-based): starts at one and
/// doubles every `epochs_per_stage` epochs up to `max_horizon`.
pub fn horizon_at(epoch: usize, epochs_per_stage: usize, max_horizon: usize) -> usize {
    let stage = epoch / epochs_per_stage.max(1);
    if stage >= usize::BITS as usize - 1 {
        return max_horizon;
    }
    (1usize << stage).min(max_horizon)
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Per-trajectory tensors precomputed with the frozen tokenizer.
#[derive(Clone, Debug)]
pub(crate) struct TrajData {
    pub len: usize,
    pub latents: Vec<f32>,
    pub vis: Vec<Vec<f32>>,
    pub proprio: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub patches: Vec<f32>,
}

/// World-model training data: trajectories encoded once by the tokenizer.
#[derive(Clone, Debug)]
pub struct WmData {
    pub(crate) trajs: Vec<TrajData>,
}

impl WmData {
    pub fn new(trajectories: &[Trajectory], tok: &Tokenizer, kind: VisualToken) -> Result<Self> {
        let trajs = par::map(trajectories, |tr| -> Result<TrajData> {
            let mut d = TrajData {
                len: tr.len(),
                latents: Vec::with_capacity(tr.len() * LATENT_LEN),
                vis: vec![],
                proprio: vec![],
                actions: vec![],
                patches: Vec::with_capacity(tr.len() * IMG_LEN),
            };
            for (s, a) in tr.states.iter().zip(&tr.actions) {
                let z = tok.encode(&s.image)?;
                d.vis.push(kind.from_latent(&z));
                d.latents.extend_from_slice(&z);
                d.patches.extend(patchify(&s.image));
                d.proprio.push(s.proprio.clone());
                d.actions.push(a.delta.clone());
            }
            Ok(d)
        });
        Ok(WmData { trajs: trajs.into_iter().collect::<Result<_>>()? })
    }

    pub fn len(&self) -> usize {
        self.trajs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajs.is_empty()
    }

    fn max_len(&self) -> usize {
        self.trajs.iter().map(|t| t.len).max().unwrap_or(0)
    }

    /// Longest horizon for which at least one full window exists.
    pub fn feasible_horizon(&self, history: usize, wanted: usize) -> usize {
        wanted.min(self.max_len().saturating_sub(history))
    }

    /// Number of windows `(trajectory, start)` with `horizon` targets.
    fn window_counts(&self, history: usize, horizon: usize) -> Vec<usize> {
        self.trajs
            .iter()
            .map(|t| (t.len + 1).saturating_sub(history + horizon))
            .collect()
    }

    fn pick_window<R: Rng>(&self, counts: &[usize], total: usize, rng: &mut R) -> (usize, usize) {
        let mut k = rng.random_range(0..total);
        for (i, &c) in counts.iter().enumerate() {
            if k < c {
                return (i, k);
            }
            k -= c;
        }
        unreachable!("window index within total")
    }
}

/// Checks the gradient of the training loss in double precision: the mean
/// over `trajectories` of the loss of one `horizon`-step window starting at
/// `t = 1`, with weights initialised from `seed`. Returns the maximum relative
/// error against central finite differences over at most `max_elements`
/// parameters.
pub fn loss_grad_check(
    trajectories: &[Trajectory],
    tok: &Tokenizer,
    cfg: &WMConfig,
    horizon: usize,
    seed: u64,
    max_elements: usize,
) -> Result<f64> {
    cfg.validate()?;
    let data = WmData::new(trajectories, tok, cfg.visual_token)?;
    if data.trajs.is_empty() || data.trajs.iter().any(|td| td.len < 1 + cfg.history + horizon) {
        return Err(Error::InsufficientData(format!(
            "gradient check needs trajectories of at least {} steps",
            1 + cfg.history + horizon
        )));
    }
    let params: ParamSet<f64> = init_params(cfg, seed).cast();
    let tokp: ParamSet<f64> = tok.params().cast();
    let obj = |g: &mut Graph<f64>, p: &Bound| {
        let tb = g.bind_frozen(&tokp);
        let mut total = None;
        for (i, td) in data.trajs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + i as u64));
            let (l, _) = window_loss(g, p, &tb, cfg, td, 1, horizon, &mut rng);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l),
            });
        }
        let t = total.expect("at least one trajectory");
        g.scale(t, 1.0 / data.trajs.len() as f64)
    };
    grad_check(&obj, &params, 1e-5, max_elements, seed)
}

/// Mean total loss over an autoregressive rollout of `horizon` steps starting
/// from the ground-truth window at `t0`.
pub(crate) fn window_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    p: &Bound,
    tb: &Bound,
    cfg: &WMConfig,
    td: &TrajData,
    t0: usize,
    horizon: usize,
    rng: &mut R,
) -> (Var, LossComponents) {
    let h = cfg.history;
    let to_t = |xs: &[f32]| xs.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
    let latent_at = |t: usize| &td.latents[t * LATENT_LEN..(t + 1) * LATENT_LEN];
    let last = g.constant(Tensor::new(vec![LATENT_LEN], to_t(latent_at(t0 + h - 1))).unwrap());
    let mut w = WindowVars { vis: vec![], prop: vec![], act: vec![], last };
    for t in t0..t0 + h {
        w.vis.push(row(g, &td.vis[t], 1.0));
        w.prop.push(row(g, &td.proprio[t], 1.0));
        w.act.push(row(g, &td.actions[t], cfg.action_scale));
    }
    let mut total: Option<Var> = None;
    let mut comps = LossComponents::default();
    for k in 0..horizon {
        let t = t0 + h + k;
        let head = forward_graph(g, p, cfg, &w);
        let eps: Vec<T> = (0..LATENT_LEN).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        let z = g.reparam(head.mu, head.sigma, eps);
        let z_true = g.constant(Tensor::new(vec![LATENT_LEN], to_t(latent_at(t))).unwrap());
        let true_px = g.constant(Tensor::new(vec![CELLS, PATCH_LEN], to_t(&td.patches[t * IMG_LEN..(t + 1) * IMG_LEN])).unwrap());
        let true_prop = row(g, &td.proprio[t], 1.0);

        let cells = g.reshape(z, &[CELLS, LATENT_DIM]);
        let pred_px = crate::tokenizer::decode_graph(g, tb, cells);
        let l_pix = lg::mse(g, pred_px, true_px);
        let l_prop = lg::mse(g, head.prop, true_prop);
        let half = g.scale(l_prop, 0.5);
        let recon = g.add(l_pix, half);
        let zrecon = lg::mse(g, z_true, z);
        let kl = lg::kl(g, head.mu, head.sigma);
        let nll = match cfg.nll {
            NllVariant::GroundTruth => lg::nll(g, z_true, head.mu, head.sigma),
            NllVariant::Entropy => lg::entropy(g, head.sigma),
        };
        let step_total = lg::weighted(g, [recon, zrecon, kl, nll], &cfg.weights);
        for (acc, v) in [
            (&mut comps.recon, recon),
            (&mut comps.zrecon, zrecon),
            (&mut comps.kl, kl),
            (&mut comps.nll, nll),
        ] {
            *acc += g.value(v).item().as_f64() / horizon as f64;
        }
        total = Some(match total {
            None => step_total,
            Some(acc) => g.add(acc, step_total),
        });
        if k + 1 < horizon {
            let (vis, latent) = feedback_visual(g, tb, z, cfg.visual_token);
            let act = row(g, &td.actions[t], cfg.action_scale);
            w.shift(vis, latent, head.prop, act);
        }
    }
    let sum = total.expect("horizon >= 1");
    (g.scale(sum, 1.0 / horizon as f64), comps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub horizon: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub param_count: usize,
}

impl TrainReport {
    pub fn horizons(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.horizon).collect()
    }
}

/// Mean loss over `n` windows drawn with `seed`, at `horizon`.
pub fn evaluate_loss(wm: &WorldModel, data: &WmData, tok: &Tokenizer, horizon: usize, n: usize, seed: u64) -> Result<f64> {
    let cfg = wm.config();
    let horizon = data.feasible_horizon(cfg.history, horizon);
    let counts = data.window_counts(cfg.history, horizon);
    let total: usize = counts.iter().sum();
    if horizon == 0 || total == 0 {
        return Err(Error::InsufficientData(format!(
            "no trajectory longer than the history length {}",
            cfg.history
        )));
    }
    let losses = par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let (ti, t0) = data.pick_window(&counts, total, &mut rng);
        let mut g = Graph::<f32>::new();
        let p = g.bind_frozen(wm.params());
        let tb = g.bind_frozen(tok.params());
        let (l, _) = window_loss(&mut g, &p, &tb, cfg, &data.trajs[ti], t0, horizon, &mut rng);
        g.value(l).item() as f64
    });
    Ok(losses.iter().sum::<f64>() / n.max(1) as f64)
}

/// Trains a world model with the horizon curriculum and returns the
/// parameters with the best validation loss in the last stage reached.
pub fn train_wm(
    train: &[Trajectory],
    val: &[Trajectory],
    cfg: &WMConfig,
    tok: &Tokenizer,
) -> Result<(WorldModel, TrainReport)> {
    require_nominal(train, "training")?;
    require_nominal(val, "validation")?;
    let train = WmData::new(train, tok, cfg.visual_token)?;
    let val = WmData::new(val, tok, cfg.visual_token)?;
    train_wm_on(&train, &val, cfg, tok)
}

pub fn train_wm_on(
    train: &WmData,
    val: &WmData,
    cfg: &WMConfig,
    tok: &Tokenizer,
) -> Result<(WorldModel, TrainReport)> {
    cfg.validate()?;
    let tok_sum = tok.checksum();
    let h = cfg.history;
    let final_horizon = train.feasible_horizon(h, cfg.max_horizon).min(val.feasible_horizon(h, cfg.max_horizon));
    if final_horizon == 0 {
        return Err(Error::InsufficientData(format!("no trajectory longer than the history length {h}")));
    }
    let mut params = init_params(cfg, cfg.seed);
    let mut adam = Adam::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stale = 0;
    let mut stage_horizon = 0;
    for epoch in 0..cfg.max_epochs {
        let horizon = horizon_at(epoch, cfg.epochs_per_stage, cfg.max_horizon).min(final_horizon);
        if horizon != stage_horizon {
            stage_horizon = horizon;
            best = None;
            stale = 0;
        }
        let counts = train.window_counts(h, horizon);
        let total: usize = counts.iter().sum();
        let mut train_loss = 0.0;
        for b in 0..cfg.batches_per_epoch {
            adam.config.lr = crate::tokenizer::cosine_lr(cfg.lr, epoch * cfg.batches_per_epoch + b, cfg.max_epochs * cfg.batches_per_epoch);
            let results = par::map_range(cfg.batch_size, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, b as u64, i as u64]));
                let (ti, t0) = train.pick_window(&counts, total, &mut rng);
                let mut g = Graph::<f32>::new();
                let p = g.bind(&params);
                let tb = g.bind_frozen(tok.params());
                let (l, _) = window_loss(&mut g, &p, &tb, cfg, &train.trajs[ti], t0, horizon, &mut rng);
                let lv = g.value(l).item() as f64;
                (lv, g.backward(l).to_params(&g, &p))
            });
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for (lv, gr) in &results {
                batch_loss += lv;
                grads.add_scaled(gr, 1.0 / cfg.batch_size as f32)?;
            }
            batch_loss /= cfg.batch_size as f64;
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {b} (horizon {horizon}, loss {batch_loss})"
                )));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut params, &grads)?;
            train_loss += batch_loss / cfg.batches_per_epoch as f64;
        }
        let wm = WorldModel::from_params(cfg.clone(), params.clone())?;
        let val_loss = evaluate_loss(&wm, val, tok, horizon, cfg.val_windows, mix_seed(&[cfg.seed, 0x76616c, horizon as u64]))?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        log.push(EpochLog { epoch, horizon, train_loss, val_loss });
        match &best {
            Some((b, _, _)) if val_loss >= *b => stale += 1,
            _ => {
                best = Some((val_loss, epoch, params.clone()));
                stale = 0;
            }
        }
        if horizon == final_horizon && stale >= cfg.patience {
            break;
        }
    }
    assert_eq!(tok.checksum(), tok_sum, "tokenizer parameters changed during training");
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let wm = WorldModel::from_params(cfg.clone(), best_params)?;
    let report = TrainReport { epochs: log, best_epoch, param_count: wm.param_count() };
    Ok((wm, report))
}
