use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GaussianLatent, VisualToken, WMConfig, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::nnkit::{init, Bound, Graph, ParamSet, Scalar, Tensor, Var};
use crate::tokenizer::{self, Tokenizer, CELLS, LATENT_DIM, LATENT_LEN};
use crate::trajkit::{Action, HistoryWindow, State, ACTION_DIM, PROPRIO_DIM};

/// Per-timestep model input: tokenizer latent map, proprio and raw action.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub latent: Vec<f32>,
    pub proprio: Vec<f32>,
    pub action: Vec<f32>,
}

/// Channel means of a latent map over its spatial cells.
pub fn pool_latent(latent: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; LATENT_DIM];
    for cell in latent.chunks(LATENT_DIM) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= CELLS as f32);
    out
}

pub(crate) fn init_params(cfg: &WMConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim;
    let mut p = ParamSet::new();
    let lin = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
        p.insert(format!("{name}.w"), init::lecun(rng, i, o));
        p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
    };
    lin(&mut p, &mut rng, "in.vis", cfg.visual_token.width(), d);
    lin(&mut p, &mut rng, "in.prop", PROPRIO_DIM, d);
    lin(&mut p, &mut rng, "in.act", ACTION_DIM, d);
    p.insert("pos", init::normal(&mut rng, &[3 * cfg.history, d], 0.1));
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            p.insert(format!("l{l}.{ln}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("l{l}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for m in ["q", "k", "v", "o"] {
            lin(&mut p, &mut rng, &format!("l{l}.attn.{m}"), d, d);
        }
        lin(&mut p, &mut rng, &format!("l{l}.mlp.fc1"), d, cfg.mlp_dim);
        lin(&mut p, &mut rng, &format!("l{l}.mlp.fc2"), cfg.mlp_dim, d);
    }
    p.insert("ln_f.g", Tensor::full(&[d], 1.0));
    p.insert("ln_f.b", Tensor::zeros(&[d]));
    lin(&mut p, &mut rng, "head.mu", d, LATENT_LEN);
    lin(&mut p, &mut rng, "head.sigma", d, LATENT_LEN);
    if cfg.residual {
        // Start at the persistence forecast with a small, flat sigma.
        p.insert("head.mu.w", init::normal(&mut rng, &[d, LATENT_LEN], 1e-3));
        p.insert("head.sigma.w", init::normal(&mut rng, &[d, LATENT_LEN], 1e-2));
        p.insert("head.sigma.b", Tensor::full(&[LATENT_LEN], -3.0));
    }
    lin(&mut p, &mut rng, "head.prop", d, PROPRIO_DIM);
    p
}

/// Graph-side history window: one `[1, k]` row per timestep and stream,
/// plus the newest latent map `[LATENT_LEN]`.
#[derive(Clone)]
pub(crate) struct WindowVars {
    pub vis: Vec<Var>,
    pub prop: Vec<Var>,
    pub act: Vec<Var>,
    pub last: Var,
}

impl WindowVars {
    pub fn from_inputs<T: Scalar>(g: &mut Graph<T>, steps: &[StepInput], cfg: &WMConfig) -> Self {
        let (mut vis, mut prop, mut act) = (vec![], vec![], vec![]);
        for s in steps {
            vis.push(row(g, &cfg.visual_token.from_latent(&s.latent), 1.0));
            prop.push(row(g, &s.proprio, 1.0));
            act.push(row(g, &s.action, cfg.action_scale));
        }
        let newest = &steps.last().expect("non-empty window").latent;
        let last = g.constant(Tensor::new(vec![LATENT_LEN], newest.iter().map(|&v| T::of(v as f64)).collect()).expect("latent length"));
        WindowVars { vis, prop, act, last }
    }

    /// Drops the oldest step and appends a new one.
    pub fn shift(&mut self, vis: Var, latent: Var, prop: Var, act: Var) {
        self.vis.remove(0);
        self.prop.remove(0);
        self.act.remove(0);
        self.vis.push(vis);
        self.prop.push(prop);
        self.act.push(act);
        self.last = latent;
    }
}

pub(crate) fn row<T: Scalar>(g: &mut Graph<T>, xs: &[f32], scale: f32) -> Var {
    let data = xs.iter().map(|&x| T::of((x * scale) as f64)).collect();
    g.constant(Tensor::new(vec![1, xs.len()], data).expect("non-empty row"))
}

pub(crate) struct HeadVars {
    /// `[LATENT_LEN]`
    pub mu: Var,
    /// `[LATENT_LEN]`, floored softplus
    pub sigma: Var,
    /// `[1, PROPRIO_DIM]`
    pub prop: Var,
}

fn interleave_index(h: usize, d: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(3 * h * d);
    for r in 0..3 * h {
        let src = (r % 3) * h + r / 3;
        idx.extend(src * d..(src + 1) * d);
    }
    idx.into()
}

pub(crate) fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &WMConfig,
    w: &WindowVars,
) -> HeadVars {
    let h = w.vis.len();
    assert_eq!(h, cfg.history, "window length");
    let d = cfg.model_dim;
    let lin = |g: &mut Graph<T>, x: Var, name: &str| {
        g.linear(x, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")))
    };
    let vis = g.concat(&w.vis);
    let prop = g.concat(&w.prop);
    let act = g.concat(&w.act);
    let tv = lin(g, vis, "in.vis");
    let tp = lin(g, prop, "in.prop");
    let ta = lin(g, act, "in.act");
    let blocks = g.concat(&[tv, tp, ta]);
    let tokens = g.gather(blocks, interleave_index(h, d), &[3 * h, d]);
    let mut x = g.add(tokens, p.var("pos"));
    for l in 0..cfg.layers {
        let ln = |g: &mut Graph<T>, x: Var, n: &str| {
            g.layer_norm(x, p.var(&format!("l{l}.{n}.g")), p.var(&format!("l{l}.{n}.b")), 1e-5)
        };
        let a = ln(g, x, "ln1");
        let q = lin(g, a, &format!("l{l}.attn.q"));
        let k = lin(g, a, &format!("l{l}.attn.k"));
        let v = lin(g, a, &format!("l{l}.attn.v"));
        let att = g.causal_attention(q, k, v, cfg.heads);
        let o = lin(g, att, &format!("l{l}.attn.o"));
        x = g.add(x, o);
        let m = ln(g, x, "ln2");
        let f1 = lin(g, m, &format!("l{l}.mlp.fc1"));
        let f1 = g.tanh(f1);
        let f2 = lin(g, f1, &format!("l{l}.mlp.fc2"));
        x = g.add(x, f2);
    }
    let last = g.slice_rows(x, 3 * h - 1, 3 * h);
    let feat = g.layer_norm(last, p.var("ln_f.g"), p.var("ln_f.b"), 1e-5);
    let mu = lin(g, feat, "head.mu");
    let mut mu = g.reshape(mu, &[LATENT_LEN]);
    if cfg.residual {
        mu = g.add(mu, w.last);
    }
    let raw = lin(g, feat, "head.sigma");
    let sp = g.softplus(raw);
    let sigma = g.add_scalar(sp, SIGMA_FLOOR as f64);
    let sigma = g.reshape(sigma, &[LATENT_LEN]);
    let prop = lin(g, feat, "head.prop");
    HeadVars { mu, sigma, prop }
}

/// The frozen tokenizer's re-encoding of `z`'s decoded, clamped image, as
/// a visual token `[1, width]` and a latent map `[LATENT_LEN]`.
pub(crate) fn feedback_visual<T: Scalar>(g: &mut Graph<T>, tok: &Bound, z: Var, kind: VisualToken) -> (Var, Var) {
    let cells = g.reshape(z, &[CELLS, LATENT_DIM]);
    let patches = tokenizer::decode_graph(g, tok, cells);
    let img = g.clamp(patches, 0.0, 1.0);
    let enc = tokenizer::encode_graph(g, tok, img);
    let latent = g.reshape(enc, &[LATENT_LEN]);
    let vis = match kind {
        VisualToken::MeanPool => {
            let pooled = g.mean_rows(enc);
            g.reshape(pooled, &[1, LATENT_DIM])
        }
        VisualToken::Flatten => g.reshape(enc, &[1, LATENT_LEN]),
    };
    (vis, latent)
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

/// Trained world model parameters with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    cfg: WMConfig,
    params: ParamSet,
}

impl WorldModel {
    /// Freshly initialized model.
    pub fn new(cfg: WMConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(WorldModel { cfg, params })
    }

    pub fn from_params(cfg: WMConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        init_params(&cfg, 0).check_same_layout(&params)?;
        Ok(WorldModel { cfg, params })
    }

    pub fn config(&self) -> &WMConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    pub fn step_input(&self, tok: &Tokenizer, state: &State, action: &Action) -> Result<StepInput> {
        Ok(StepInput {
            latent: tok.encode(&state.image)?,
            proprio: state.proprio.clone(),
            action: action.delta.clone(),
        })
    }

    fn check_window(&self, steps: &[StepInput]) -> Result<()> {
        if steps.len() != self.cfg.history {
            return Err(Error::Shape {
                expected: vec![self.cfg.history],
                actual: vec![steps.len()],
            });
        }
        for s in steps {
            if s.latent.len() != LATENT_LEN || s.proprio.len() != PROPRIO_DIM || s.action.len() != ACTION_DIM {
                return Err(Error::Shape {
                    expected: vec![LATENT_LEN, PROPRIO_DIM, ACTION_DIM],
                    actual: vec![s.latent.len(), s.proprio.len(), s.action.len()],
                });
            }
        }
        Ok(())
    }

    fn read_head(g: &Graph<f32>, h: &HeadVars) -> Result<(GaussianLatent, Vec<f32>)> {
        let mu = to_f32(g.value(h.mu));
        let sigma = to_f32(g.value(h.sigma));
        let prop = to_f32(g.value(h.prop));
        if mu.iter().chain(&sigma).chain(&prop).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite world model output".into()));
        }
        debug_assert!(sigma.iter().all(|&s| s >= SIGMA_FLOOR));
        Ok((GaussianLatent { mu, sigma }, prop))
    }

    /// One-step prediction from precomputed step inputs.
    pub fn predict(&self, steps: &[StepInput]) -> Result<(GaussianLatent, Vec<f32>)> {
        self.check_window(steps)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind_frozen(&self.params);
        let w = WindowVars::from_inputs(&mut g, steps, &self.cfg);
        let h = forward_graph(&mut g, &p, &self.cfg, &w);
        Self::read_head(&g, &h)
    }

    pub fn forward(&self, window: &HistoryWindow, tok: &Tokenizer) -> Result<(GaussianLatent, Vec<f32>)> {
        let steps = window
            .states
            .iter()
            .zip(window.actions)
            .map(|(s, a)| self.step_input(tok, s, a))
            .collect::<Result<Vec<_>>>()?;
        self.predict(&steps)
    }

    /// Predicts `horizon` steps ahead, feeding back sampled latents (through
    /// the frozen decoder and encoder) and predicted proprio. `actions[k]` is
    /// the action taken at the `k`-th predicted state; at least
    /// `horizon - 1` must be given.
    pub fn rollout_autoregressive<R: Rng>(
        &self,
        window: &HistoryWindow,
        horizon: usize,
        actions: &[Action],
        tok: &Tokenizer,
        rng: &mut R,
    ) -> Result<Vec<(GaussianLatent, Vec<f32>)>> {
        if horizon == 0 || horizon > self.cfg.max_horizon {
            return Err(Error::Config(format!(
                "horizon {horizon} outside 1..={}",
                self.cfg.max_horizon
            )));
        }
        if actions.len() + 1 < horizon {
            return Err(Error::Config(format!(
                "{} future actions supplied for horizon {horizon}",
                actions.len()
            )));
        }
        let steps = window
            .states
            .iter()
            .zip(window.actions)
            .map(|(s, a)| self.step_input(tok, s, a))
            .collect::<Result<Vec<_>>>()?;
        self.check_window(&steps)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind_frozen(&self.params);
        let tb = g.bind_frozen(tok.params());
        let mut w = WindowVars::from_inputs(&mut g, &steps, &self.cfg);
        let mut out = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let h = forward_graph(&mut g, &p, &self.cfg, &w);
            out.push(Self::read_head(&g, &h)?);
            if k + 1 < horizon {
                let eps: Vec<f32> = (0..LATENT_LEN).map(|_| rng.sample(StandardNormal)).collect();
                let z = g.reparam(h.mu, h.sigma, eps);
                let (vis, latent) = feedback_visual(&mut g, &tb, z, self.cfg.visual_token);
                let act = row(&mut g, &actions[k].delta, self.cfg.action_scale);
                w.shift(vis, latent, h.prop, act);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajkit::testutil::random_trajectory;
    use crate::trajkit::Mode;

    fn tok() -> Tokenizer {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.insert("enc.w", init::normal(&mut rng, &[tokenizer::PATCH_LEN, LATENT_DIM], 0.1));
        p.insert("enc.b", Tensor::zeros(&[LATENT_DIM]));
        p.insert("dec.w", init::normal(&mut rng, &[LATENT_DIM, tokenizer::PATCH_LEN], 0.1));
        p.insert("dec.b", Tensor::full(&[tokenizer::PATCH_LEN], 0.5));
        Tokenizer::from_params(p).unwrap()
    }

    #[test]
    fn param_count_under_budget() {
        let wm = WorldModel::new(WMConfig::default(), 0).unwrap();
        assert!(wm.param_count() < 600_000, "{}", wm.param_count());
    }

    #[test]
    fn sigma_positive_and_deterministic() {
        let wm = WorldModel::new(WMConfig::default(), 3).unwrap();
        let tr = random_trajectory("a", 12, Mode::None, 2);
        let t = tok();
        let win = HistoryWindow { states: &tr.states[..8], actions: &tr.actions[..8] };
        let (g1, p1) = wm.forward(&win, &t).unwrap();
        let (g2, p2) = wm.forward(&win, &t).unwrap();
        assert!(g1.sigma.iter().all(|&s| s >= SIGMA_FLOOR));
        assert_eq!((g1, p1), (g2, p2));
    }

    #[test]
    fn oldest_action_conditions_prediction() {
        let wm = WorldModel::new(WMConfig::default(), 4).unwrap();
        let tr = random_trajectory("a", 12, Mode::None, 3);
        let t = tok();
        let win = HistoryWindow { states: &tr.states[..8], actions: &tr.actions[..8] };
        let (a, _) = wm.forward(&win, &t).unwrap();
        let mut acts = tr.actions[..8].to_vec();
        acts[0].delta[0] += 0.02;
        let win2 = HistoryWindow { states: &tr.states[..8], actions: &acts };
        let (b, _) = wm.forward(&win2, &t).unwrap();
        let diff: f32 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-4, "{diff}");
    }

    #[test]
    fn rollout_base_case_and_determinism() {
        let wm = WorldModel::new(WMConfig::default(), 5).unwrap();
        let tr = random_trajectory("a", 12, Mode::None, 4);
        let t = tok();
        let win = HistoryWindow { states: &tr.states[..8], actions: &tr.actions[..8] };
        let one = wm
            .rollout_autoregressive(&win, 1, &[], &t, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(one[0], wm.forward(&win, &t).unwrap());
        let run = || {
            wm.rollout_autoregressive(&win, 2, &tr.actions[8..9], &t, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert!(wm.rollout_autoregressive(&win, 64, &tr.actions, &t, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(wm.rollout_autoregressive(&win, 3, &[], &t, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn interleave_is_time_major() {
        let idx = interleave_index(2, 1);
        // rows: vis0 vis1 prop0 prop1 act0 act1 -> vis0 prop0 act0 vis1 prop1 act1
        assert_eq!(&idx[..], &[0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn pooled_visual_matches_graph_feedback() {
        let t = tok();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z: Vec<f32> = (0..LATENT_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = pool_latent(&t.encode(&t.decode(&z).unwrap()).unwrap());
        let mut g = Graph::<f32>::new();
        let tb = g.bind_frozen(t.params());
        let zv = g.constant(Tensor::new(vec![LATENT_LEN], z).unwrap());
        let (v, _) = feedback_visual(&mut g, &tb, zv, VisualToken::MeanPool);
        for (a, b) in g.value(v).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
