use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Bound, Graph, Var};
use super::params::ParamSet;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// A scalar-valued differentiable function of a parameter set.
///
/// Implementations build the computation into the supplied graph and return
/// the scalar loss variable. The function must be deterministic.
pub trait Objective<T: Scalar> {
    fn build(&self, g: &mut Graph<T>, p: &Bound) -> Var;
}

impl<T: Scalar, F> Objective<T> for F
where
    F: Fn(&mut Graph<T>, &Bound) -> Var,
{
    fn build(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        self(g, p)
    }
}

fn eval<T: Scalar, O: Objective<T>>(obj: &O, params: &ParamSet<T>) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.bind_frozen(params);
    let out = obj.build(&mut g, &b);
    let v = g.value(out).item().as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients against central finite differences.
///
/// Checks every element when there are at most `max_elements`, otherwise a
/// seeded random subsample of that size. Returns the maximum of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<T: Scalar, O: Objective<T>>(
    obj: &O,
    params: &ParamSet<T>,
    eps: f64,
    max_elements: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-5, 1e-2]")));
    }
    let mut g = Graph::new();
    let bound = g.bind(params);
    let out = obj.build(&mut g, &bound);
    if !g.value(out).item().as_f64().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let analytic = g.backward(out).to_params(&g, &bound);
    if !analytic.all_finite() {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }

    let slots: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let picked: Vec<usize> = if slots.len() <= max_elements {
        (0..slots.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, slots.len(), max_elements).into_vec();
        v.sort_unstable();
        v
    };

    let mut worst = 0.0f64;
    let mut work = params.clone();
    for idx in picked {
        let (name, i) = &slots[idx];
        let orig = work.get(name).unwrap().data()[*i];
        work.get_mut(name).unwrap().data_mut()[*i] = orig + T::of(eps);
        let up = eval(obj, &work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig - T::of(eps);
        let down = eval(obj, &work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = analytic.get(name).unwrap().data()[*i].as_f64();
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
