use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named leaves handed to a loss closure.
pub type BoundParams = BTreeMap<String, Var>;

/// Which coordinates of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_tensor` coordinates per tensor, drawn without replacement.
    Sampled { per_tensor: usize, seed: u64 },
}

fn evaluate<F>(f: &F, params: &BTreeMap<String, Tensor>) -> Result<(Graph, Var)>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(name.clone(), t.clone())))
        .collect();
    let loss = f(&mut g, &bound)?;
    Ok((g, loss))
}

/// Compares reverse-mode gradients with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` and returns the largest relative error, measured
/// against `max(|analytic|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &BTreeMap<String, Tensor>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    finite_diff_check_with(f, params, eps, Coordinates::All)
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
    coords: Coordinates,
) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let (g, loss) = evaluate(&f, params)?;
    let grads = g.backward(loss)?;
    let mut rng = match coords {
        Coordinates::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, tensor) in params {
        let n = tensor.numel();
        let indices: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sampled { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                rand::seq::index::sample(rng, n, per_tensor).into_vec()
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let base = tensor.data()[i];
            let analytic = grads.get(name).map_or(0.0, |t| t.data()[i]);
            let mut probe = |delta: f64| -> Result<f64> {
                work.get_mut(name).expect("same keys").data_mut()[i] = base + delta;
                let (g, l) = evaluate(&f, &work)?;
                Ok(g.value(l).data()[0])
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            work.get_mut(name).expect("same keys").data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
