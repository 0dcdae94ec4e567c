//! Central-difference verification of analytic adjoints.

use super::graph::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.numel() != 1 {
        return shape_err(format!("grad_check: closure must return a scalar, got {:?}", t.shape()));
    }
    Ok(t.item())
}

/// Largest relative disagreement between the tape's adjoints and central
/// differences, over every coordinate of every input.
///
/// The error of one coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but perturbs selected coordinates of stored parameters.
///
/// `coords` lists `(parameter, flat index)` pairs. The store is restored
/// before returning.
pub fn grad_check_params<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut analytic = std::collections::HashMap::new();
    for (id, t) in grads.param_grads() {
        analytic.insert(id, t.clone());
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    for &(id, j) in coords {
        let orig = store.value(id).data()[j];
        store.get_mut(id).value.data_mut()[j] = orig + h;
        let plus = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig - h;
        let minus = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic.get(&id).map_or(0.0, |t| t.data()[j]);
        worst = worst.max(rel_err(a, numeric));
    }
    Ok(worst)
}
