//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Evenly spread coordinate sample, at most `cap` of `n`.
fn sample(n: usize, cap: usize) -> impl Iterator<Item = usize> {
    let step = n.div_ceil(cap.max(1)).max(1);
    (0..n).step_by(step)
}

/// Largest relative error between backprop and central differences over
/// up to `per_param` coordinates of every trainable parameter. Frozen
/// parameters are skipped.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, per_param: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        g.value(loss).item()
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.get(id).tensor.len();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in sample(n, per_param) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + eps;
            let lp = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - eps;
            let lm = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (lp - lm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Same check with respect to graph inputs rather than parameters.
pub fn grad_check_inputs<F>(inputs: &[Tensor], eps: f64, per_input: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let run = |ts: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| if grad { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let loss = f(&mut g, &vars)?;
        let l = g.value(loss).item()?;
        if !grad {
            return Ok((l, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let per = vars
            .iter()
            .zip(ts)
            .map(|(v, t)| gr.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((l, per))
    };
    let (_, analytic) = run(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..work.len() {
        for i in sample(work[k].len(), per_input) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let (lp, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig - eps;
            let (lm, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k][i], (lp - lm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
