//! Central finite-difference oracle for gradient tests.
//!
//! Only forward evaluations are used here, so the checks stay independent of
//! the backward rules they verify.

use crate::tol::FD_STEP;
use crate::{Graph, ParamStore, Real, Result, Tensor, Var};

/// Entries smaller than this are compared on an absolute scale.
pub const REL_FLOOR: Real = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`, maximized over entries.
pub fn max_rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, Real::max)
}

fn eval_scalar<F>(input: &Tensor, f: &F) -> Result<Real>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.leaf(input.clone().requiring_grad());
    Ok(f(&g, x)?.item())
}

/// Numerical gradient of `f` at `input`.
pub fn numeric_input_grad<F>(input: &Tensor, f: &F) -> Result<Vec<Real>>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let mut out = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + FD_STEP;
        let fp = eval_scalar(&probe, f)?;
        probe.data_mut()[i] = x0 - FD_STEP;
        let fm = eval_scalar(&probe, f)?;
        probe.data_mut()[i] = x0;
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Max relative error between backward and central differences for a
/// scalar function of one input tensor.
pub fn check_input_grad<F>(input: &Tensor, f: F) -> Result<Real>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.leaf(input.clone().requiring_grad());
    let loss = f(&g, x)?;
    let grads = g.backward(loss)?;
    let analytic = match grads.wrt(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; input.len()],
    };
    let numeric = numeric_input_grad(input, &f)?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Same check for every scalar of every parameter in `store`.
/// `f` must build the loss from the given store.
pub fn check_param_grads<F>(store: &ParamStore, f: F) -> Result<Real>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let analytic: Vec<Real> = g
        .backward(loss)?
        .for_store(store)
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    let mut probe = store.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let x0 = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + FD_STEP;
            let fp = {
                let g = Graph::new();
                f(&g, &probe)?.item()
            };
            probe.get_mut(id).data_mut()[i] = x0 - FD_STEP;
            let fm = {
                let g = Graph::new();
                f(&g, &probe)?.item()
            };
            probe.get_mut(id).data_mut()[i] = x0;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(max_rel_err(&analytic, &numeric))
}
