//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward kernels it verifies.

use crate::error::Result;

use super::{Graph, Mode, ParamStore, Tensor, Var};

/// Normwise relative error `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

/// Checks the gradient of a scalar function with respect to each input
/// tensor. `build` records the computation on a fresh graph and returns the
/// scalar node. Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], mode: Mode, h: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errors)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl ParamCheck {
    /// Relative error below `tol`, or, for a gradient that is structurally
    /// zero (softmax is blind to a bias added to every key), a numeric
    /// gradient at rounding level.
    pub fn passes(&self, tol: f64) -> bool {
        if self.analytic_norm < 1e-12 {
            self.numeric_norm < 1e-8
        } else {
            self.relative_error < tol
        }
    }
}

/// Checks the gradient of `loss` with respect to every trainable parameter
/// in `store`. `loss` records a forward pass and returns the graph and its
/// scalar node.
pub fn check_params<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    store.zero_grad();
    let (mut g, root) = loss(store)?;
    g.backward(root)?;
    g.accumulate_param_grads(store);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.clone().unwrap_or_default();
        let n = store.get(id).tensor.numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let (g, r) = loss(store)?;
            let up = g.value(r).data()[0];
            store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let (g, r) = loss(store)?;
            let down = g.value(r).data()[0];
            store.get_mut(id).tensor.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            relative_error: relative_error(&analytic, &numeric),
            analytic_norm: norm(&analytic),
            numeric_norm: norm(&numeric),
        });
    }
    Ok(out)
}
