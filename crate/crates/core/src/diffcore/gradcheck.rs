//! Central finite differences as a reference for analytic gradients.
//!
//! These helpers panic when the function under test fails to build, which
//! is what a test harness wants.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Relative error with the denominator floored at `1e-6`, so gradients that
/// are zero up to rounding compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_scaled(a, b, 1.0)
}

/// [`rel_err`] with the floor raised to `1e-6 · scale` when `scale > 1`.
/// Central differences carry absolute rounding noise proportional to the
/// function's magnitude, so entries far below the largest gradient entry
/// cannot be resolved relatively. Callers pass the largest analytic entry.
pub fn rel_err_scaled(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * scale.max(1.0))
}

fn max_abs<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    ts.into_iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

/// Builds `f` on fresh graphs and compares the analytic gradient of its
/// scalar output against central differences for every entry of every
/// input. Returns the worst relative error, floored as in
/// [`rel_err_scaled`].
pub fn check<'p, F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<'p>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).expect("function under test");
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("function under test");
        g.value(out).item()
    };
    let scale = max_abs(&analytic);
    let mut worst = 0.0f64;
    for (which, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err_scaled(analytic[which].data()[j], numeric, scale));
        }
    }
    worst
}

/// Like [`check`], but perturbs the parameter entries listed in `coords`
/// (parameter, flat offset) instead of graph inputs. `f` builds the scalar
/// loss from the store.
pub fn check_params<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], h: f64, f: F) -> f64
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new();
        let out = f(&mut g, store).expect("function under test");
        g.backward(out).expect("backward");
        g.param_grads(store)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::no_grad();
        let out = f(&mut g, store).expect("function under test");
        g.value(out).item()
    };
    let scale = coords
        .iter()
        .filter_map(|&(id, j)| grads.get(id).map(|t| t.data()[j].abs()))
        .fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for &(id, j) in coords {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = eval(store);
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = eval(store);
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
        worst = worst.max(rel_err_scaled(analytic, numeric, scale));
    }
    worst
}

/// Every entry of every parameter, for exhaustive [`check_params`] runs.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |j| (id, j)))
        .collect()
}
