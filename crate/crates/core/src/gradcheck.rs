//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever runs forward passes, so it stays independent of
//! every backward rule it is used to verify.

use crate::nn::{ParamId, ParamStore};
use crate::tape::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error: gradients whose magnitude is below
/// this are compared with an absolute tolerance of `rel_tol * FLOOR`.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= rel_tol
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every entry of the listed parameters.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let mut report = GradCheckReport::new();
    for &id in ids {
        let n = store.value(id).data.len();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).rows, store.value(id).cols));
        for k in 0..n {
            let orig = store.value(id).data[k];
            store.value_mut(id).data[k] = orig + step;
            let plus = eval(store, &f);
            store.value_mut(id).data[k] = orig - step;
            let minus = eval(store, &f);
            store.value_mut(id).data[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(
                || format!("{}[{k}]", store.name(id)),
                analytic.data[k],
                numeric,
            );
        }
    }
    report
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    g.value(out).item()
}

/// Same as [`check_params`] but differentiating with respect to input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let run = |ts: &[Tensor], track: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| {
                if track {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = run(inputs, true);
    let grads = g.backward(out);
    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .of(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].rows, inputs[i].cols));
        for k in 0..inputs[i].data.len() {
            let orig = work[i].data[k];
            work[i].data[k] = orig + step;
            let (gp, _, op) = run(&work, false);
            work[i].data[k] = orig - step;
            let (gm, _, om) = run(&work, false);
            work[i].data[k] = orig;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * step);
            report.record(|| format!("input{i}[{k}]"), analytic.data[k], numeric);
        }
    }
    report
}
