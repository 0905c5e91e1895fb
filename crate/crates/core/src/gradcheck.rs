//! Central finite-difference gradient checks in double precision.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Step sizes tried per coordinate; the smallest disagreement counts, so a
/// ReLU kink straddled by one step does not fail the check.
pub const STEPS: [f64; 3] = [1e-6, 1e-7, 1e-5];
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((name.to_string(), i, analytic, numeric));
        }
    }
}

fn coords(n: usize, max: usize, salt: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    index::sample(&mut ChaCha8Rng::seed_from_u64(salt as u64), n, max).into_vec()
}

fn best_numeric(analytic: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best: Option<f64> = None;
    for h in STEPS {
        let n = (eval(h)? - eval(-h)?) / (2.0 * h);
        if best.is_none_or(|b| rel_error(analytic, n) < rel_error(analytic, b)) {
            best = Some(n);
        }
    }
    Ok(best.unwrap())
}

/// Checks `∂f/∂x` for every input tensor on up to `max_coords` coordinates
/// each.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], max_coords: usize, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let grads = tape.backward(f(&tape, &vars)?);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();
    let eval = |k: usize, i: usize, d: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(j, x)| {
                let mut x = x.clone();
                if j == k {
                    x.data_mut()[i] += d;
                }
                tape.constant(x)
            })
            .collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut report = GradCheck::default();
    for (k, x) in inputs.iter().enumerate() {
        for i in coords(x.numel(), max_coords, k) {
            let a = analytic[k].data()[i];
            let n = best_numeric(a, |d| eval(k, i, d))?;
            report.record(&format!("input{k}"), i, a, n);
        }
    }
    Ok(report)
}

/// Checks `∂f/∂θ` for the parameters of `group`, on up to `per_param`
/// coordinates of each tensor. Other groups are held constant.
pub fn check_params<F>(store: &ParamStore<f64>, group: ParamGroup, per_param: usize, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&Binding<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let p = store.bind(&tape, |g| g == group);
    let mut grads = tape.backward(f(&p)?);
    let analytic: std::collections::HashMap<_, _> = p.collect_grads(&mut grads).into_iter().collect();
    let mut report = GradCheck::default();
    for (id, param) in store.iter().filter(|(_, p)| p.group == group) {
        let zeros = Tensor::zeros(param.value.shape().to_vec());
        let a_tensor = analytic.get(&id).unwrap_or(&zeros);
        for i in coords(param.value.numel(), per_param, id.index()) {
            let a = a_tensor.data()[i];
            let n = best_numeric(a, |d| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[i] += d;
                let tape = Tape::new();
                Ok(f(&s.bind_frozen(&tape))?.item())
            })?;
            report.record(&param.name, i, a, n);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes_and_wrong_gradient_is_caught() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]);
        let ok = check_inputs(std::slice::from_ref(&x), 10, |_, v| Ok(v[0].tanh().sqr().sum())).unwrap();
        assert_eq!(ok.checked, 4);
        assert!(ok.max_rel_error < 1e-7, "{ok:?}");
        // `abs` is non-differentiable at 0 only; away from it the check holds.
        let abs = check_inputs(&[x], 10, |_, v| Ok(v[0].abs().mean())).unwrap();
        assert!(abs.max_rel_error < 1e-7);
        assert!(rel_error(1.0, 1.1) > 0.09);
    }
}
