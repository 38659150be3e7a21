//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between analytic and
/// numerical gradients, one entry per checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub names: Vec<String>,
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .sum())
}

/// Compares gradients of the scalar `f(inputs)` with respect to each input.
/// Inputs should be `f64`.
pub fn check_input_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars = inputs
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<Vec<_>>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.sum_all()?.backward()?;
    let mut out = GradCheck {
        names: Vec::new(),
        rel_errors: Vec::new(),
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = match grads.get(&tensors[k]) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; input.elem_count()],
        };
        let base = input.flatten_all()?.to_vec1::<f64>()?;
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                let mut args = inputs.to_vec();
                args[k] = Tensor::from_vec(v, input.shape(), input.device())?;
                scalar(&f(&args)?)
            };
            numeric.push((eval(eps)? - eval(-eps)?) / (2.0 * eps));
        }
        out.names.push(format!("input{k}"));
        out.rel_errors.push(rel_error(&analytic, &numeric));
    }
    Ok(out)
}

/// Compares gradients of `loss()` with respect to every trainable parameter
/// of `store`, perturbing parameters in place.
pub fn check_param_gradients<F>(store: &ParamStore, loss: F, eps: f64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::Unsupported(
            "gradient checks need an f64 store".into(),
        ));
    }
    let grads = loss()?.sum_all()?.backward()?;
    let mut out = GradCheck {
        names: Vec::new(),
        rel_errors: Vec::new(),
    };
    for (name, var) in store.named_vars() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let original = var.as_tensor().copy()?;
        let base = original.flatten_all()?.to_vec1::<f64>()?;
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, original.shape(), original.device())?)?;
                scalar(&loss()?)
            };
            let hi = eval(eps)?;
            let lo = eval(-eps)?;
            numeric.push((hi - lo) / (2.0 * eps));
        }
        var.set(&original)?;
        out.names.push(name);
        out.rel_errors.push(rel_error(&analytic, &numeric));
    }
    Ok(out)
}
