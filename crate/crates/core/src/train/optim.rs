use candle_core::backprop::GradStore;
use candle_core::{DType, Storage, Tensor, Var};

use crate::error::Result;

/// Adam with bias correction and no weight decay. Moments are kept as plain
/// `f64` buffers and updated in a single fused pass per variable.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        let v = vars.iter().map(|v| vec![0.0; v.elem_count()]).collect();
        Adam {
            vars,
            m,
            v,
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = as_f64(g)?;
            let theta = as_f64(var.as_tensor())?;
            let next: Vec<f64> = with_slice(&theta, |theta| {
                with_slice(&g, |g| {
                    theta
                        .iter()
                        .zip(g)
                        .zip(m.iter_mut().zip(v.iter_mut()))
                        .map(|((&p, &g), (m, v))| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            p - lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                        })
                        .collect()
                })
            })??;
            let t = Tensor::from_vec(next, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

fn as_f64(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?.contiguous()?)
}

/// Runs `f` on the contiguous `f64` data of `t` without copying it.
fn with_slice<R>(t: &Tensor, f: impl FnOnce(&[f64]) -> R) -> Result<R> {
    let (storage, layout) = t.storage_and_layout();
    let Storage::Cpu(cpu) = &*storage else {
        return Err(crate::error::Error::Unsupported(
            "optimizer runs on CPU tensors only".into(),
        ));
    };
    let data = cpu.as_slice::<f64>()?;
    let start = layout.start_offset();
    Ok(f(&data[start..start + t.elem_count()]))
}
