use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{check_dim, Error, Result};

/// `out[k] = sum_j a[j] * b[(k - j) mod D]`, computed with FFTs.
pub fn circular_convolution(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim("circular convolution operand", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Dimension {
            what: "circular convolution operand",
            expected: 1,
            got: 0,
        });
    }
    let mut out = vec![0.0; a.len()];
    let mut planner = FftPlanner::new();
    convolve_rows(&mut planner, a.len(), a, b, &mut out);
    Ok(out)
}

/// Convolves consecutive rows of length `n`.
fn convolve_rows(planner: &mut FftPlanner<f64>, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = Vec::with_capacity(n);
    let mut fb: Vec<Complex64> = Vec::with_capacity(n);
    for ((ra, rb), ro) in a.chunks(n).zip(b.chunks(n)).zip(out.chunks_mut(n)) {
        fa.clear();
        fb.clear();
        fa.extend(ra.iter().map(|&v| Complex64::new(v, 0.0)));
        fb.extend(rb.iter().map(|&v| Complex64::new(v, 0.0)));
        fwd.process(&mut fa);
        fwd.process(&mut fb);
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x *= y;
        }
        inv.process(&mut fa);
        for (o, v) in ro.iter_mut().zip(&fa) {
            *o = v.re / n as f64;
        }
    }
}

/// Row-wise circular convolution of two `[.., D]` tensors as a graph op.
struct CircConv;

fn as_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l.contiguous_offsets().ok_or_else(|| {
        candle_core::Error::Msg("circular convolution needs contiguous input".into())
    })?;
    Ok(match s {
        CpuStorage::F64(v) => v[start..end].to_vec(),
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        other => {
            return Err(candle_core::Error::UnsupportedDTypeForOp(
                other.dtype(),
                "circular_convolution",
            ))
        }
    })
}

impl CustomOp2 for CircConv {
    fn name(&self) -> &'static str {
        "circular_convolution"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            return Err(candle_core::Error::ShapeMismatchBinaryOp {
                lhs: l1.shape().clone(),
                rhs: l2.shape().clone(),
                op: "circular_convolution",
            });
        }
        let n = *l1.shape().dims().last().unwrap_or(&0);
        if n == 0 {
            return Err(candle_core::Error::Msg(
                "circular convolution of empty rows".into(),
            ));
        }
        let a = as_f64(s1, l1)?;
        let b = as_f64(s2, l2)?;
        let mut out = vec![0.0; a.len()];
        convolve_rows(&mut FftPlanner::new(), n, &a, &b, &mut out);
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, l1.shape().clone()))
    }

    /// The adjoint of convolving with `b` is correlating with `b`, which is a
    /// convolution with the index-reversed `b`.
    fn bwd(
        &self,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let n = a.dim(candle_core::D::Minus1)?;
        let rev: Vec<u32> = (0..n).map(|m| ((n - m) % n) as u32).collect();
        let rev = Tensor::new(rev.as_slice(), a.device())?;
        let last = a.rank() - 1;
        let grad = grad.contiguous()?;
        let a_rev = a.index_select(&rev, last)?.contiguous()?;
        let b_rev = b.index_select(&rev, last)?.contiguous()?;
        let ga = grad.apply_op2_no_bwd(&b_rev, &CircConv)?;
        let gb = grad.apply_op2_no_bwd(&a_rev, &CircConv)?;
        Ok((Some(ga), Some(gb)))
    }
}

/// Differentiable row-wise circular convolution over the last dimension.
pub fn circular_convolution_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension {
            what: "circular convolution operand",
            expected: a.elem_count(),
            got: b.elem_count(),
        });
    }
    Ok(a.contiguous()?.apply_op2(&b.contiguous()?, CircConv)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn direct(a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = a.len();
        (0..n)
            .map(|k| (0..n).map(|j| a[j] * b[(k + n - j) % n]).sum())
            .collect()
    }

    #[test]
    fn delta_is_identity() {
        let mut a = vec![0.0; 9];
        a[0] = 1.0;
        let b: Vec<f64> = (0..9).map(|i| i as f64 - 3.5).collect();
        let out = circular_convolution(&a, &b).unwrap();
        for (o, v) in out.iter().zip(&b) {
            assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = circular_convolution(&a, &b).unwrap();
        for (x, y) in fast.iter().zip(direct(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(circular_convolution(&[1.0; 4], &[1.0; 5]).is_err());
        assert!(circular_convolution(&[], &[]).is_err());
    }

    #[test]
    fn tensor_op_matches_slices_batched() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..3 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::from_vec(a.clone(), (3, 7), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b.clone(), (3, 7), &Device::Cpu).unwrap();
        let got = circular_convolution_tensor(&ta, &tb)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for r in 0..3 {
            let want = direct(&a[r * 7..(r + 1) * 7], &b[r * 7..(r + 1) * 7]);
            for (x, y) in got[r].iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_direct_adjoint() {
        let n = 6;
        let a = Var::new(&[0.3, -1.0, 2.0, 0.5, 0.0, 1.5], &Device::Cpu).unwrap();
        let b = Var::new(&[1.0, 0.25, -0.5, 2.0, -1.0, 0.75], &Device::Cpu).unwrap();
        let w = [1.0, -2.0, 0.5, 3.0, -1.0, 0.2];
        let wt = Tensor::new(&w, &Device::Cpu).unwrap();
        let out = circular_convolution_tensor(a.as_tensor(), b.as_tensor()).unwrap();
        let grads = (out * &wt).unwrap().sum_all().unwrap().backward().unwrap();
        let ga = grads.get(a.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let av = a.as_tensor().to_vec1::<f64>().unwrap();
        let bv = b.as_tensor().to_vec1::<f64>().unwrap();
        for j in 0..n {
            let want: f64 = (0..n).map(|k| w[k] * bv[(k + n - j) % n]).sum();
            assert!((ga[j] - want).abs() < 1e-12);
        }
        let gb = grads.get(b.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for m in 0..n {
            let want: f64 = (0..n).map(|k| w[k] * av[(k + n - m) % n]).sum();
            assert!((gb[m] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn commutative(a in prop::collection::vec(-5.0f64..5.0, 1..40usize), seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let ab = circular_convolution(&a, &b).unwrap();
            let ba = circular_convolution(&b, &a).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
