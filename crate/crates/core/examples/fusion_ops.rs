//! The three fusion operators at full size, plus the FFT circular convolution
//! against its direct definition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::fusion::{circular_convolution, Fusion, FusionDims, FusionKind, ModalityVectors};

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn main() -> semfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = FusionDims::with_image_inter(512);
    let (t, ti) = (
        random(&mut rng, dims.text),
        random(&mut rng, dims.text_inter),
    );
    let (i, ii) = (
        random(&mut rng, dims.image),
        random(&mut rng, dims.image_inter),
    );
    let v = ModalityVectors {
        text_final: &t,
        text_inter: &ti,
        image_final: &i,
        image_inter: &ii,
    };
    for kind in [FusionKind::Concat, FusionKind::GatedMcb, FusionKind::Mfas] {
        let fused = Fusion::new(kind, dims, 0)?.fuse(&v)?;
        let (lo, hi) = fused
            .values()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        println!("{kind}: |F| = {}, range [{lo:.3}, {hi:.3}]", fused.dim());
    }

    let (a, b) = (random(&mut rng, 16), random(&mut rng, 16));
    let fft = circular_convolution(&a, &b)?;
    let err = (0..16)
        .map(|k| {
            let direct: f64 = (0..16).map(|j| a[j] * b[(k + 16 - j) % 16]).sum();
            (direct - fft[k]).abs()
        })
        .fold(0.0, f64::max);
    println!("circular convolution: max |fft - direct| = {err:.2e}");
    Ok(())
}
