#![allow(dead_code)]

use demoire::data::SamplePair;
use demoire::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen::<f64>())
}

pub fn normal(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// A smooth clean image with a coloured sinusoidal interference added on top.
pub fn synthetic_pair(index: usize, height: usize, width: usize) -> SamplePair {
    let i = index as f64;
    let clean = Tensor::from_fn([1, 3, height, width], |_, c, h, w| {
        let (x, y) = (w as f64 / width as f64, h as f64 / height as f64);
        let c = c as f64;
        0.25 + 0.5 * (0.3 * x + 0.1 * y * (c + 1.0) + 0.4 * ((3.0 * x + i) * (2.0 * y + 0.5)).sin().abs())
    });
    let f = 0.9 + 0.25 * i;
    let moire = Tensor::from_fn([1, 3, height, width], |_, c, h, w| {
        let v = clean.get(0, c, h, w) + 0.08 * (f * w as f64 + 0.7 * f * h as f64 + 2.1 * c as f64).sin();
        v.clamp(0.0, 1.0)
    });
    SamplePair::new(format!("img{index:03}"), moire, clean).unwrap()
}

/// Central finite differences of `f` at every element of `x`.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
