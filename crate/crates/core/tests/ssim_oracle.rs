mod common;

use common::{rng, uniform};
use demoire::losses::{ssim_map, SsimParams};
use demoire::metrics::ssim_index;
use demoire::Tensor;

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Windowed SSIM evaluated one pixel at a time with a full 2-D window.
fn brute_force_ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Tensor {
    let r = (p.window / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * p.sigma * p.sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let w1: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let (c1, c2) = ((p.k1 * p.dynamic_range).powi(2), (p.k2 * p.dynamic_range).powi(2));
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, i, j| {
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for di in -r..=r {
            for dj in -r..=r {
                let wt = w1[(di + r) as usize] * w1[(dj + r) as usize];
                let ii = mirror(i as isize + di, h);
                let jj = mirror(j as isize + dj, w);
                let (a, bb) = (x.get(b, ch, ii, jj), y.get(b, ch, ii, jj));
                mx += wt * a;
                my += wt * bb;
                sxx += wt * a * a;
                syy += wt * bb * bb;
                sxy += wt * a * bb;
            }
        }
        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    })
}

#[test]
fn ssim_map_matches_sliding_window_oracle() {
    let params = SsimParams::default();
    let mut r = rng(21);
    for _ in 0..3 {
        let x = uniform([1, 1, 32, 32], &mut r);
        let y = uniform([1, 1, 32, 32], &mut r);
        let fast = ssim_map(&x, &y, &params).unwrap();
        let slow = brute_force_ssim(&x, &y, &params);
        let worst = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max deviation {worst}");
    }
}

#[test]
fn oracle_agrees_on_images_smaller_than_the_window() {
    let params = SsimParams::default();
    let mut r = rng(22);
    let x = uniform([2, 2, 5, 7], &mut r);
    let y = uniform([2, 2, 5, 7], &mut r);
    let fast = ssim_map(&x, &y, &params).unwrap();
    let slow = brute_force_ssim(&x, &y, &params);
    let worst = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn self_similarity_is_one() {
    let x = uniform([1, 3, 24, 24], &mut rng(23));
    assert!((ssim_index(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn constant_black_against_white() {
    let params = SsimParams::default();
    let a = Tensor::zeros([1, 3, 16, 16]);
    let b = Tensor::full([1, 3, 16, 16], 1.0);
    let c1 = params.c1();
    let expected = c1 / (1.0 + c1);
    assert!((ssim_index(&a, &b, &params).unwrap() - expected).abs() < 1e-7);
    assert!((expected - 9.999e-5).abs() < 1e-8);
}
