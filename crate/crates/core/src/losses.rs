//! Training objective: pixel MSE, windowed SSIM loss and Sobel edge loss.
//!
//! Each loss is available as a plain function of two tensors and as a
//! `*_with_grad` variant that also returns the analytic gradient with respect
//! to the prediction. The graph sees the losses as external scalars.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::reflect_index;
use crate::tensor::Tensor;

/// Windowed SSIM settings. Constants follow Wang et al.: `c1 = (k1·L)²`, `c2 = (k2·L)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window must be odd, got {}", self.window)));
        }
        if ![self.sigma, self.c1(), self.c2()].iter().all(|v| *v > 0.0) {
            return Err(Error::Config("SSIM sigma and constants must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Per-term values of the composite objective on the final prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ssim_loss: f64,
    pub sobel_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Unit-weight sum, accumulated as `(mse + ssim) + sobel`.
    pub fn from_components(mse: f64, ssim_loss: f64, sobel_loss: f64) -> Self {
        LossBreakdown {
            mse,
            ssim_loss,
            sobel_loss,
            total: mse + ssim_loss + sobel_loss,
        }
    }
}

/// Relative weights of the three terms. Unit weights reproduce the plain sum exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 3]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0, 1.0, 1.0])
    }
}

impl LossWeights {
    fn combine(&self, mse: f64, ssim: f64, sobel: f64) -> f64 {
        let [a, b, c] = self.0;
        a * mse + b * ssim + c * sobel
    }
}

fn same_shape(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Mean of `(gt − pred)²` over every element.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_loss_with_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    let value = mse_loss(pred, gt)?;
    let m = pred.len() as f64;
    let grad = pred.zip_map(gt, |p, y| 2.0 * (p - y) / m)?;
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// SSIM

/// Separable Gaussian blur of one plane with reflect padding.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * row[reflect_index(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (i, t) in taps.iter().enumerate() {
            let src = reflect_index(y as isize + i as isize - r, h);
            let (dst, srow) = (&mut out[y * w..(y + 1) * w], &tmp[src * w..(src + 1) * w]);
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += t * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur`].
fn blur_adjoint(grad: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for (i, t) in taps.iter().enumerate() {
            let dst = reflect_index(y as isize + i as isize - r, h);
            for x in 0..w {
                tmp[dst * w + x] += t * grad[y * w + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (i, t) in taps.iter().enumerate() {
                out[y * w + reflect_index(x as isize + i as isize - r, w)] += t * g;
            }
        }
    }
    out
}

/// Window moments of one channel plane pair.
struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    mxx: Vec<f64>,
    myy: Vec<f64>,
    mxy: Vec<f64>,
}

impl Moments {
    fn new(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> Self {
        let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
        Moments {
            mx: blur(x, h, w, taps),
            my: blur(y, h, w, taps),
            mxx: blur(&sq(x, x), h, w, taps),
            myy: blur(&sq(y, y), h, w, taps),
            mxy: blur(&sq(x, y), h, w, taps),
        }
    }

    /// Returns `(A1, A2, B1, B2)` at pixel `i`; SSIM is `A1·A2 / (B1·B2)`.
    fn terms(&self, i: usize, c1: f64, c2: f64) -> (f64, f64, f64, f64) {
        let (mx, my) = (self.mx[i], self.my[i]);
        let var_x = self.mxx[i] - mx * mx;
        let var_y = self.myy[i] - my * my;
        let cov = self.mxy[i] - mx * my;
        (
            2.0 * mx * my + c1,
            2.0 * cov + c2,
            mx * mx + my * my + c1,
            var_x + var_y + c2,
        )
    }
}

/// Per-pixel SSIM, same shape as the inputs.
pub fn ssim_map(pred: &Tensor, gt: &Tensor, params: &SsimParams) -> Result<Tensor> {
    same_shape(pred, gt)?;
    params.validate()?;
    let [n, c, h, w] = pred.shape();
    let taps = params.gaussian_taps();
    let (c1, c2) = (params.c1(), params.c2());
    let mut out = Tensor::zeros(pred.shape());
    for b in 0..n {
        for ch in 0..c {
            let m = Moments::new(pred.plane(b, ch), gt.plane(b, ch), h, w, &taps);
            for (i, o) in out.plane_mut(b, ch).iter_mut().enumerate() {
                let (a1, a2, b1, b2) = m.terms(i, c1, c2);
                *o = (a1 * a2) / (b1 * b2);
            }
        }
    }
    Ok(out)
}

/// `1 − mean(ssim_map)`.
pub fn ssim_loss(pred: &Tensor, gt: &Tensor, params: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim_map(pred, gt, params)?.mean())
}

pub fn ssim_loss_with_grad(pred: &Tensor, gt: &Tensor, params: &SsimParams) -> Result<(f64, Tensor)> {
    same_shape(pred, gt)?;
    params.validate()?;
    let [n, c, h, w] = pred.shape();
    let taps = params.gaussian_taps();
    let (c1, c2) = (params.c1(), params.c2());
    let dl_ds = -1.0 / pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let (x, y) = (pred.plane(b, ch), gt.plane(b, ch));
            let m = Moments::new(x, y, h, w, &taps);
            let mut g_mx = vec![0.0; hw];
            let mut g_mxx = vec![0.0; hw];
            let mut g_mxy = vec![0.0; hw];
            for i in 0..hw {
                let (a1, a2, b1, b2) = m.terms(i, c1, c2);
                let den = b1 * b2;
                let s = a1 * a2 / den;
                sum += s;
                let (mx, my) = (m.mx[i], m.my[i]);
                g_mx[i] = dl_ds * (2.0 * my * (a2 - a1) / den - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2));
                g_mxx[i] = dl_ds * (-s / b2);
                g_mxy[i] = dl_ds * (2.0 * a1 / den);
            }
            let back_mx = blur_adjoint(&g_mx, h, w, &taps);
            let back_mxx = blur_adjoint(&g_mxx, h, w, &taps);
            let back_mxy = blur_adjoint(&g_mxy, h, w, &taps);
            for (i, gv) in grad.plane_mut(b, ch).iter_mut().enumerate() {
                *gv = back_mx[i] + 2.0 * x[i] * back_mxx[i] + y[i] * back_mxy[i];
            }
        }
    }
    // Matches `ssim_loss`: the mean is taken the same way.
    let value = 1.0 - sum / pred.len() as f64;
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Sobel

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Separable Sobel response: smooth with `[1, 2, 1]` across the derivative
/// axis, then take the central difference along it. Exact zero on constants.
fn sobel_plane(plane: &[f64], h: usize, w: usize, horizontal: bool, out: &mut [f64]) {
    let at = |y: isize, x: isize| plane[reflect_index(y, h) * w + reflect_index(x, w)];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let smooth = |dy: isize, dx: isize| {
                if horizontal {
                    at(y - 1, x + dx) + 2.0 * at(y, x + dx) + at(y + 1, x + dx)
                } else {
                    at(y + dy, x - 1) + 2.0 * at(y + dy, x) + at(y + dy, x + 1)
                }
            };
            out[y as usize * w + x as usize] = if horizontal {
                smooth(0, 1) - smooth(0, -1)
            } else {
                smooth(1, 0) - smooth(-1, 0)
            };
        }
    }
}

fn correlate3_adjoint(grad: &[f64], h: usize, w: usize, k: &[[f64; 3]; 3], out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (i, row) in k.iter().enumerate() {
                let sy = reflect_index(y as isize + i as isize - 1, h);
                for (j, kv) in row.iter().enumerate() {
                    let sx = reflect_index(x as isize + j as isize - 1, w);
                    out[sy * w + sx] += kv * g;
                }
            }
        }
    }
}

/// Horizontal then vertical Sobel responses, N×2C×H×W: channels `0..C` hold
/// the Gx responses and `C..2C` the Gy responses.
pub fn sobel_edges(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, 2 * c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            sobel_plane(x.plane(b, ch), h, w, true, out.plane_mut(b, ch));
            sobel_plane(x.plane(b, ch), h, w, false, out.plane_mut(b, c + ch));
        }
    }
    out
}

fn sobel_edges_adjoint(grad: &Tensor) -> Tensor {
    let [n, c2, h, w] = grad.shape();
    let c = c2 / 2;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = vec![0.0; h * w];
            correlate3_adjoint(grad.plane(b, ch), h, w, &SOBEL_X, &mut acc);
            correlate3_adjoint(grad.plane(b, c + ch), h, w, &SOBEL_Y, &mut acc);
            out.plane_mut(b, ch).copy_from_slice(&acc);
        }
    }
    out
}

/// Mean squared difference of the stacked Sobel responses.
pub fn sobel_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    mse_loss(&sobel_edges(pred), &sobel_edges(gt))
}

pub fn sobel_loss_with_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    same_shape(pred, gt)?;
    let (ep, eg) = (sobel_edges(pred), sobel_edges(gt));
    let (value, g_edges) = mse_loss_with_grad(&ep, &eg)?;
    Ok((value, sobel_edges_adjoint(&g_edges)))
}

// ---------------------------------------------------------------------------
// Composite

/// Evaluates all three terms on `pred` and returns the breakdown plus the
/// weighted objective and its gradient.
fn composite_with_grad(
    pred: &Tensor,
    gt: &Tensor,
    params: &SsimParams,
    weights: &LossWeights,
) -> Result<(LossBreakdown, f64, Tensor)> {
    let (mse, g_mse) = mse_loss_with_grad(pred, gt)?;
    let (ssim, g_ssim) = ssim_loss_with_grad(pred, gt, params)?;
    let (sobel, g_sobel) = sobel_loss_with_grad(pred, gt)?;
    let [a, b, c] = weights.0;
    let mut grad = g_mse.scale(a);
    grad.add_assign(&g_ssim.scale(b));
    grad.add_assign(&g_sobel.scale(c));
    let breakdown = LossBreakdown::from_components(mse, ssim, sobel);
    Ok((breakdown, weights.combine(mse, ssim, sobel), grad))
}

/// The full objective on the final prediction, plus one composite term per
/// auxiliary `(prediction, target)` pair when deep supervision is active.
///
/// The reported components describe the final prediction only; `total`
/// includes the auxiliary terms.
pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    params: &SsimParams,
    deep: Option<&[(Tensor, Tensor)]>,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::from_components(
        mse_loss(pred, gt)?,
        ssim_loss(pred, gt, params)?,
        sobel_loss(pred, gt)?,
    );
    for (p, y) in deep.unwrap_or(&[]) {
        let aux = LossBreakdown::from_components(mse_loss(p, y)?, ssim_loss(p, y, params)?, sobel_loss(p, y)?);
        out.total += aux.total;
    }
    Ok(out)
}

/// Graph form of [`total_loss`]: returns the scalar to differentiate and the
/// breakdown of the final-output terms.
pub fn total_loss_graph(
    g: &Graph,
    pred: &Var,
    gt: &Tensor,
    params: &SsimParams,
    weights: &LossWeights,
    deep: &[(Var, Tensor)],
) -> Result<(Var, LossBreakdown)> {
    let (mut breakdown, objective, grad) = composite_with_grad(pred.value(), gt, params, weights)?;
    let mut root = g.external_scalar(pred, objective, grad)?;
    for (p, y) in deep {
        let (aux, aux_objective, aux_grad) = composite_with_grad(p.value(), y, params, weights)?;
        breakdown.total += aux.total;
        let term = g.external_scalar(p, aux_objective, aux_grad)?;
        root = g.add(&root, &term)?;
    }
    Ok((root, breakdown))
}
