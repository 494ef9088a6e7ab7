//! Forward and adjoint kernels behind the graph operations.
//!
//! Every function here is a plain function of tensors. The graph module wires
//! them together and takes care of gradient bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// "Same" padding for odd kernels.
    pub fn same(kernel: usize, stride: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a · b` (+ `c` when `accumulate`), row-major, with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are large enough for the strided views asserted above
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], channels: usize, h: usize, w: usize, g: ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, g: ConvGeometry, x: &mut [f64]) {
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, &v) in row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<()> {
    let [cout, cin, kh, kw] = weight.shape();
    if cin != x.channels() || kh != g.kernel || kw != g.kernel {
        return Err(Error::Config(format!(
            "conv weight {:?} incompatible with input {:?} and kernel {}",
            weight.shape(),
            x.shape(),
            g.kernel
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout, 1, 1, 1] {
            return Err(Error::Config(format!(
                "conv bias {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    if x.height() + 2 * g.pad < g.kernel || x.width() + 2 * g.pad < g.kernel {
        return Err(Error::Shape(format!(
            "input {:?} smaller than kernel {}",
            x.shape(),
            g.kernel
        )));
    }
    Ok(())
}

/// Cross-correlation with zero padding, as used by every learned layer.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    check_conv(x, weight, bias, g)?;
    let [n, cin, h, w] = x.shape();
    let cout = weight.shape()[0];
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let p = ho * wo;
    let kdim = cin * g.kernel * g.kernel;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    for b in 0..n {
        let xb = x.item(b);
        let cols_ref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, h, w, g, &mut cols);
            &cols
        };
        let ob = out.item_mut(b);
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(p).enumerate() {
                plane.fill(bias.data()[co]);
            }
        }
        gemm(cout, kdim, p, weight.data(), (kdim, 1), cols_ref, (p, 1), ob, bias.is_some());
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, w] = x.shape();
    let cout = weight.shape()[0];
    let p = grad_out.height() * grad_out.width();
    let kdim = cin * g.kernel * g.kernel;
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros([cout, 1, 1, 1]);
    let mut grad_x = need_input.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    let mut dcols = vec![0.0; kdim * p];
    for b in 0..n {
        let gb = grad_out.item(b);
        for (co, plane) in gb.chunks(p).enumerate() {
            grad_b.data_mut()[co] += plane.iter().sum::<f64>();
        }
        let xb = x.item(b);
        let cols_ref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, cin, h, w, g, &mut cols);
            &cols
        };
        // dW (cout × kdim) += dOut (cout × p) · colsᵀ (p × kdim)
        gemm(cout, p, kdim, gb, (p, 1), cols_ref, (1, p), grad_w.data_mut(), true);
        if let Some(gx) = grad_x.as_mut() {
            // dCols (kdim × p) = Wᵀ (kdim × cout) · dOut (cout × p)
            if g.is_pointwise() {
                gemm(kdim, cout, p, weight.data(), (1, kdim), gb, (p, 1), gx.item_mut(b), false);
            } else {
                gemm(kdim, cout, p, weight.data(), (1, kdim), gb, (p, 1), &mut dcols, false);
                col2im(&dcols, cin, h, w, g, gx.item_mut(b));
            }
        }
    }
    (grad_x, grad_w, grad_b)
}

/// Sub-pixel rearrangement: `out(n, c, h·r+i, w·r+j) = in(n, c·r² + i·r + j, h, w)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {c} channels not divisible by {r}²"
        )));
    }
    let co = c / (r * r);
    let mut out = Tensor::zeros([n, co, h * r, w * r]);
    for b in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src = x.plane(b, oc * r * r + i * r + j);
                    let dst = out.plane_mut(b, oc);
                    for hh in 0..h {
                        for ww in 0..w {
                            dst[(hh * r + i) * (w * r) + ww * r + j] = src[hh * w + ww];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_unshuffle: {h}x{w} not divisible by {r}"
        )));
    }
    let (ho, wo) = (h / r, w / r);
    Ok(Tensor::from_fn([n, c * r * r, ho, wo], |b, ch, hh, ww| {
        let (oc, rem) = (ch / (r * r), ch % (r * r));
        x.get(b, oc, hh * r + rem / r, ww * r + rem % r)
    }))
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`),
/// folded repeatedly so any offset maps into `[0, n)`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Interpolation taps along one axis for half-pixel-centred bilinear resampling.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    pub(crate) fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

/// Bilinear resampling to `out_h × out_w` with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (th, tw) = (AxisTaps::new(h, out_h), AxisTaps::new(w, out_w));
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oh in 0..out_h {
                let (r0, r1, fy) = (th.lo[oh] * w, th.hi[oh] * w, th.frac[oh]);
                for ow in 0..out_w {
                    let (c0, c1, fx) = (tw.lo[ow], tw.hi[ow], tw.frac[ow]);
                    let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                    let bottom = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                    dst[oh * out_w + ow] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters `grad` back onto an `in_h × in_w` grid.
pub fn resize_bilinear_adjoint(grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, out_h, out_w] = grad.shape();
    let (th, tw) = (AxisTaps::new(in_h, out_h), AxisTaps::new(in_w, out_w));
    let mut out = Tensor::zeros([n, c, in_h, in_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = grad.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oh in 0..out_h {
                let (r0, r1, fy) = (th.lo[oh] * in_w, th.hi[oh] * in_w, th.frac[oh]);
                for ow in 0..out_w {
                    let (c0, c1, fx) = (tw.lo[ow], tw.hi[ow], tw.frac[ow]);
                    let gv = src[oh * out_w + ow];
                    dst[r0 + c0] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[r0 + c1] += gv * (1.0 - fy) * fx;
                    dst[r1 + c0] += gv * fy * (1.0 - fx);
                    dst[r1 + c1] += gv * fy * fx;
                }
            }
        }
    }
    out
}
