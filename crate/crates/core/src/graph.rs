//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation applied to variables that (transitively)
//! depend on a gradient-tracking leaf. [`Graph::inference`] records nothing, so
//! intermediates are dropped as soon as the last [`Var`] referencing them goes
//! out of scope.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// A value flowing through a [`Graph`]. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> crate::tensor::Shape {
        self.value.shape()
    }

    /// Whether gradients flow back through this variable.
    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Scale(Var, f64),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ScaleSpatial {
        x: Var,
        gate: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Concat(Vec<Var>),
    PixelShuffle(Var, usize),
    Resize(Var),
    External {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

/// Operation tape. Not `Sync`: one graph per thread.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], addressed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        var.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that never records; every variable is untracked.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let value = Arc::new(value);
        if !(self.recording && tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Arc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A gradient-tracking leaf sharing storage with `value`.
    pub fn leaf(&self, value: Arc<Tensor>) -> Var {
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: Arc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    pub fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(&x.value, &weight.value, bias.map(|b| &*b.value), geom)?;
        let tracked = x.tracked() || weight.tracked() || bias.is_some_and(Var::tracked);
        Ok(self.push(
            out,
            Op::Conv {
                x: x.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            },
            tracked,
        ))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = a.value.zip_map(&b.value, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a.clone(), b.clone()), a.tracked() || b.tracked()))
    }

    pub fn scale(&self, x: &Var, factor: f64) -> Var {
        self.push(x.value.scale(factor), Op::Scale(x.clone(), factor), x.tracked())
    }

    /// `x · gate` with `gate` of shape N×C×1×1 broadcast over space.
    pub fn scale_channels(&self, x: &Var, gate: &Var) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        gate.value.expect_shape([n, c, 1, 1], "channel gate")?;
        let mut out = (*x.value).clone();
        for b in 0..n {
            for ch in 0..c {
                let gv = gate.value.get(b, ch, 0, 0);
                out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= gv);
            }
        }
        let _ = (h, w);
        Ok(self.push(
            out,
            Op::ScaleChannels {
                x: x.clone(),
                gate: gate.clone(),
            },
            x.tracked() || gate.tracked(),
        ))
    }

    /// `x · gate` with `gate` of shape N×1×H×W broadcast over channels.
    pub fn scale_spatial(&self, x: &Var, gate: &Var) -> Result<Var> {
        let [n, c, h, w] = x.shape();
        gate.value.expect_shape([n, 1, h, w], "spatial gate")?;
        let mut out = (*x.value).clone();
        for b in 0..n {
            let gp = gate.value.plane(b, 0);
            for ch in 0..c {
                out.plane_mut(b, ch)
                    .iter_mut()
                    .zip(gp)
                    .for_each(|(v, g)| *v *= g);
            }
        }
        Ok(self.push(
            out,
            Op::ScaleSpatial {
                x: x.clone(),
                gate: gate.clone(),
            },
            x.tracked() || gate.tracked(),
        ))
    }

    pub fn relu(&self, x: &Var) -> Var {
        self.push(x.value.map(|v| v.max(0.0)), Op::Relu(x.clone()), x.tracked())
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        self.push(x.value.map(sigmoid), Op::Sigmoid(x.clone()), x.tracked())
    }

    /// Spatial mean per channel: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&self, x: &Var) -> Var {
        let [n, c, _, _] = x.shape();
        let out = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
            let p = x.value.plane(b, ch);
            p.iter().sum::<f64>() / p.len() as f64
        });
        self.push(out, Op::GlobalAvgPool(x.clone()), x.tracked())
    }

    /// Spatial max per channel: N×C×H×W → N×C×1×1. Ties resolve to the first index.
    pub fn global_max_pool(&self, x: &Var) -> Var {
        let [n, c, _, _] = x.shape();
        let mut arg = Vec::with_capacity(n * c);
        let out = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
            let (i, v) = argmax(x.value.plane(b, ch).iter().copied());
            arg.push(i);
            v
        });
        self.push(out, Op::GlobalMaxPool(x.clone(), arg), x.tracked())
    }

    /// Mean over channels: N×C×H×W → N×1×H×W.
    pub fn channel_mean(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = x.value.plane(b, ch);
                out.plane_mut(b, 0).iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
            out.plane_mut(b, 0).iter_mut().for_each(|o| *o /= c as f64);
        }
        self.push(out, Op::ChannelMean(x.clone()), x.tracked())
    }

    /// Max over channels: N×C×H×W → N×1×H×W. Ties resolve to the lowest channel.
    pub fn channel_max(&self, x: &Var) -> Var {
        let [n, c, h, w] = x.shape();
        let mut arg = Vec::with_capacity(n * h * w);
        let out = Tensor::from_fn([n, 1, h, w], |b, _, hh, ww| {
            let (i, v) = argmax((0..c).map(|ch| x.value.get(b, ch, hh, ww)));
            arg.push(i);
            v
        });
        self.push(out, Op::ChannelMax(x.clone(), arg), x.tracked())
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape();
        let mut total = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.shape();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} does not match {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.value.item(b));
            }
        }
        let out = Tensor::from_vec([n, total, h, w], data)?;
        let tracked = parts.iter().any(|p| p.tracked());
        Ok(self.push(out, Op::Concat(parts.iter().map(|&p| p.clone()).collect()), tracked))
    }

    pub fn pixel_shuffle(&self, x: &Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(&x.value, r)?;
        Ok(self.push(out, Op::PixelShuffle(x.clone(), r), x.tracked()))
    }

    /// Bilinear resampling to `h × w`.
    pub fn resize(&self, x: &Var, h: usize, w: usize) -> Var {
        let out = kernels::resize_bilinear(&x.value, h, w);
        self.push(out, Op::Resize(x.clone()), x.tracked())
    }

    /// A scalar computed outside the graph from `x`, with its precomputed
    /// gradient `d value / d x`.
    pub fn external_scalar(&self, x: &Var, value: f64, grad: Tensor) -> Result<Var> {
        grad.expect_shape(x.shape(), "external gradient")?;
        let out = Tensor::from_vec([1, 1, 1, 1], vec![value])?;
        Ok(self.push(out, Op::External { x: x.clone(), grad }, x.tracked()))
    }

    /// Reverse sweep seeded with ones at `root`.
    pub fn backward(&self, root: &Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Gradients { grads };
        };
        grads[root_id] = Some(Tensor::full(root.shape(), 1.0));
        let mut done: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for id in (0..=root_id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            propagate(&node.op, &node.value, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                done[id] = Some(gout);
            }
        }
        Gradients { grads: done }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best
}

fn accumulate(grads: &mut [Option<Tensor>], var: &Var, g: Tensor) {
    let Some(id) = var.id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(op: &Op, out: &Tensor, gout: &Tensor, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::Conv { x, weight, bias, geom } => {
            let (gx, gw, gb) = kernels::conv2d_backward(&x.value, &weight.value, gout, *geom, x.tracked());
            if let Some(gx) = gx {
                accumulate(grads, x, gx);
            }
            accumulate(grads, weight, gw);
            if let Some(b) = bias {
                accumulate(grads, b, gb);
            }
        }
        Op::Add(a, b) => {
            if b.tracked() {
                accumulate(grads, b, gout.clone());
            }
            accumulate(grads, a, gout.clone());
        }
        Op::Scale(x, f) => accumulate(grads, x, gout.scale(*f)),
        Op::ScaleChannels { x, gate } => {
            let [n, c, _, _] = x.shape();
            if gate.tracked() {
                let gg = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
                    x.value.plane(b, ch).iter().zip(gout.plane(b, ch)).map(|(a, g)| a * g).sum()
                });
                accumulate(grads, gate, gg);
            }
            if x.tracked() {
                let mut gx = gout.clone();
                for b in 0..n {
                    for ch in 0..c {
                        let gv = gate.value.get(b, ch, 0, 0);
                        gx.plane_mut(b, ch).iter_mut().for_each(|v| *v *= gv);
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::ScaleSpatial { x, gate } => {
            let [n, c, h, w] = x.shape();
            if gate.tracked() {
                let mut gg = Tensor::zeros([n, 1, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        let xs = x.value.plane(b, ch);
                        let gs = gout.plane(b, ch);
                        for ((o, a), g) in gg.plane_mut(b, 0).iter_mut().zip(xs).zip(gs) {
                            *o += a * g;
                        }
                    }
                }
                accumulate(grads, gate, gg);
            }
            if x.tracked() {
                let mut gx = gout.clone();
                for b in 0..n {
                    let gp = gate.value.plane(b, 0);
                    for ch in 0..c {
                        gx.plane_mut(b, ch).iter_mut().zip(gp).for_each(|(v, g)| *v *= g);
                    }
                }
                accumulate(grads, x, gx);
            }
        }
        Op::Relu(x) => {
            let gx = x.value.zip_map(gout, |v, g| if v > 0.0 { g } else { 0.0 }).expect("shape");
            accumulate(grads, x, gx);
        }
        Op::Sigmoid(x) => {
            let gx = out.zip_map(gout, |y, g| g * y * (1.0 - y)).expect("shape");
            accumulate(grads, x, gx);
        }
        Op::GlobalAvgPool(x) => {
            let [_, _, h, w] = x.shape();
            let inv = 1.0 / (h * w) as f64;
            let gx = Tensor::from_fn(x.shape(), |b, ch, _, _| gout.get(b, ch, 0, 0) * inv);
            accumulate(grads, x, gx);
        }
        Op::GlobalMaxPool(x, arg) => {
            let [n, c, _, _] = x.shape();
            let mut gx = Tensor::zeros(x.shape());
            for b in 0..n {
                for ch in 0..c {
                    gx.plane_mut(b, ch)[arg[b * c + ch]] = gout.get(b, ch, 0, 0);
                }
            }
            accumulate(grads, x, gx);
        }
        Op::ChannelMean(x) => {
            let c = x.shape()[1] as f64;
            let gx = Tensor::from_fn(x.shape(), |b, _, h, w| gout.get(b, 0, h, w) / c);
            accumulate(grads, x, gx);
        }
        Op::ChannelMax(x, arg) => {
            let [n, _, h, w] = x.shape();
            let mut gx = Tensor::zeros(x.shape());
            for b in 0..n {
                for hh in 0..h {
                    for ww in 0..w {
                        let ch = arg[(b * h + hh) * w + ww];
                        gx.set(b, ch, hh, ww, gout.get(b, 0, hh, ww));
                    }
                }
            }
            accumulate(grads, x, gx);
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for p in parts {
                let [n, c, h, w] = p.shape();
                if p.tracked() {
                    let gp = Tensor::from_fn([n, c, h, w], |b, ch, hh, ww| gout.get(b, start + ch, hh, ww));
                    accumulate(grads, p, gp);
                }
                start += c;
            }
        }
        Op::PixelShuffle(x, r) => {
            let gx = kernels::pixel_unshuffle(gout, *r).expect("shuffle output is divisible");
            accumulate(grads, x, gx);
        }
        Op::Resize(x) => {
            let [_, _, h, w] = x.shape();
            accumulate(grads, x, kernels::resize_bilinear_adjoint(gout, h, w));
        }
        Op::External { x, grad } => {
            let g = gout.data()[0];
            accumulate(grads, x, grad.scale(g));
        }
    }
}
