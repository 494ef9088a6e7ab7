//! Differentiable building blocks: coordinate channels, channel attention,
//! CBAM, the conv/ReLU/attention unit and the residual channel attention block.
//!
//! Blocks hold [`ParamId`](crate::params::ParamId)s, not arrays. Their
//! `forward` methods take the graph and the bound parameters, so the same block
//! serves training (recording graph) and inference ([`Graph::inference`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv2d, Init, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Coordinate value of index `i` on an axis of length `n`, in `[-1, 1]`.
fn axis_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// 1×2×H×W map: channel 0 holds the x (column) coordinate, channel 1 the y (row) coordinate.
pub fn coord_channels(height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "coordinate map needs positive size, got {height}x{width}"
        )));
    }
    Ok(Tensor::from_fn([1, 2, height, width], |_, c, h, w| {
        if c == 0 {
            axis_coord(w, width)
        } else {
            axis_coord(h, height)
        }
    }))
}

/// Appends the two coordinate channels after the input channels.
pub fn coord_concat(g: &Graph, x: &Var) -> Result<Var> {
    let [n, _, h, w] = x.shape();
    let coords = coord_channels(h, w)?;
    let batch = Tensor::stack(&vec![&coords; n])?;
    let coords = g.constant(batch);
    g.concat(&[x, &coords])
}

/// Channel-attention bottleneck divisor and CBAM spatial kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            reduction_ratio: 8,
            spatial_kernel: 7,
        }
    }
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::Config("reduction_ratio must be positive".into()));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }

    /// Width of the attention bottleneck for `channels` inputs, floored at one unit.
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction_ratio).max(1)
    }
}

/// Squeeze-and-excitation gate: `x · sigmoid(W2 · relu(W1 · gap(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub down: Conv2d,
    pub up: Conv2d,
}

impl ChannelAttention {
    pub fn new(b: &mut ParamBuilder, channels: usize, params: AttentionParams) -> Result<Self> {
        params.validate()?;
        let hidden = params.hidden(channels);
        Ok(ChannelAttention {
            down: b.conv_init("down", channels, hidden, 1, 1, Init::Squeeze)?,
            up: b.conv_init("up", hidden, channels, 1, 1, Init::Linear)?,
        })
    }

    /// The per-channel gate, N×C×1×1, each entry in (0, 1).
    pub fn gate(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let hidden = g.relu(&self.down.forward(g, p, &pooled)?);
        Ok(g.sigmoid(&self.up.forward(g, p, &hidden)?))
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let gate = self.gate(g, p, x)?;
        g.scale_channels(x, &gate)
    }
}

/// Sequential channel-then-spatial attention.
///
/// The channel gate applies one shared MLP to the average- and max-pooled
/// descriptors and sums the logits. The spatial gate convolves the stacked
/// channelwise mean and max maps with a `spatial_kernel` filter.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub mlp_down: Conv2d,
    pub mlp_up: Conv2d,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new(b: &mut ParamBuilder, channels: usize, params: AttentionParams) -> Result<Self> {
        params.validate()?;
        let hidden = params.hidden(channels);
        Ok(Cbam {
            mlp_down: b.conv_init("mlp_down", channels, hidden, 1, 1, Init::Squeeze)?,
            mlp_up: b.conv_init("mlp_up", hidden, channels, 1, 1, Init::Linear)?,
            spatial: b.conv_init("spatial", 2, 1, params.spatial_kernel, 1, Init::Linear)?,
        })
    }

    fn mlp(&self, g: &Graph, p: &Bound, v: &Var) -> Result<Var> {
        let h = g.relu(&self.mlp_down.forward(g, p, v)?);
        self.mlp_up.forward(g, p, &h)
    }

    pub fn channel_gate(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let avg = self.mlp(g, p, &g.global_avg_pool(x))?;
        let max = self.mlp(g, p, &g.global_max_pool(x))?;
        Ok(g.sigmoid(&g.add(&avg, &max)?))
    }

    pub fn spatial_gate(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let desc = g.concat(&[&g.channel_mean(x), &g.channel_max(x)])?;
        Ok(g.sigmoid(&self.spatial.forward(g, p, &desc)?))
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let cg = self.channel_gate(g, p, x)?;
        let refined = g.scale_channels(x, &cg)?;
        let sg = self.spatial_gate(g, p, &refined)?;
        g.scale_spatial(&refined, &sg)
    }
}

/// `channel_attention(relu(conv3x3(x)))`; the attention stage is optional so
/// the channel-attention ablation can remove it.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub conv: Conv2d,
    pub attention: Option<ChannelAttention>,
}

impl AttentionBlock {
    pub fn new(b: &mut ParamBuilder, channels: usize, attention: Option<AttentionParams>) -> Result<Self> {
        Ok(AttentionBlock {
            conv: b.conv("conv", channels, channels, 3, 1)?,
            attention: attention
                .map(|a| b.scope("ca", |b| ChannelAttention::new(b, channels, a)))
                .transpose()?,
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let h = g.relu(&self.conv.forward(g, p, x)?);
        match &self.attention {
            Some(ca) => ca.forward(g, p, &h),
            None => Ok(h),
        }
    }
}

/// Initial scale of the residual fuse convolution. Keeps activations bounded
/// through long stacks of unnormalized residual blocks.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Residual channel attention block.
///
/// Three attention blocks run in sequence; their outputs are concatenated,
/// fused back to `C` channels by a 1×1 convolution and added to the input.
#[derive(Debug, Clone)]
pub struct Rcab {
    pub units: [AttentionBlock; 3],
    pub fuse: Conv2d,
}

impl Rcab {
    pub fn new(b: &mut ParamBuilder, channels: usize, attention: Option<AttentionParams>) -> Result<Self> {
        let unit = |b: &mut ParamBuilder, i: usize| {
            b.scope(format!("att{i}"), |b| AttentionBlock::new(b, channels, attention))
        };
        let units = [unit(b, 0)?, unit(b, 1)?, unit(b, 2)?];
        Ok(Rcab {
            units,
            fuse: b.conv_init("fuse", 3 * channels, channels, 1, 1, Init::Residual(RESIDUAL_INIT_SCALE))?,
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let a1 = self.units[0].forward(g, p, x)?;
        let a2 = self.units[1].forward(g, p, &a1)?;
        let a3 = self.units[2].forward(g, p, &a2)?;
        let fused = self.fuse.forward(g, p, &g.concat(&[&a1, &a2, &a3])?)?;
        g.add(x, &fused)
    }
}

/// Runs a block once on a plain tensor without recording gradients.
pub fn apply<F>(store: &ParamStore, x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&Graph, &Bound, &Var) -> Result<Var>,
{
    let g = Graph::inference();
    let p = store.bind(&g);
    let xv = g.constant(x.clone());
    Ok(f(&g, &p, &xv)?.value().clone())
}
