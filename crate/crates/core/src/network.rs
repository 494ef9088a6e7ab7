//! The multi-level hypervision network.
//!
//! ```text
//! input ─[coords]─ conv ─ conv ─┬ enc0 (RCAB×k) ─┬ down ─ enc1 ─┬ down ─ enc2 ─┬ down ─ bottleneck
//!                               │                │              │              │
//!                               │             skip0          skip1          skip2
//!                               │                │              │              │
//!                               │  dec0 ◀── up ── dec1 ◀── up ── dec2 ◀── up ───┘
//!                               │   │             │              │
//!                               │  hyper2 (1/1)  hyper1 (1/2)   hyper0 (1/4)
//!                               └───────────────── fusion conv over [up(h0), up(h1), h2, input]
//! ```
//!
//! Every decoder level upsamples with a 3×3 convolution to `4·w` channels
//! followed by a 2× pixel shuffle, concatenates the (optionally CBAM-refined)
//! encoder skip, merges back to `w` channels and refines with RCABs.

use serde::{Deserialize, Serialize};

use crate::blocks::{coord_concat, AttentionParams, Cbam, Rcab};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Conv2d, Init, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 8;

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels at full, 1/2 and 1/4 resolution; the bottleneck reuses the last.
    pub level_widths: [usize; 3],
    pub rcabs_per_level: usize,
    pub ca_reduction: usize,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    pub use_coord: bool,
    pub use_cbam_skips: bool,
    pub use_channel_attention: bool,
    pub deep_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            level_widths: [16, 32, 64],
            rcabs_per_level: 2,
            ca_reduction: 8,
            cbam_reduction: 8,
            cbam_spatial_kernel: 7,
            use_coord: true,
            use_cbam_skips: true,
            use_channel_attention: true,
            deep_supervision: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.level_widths.iter().find(|&&w| w < 4) {
            return Err(Error::Config(format!("level width {w} is below the minimum of 4")));
        }
        if self.rcabs_per_level == 0 {
            return Err(Error::Config("rcabs_per_level must be positive".into()));
        }
        self.channel_attention().validate()?;
        self.cbam().validate()?;
        Ok(())
    }

    pub fn channel_attention(&self) -> AttentionParams {
        AttentionParams {
            reduction_ratio: self.ca_reduction,
            spatial_kernel: 1,
        }
    }

    pub fn cbam(&self) -> AttentionParams {
        AttentionParams {
            reduction_ratio: self.cbam_reduction,
            spatial_kernel: self.cbam_spatial_kernel,
        }
    }

    /// Names of the fields whose values differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    rcabs: Vec<Rcab>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: Conv2d,
    skip_cbam: Option<Cbam>,
    merge: Conv2d,
    rcabs: Vec<Rcab>,
    hyper: Conv2d,
}

#[derive(Debug, Clone)]
struct Layers {
    head: [Conv2d; 2],
    encoder: Vec<EncoderLevel>,
    bottleneck: Vec<Rcab>,
    /// Ordered deepest first: 1/4, 1/2, full resolution.
    decoder: Vec<DecoderLevel>,
    fusion: Conv2d,
}

/// Final fused prediction and the three hypervision predictions (1/4, 1/2, full scale).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub final_: Tensor,
    pub hypervision: [Tensor; 3],
}

/// Graph-level counterpart of [`ForwardOutput`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub final_: Var,
    pub hypervision: [Var; 3],
}

/// A built network: configuration, named parameters and topology.
#[derive(Debug, Clone)]
pub struct HyperVisionNet {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

fn rcab_stack(b: &mut ParamBuilder, count: usize, width: usize, ca: Option<AttentionParams>) -> Result<Vec<Rcab>> {
    (0..count)
        .map(|i| b.scope(format!("rcab{i}"), |b| Rcab::new(b, width, ca)))
        .collect()
}

/// Builds the network with seeded fan-in normal initialization and zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<HyperVisionNet> {
    config.validate()?;
    let widths = config.level_widths;
    let ca = config.use_channel_attention.then(|| config.channel_attention());
    let k = config.rcabs_per_level;
    let mut b = ParamBuilder::new(seed);

    let in_channels = if config.use_coord { 5 } else { 3 };
    let head = [
        b.conv_init("head.conv0", in_channels, widths[0], 3, 1, Init::Linear)?,
        b.conv_init("head.conv1", widths[0], widths[0], 3, 1, Init::Linear)?,
    ];

    let mut encoder = Vec::with_capacity(3);
    for level in 0..3 {
        let w = widths[level];
        let next = widths[(level + 1).min(2)];
        encoder.push(b.scope(format!("enc{level}"), |b| {
            Ok(EncoderLevel {
                rcabs: rcab_stack(b, k, w, ca)?,
                down: b.conv_init("down", w, next, 3, 2, Init::Linear)?,
            })
        })?);
    }

    let bottleneck = b.scope("bottleneck", |b| rcab_stack(b, k, widths[2], ca))?;

    let mut decoder = Vec::with_capacity(3);
    let mut incoming = widths[2];
    for level in (0..3).rev() {
        let w = widths[level];
        decoder.push(b.scope(format!("dec{level}"), |b| {
            Ok(DecoderLevel {
                up: b.conv_init("up", incoming, 4 * w, 3, 1, Init::Linear)?,
                skip_cbam: config
                    .use_cbam_skips
                    .then(|| b.scope("skip_cbam", |b| Cbam::new(b, w, config.cbam())))
                    .transpose()?,
                merge: b.conv_init("merge", 2 * w, w, 3, 1, Init::Linear)?,
                rcabs: rcab_stack(b, k, w, ca)?,
                hyper: b.conv_init("hyper", w, 3, 3, 1, Init::Linear)?,
            })
        })?);
        incoming = w;
    }

    let fusion = b.conv_init("fusion", 12, 3, 3, 1, Init::Linear)?;

    Ok(HyperVisionNet {
        config: config.clone(),
        params: b.finish(),
        layers: Layers {
            head,
            encoder,
            bottleneck,
            decoder,
            fusion,
        },
    })
}

/// Total number of trainable scalars.
pub fn count_parameters(model: &HyperVisionNet) -> usize {
    model.params.count()
}

fn check_input(x: &Tensor) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    if h % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!("height {h} is not divisible by {SIZE_MULTIPLE}")));
    }
    if w % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!("width {w} is not divisible by {SIZE_MULTIPLE}")));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("input contains non-finite values".into()));
    }
    Ok(())
}

impl HyperVisionNet {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter, checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Checkpoint(format!(
                "parameter names differ from the configured model ({} vs {} arrays)",
                params.len(),
                self.params.len()
            )));
        }
        for ((_, name, a), (_, _, b)) in params.iter().zip(self.params.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn rcabs(&self, g: &Graph, p: &Bound, rcabs: &[Rcab], mut x: Var) -> Result<Var> {
        for r in rcabs {
            x = r.forward(g, p, &x)?;
        }
        Ok(x)
    }

    /// Forward pass on a graph; `p` must come from `self.params().bind(g)`.
    pub fn forward_graph(&self, g: &Graph, p: &Bound, input: &Var) -> Result<ForwardVars> {
        check_input(input.value())?;
        let l = &self.layers;
        let mut x = if self.config.use_coord {
            coord_concat(g, input)?
        } else {
            input.clone()
        };
        for conv in &l.head {
            x = conv.forward(g, p, &x)?;
        }

        let mut skips = Vec::with_capacity(3);
        for level in &l.encoder {
            x = self.rcabs(g, p, &level.rcabs, x)?;
            skips.push(x.clone());
            x = level.down.forward(g, p, &x)?;
        }
        x = self.rcabs(g, p, &l.bottleneck, x)?;

        let mut hyper = Vec::with_capacity(3);
        for (dec, skip) in l.decoder.iter().zip(skips.iter().rev()) {
            let up = g.pixel_shuffle(&dec.up.forward(g, p, &x)?, 2)?;
            let skip = match &dec.skip_cbam {
                Some(cbam) => cbam.forward(g, p, skip)?,
                None => skip.clone(),
            };
            x = dec.merge.forward(g, p, &g.concat(&[&up, &skip])?)?;
            x = self.rcabs(g, p, &dec.rcabs, x)?;
            hyper.push(dec.hyper.forward(g, p, &x)?);
        }
        let hypervision: [Var; 3] = hyper.try_into().expect("three decoder levels");
        let final_ = self.fuse_graph(g, p, &hypervision, input)?;
        Ok(ForwardVars { final_, hypervision })
    }

    fn fuse_graph(&self, g: &Graph, p: &Bound, preds: &[Var; 3], input: &Var) -> Result<Var> {
        let [n, _, h, w] = input.shape();
        for (k, pred) in preds.iter().enumerate() {
            let f = 1 << (2 - k);
            let expect = [n, 3, h / f, w / f];
            if pred.shape() != expect || h % f != 0 || w % f != 0 {
                return Err(Error::Shape(format!(
                    "hypervision prediction {k} is {:?}, expected {expect:?}",
                    pred.shape()
                )));
            }
        }
        let up0 = g.resize(&preds[0], h, w);
        let up1 = g.resize(&preds[1], h, w);
        let stacked = g.concat(&[&up0, &up1, &preds[2], input])?;
        self.layers.fusion.forward(g, p, &stacked)
    }

    /// Upsamples the 1/4 and 1/2 predictions, stacks them with the full-scale
    /// prediction and the input (12 channels) and applies the fusion convolution.
    pub fn fuse_hypervision(&self, preds: &[Tensor; 3], input: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let preds = preds.clone().map(|t| g.constant(t));
        let out = self.fuse_graph(&g, &p, &preds, &g.constant(input.clone()))?;
        Ok(out.value().clone())
    }

    /// Forward pass without gradient tracking. Outputs are unclamped.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let out = self.forward_graph(&g, &p, &g.constant(x.clone()))?;
        Ok(ForwardOutput {
            final_: out.final_.value().clone(),
            hypervision: out.hypervision.map(|v| v.value().clone()),
        })
    }

    /// Final prediction clamped to `[0, 1]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.final_.clamp(0.0, 1.0))
    }

    /// Sets the fusion convolution so the final output copies the input image,
    /// ignoring the hypervision predictions.
    pub fn set_identity_fusion(&mut self) {
        let fusion = self.layers.fusion;
        let w = Tensor::from_fn([3, 12, 3, 3], |o, i, kh, kw| {
            if i == 9 + o && kh == 1 && kw == 1 {
                1.0
            } else {
                0.0
            }
        });
        *self.params.get_mut(fusion.weight) = w;
        self.params.get_mut(fusion.bias).data_mut().fill(0.0);
    }

    /// Names of the fusion layer arrays, `(weight, bias)`.
    pub fn fusion_param_names(&self) -> (&str, &str) {
        let names = self.params.names();
        (
            &names[self.layers.fusion.weight.index()],
            &names[self.layers.fusion.bias.index()],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            level_widths: [4, 4, 8],
            rcabs_per_level: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rejects_sizes_not_divisible_by_eight() {
        let m = build_model(&tiny(), 0).unwrap();
        let err = m.forward(&Tensor::zeros([1, 3, 50, 50])).unwrap_err();
        assert!(matches!(&err, Error::Shape(s) if s.contains("height 50")), "{err}");
        let err = m.forward(&Tensor::zeros([1, 3, 64, 60])).unwrap_err();
        assert!(matches!(&err, Error::Shape(s) if s.contains("width 60")), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            level_widths: [2, 4, 8],
            ..tiny()
        };
        assert!(matches!(build_model(&bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig {
            cbam_spatial_kernel: 6,
            ..tiny()
        };
        assert!(matches!(build_model(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn coord_removal_saves_first_layer_weights() {
        let on = build_model(&ModelConfig::default(), 0).unwrap();
        let off = build_model(
            &ModelConfig {
                use_coord: false,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(count_parameters(&on) - count_parameters(&off), 2 * 9 * 16);
    }

    #[test]
    fn identity_fusion_reproduces_input() {
        let mut m = build_model(&tiny(), 1).unwrap();
        m.set_identity_fusion();
        let x = Tensor::from_fn([1, 3, 16, 16], |_, c, h, w| ((c + h * 3 + w) % 9) as f64 / 9.0);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.final_, x);
        assert_eq!(m.infer(&x).unwrap(), x);
    }

    #[test]
    fn config_diff_names_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            use_cbam_skips: false,
            ..a.clone()
        };
        assert_eq!(a.diff(&b), vec!["use_cbam_skips".to_string()]);
    }
}
