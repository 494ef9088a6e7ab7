//! Evaluation metrics and dataset-level reports.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::losses::{ssim_loss, SsimParams};
use crate::network::HyperVisionNet;
use crate::tensor::Tensor;

/// PSNR returned when the mean squared error is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

/// Peak signal-to-noise ratio in dB over all elements jointly.
pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    let mse = crate::losses::mse_loss(pred, gt)?;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean windowed SSIM. Defined as `1 − ssim_loss` so that metric and loss
/// share one kernel and complement each other exactly.
pub fn ssim_index(pred: &Tensor, gt: &Tensor, params: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim_loss(pred, gt, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Dataset-averaged PSNR/SSIM plus per-image scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub per_image: Vec<ImageScore>,
    pub count: usize,
    pub split_label: String,
    /// Parameter count of the evaluated model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<usize>,
}

impl MetricReport {
    /// Sorts scores by id and averages them (mean of per-image dB values).
    pub fn from_scores(mut per_image: Vec<ImageScore>, split_label: impl Into<String>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("cannot report on an empty dataset".into()));
        }
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len() as f64;
        Ok(MetricReport {
            mean_psnr: per_image.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
            count: per_image.len(),
            per_image,
            split_label: split_label.into(),
            parameter_count: None,
        })
    }
}

/// Options for [`evaluate_dataset`].
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub ssim: SsimParams,
    /// Reflect-pad inputs up to a multiple of 8 and crop the output back.
    pub reflect_pad: bool,
    pub split_label: String,
}

/// Scores `infer` output against the clean image for every pair.
pub fn evaluate_dataset(model: &HyperVisionNet, dataset: &[SamplePair], options: &EvalOptions) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for pair in dataset {
        let restored = if options.reflect_pad {
            crate::harness::infer_padded(model, &pair.moire)?
        } else {
            model.infer(&pair.moire)?
        };
        scores.push(ImageScore {
            id: pair.id.clone(),
            psnr: psnr(&restored, &pair.clean, 1.0)?,
            ssim: ssim_index(&restored, &pair.clean, &options.ssim)?,
        });
    }
    let mut report = MetricReport::from_scores(scores, options.split_label.clone())?;
    report.parameter_count = Some(model.params().count());
    Ok(report)
}

/// One row of a results table: `Data size | Data | PSNR | SSIM`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub size: usize,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl From<&MetricReport> for SplitRow {
    fn from(r: &MetricReport) -> Self {
        SplitRow {
            size: r.count,
            label: r.split_label.clone(),
            psnr: r.mean_psnr,
            ssim: r.mean_ssim,
        }
    }
}

/// Plain-text results table with one row per split.
pub struct ResultsTable<'a>(pub &'a [SplitRow]);

impl fmt::Display for ResultsTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<18} {:>9} {:>8}", "Data size", "Data", "PSNR", "SSIM")?;
        for row in self.0 {
            writeln!(f, "{:<10} {:<18} {:>9.4} {:>8.4}", row.size, row.label, row.psnr, row.ssim)?;
        }
        Ok(())
    }
}
