//! Training loop, learning-rate schedule, ablation runner and the
//! checkpoint-level evaluation and inference entry points.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetrics, CheckpointPaths, Sidecar};
use crate::data::{self, apply_augment, extract_patch, sample_augment, SampleKey, SamplePair, Stream};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::{reflect_index, resize_bilinear};
use crate::losses::{total_loss_graph, LossBreakdown, LossWeights, SsimParams};
use crate::metrics::{evaluate_dataset, EvalOptions, MetricReport};
use crate::network::{build_model, HyperVisionNet, ModelConfig, SIZE_MULTIPLE};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Everything a training run needs. Serialized as the CLI's JSON config;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub eval_every: usize,
    pub checkpoint_dir: PathBuf,
    /// Dataset root holding `input_subdir` and `gt_subdir`.
    pub data_dir: Option<PathBuf>,
    pub input_subdir: String,
    pub gt_subdir: String,
    /// Training pairs; `None` takes everything not reserved for validation.
    pub train_count: Option<usize>,
    pub val_count: usize,
    pub augment: bool,
    pub ssim: SsimParams,
    /// Reflect-pad validation images whose sides are not multiples of 8.
    pub pad_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 500,
            lr_start: 1e-3,
            lr_end: 1e-5,
            batch_size: 16,
            patch_size: 128,
            seed: 0,
            loss_weights: LossWeights::default(),
            eval_every: 1,
            checkpoint_dir: PathBuf::from("checkpoints"),
            data_dir: None,
            input_subdir: "input".into(),
            gt_subdir: "gt".into(),
            train_count: None,
            val_count: 0,
            augment: true,
            ssim: SsimParams::default(),
            pad_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::Config(format!(
                "patch_size {} is not a positive multiple of {SIZE_MULTIPLE}",
                self.patch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.ssim.validate()
    }

    /// Loads the dataset named by `data_dir` and splits it.
    pub fn load_splits(&self) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        let root = self
            .data_dir
            .as_ref()
            .ok_or_else(|| Error::Config("data_dir is not set".into()))?;
        let all = data::load_pairs_from(&root.join(&self.input_subdir), &root.join(&self.gt_subdir))?;
        if self.val_count > all.len() {
            return Err(Error::InvalidArgument(format!(
                "val_count {} exceeds dataset size {}",
                self.val_count,
                all.len()
            )));
        }
        let train_n = self.train_count.unwrap_or(all.len() - self.val_count);
        data::split_dataset(&all, train_n, self.val_count, self.seed)
    }
}

/// Log-linear decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    let e = config.epochs;
    if epoch >= e {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{e}")));
    }
    if e == 1 || epoch == 0 {
        return Ok(config.lr_start);
    }
    if epoch == e - 1 {
        return Ok(config.lr_end);
    }
    let t = epoch as f64 / (e - 1) as f64;
    Ok(config.lr_start * (config.lr_end / config.lr_start).powf(t))
}

/// One line of the newline-delimited JSON run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_report: Option<MetricReport>,
    pub lr: f64,
    pub wall_time: f64,
}

/// One optimizer step as written to `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// A batch of aligned moiré/clean patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub moire: Tensor,
    pub clean: Tensor,
}

/// The batches of one epoch: seeded order, then per-sample crop and augmentation
/// keyed by `(seed, epoch, index in the training split)`.
pub fn epoch_batches(config: &TrainConfig, train: &[SamplePair], epoch: usize) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut SampleKey::new(config.seed, epoch as u64, 0).rng(Stream::Shuffle));
    let mut batches = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let mut pairs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let key = SampleKey::new(config.seed, epoch as u64, i as u64);
            let mut pair = extract_patch(&train[i], config.patch_size, &mut key.rng(Stream::Patch))?;
            if config.augment {
                pair = apply_augment(&pair, sample_augment(&mut key.rng(Stream::Augment)));
            }
            pairs.push(pair);
        }
        batches.push(Batch {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            moire: Tensor::stack(&pairs.iter().map(|p| &p.moire).collect::<Vec<_>>())?,
            clean: Tensor::stack(&pairs.iter().map(|p| &p.clean).collect::<Vec<_>>())?,
        });
    }
    Ok(batches)
}

/// Ground truth resampled to the three hypervision scales.
pub fn deep_targets(clean: &Tensor) -> [Tensor; 3] {
    let (h, w) = (clean.height(), clean.width());
    [
        resize_bilinear(clean, h / 4, w / 4),
        resize_bilinear(clean, h / 2, w / 2),
        clean.clone(),
    ]
}

/// One forward/backward/update step. Returns the loss breakdown before the update.
pub fn train_step(
    model: &mut HyperVisionNet,
    adam: &mut Adam,
    config: &TrainConfig,
    batch: &Batch,
    lr: f64,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let p = model.params().bind(&g);
    let out = model.forward_graph(&g, &p, &g.constant(batch.moire.clone()))?;
    let deep: Vec<_> = if model.config().deep_supervision {
        out.hypervision
            .iter()
            .cloned()
            .zip(deep_targets(&batch.clean))
            .collect()
    } else {
        Vec::new()
    };
    let (root, breakdown) = total_loss_graph(&g, &out.final_, &batch.clean, &config.ssim, &config.loss_weights, &deep)?;
    if !root.value().data()[0].is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: 0,
            detail: format!("{breakdown:?}"),
        });
    }
    let mut grads = g.backward(&root);
    let grads: Vec<Tensor> = p
        .vars()
        .iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(p);
    drop(g);
    adam.update(model.params_mut(), &grads, lr)?;
    Ok(breakdown)
}

/// Knobs that affect how a run executes but not what it computes.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Resume from this checkpoint (typically `<checkpoint_dir>/last`).
    pub resume: Option<PathBuf>,
    /// Stop after this epoch (0-based) even if the schedule runs longer.
    pub stop_after: Option<usize>,
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: HyperVisionNet,
    pub records: Vec<RunRecord>,
    pub steps: Vec<StepRecord>,
    pub best_val_psnr: Option<f64>,
    pub last_checkpoint: PathBuf,
}

pub const LAST_CHECKPOINT: &str = "last";
pub const BEST_CHECKPOINT: &str = "best";
pub const FINAL_CHECKPOINT: &str = "final";
pub const RUN_LOG: &str = "run_log.jsonl";
pub const STEP_LOG: &str = "steps.jsonl";

fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Builds a fresh model from `config.model` and trains it.
pub fn train(config: &TrainConfig, train_set: &[SamplePair], val_set: &[SamplePair], options: &TrainOptions) -> Result<TrainOutcome> {
    let model = build_model(&config.model, config.seed)?;
    train_model(config, model, train_set, val_set, options)
}

/// Trains `model` (whose configuration must equal `config.model`).
pub fn train_model(
    config: &TrainConfig,
    mut model: HyperVisionNet,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if model.config() != &config.model {
        return Err(Error::Config("model was built from a different configuration".into()));
    }
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut start_epoch = 0;
    let mut best_val_psnr = None;
    if let Some(resume) = &options.resume {
        let ckpt = load_checkpoint(resume)?;
        if ckpt.sidecar.config != config.model || ckpt.sidecar.seed != config.seed {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model config or seed",
                resume.display()
            )));
        }
        model = ckpt.model;
        adam = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", resume.display())))?;
        start_epoch = ckpt.sidecar.epoch + 1;
        best_val_psnr = ckpt.sidecar.best_val_psnr;
        info!("resuming at epoch {start_epoch}");
    }

    let last_epoch = options.stop_after.map_or(config.epochs - 1, |s| s.min(config.epochs - 1));
    let eval_options = EvalOptions {
        ssim: config.ssim,
        reflect_pad: config.pad_eval,
        split_label: "Validation Data".into(),
    };
    let mut records = Vec::new();
    let mut steps = Vec::new();
    let last_paths = CheckpointPaths::new(dir, LAST_CHECKPOINT);

    for epoch in start_epoch..=last_epoch {
        let started = Instant::now();
        let lr = lr_at_epoch(config, epoch)?;
        let batches = epoch_batches(config, train_set, epoch)?;
        let mut sum = LossBreakdown::default();
        for (step, batch) in batches.iter().enumerate() {
            let loss = train_step(&mut model, &mut adam, config, batch, lr).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { epoch, step, detail },
                other => other,
            })?;
            sum.mse += loss.mse;
            sum.ssim_loss += loss.ssim_loss;
            sum.sobel_loss += loss.sobel_loss;
            sum.total += loss.total;
            let record = StepRecord { epoch, step, loss };
            append_json_line(&dir.join(STEP_LOG), &record)?;
            steps.push(record);
        }
        let n = batches.len() as f64;
        let train_loss = LossBreakdown {
            mse: sum.mse / n,
            ssim_loss: sum.ssim_loss / n,
            sobel_loss: sum.sobel_loss / n,
            total: sum.total / n,
        };

        let is_final = epoch == config.epochs - 1;
        let val_report = if !val_set.is_empty() && ((epoch + 1) % config.eval_every == 0 || is_final) {
            Some(evaluate_dataset(&model, val_set, &eval_options)?)
        } else {
            None
        };
        let improved = val_report
            .as_ref()
            .is_some_and(|r| best_val_psnr.is_none_or(|b| r.mean_psnr > b));
        if improved {
            best_val_psnr = val_report.as_ref().map(|r| r.mean_psnr);
        }

        let record = RunRecord {
            epoch,
            train_loss,
            val_report,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>4}  lr {:.3e}  loss {:.5} (mse {:.5} ssim {:.5} sobel {:.5}){}",
            epoch,
            lr,
            train_loss.total,
            train_loss.mse,
            train_loss.ssim_loss,
            train_loss.sobel_loss,
            record
                .val_report
                .as_ref()
                .map(|r| format!("  val {:.3} dB / {:.4}", r.mean_psnr, r.mean_ssim))
                .unwrap_or_default()
        );
        append_json_line(&dir.join(RUN_LOG), &record)?;

        let sidecar = Sidecar {
            config: config.model.clone(),
            seed: config.seed,
            epoch,
            parameter_count: model.params().count(),
            metrics: record.val_report.as_ref().map(CheckpointMetrics::from),
            optimizer_step: adam.step,
            best_val_psnr,
        };
        save_checkpoint(&last_paths, &model, &sidecar, Some(&adam))?;
        if improved {
            save_checkpoint(&CheckpointPaths::new(dir, BEST_CHECKPOINT), &model, &sidecar, None)?;
        }
        if is_final {
            save_checkpoint(&CheckpointPaths::new(dir, FINAL_CHECKPOINT), &model, &sidecar, None)?;
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        model,
        records,
        steps,
        best_val_psnr,
        last_checkpoint: last_paths.weights,
    })
}

// ---------------------------------------------------------------------------
// Ablation

/// The four ablation variants, in table order.
pub const ABLATION_VARIANTS: [(&str, &str); 4] = [
    ("without CCL", "no_coord"),
    ("without CBAM", "no_cbam"),
    ("without channel attention", "no_channel_attention"),
    ("Our Proposed Model", "proposed"),
];

fn ablation_config(base: &ModelConfig, slug: &str) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.use_coord = true;
    cfg.use_cbam_skips = true;
    cfg.use_channel_attention = true;
    match slug {
        "no_coord" => cfg.use_coord = false,
        "no_cbam" => cfg.use_cbam_skips = false,
        "no_channel_attention" => cfg.use_channel_attention = false,
        _ => {}
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub train_psnr: f64,
    pub train_ssim: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub parameter_count: usize,
    /// Model-config fields that differ from the proposed variant.
    pub config_diff: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seed: u64,
    pub epochs: usize,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        writeln!(f, "{:<28} {:^19} {:^19}", "Ablation effect", "Train", "Validation")?;
        writeln!(f, "{:<28} {:>9} {:>9} {:>9} {:>9}", "", "PSNR", "SSIM", "PSNR", "SSIM")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>9.4} {:>9.4} {:>9} {:>9}",
                r.label,
                r.train_psnr,
                r.train_ssim,
                opt(r.val_psnr, 4),
                opt(r.val_ssim, 4)
            )?;
        }
        Ok(())
    }
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

/// Trains every variant on the same split, seed and schedule, then scores
/// full train and validation images. Writes `ablation.json` and `ablation.txt`
/// to `out_dir`; each variant's checkpoints go to `out_dir/<variant>/`.
pub fn run_ablation(base: &TrainConfig, train_set: &[SamplePair], val_set: &[SamplePair], out_dir: &Path) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let proposed = ablation_config(&base.model, "proposed");
    let ids = |set: &[SamplePair]| set.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    let mut rows = Vec::with_capacity(4);
    for (label, slug) in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.model = ablation_config(&base.model, slug);
        cfg.checkpoint_dir = out_dir.join(slug);
        info!("ablation variant: {label}");
        let outcome = train(&cfg, train_set, val_set, &TrainOptions::default())?;
        let eval = |set: &[SamplePair], split: &str| {
            evaluate_dataset(
                &outcome.model,
                set,
                &EvalOptions {
                    ssim: cfg.ssim,
                    reflect_pad: cfg.pad_eval,
                    split_label: split.into(),
                },
            )
        };
        let train_report = eval(train_set, "Training Data")?;
        let val_report = if val_set.is_empty() {
            None
        } else {
            Some(eval(val_set, "Validation Data")?)
        };
        rows.push(AblationRow {
            label: label.to_string(),
            train_psnr: train_report.mean_psnr,
            train_ssim: train_report.mean_ssim,
            val_psnr: val_report.as_ref().map(|r| r.mean_psnr),
            val_ssim: val_report.as_ref().map(|r| r.mean_ssim),
            parameter_count: outcome.model.params().count(),
            config_diff: cfg.model.diff(&proposed),
            train_ids: ids(train_set),
            val_ids: ids(val_set),
        });
    }
    let report = AblationReport {
        rows,
        seed: base.seed,
        epochs: base.epochs,
    };
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    let path = out_dir.join(ABLATION_JSON);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = out_dir.join(ABLATION_TABLE);
    std::fs::write(&path, report.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Evaluation and inference from checkpoints

/// Rebuilds the model from a checkpoint and evaluates it on `root/input` vs `root/gt`.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, options: &EvalOptions) -> Result<MetricReport> {
    let loaded = load_checkpoint(ckpt)?;
    let dataset = data::load_pairs(data_dir)?;
    let mut report = evaluate_dataset(&loaded.model, &dataset, options)?;
    report.parameter_count = Some(loaded.sidecar.parameter_count);
    Ok(report)
}

/// Reflect-pads the bottom and right edges up to a multiple of `multiple`.
pub fn reflect_pad(x: &Tensor, multiple: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Tensor::from_fn([n, c, ph, pw], |b, ch, i, j| {
        x.get(b, ch, reflect_index(i as isize, h), reflect_index(j as isize, w))
    })
}

/// [`HyperVisionNet::infer`] on inputs of any size: reflect-pad to a multiple
/// of 8, run, crop back.
pub fn infer_padded(model: &HyperVisionNet, x: &Tensor) -> Result<Tensor> {
    let (h, w) = (x.height(), x.width());
    if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 {
        return model.infer(x);
    }
    model.infer(&reflect_pad(x, SIZE_MULTIPLE))?.crop(0, 0, h, w)
}

/// Places images side by side (equal heights required).
pub fn side_by_side(images: &[&Tensor]) -> Result<Tensor> {
    let h = images[0].height();
    if images.iter().any(|t| t.height() != h || t.channels() != 3) {
        return Err(Error::Shape("side-by-side images need equal heights".into()));
    }
    let total: usize = images.iter().map(|t| t.width()).sum();
    let mut out = Tensor::zeros([1, 3, h, total]);
    let mut left = 0;
    for t in images {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..t.width() {
                    out.set(0, c, y, left + x, t.get(0, c, y, x));
                }
            }
        }
        left += t.width();
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

/// Restores one file or every image in a directory, writing
/// `<stem>_demoire.png` (and `<stem>_triptych.png`, input | output) to `output`.
pub fn infer_paths(model: &HyperVisionNet, input: &Path, output: &Path, pad: bool, triptych: bool) -> Result<InferSummary> {
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut summary = InferSummary::default();
    for path in inputs {
        let result = (|| -> Result<Vec<PathBuf>> {
            let x = data::read_image(&path)?;
            let y = if pad { infer_padded(model, &x)? } else { model.infer(&x)? };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let out = output.join(format!("{stem}_demoire.png"));
            data::write_png(&y, &out)?;
            let mut written = vec![out];
            if triptych {
                let strip = output.join(format!("{stem}_triptych.png"));
                data::write_png(&side_by_side(&[&x, &y])?, &strip)?;
                written.push(strip);
            }
            Ok(written)
        })();
        match result {
            Ok(w) => summary.written.extend(w),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                summary.failed.push((path, e.to_string()));
            }
        }
    }
    Ok(summary)
}

/// Parameter names, shapes and sizes, one line each, followed by the total.
pub fn layer_table(model: &HyperVisionNet) -> String {
    let mut out = String::new();
    let width = model.params().names().iter().map(String::len).max().unwrap_or(4).max(9);
    out.push_str(&format!("{:<width$}  {:<18} {:>10}\n", "parameter", "shape", "count"));
    for (_, name, t) in model.params().iter() {
        let s = t.shape();
        let shape = format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3]);
        out.push_str(&format!("{name:<width$}  {shape:<18} {:>10}\n", t.len()));
    }
    out.push_str(&format!("{:<width$}  {:<18} {:>10}\n", "total", "", model.params().count()));
    out
}
