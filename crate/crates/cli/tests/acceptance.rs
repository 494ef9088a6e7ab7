#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! End-to-end acceptance checks. Each check prints one PASS or FAIL line;
//! the process exits nonzero if any fails. Pass substrings as arguments to
//! run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use common::{numeric_gradient, relative_error, rng, synthetic_pair, uniform, write_dataset};
use demoire::blocks::{apply, AttentionParams, Cbam, ChannelAttention, Rcab};
use demoire::data::{
    apply_augment, hflip, rot90, sample_augment, split_dataset, AugmentSpec, SampleKey, SamplePair, Stream,
};
use demoire::harness::{lr_at_epoch, train, AblationReport, TrainConfig, TrainOptions, LAST_CHECKPOINT};
use demoire::kernels::{pixel_shuffle, pixel_unshuffle};
use demoire::losses::{
    mse_loss, mse_loss_with_grad, sobel_loss, sobel_loss_with_grad, ssim_loss, ssim_loss_with_grad, ssim_map,
    SsimParams,
};
use demoire::metrics::{evaluate_dataset, ssim_index, EvalOptions};
use demoire::network::{build_model, count_parameters, ModelConfig};
use demoire::params::ParamBuilder;
use demoire::{Error, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn loss_gradients() -> Outcome {
    let params = SsimParams::default();
    let mut r = rng(1);
    let mut worst = [0.0f64; 3];
    for _ in 0..10 {
        let pred = uniform([1, 3, 16, 16], &mut r);
        let gt = uniform([1, 3, 16, 16], &mut r);
        let checks: [(Tensor, Tensor); 3] = [
            (
                mse_loss_with_grad(&pred, &gt).unwrap().1,
                numeric_gradient(&pred, 1e-6, |p| mse_loss(p, &gt).unwrap()),
            ),
            (
                ssim_loss_with_grad(&pred, &gt, &params).unwrap().1,
                numeric_gradient(&pred, 1e-6, |p| ssim_loss(p, &gt, &params).unwrap()),
            ),
            (
                sobel_loss_with_grad(&pred, &gt).unwrap().1,
                numeric_gradient(&pred, 1e-6, |p| sobel_loss(p, &gt).unwrap()),
            ),
        ];
        for (k, (analytic, numeric)) in checks.iter().enumerate() {
            worst[k] = worst[k].max(relative_error(analytic, numeric));
        }
    }
    ensure!(worst.iter().all(|e| *e < 1e-5), "relative errors mse/ssim/sobel {worst:?}");
    Ok(format!("max relative error mse {:.1e}, ssim {:.1e}, sobel {:.1e}", worst[0], worst[1], worst[2]))
}

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

fn brute_force_ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Tensor {
    let r = (p.window / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * p.sigma * p.sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let (c1, c2) = ((p.k1 * p.dynamic_range).powi(2), (p.k2 * p.dynamic_range).powi(2));
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, i, j| {
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for di in -r..=r {
            for dj in -r..=r {
                let wt = raw[(di + r) as usize] * raw[(dj + r) as usize] / (total * total);
                let (ii, jj) = (mirror(i as isize + di, h), mirror(j as isize + dj, w));
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

fn ssim_oracle() -> Outcome {
    let params = SsimParams::default();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = uniform([1, 1, 32, 32], &mut r);
        let y = uniform([1, 1, 32, 32], &mut r);
        let fast = ssim_map(&x, &y, &params).unwrap();
        let slow = brute_force_ssim(&x, &y, &params);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs());
        }
        let self_sim = ssim_index(&x, &x, &params).unwrap();
        ensure!((self_sim - 1.0).abs() <= 1e-9, "ssim_index(a, a) = {self_sim}");
    }
    ensure!(worst < 1e-6, "max deviation from oracle {worst:.2e}");
    Ok(format!("max deviation from oracle {worst:.1e}"))
}

fn closed_form_ssim() -> Outcome {
    let params = SsimParams::default();
    let c1 = (0.01f64 * 1.0).powi(2);
    let expected = (2.0 * 0.0 * 1.0 + c1) / (0.0 + 1.0 + c1);
    let got = ssim_index(&Tensor::zeros([1, 3, 16, 16]), &Tensor::full([1, 3, 16, 16], 1.0), &params).unwrap();
    ensure!((got - expected).abs() < 1e-7, "got {got}, expected {expected}");
    Ok(format!("ssim_index = {got:.6e}, closed form {expected:.6e}"))
}

fn pixel_shuffle_oracle() -> Outcome {
    let mut r = rng(4);
    for case in 0..100 {
        let factor = r.gen_range(1..=3);
        let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7));
        let x = uniform([n, c * factor * factor, h, w], &mut r);
        let y = pixel_shuffle(&x, factor).unwrap();
        let oracle = Tensor::from_fn([n, c, h * factor, w * factor], |b, ch, i, j| {
            x.get(b, ch * factor * factor + (i % factor) * factor + j % factor, i / factor, j / factor)
        });
        ensure!(y == oracle, "case {case}: mismatch for r={factor} shape {:?}", x.shape());
        ensure!(pixel_unshuffle(&y, factor).unwrap() == x, "case {case}: inverse failed");
    }
    Ok("100 random shapes exact, inverse exact".into())
}

fn zero_weight_identities() -> Outcome {
    let attention = AttentionParams::default();
    let x = uniform([2, 16, 8, 8], &mut rng(5));

    let mut b = ParamBuilder::new(0);
    let rcab = Rcab::new(&mut b, 16, Some(attention)).unwrap();
    let mut store = b.finish();
    store.fill(0.0);
    let out = apply(&store, &x, |g, p, v| rcab.forward(g, p, v)).unwrap();
    ensure!(out == x, "rcab with zero weights is not the identity");

    let mut b = ParamBuilder::new(0);
    let ca = ChannelAttention::new(&mut b, 16, attention).unwrap();
    let mut store = b.finish();
    store.fill(0.0);
    let out = apply(&store, &x, |g, p, v| ca.forward(g, p, v)).unwrap();
    ensure!(out == x.scale(0.5), "channel attention with zero weights is not x/2");

    let mut b = ParamBuilder::new(0);
    let cbam = Cbam::new(&mut b, 16, attention).unwrap();
    let mut store = b.finish();
    store.fill(0.0);
    let out = apply(&store, &x, |g, p, v| cbam.forward(g, p, v)).unwrap();
    ensure!(out == x.scale(0.25), "cbam with zero weights is not x/4");
    Ok("rcab = identity, channel attention = 0.5x, cbam = 0.25x (exact)".into())
}

fn shape_contract() -> Outcome {
    let model = build_model(&ModelConfig::default(), 0).unwrap();
    for (h, w) in [(8, 8), (64, 64), (64, 128), (256, 256)] {
        let x = uniform([1, 3, h, w], &mut rng(6));
        let out = model.forward(&x).unwrap();
        ensure!(out.final_.shape() == [1, 3, h, w], "final shape {:?} for {h}x{w}", out.final_.shape());
        let scales = out.hypervision.each_ref().map(|t| t.shape());
        ensure!(
            scales == [[1, 3, h / 4, w / 4], [1, 3, h / 2, w / 2], [1, 3, h, w]],
            "hypervision shapes {scales:?} for {h}x{w}"
        );
        ensure!(out.final_.is_finite(), "non-finite output for {h}x{w}");
    }
    match model.forward(&Tensor::zeros([1, 3, 50, 50])) {
        Err(Error::Shape(_)) => {}
        other => return Err(format!("50x50 gave {:?} instead of a shape error", other.err())),
    }
    Ok("4 sizes map to themselves with /4 /2 /1 hypervision; 50x50 rejected".into())
}

fn parameter_accounting() -> Outcome {
    let base = ModelConfig::default();
    let count = |cfg: &ModelConfig, seed| count_parameters(&build_model(cfg, seed).unwrap());
    let full = count(&base, 0);
    ensure!(full == count(&base, 0) && full == count(&base, 99), "count depends on build");
    let variants = [
        ModelConfig { use_coord: false, ..base.clone() },
        ModelConfig { use_cbam_skips: false, ..base.clone() },
        ModelConfig { use_channel_attention: false, ..base.clone() },
    ];
    let reduced: Vec<usize> = variants.iter().map(|c| count(c, 0)).collect();
    ensure!(reduced.iter().all(|c| *c < full), "ablation counts {reduced:?} vs full {full}");
    ensure!((1_000_000..=2_500_000).contains(&full), "default count {full} outside [1.0M, 2.5M]");
    Ok(format!("default {full} (reference 1,646,998); ablations {reduced:?}"))
}

fn overfit_smoke() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<SamplePair> = (0..4).map(|i| synthetic_pair(i, 64, 64)).collect();
    let config = TrainConfig {
        model: ModelConfig {
            level_widths: [8, 16, 32],
            rcabs_per_level: 1,
            ..ModelConfig::default()
        },
        epochs: 500,
        batch_size: 4,
        patch_size: 64,
        augment: false,
        checkpoint_dir: dir.path().to_path_buf(),
        ..TrainConfig::default()
    };
    let outcome = train(&config, &data, &[], &TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure!(outcome.steps.len() == 500, "ran {} steps", outcome.steps.len());
    let first = outcome.steps[0].loss.total;
    let last = outcome.steps[499].loss.total;
    let psnr = evaluate_dataset(&outcome.model, &data, &EvalOptions::default()).unwrap().mean_psnr;
    ensure!(last < 0.1 * first, "loss {first:.4} -> {last:.4}");
    ensure!(psnr > 30.0, "train PSNR {psnr:.2} dB");
    Ok(format!("loss {first:.4} -> {last:.4} ({:.1}%), train PSNR {psnr:.2} dB", 100.0 * last / first))
}

fn determinism() -> Outcome {
    let data: Vec<SamplePair> = (0..4).map(|i| synthetic_pair(i, 24, 24)).collect();
    let config = |dir: &std::path::Path| TrainConfig {
        model: ModelConfig {
            level_widths: [4, 4, 8],
            rcabs_per_level: 1,
            ..ModelConfig::default()
        },
        epochs: 10,
        batch_size: 2,
        patch_size: 16,
        seed: 17,
        checkpoint_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run_a = train(&config(a.path()), &data, &[], &TrainOptions::default()).unwrap();
    let run_b = train(&config(b.path()), &data, &[], &TrainOptions::default()).unwrap();
    ensure!(run_a.steps == run_b.steps, "loss logs differ between identical runs");

    let loaded = demoire::checkpoint::load_checkpoint(&a.path().join(LAST_CHECKPOINT)).unwrap();
    let x = &data[0].moire;
    ensure!(loaded.model.forward(x).unwrap() == run_a.model.forward(x).unwrap(), "checkpoint round trip differs");

    let first = train(&config(c.path()), &data, &[], &TrainOptions { stop_after: Some(4), resume: None }).unwrap();
    let resume = TrainOptions {
        stop_after: None,
        resume: Some(c.path().join(LAST_CHECKPOINT)),
    };
    let second = train(&config(c.path()), &data, &[], &resume).unwrap();
    let same = run_a
        .model
        .params()
        .iter()
        .zip(second.model.params().iter())
        .all(|((_, _, x), (_, _, y))| x == y);
    ensure!(same, "5 + 5 resumed weights differ from 10 straight epochs");
    ensure!(
        first.steps.iter().chain(&second.steps).eq(run_a.steps.iter()),
        "resumed loss log differs"
    );
    Ok(format!("{} logged steps identical; round trip and 5+5 resume exact", run_a.steps.len()))
}

fn schedule_endpoints() -> Outcome {
    let config = TrainConfig::default();
    let (start, end, mid) = (
        lr_at_epoch(&config, 0).unwrap(),
        lr_at_epoch(&config, 499).unwrap(),
        lr_at_epoch(&config, 250).unwrap(),
    );
    ensure!(start == 1e-3 && end == 1e-5, "endpoints {start} {end}");
    // 1e-3 · 10^(-2·250/499) = 1e-3 · 10^(-1.002004) ≈ 9.9540e-5
    let expected = 9.9540e-5;
    ensure!((mid - expected).abs() < 1e-7, "midpoint {mid}, expected {expected}");
    Ok(format!("lr(0) = {start:e}, lr(499) = {end:e}, lr(250) = {mid:.4e}"))
}

fn ablation_protocol() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    write_dataset(&data_dir, 20, 32);
    let config = serde_json::json!({
        "model": { "level_widths": [4, 8, 8], "rcabs_per_level": 1 },
        "epochs": 3,
        "batch_size": 4,
        "patch_size": 32,
        "seed": 3,
        "data_dir": data_dir,
        "val_count": 6,
    });
    let config_path = dir.path().join("ablation.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_demoire"))
        .args(["ablate", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ensure!(status.status.success(), "ablate failed: {}", String::from_utf8_lossy(&status.stderr));
    let report: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(
        labels == ["without CCL", "without CBAM", "without channel attention", "Our Proposed Model"],
        "labels {labels:?}"
    );
    let proposed = &report.rows[3];
    ensure!(proposed.train_ids.len() == 14 && proposed.val_ids.len() == 6, "split sizes");
    for row in &report.rows {
        ensure!(row.train_ids == proposed.train_ids && row.val_ids == proposed.val_ids, "{}: split differs", row.label);
    }
    let diffs: Vec<&[String]> = report.rows.iter().map(|r| r.config_diff.as_slice()).collect();
    ensure!(
        diffs == [&["use_coord".to_string()][..], &["use_cbam_skips".into()], &["use_channel_attention".into()], &[]],
        "config diffs {diffs:?}"
    );
    let table = String::from_utf8_lossy(&status.stdout);
    ensure!(table.lines().count() == 6, "table has {} lines", table.lines().count());
    Ok("4 labelled rows, shared 14/6 split, single-flag diffs".into())
}

fn data_pipeline() -> Outcome {
    let pair = synthetic_pair(0, 16, 24);
    ensure!(hflip(&hflip(&pair.moire)) == pair.moire, "double hflip");
    ensure!(rot90(&rot90(&rot90(&rot90(&pair.moire)))) == pair.moire, "quadruple rotation");
    let marked = {
        let moire = Tensor::from_fn([1, 3, 16, 24], |_, c, h, w| (c * 1000 + h * 30 + w) as f64);
        SamplePair::new("m", moire.clone(), moire.map(|v| -v)).unwrap()
    };
    for k in 0..16u8 {
        let spec = AugmentSpec {
            rot_quarters: k % 4,
            hflip: k & 4 != 0,
            vflip: k & 8 != 0,
        };
        let out = apply_augment(&marked, spec);
        ensure!(out.clean == out.moire.map(|v| -v), "pair misaligned under {spec:?}");
    }

    let ten: Vec<SamplePair> = (0..10).map(|i| synthetic_pair(i, 8, 8)).collect();
    let (train_a, val_a) = split_dataset(&ten, 7, 3, 9).unwrap();
    let (train_b, val_b) = split_dataset(&ten, 7, 3, 9).unwrap();
    let ids = |s: &[SamplePair]| s.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    ensure!(train_a.len() == 7 && val_a.len() == 3, "split sizes");
    ensure!(ids(&train_a) == ids(&train_b) && ids(&val_a) == ids(&val_b), "split not reproducible");
    ensure!(ids(&train_a).iter().all(|id| !ids(&val_a).contains(id)), "split not disjoint");

    let mut rotations = [0usize; 4];
    let (mut h, mut v) = (0usize, 0usize);
    for i in 0..4000 {
        let spec = sample_augment(&mut SampleKey::new(42, 0, i).rng(Stream::Augment));
        rotations[spec.rot_quarters as usize] += 1;
        h += spec.hflip as usize;
        v += spec.vflip as usize;
    }
    let freq = |n: usize| n as f64 / 4000.0;
    ensure!(rotations.iter().all(|r| (0.225..=0.275).contains(&freq(*r))), "rotation counts {rotations:?}");
    ensure!((0.47..=0.53).contains(&freq(h)) && (0.47..=0.53).contains(&freq(v)), "flip counts {h} {v}");
    Ok(format!("involutions exact, 16 specs aligned, 7/3 split ok, rotations {rotations:?}, hflip {h}, vflip {v}"))
}

fn main() {
    let checks: [(&str, Check); 12] = [
        ("loss gradients vs finite differences", loss_gradients),
        ("ssim map vs sliding-window oracle", ssim_oracle),
        ("closed-form ssim for constant images", closed_form_ssim),
        ("pixel shuffle vs index formula", pixel_shuffle_oracle),
        ("zero-weight block identities", zero_weight_identities),
        ("network shape contract", shape_contract),
        ("parameter accounting", parameter_accounting),
        ("overfit smoke test", overfit_smoke),
        ("determinism, round trip and resume", determinism),
        ("learning-rate schedule endpoints", schedule_endpoints),
        ("ablation protocol via the cli", ablation_protocol),
        ("data pipeline", data_pipeline),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
