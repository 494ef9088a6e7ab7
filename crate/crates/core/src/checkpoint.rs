//! Checkpoint files.
//!
//! A checkpoint `<stem>` is three files in one directory:
//!
//! * `<stem>.weights`: named f64 arrays in the binary layout below;
//! * `<stem>.json`: the sidecar ([`Sidecar`]), the interchange format;
//! * `<stem>.adam`: optimizer moments (same binary layout), used to resume.
//!
//! Binary layout, little endian: magic `DMRT`, `u32` version, `u32` array
//! count, then per array `u32` name length, UTF-8 name, four `u32` dims and
//! the f64 values; the file ends with the SHA-256 of everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::{build_model, HyperVisionNet, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMRT";
const VERSION: u32 = 1;

pub const WEIGHTS_EXT: &str = "weights";
pub const SIDECAR_EXT: &str = "json";
pub const OPTIMIZER_EXT: &str = "adam";

/// Headline metrics stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub split_label: String,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl From<&MetricReport> for CheckpointMetrics {
    fn from(r: &MetricReport) -> Self {
        CheckpointMetrics {
            split_label: r.split_label.clone(),
            count: r.count,
            mean_psnr: r.mean_psnr,
            mean_ssim: r.mean_ssim,
        }
    }
}

/// JSON sidecar describing a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ModelConfig,
    pub seed: u64,
    /// Last completed epoch (0-based).
    pub epoch: usize,
    pub parameter_count: usize,
    pub metrics: Option<CheckpointMetrics>,
    #[serde(default)]
    pub optimizer_step: u64,
    #[serde(default)]
    pub best_val_psnr: Option<f64>,
}

pub fn encode_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let items: Vec<_> = items.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("weights file is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 12 + 32 {
        return Err(Error::Checkpoint("weights file is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("weights checksum mismatch (corrupt file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("{} not found", path.display())),
        _ => Error::io(path, e),
    })
}

/// Paths of the three files of checkpoint `stem` inside `dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub sidecar: PathBuf,
    pub optimizer: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self::from_any(&dir.join(stem))
    }

    /// Accepts the weights file, the sidecar or the bare stem path.
    pub fn from_any(path: &Path) -> Self {
        let base = match path.extension().and_then(|e| e.to_str()) {
            Some(WEIGHTS_EXT | SIDECAR_EXT | OPTIMIZER_EXT) => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        let with = |ext: &str| {
            let mut s = base.clone().into_os_string();
            s.push(".");
            s.push(ext);
            PathBuf::from(s)
        };
        CheckpointPaths {
            weights: with(WEIGHTS_EXT),
            sidecar: with(SIDECAR_EXT),
            optimizer: with(OPTIMIZER_EXT),
        }
    }
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub model: HyperVisionNet,
    pub sidecar: Sidecar,
    pub optimizer: Option<Adam>,
}

/// Writes weights, sidecar and (when given) optimizer state.
pub fn save_checkpoint(paths: &CheckpointPaths, model: &HyperVisionNet, sidecar: &Sidecar, optimizer: Option<&Adam>) -> Result<()> {
    if let Some(dir) = paths.weights.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let store = model.params();
    write_atomic(&paths.weights, &encode_tensors(store.iter().map(|(_, n, t)| (n, t))))?;
    if let Some(adam) = optimizer {
        let names: Vec<(String, &Tensor)> = store
            .names()
            .iter()
            .zip(&adam.m)
            .map(|(n, t)| (format!("m.{n}"), t))
            .chain(store.names().iter().zip(&adam.v).map(|(n, t)| (format!("v.{n}"), t)))
            .collect();
        write_atomic(&paths.optimizer, &encode_tensors(names.iter().map(|(n, t)| (n.as_str(), *t))))?;
    }
    let json = serde_json::to_vec_pretty(sidecar).expect("sidecar serializes");
    write_atomic(&paths.sidecar, &json)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Rebuilds the model from the sidecar and loads its weights, verifying that
/// names, shapes and the parameter count agree.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let paths = CheckpointPaths::from_any(path);
    let sidecar = read_sidecar(&paths.sidecar)?;
    let mut model = build_model(&sidecar.config, sidecar.seed)
        .map_err(|e| Error::Checkpoint(format!("sidecar config is invalid: {e}")))?;
    let arrays = decode_tensors(&read(&paths.weights)?)?;
    let count: usize = arrays.iter().map(|(_, t)| t.len()).sum();
    if count != sidecar.parameter_count {
        return Err(Error::Checkpoint(format!(
            "weights hold {count} parameters but the sidecar says {}",
            sidecar.parameter_count
        )));
    }
    let mut store = model.params().clone();
    if arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "weights hold {} arrays, model expects {}",
            arrays.len(),
            store.len()
        )));
    }
    for (name, t) in arrays {
        if store.id(&name).is_none() {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
        store.assign(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    model.load_params(store)?;

    let optimizer = if paths.optimizer.exists() {
        Some(load_optimizer(&paths.optimizer, model.params(), sidecar.optimizer_step)?)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        sidecar,
        optimizer,
    })
}

fn load_optimizer(path: &Path, store: &ParamStore, step: u64) -> Result<Adam> {
    let arrays = decode_tensors(&read(path)?)?;
    let mut adam = Adam::new(store, AdamConfig::default());
    adam.step = step;
    let n = store.len();
    if arrays.len() != 2 * n {
        return Err(Error::Checkpoint(format!(
            "optimizer state holds {} arrays, expected {}",
            arrays.len(),
            2 * n
        )));
    }
    for (i, (name, t)) in arrays.into_iter().enumerate() {
        let (slot, expect) = if i < n {
            (&mut adam.m[i], format!("m.{}", store.names()[i]))
        } else {
            (&mut adam.v[i - n], format!("v.{}", store.names()[i - n]))
        };
        if name != expect || t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("optimizer array {name} does not match {expect}")));
        }
        *slot = t;
    }
    Ok(adam)
}
