//! Binary checkpoints: magic bytes, a JSON manifest, then every parameter as
//! little-endian `f32`.
//!
//! Layout: `TCPF1`, manifest length as `u32` LE, manifest JSON, blob.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cin::{CinHyper, CinModel};
use crate::error::{Error, Result};
use crate::model::Amoclust;
use crate::nn::ParamStore;
use crate::pin::{PinHyper, PinModel};
use crate::train::{CinLossKind, Coupling, PinLossKind, TrainConfig};

pub const MAGIC: &[u8; 5] = b"TCPF1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_MANIFEST: u32 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// How the stored parameters were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    pub seed: u64,
    pub step: usize,
    pub pin_loss: PinLossKind,
    pub cin_loss: CinLossKind,
    pub coupling: Coupling,
    /// Dataset sizes seen in training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
}

/// Inclusive row and column ranges of the training prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub n_min: usize,
    pub n_max: usize,
    pub d_min: usize,
    pub d_max: usize,
}

impl Envelope {
    /// Human-readable reasons why an `n × d` dataset lies outside the envelope.
    pub fn violations(&self, n: usize, d: usize) -> Vec<String> {
        let mut out = Vec::new();
        if n < self.n_min || n > self.n_max {
            out.push(format!("{n} rows outside the trained range [{}, {}]", self.n_min, self.n_max));
        }
        if d < self.d_min || d > self.d_max {
            out.push(format!("{d} columns outside the trained range [{}, {}]", self.d_min, self.d_max));
        }
        out
    }
}

impl TrainingInfo {
    pub fn from_config(cfg: &TrainConfig, step: usize) -> Self {
        let p = &cfg.prior;
        TrainingInfo {
            seed: cfg.seed,
            step,
            pin_loss: cfg.pin_loss,
            cin_loss: cfg.cin_loss,
            coupling: cfg.coupling,
            envelope: Some(Envelope {
                n_min: p.n_min,
                n_max: p.n_max,
                d_min: p.d_min,
                d_max: p.d_max,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Precision used during training; the blob is always `f32`.
    pub training_precision: String,
    pub pin: PinHyper,
    pub cin: CinHyper,
    pub training: TrainingInfo,
    pub tensors: Vec<TensorEntry>,
}

fn entries(prefix: &str, store: &ParamStore, offset: &mut usize) -> Vec<TensorEntry> {
    store
        .names()
        .iter()
        .zip(store.values())
        .map(|(name, t)| {
            let e = TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                offset: *offset,
            };
            *offset += t.numel() * 4;
            e
        })
        .collect()
}

pub fn write_checkpoint(w: &mut impl Write, model: &Amoclust, training: &TrainingInfo) -> Result<()> {
    let mut offset = 0;
    let mut tensors = entries("pin", &model.pin.store, &mut offset);
    tensors.extend(entries("cin", &model.cin.store, &mut offset));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        training_precision: "f64".into(),
        pin: model.pin.hyper.clone(),
        cin: model.cin.hyper.clone(),
        training: training.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(offset);
    for t in model.pin.store.values().iter().chain(model.cin.store.values()) {
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&blob)?;
    Ok(())
}

pub fn save(path: &Path, model: &Amoclust, training: &TrainingInfo) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, training)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(Amoclust, Manifest)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| format_err("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(format_err(format!("not a checkpoint: magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| format_err("truncated manifest length"))?;
    let len = u32::from_le_bytes(len);
    if len > MAX_MANIFEST {
        return Err(format_err(format!("manifest length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| format_err("truncated manifest"))?;
    let version: serde_json::Value = serde_json::from_slice(&json)?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(format_err(format!(
                "unsupported checkpoint version {other:?}; this build reads version {FORMAT_VERSION}"
            )))
        }
    }
    let manifest: Manifest = serde_json::from_value(version)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if blob.len() != expected {
        return Err(format_err(format!("blob has {} bytes, manifest describes {expected}", blob.len())));
    }
    let mut pin_params = Vec::new();
    let mut cin_params = Vec::new();
    let mut cursor = 0;
    for e in &manifest.tensors {
        if e.offset != cursor {
            return Err(format_err(format!("tensor {} at offset {}, expected {cursor}", e.name, e.offset)));
        }
        let numel: usize = e.shape.iter().product();
        let data = blob[cursor..cursor + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        cursor += numel * 4;
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.name.split_once('.') {
            Some(("pin", rest)) => pin_params.push((rest.to_string(), t)),
            Some(("cin", rest)) => cin_params.push((rest.to_string(), t)),
            _ => return Err(format_err(format!("tensor name {:?} has no pin/cin prefix", e.name))),
        }
    }
    let mut pin = PinModel::new(manifest.pin.clone(), 0)?;
    pin.store.load_from(&pin_params)?;
    let mut cin = CinModel::new(manifest.cin.clone(), 0)?;
    cin.store.load_from(&cin_params)?;
    Ok((Amoclust::new(pin, cin)?, manifest))
}

pub fn load(path: &Path) -> Result<(Amoclust, Manifest)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(&mut f)
}
