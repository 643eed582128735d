//! Binary checkpoint format.
//!
//! Layout (little-endian): `b"CHIM"`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u16`, UTF-8 name, rank `u8`, dims as `u32`,
//! data as `f32`. Configuration lives in `meta.*` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use super::config::ModelConfig;
use super::params::ChimeraParams;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;

const MAGIC: &[u8; 4] = b"CHIM";
pub const FORMAT_VERSION: u32 = 1;
const META_MODEL: &str = "meta.model";
const META_FEATURES: &str = "meta.features";
const OPTIMIZER_PREFIX: &str = "rmsprop.";

/// Trained parameters, the feature geometry they expect, and optionally
/// the optimizer accumulators for resuming.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ChimeraParams,
    pub features: FeatureConfig,
    pub optimizer: Option<ChimeraParams>,
}

fn model_meta(cfg: &ModelConfig) -> Vec<f32> {
    let mut v = vec![
        cfg.n_layers as f32,
        cfg.hidden as f32,
        cfg.n_freq as f32,
        cfg.input_dim as f32,
        cfg.embed_dim as f32,
        cfg.n_sources as f32,
    ];
    // 16-bit chunks are exact in f32.
    v.extend((0..4).map(|i| ((cfg.seed >> (16 * i)) & 0xffff) as f32));
    v
}

fn feature_meta(cfg: &FeatureConfig) -> Vec<f32> {
    vec![
        cfg.sample_rate as f32,
        cfg.window_size as f32,
        cfg.hop_size as f32,
        cfg.n_mel as f32,
        if cfg.use_delta { 1.0 } else { 0.0 },
    ]
}

fn as_count(x: f32, what: &str) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
        Ok(x as usize)
    } else {
        Err(Error::Checkpoint(format!("invalid {what} value {x}")))
    }
}

fn parse_model_meta(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != 10 {
        return Err(Error::Checkpoint(format!("{META_MODEL} has {} values, expected 10", v.len())));
    }
    let mut seed = 0u64;
    for i in 0..4 {
        let chunk = as_count(v[6 + i], "seed")?;
        if chunk > 0xffff {
            return Err(Error::Checkpoint("seed chunk out of range".into()));
        }
        seed |= (chunk as u64) << (16 * i);
    }
    let cfg = ModelConfig {
        n_layers: as_count(v[0], "n_layers")?,
        hidden: as_count(v[1], "hidden")?,
        n_freq: as_count(v[2], "n_freq")?,
        input_dim: as_count(v[3], "input_dim")?,
        embed_dim: as_count(v[4], "embed_dim")?,
        n_sources: as_count(v[5], "n_sources")?,
        seed,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
    Ok(cfg)
}

fn parse_feature_meta(v: &[f32]) -> Result<FeatureConfig> {
    if v.len() != 5 {
        return Err(Error::Checkpoint(format!("{META_FEATURES} has {} values, expected 5", v.len())));
    }
    let cfg = FeatureConfig {
        sample_rate: as_count(v[0], "sample_rate")? as u32,
        window_size: as_count(v[1], "window_size")?,
        hop_size: as_count(v[2], "hop_size")?,
        n_mel: as_count(v[3], "n_mel")?,
        use_delta: v[4] != 0.0,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("stored feature config: {e}")))?;
    Ok(cfg)
}

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    let rank = u8::try_from(dims.len()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
    w.write_all(&name_len.to_le_bytes()).map_err(io)?;
    w.write_all(name.as_bytes()).map_err(io)?;
    w.write_all(&[rank]).map_err(io)?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    for x in data {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt.params.tensors();
    let opt = ckpt.optimizer.as_ref().map(|o| o.tensors()).unwrap_or_default();
    if ckpt.optimizer.as_ref().is_some_and(|o| o.config != ckpt.params.config) {
        return Err(Error::Checkpoint("optimizer state does not match parameter shapes".into()));
    }
    let count = (2 + params.len() + opt.len()) as u32;
    let io = |e: std::io::Error| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    let m = model_meta(&ckpt.params.config);
    write_tensor(w, META_MODEL, &[m.len()], m.into_iter())?;
    let f = feature_meta(&ckpt.features);
    write_tensor(w, META_FEATURES, &[f.len()], f.into_iter())?;
    for (name, t) in &params {
        write_tensor(w, name, t.shape(), t.iter().map(|&x| x as f32))?;
    }
    for (name, t) in &opt {
        write_tensor(w, &format!("{OPTIMIZER_PREFIX}{name}"), t.shape(), t.iter().map(|&x| x as f32))?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

struct RawTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor> {
    let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let [rank] = read_exact::<_, 1>(r)?;
    let dims = (0..rank).map(|_| read_exact(r).map(|b| u32::from_le_bytes(b) as usize)).collect::<Result<Vec<_>>>()?;
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let len = len.filter(|&l| l <= 1 << 31).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
    let mut bytes = vec![0u8; 4 * len];
    r.read_exact(&mut bytes).map_err(|e| Error::Checkpoint(format!("truncated tensor {name}: {e}")))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(RawTensor { name, dims, data })
}

fn fill(target: &mut ChimeraParams, tensors: &mut Vec<RawTensor>, prefix: &str) -> Result<()> {
    for (name, mut dst) in target.tensors_mut() {
        let full = format!("{prefix}{name}");
        let pos = tensors
            .iter()
            .position(|t| t.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        let raw = tensors.swap_remove(pos);
        if raw.dims != dst.shape() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor {full} has shape {:?}, model expects {:?}",
                raw.dims,
                dst.shape()
            )));
        }
        let src = ArrayD::from_shape_vec(raw.dims, raw.data).expect("length checked on read");
        dst.zip_mut_with(&src, |d, &s| *d = s as f64);
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    if &read_exact::<_, 4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut tensors = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    let mut take_meta = |name: &str| {
        tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| tensors.swap_remove(i).data)
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
    };
    let model = parse_model_meta(&take_meta(META_MODEL)?)?;
    let features = parse_feature_meta(&take_meta(META_FEATURES)?)?;
    if model.input_dim != features.input_dim() || model.n_freq != features.n_mel {
        return Err(Error::ShapeMismatch(format!(
            "model expects input {} over {} bands, features give {} over {}",
            model.input_dim,
            model.n_freq,
            features.input_dim(),
            features.n_mel
        )));
    }
    let mut params = ChimeraParams::zeros(model);
    fill(&mut params, &mut tensors, "")?;
    let optimizer = if tensors.iter().any(|t| t.name.starts_with(OPTIMIZER_PREFIX)) {
        let mut ms = ChimeraParams::zeros(model);
        fill(&mut ms, &mut tensors, OPTIMIZER_PREFIX)?;
        Some(ms)
    } else {
        None
    };
    if let Some(extra) = tensors.first() {
        return Err(Error::Checkpoint(format!("unexpected tensor {}", extra.name)));
    }
    Ok(Checkpoint { params, features, optimizer })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ckpt)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
