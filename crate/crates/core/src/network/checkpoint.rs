use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::train::{EpochRecord, TrainState};
use super::{ModelConfig, NetworkError, SwanModel, TrainConfig};
use crate::tensor::{Adam, AdamConfig, Tensor};

const MAGIC: &[u8; 8] = b"SWANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config: TrainConfig,
    epoch: usize,
    adam: AdamConfig,
    adam_step: u64,
    best_val: Option<f64>,
    best_epoch: usize,
    history: Vec<EpochRecord>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SwanModel<f32>,
    pub state: Option<TrainState>,
    /// Non-fatal problems found while loading.
    pub warnings: Vec<String>,
}

fn write_block(w: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let mut body = Vec::with_capacity(t.len() * 4 + name.len() + 32);
    body.write_u16::<LittleEndian>(name.len() as u16).unwrap();
    body.extend_from_slice(name.as_bytes());
    body.write_u8(t.shape().len() as u8).unwrap();
    for &d in t.shape() {
        body.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &v in t.data() {
        body.write_f32::<LittleEndian>(v).unwrap();
    }
    let crc = crc32fast::hash(&body);
    w.extend_from_slice(&body);
    w.write_u32::<LittleEndian>(crc).unwrap();
}

fn read_block(r: &mut &[u8]) -> Result<(String, Tensor<f32>), NetworkError> {
    let start = *r;
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| NetworkError::Checkpoint("block name is not UTF-8".into()))?;
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n * 4 > r.len() {
        return Err(NetworkError::Checkpoint(format!("block {name} is truncated")));
    }
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let body_len = start.len() - r.len();
    let crc = r.read_u32::<LittleEndian>()?;
    if crc32fast::hash(&start[..body_len]) != crc {
        return Err(NetworkError::Checksum(name));
    }
    Ok((name, Tensor::from_vec(&shape, data)))
}

/// Serializes parameters, and optionally the optimizer state, into the checkpoint container.
pub fn encode_checkpoint(model: &SwanModel<f32>, state: Option<&TrainState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.extend_from_slice(&model.config().hash());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.write_u32::<LittleEndian>(config.len() as u32).unwrap();
    out.extend_from_slice(&config);
    let header = state.map(|s| StateHeader {
        config: s.config.clone(),
        epoch: s.epoch,
        adam: s.adam.config,
        adam_step: s.adam.step,
        best_val: s.best_val.is_finite().then_some(s.best_val),
        best_epoch: s.best_epoch,
        history: s.history.clone(),
    });
    let header = header.map(|h| serde_json::to_vec(&h).expect("state serializes")).unwrap_or_default();
    out.write_u32::<LittleEndian>(header.len() as u32).unwrap();
    out.extend_from_slice(&header);
    let names = model.names();
    let blocks = names.len() * if state.is_some() { 3 } else { 1 };
    out.write_u32::<LittleEndian>(blocks as u32).unwrap();
    for (name, p) in names.iter().zip(model.params()) {
        write_block(&mut out, &format!("param/{name}"), p);
    }
    if let Some(s) = state {
        for (name, m) in names.iter().zip(&s.adam.m) {
            write_block(&mut out, &format!("adam.m/{name}"), m);
        }
        for (name, v) in names.iter().zip(&s.adam.v) {
            write_block(&mut out, &format!("adam.v/{name}"), v);
        }
    }
    out
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(path: &Path, model: &SwanModel<f32>, state: Option<&TrainState>) -> Result<(), NetworkError> {
    let bytes = encode_checkpoint(model, state);
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Decodes a checkpoint. When `expected` is given, a different latent width is fatal and any
/// other difference only produces a warning.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, NetworkError> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| NetworkError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(NetworkError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetworkError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > r.len() {
        return Err(NetworkError::Checkpoint("config record is truncated".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&r[..len]).map_err(|e| NetworkError::Checkpoint(format!("config: {e}")))?;
    r = &r[len..];
    let mut warnings = Vec::new();
    if config.hash() != hash {
        warnings.push("stored config hash does not match the stored config".to_string());
    }
    if let Some(exp) = expected {
        if exp.latent_channels != config.latent_channels {
            return Err(NetworkError::ConfigMismatch(format!(
                "checkpoint has {} latent channels, expected {}",
                config.latent_channels, exp.latent_channels
            )));
        }
        if exp.hash() != hash {
            warnings.push(format!("config hash {} differs from the requested config {}", hex(&hash), exp.hash_hex()));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > r.len() {
        return Err(NetworkError::Checkpoint("state record is truncated".into()));
    }
    let header: Option<StateHeader> = if len == 0 {
        None
    } else {
        Some(serde_json::from_slice(&r[..len]).map_err(|e| NetworkError::Checkpoint(format!("state: {e}")))?)
    };
    r = &r[len..];
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut model = SwanModel::<f32>::new(config)?;
    let n = model.params().len();
    let mut seen = vec![false; n];
    let mut m: Vec<Option<Tensor<f32>>> = vec![None; n];
    let mut v: Vec<Option<Tensor<f32>>> = vec![None; n];
    for _ in 0..count {
        let (name, t) = read_block(&mut r)?;
        let (kind, pname) = name.split_once('/').ok_or_else(|| NetworkError::Checkpoint(format!("bad block name {name}")))?;
        let idx = model
            .param_index(pname)
            .ok_or_else(|| NetworkError::Checkpoint(format!("unknown parameter {pname}")))?;
        if t.shape() != model.params()[idx].shape() {
            return Err(NetworkError::ConfigMismatch(format!(
                "parameter {pname} has shape {:?}, expected {:?}",
                t.shape(),
                model.params()[idx].shape()
            )));
        }
        match kind {
            "param" => {
                model.params_mut()[idx] = t;
                seen[idx] = true;
            }
            "adam.m" => m[idx] = Some(t),
            "adam.v" => v[idx] = Some(t),
            _ => return Err(NetworkError::Checkpoint(format!("unknown block kind {kind}"))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(NetworkError::Checkpoint(format!("missing parameter {}", model.names()[i])));
    }
    let state = match header {
        None => None,
        Some(h) => {
            let collect = |xs: Vec<Option<Tensor<f32>>>, what: &str| -> Result<Vec<Tensor<f32>>, NetworkError> {
                xs.into_iter()
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| NetworkError::Checkpoint(format!("missing optimizer {what} blocks")))
            };
            let adam = Adam {
                config: h.adam,
                step: h.adam_step,
                m: collect(m, "first-moment")?,
                v: collect(v, "second-moment")?,
            };
            Some(TrainState {
                config: h.config,
                epoch: h.epoch,
                adam,
                best_val: h.best_val.unwrap_or(f64::INFINITY),
                best_epoch: h.best_epoch,
                history: h.history,
            })
        }
    };
    Ok(Checkpoint { model, state, warnings })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, NetworkError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, expected)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}
