//! Downstream uses of a trained model: denoising, embeddings and neighbor retrieval.

use std::cmp::Ordering;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ModelConfig, NetworkError, SwanModel};
use crate::volume::{fourier_filter, positional_encode, DensityVolume, VolumeError};

/// Pass band of the reference filter, as fractions of Nyquist.
pub const BANDPASS_LOW_CUT: f64 = 0.25;
pub const BANDPASS_HIGH_CUT: f64 = 0.01;

const DB_MAGIC: &[u8; 4] = b"SWEM";
const DB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("embedding dimension {got} does not match {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("k = {k} exceeds the {available} candidates")]
    TooManyNeighbors { k: usize, available: usize },
    #[error("malformed embedding database: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, LatentError>;

/// Encode, quantize against the codebooks and decode.
pub fn denoise(model: &SwanModel<f32>, noisy: &DensityVolume) -> Result<DensityVolume> {
    let x = positional_encode(noisy, model.config().pe_levels)?;
    Ok(model.forward(&x, noisy.spacing())?.reconstruction)
}

/// Reference band-pass filter with pass band `[0.01, 0.25]` of Nyquist.
pub fn baseline_bandpass(noisy: &DensityVolume) -> Result<DensityVolume> {
    Ok(fourier_filter(noisy, BANDPASS_LOW_CUT, BANDPASS_HIGH_CUT)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub id: String,
    pub vector: Vec<f32>,
    pub norm: f64,
}

impl LatentEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Self {
        let norm = vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        Self { id: id.into(), vector, norm }
    }
}

/// Length of an embedding under `config`: `C * sum_k s_k^3`.
pub fn embedding_dim(config: &ModelConfig) -> usize {
    (0..config.levels()).map(|k| config.latent_channels * config.latent_side(k).pow(3)).sum()
}

/// Quantized latents of every level, finest level first, each flattened channel-major.
pub fn embed(model: &SwanModel<f32>, id: &str, vol: &DensityVolume) -> Result<LatentEmbedding> {
    let x = positional_encode(vol, model.config().pe_levels)?;
    let out = model.forward(&x, vol.spacing())?;
    let vector = out.quantized.iter().flat_map(|q| q.data().iter().copied()).collect();
    Ok(LatentEmbedding::new(id, vector))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric {other:?} (expected euclidean or cosine)")),
        }
    }
}

/// Euclidean distance, or `1 - cos` for the cosine metric (1 when either vector is zero).
pub fn distance(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (&x, &y) in a.iter().zip(b) {
                let (x, y) = (x as f64, y as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

/// Exact k nearest entries of `db`; ties go to the smaller id, entries sharing the query id are skipped.
pub fn knn(query: &LatentEmbedding, db: &[LatentEmbedding], k: usize, metric: Metric) -> Result<Vec<Neighbor>> {
    if db.is_empty() {
        return Err(LatentError::EmptyDatabase);
    }
    let mut scored = Vec::with_capacity(db.len());
    for e in db {
        if e.vector.len() != query.vector.len() {
            return Err(LatentError::Dimension {
                expected: query.vector.len(),
                got: e.vector.len(),
            });
        }
        if e.id == query.id {
            continue;
        }
        scored.push(Neighbor {
            id: e.id.clone(),
            distance: distance(&query.vector, &e.vector, metric),
        });
    }
    if k > scored.len() {
        return Err(LatentError::TooManyNeighbors { k, available: scored.len() });
    }
    scored.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(k);
    Ok(scored)
}

/// Path of the id index stored next to a database file.
pub fn ids_path(db: &Path) -> PathBuf {
    let mut p = db.as_os_str().to_owned();
    p.push(".ids");
    PathBuf::from(p)
}

/// Header (`SWEM`, version, dimension, count) and fixed-stride f32 vectors.
pub fn write_db(w: &mut impl Write, entries: &[LatentEmbedding]) -> Result<()> {
    let dim = entries.first().map_or(0, |e| e.vector.len());
    if let Some(e) = entries.iter().find(|e| e.vector.len() != dim) {
        return Err(LatentError::Dimension {
            expected: dim,
            got: e.vector.len(),
        });
    }
    w.write_all(DB_MAGIC)?;
    w.write_u32::<LittleEndian>(DB_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for e in entries {
        for &v in &e.vector {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Reads vectors and pairs them with ids, one per line.
pub fn read_db(r: &mut impl Read, ids: impl BufRead) -> Result<Vec<LatentEmbedding>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DB_MAGIC {
        return Err(LatentError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DB_VERSION {
        return Err(LatentError::Format(format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let ids: Vec<String> = ids.lines().collect::<std::io::Result<_>>()?;
    if ids.len() != count {
        return Err(LatentError::Format(format!("{} ids for {count} vectors", ids.len())));
    }
    ids.into_iter()
        .map(|id| {
            let mut v = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            Ok(LatentEmbedding::new(id, v))
        })
        .collect()
}

pub fn save_db(path: &Path, entries: &[LatentEmbedding]) -> Result<()> {
    let mut buf = Vec::new();
    write_db(&mut buf, entries)?;
    std::fs::write(path, buf)?;
    let ids: String = entries.iter().map(|e| format!("{}\n", e.id)).collect();
    std::fs::write(ids_path(path), ids)?;
    Ok(())
}

pub fn load_db(path: &Path) -> Result<Vec<LatentEmbedding>> {
    let bytes = std::fs::read(path)?;
    let ids = std::fs::read(ids_path(path))?;
    read_db(&mut bytes.as_slice(), ids.as_slice())
}

/// CSV with columns `query_id,rank,neighbor_id,distance`; ranks start at 1.
pub fn write_neighbors_csv(w: &mut impl Write, rows: &[(String, Vec<Neighbor>)]) -> std::io::Result<()> {
    writeln!(w, "query_id,rank,neighbor_id,distance")?;
    for (q, ns) in rows {
        for (i, n) in ns.iter().enumerate() {
            writeln!(w, "{},{},{},{}", q, i + 1, n.id, n.distance)?;
        }
    }
    Ok(())
}

/// Orders neighbors exactly as [`knn`] does.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id))
}
