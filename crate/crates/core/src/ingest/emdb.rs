use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const ENV_METADATA_URL: &str = "SWAN_VOX_EMDB_URL";
pub const ENV_MAP_URL: &str = "SWAN_VOX_EMDB_MAP_URL";
pub const ENV_CACHE_DIR: &str = "SWAN_VOX_CACHE_DIR";
pub const ENV_OFFLINE: &str = "SWAN_VOX_OFFLINE";

const DEFAULT_METADATA_URL: &str = "https://www.ebi.ac.uk/emdb/api/entry";
const DEFAULT_MAP_URL: &str = "https://ftp.ebi.ac.uk/pub/databases/emdb/structures";
const METADATA_FILE: &str = "metadata.json";
const MAP_FILE: &str = "map.mrc.gz";

#[derive(Debug, Error)]
pub enum EmdbError {
    #[error("accession {0} not found")]
    NotFound(String),
    #[error("accession {0} is not cached and offline mode is on")]
    CacheMiss(String),
    #[error("request to {url} failed after {attempts} attempts: {message}")]
    Http { url: String, attempts: usize, message: String },
    #[error("malformed metadata for {id}: {message}")]
    Metadata { id: String, message: String },
    #[error("invalid accession '{0}'")]
    BadAccession(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
}

impl EmdbError {
    /// Failures that come from the network rather than the request or the cache.
    pub fn is_network(&self) -> bool {
        matches!(self, EmdbError::Http { .. })
    }
}

/// The metadata fields curation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdbRecord {
    pub accession: String,
    pub weight_kda: Option<f64>,
    pub resolution_a: Option<f64>,
    pub contour: Option<f64>,
    pub method: Option<String>,
    pub pixel_size_a: Option<f64>,
}

/// Normalize "1234", "emd-1234" and "EMD_1234" to "EMD-1234".
pub fn normalize_accession(id: &str) -> Result<String, EmdbError> {
    let t = id.trim();
    let digits = t
        .trim_start_matches(|c: char| c.is_ascii_alphabetic())
        .trim_start_matches(['-', '_']);
    if digits.len() >= 4 && digits.chars().all(|c| c.is_ascii_digit()) && (t.len() == digits.len() || t[..3].eq_ignore_ascii_case("emd")) {
        Ok(format!("EMD-{digits}"))
    } else {
        Err(EmdbError::BadAccession(id.to_string()))
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        Value::Object(o) => o.get("valueOf_").and_then(number),
        _ => None,
    }
}

fn path<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a Value> {
    let mut cur = v;
    for k in keys {
        cur = match cur {
            Value::Array(a) => a.first()?.get(k)?,
            _ => cur.get(k)?,
        };
    }
    match cur {
        Value::Array(a) => a.first(),
        _ => Some(cur),
    }
}

fn weight_in_kda(v: &Value) -> Option<f64> {
    let x = number(v)?;
    let units = v.get("units").and_then(Value::as_str).unwrap_or("kDa").to_ascii_lowercase();
    Some(match units.as_str() {
        "mda" => x * 1000.0,
        "da" => x / 1000.0,
        _ => x,
    })
}

/// Accepts either a flat record or the nested EMDB entry document.
pub fn parse_metadata(accession: &str, json: &[u8]) -> Result<EmdbRecord, EmdbError> {
    let v: Value = serde_json::from_slice(json).map_err(|e| EmdbError::Metadata {
        id: accession.to_string(),
        message: e.to_string(),
    })?;
    if v.get("weight_kda").is_some() || v.get("contour").is_some() {
        let mut r: EmdbRecord = serde_json::from_value(v).map_err(|e| EmdbError::Metadata {
            id: accession.to_string(),
            message: e.to_string(),
        })?;
        r.accession = accession.to_string();
        return Ok(r);
    }
    let sd = ["structure_determination_list", "structure_determination"];
    let weight = path(&v, &["sample", "supramolecule_list", "supramolecule", "molecular_weight", "theoretical"])
        .or_else(|| path(&v, &["sample", "supramolecule_list", "supramolecule", "molecular_weight", "experimental"]))
        .and_then(weight_in_kda);
    let resolution = path(
        &v,
        &[sd[0], sd[1], "image_processing", "final_reconstruction", "resolution"],
    )
    .and_then(number);
    let method = path(&v, &[sd[0], sd[1], "method"]).and_then(Value::as_str).map(str::to_string);
    let contour = path(&v, &["map", "contour_list", "contour", "level"]).and_then(number);
    let pixel = path(&v, &["map", "pixel_spacing", "x"]).and_then(number);
    Ok(EmdbRecord {
        accession: accession.to_string(),
        weight_kda: weight,
        resolution_a: resolution,
        contour,
        method,
        pixel_size_a: pixel,
    })
}

#[derive(Clone, Debug)]
pub struct EmdbConfig {
    pub metadata_url: String,
    pub map_url: String,
    pub cache_dir: PathBuf,
    pub offline: bool,
    pub max_attempts: usize,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl EmdbConfig {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            metadata_url: DEFAULT_METADATA_URL.to_string(),
            map_url: DEFAULT_MAP_URL.to_string(),
            cache_dir: cache_dir.into(),
            offline: false,
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    /// Overlay the environment variables onto `self`.
    pub fn with_env(mut self) -> Self {
        if let Ok(u) = std::env::var(ENV_METADATA_URL) {
            self.metadata_url = u;
        }
        if let Ok(u) = std::env::var(ENV_MAP_URL) {
            self.map_url = u;
        }
        if let Ok(d) = std::env::var(ENV_CACHE_DIR) {
            self.cache_dir = d.into();
        }
        if let Ok(o) = std::env::var(ENV_OFFLINE) {
            self.offline = matches!(o.to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "on");
        }
        self
    }
}

pub struct EmdbClient {
    config: EmdbConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Vec<u8>),
    NotFound,
    Fatal(String),
    Retry(String),
}

impl EmdbClient {
    pub fn new(config: EmdbConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &EmdbConfig {
        &self.config
    }

    pub fn cache_path(&self, accession: &str) -> PathBuf {
        self.config.cache_dir.join(accession)
    }

    fn attempt(&self, url: &str) -> Attempt {
        match self.agent.get(url).call() {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match status {
                    200..=299 => match resp.body_mut().with_config().limit(u64::MAX).read_to_vec() {
                        Ok(b) => Attempt::Done(b),
                        Err(e) => Attempt::Retry(e.to_string()),
                    },
                    404 | 410 => Attempt::NotFound,
                    408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
                    _ => Attempt::Fatal(format!("HTTP {status}")),
                }
            }
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }

    /// GET with exponential backoff; 404 fails immediately.
    fn get(&self, url: &str, accession: &str) -> Result<Vec<u8>, EmdbError> {
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.base_delay * (1 << (attempt - 1)) as u32);
            }
            match self.attempt(url) {
                Attempt::Done(b) => return Ok(b),
                Attempt::NotFound => return Err(EmdbError::NotFound(accession.to_string())),
                Attempt::Fatal(m) => {
                    return Err(EmdbError::Http {
                        url: url.to_string(),
                        attempts: attempt + 1,
                        message: m,
                    })
                }
                Attempt::Retry(m) => {
                    log::warn!("GET {url} attempt {} failed: {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(EmdbError::Http {
            url: url.to_string(),
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    fn read_cache(&self, accession: &str) -> Option<(Vec<u8>, Vec<u8>)> {
        let dir = self.cache_path(accession);
        let meta = std::fs::read(dir.join(METADATA_FILE)).ok()?;
        let map = std::fs::read(dir.join(MAP_FILE)).ok()?;
        Some((meta, map))
    }

    /// Metadata and gzip-compressed map for one accession, from cache when present.
    pub fn fetch(&self, id: &str) -> Result<(EmdbRecord, Vec<u8>), EmdbError> {
        let acc = normalize_accession(id)?;
        if let Some((meta, map)) = self.read_cache(&acc) {
            return Ok((parse_metadata(&acc, &meta)?, map));
        }
        if self.config.offline {
            return Err(EmdbError::CacheMiss(acc));
        }
        let meta = self.get(&format!("{}/{acc}", self.config.metadata_url.trim_end_matches('/')), &acc)?;
        let record = parse_metadata(&acc, &meta)?;
        let number = acc.trim_start_matches("EMD-");
        let map_url = format!("{}/{acc}/map/emd_{number}.map.gz", self.config.map_url.trim_end_matches('/'));
        let map = self.get(&map_url, &acc)?;
        let dir = self.cache_path(&acc);
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(MAP_FILE), &map)?;
        // metadata last: its presence marks a complete entry
        write_atomic(&dir.join(METADATA_FILE), &meta)?;
        Ok((record, map))
    }

    /// Fetch many accessions with up to `workers` requests in flight; results keep input order.
    pub fn fetch_all(&self, ids: &[String], workers: usize) -> Vec<Result<(EmdbRecord, Vec<u8>), EmdbError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<(EmdbRecord, Vec<u8>), EmdbError>>>> = ids.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers.clamp(1, ids.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= ids.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(self.fetch(&ids[i]));
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
    }
}

/// Write through a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Store a fixture in the cache layout the client reads.
pub fn seed_cache(cache_dir: &Path, record: &EmdbRecord, map_gz: &[u8]) -> Result<(), EmdbError> {
    let acc = normalize_accession(&record.accession)?;
    let dir = cache_dir.join(&acc);
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(MAP_FILE), map_gz)?;
    write_atomic(&dir.join(METADATA_FILE), &serde_json::to_vec_pretty(record).expect("serializable"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accession_forms() {
        assert_eq!(normalize_accession("1234").unwrap(), "EMD-1234");
        assert_eq!(normalize_accession("emd_4960").unwrap(), "EMD-4960");
        assert_eq!(normalize_accession("EMD-12345").unwrap(), "EMD-12345");
        assert!(normalize_accession("PDB-1234").is_err());
        assert!(normalize_accession("EMD-12").is_err());
        assert!(normalize_accession("../etc").is_err());
    }

    #[test]
    fn nested_metadata_is_flattened() {
        let doc = serde_json::json!({
            "sample": {"supramolecule_list": {"supramolecule": [
                {"molecular_weight": {"theoretical": {"valueOf_": 0.45, "units": "MDa"}}}
            ]}},
            "structure_determination_list": {"structure_determination": [{
                "method": "singleParticle",
                "image_processing": [{"final_reconstruction": {"resolution": {"valueOf_": "3.2", "res_type": "BY AUTHOR"}}}]
            }]},
            "map": {"contour_list": {"contour": [{"level": 0.015, "primary": true}]},
                    "pixel_spacing": {"x": {"valueOf_": 1.06, "units": "Å"}}}
        });
        let r = parse_metadata("EMD-1", &serde_json::to_vec(&doc).unwrap()).unwrap();
        assert_eq!(r.weight_kda, Some(450.0));
        assert_eq!(r.resolution_a, Some(3.2));
        assert_eq!(r.method.as_deref(), Some("singleParticle"));
        assert_eq!(r.contour, Some(0.015));
        assert_eq!(r.pixel_size_a, Some(1.06));
    }

    #[test]
    fn offline_cache_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let rec = EmdbRecord {
            accession: "EMD-1000".into(),
            weight_kda: Some(300.0),
            resolution_a: Some(3.0),
            contour: Some(0.1),
            method: Some("singleParticle".into()),
            pixel_size_a: Some(1.0),
        };
        seed_cache(dir.path(), &rec, b"gz").unwrap();
        let mut cfg = EmdbConfig::new(dir.path());
        cfg.offline = true;
        // unroutable URLs prove the network is never touched
        cfg.metadata_url = "http://127.0.0.1:9".into();
        let c = EmdbClient::new(cfg);
        let (r, map) = c.fetch("1000").unwrap();
        assert_eq!((r, map), (rec, b"gz".to_vec()));
        assert!(matches!(c.fetch("EMD-2000"), Err(EmdbError::CacheMiss(_))));
    }
}
