use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}'")),
        }
    }
}

/// One manifest line. Field order here is the on-disk order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub weight_kda: Option<f64>,
    pub resolution_a: Option<f64>,
    pub contour: Option<f64>,
    pub method: Option<String>,
    pub pixel_size_a: Option<f64>,
    /// Entry this one was derived from (augmented copies).
    pub source_id: Option<String>,
    pub split: Option<Split>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, path: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            weight_kda: None,
            resolution_a: None,
            contour: None,
            method: None,
            pixel_size_a: None,
            source_id: None,
            split: None,
        }
    }

    /// Entries sharing a group always land in the same split.
    pub fn group(&self) -> &str {
        self.source_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    ratios: [f64; 3],
    seed: u64,
}

const FORMAT: &str = "swan-vox-manifest/1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("{groups} source entries cannot fill {splits} splits")]
    TooFewEntries { groups: usize, splits: usize },
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            ..Default::default()
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = ManifestHeader {
            format: FORMAT.to_string(),
            ratios: self.ratios,
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, ManifestError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let parse_err = |line: usize, e: serde_json::Error| ManifestError::Parse {
            line: line + 1,
            message: e.to_string(),
        };
        let (hl, header) = lines.next().ok_or(ManifestError::Parse {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(&header?).map_err(|e| parse_err(hl, e))?;
        if header.format != FORMAT {
            return Err(ManifestError::Parse {
                line: hl + 1,
                message: format!("unsupported format '{}'", header.format),
            });
        }
        let mut entries = Vec::new();
        for (ln, l) in lines {
            entries.push(serde_json::from_str(&l?).map_err(|e| parse_err(ln, e))?);
        }
        Ok(Self {
            entries,
            ratios: header.ratios,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Map EMDB method names and common abbreviations onto one spelling.
pub fn canonical_method(method: &str) -> String {
    let m: String = method.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
    match m.as_str() {
        "spa" | "singleparticle" | "singleparticleanalysis" => "SPA".into(),
        "sta" | "subtomogramaveraging" | "subtomogram" => "STA".into(),
        "helical" => "helical".into(),
        "tomography" | "tomo" => "tomography".into(),
        "electroncrystallography" | "crystallography" => "crystallography".into(),
        _ => method.to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationFilters {
    /// Inclusive band in kDa.
    pub weight_band: Option<(f64, f64)>,
    pub methods: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Drop entries outside the weight band or method set, returning the reasons.
pub fn curate(manifest: &DatasetManifest, filters: &CurationFilters) -> (DatasetManifest, Vec<Exclusion>) {
    let methods: Option<BTreeSet<String>> =
        filters.methods.as_ref().map(|m| m.iter().map(|s| canonical_method(s)).collect());
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for e in &manifest.entries {
        let mut reason = None;
        if let Some((lo, hi)) = filters.weight_band {
            match e.weight_kda {
                None => reason = Some("molecular weight missing".to_string()),
                Some(w) if w < lo || w > hi => {
                    reason = Some(format!("molecular weight {w} kDa outside [{lo}, {hi}]"))
                }
                _ => {}
            }
        }
        if reason.is_none() {
            if let Some(allowed) = &methods {
                match &e.method {
                    None => reason = Some("method missing".to_string()),
                    Some(m) if !allowed.contains(&canonical_method(m)) => {
                        reason = Some(format!("method '{m}' not in {allowed:?}"))
                    }
                    _ => {}
                }
            }
        }
        match reason {
            Some(reason) => {
                log::info!("excluded {}: {reason}", e.id);
                excluded.push(Exclusion {
                    id: e.id.clone(),
                    reason,
                });
            }
            None => kept.push(e.clone()),
        }
    }
    (
        DatasetManifest {
            entries: kept,
            ..manifest.clone()
        },
        excluded,
    )
}

/// Largest-remainder apportionment; every split with a positive ratio gets at least one group.
fn split_counts(groups: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * groups as f64).collect();
    let mut counts = [0usize; 3];
    for k in 0..3 {
        counts[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = groups - counts.iter().sum::<usize>().min(groups);
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

/// Assign splits by shuffling source groups with `seed`.
pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest, ManifestError> {
    if ratios.iter().any(|&r| r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ManifestError::BadRatios(ratios));
    }
    // BTreeMap keeps the pre-shuffle order independent of input order
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.group()).or_default().push(i);
    }
    let splits = ratios.iter().filter(|&&r| r > 0.0).count();
    if groups.len() < splits {
        return Err(ManifestError::TooFewEntries {
            groups: groups.len(),
            splits,
        });
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = split_counts(keys.len(), ratios);
    let mut out = DatasetManifest {
        entries: manifest.entries.clone(),
        ratios,
        seed,
    };
    let mut cursor = 0;
    for (k, split) in Split::ALL.iter().enumerate() {
        for key in &keys[cursor..cursor + counts[k]] {
            for &i in &groups[key] {
                out.entries[i].split = Some(*split);
            }
        }
        cursor += counts[k];
    }
    Ok(out)
}
