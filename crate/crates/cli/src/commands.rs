use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};
use swanvox::ingest::emdb::{EmdbConfig, EmdbRecord};
use swanvox::ingest::{
    self, apply_contour_mask, parse_mesh, read_map_bytes, split_dataset, write_mrc, CurationFilters, DatasetManifest, EmdbClient,
    EmdbError, Exclusion, ManifestEntry, MrcHeader, Split,
};
use swanvox::latent::{self, LatentEmbedding, Neighbor};
use swanvox::metrics::{self, MetricsReport};
use swanvox::network::{fit, load_checkpoint, save_checkpoint, Checkpoint, CheckpointPolicy, Dataset, EpochRecord, ModelConfig, NetworkError, Sample, SwanModel};
use swanvox::quantizer::utilization;
use swanvox::synthetic::shape_set;
use swanvox::volume::{normalize, pad_or_crop, positional_encode, random_rotation, resample_isotropic, rotate, DensityVolume};

use crate::cli::{CurateArgs, DenoiseArgs, EvalArgs, NeighborsArgs, RunArgs, TrainArgs, VoxelizeArgs};
use crate::config::{run_dir, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn read_map(path: &Path) -> Result<DensityVolume> {
    let bytes = read(path)?;
    read_map_bytes(&bytes)
        .map(|(_, v)| v)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_map(path: &Path, vol: &DensityVolume) -> Result<()> {
    write(path, &write_mrc(&MrcHeader::for_volume(vol), vol))
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    match &run.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Resolve and create the output directory, and store the resolved config in it.
fn open_run(run: &RunArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &run.run_dir {
        Some(d) => d.clone(),
        None => run_dir(run.out_root.as_deref().unwrap_or(&cfg.output.root), &cfg.short_hash()),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

pub fn voxelize(a: &VoxelizeArgs) -> Result<()> {
    let bytes = read(&a.input)?;
    let mesh = parse_mesh(&a.input, &bytes).map_err(|e| CliError::Parse(format!("{}: {e}", a.input.display())))?;
    let vol = ingest::voxelize(&mesh, a.resolution, a.mode.into()).map_err(|e| CliError::Parse(e.to_string()))?;
    let vol = DensityVolume::new(vol.dims(), vol.into_data(), a.spacing)?;
    write_map(&a.output, &vol)?;
    let occupied = vol.data().iter().filter(|&&v| v > 0.0).count();
    log::info!("{} occupied voxels of {}", occupied, vol.len());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CurateOutcome {
    pub run_dir: PathBuf,
    pub manifest: DatasetManifest,
    pub exclusions: Vec<Exclusion>,
}

/// Accessions from a plain list (`#` comments allowed) or from a manifest's ids.
fn read_accessions(path: &Path) -> Result<Vec<String>> {
    let text = String::from_utf8(read(path)?).map_err(|_| CliError::Parse(format!("{}: not UTF-8", path.display())))?;
    let is_manifest = text.lines().map(str::trim).find(|l| !l.is_empty()).is_some_and(|l| l.starts_with('{'));
    if is_manifest {
        let m = DatasetManifest::read_jsonl(text.as_bytes())?;
        let mut ids: Vec<String> = m.entries.iter().map(|e| e.group().to_string()).collect();
        ids.dedup();
        return Ok(ids);
    }
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Per-copy rotation seed, independent of processing order.
fn rotation_seed(seed: u64, accession: &str, copy: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}/{accession}/{copy}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn entry_from(record: &EmdbRecord) -> ManifestEntry {
    ManifestEntry {
        weight_kda: record.weight_kda,
        resolution_a: record.resolution_a,
        contour: record.contour,
        method: record.method.clone(),
        pixel_size_a: record.pixel_size_a,
        ..ManifestEntry::new(record.accession.clone(), String::new())
    }
}

/// Mask, resample, pad/crop and normalize one map, plus its rotated copies.
fn prepare(entry: &ManifestEntry, map_gz: &[u8], cfg: &RunConfig) -> Result<Vec<(ManifestEntry, DensityVolume)>> {
    let c = &cfg.curate;
    let (_, vol) = read_map_bytes(map_gz).map_err(|e| CliError::Parse(format!("{}: {e}", entry.id)))?;
    let vol = match entry.contour {
        Some(level) => apply_contour_mask(&vol, level as f32, c.dilation),
        None => vol,
    };
    let base = pad_or_crop(&resample_isotropic(&vol, c.apix)?, c.size)?;
    let mut out = Vec::with_capacity(c.rotations + 1);
    for copy in 0..=c.rotations {
        let v = if copy == 0 {
            base.clone()
        } else {
            rotate(&base, &random_rotation(rotation_seed(c.seed, &entry.id, copy)))?
        };
        let id = format!("{}_r{copy}", entry.id);
        let e = ManifestEntry {
            id: id.clone(),
            path: format!("volumes/{id}.mrc"),
            pixel_size_a: Some(c.apix),
            source_id: Some(entry.id.clone()),
            ..entry.clone()
        };
        out.push((e, normalize(&v).with_origin(id)));
    }
    Ok(out)
}

pub fn curate(a: &CurateArgs) -> Result<CurateOutcome> {
    let mut cfg = load_config(&a.run)?;
    let c = &mut cfg.curate;
    if let Some(v) = a.weight_min {
        c.weight_min = v;
    }
    if let Some(v) = a.weight_max {
        c.weight_max = v;
    }
    if let Some(v) = a.apix {
        c.apix = v;
    }
    if let Some(v) = a.size {
        c.size = v;
    }
    if let Some(v) = a.rotations {
        c.rotations = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.workers {
        c.workers = v;
    }
    if let Some(v) = &a.cache_dir {
        c.cache_dir = Some(v.clone());
    }
    c.offline |= a.offline;
    let ids = read_accessions(&a.manifest)?;
    if ids.is_empty() {
        return Err(CliError::Parse(format!("{}: no accessions", a.manifest.display())));
    }

    let mut emdb = EmdbConfig::new(cfg.curate.cache_dir.clone().unwrap_or_else(|| PathBuf::from("emdb-cache"))).with_env();
    if let Some(d) = &cfg.curate.cache_dir {
        emdb.cache_dir = d.clone();
    }
    emdb.offline |= cfg.curate.offline;
    let client = EmdbClient::new(emdb);
    let dir = open_run(&a.run, &cfg)?;

    let mut fetched = Vec::new();
    let mut exclusions = Vec::new();
    for (id, r) in ids.iter().zip(client.fetch_all(&ids, cfg.curate.workers)) {
        match r {
            Ok((record, map)) => fetched.push((entry_from(&record), map)),
            Err(e @ (EmdbError::NotFound(_) | EmdbError::Metadata { .. } | EmdbError::BadAccession(_))) => {
                log::warn!("excluded {id}: {e}");
                exclusions.push(Exclusion {
                    id: id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }

    let filters = CurationFilters {
        weight_band: Some((cfg.curate.weight_min, cfg.curate.weight_max)),
        methods: Some(cfg.curate.methods.clone()),
    };
    let (kept, excluded) = ingest::curate(&DatasetManifest::new(fetched.iter().map(|f| f.0.clone()).collect()), &filters);
    exclusions.extend(excluded);
    let work: Vec<(&ManifestEntry, &[u8])> = kept
        .entries
        .iter()
        .map(|e| {
            let map = &fetched.iter().find(|f| f.0.id == e.id).expect("kept entries were fetched").1;
            (e, map.as_slice())
        })
        .collect();

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<(ManifestEntry, DensityVolume)>>>>> = work.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..cfg.curate.workers.clamp(1, work.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= work.len() {
                    break;
                }
                let r = prepare(work[i].0, work[i].1, &cfg).and_then(|copies| {
                    for (e, v) in &copies {
                        write_map(&dir.join(&e.path), v)?;
                    }
                    Ok(copies)
                });
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let mut entries = Vec::new();
    for slot in slots {
        for (e, _) in slot.into_inner().expect("slot lock").expect("every slot filled")? {
            entries.push(e);
        }
    }
    let manifest = split_dataset(&DatasetManifest::new(entries), cfg.curate.ratios, cfg.curate.seed)?;
    manifest.save(&dir.join("manifest.jsonl")).map_err(|e| CliError::io(&dir, e))?;
    let mut w = create(&dir.join("exclusions.jsonl"))?;
    metrics::write_jsonl(&mut w, &exclusions)?;
    w.flush()?;
    log::info!("{} volumes from {} entries, {} excluded", manifest.entries.len(), kept.entries.len(), exclusions.len());
    Ok(CurateOutcome {
        run_dir: dir,
        manifest,
        exclusions,
    })
}

/// Normalized volumes of one split, or the procedural set when no manifest is configured.
pub fn load_volumes(cfg: &RunConfig, split: Split) -> Result<Vec<(String, DensityVolume)>> {
    let side = cfg.model.input_side;
    let vols = match &cfg.data.manifest {
        None => shape_set(cfg.data.synthetic, side, cfg.data.synthetic_seed),
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            m.split(split)
                .map(|e| Ok((e.id.clone(), read_map(&root.join(&e.path))?)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    vols.into_iter()
        .map(|(id, v)| {
            if v.dims() != [side; 3] {
                return Err(CliError::Parse(format!("{id}: shape {:?} does not match the {side}^3 model input", v.dims())));
            }
            Ok((id, normalize(&v)))
        })
        .collect()
}

fn samples(cfg: &RunConfig, vols: &[(String, DensityVolume)]) -> Result<Vec<Sample>> {
    vols.iter()
        .map(|(id, v)| {
            Ok(Sample {
                id: id.clone(),
                input: positional_encode(v, cfg.model.pe_levels)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelUtilization {
    pub level: usize,
    pub codebook_size: usize,
    pub tokens: u64,
    pub used: usize,
    pub perplexity: f64,
    pub dead_fraction: f64,
}

/// Codebook usage of every level over `samples`.
pub fn codebook_report(model: &SwanModel<f32>, samples: &[Sample]) -> Result<Vec<LevelUtilization>> {
    let k = model.config().codebook_size;
    let mut per_level: Vec<Vec<usize>> = vec![Vec::new(); model.config().levels()];
    for s in samples {
        let out = model.forward(&s.input, 1.0)?;
        for (lvl, grids) in out.tokens.iter().enumerate() {
            per_level[lvl].extend(grids.iter().flatten());
        }
    }
    per_level
        .iter()
        .enumerate()
        .map(|(lvl, toks)| {
            let u = utilization(toks, k).map_err(|e| CliError::Other(e.to_string()))?;
            Ok(LevelUtilization {
                level: lvl + 1,
                codebook_size: k,
                tokens: u.histogram.iter().sum(),
                used: u.histogram.iter().filter(|&&c| c > 0).count(),
                perplexity: u.perplexity,
                dead_fraction: u.dead_fraction,
            })
        })
        .collect()
}

fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = create(path)?;
    let levels = history.first().map_or(0, |r| r.train_levels.len());
    write!(w, "epoch,train_total,train_recon")?;
    for k in 0..levels {
        write!(w, ",train_level{}", k + 1)?;
    }
    writeln!(w, ",val_total,val_recon")?;
    for r in history {
        write!(w, "{},{},{}", r.epoch, r.train_total, r.train_recon)?;
        for l in &r.train_levels {
            write!(w, ",{l}")?;
        }
        writeln!(w, ",{},{}", r.val_total, r.val_recon)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub model: SwanModel<f32>,
    pub history: Vec<EpochRecord>,
    /// Metrics of the final model on each training volume.
    pub train_reports: Vec<MetricsReport>,
    pub utilization: Vec<LevelUtilization>,
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.run.config, a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(preset)) => RunConfig::with_preset(preset),
        (None, None) => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.threads {
        t.threads = v;
    }
    if let Some(v) = &a.manifest {
        cfg.data.manifest = Some(v.clone());
    }
    if let Some(v) = a.synthetic {
        cfg.data.manifest = None;
        cfg.data.synthetic = v;
    }
    if let Some(v) = a.synthetic_seed {
        cfg.data.synthetic_seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.output.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = resolve_train_config(a)?;
    let train_vols = load_volumes(&cfg, Split::Train)?;
    let train = samples(&cfg, &train_vols)?;
    let val = match cfg.data.manifest {
        None => train.clone(),
        Some(_) => samples(&cfg, &load_volumes(&cfg, Split::Val)?)?,
    };
    let data = Dataset { train, val };
    let (model, resume) = match &a.resume {
        Some(p) => {
            let ck = open_checkpoint(p, Some(&cfg.model))?;
            for w in &ck.warnings {
                log::warn!("{}: {w}", p.display());
            }
            let state = ck
                .state
                .ok_or_else(|| CliError::Parse(format!("{}: checkpoint has no training state", p.display())))?;
            (ck.model, Some(state))
        }
        None => (SwanModel::new(cfg.model.clone())?, None),
    };
    let dir = open_run(&a.run, &cfg)?;
    let policy = CheckpointPolicy {
        dir: Some(dir.join("checkpoints")),
        every: cfg.output.checkpoint_every,
    };
    let out = fit(model, &data, &cfg.train, resume, &policy, |r| {
        log::info!(
            "epoch {} train {:.5} (recon {:.5}) val {:.5}",
            r.epoch,
            r.train_total,
            r.train_recon,
            r.val_total
        );
    })?;
    save_checkpoint(&dir.join("model.ckpt"), &out.model, None)?;
    write_loss_csv(&dir.join("loss.csv"), &out.state.history)?;

    let mut train_reports = Vec::new();
    for ((id, gt), s) in train_vols.iter().zip(&data.train) {
        let pred = out.model.forward(&s.input, gt.spacing())?.reconstruction;
        train_reports.push(metrics::evaluate(id, &pred, gt, cfg.eval.threshold)?.0);
    }
    let mut w = create(&dir.join("train_metrics.jsonl"))?;
    metrics::write_jsonl(&mut w, &train_reports)?;
    metrics::write_jsonl(&mut w, &metrics::aggregate(&train_reports).into_iter().collect::<Vec<_>>())?;
    w.flush()?;
    let utilization = codebook_report(&out.model, &data.train)?;
    write(
        &dir.join("utilization.json"),
        &serde_json::to_vec_pretty(&utilization).expect("serializable"),
    )?;
    Ok(TrainOutcome {
        run_dir: dir,
        model: out.model,
        history: out.state.history,
        train_reports,
        utilization,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
}

pub fn eval(a: &EvalArgs) -> Result<EvalOutcome> {
    let mut cfg = load_config(&a.run)?;
    if let Some(v) = &a.manifest {
        cfg.data.manifest = Some(v.clone());
    }
    if let Some(v) = a.synthetic {
        cfg.data.manifest = None;
        cfg.data.synthetic = v;
    }
    if let Some(v) = a.synthetic_seed {
        cfg.data.synthetic_seed = v;
    }
    if let Some(v) = a.split {
        cfg.eval.split = v.into();
    }
    if a.threshold.is_some() {
        cfg.eval.threshold = a.threshold;
    }

    let pairs: Vec<(String, DensityVolume, DensityVolume)> = match (&a.pred, &a.gt, &a.checkpoint) {
        (Some(p), Some(g), _) => {
            let id = p.file_stem().map_or("pred".into(), |s| s.to_string_lossy().into_owned());
            vec![(id, read_map(p)?, read_map(g)?)]
        }
        (_, _, Some(ck)) => {
            let model = open_checkpoint(ck, None)?.model;
            cfg.model = model.config().clone();
            let vols = load_volumes(&cfg, cfg.eval.split)?;
            let mut out = Vec::with_capacity(vols.len());
            for (id, gt) in vols {
                let pred = latent::denoise(&model, &gt)?;
                out.push((id, pred, gt));
            }
            out
        }
        _ => return Err(CliError::Parse("eval needs --checkpoint or --pred with --gt".into())),
    };
    if pairs.is_empty() {
        return Err(CliError::Other(format!("the {} split is empty", cfg.eval.split)));
    }
    let dir = open_run(&a.run, &cfg)?;
    let fsc_dir = dir.join("fsc");
    std::fs::create_dir_all(&fsc_dir).map_err(|e| CliError::io(&fsc_dir, e))?;
    let mut reports = Vec::with_capacity(pairs.len());
    for (id, pred, gt) in &pairs {
        let (report, curve) = metrics::evaluate(id, pred, gt, cfg.eval.threshold)?;
        let mut w = create(&fsc_dir.join(format!("{id}.csv")))?;
        curve.write_csv(&mut w)?;
        w.flush()?;
        reports.push(report);
    }
    let aggregate = metrics::aggregate(&reports).expect("non-empty");
    let mut w = create(&dir.join("metrics.jsonl"))?;
    metrics::write_jsonl(&mut w, &reports)?;
    metrics::write_jsonl(&mut w, std::slice::from_ref(&aggregate))?;
    w.flush()?;
    Ok(EvalOutcome {
        run_dir: dir,
        reports,
        aggregate,
    })
}

fn checked_input(model: &SwanModel<f32>, vol: DensityVolume, path: &Path) -> Result<DensityVolume> {
    let side = model.config().input_side;
    if vol.dims() != [side; 3] {
        return Err(CliError::Other(format!(
            "{}: shape {:?} does not match the {side}^3 model input",
            path.display(),
            vol.dims()
        )));
    }
    Ok(normalize(&vol))
}

pub fn denoise(a: &DenoiseArgs) -> Result<()> {
    let model = open_checkpoint(&a.checkpoint, None)?.model;
    let noisy = checked_input(&model, read_map(&a.input)?, &a.input)?;
    write_map(&a.output, &latent::denoise(&model, &noisy)?)?;
    if let Some(b) = &a.baseline {
        write_map(b, &latent::baseline_bandpass(&noisy)?)?;
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn neighbors(a: &NeighborsArgs) -> Result<Vec<(String, Vec<Neighbor>)>> {
    let model = match &a.checkpoint {
        Some(p) => Some(open_checkpoint(p, None)?.model),
        None => None,
    };
    let need_model = || model.as_ref().ok_or_else(|| CliError::Parse("--checkpoint is required to embed maps".into()));
    let embed = |path: &Path, id: String| -> Result<LatentEmbedding> {
        let m = need_model()?;
        let vol = checked_input(m, read_map(path)?, path)?;
        Ok(latent::embed(m, &id, &vol)?)
    };

    let db = if a.build.is_empty() {
        latent::load_db(&a.db)?
    } else {
        let entries = a.build.iter().map(|p| embed(p, stem(p))).collect::<Result<Vec<_>>>()?;
        if let Some(dir) = a.db.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        latent::save_db(&a.db, &entries)?;
        entries
    };
    let metric = a.metric.into();
    let queries: Vec<LatentEmbedding> = match (&a.query, &a.query_id) {
        (Some(p), id) => vec![embed(p, id.clone().unwrap_or_else(|| stem(p)))?],
        (None, Some(id)) => vec![db
            .iter()
            .find(|e| &e.id == id)
            .cloned()
            .ok_or_else(|| CliError::Other(format!("id {id} is not in the database")))?],
        (None, None) => db.clone(),
    };
    let rows = queries
        .iter()
        .map(|q| Ok((q.id.clone(), latent::knn(q, &db, a.k, metric)?)))
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            latent::write_neighbors_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => latent::write_neighbors_csv(&mut std::io::stdout().lock(), &rows)?,
    }
    Ok(rows)
}

/// Like `load_checkpoint`, with the path in I/O errors.
fn open_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    load_checkpoint(path, expected).map_err(|e| match e {
        NetworkError::Io(e) => CliError::io(path, e),
        e => e.into(),
    })
}
