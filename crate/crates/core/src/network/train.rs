use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::{NetworkError, SwanModel, TrainConfig};
use crate::tensor::{Adam, Graph, Tensor};
use crate::volume::EncodedVolume;

/// One named, encoded training volume.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub input: EncodedVolume,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Mean per-term losses over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub levels: Vec<f64>,
    /// Token grids per item, per level, per scale.
    #[serde(skip)]
    pub tokens: Vec<Vec<Vec<Vec<usize>>>>,
}

impl LossReport {
    fn mean(items: &[ItemResult]) -> Self {
        let n = items.len() as f64;
        let levels = items[0].levels.len();
        Self {
            total: items.iter().map(|r| r.total).sum::<f64>() / n,
            recon: items.iter().map(|r| r.recon).sum::<f64>() / n,
            levels: (0..levels).map(|k| items.iter().map(|r| r.levels[k]).sum::<f64>() / n).collect(),
            tokens: items.iter().map(|r| r.tokens.clone()).collect(),
        }
    }
}

struct ItemResult {
    total: f64,
    recon: f64,
    levels: Vec<f64>,
    tokens: Vec<Vec<Vec<usize>>>,
    grads: Option<Vec<Tensor<f32>>>,
}

fn check_finite(r: &ItemResult, id: &str) -> Result<(), NetworkError> {
    if !r.recon.is_finite() {
        return Err(NetworkError::NonFinite {
            term: "reconstruction".into(),
            item: id.into(),
        });
    }
    for (k, l) in r.levels.iter().enumerate() {
        if !l.is_finite() {
            return Err(NetworkError::NonFinite {
                term: format!("level {}", k + 1),
                item: id.into(),
            });
        }
    }
    Ok(())
}

fn run_item(model: &SwanModel<f32>, x: &EncodedVolume, with_grads: bool) -> Result<ItemResult, NetworkError> {
    let mut g = Graph::new();
    let ids = model.register(&mut g, with_grads);
    let xn = g.input(model.input_tensor(x)?);
    let tn = g.input(model.target_tensor(x));
    let f = model.forward_graph(&mut g, &ids, xn, tn)?;
    let scalar = |g: &Graph<f32>, id| g.value(id).item() as f64;
    let mut r = ItemResult {
        total: scalar(&g, f.total),
        recon: scalar(&g, f.recon_loss),
        levels: f.level_losses.iter().map(|&l| scalar(&g, l)).collect(),
        tokens: f.tokens,
        grads: None,
    };
    if with_grads && r.total.is_finite() {
        g.backward(f.total);
        let grads = ids
            .iter()
            .zip(model.params())
            .map(|(&id, p)| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        r.grads = Some(grads);
    }
    Ok(r)
}

/// Evaluates items on up to `threads` workers; output order follows input order.
fn run_items(model: &SwanModel<f32>, items: &[&Sample], with_grads: bool, threads: usize) -> Result<Vec<ItemResult>, NetworkError> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(|s| run_item(model, &s.input, with_grads)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| run_item(model, &s.input, with_grads)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// One optimizer step on the mean global loss over `batch`.
///
/// Per-item gradients are summed in batch order so the result is independent of `threads`.
pub fn train_step(model: &mut SwanModel<f32>, adam: &mut Adam<f32>, batch: &[&Sample], threads: usize) -> Result<LossReport, NetworkError> {
    if batch.is_empty() {
        return Err(NetworkError::EmptySplit("batch"));
    }
    let results = run_items(model, batch, true, threads)?;
    for (r, s) in results.iter().zip(batch) {
        check_finite(r, &s.id)?;
    }
    let inv = 1.0 / batch.len() as f32;
    let mut sum: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for r in &results {
        for (acc, g) in sum.iter_mut().zip(r.grads.as_ref().expect("gradients requested")) {
            acc.add_assign(g);
        }
    }
    for (g, name) in sum.iter_mut().zip(model.names()) {
        g.scale(inv);
        if !g.all_finite() {
            return Err(NetworkError::NonFinite {
                term: format!("gradient of {name}"),
                item: "batch".into(),
            });
        }
    }
    adam.update(model.params_mut(), &sum);
    Ok(LossReport::mean(&results))
}

/// Mean losses over `samples` without updating the model.
pub fn evaluate(model: &SwanModel<f32>, samples: &[Sample], threads: usize) -> Result<LossReport, NetworkError> {
    if samples.is_empty() {
        return Err(NetworkError::EmptySplit("evaluation"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let results = run_items(model, &refs, false, threads)?;
    Ok(LossReport::mean(&results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_levels: Vec<f64>,
    pub val_total: f64,
    pub val_recon: f64,
}

/// Optimizer state and history needed to resume a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam: Adam<f32>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: TrainConfig, model: &SwanModel<f32>) -> Self {
        Self {
            adam: Adam::new(config.adam(), model.params()),
            config,
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Where `fit` writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    /// Also keep `epoch_NNNN.ckpt` every this many epochs (0 disables).
    pub every: usize,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: SwanModel<f32>,
    pub best: SwanModel<f32>,
    pub state: TrainState,
}

/// Epoch loop with per-epoch validation, resumable from a saved `TrainState`.
///
/// The train split is reshuffled each epoch with `seed + epoch`. `on_epoch` sees every
/// record as it is produced.
pub fn fit(
    mut model: SwanModel<f32>,
    data: &Dataset,
    config: &TrainConfig,
    resume: Option<TrainState>,
    checkpoints: &CheckpointPolicy,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome, NetworkError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(NetworkError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(NetworkError::EmptySplit("val"));
    }
    for s in data.train.iter().chain(&data.val) {
        model.input_tensor(&s.input)?;
    }
    let mut state = match resume {
        Some(mut s) => {
            if s.adam.m.len() != model.params().len() {
                return Err(NetworkError::Config("optimizer state does not match the model".into()));
            }
            s.config = config.clone();
            s.adam.config = config.adam();
            s
        }
        None => TrainState::new(config.clone(), &model),
    };
    let mut best = model.clone();
    if let Some(dir) = &checkpoints.dir {
        std::fs::create_dir_all(dir)?;
    }
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut reports = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let r = train_step(&mut model, &mut state.adam, &batch, config.threads)?;
            reports.push((r, batch.len()));
        }
        let n: usize = reports.iter().map(|r| r.1).sum();
        let wmean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(|(r, b)| f(r) * *b as f64).sum::<f64>() / n as f64;
        let levels = reports[0].0.levels.len();
        let val = evaluate(&model, &data.val, config.threads)?;
        let record = EpochRecord {
            epoch,
            train_total: wmean(&|r| r.total),
            train_recon: wmean(&|r| r.recon),
            train_levels: (0..levels).map(|k| wmean(&|r| r.levels[k])).collect(),
            val_total: val.total,
            val_recon: val.recon,
        };
        state.epoch = epoch;
        state.history.push(record.clone());
        let improved = record.val_total < state.best_val;
        if improved {
            state.best_val = record.val_total;
            state.best_epoch = epoch;
            best = model.clone();
        }
        if let Some(dir) = &checkpoints.dir {
            save_checkpoint(&dir.join("last.ckpt"), &model, Some(&state))?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &model, None)?;
            }
            if checkpoints.every > 0 && epoch % checkpoints.every == 0 {
                save_checkpoint(&dir.join(format!("epoch_{epoch:04}.ckpt")), &model, Some(&state))?;
            }
        }
        on_epoch(&record);
    }
    Ok(FitOutcome { model, best, state })
}
