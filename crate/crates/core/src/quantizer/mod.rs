//! Multi-scale residual vector quantization against per-level codebooks.

mod tokens;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{AxisResampler, Graph, NodeId, Real, ResampleKind, Tensor};

pub use tokens::{read_tokens, write_tokens, TokenFile, TokenFileError, TokenGrid};

/// Default commitment weight.
pub const DEFAULT_BETA: f64 = 0.25;
/// Default number of entries per codebook.
pub const DEFAULT_CODEBOOK_SIZE: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizerError {
    #[error("scale schedule must be non-empty and strictly increasing, got {0:?}")]
    BadSchedule(Vec<usize>),
    #[error("schedule ends at {last} but the latent side is {side}")]
    ScheduleMismatch { last: usize, side: usize },
    #[error("latent must be a cube [C, s, s, s], got {0:?}")]
    BadLatent(Vec<usize>),
    #[error("latent has {latent} channels, codebook has {codebook}")]
    ChannelMismatch { latent: usize, codebook: usize },
    #[error("expected {expected} scale convolutions, got {got}")]
    PhiCount { expected: usize, got: usize },
    #[error("token set is empty")]
    EmptyTokens,
    #[error("token {token} out of range for {size} codes")]
    TokenRange { token: usize, size: usize },
}

/// Side lengths of the token grid at each perception step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule(Vec<usize>);

impl ScaleSchedule {
    pub fn new(scales: Vec<usize>) -> Result<Self, QuantizerError> {
        if scales.is_empty() || scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QuantizerError::BadSchedule(scales));
        }
        Ok(Self(scales))
    }

    pub fn scales(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Full latent side, the last scale.
    pub fn side(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn token_count(&self) -> usize {
        self.0.iter().map(|m| m * m * m).sum()
    }
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = QuantizerError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.0
    }
}

/// `K x C` embedding table owned by one quantizer level.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub entries: Tensor<T>,
    pub level: usize,
}

impl<T: Real> Codebook<T> {
    pub fn new(entries: Tensor<T>, level: usize) -> Self {
        assert_eq!(entries.shape().len(), 2, "codebook must be [K, C]");
        Self { entries, level }
    }

    /// Entries drawn i.i.d. from N(0, 1/C).
    pub fn random(size: usize, channels: usize, level: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("valid std");
        let data = (0..size * channels).map(|_| T::lit(normal.sample(&mut rng))).collect();
        Self::new(Tensor::from_vec(&[size, channels], data), level)
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[T] {
        let c = self.dim();
        &self.entries.data()[k * c..(k + 1) * c]
    }
}

fn exact_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum()
}

/// Index of the entry closest to `vector` in squared Euclidean distance; ties go to the lowest index.
pub fn nearest_code<T: Real>(codebook: &Codebook<T>, vector: &[T]) -> (usize, f64) {
    assert_eq!(vector.len(), codebook.dim(), "vector/codebook dimension mismatch");
    let mut best = (0, f64::INFINITY);
    for k in 0..codebook.size() {
        let d = exact_distance(codebook.row(k), vector);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Nearest code for every column of a `[C, P]` matrix.
///
/// Candidates are screened with one matrix product, then the survivors are
/// compared with exact distances, so the result equals a full linear scan.
pub fn nearest_codes<T: Real>(codebook: &Codebook<T>, columns: &[T], count: usize) -> Vec<usize> {
    let (k, c) = (codebook.size(), codebook.dim());
    assert_eq!(columns.len(), c * count, "column matrix shape mismatch");
    if count == 0 {
        return Vec::new();
    }
    let e = codebook.entries.data();
    let sq: Vec<f64> = (0..k)
        .map(|j| codebook.row(j).iter().map(|v| v.to_f64().unwrap().powi(2)).sum())
        .collect();
    let max_sq = sq.iter().copied().fold(0.0, f64::max);
    let mut dots = vec![T::zero(); k * count];
    T::gemm(k, c, count, T::one(), e, c as isize, 1, columns, count as isize, 1, T::zero(), &mut dots, count as isize, 1);
    let eps = T::epsilon().to_f64().unwrap();
    let mut out = Vec::with_capacity(count);
    let mut column = vec![T::zero(); c];
    for p in 0..count {
        for (ch, v) in column.iter_mut().enumerate() {
            *v = columns[ch * count + p];
        }
        let vsq: f64 = column.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
        let approx = |j: usize| sq[j] - 2.0 * dots[j * count + p].to_f64().unwrap();
        let mut lowest = f64::INFINITY;
        for j in 0..k {
            lowest = lowest.min(approx(j));
        }
        // bound on the rounding error of the screened distances
        let tol = 4.0 * (c as f64 + 2.0) * eps * (vsq + max_sq) + 1e-300;
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..k {
            if approx(j) <= lowest + 2.0 * tol {
                let d = exact_distance(codebook.row(j), &column);
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        out.push(best.0);
    }
    out
}

/// Per-scale 3x3x3 convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleConv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ScaleConv<T> {
    /// A convolution whose output equals its input.
    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, channels, 3, 3, 3]);
        for c in 0..channels {
            weight.data_mut()[(c * channels + c) * 27 + 13] = T::one();
        }
        Self {
            weight,
            bias: Tensor::zeros(&[channels]),
        }
    }
}

/// Node handles for one level's learnable quantizer state inside a graph.
#[derive(Clone, Debug)]
pub struct LevelNodes {
    pub codebook: NodeId,
    pub phi: Vec<(NodeId, NodeId)>,
}

/// Graph outputs of one quantizer invocation.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    /// `f_quant`, the accumulated quantized latent.
    pub quantized: NodeId,
    /// Straight-through view of `quantized` for the decoder.
    pub decoder_input: NodeId,
    pub loss: NodeId,
    /// Token grid per scale, positions in (z, y, x) order.
    pub tokens: Vec<Vec<usize>>,
    /// Norm of the residual before the first scale and after each scale.
    pub residual_norms: Vec<f64>,
}

fn cube_side(shape: &[usize]) -> Result<usize, QuantizerError> {
    if shape.len() != 4 || shape[1] != shape[2] || shape[2] != shape[3] || shape[1] == 0 {
        return Err(QuantizerError::BadLatent(shape.to_vec()));
    }
    Ok(shape[1])
}

fn axes(from: usize, to: usize, kind: ResampleKind) -> [AxisResampler; 3] {
    let a = AxisResampler::new(from, to, kind);
    [a.clone(), a.clone(), a]
}

/// Multi-scale residual quantization of `latent` (`[C, s, s, s]`) on the tape.
///
/// For each scale m the residual is area-pooled to m^3, every column is replaced by its
/// nearest code, the looked-up grid passes through the scale's convolution, is linearly
/// upsampled to s^3, added to `f_quant` and subtracted from the residual. The loss is
/// `mean_m [beta * mse(sg[f_quant], latent) + mse(z_m, sg[f_m])]`.
pub fn quantize_level_graph<T: Real>(
    g: &mut Graph<T>,
    latent: NodeId,
    schedule: &ScaleSchedule,
    nodes: &LevelNodes,
    beta: f64,
) -> Result<LevelOutput, QuantizerError> {
    let shape = g.value(latent).shape().to_vec();
    let side = cube_side(&shape)?;
    let channels = shape[0];
    let cb_shape = g.value(nodes.codebook).shape().to_vec();
    if cb_shape[1] != channels {
        return Err(QuantizerError::ChannelMismatch {
            latent: channels,
            codebook: cb_shape[1],
        });
    }
    if schedule.side() != side {
        return Err(QuantizerError::ScheduleMismatch {
            last: schedule.side(),
            side,
        });
    }
    if nodes.phi.len() != schedule.len() {
        return Err(QuantizerError::PhiCount {
            expected: schedule.len(),
            got: nodes.phi.len(),
        });
    }
    let codebook = Codebook::new(g.value(nodes.codebook).clone(), 0);
    let mut residual = g.value(latent).clone();
    let mut residual_norms = vec![residual.norm().to_f64().unwrap()];
    let mut f_quant: Option<NodeId> = None;
    let mut loss: Option<NodeId> = None;
    let mut all_tokens = Vec::with_capacity(schedule.len());
    for (m_idx, &m) in schedule.scales().iter().enumerate() {
        let pooled = if m == side {
            residual.clone()
        } else {
            let (d, _) = crate::tensor::resample_3d(residual.data(), channels, [side; 3], &axes(side, m, ResampleKind::Area));
            Tensor::from_vec(&[channels, m, m, m], d)
        };
        let f_m = g.constant(pooled);
        let count = m * m * m;
        let f_m_value = g.value(f_m).data().to_vec();
        let tokens = g.tokens(|| nearest_codes(&codebook, &f_m_value, count));
        let z = g.lookup(nodes.codebook, tokens.clone(), [m, m, m]);
        let (w, b) = nodes.phi[m_idx];
        let z_hat = g.conv3d(z, w, Some(b), 1, 1);
        let up = if m == side { z_hat } else { g.resample(z_hat, axes(m, side, ResampleKind::Linear)) };
        residual.sub_assign(g.value(up));
        residual_norms.push(residual.norm().to_f64().unwrap());
        let acc = match f_quant {
            None => up,
            Some(prev) => g.add(prev, up),
        };
        f_quant = Some(acc);
        let commit_target = g.detach(acc);
        let commit = g.mse(commit_target, latent);
        let commit = g.scale(commit, T::lit(beta));
        let code = g.mse(z_hat, f_m);
        let term = g.add(commit, code);
        loss = Some(match loss {
            None => term,
            Some(l) => g.add(l, term),
        });
        all_tokens.push(tokens);
    }
    let quantized = f_quant.expect("non-empty schedule");
    let loss = g.scale(loss.expect("non-empty schedule"), T::lit(1.0 / schedule.len() as f64));
    let decoder_input = g.straight_through(latent, quantized);
    Ok(LevelOutput {
        quantized,
        decoder_input,
        loss,
        tokens: all_tokens,
        residual_norms,
    })
}

/// Values produced by one quantizer invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult<T> {
    pub quantized: Tensor<T>,
    pub tokens: Vec<Vec<usize>>,
    pub level_loss: f64,
    pub residual_norms: Vec<f64>,
}

/// Standalone quantization of a latent grid, outside any training graph.
pub fn quantize_level<T: Real>(
    latent: &Tensor<T>,
    schedule: &ScaleSchedule,
    codebook: &Codebook<T>,
    phi: &[ScaleConv<T>],
    beta: f64,
) -> Result<QuantizationResult<T>, QuantizerError> {
    let mut g = Graph::new();
    let x = g.input(latent.clone());
    let nodes = LevelNodes {
        codebook: g.input(codebook.entries.clone()),
        phi: phi.iter().map(|p| (g.input(p.weight.clone()), g.input(p.bias.clone()))).collect(),
    };
    let out = quantize_level_graph(&mut g, x, schedule, &nodes, beta)?;
    Ok(QuantizationResult {
        quantized: g.value(out.quantized).clone(),
        tokens: out.tokens,
        level_loss: g.value(out.loss).item().to_f64().unwrap(),
        residual_norms: out.residual_norms,
    })
}

/// Reconstruction loss plus the sum of level losses.
pub fn global_loss(level_losses: &[f64], recon_loss: f64) -> f64 {
    recon_loss + level_losses.iter().sum::<f64>()
}

/// Codebook usage statistics over a pass through a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub histogram: Vec<u64>,
    /// `exp` of the entropy (nats) of the empirical code distribution.
    pub perplexity: f64,
    /// Share of entries never selected.
    pub dead_fraction: f64,
}

pub fn utilization<'a>(tokens: impl IntoIterator<Item = &'a usize>, codebook_size: usize) -> Result<Utilization, QuantizerError> {
    let mut histogram = vec![0u64; codebook_size];
    let mut total = 0u64;
    for &t in tokens {
        if t >= codebook_size {
            return Err(QuantizerError::TokenRange {
                token: t,
                size: codebook_size,
            });
        }
        histogram[t] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(QuantizerError::EmptyTokens);
    }
    let entropy: f64 = histogram
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    let dead = histogram.iter().filter(|&&n| n == 0).count();
    Ok(Utilization {
        histogram,
        perplexity: entropy.exp(),
        dead_fraction: dead as f64 / codebook_size as f64,
    })
}

#[cfg(test)]
mod tests;
