//! Density volumes and the grid operations applied to them before and after the
//! network: standardization, centered crop/pad, rotation, noise injection,
//! per-voxel sine/cosine encoding, Fourier-domain filtering and resampling.

pub mod fft;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("volume dimensions must be at least 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("data length {len} does not match dimensions {dims:?}")]
    LengthMismatch { len: usize, dims: [usize; 3] },
    #[error("voxel spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("volume contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("rotation matrix is not a proper orthonormal matrix ({0})")]
    NotRotation(String),
    #[error("volume has zero variance; signal-to-noise ratio is undefined")]
    ConstantVolume,
    #[error("invalid pass band: need 0 <= high_cut < low_cut <= 1, got high {high} low {low}")]
    InvalidBand { low: f64, high: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// A 3D scalar grid stored in `(z, y, x)` order as `D x H x W`, with isotropic spacing in Å.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityVolume {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: f64,
    pub origin_id: Option<String>,
}

impl DensityVolume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::LengthMismatch { len: data.len(), dims });
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            dims,
            data,
            spacing,
            origin_id: None,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()], spacing)
    }

    /// Cubic volume filled from a function of `(z, y, x)`.
    pub fn from_fn(side: usize, spacing: f64, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(side * side * side);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new([side; 3], data, spacing)
    }

    pub fn with_origin(mut self, id: impl Into<String>) -> Self {
        self.origin_id = Some(id.into());
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same geometry, new values. Values must be finite.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        let mut v = Self::new(self.dims, data, self.spacing)?;
        v.origin_id = self.origin_id.clone();
        Ok(v)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Physical edge lengths in Å.
    pub fn extent(&self) -> [f64; 3] {
        self.dims.map(|n| n as f64 * self.spacing)
    }
}

/// Per-voxel sine/cosine encoding: channel 0 is the raw density, then `2L` bands.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVolume {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl EncodedVolume {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n: usize = self.dims.iter().product();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Zero-mean, unit-variance standardization. Near-constant input maps to zeros.
pub fn normalize(vol: &DensityVolume) -> DensityVolume {
    let mean = vol.mean();
    let std = vol.variance().sqrt();
    let data = if std < 1e-8 {
        vec![0.0; vol.len()]
    } else {
        vol.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    DensityVolume { data, ..vol.clone() }
}

/// Centered crop or zero-pad to a `target^3` cube.
pub fn pad_or_crop(vol: &DensityVolume, target: usize) -> Result<DensityVolume> {
    if target == 0 {
        return Err(VolumeError::InvalidArgument("target side must be >= 1".into()));
    }
    let [d, h, w] = vol.dims;
    // per axis: (source start, dest start, count)
    let plan = |n: usize| {
        if n >= target {
            ((n - target) / 2, 0, target)
        } else {
            (0, (target - n) / 2, n)
        }
    };
    let (pz, py, px) = (plan(d), plan(h), plan(w));
    let mut out = vec![0.0f32; target * target * target];
    for z in 0..pz.2 {
        for y in 0..py.2 {
            let src = vol.index(pz.0 + z, py.0 + y, px.0);
            let dst = ((pz.1 + z) * target + py.1 + y) * target + px.1;
            out[dst..dst + px.2].copy_from_slice(&vol.data[src..src + px.2]);
        }
    }
    Ok(DensityVolume {
        dims: [target; 3],
        data: out,
        spacing: vol.spacing,
        origin_id: vol.origin_id.clone(),
    })
}

pub type Rotation = [[f64; 3]; 3];

fn check_rotation(r: &Rotation) -> Result<()> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(VolumeError::NotRotation("non-finite entry".into()));
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > 1e-6 {
                return Err(VolumeError::NotRotation(format!("(RᵀR)[{i}][{j}] = {dot}")));
            }
        }
    }
    let det = determinant(r);
    if (det - 1.0).abs() > 1e-6 {
        return Err(VolumeError::NotRotation(format!("determinant {det}")));
    }
    Ok(())
}

pub fn determinant(r: &Rotation) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Trilinear sample at fractional `(z, y, x)`; corners outside the grid read as zero.
pub fn sample_trilinear_zero(vol: &DensityVolume, z: f64, y: f64, x: f64) -> f64 {
    let [d, h, w] = vol.dims;
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let mut acc = 0.0;
    for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
        let iz = z0 as i64 + dz;
        if wz == 0.0 || iz < 0 || iz >= d as i64 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            let iy = y0 as i64 + dy;
            if wy == 0.0 || iy < 0 || iy >= h as i64 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let ix = x0 as i64 + dx;
                if wx == 0.0 || ix < 0 || ix >= w as i64 {
                    continue;
                }
                acc += wz * wy * wx * vol.get(iz as usize, iy as usize, ix as usize) as f64;
            }
        }
    }
    acc
}

/// Rotates the content by `rotation` (acting on `(x, y, z)` vectors) about the grid center.
pub fn rotate(vol: &DensityVolume, rotation: &Rotation) -> Result<DensityVolume> {
    check_rotation(rotation)?;
    let [d, h, w] = vol.dims;
    let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
    let r = rotation;
    let mut out = Vec::with_capacity(vol.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                // inverse map: source = c + Rᵀ p
                let s: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| r[k][i] * p[k]).sum::<f64>() + c[i]);
                out.push(sample_trilinear_zero(vol, s[2], s[1], s[0]) as f32);
            }
        }
    }
    vol.with_data(out)
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|v| v / n);
        }
    };
    let [a, b, c, d] = q;
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
}

/// Adds i.i.d. Gaussian noise with variance `var(vol) / snr`.
pub fn add_gaussian_noise(vol: &DensityVolume, snr: f64, seed: u64) -> Result<DensityVolume> {
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(VolumeError::InvalidArgument(format!("snr must be positive, got {snr}")));
    }
    let var = vol.variance();
    if var <= 0.0 {
        return Err(VolumeError::ConstantVolume);
    }
    let sigma = (var / snr).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| VolumeError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    vol.with_data(data)
}

/// Encodes every voxel's density `v` as `(v, sin(2^0 πv), cos(2^0 πv), ..., sin(2^{L-1} πv), cos(2^{L-1} πv))`.
pub fn positional_encode(vol: &DensityVolume, levels: usize) -> Result<EncodedVolume> {
    if levels == 0 {
        return Err(VolumeError::InvalidArgument("encoding levels must be >= 1".into()));
    }
    let n = vol.len();
    let channels = 1 + 2 * levels;
    let mut data = vec![0.0f32; channels * n];
    data[..n].copy_from_slice(&vol.data);
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        let (s, rest) = data[(1 + 2 * k) * n..].split_at_mut(n);
        let c = &mut rest[..n];
        for ((sv, cv), &v) in s.iter_mut().zip(c.iter_mut()).zip(&vol.data) {
            let (sn, cs) = (freq * v as f64).sin_cos();
            *sv = sn as f32;
            *cv = cs as f32;
        }
    }
    Ok(EncodedVolume {
        channels,
        dims: vol.dims,
        data,
    })
}

fn raised_cosine_down(r: f64, a: f64, b: f64) -> f64 {
    if r <= a {
        1.0
    } else if r >= b {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (r - a) / (b - a)).cos())
    }
}

/// Radial Fourier mask value at normalized radius `rho` (1.0 = Nyquist along each axis).
///
/// Low-pass edge: full pass up to `low_cut`, raised cosine to zero over `width`.
/// High-pass edge: zero up to `high_cut`, raised cosine to one over `width`.
/// `low_cut >= 1` disables the low-pass edge and `high_cut == 0` the high-pass edge.
pub fn band_mask(rho: f64, low_cut: f64, high_cut: f64, width: f64) -> f64 {
    let mut m = 1.0;
    if low_cut < 1.0 {
        m *= raised_cosine_down(rho, low_cut, low_cut + width);
    }
    if high_cut > 0.0 {
        m *= 1.0 - raised_cosine_down(rho, high_cut, high_cut + width);
    }
    m
}

/// Normalized radius (fraction of Nyquist) of every DFT bin of a `[d, h, w]` grid.
pub fn normalized_radius(dims: [usize; 3]) -> impl Fn(usize, usize, usize) -> f64 {
    move |z, y, x| {
        let comp = |i: usize, n: usize| {
            if n < 2 {
                0.0
            } else {
                fft::signed_freq(i, n) / (n as f64 / 2.0)
            }
        };
        let (a, b, c) = (comp(z, dims[0]), comp(y, dims[1]), comp(x, dims[2]));
        (a * a + b * b + c * c).sqrt()
    }
}

/// Radially symmetric band-pass in the 3D DFT domain; cut-offs are fractions of Nyquist.
///
/// Each active edge rolls off with a raised cosine two frequency voxels wide.
pub fn fourier_filter(vol: &DensityVolume, low_cut: f64, high_cut: f64) -> Result<DensityVolume> {
    if !(0.0..1.0).contains(&high_cut) || !(low_cut > high_cut && low_cut <= 1.0) || low_cut.is_nan() {
        return Err(VolumeError::InvalidBand { low: low_cut, high: high_cut });
    }
    if low_cut >= 1.0 && high_cut == 0.0 {
        return Ok(vol.clone());
    }
    let dims = vol.dims;
    let mut spec = fft::fft3_real(&vol.data, dims);
    let n_max = *dims.iter().max().unwrap() as f64;
    let width = 2.0 / (n_max / 2.0);
    let radius = normalized_radius(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let m = band_mask(radius(z, y, x), low_cut, high_cut, width);
                spec[(z * dims[1] + y) * dims[2] + x] *= m;
            }
        }
    }
    fft::fft3(&mut spec, dims, true);
    vol.with_data(spec.iter().map(|c: &Complex64| c.re as f32).collect())
}

fn sample_trilinear_clamped(vol: &DensityVolume, z: f64, y: f64, x: f64) -> f64 {
    let [d, h, w] = vol.dims;
    let axis = |p: f64, n: usize| {
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let (z0, z1, fz) = axis(z, d);
    let (y0, y1, fy) = axis(y, h);
    let (x0, x1, fx) = axis(x, w);
    let g = |a, b, c| vol.get(a, b, c) as f64;
    let c00 = g(z0, y0, x0) * (1.0 - fx) + g(z0, y0, x1) * fx;
    let c01 = g(z0, y1, x0) * (1.0 - fx) + g(z0, y1, x1) * fx;
    let c10 = g(z1, y0, x0) * (1.0 - fx) + g(z1, y0, x1) * fx;
    let c11 = g(z1, y1, x0) * (1.0 - fx) + g(z1, y1, x1) * fx;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Resamples to a new isotropic spacing: anti-alias low-pass at the new Nyquist,
/// then trilinear interpolation on voxel centers.
pub fn resample_isotropic(vol: &DensityVolume, target_spacing: f64) -> Result<DensityVolume> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(VolumeError::BadSpacing(target_spacing));
    }
    let ratio = vol.spacing / target_spacing;
    let filtered = if ratio < 1.0 {
        fourier_filter(vol, ratio, 0.0)?
    } else {
        vol.clone()
    };
    let new_dims = vol.dims.map(|n| ((n as f64 * ratio).round() as usize).max(1));
    let step = target_spacing / vol.spacing;
    let pos = |j: usize| (j as f64 + 0.5) * step - 0.5;
    let mut data = Vec::with_capacity(new_dims.iter().product());
    for z in 0..new_dims[0] {
        for y in 0..new_dims[1] {
            for x in 0..new_dims[2] {
                data.push(sample_trilinear_clamped(&filtered, pos(z), pos(y), pos(x)) as f32);
            }
        }
    }
    let mut out = DensityVolume::new(new_dims, data, target_spacing)?;
    out.origin_id = vol.origin_id.clone();
    Ok(out)
}
