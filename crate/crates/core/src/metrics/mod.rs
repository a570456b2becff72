//! Reconstruction quality metrics and Fourier shell correlation.

use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::volume::fft::{fft3_real, signed_freq};
use crate::volume::DensityVolume;

/// Side of the cubic SSIM window.
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("ground truth is constant")]
    ConstantGroundTruth,
    #[error("volume side {0} is smaller than the {SSIM_WINDOW}-voxel window")]
    TooSmall(usize),
    #[error("FSC needs a cubic volume, got {0:?}")]
    NotCubic([usize; 3]),
    #[error("FSC curve is empty")]
    EmptyCurve,
    #[error("threshold {0} must lie in (0, 1)")]
    BadThreshold(f64),
}

type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape(a: &DensityVolume, b: &DensityVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(pred: &DensityVolume, gt: &DensityVolume) -> Result<f64> {
    same_shape(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB. Identical inputs give [`Psnr::Perfect`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Perfect,
}

impl Psnr {
    /// Decibels, with `Perfect` as positive infinity.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Perfect => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Perfect => f.write_str("perfect"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Perfect => s.serialize_str("perfect"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "perfect" => Ok(Psnr::Perfect),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

/// `10 log10(range^2 / mse)` with the peak taken as the ground-truth range.
pub fn psnr(pred: &DensityVolume, gt: &DensityVolume) -> Result<Psnr> {
    let e = mse(pred, gt)?;
    let (lo, hi) = gt.min_max();
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return Err(MetricsError::ConstantGroundTruth);
    }
    if e == 0.0 {
        return Ok(Psnr::Perfect);
    }
    Ok(Psnr::Db(10.0 * (range * range / e).log10()))
}

/// Occupancy `v >= tau`.
pub fn binarize(vol: &DensityVolume, tau: f64) -> Vec<bool> {
    vol.data().iter().map(|&v| v as f64 >= tau).collect()
}

/// 0.5 for data that only holds 0 and 1, otherwise the midpoint of the value range.
pub fn default_threshold(gt: &DensityVolume) -> f64 {
    if gt.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return 0.5;
    }
    let (lo, hi) = gt.min_max();
    (lo as f64 + hi as f64) / 2.0
}

fn overlap_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch([pred.len(), 1, 1], [gt.len(), 1, 1]));
    }
    let inter = pred.iter().zip(gt).filter(|(&a, &b)| a && b).count();
    let np = pred.iter().filter(|&&a| a).count();
    let ng = gt.iter().filter(|&&b| b).count();
    Ok((inter, np, ng))
}

/// Intersection over union; two empty sets score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Dice / F1 score; two empty sets score 1.
pub fn f1(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// 3D summed-area table with a zero border: `[d+1, h+1, w+1]`.
fn integral(values: impl Iterator<Item = f64>, dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let (h1, w1) = (h + 1, w + 1);
    let mut t = vec![0.0; (d + 1) * h1 * w1];
    let idx = |z: usize, y: usize, x: usize| (z * h1 + y) * w1 + x;
    let mut it = values;
    for z in 1..=d {
        for y in 1..=h {
            for x in 1..=w {
                let v = it.next().expect("value count matches dims");
                t[idx(z, y, x)] = v + t[idx(z - 1, y, x)] + t[idx(z, y - 1, x)] + t[idx(z, y, x - 1)]
                    - t[idx(z - 1, y - 1, x)]
                    - t[idx(z - 1, y, x - 1)]
                    - t[idx(z, y - 1, x - 1)]
                    + t[idx(z - 1, y - 1, x - 1)];
            }
        }
    }
    t
}

fn box_sum(t: &[f64], dims: [usize; 3], z: usize, y: usize, x: usize, k: usize) -> f64 {
    let (h1, w1) = (dims[1] + 1, dims[2] + 1);
    let idx = |z: usize, y: usize, x: usize| (z * h1 + y) * w1 + x;
    let (z1, y1, x1) = (z + k, y + k, x + k);
    t[idx(z1, y1, x1)] - t[idx(z, y1, x1)] - t[idx(z1, y, x1)] - t[idx(z1, y1, x)] + t[idx(z, y, x1)] + t[idx(z, y1, x)] + t[idx(z1, y, x)]
        - t[idx(z, y, x)]
}

/// Mean SSIM over every 7^3 window, uniform weights, constants `(0.01 L)^2` and `(0.03 L)^2`
/// with `L` the ground-truth range (1 when the ground truth is constant).
pub fn ssim3d(pred: &DensityVolume, gt: &DensityVolume) -> Result<f64> {
    same_shape(pred, gt)?;
    let dims = gt.dims();
    let k = SSIM_WINDOW;
    if let Some(&s) = dims.iter().find(|&&s| s < k) {
        return Err(MetricsError::TooSmall(s));
    }
    let (lo, hi) = gt.min_max();
    let range = if hi > lo { hi as f64 - lo as f64 } else { 1.0 };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    // center the data so the integral tables stay well conditioned
    let shift = gt.mean();
    let a: Vec<f64> = pred.data().iter().map(|&v| v as f64 - shift).collect();
    let b: Vec<f64> = gt.data().iter().map(|&v| v as f64 - shift).collect();
    let sa = integral(a.iter().copied(), dims);
    let sb = integral(b.iter().copied(), dims);
    let saa = integral(a.iter().map(|v| v * v), dims);
    let sbb = integral(b.iter().map(|v| v * v), dims);
    let sab = integral(a.iter().zip(&b).map(|(x, y)| x * y), dims);
    let n = (k * k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=dims[0] - k {
        for y in 0..=dims[1] - k {
            for x in 0..=dims[2] - k {
                let ma = box_sum(&sa, dims, z, y, x, k) / n;
                let mb = box_sum(&sb, dims, z, y, x, k) / n;
                let va = (box_sum(&saa, dims, z, y, x, k) / n - ma * ma).max(0.0);
                let vb = (box_sum(&sbb, dims, z, y, x, k) / n - mb * mb).max(0.0);
                let cov = box_sum(&sab, dims, z, y, x, k) / n - ma * mb;
                // means are shifted; restore them for the luminance term
                let (ua, ub) = (ma + shift, mb + shift);
                let s = ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-shell Fourier correlation between two cubic volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Shell radius over box size, cycles per voxel, for radii `1..=N/2`.
    pub shell_freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub box_size: usize,
    /// Voxel spacing in angstrom.
    pub spacing: f64,
}

impl FscCurve {
    /// Integer radius of shell `i`.
    pub fn radius(&self, i: usize) -> usize {
        i + 1
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "shell,frequency,resolution_a,fsc")?;
        for (i, (&f, &v)) in self.shell_freqs.iter().zip(&self.values).enumerate() {
            writeln!(w, "{},{},{},{}", self.radius(i), f, self.spacing / f, v)?;
        }
        Ok(())
    }
}

/// Integer shell index of a DFT sample: the rounded radius in frequency-index units.
pub fn shell_index(z: usize, y: usize, x: usize, n: usize) -> usize {
    let (fz, fy, fx) = (signed_freq(z, n), signed_freq(y, n), signed_freq(x, n));
    (fz * fz + fy * fy + fx * fx).sqrt().round() as usize
}

/// Fourier shell correlation with integer-radius shells of width one.
///
/// Each value is `Re(sum F_a conj(F_b)) / sqrt(sum |F_a|^2 sum |F_b|^2)` over the shell.
pub fn fsc(a: &DensityVolume, b: &DensityVolume) -> Result<FscCurve> {
    same_shape(a, b)?;
    if !a.is_cubic() {
        return Err(MetricsError::NotCubic(a.dims()));
    }
    let n = a.dims()[0];
    let fa = fft3_real(a.data(), a.dims());
    let fb = fft3_real(b.data(), b.dims());
    let shells = n / 2;
    let mut num = vec![Complex64::new(0.0, 0.0); shells + 1];
    let mut da = vec![0.0; shells + 1];
    let mut db = vec![0.0; shells + 1];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let r = shell_index(z, y, x, n);
                if r > shells {
                    continue;
                }
                let i = (z * n + y) * n + x;
                num[r] += fa[i] * fb[i].conj();
                da[r] += fa[i].norm_sqr();
                db[r] += fb[i].norm_sqr();
            }
        }
    }
    let values = (1..=shells)
        .map(|r| {
            let d = (da[r] * db[r]).sqrt();
            if d > 0.0 {
                (num[r].re / d).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve {
        shell_freqs: (1..=shells).map(|r| r as f64 / n as f64).collect(),
        values,
        box_size: n,
        spacing: a.spacing(),
    })
}

/// Resolution read off an FSC curve at a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub angstrom: f64,
    /// Fractional shell radius of the crossing.
    pub shell: f64,
    /// True when the curve never drops below the threshold.
    pub at_limit: bool,
}

/// First crossing below `threshold`, linearly interpolated between shells.
///
/// Without a crossing the Nyquist limit `2 * spacing` is returned, flagged `at_limit`.
pub fn resolution_at(curve: &FscCurve, threshold: f64) -> Result<Resolution> {
    if curve.values.is_empty() {
        return Err(MetricsError::EmptyCurve);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let n = curve.box_size as f64;
    let Some(i) = curve.values.iter().position(|&v| v < threshold) else {
        return Ok(Resolution {
            angstrom: 2.0 * curve.spacing,
            shell: n / 2.0,
            at_limit: true,
        });
    };
    let k = if i == 0 {
        curve.radius(0) as f64
    } else {
        let (v0, v1) = (curve.values[i - 1], curve.values[i]);
        let k0 = curve.radius(i - 1) as f64;
        k0 + (v0 - threshold) / (v0 - v1)
    };
    Ok(Resolution {
        angstrom: n * curve.spacing / k,
        shell: k,
        at_limit: false,
    })
}

/// All metrics for one predicted/ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub mse: f64,
    pub psnr: Psnr,
    /// PSNR peak convention.
    pub psnr_peak: String,
    pub iou: f64,
    pub f1: f64,
    pub threshold: f64,
    pub ssim: f64,
    pub fsc_resolution_0143: Resolution,
    pub fsc_resolution_05: Resolution,
}

/// Computes every metric. `threshold` defaults to [`default_threshold`] of `gt`.
pub fn evaluate(id: &str, pred: &DensityVolume, gt: &DensityVolume, threshold: Option<f64>) -> Result<(MetricsReport, FscCurve)> {
    let tau = threshold.unwrap_or_else(|| default_threshold(gt));
    let bp = binarize(pred, tau);
    let bg = binarize(gt, tau);
    let curve = fsc(pred, gt)?;
    let report = MetricsReport {
        id: id.to_string(),
        mse: mse(pred, gt)?,
        psnr: psnr(pred, gt)?,
        psnr_peak: "ground-truth range".into(),
        iou: iou(&bp, &bg)?,
        f1: f1(&bp, &bg)?,
        threshold: tau,
        ssim: ssim3d(pred, gt)?,
        fsc_resolution_0143: resolution_at(&curve, 0.143)?,
        fsc_resolution_05: resolution_at(&curve, 0.5)?,
    };
    Ok((report, curve))
}

/// Mean of each scalar metric; PSNR averages finite values and is `Perfect` only if all are.
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let finite: Vec<f64> = reports.iter().filter_map(|r| match r.psnr {
        Psnr::Db(v) => Some(v),
        Psnr::Perfect => None,
    }).collect();
    let psnr = if finite.is_empty() {
        Psnr::Perfect
    } else {
        Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let res = |f: &dyn Fn(&MetricsReport) -> Resolution| Resolution {
        angstrom: mean(&|r| f(r).angstrom),
        shell: mean(&|r| f(r).shell),
        at_limit: reports.iter().all(|r| f(r).at_limit),
    };
    Some(MetricsReport {
        id: "aggregate".into(),
        mse: mean(&|r| r.mse),
        psnr,
        psnr_peak: reports[0].psnr_peak.clone(),
        iou: mean(&|r| r.iou),
        f1: mean(&|r| r.f1),
        threshold: mean(&|r| r.threshold),
        ssim: mean(&|r| r.ssim),
        fsc_resolution_0143: res(&|r| r.fsc_resolution_0143),
        fsc_resolution_05: res(&|r| r.fsc_resolution_05),
    })
}

/// One JSON record per line.
pub fn write_jsonl<T: Serialize>(w: &mut impl Write, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
