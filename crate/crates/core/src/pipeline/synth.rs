//! Synthetic ground truth: sparse loadings, heavy-tailed mixture sources and
//! isotropic Gaussian noise.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ObservationMatrix;
use crate::patches::VideoTensor;
use crate::special::RngStream;

/// Weights and variances of the two zero-mean source components. The
/// mixture has unit variance.
pub const SOURCE_WEIGHTS: [f64; 2] = [0.7, 0.3];
pub const SOURCE_VARIANCES: [f64; 2] = [0.25, 2.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub k_true: usize,
    pub n: usize,
    /// Probability that a loading is non-zero.
    pub sparsity: f64,
    /// Ratio of mean signal power to noise variance. `None` means noise-free.
    pub snr: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { d: 16, k_true: 5, n: 2000, sparsity: 0.5, snr: Some(10.0) }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_true == 0 || self.n == 0 {
            return Err(Error::Config("d, k_true and n must all be at least 1".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Config(format!("sparsity must lie in (0, 1], got {}", self.sparsity)));
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::Config(format!("snr must be positive and finite, got {snr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub x: ObservationMatrix,
    /// D×K true loadings.
    pub loadings: Array2<f64>,
    /// N×K true sources.
    pub sources: Array2<f64>,
    /// Noise precision φ, infinite for noise-free data.
    pub noise_precision: f64,
}

/// Draw a synthetic problem. Loadings, sources and noise come from separate
/// streams of `seed`, so changing N leaves the loadings untouched.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let (d, k, n) = (spec.d, spec.k_true, spec.n);
    let root = RngStream::new(seed, 0);

    let mut rng = root.split(1);
    let mut loadings = Array2::zeros((d, k));
    for kk in 0..k {
        loop {
            for dd in 0..d {
                let on = rng.uniform() < spec.sparsity;
                let value = rng.standard_normal();
                loadings[[dd, kk]] = if on { value } else { 0.0 };
            }
            if loadings.column(kk).iter().any(|v| *v != 0.0) {
                break;
            }
        }
    }

    let mut rng = root.split(2);
    let sources = Array2::from_shape_simple_fn((n, k), || {
        let comp = usize::from(rng.uniform() >= SOURCE_WEIGHTS[0]);
        SOURCE_VARIANCES[comp].sqrt() * rng.standard_normal()
    });

    let mut x = sources.dot(&loadings.t());
    // Unit-variance sources give mean signal power ‖G‖²_F / D per entry.
    let signal_power = loadings.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let noise_precision = match spec.snr {
        Some(snr) => {
            let precision = snr / signal_power;
            let sd = precision.recip().sqrt();
            let mut rng = root.split(3);
            x.mapv_inplace(|v| v + sd * rng.standard_normal());
            precision
        }
        None => f64::INFINITY,
    };
    Ok(SynthData { x: ObservationMatrix::new(x)?, loadings, sources, noise_precision })
}

/// Greedily pair true and recovered loading columns by absolute correlation
/// and return the mean absolute correlation over the pairs.
pub fn matched_loading_correlation(truth: &Array2<f64>, recovered: &Array2<f64>) -> f64 {
    let (kt, kr) = (truth.ncols(), recovered.ncols());
    if kt == 0 || kr == 0 {
        return 0.0;
    }
    let mut corr = Vec::with_capacity(kt * kr);
    for a in 0..kt {
        for b in 0..kr {
            corr.push((abs_correlation(truth.column(a).to_owned(), recovered.column(b).to_owned()), a, b));
        }
    }
    corr.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_t = vec![false; kt];
    let mut used_r = vec![false; kr];
    let mut total = 0.0;
    let mut pairs = 0;
    for (c, a, b) in corr {
        if !used_t[a] && !used_r[b] {
            used_t[a] = true;
            used_r[b] = true;
            total += c;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn abs_correlation(a: Array1<f64>, b: Array1<f64>) -> f64 {
    let (ma, mb) = (a.mean().unwrap_or(0.0), b.mean().unwrap_or(0.0));
    let ca = a - ma;
    let cb = b - mb;
    let denom = (ca.dot(&ca) * cb.dot(&cb)).sqrt();
    if denom > 0.0 {
        (ca.dot(&cb) / denom).abs()
    } else {
        0.0
    }
}

/// Grayscale clips of bright Gaussian blobs drifting at constant velocity
/// over a dark background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSynthSpec {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub blobs: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Largest speed in pixels per frame along each axis.
    pub max_speed: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for VideoSynthSpec {
    fn default() -> Self {
        Self { count: 4, h: 32, w: 32, t: 20, blobs: 3, blob_sigma: 2.5, max_speed: 1.0, noise: 0.02 }
    }
}

impl VideoSynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.h == 0 || self.w == 0 || self.t == 0 {
            return Err(Error::Config("count, h, w and t must all be at least 1".into()));
        }
        if !(self.blob_sigma > 0.0) || !(self.max_speed >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("blob_sigma must be positive; max_speed and noise non-negative".into()));
        }
        Ok(())
    }
}

/// Draw `spec.count` clips; clip i uses stream i + 1 of `seed`. Intensities
/// are clamped to [0, 1].
pub fn synth_videos(spec: &VideoSynthSpec, seed: u64) -> Result<Vec<VideoTensor>> {
    spec.validate()?;
    let root = RngStream::new(seed, 0);
    (0..spec.count)
        .map(|i| {
            let mut rng = root.split(i as u64 + 1);
            let blobs: Vec<[f64; 5]> = (0..spec.blobs)
                .map(|_| {
                    [
                        rng.uniform() * spec.h as f64,
                        rng.uniform() * spec.w as f64,
                        (2.0 * rng.uniform() - 1.0) * spec.max_speed,
                        (2.0 * rng.uniform() - 1.0) * spec.max_speed,
                        0.5 + 0.5 * rng.uniform(),
                    ]
                })
                .collect();
            let denom = 2.0 * spec.blob_sigma * spec.blob_sigma;
            VideoTensor::from_fn(spec.h, spec.w, spec.t, |x, y, t| {
                let mut v = 0.1;
                for b in &blobs {
                    let cx = b[0] + b[2] * t as f64;
                    let cy = b[1] + b[3] * t as f64;
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += b[4] * (-r2 / denom).exp();
                }
                (v + spec.noise * rng.standard_normal()).clamp(0.0, 1.0)
            })
        })
        .collect()
}
