//! Sample-free snapshot of a trained model and its `IBPICA1\0` container.
//!
//! Layout: the 8-byte magic, little-endian u32 D, K, J, a u32 array count,
//! then every array as (u32 name length, name, u64 element count, float64
//! values), row-major, in a fixed order.

use std::collections::HashMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};

use super::state::{Hyperparameters, ModelState, UpdateMode};
use crate::binio::{dim_u32, put_named_f64, put_u32, Reader};
use crate::error::{Error, Result};
use crate::special::GammaParams;

pub const MODEL_MAGIC: &[u8; 8] = b"IBPICA1\0";

/// Global (per-feature) posteriors of a trained model. Per-sample source
/// posteriors are dropped; their mean responsibilities are kept for the
/// frozen feedforward scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    pub hp: Hyperparameters,
    pub mode: UpdateMode,
    pub activity: Array2<f64>,
    pub slab_mean: Array2<f64>,
    pub slab_precision: Array1<f64>,
    pub lambda: Vec<GammaParams>,
    pub phi: GammaParams,
    pub tau_tilde: Array1<f64>,
    pub tau_hat: Array1<f64>,
    pub q_weights: Array1<f64>,
    pub alpha: GammaParams,
    pub mixture_weights: Array2<f64>,
    pub scale_shape: Array2<f64>,
    pub scale_rate: Array2<f64>,
    /// K×J average of ζ_nkj over the training samples.
    pub mean_responsibilities: Array2<f64>,
}

impl ModelState {
    pub fn freeze(&self) -> FrozenModel {
        FrozenModel {
            hp: self.hp.clone(),
            mode: self.mode,
            activity: self.loadings.activity.clone(),
            slab_mean: self.loadings.mean.clone(),
            slab_precision: self.loadings.precision.clone(),
            lambda: self.precisions.lambda.clone(),
            phi: self.precisions.phi,
            tau_tilde: self.sticks.tau_tilde.clone(),
            tau_hat: self.sticks.tau_hat.clone(),
            q_weights: self.sticks.q_weights.clone(),
            alpha: self.sticks.alpha,
            mixture_weights: self.sources.mixture_weights.clone(),
            scale_shape: self.sources.scale_shape.clone(),
            scale_rate: self.sources.scale_rate.clone(),
            mean_responsibilities: self.sources.mean_responsibilities(),
        }
    }
}

impl FrozenModel {
    pub fn d(&self) -> usize {
        self.activity.nrows()
    }

    pub fn k(&self) -> usize {
        self.activity.ncols()
    }

    pub fn j(&self) -> usize {
        self.mixture_weights.ncols()
    }

    pub fn e_phi(&self) -> f64 {
        self.phi.mean()
    }

    /// D×K matrix of E[g_dk].
    pub fn expected_loadings(&self) -> Array2<f64> {
        &self.activity * &self.slab_mean
    }

    /// Σ_d E[g_dk²] per feature.
    pub fn column_second_moments(&self) -> Array1<f64> {
        let (d, k) = self.activity.dim();
        Array1::from_shape_fn(k, |kk| {
            (0..d)
                .map(|dd| {
                    let m = self.slab_mean[[dd, kk]];
                    self.activity[[dd, kk]] * (m * m + 1.0 / self.slab_precision[kk])
                })
                .sum()
        })
    }

    /// Per-feature source precision 1/s̄_k = E[φ] Σ_d E[g_dk²] + Σ_j ζ̄_kj E[s_kj⁻¹].
    pub fn frozen_precision(&self) -> Array1<f64> {
        let g2 = self.column_second_moments();
        let e_phi = self.e_phi();
        Array1::from_shape_fn(self.k(), |kk| {
            let prior: f64 = (0..self.j())
                .map(|jj| {
                    self.mean_responsibilities[[kk, jj]] * self.scale_shape[[kk, jj]] / self.scale_rate[[kk, jj]]
                })
                .sum();
            e_phi * g2[kk] + prior
        })
    }

    /// K×D linear map from a whitened input to the source posterior means,
    /// given per-feature source precisions.
    ///
    /// `AsPrinted` models use the raw projection m_k = s_k E[φ] E[G_{:,k}]ᵀ x.
    /// `Exact` models use the fixed point of the residualised coordinate
    /// updates, m = A⁻¹ E[φ] E[G]ᵀ x with
    /// A = E[φ] E[G]ᵀE[G] + diag(p_k − E[φ] Σ_d E[g_dk]²).
    pub fn encoder(&self, precision: ArrayView1<f64>) -> Result<Array2<f64>> {
        let (d, k) = self.activity.dim();
        if precision.len() != k {
            return Err(Error::DimensionMismatch { expected: k, actual: precision.len() });
        }
        let e_phi = self.e_phi();
        let eg = self.expected_loadings();
        match self.mode {
            UpdateMode::AsPrinted => {
                Ok(Array2::from_shape_fn((k, d), |(kk, dd)| e_phi * eg[[dd, kk]] / precision[kk]))
            }
            UpdateMode::Exact => {
                let g = DMatrix::from_fn(d, k, |dd, kk| eg[[dd, kk]]);
                let mut a = g.transpose() * &g * e_phi;
                for kk in 0..k {
                    let diag_mean: f64 = (0..d).map(|dd| eg[[dd, kk]].powi(2)).sum();
                    a[(kk, kk)] += precision[kk] - e_phi * diag_mean;
                }
                let chol = a
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("feedforward system is not positive definite".into()))?;
                let w = chol.solve(&(g.transpose() * e_phi));
                Ok(Array2::from_shape_fn((k, d), |(kk, dd)| w[(kk, dd)]))
            }
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (d, k, j) = (self.d(), self.k(), self.j());
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut buf, dim_u32(d, "D")?);
        put_u32(&mut buf, dim_u32(k, "K")?);
        put_u32(&mut buf, dim_u32(j, "J")?);
        let hp = &self.hp;
        let arrays: Vec<(&str, Vec<f64>)> = vec![
            (
                "hyperparameters",
                vec![
                    hp.noise_shape,
                    hp.noise_rate,
                    hp.slab_shape,
                    hp.slab_rate,
                    hp.alpha_shape,
                    hp.alpha_rate,
                    hp.scale_shape,
                    hp.scale_rate,
                ],
            ),
            ("dirichlet", hp.dirichlet.clone()),
            ("update_mode", vec![if self.mode == UpdateMode::Exact { 0.0 } else { 1.0 }]),
            ("activity", row_major(&self.activity)),
            ("slab_mean", row_major(&self.slab_mean)),
            ("slab_precision", self.slab_precision.to_vec()),
            ("lambda_shape", self.lambda.iter().map(|l| l.shape).collect()),
            ("lambda_rate", self.lambda.iter().map(|l| l.rate).collect()),
            ("phi", vec![self.phi.shape, self.phi.rate]),
            ("tau_tilde", self.tau_tilde.to_vec()),
            ("tau_hat", self.tau_hat.to_vec()),
            ("q_weights", self.q_weights.to_vec()),
            ("alpha", vec![self.alpha.shape, self.alpha.rate]),
            ("mixture_weights", row_major(&self.mixture_weights)),
            ("scale_shape", row_major(&self.scale_shape)),
            ("scale_rate", row_major(&self.scale_rate)),
            ("mean_responsibilities", row_major(&self.mean_responsibilities)),
        ];
        put_u32(&mut buf, arrays.len() as u32);
        for (name, values) in &arrays {
            put_named_f64(&mut buf, name, values);
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = Self::read(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC)?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let j = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut arrays = HashMap::with_capacity(count);
        for _ in 0..count {
            let (name, values) = r.named_f64()?;
            arrays.insert(name, values);
        }
        let mut get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = arrays.remove(name).ok_or_else(|| Error::Format(format!("missing array {name:?}")))?;
            if v.len() != len {
                return Err(Error::Format(format!("array {name:?} has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        let hpv = get("hyperparameters", 8)?;
        let hp = Hyperparameters {
            noise_shape: hpv[0],
            noise_rate: hpv[1],
            slab_shape: hpv[2],
            slab_rate: hpv[3],
            alpha_shape: hpv[4],
            alpha_rate: hpv[5],
            scale_shape: hpv[6],
            scale_rate: hpv[7],
            dirichlet: get("dirichlet", j)?,
        };
        let mode = match get("update_mode", 1)?[0] {
            0.0 => UpdateMode::Exact,
            1.0 => UpdateMode::AsPrinted,
            m => return Err(Error::Format(format!("unknown update mode code {m}"))),
        };
        let matrix = |v: Vec<f64>, rows: usize, cols: usize| {
            Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))
        };
        let activity = matrix(get("activity", d * k)?, d, k)?;
        let slab_mean = matrix(get("slab_mean", d * k)?, d, k)?;
        let slab_precision = Array1::from(get("slab_precision", k)?);
        let lambda_shape = get("lambda_shape", k)?;
        let lambda_rate = get("lambda_rate", k)?;
        let lambda = lambda_shape.iter().zip(&lambda_rate).map(|(&s, &r)| GammaParams { shape: s, rate: r }).collect();
        let phi = get("phi", 2)?;
        let alpha = get("alpha", 2)?;
        let model = FrozenModel {
            hp,
            mode,
            activity,
            slab_mean,
            slab_precision,
            lambda,
            phi: GammaParams { shape: phi[0], rate: phi[1] },
            tau_tilde: Array1::from(get("tau_tilde", k)?),
            tau_hat: Array1::from(get("tau_hat", k)?),
            q_weights: Array1::from(get("q_weights", k)?),
            alpha: GammaParams { shape: alpha[0], rate: alpha[1] },
            mixture_weights: matrix(get("mixture_weights", k * j)?, k, j)?,
            scale_shape: matrix(get("scale_shape", k * j)?, k, j)?,
            scale_rate: matrix(get("scale_rate", k * j)?, k, j)?,
            mean_responsibilities: matrix(get("mean_responsibilities", k * j)?, k, j)?,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Format(format!("unexpected array {extra:?}")));
        }
        Ok(model)
    }
}

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}
