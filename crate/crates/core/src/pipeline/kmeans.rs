//! K-means codebooks and bag-of-features histograms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::special::RngStream;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// C×F centres.
    pub centers: Array2<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    /// Index of the nearest centre; ties go to the lowest index.
    pub fn nearest(&self, x: ArrayView1<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, center) in self.centers.rows().into_iter().enumerate() {
            let dist: f64 = center.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Sum of squared distances after each Lloyd iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`MAX_LLOYD_ITERATIONS`] is reached. When the sample has
/// fewer than `c` distinct points, C is reduced to that number.
pub fn kmeans_fit(features: ArrayView2<f64>, c: usize, seed: u64) -> Result<KmeansFit> {
    let (n, f) = features.dim();
    if c == 0 {
        return Err(Error::Config("codebook size must be at least 1".into()));
    }
    if n < c {
        return Err(Error::Config(format!("k-means needs at least {c} samples, got {n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("k-means features must be finite".into()));
    }
    let distinct = count_distinct(features);
    let c = if distinct < c {
        log::warn!("only {distinct} distinct points; reducing codebook size from {c} to {distinct}");
        distinct
    } else {
        c
    };

    let mut rng = RngStream::new(seed, 0);
    let mut centers = Array2::zeros((c, f));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = features.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for next in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(next).assign(&features.row(pick));
        for (i, row) in features.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, centers.row(next)));
        }
    }

    let mut codebook = Codebook { centers };
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, row) in features.rows().into_iter().enumerate() {
            let (best, _) = codebook.nearest(row);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((c, f));
        let mut counts = vec![0usize; c];
        for (i, row) in features.rows().into_iter().enumerate() {
            let mut s = sums.row_mut(assignment[i]);
            s += &row;
            counts[assignment[i]] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            // An empty cluster keeps its previous centre.
            if count > 0 {
                let mean = &sums.row(k) / count as f64;
                codebook.centers.row_mut(k).assign(&mean);
            }
        }
        objective.push(
            features
                .rows()
                .into_iter()
                .zip(&assignment)
                .map(|(row, &a)| sq_dist(row, codebook.centers.row(a)))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    Ok(KmeansFit { codebook, objective, iterations })
}

fn count_distinct(features: ArrayView2<f64>) -> usize {
    let mut keys: Vec<Vec<u64>> =
        features.rows().into_iter().map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Normalised histogram of nearest-centre assignments. No features gives
/// an all-zero histogram and a warning.
pub fn quantize(codebook: &Codebook, features: ArrayView2<f64>) -> Result<Array1<f64>> {
    if features.ncols() != codebook.dim() {
        return Err(Error::DimensionMismatch { expected: codebook.dim(), actual: features.ncols() });
    }
    let mut hist = Array1::zeros(codebook.size());
    if features.nrows() == 0 {
        log::warn!("quantizing an empty feature set");
        return Ok(hist);
    }
    for row in features.rows() {
        hist[codebook.nearest(row).0] += 1.0;
    }
    hist /= features.nrows() as f64;
    Ok(hist)
}
