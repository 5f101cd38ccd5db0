//! Grayscale video volumes, dense spatiotemporal patch sampling, contrast
//! normalisation and PCA whitening.
//!
//! Axes: `x` runs over the H rows of a frame, `y` over its W columns and `t`
//! over frames. Voxel (x, y, t) lives at `x + H (y + W t)`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_u32, Reader};
use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 6] = b"VIDT1\0";

/// Added to the patch standard deviation in contrast normalisation.
pub const LCN_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    h: usize,
    w: usize,
    t: usize,
    voxels: Vec<f64>,
}

impl VideoTensor {
    /// Wrap voxels stored x-fastest, then y, then t.
    pub fn new(h: usize, w: usize, t: usize, voxels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || t == 0 {
            return Err(Error::Format(format!("video dimensions must be positive, got {h}x{w}x{t}")));
        }
        let expected = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(t))
            .ok_or_else(|| Error::Format("video dimensions overflow".into()))?;
        if voxels.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: voxels.len() });
        }
        if let Some(bad) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("voxel {bad} is not finite")));
        }
        Ok(Self { h, w, t, voxels })
    }

    pub fn from_fn(h: usize, w: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut voxels = Vec::with_capacity(h * w * t);
        for tt in 0..t {
            for yy in 0..w {
                for xx in 0..h {
                    voxels.push(f(xx, yy, tt));
                }
            }
        }
        Self::new(h, w, t, voxels)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.t)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, t: usize) -> f64 {
        self.voxels[x + self.h * (y + self.w * t)]
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// Encode as `VIDT1\0`, u32 H, W, T and float32 voxels.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(18 + 4 * self.voxels.len());
        buf.extend_from_slice(VIDEO_MAGIC);
        put_u32(&mut buf, dim_u32(self.h, "H")?);
        put_u32(&mut buf, dim_u32(self.w, "W")?);
        put_u32(&mut buf, dim_u32(self.t, "T")?);
        for v in &self.voxels {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(VIDEO_MAGIC)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let t = r.u32()? as usize;
        let count = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(t))
            .ok_or_else(|| Error::Format("video dimensions overflow".into()))?;
        let voxels = r.f32_vec(count)?.into_iter().map(f64::from).collect();
        r.finish()?;
        Self::new(h, w, t, voxels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    /// Load a directory of 8-bit PGM (P5/P2) or PPM (P6) frames, sorted by
    /// file name. Colour frames are converted to luma; intensities are
    /// scaled to [0, 1].
    pub fn from_frame_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "ppm"))
        });
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format(format!("no .pgm or .ppm frames in {}", dir.display())));
        }
        let mut dims = None;
        let mut voxels = Vec::new();
        for path in &paths {
            let frame = read_netpbm(&fs::read(path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            match dims {
                None => dims = Some((frame.rows, frame.cols)),
                Some(d) if d != (frame.rows, frame.cols) => {
                    return Err(Error::Format(format!(
                        "{}: frame is {}x{}, expected {}x{}",
                        path.display(),
                        frame.rows,
                        frame.cols,
                        d.0,
                        d.1
                    )))
                }
                Some(_) => {}
            }
            // Row index maps to x, which varies fastest.
            for c in 0..frame.cols {
                for r in 0..frame.rows {
                    voxels.push(frame.luma[r * frame.cols + c]);
                }
            }
        }
        let (h, w) = dims.expect("at least one frame");
        Self::new(h, w, paths.len(), voxels)
    }
}

struct Frame {
    rows: usize,
    cols: usize,
    luma: Vec<f64>,
}

fn read_netpbm(bytes: &[u8]) -> std::result::Result<Frame, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let number = |s: String| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let cols = number(token()?)?;
    let rows = number(token()?)?;
    let maxval = number(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit frames are supported, maxval {maxval}"));
    }
    let scale = maxval as f64;
    let pixels = rows * cols;
    let luma = match magic.as_str() {
        "P5" => {
            let data = bytes.get(pos + 1..pos + 1 + pixels).ok_or("truncated pixel data")?;
            data.iter().map(|&v| v as f64 / scale).collect()
        }
        "P6" => {
            let data = bytes.get(pos + 1..pos + 1 + 3 * pixels).ok_or("truncated pixel data")?;
            data.chunks_exact(3)
                .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / scale)
                .collect()
        }
        "P2" => {
            let mut out = Vec::with_capacity(pixels);
            for _ in 0..pixels {
                out.push(number(token()?)? as f64 / scale);
            }
            out
        }
        other => return Err(format!("unsupported format {other:?}")),
    };
    Ok(Frame { rows, cols, luma })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceptiveField {
    pub sx: usize,
    pub sy: usize,
    pub st: usize,
    pub stride_x: usize,
    pub stride_y: usize,
    pub stride_t: usize,
}

impl ReceptiveField {
    /// Receptive field with 50% overlap strides (extent / 2, at least 1).
    pub fn new(sx: usize, sy: usize, st: usize) -> Self {
        Self {
            sx,
            sy,
            st,
            stride_x: (sx / 2).max(1),
            stride_y: (sy / 2).max(1),
            stride_t: (st / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, extent, stride) in
            [("x", self.sx, self.stride_x), ("y", self.sy, self.stride_y), ("t", self.st, self.stride_t)]
        {
            if extent == 0 {
                return Err(Error::Config(format!("receptive field extent along {name} must be at least 1")));
            }
            if stride == 0 || stride > extent {
                return Err(Error::Config(format!(
                    "stride along {name} must lie in [1, {extent}], got {stride}"
                )));
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.sx, self.sy, self.st]
    }

    pub fn strides(&self) -> [usize; 3] {
        [self.stride_x, self.stride_y, self.stride_t]
    }

    pub fn volume(&self) -> usize {
        self.sx * self.sy * self.st
    }

    /// Patch grid ⌊(dim − extent)/stride⌋ + 1 per axis, or `None` when the
    /// volume is smaller than the field along some axis.
    pub fn grid(&self, dims: (usize, usize, usize)) -> Option<[usize; 3]> {
        let dims = [dims.0, dims.1, dims.2];
        let mut out = [0; 3];
        for a in 0..3 {
            let (e, s) = (self.extents()[a], self.strides()[a]);
            if dims[a] < e {
                return None;
            }
            out[a] = (dims[a] - e) / s + 1;
        }
        Some(out)
    }
}

/// Grid positions in extraction order: x fastest, then y, then t.
pub fn grid_positions(grid: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..grid[2]).flat_map(move |t| (0..grid[1]).flat_map(move |y| (0..grid[0]).map(move |x| [x, y, t])))
}

/// Copy the patch at grid cell `cell` into `out`, x fastest.
pub fn patch_at(v: &VideoTensor, rf: &ReceptiveField, cell: [usize; 3], out: &mut Vec<f64>) {
    out.clear();
    let (x0, y0, t0) = (cell[0] * rf.stride_x, cell[1] * rf.stride_y, cell[2] * rf.stride_t);
    for t in t0..t0 + rf.st {
        for y in y0..y0 + rf.sy {
            let start = x0 + v.h * (y + v.w * t);
            out.extend_from_slice(&v.voxels[start..start + rf.sx]);
        }
    }
}

/// All patches of `v`, one per row. A video smaller than the field yields
/// an empty matrix and a warning.
pub fn extract_patches(v: &VideoTensor, rf: &ReceptiveField) -> Array2<f64> {
    let Some(grid) = rf.grid(v.dims()) else {
        log::warn!("video {:?} is smaller than the receptive field {:?}", v.dims(), rf.extents());
        return Array2::zeros((0, rf.volume()));
    };
    let count = grid.iter().product();
    let mut out = Array2::zeros((count, rf.volume()));
    let mut buf = Vec::with_capacity(rf.volume());
    for (row, cell) in grid_positions(grid).enumerate() {
        patch_at(v, rf, cell, &mut buf);
        out.row_mut(row).assign(&ArrayView1::from(&buf[..]));
    }
    out
}

/// Subtract the patch mean and divide by its standard deviation plus
/// [`LCN_EPSILON`].
pub fn contrast_normalize(patch: &mut [f64]) {
    if patch.is_empty() {
        return;
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var.sqrt() + LCN_EPSILON);
    for v in patch.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Array1<f64>,
    /// D′×D; row i is eigenvector i scaled by 1/sqrt(eig_i + eig_floor).
    pub projection: Array2<f64>,
    pub retained_dim: usize,
    pub eig_floor: f64,
}

/// Relative eigenvalue floor added before the inverse square root.
pub const EIG_FLOOR_RELATIVE: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest count as numerically zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Fit PCA whitening on the rows of `sample`, keeping the fewest leading
/// components whose eigenvalues reach `variance_to_keep` of the total.
/// Covariances use the 1/n normalisation.
pub fn fit_whitening(sample: ArrayView2<f64>, variance_to_keep: f64) -> Result<WhiteningTransform> {
    if !(variance_to_keep > 0.0 && variance_to_keep <= 1.0) {
        return Err(Error::Config(format!("variance_to_keep must lie in (0, 1], got {variance_to_keep}")));
    }
    let (n, d) = sample.dim();
    if n == 0 || d == 0 {
        return Err(Error::Config("whitening needs a non-empty sample".into()));
    }
    if n <= d {
        log::warn!("whitening {d}-dimensional data from only {n} samples");
    }
    let mean = sample.mean_axis(Axis(0)).expect("non-empty sample");
    let centered = &sample - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let largest = values[0];
    if !(largest > 0.0) {
        return Err(Error::Numerical("whitening sample has zero variance".into()));
    }
    let total: f64 = values.iter().sum();
    let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * largest).count();
    let mut retained = 0;
    let mut cumulative = 0.0;
    while retained < rank {
        cumulative += values[retained];
        retained += 1;
        if cumulative >= variance_to_keep * total * (1.0 - 1e-12) {
            break;
        }
    }
    let eig_floor = EIG_FLOOR_RELATIVE * largest;
    let mut projection = Array2::zeros((retained, d));
    for (row, &src) in order.iter().take(retained).enumerate() {
        let scale = 1.0 / (values[row] + eig_floor).sqrt();
        let vector = eig.eigenvectors.column(src);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..d).max_by(|&a, &b| vector[a].abs().total_cmp(&vector[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if vector[pivot] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            projection[[row, c]] = sign * scale * vector[c];
        }
    }
    Ok(WhiteningTransform { mean, projection, retained_dim: retained, eig_floor })
}

impl WhiteningTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// projection · (x − mean).
    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: x.len() });
        }
        Ok(self.projection.dot(&(&x - &self.mean)))
    }

    /// Whiten every row of `x`.
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: x.ncols() });
        }
        Ok((&x - &self.mean).dot(&self.projection.t()))
    }

    /// D×D′ right inverse of the projection, mapping whitened directions
    /// back to input coordinates.
    pub fn unwhitening(&self) -> Array2<f64> {
        let mut out = self.projection.t().to_owned();
        for (mut col, row) in out.columns_mut().into_iter().zip(self.projection.rows()) {
            col /= row.dot(&row);
        }
        out
    }
}
