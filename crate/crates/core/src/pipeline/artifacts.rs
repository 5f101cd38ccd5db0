//! On-disk artifacts: feature tensors, CSV matrices and traces, manifests.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_u32, Reader};
use crate::conv::FeatureMap;
use crate::error::{Error, Result};
use crate::inference::IterationRecord;

pub const FEATURE_MAGIC: &[u8; 6] = b"FEAT1\0";

/// Features of one video: the grid, float32 values and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub grid: [usize; 3],
    /// Cells × dim, row-major, in grid order.
    pub values: Array2<f32>,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    grid: [usize; 3],
    cells: usize,
    dim: usize,
    provenance: serde_json::Value,
}

impl FeatureFile {
    pub fn from_map(map: &FeatureMap, provenance: serde_json::Value) -> Self {
        Self { grid: map.grid, values: map.values.mapv(|v| v as f32), provenance }
    }

    /// `FEAT1\0`, u32 header length, JSON header, float32 values.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = FeatureHeader {
            grid: self.grid,
            cells: self.values.nrows(),
            dim: self.values.ncols(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(10 + json.len() + 4 * self.values.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        put_u32(&mut buf, dim_u32(json.len(), "header length")?);
        buf.extend_from_slice(&json);
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(FEATURE_MAGIC)?;
        let len = r.u32()? as usize;
        let header: FeatureHeader = serde_json::from_slice(r.take(len)?)?;
        let count = header
            .cells
            .checked_mul(header.dim)
            .ok_or_else(|| Error::Format("feature dimensions overflow".into()))?;
        let values = Array2::from_shape_vec((header.cells, header.dim), r.f32_vec(count)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        r.finish()?;
        Ok(Self { grid: header.grid, values, provenance: header.provenance })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    /// CSV with columns x, y, t, f0, f1, …; values are the float32 ones.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let dim = self.values.ncols();
        let mut header = vec!["x".to_owned(), "y".to_owned(), "t".to_owned()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        let [gx, gy, _] = self.grid;
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let mut record = vec![(i % gx).to_string(), (i / gx % gy).to_string(), (i / (gx * gy)).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Write a matrix as CSV with a header row `{prefix}0, {prefix}1, …`.
pub fn write_matrix_csv(path: &Path, prefix: &str, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.ncols()).map(|i| format!("{prefix}{i}")))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a numeric CSV matrix with a header row.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != cols {
            return Err(Error::Format(format!("{}: row {} has {} fields, expected {cols}", path.display(), line + 1, record.len())));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}: row {}: {field:?} is not a number", path.display(), line + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

/// ELBO and K trace, one row per iteration.
pub fn write_trace_csv(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for record in trace {
        w.serialize(record)?;
    }
    if trace.is_empty() {
        w.write_record(["iteration", "elbo", "k", "active", "proposals", "accepted", "pruned"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
