//! Convolutional replication of trained IBP-ICA layers, pooling, greedy
//! layerwise training and feedforward feature extraction.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_named_f64, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::inference::{run_inference, FrozenModel, Hyperparameters, InferenceConfig, InferenceResult, ObservationMatrix};
use crate::patches::{
    contrast_normalize, fit_whitening, grid_positions, patch_at, ReceptiveField, VideoTensor, WhiteningTransform,
};
use crate::special::RngStream;

pub const NETWORK_MAGIC: &[u8; 8] = b"IBPNET1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    L2,
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingSpec {
    pub group_size: usize,
    pub mode: PoolMode,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        Self { group_size: 2, mode: PoolMode::L2 }
    }
}

impl PoolingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("pooling group_size must be at least 1".into()));
        }
        Ok(())
    }

    /// ⌈K / p⌉: the last partial group is kept.
    pub fn output_dim(&self, k: usize) -> usize {
        k.div_ceil(self.group_size)
    }
}

/// Reduce consecutive groups of `spec.group_size` features.
pub fn pool(spec: &PoolingSpec, features: ArrayView1<f64>) -> Array1<f64> {
    let values = features.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| features.to_vec());
    values
        .chunks(spec.group_size)
        .map(|g| match spec.mode {
            PoolMode::L2 => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            PoolMode::Max => g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PoolMode::Mean => g.iter().sum::<f64>() / g.len() as f64,
        })
        .collect()
}

/// Per-position feature vectors over a patch grid, one row per cell in
/// x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: [usize; 3],
    pub values: Array2<f64>,
}

impl FeatureMap {
    pub fn empty(dim: usize) -> Self {
        Self { grid: [0; 3], values: Array2::zeros((0, dim)) }
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn index(&self, cell: [usize; 3]) -> usize {
        cell[0] + self.grid[0] * (cell[1] + self.grid[1] * cell[2])
    }

    pub fn cell(&self, cell: [usize; 3]) -> ArrayView1<'_, f64> {
        self.values.row(self.index(cell))
    }

    pub fn pooled(&self, spec: &PoolingSpec) -> FeatureMap {
        let rows: Vec<Array1<f64>> = self.values.rows().into_iter().map(|r| pool(spec, r)).collect();
        FeatureMap { grid: self.grid, values: stack_rows(&rows, spec.output_dim(self.dim())) }
    }
}

fn stack_rows(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}

/// One trained layer: the frozen IBP-ICA model, its whitening, geometry and
/// pooling, plus the cached feedforward map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerModel {
    pub model: FrozenModel,
    pub whitening: WhiteningTransform,
    /// Receptive field in input pixels.
    pub rf: ReceptiveField,
    pub pooling: PoolingSpec,
    pub contrast_normalize: bool,
    encoder: Array2<f64>,
}

impl LayerModel {
    pub fn new(
        model: FrozenModel,
        whitening: WhiteningTransform,
        rf: ReceptiveField,
        pooling: PoolingSpec,
        contrast_normalize: bool,
    ) -> Result<Self> {
        if model.d() != whitening.retained_dim {
            return Err(Error::DimensionMismatch { expected: whitening.retained_dim, actual: model.d() });
        }
        let encoder = model.encoder(model.frozen_precision().view())?;
        Ok(Self { model, whitening, rf, pooling, contrast_normalize, encoder })
    }

    /// Raw (pre-whitening) input dimension.
    pub fn input_dim(&self) -> usize {
        self.whitening.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.model.k()
    }

    pub fn pooled_dim(&self) -> usize {
        self.pooling.output_dim(self.feature_dim())
    }

    /// K×D′ map from a whitened patch to its features.
    pub fn encoder(&self) -> &Array2<f64> {
        &self.encoder
    }

    /// Features of a whitened input vector.
    pub fn feature_forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.encoder.ncols() {
            return Err(Error::DimensionMismatch { expected: self.encoder.ncols(), actual: x.len() });
        }
        Ok(self.encoder.dot(&x))
    }

    /// Contrast-normalise (when enabled), whiten and encode a raw input.
    pub fn encode_raw(&self, mut raw: Vec<f64>) -> Result<Array1<f64>> {
        if self.contrast_normalize {
            contrast_normalize(&mut raw);
        }
        let white = self.whitening.apply(ArrayView1::from(&raw[..]))?;
        self.feature_forward(white.view())
    }
}

/// Apply `layer` at every patch position of `v`. Returns unpooled features.
pub fn convolve_layer(layer: &LayerModel, v: &VideoTensor) -> Result<FeatureMap> {
    let Some(grid) = layer.rf.grid(v.dims()) else {
        log::warn!("video {:?} is smaller than the receptive field {:?}", v.dims(), layer.rf.extents());
        return Ok(FeatureMap::empty(layer.feature_dim()));
    };
    let cells: Vec<[usize; 3]> = grid_positions(grid).collect();
    let rows = cells
        .par_iter()
        .map(|&cell| {
            let mut buf = Vec::with_capacity(layer.rf.volume());
            patch_at(v, &layer.rf, cell, &mut buf);
            layer.encode_raw(buf)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMap { grid, values: stack_rows(&rows, layer.feature_dim()) })
}

/// Window, in layer-1 grid cells, covering every layer-1 patch that lies
/// inside a layer-2 field given in pixels. Per axis the window spans
/// ⌊(extent₂ − extent₁)/stride₁⌋ + 1 cells and moves by half its size.
pub fn layer2_window(rf1: &ReceptiveField, rf2: &ReceptiveField) -> Result<ReceptiveField> {
    let mut cells = [0; 3];
    for a in 0..3 {
        let (e1, s1, e2) = (rf1.extents()[a], rf1.strides()[a], rf2.extents()[a]);
        if e2 < e1 {
            return Err(Error::Config(format!(
                "layer-2 receptive field {:?} must contain the layer-1 field {:?}",
                rf2.extents(),
                rf1.extents()
            )));
        }
        cells[a] = (e2 - e1) / s1 + 1;
    }
    Ok(ReceptiveField::new(cells[0], cells[1], cells[2]))
}

/// Concatenated feature vectors of the window at `cell`, grid order.
fn window_vector(map: &FeatureMap, window: &ReceptiveField, cell: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(window.volume() * map.dim());
    let origin = [cell[0] * window.stride_x, cell[1] * window.stride_y, cell[2] * window.stride_t];
    for t in 0..window.st {
        for y in 0..window.sy {
            for x in 0..window.sx {
                let row = map.cell([origin[0] + x, origin[1] + y, origin[2] + t]);
                out.extend(row.iter().copied());
            }
        }
    }
    out
}

fn window_grid(map: &FeatureMap, window: &ReceptiveField) -> Option<[usize; 3]> {
    window.grid((map.grid[0], map.grid[1], map.grid[2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    /// Receptive field in input pixels. Strides default to half the extent.
    pub rf: RfConfig,
    pub pooling: PoolingSpec,
    pub hyperparameters: Hyperparameters,
    pub inference: InferenceConfig,
    pub n_train_patches: usize,
    pub variance_to_keep: f64,
    pub contrast_normalize: bool,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            rf: RfConfig { extent: [16, 16, 10], stride: None },
            pooling: PoolingSpec::default(),
            hyperparameters: Hyperparameters::default(),
            inference: InferenceConfig::default(),
            n_train_patches: 200_000,
            variance_to_keep: 0.99,
            contrast_normalize: true,
        }
    }
}

impl LayerConfig {
    /// Defaults for the second layer: a 20×20×14 field.
    pub fn second_layer() -> Self {
        Self { rf: RfConfig { extent: [20, 20, 14], stride: None }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.rf.resolve()?;
        self.pooling.validate()?;
        self.hyperparameters.validate()?;
        self.inference.validate()?;
        if self.n_train_patches == 0 {
            return Err(Error::Config("n_train_patches must be at least 1".into()));
        }
        if !(self.variance_to_keep > 0.0 && self.variance_to_keep <= 1.0) {
            return Err(Error::Config(format!("variance_to_keep must lie in (0, 1], got {}", self.variance_to_keep)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfConfig {
    /// Extents along x, y, t.
    pub extent: [usize; 3],
    /// Strides along x, y, t; half the extent when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 3]>,
}

impl RfConfig {
    pub fn resolve(&self) -> Result<ReceptiveField> {
        let [sx, sy, st] = self.extent;
        let mut rf = ReceptiveField::new(sx, sy, st);
        if let Some([a, b, c]) = self.stride {
            rf.stride_x = a;
            rf.stride_y = b;
            rf.stride_t = c;
        }
        rf.validate()?;
        Ok(rf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<LayerConfig>,
    /// Concatenate pooled layer-1 features with the top-layer features.
    pub combine_layers: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { layers: vec![LayerConfig::default(), LayerConfig::second_layer()], combine_layers: true }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers.len()) {
            return Err(Error::Config(format!("a network has 1 or 2 layers, got {}", self.layers.len())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
        }
        if let [l1, l2] = &self.layers[..] {
            layer2_window(&l1.rf.resolve()?, &l2.rf.resolve()?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerModel>,
    pub combine_layers: bool,
    /// Free-form provenance stored in the container header.
    pub provenance: serde_json::Value,
}

/// Trained network plus the inference traces of each layer.
#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: NetworkModel,
    pub results: Vec<InferenceResult>,
}

/// Uniformly choose `required` of `available` items without replacement,
/// returned in increasing order.
fn sample_indices(available: usize, required: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if required > available {
        return Err(Error::InsufficientPatches { required, available });
    }
    let mut picked = rand::seq::index::sample(rng, available, required).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn train_layer(
    config: &LayerConfig,
    rf: ReceptiveField,
    raw: Array2<f64>,
    seed: u64,
) -> Result<(LayerModel, InferenceResult)> {
    let mut raw = raw;
    if config.contrast_normalize {
        for mut row in raw.rows_mut() {
            contrast_normalize(row.as_slice_mut().expect("standard layout"));
        }
    }
    let whitening = fit_whitening(raw.view(), config.variance_to_keep)?;
    let x = ObservationMatrix::new(whitening.apply_rows(raw.view())?)?;
    let inference = InferenceConfig { seed, ..config.inference.clone() };
    let result = run_inference(&x, &config.hyperparameters, &inference)?;
    let layer = LayerModel::new(result.state.freeze(), whitening, rf, config.pooling, config.contrast_normalize)?;
    Ok((layer, result))
}

/// Greedy layerwise training on a corpus of videos.
pub fn train_network(videos: &[VideoTensor], config: &NetworkConfig, seed: u64) -> Result<TrainedNetwork> {
    config.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let root = RngStream::new(seed, 0);

    let cfg1 = &config.layers[0];
    let rf1 = cfg1.rf.resolve()?;
    let grids: Vec<Option<[usize; 3]>> = videos.iter().map(|v| rf1.grid(v.dims())).collect();
    let index: Vec<(usize, [usize; 3])> = grids
        .iter()
        .enumerate()
        .flat_map(|(vi, g)| g.iter().flat_map(move |&g| grid_positions(g).map(move |c| (vi, c))))
        .collect();
    let picked = sample_indices(index.len(), cfg1.n_train_patches, &mut root.split(1))?;
    let mut raw = Array2::zeros((picked.len(), rf1.volume()));
    let mut buf = Vec::with_capacity(rf1.volume());
    for (row, &i) in picked.iter().enumerate() {
        let (vi, cell) = index[i];
        patch_at(&videos[vi], &rf1, cell, &mut buf);
        raw.row_mut(row).assign(&ArrayView1::from(&buf[..]));
    }
    log::info!("layer 1: training on {} of {} patches", picked.len(), index.len());
    let (layer1, result1) = train_layer(cfg1, rf1, raw, seed)?;
    let mut layers = vec![layer1];
    let mut results = vec![result1];

    if let Some(cfg2) = config.layers.get(1) {
        let rf2 = cfg2.rf.resolve()?;
        let window = layer2_window(&rf1, &rf2)?;
        let maps = videos
            .iter()
            .map(|v| Ok(convolve_layer(&layers[0], v)?.pooled(&layers[0].pooling)))
            .collect::<Result<Vec<_>>>()?;
        let index: Vec<(usize, [usize; 3])> = maps
            .iter()
            .enumerate()
            .flat_map(|(vi, m)| window_grid(m, &window).into_iter().flat_map(move |g| grid_positions(g).map(move |c| (vi, c))))
            .collect();
        let picked = sample_indices(index.len(), cfg2.n_train_patches, &mut root.split(2))?;
        let dim = window.volume() * layers[0].pooled_dim();
        let mut raw = Array2::zeros((picked.len(), dim));
        for (row, &i) in picked.iter().enumerate() {
            let (vi, cell) = index[i];
            raw.row_mut(row).assign(&Array1::from(window_vector(&maps[vi], &window, cell)));
        }
        log::info!("layer 2: training on {} of {} windows", picked.len(), index.len());
        let (layer2, result2) = train_layer(cfg2, rf2, raw, seed)?;
        layers.push(layer2);
        results.push(result2);
    }

    Ok(TrainedNetwork {
        network: NetworkModel { layers, combine_layers: config.combine_layers, provenance: serde_json::Value::Null },
        results,
    })
}

impl NetworkModel {
    /// Layer-2 window in layer-1 grid cells.
    pub fn window(&self) -> Result<Option<ReceptiveField>> {
        match &self.layers[..] {
            [_] => Ok(None),
            [l1, l2] => layer2_window(&l1.rf, &l2.rf).map(Some),
            _ => Err(Error::Format(format!("network has {} layers", self.layers.len()))),
        }
    }

    /// Dimension of each extracted feature vector.
    pub fn output_dim(&self) -> usize {
        match &self.layers[..] {
            [l1] => l1.pooled_dim(),
            [l1, l2] if self.combine_layers => l1.pooled_dim() + l2.feature_dim(),
            [.., top] => top.feature_dim(),
            [] => 0,
        }
    }

    /// Per-position features of `v`. One layer gives pooled layer-1
    /// features; two layers give layer-2 features, preceded when combining
    /// by the mean pooled layer-1 vector over each window.
    pub fn extract_features(&self, v: &VideoTensor) -> Result<FeatureMap> {
        let first = &self.layers[0];
        let map1 = convolve_layer(first, v)?.pooled(&first.pooling);
        let Some(window) = self.window()? else {
            return Ok(map1);
        };
        let second = &self.layers[1];
        let Some(grid) = window_grid(&map1, &window) else {
            log::warn!("video {:?} is too small for the layer-2 receptive field", v.dims());
            return Ok(FeatureMap::empty(self.output_dim()));
        };
        let cells: Vec<[usize; 3]> = grid_positions(grid).collect();
        let pooled_dim = first.pooled_dim();
        let combine = self.combine_layers;
        let rows = cells
            .par_iter()
            .map(|&cell| {
                let input = window_vector(&map1, &window, cell);
                let top = second.encode_raw(input.clone())?;
                if !combine {
                    return Ok(top);
                }
                let mut lower = Array1::<f64>::zeros(pooled_dim);
                for chunk in input.chunks(pooled_dim) {
                    lower += &ArrayView1::from(chunk);
                }
                lower /= window.volume() as f64;
                Ok(ndarray::concatenate![Axis(0), lower, top])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMap { grid, values: stack_rows(&rows, self.output_dim()) })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = NetworkHeader {
            combine_layers: self.combine_layers,
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    rf: l.rf,
                    pooling: l.pooling,
                    contrast_normalize: l.contrast_normalize,
                    input_dim: l.input_dim(),
                    retained_dim: l.whitening.retained_dim,
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(NETWORK_MAGIC);
        put_u32(&mut buf, dim_u32(json.len(), "header length")?);
        buf.extend_from_slice(&json);
        put_u32(&mut buf, dim_u32(self.layers.len(), "layer count")?);
        for layer in &self.layers {
            let w = &layer.whitening;
            put_named_f64(&mut buf, "whitening_mean", w.mean.as_slice().expect("standard layout"));
            put_named_f64(&mut buf, "whitening_projection", &w.projection.iter().copied().collect::<Vec<_>>());
            put_named_f64(&mut buf, "whitening_eig_floor", &[w.eig_floor]);
            let model = layer.model.encode()?;
            put_u64(&mut buf, model.len() as u64);
            buf.extend_from_slice(&model);
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(NETWORK_MAGIC)?;
        let json_len = r.u32()? as usize;
        let header: NetworkHeader = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.u32()? as usize;
        if count != header.layers.len() || !(1..=2).contains(&count) {
            return Err(Error::Format(format!("header lists {} layers, body has {count}", header.layers.len())));
        }
        let mut layers = Vec::with_capacity(count);
        for lh in &header.layers {
            let mut array = |name: &str, len: usize| -> Result<Vec<f64>> {
                let (got, values) = r.named_f64()?;
                if got != name || values.len() != len {
                    return Err(Error::Format(format!("expected array {name:?} of length {len}, found {got:?}")));
                }
                Ok(values)
            };
            let mean = Array1::from(array("whitening_mean", lh.input_dim)?);
            let projection = Array2::from_shape_vec(
                (lh.retained_dim, lh.input_dim),
                array("whitening_projection", lh.retained_dim * lh.input_dim)?,
            )
            .map_err(|e| Error::Format(e.to_string()))?;
            let eig_floor = array("whitening_eig_floor", 1)?[0];
            let whitening = WhiteningTransform { mean, projection, retained_dim: lh.retained_dim, eig_floor };
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("model too large".into()))?;
            let model = FrozenModel::decode(r.take(len)?)?;
            layers.push(LayerModel::new(model, whitening, lh.rf, lh.pooling, lh.contrast_normalize)?);
        }
        r.finish()?;
        Ok(Self { layers, combine_layers: header.combine_layers, provenance: header.provenance })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    combine_layers: bool,
    layers: Vec<LayerHeader>,
    provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    rf: ReceptiveField,
    pooling: PoolingSpec,
    contrast_normalize: bool,
    input_dim: usize,
    retained_dim: usize,
}
