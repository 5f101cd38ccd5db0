//! Configuration and the synth / train / extract / quantize commands.

pub mod artifacts;
pub mod kmeans;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::conv::{train_network, LayerConfig, NetworkConfig, NetworkModel};
use crate::error::{Error, Result};
use crate::inference::{run_inference, Hyperparameters, InferenceConfig, ObservationMatrix, UpdateMode};
use crate::patches::{fit_whitening, VideoTensor};
use artifacts::{read_matrix_csv, write_json, write_matrix_csv, write_trace_csv, FeatureFile};
use kmeans::{kmeans_fit, quantize, Codebook};
use synth::{synth_generate, synth_videos, SynthSpec, VideoSynthSpec};

/// Everything a command needs, read from one JSON file. Relative paths are
/// resolved against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed of every random stream in the run.
    pub seed: u64,
    /// Overrides the update form of every inference run when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub updates: Option<UpdateMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extract: Option<ExtractConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantize: Option<QuantizeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub output: PathBuf,
    #[serde(flatten)]
    pub kind: SynthKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthKind {
    /// X, true loadings and true sources as CSV.
    Matrix(SynthSpec),
    /// `VIDT1` clips of moving blobs.
    Video(VideoSynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub input: TrainInput,
    pub output: PathBuf,
    /// Network layout for video input.
    #[serde(default)]
    pub network: NetworkConfig,
    /// Settings for matrix input.
    #[serde(default)]
    pub matrix: MatrixTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrainInput {
    /// CSV observation matrix with a header row.
    Matrix { path: PathBuf },
    /// `VIDT1` files or directories of PGM/PPM frames.
    Videos { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixTrainConfig {
    pub hyperparameters: Hyperparameters,
    pub inference: InferenceConfig,
    /// PCA-whiten the matrix before inference.
    pub whiten: bool,
    pub variance_to_keep: f64,
}

impl Default for MatrixTrainConfig {
    fn default() -> Self {
        Self {
            hyperparameters: Hyperparameters::default(),
            inference: InferenceConfig::default(),
            whiten: false,
            variance_to_keep: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    /// Trained network container.
    pub model: PathBuf,
    pub videos: Vec<PathBuf>,
    pub output: PathBuf,
    /// Also write each feature file as CSV.
    #[serde(default)]
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    /// `FEAT1` feature files; one histogram is written per file.
    pub features: Vec<PathBuf>,
    pub output: PathBuf,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    /// Existing codebook CSV; when absent a codebook is fitted on all files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
}

fn default_codebook_size() -> usize {
    64
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub updates: Option<UpdateMode>,
    pub layers: Option<usize>,
}

/// A configuration problem with the JSON path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDiagnostic {
    pub path: String,
    pub message: String,
}

impl RunConfig {
    /// Parse JSON text, reporting the field path of any error.
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigDiagnostic> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigDiagnostic {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.updates {
            self.updates = Some(mode);
        }
        if let Some(layers) = o.layers {
            if !(1..=2).contains(&layers) {
                return Err(Error::Config(format!("--layers must be 1 or 2, got {layers}")));
            }
            if let Some(train) = &mut self.train {
                let net = &mut train.network.layers;
                net.truncate(layers);
                if net.len() < layers {
                    net.push(LayerConfig::second_layer());
                }
            }
        }
        if let Some(mode) = self.updates {
            if let Some(train) = &mut self.train {
                train.matrix.inference.updates = mode;
                for layer in &mut train.network.layers {
                    layer.inference.updates = mode;
                }
            }
        }
        Ok(())
    }

    /// Check the section a command needs.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        let missing = || Error::Config(format!("the config has no \"{}\" section", command.name()));
        match command {
            Command::Synth => match &self.synth.as_ref().ok_or_else(missing)?.kind {
                SynthKind::Matrix(spec) => spec.validate(),
                SynthKind::Video(spec) => spec.validate(),
            },
            Command::Train => {
                let train = self.train.as_ref().ok_or_else(missing)?;
                match &train.input {
                    TrainInput::Matrix { .. } => {
                        let m = &train.matrix;
                        m.hyperparameters.validate()?;
                        m.inference.validate()?;
                        if !(m.variance_to_keep > 0.0 && m.variance_to_keep <= 1.0) {
                            return Err(Error::Config("matrix.variance_to_keep must lie in (0, 1]".into()));
                        }
                        Ok(())
                    }
                    TrainInput::Videos { paths } => {
                        if paths.is_empty() {
                            return Err(Error::Config("train.input.paths is empty".into()));
                        }
                        train.network.validate()
                    }
                }
            }
            Command::Extract => {
                let e = self.extract.as_ref().ok_or_else(missing)?;
                if e.videos.is_empty() {
                    return Err(Error::Config("extract.videos is empty".into()));
                }
                Ok(())
            }
            Command::Quantize => {
                let q = self.quantize.as_ref().ok_or_else(missing)?;
                if q.features.is_empty() {
                    return Err(Error::Config("quantize.features is empty".into()));
                }
                if q.codebook_size == 0 {
                    return Err(Error::Config("quantize.codebook_size must be at least 1".into()));
                }
                Ok(())
            }
        }
    }

    fn provenance(&self, command: Command) -> serde_json::Value {
        json!({ "command": command.name(), "seed": self.seed, "run_config": self })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Extract,
    Quantize,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Extract => "extract",
            Command::Quantize => "quantize",
        }
    }
}

/// What a command produced, also written to the output manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

/// Run `command` with a validated configuration. `base` resolves relative
/// paths.
pub fn run_command(command: Command, config: &RunConfig, base: &Path) -> Result<Report> {
    config.validate_for(command)?;
    match command {
        Command::Synth => cmd_synth(config, base),
        Command::Train => cmd_train(config, base),
        Command::Extract => cmd_extract(config, base),
        Command::Quantize => cmd_quantize(config, base),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn output_dir(base: &Path, p: &Path) -> Result<PathBuf> {
    let dir = resolve(base, p);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn finish(config: &RunConfig, command: Command, dir: &Path, artifacts: Vec<String>, summary: serde_json::Value) -> Result<Report> {
    let report = Report { artifacts, summary };
    let mut manifest = config.provenance(command);
    manifest["artifacts"] = json!(report.artifacts);
    manifest["summary"] = report.summary.clone();
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(report)
}

/// Prefix I/O and CSV failures with the file they concern.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Csv(csv) => match csv.kind() {
            csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            _ => Error::Format(format!("{}: {csv}", path.display())),
        },
        other => other,
    })
}

/// Load a `VIDT1` file or a directory of frames.
pub fn load_video(path: &Path) -> Result<VideoTensor> {
    at(path, if path.is_dir() { VideoTensor::from_frame_dir(path) } else { VideoTensor::read(path) })
}

pub fn cmd_synth(config: &RunConfig, base: &Path) -> Result<Report> {
    let synth = config.synth.as_ref().expect("validated");
    let dir = output_dir(base, &synth.output)?;
    match &synth.kind {
        SynthKind::Matrix(spec) => {
            let data = synth_generate(spec, config.seed)?;
            write_matrix_csv(&dir.join("x.csv"), "x", &data.x.view().to_owned())?;
            write_matrix_csv(&dir.join("loadings.csv"), "g", &data.loadings)?;
            write_matrix_csv(&dir.join("sources.csv"), "y", &data.sources)?;
            let precision = data.noise_precision.is_finite().then_some(data.noise_precision);
            finish(
                config,
                Command::Synth,
                &dir,
                vec!["x.csv".into(), "loadings.csv".into(), "sources.csv".into()],
                json!({ "n": spec.n, "d": spec.d, "k_true": spec.k_true, "noise_precision": precision }),
            )
        }
        SynthKind::Video(spec) => {
            let videos = synth_videos(spec, config.seed)?;
            let mut names = Vec::with_capacity(videos.len());
            for (i, v) in videos.iter().enumerate() {
                let name = format!("video_{i:03}.vidt");
                v.write(&dir.join(&name))?;
                names.push(name);
            }
            finish(config, Command::Synth, &dir, names, json!({ "videos": videos.len(), "dims": [spec.h, spec.w, spec.t] }))
        }
    }
}

pub fn cmd_train(config: &RunConfig, base: &Path) -> Result<Report> {
    let train = config.train.as_ref().expect("validated");
    match &train.input {
        TrainInput::Matrix { path } => {
            let path = resolve(base, path);
            let raw = at(&path, read_matrix_csv(&path))?;
            let m = &train.matrix;
            let (x, whitening) = if m.whiten {
                let w = fit_whitening(raw.view(), m.variance_to_keep)?;
                (w.apply_rows(raw.view())?, Some(w))
            } else {
                (raw, None)
            };
            let x = ObservationMatrix::new(x)?;
            let inference = InferenceConfig { seed: config.seed, ..m.inference.clone() };
            let result = run_inference(&x, &m.hyperparameters, &inference)?;
            let dir = output_dir(base, &train.output)?;
            let model = result.state.freeze();
            fs::write(dir.join("model.ibpica"), model.encode()?)?;
            write_trace_csv(&dir.join("trace.csv"), &result.trace)?;
            let mut artifacts = vec!["model.ibpica".to_owned(), "trace.csv".to_owned()];
            let loadings = result.state.loadings.expected_matrix();
            write_matrix_csv(&dir.join("loadings.csv"), "g", &loadings)?;
            artifacts.push("loadings.csv".into());
            if let Some(w) = whitening {
                write_matrix_csv(&dir.join("loadings_unwhitened.csv"), "g", &w.unwhitening().dot(&loadings))?;
                artifacts.push("loadings_unwhitened.csv".into());
            }
            let k = result.state.active_feature_count();
            log::info!("inferred K = {k}");
            finish(
                config,
                Command::Train,
                &dir,
                artifacts,
                json!({
                    "inferred_k": k,
                    "columns": result.state.k(),
                    "iterations": result.trace.len(),
                    "converged": result.converged,
                    "final_elbo": result.trace.last().map_or(result.initial_elbo, |r| r.elbo),
                }),
            )
        }
        TrainInput::Videos { paths } => {
            let videos = paths.iter().map(|p| load_video(&resolve(base, p))).collect::<Result<Vec<_>>>()?;
            let mut trained = train_network(&videos, &train.network, config.seed)?;
            trained.network.provenance = config.provenance(Command::Train);
            let dir = output_dir(base, &train.output)?;
            trained.network.write(&dir.join("network.ibpnet"))?;
            let mut artifacts = vec!["network.ibpnet".to_owned()];
            let mut layers = Vec::new();
            for (i, result) in trained.results.iter().enumerate() {
                let name = format!("trace_layer{}.csv", i + 1);
                write_trace_csv(&dir.join(&name), &result.trace)?;
                artifacts.push(name);
                let layer = &trained.network.layers[i];
                layers.push(json!({
                    "inferred_k": result.state.active_feature_count(),
                    "columns": layer.feature_dim(),
                    "input_dim": layer.input_dim(),
                    "whitened_dim": layer.whitening.retained_dim,
                    "iterations": result.trace.len(),
                    "converged": result.converged,
                }));
            }
            finish(
                config,
                Command::Train,
                &dir,
                artifacts,
                json!({ "layers": layers, "output_dim": trained.network.output_dim() }),
            )
        }
    }
}

pub fn cmd_extract(config: &RunConfig, base: &Path) -> Result<Report> {
    let extract = config.extract.as_ref().expect("validated");
    let model_path = resolve(base, &extract.model);
    let network = at(&model_path, NetworkModel::read(&model_path))?;
    let dir = output_dir(base, &extract.output)?;
    let mut artifacts = Vec::new();
    let mut cells = Vec::new();
    for (i, path) in extract.videos.iter().enumerate() {
        let video = load_video(&resolve(base, path))?;
        let map = network.extract_features(&video)?;
        let mut provenance = config.provenance(Command::Extract);
        provenance["video"] = json!(path);
        let file = FeatureFile::from_map(&map, provenance);
        let stem = format!("features_{i:03}");
        file.write(&dir.join(format!("{stem}.feat")))?;
        artifacts.push(format!("{stem}.feat"));
        if extract.csv {
            file.write_csv(&dir.join(format!("{stem}.csv")))?;
            artifacts.push(format!("{stem}.csv"));
        }
        cells.push(map.cells());
    }
    finish(config, Command::Extract, &dir, artifacts, json!({ "dim": network.output_dim(), "cells": cells }))
}

pub fn cmd_quantize(config: &RunConfig, base: &Path) -> Result<Report> {
    let q = config.quantize.as_ref().expect("validated");
    let files = q.features.iter().map(|p| {
            let p = resolve(base, p);
            at(&p, FeatureFile::read(&p))
        }).collect::<Result<Vec<_>>>()?;
    let as_f64: Vec<Array2<f64>> = files.iter().map(|f| f.values.mapv(f64::from)).collect();
    let dir = output_dir(base, &q.output)?;
    let codebook = match &q.codebook {
        Some(path) => {
            let path = resolve(base, path);
            Codebook { centers: at(&path, read_matrix_csv(&path))? }
        }
        None => {
            let dim = as_f64.first().map_or(0, |m| m.ncols());
            if let Some(bad) = as_f64.iter().position(|m| m.ncols() != dim) {
                return Err(Error::DimensionMismatch { expected: dim, actual: as_f64[bad].ncols() });
            }
            let views: Vec<_> = as_f64.iter().map(|m| m.view()).collect();
            let all = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
            kmeans_fit(all.view(), q.codebook_size, config.seed)?.codebook
        }
    };
    write_matrix_csv(&dir.join("codebook.csv"), "c", &codebook.centers)?;
    let mut w = csv::Writer::from_path(dir.join("histograms.csv"))?;
    let mut header = vec!["file".to_owned()];
    header.extend((0..codebook.size()).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    for (path, m) in q.features.iter().zip(&as_f64) {
        let hist = quantize(&codebook, m.view())?;
        let mut record = vec![path.display().to_string()];
        record.extend(hist.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    finish(
        config,
        Command::Quantize,
        &dir,
        vec!["codebook.csv".into(), "histograms.csv".into()],
        json!({ "codebook_size": codebook.size(), "files": files.len() }),
    )
}
