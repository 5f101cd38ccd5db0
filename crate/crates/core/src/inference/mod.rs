//! IBP-ICA: sparse ICA with an Indian buffet process prior over the loading
//! activity, fitted by mean-field variational updates interleaved with a
//! local Metropolis-Hastings move that grows the feature set.

mod container;
mod elbo;
mod mh;
mod state;
mod updates;

pub use container::{FrozenModel, MODEL_MAGIC};
pub use elbo::ElboTerms;
pub use mh::{MhOutcome, MhProposal, ThetaTerms};
pub use state::{
    init_model, FeatureCountState, GlobalPrecisions, Hyperparameters, LoadingPosterior, ModelState,
    ObservationMatrix, SourcePosterior, StickState, UpdateMode, ACTIVE_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub max_iter: usize,
    /// Relative ELBO change below which the loop stops.
    pub tolerance: f64,
    pub k_init: usize,
    pub prune_threshold: f64,
    pub seed: u64,
    pub updates: UpdateMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tolerance: 1e-5,
            k_init: 5,
            prune_threshold: 1e-3,
            seed: 0,
            updates: UpdateMode::Exact,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_init == 0 {
            return Err(Error::Config("k_init must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance must be non-negative, got {}", self.tolerance)));
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return Err(Error::Config(format!("prune_threshold must lie in (0, 1), got {}", self.prune_threshold)));
        }
        Ok(())
    }
}

/// What happened during one pass of the inference loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub elbo: f64,
    /// Feature columns represented after the pass.
    pub k: usize,
    /// Columns with at least one active loading.
    pub active: usize,
    pub proposals: usize,
    pub accepted: usize,
    pub pruned: usize,
}

impl IterationRecord {
    /// True when neither an MH acceptance nor pruning changed K.
    pub fn is_fixed_structure(&self) -> bool {
        self.accepted == 0 && self.pruned == 0
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub state: ModelState,
    /// ELBO of the initial state.
    pub initial_elbo: f64,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

impl InferenceResult {
    pub fn elbo_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.elbo).collect()
    }

    pub fn k_trace(&self) -> Vec<usize> {
        self.trace.iter().map(|r| r.k).collect()
    }
}

/// Random stream of the MH move for dimension `d` in pass `iteration`.
pub fn mh_stream_id(iteration: usize, d: usize) -> u64 {
    ((iteration as u64 + 1) << 32) | d as u64
}

/// Run the hybrid variational loop: per pass, an MH move for every dimension,
/// then q(Z); q(y), ζ, q(ϖ), q(s⁻¹); q(λ), q(v), q(α), q(φ); q(G); then
/// pruning of dead columns.
pub fn run_inference(x: &ObservationMatrix, hp: &Hyperparameters, config: &InferenceConfig) -> Result<InferenceResult> {
    config.validate()?;
    let root = RngStream::new(config.seed, 0);
    let mut init_rng = root.split(0);
    let mut state = init_model(x, hp, config.k_init, config.updates, &mut init_rng)?;
    let initial_elbo = state.elbo(x);
    let mut trace = Vec::with_capacity(config.max_iter);
    let mut converged = false;
    let mut previous = initial_elbo;

    for it in 0..config.max_iter {
        let mut proposals = 0;
        let mut accepted = 0;
        for d in 0..state.d() {
            let mut rng = root.split(mh_stream_id(it, d));
            let outcome = state.mh_feature_step(x, d, &mut rng).map_err(|e| e.at_iteration(it))?;
            proposals += usize::from(outcome.count > 0);
            accepted += usize::from(outcome.accepted);
        }
        state.mean_field_cycle(x).map_err(|e| e.at_iteration(it))?;
        let pruned = prune_keeping_one(&mut state, config.prune_threshold)?;

        let elbo = state.elbo(x);
        if !elbo.is_finite() {
            return Err(Error::Numerical(format!("ELBO became {elbo}")).at_iteration(it));
        }
        let record = IterationRecord {
            iteration: it,
            elbo,
            k: state.k(),
            active: state.active_feature_count(),
            proposals,
            accepted,
            pruned,
        };
        log::debug!("iteration {it}: elbo {elbo:.6} k {} accepted {accepted} pruned {pruned}", record.k);
        trace.push(record);
        let change = (elbo - previous).abs() / previous.abs().max(f64::MIN_POSITIVE);
        previous = elbo;
        if record.is_fixed_structure() && change < config.tolerance {
            converged = true;
            break;
        }
    }

    Ok(InferenceResult { state, initial_elbo, trace, converged })
}

/// Prune, but when every column is dead keep the one with the largest activity.
fn prune_keeping_one(state: &mut ModelState, threshold: f64) -> Result<usize> {
    match state.prune_features(threshold) {
        Ok(removed) => Ok(removed),
        Err(Error::PruneAll { .. }) => {
            let best = (0..state.k())
                .max_by(|&a, &b| {
                    let ma = state.loadings.activity.column(a).fold(0.0f64, |m, v| m.max(*v));
                    let mb = state.loadings.activity.column(b).fold(0.0f64, |m, v| m.max(*v));
                    ma.total_cmp(&mb)
                })
                .unwrap_or(0);
            let removed = state.k() - 1;
            state.select_columns(&[best]);
            Ok(removed)
        }
        Err(e) => Err(e),
    }
}
