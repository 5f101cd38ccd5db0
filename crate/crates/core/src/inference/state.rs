use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, log_sum_exp, GammaParams, RngStream};

/// Activity above which a loading counts as "on" when counting K_d.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Gamma shape of the noise precision φ.
    pub noise_shape: f64,
    /// Gamma rate of the noise precision φ.
    pub noise_rate: f64,
    /// Gamma shape of the slab precisions λ_k.
    pub slab_shape: f64,
    /// Gamma rate of the slab precisions λ_k.
    pub slab_rate: f64,
    /// Gamma shape of the IBP concentration α.
    pub alpha_shape: f64,
    /// Gamma rate of the IBP concentration α.
    pub alpha_rate: f64,
    /// Gamma shape of the source inverse variances s_kj⁻¹.
    pub scale_shape: f64,
    /// Gamma rate of the source inverse variances s_kj⁻¹.
    pub scale_rate: f64,
    /// Dirichlet concentration per source-mixture component; its length is J.
    pub dirichlet: Vec<f64>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::with_components(2)
    }
}

impl Hyperparameters {
    /// Unit Gamma hyperparameters and ξ_j = 1/J.
    pub fn with_components(components: usize) -> Self {
        let j = components.max(1);
        Self {
            noise_shape: 1.0,
            noise_rate: 1.0,
            slab_shape: 1.0,
            slab_rate: 1.0,
            alpha_shape: 1.0,
            alpha_rate: 1.0,
            scale_shape: 1.0,
            scale_rate: 1.0,
            dirichlet: vec![1.0 / j as f64; j],
        }
    }

    pub fn components(&self) -> usize {
        self.dirichlet.len()
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("noise_shape", self.noise_shape),
            ("noise_rate", self.noise_rate),
            ("slab_shape", self.slab_shape),
            ("slab_rate", self.slab_rate),
            ("alpha_shape", self.alpha_shape),
            ("alpha_rate", self.alpha_rate),
            ("scale_shape", self.scale_shape),
            ("scale_rate", self.scale_rate),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        if self.dirichlet.is_empty() {
            return Err(Error::Config("at least one source-mixture component is required".into()));
        }
        if let Some(v) = self.dirichlet.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("dirichlet concentrations must be positive, got {v}")));
        }
        Ok(())
    }

    pub(crate) fn slab_prior(&self) -> GammaParams {
        GammaParams { shape: self.slab_shape, rate: self.slab_rate }
    }

    pub(crate) fn noise_prior(&self) -> GammaParams {
        GammaParams { shape: self.noise_shape, rate: self.noise_rate }
    }

    pub(crate) fn alpha_prior(&self) -> GammaParams {
        GammaParams { shape: self.alpha_shape, rate: self.alpha_rate }
    }

    pub(crate) fn scale_prior(&self) -> GammaParams {
        GammaParams { shape: self.scale_shape, rate: self.scale_rate }
    }

    /// Starting rates of q(s_kj⁻¹), spread geometrically over [η2/2, 2η2]
    /// across the components. Identical components are a fixed point of the
    /// updates, so the spread is what lets the mixture separate.
    pub fn initial_scale_rates(&self) -> Vec<f64> {
        let j = self.components();
        if j == 1 {
            return vec![self.scale_rate];
        }
        (0..j)
            .map(|jj| self.scale_rate * 4f64.powf(jj as f64 / (j - 1) as f64 - 0.5))
            .collect()
    }
}

/// Which form of the closed-form updates to apply.
///
/// `Exact` runs true coordinate ascent on the evidence lower bound, so every
/// update is non-decreasing in the ELBO. `AsPrinted` applies the literal
/// closed forms: the three-term activity logit, the raw projection for
/// source means, the un-halved plug-in rates for q(λ) and q(φ), a single
/// multinomial weight vector in the stick updates and K − 1 in q(α).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    #[default]
    Exact,
    AsPrinted,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(UpdateMode::Exact),
            "as-printed" => Ok(UpdateMode::AsPrinted),
            other => Err(Error::Config(format!("unknown update mode {other:?}, expected exact|as-printed"))),
        }
    }
}

/// N×D matrix of (whitened) observations, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    data: Array2<f64>,
}

impl ObservationMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Config(format!(
                "observation matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(((n, d), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("observation ({n}, {d}) is not finite")));
        }
        Ok(Self { data })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Spike-and-slab posterior over the loading matrix G and activity matrix Z.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingPosterior {
    /// D×K, q(z_dk = 1).
    pub activity: Array2<f64>,
    /// D×K slab means.
    pub mean: Array2<f64>,
    /// Length-K slab precisions, shared across rows.
    pub precision: Array1<f64>,
}

impl LoadingPosterior {
    pub fn k(&self) -> usize {
        self.precision.len()
    }

    #[inline]
    pub fn expected(&self, d: usize, k: usize) -> f64 {
        self.activity[[d, k]] * self.mean[[d, k]]
    }

    #[inline]
    pub fn second_moment(&self, d: usize, k: usize) -> f64 {
        let m = self.mean[[d, k]];
        self.activity[[d, k]] * (m * m + 1.0 / self.precision[k])
    }

    /// D×K matrix of E[g_dk].
    pub fn expected_matrix(&self) -> Array2<f64> {
        &self.activity * &self.mean
    }

    /// Length-K vector Σ_d E[g_dk²].
    pub fn column_second_moments(&self) -> Array1<f64> {
        let (d, k) = self.activity.dim();
        Array1::from_shape_fn(k, |kk| (0..d).map(|dd| self.second_moment(dd, kk)).sum())
    }
}

/// Factorised Gaussian posteriors over the latent sources y_nk together with
/// their mixture-of-Gaussians prior posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePosterior {
    /// N×K means.
    pub mean: Array2<f64>,
    /// N×K variances.
    pub variance: Array2<f64>,
    /// N×K×J component responsibilities.
    pub responsibilities: Array3<f64>,
    /// K×J Dirichlet parameters of q(ϖ_k).
    pub mixture_weights: Array2<f64>,
    /// K×J Gamma shapes of q(s_kj⁻¹).
    pub scale_shape: Array2<f64>,
    /// K×J Gamma rates of q(s_kj⁻¹).
    pub scale_rate: Array2<f64>,
}

impl SourcePosterior {
    #[inline]
    pub fn second_moment(&self, n: usize, k: usize) -> f64 {
        let m = self.mean[[n, k]];
        m * m + self.variance[[n, k]]
    }

    /// K×J matrix of E[s_kj⁻¹].
    pub fn expected_inverse_scales(&self) -> Array2<f64> {
        &self.scale_shape / &self.scale_rate
    }

    /// K×J matrix of E[ln s_kj⁻¹].
    pub fn expected_log_inverse_scales(&self) -> Array2<f64> {
        let mut out = self.scale_shape.mapv(digamma_unchecked);
        out -= &self.scale_rate.mapv(f64::ln);
        out
    }

    /// K×J matrix of E[ln ϖ_kj].
    pub fn expected_log_weights(&self) -> Array2<f64> {
        let mut out = self.mixture_weights.mapv(digamma_unchecked);
        for (mut row, w) in out.outer_iter_mut().zip(self.mixture_weights.outer_iter()) {
            let total = digamma_unchecked(w.sum());
            row -= total;
        }
        out
    }

    /// K×J responsibilities averaged over samples.
    pub fn mean_responsibilities(&self) -> Array2<f64> {
        let n = self.responsibilities.len_of(Axis(0));
        if n == 0 {
            let (k, j) = self.mixture_weights.dim();
            return Array2::from_elem((k, j), 1.0 / j as f64);
        }
        self.responsibilities.mean_axis(Axis(0)).expect("non-empty")
    }
}

/// Beta posteriors over the stick variables and the Gamma posterior over α.
#[derive(Debug, Clone, PartialEq)]
pub struct StickState {
    pub tau_tilde: Array1<f64>,
    pub tau_hat: Array1<f64>,
    /// Multinomial weights q_k over 1..K used by the bound on E[ln(1 − π_k)].
    pub q_weights: Array1<f64>,
    pub alpha: GammaParams,
}

impl StickState {
    /// Unnormalised log multinomial weights
    /// a_i = ψ(τ̂_i) + Σ_{m<i} ψ(τ̃_m) − Σ_{m≤i} ψ(τ̃_m + τ̂_m).
    pub fn log_bound_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.tau_tilde.len());
        let mut prefix = 0.0;
        for (&tt, &th) in self.tau_tilde.iter().zip(self.tau_hat.iter()) {
            let total = digamma_unchecked(tt + th);
            out.push(prefix + digamma_unchecked(th) - total);
            prefix += digamma_unchecked(tt) - total;
        }
        out
    }

    /// Recompute q_k from the current τ.
    pub fn refresh_weights(&mut self) {
        let a = self.log_bound_weights();
        let norm = log_sum_exp(&a);
        self.q_weights = a.iter().map(|v| (v - norm).exp()).collect();
    }

    pub(crate) fn summary(&self) -> StickSummary {
        let k = self.tau_tilde.len();
        let mut e_log_v = Vec::with_capacity(k);
        for (&tt, &th) in self.tau_tilde.iter().zip(self.tau_hat.iter()) {
            e_log_v.push(digamma_unchecked(tt) - digamma_unchecked(tt + th));
        }
        let mut e_log_pi = Vec::with_capacity(k);
        let mut acc = 0.0;
        for v in &e_log_v {
            acc += v;
            e_log_pi.push(acc);
        }
        let a = self.log_bound_weights();
        let mut bound = Vec::with_capacity(k);
        for kk in 0..k {
            bound.push(log_sum_exp(&a[..=kk]));
        }
        StickSummary { e_log_v, e_log_pi, log_weights: a, bound }
    }

    /// E[π_k] = Π_{i≤k} E[v_i] under the factorised posterior.
    pub fn expected_pi(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.tau_tilde
            .iter()
            .zip(self.tau_hat.iter())
            .map(|(&tt, &th)| {
                acc *= tt / (tt + th);
                acc
            })
            .collect()
    }
}

/// Derived stick expectations, cached for one update pass.
#[derive(Debug, Clone)]
pub(crate) struct StickSummary {
    pub e_log_v: Vec<f64>,
    /// E[ln π_k] = Σ_{i≤k} E[ln v_i].
    pub e_log_pi: Vec<f64>,
    pub log_weights: Vec<f64>,
    /// Optimised multinomial lower bound on E[ln(1 − π_k)].
    pub bound: Vec<f64>,
}

/// Posteriors over the slab precisions λ_k and the noise precision φ.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrecisions {
    pub lambda: Vec<GammaParams>,
    pub phi: GammaParams,
}

/// Per-dimension count of active features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCountState {
    pub per_dim_active: Vec<usize>,
    /// max_d K_d.
    pub k: usize,
}

/// The full variational state of one IBP-ICA model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hp: Hyperparameters,
    pub mode: UpdateMode,
    pub loadings: LoadingPosterior,
    pub sources: SourcePosterior,
    pub sticks: StickState,
    pub precisions: GlobalPrecisions,
}

/// Build an initial state.
///
/// Loading slab means are drawn from N(0, f/c), activities are set to the
/// prior stick expectation E[π_k] and every other factor sits at its prior.
/// The source means and variances then receive one closed-form update so the
/// first activity update sees data-informed sources.
pub fn init_model(
    x: &ObservationMatrix,
    hp: &Hyperparameters,
    k_init: usize,
    mode: UpdateMode,
    rng: &mut RngStream,
) -> Result<ModelState> {
    hp.validate()?;
    if k_init == 0 {
        return Err(Error::Config("initial feature count must be at least 1".into()));
    }
    let (n, d) = (x.n(), x.d());
    let k = k_init;
    let j = hp.components();

    let sd = (hp.slab_rate / hp.slab_shape).sqrt();
    let mut mean = Array2::zeros((d, k));
    // Column-major draw order keeps a column's values stable when K changes.
    for kk in 0..k {
        for dd in 0..d {
            mean[[dd, kk]] = sd * rng.standard_normal();
        }
    }

    let alpha = hp.alpha_prior();
    let mut sticks = StickState {
        tau_tilde: Array1::from_elem(k, alpha.mean()),
        tau_hat: Array1::ones(k),
        q_weights: Array1::zeros(k),
        alpha,
    };
    sticks.refresh_weights();
    let pi = sticks.expected_pi();
    let activity = Array2::from_shape_fn((d, k), |(_, kk)| pi[kk]);

    let slab = hp.slab_prior();
    let loadings = LoadingPosterior {
        activity,
        mean,
        precision: Array1::from_elem(k, slab.mean()),
    };

    let scale = hp.scale_prior();
    let scale_rates = hp.initial_scale_rates();
    let prior_variance = scale.rate / scale.shape;
    let sources = SourcePosterior {
        mean: Array2::zeros((n, k)),
        variance: Array2::from_elem((n, k), prior_variance),
        responsibilities: Array3::from_elem((n, k, j), 1.0 / j as f64),
        mixture_weights: Array2::from_shape_fn((k, j), |(_, jj)| hp.dirichlet[jj]),
        scale_shape: Array2::from_elem((k, j), scale.shape),
        scale_rate: Array2::from_shape_fn((k, j), |(_, jj)| scale_rates[jj]),
    };

    let mut state = ModelState {
        hp: hp.clone(),
        mode,
        loadings,
        sources,
        sticks,
        precisions: GlobalPrecisions { lambda: vec![slab; k], phi: hp.noise_prior() },
    };
    state.update_sources(x);
    Ok(state)
}

impl ModelState {
    pub fn k(&self) -> usize {
        self.loadings.k()
    }

    pub fn d(&self) -> usize {
        self.loadings.activity.nrows()
    }

    pub fn n(&self) -> usize {
        self.sources.mean.nrows()
    }

    pub fn j(&self) -> usize {
        self.sources.mixture_weights.ncols()
    }

    #[inline]
    pub fn e_phi(&self) -> f64 {
        self.precisions.phi.mean()
    }

    pub fn e_alpha(&self) -> f64 {
        self.sticks.alpha.mean()
    }

    /// K_d for every dimension and K = max_d K_d.
    pub fn feature_counts(&self) -> FeatureCountState {
        let per_dim_active: Vec<usize> = self
            .loadings
            .activity
            .outer_iter()
            .map(|row| row.iter().filter(|&&a| a > ACTIVE_THRESHOLD).count())
            .collect();
        let k = per_dim_active.iter().copied().max().unwrap_or(0);
        FeatureCountState { per_dim_active, k }
    }

    /// Number of columns with at least one active loading.
    pub fn active_feature_count(&self) -> usize {
        self.loadings
            .activity
            .axis_iter(Axis(1))
            .filter(|col| col.iter().any(|&a| a > ACTIVE_THRESHOLD))
            .count()
    }

    /// N×D matrix X − E[Y] E[G]ᵀ.
    pub(crate) fn mean_residual(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let eg = self.loadings.expected_matrix();
        &x - &self.sources.mean.dot(&eg.t())
    }

    /// Σ_n E‖x_n − G y_n‖² including loading and source variances.
    pub fn expected_sq_residual(&self, x: &ObservationMatrix) -> f64 {
        let r = self.mean_residual(x.view());
        let mut total: f64 = r.iter().map(|v| v * v).sum();
        let (d, k) = self.loadings.activity.dim();
        let n = self.n();
        for kk in 0..k {
            let mut g2 = 0.0;
            let mut eg_sq = 0.0;
            for dd in 0..d {
                g2 += self.loadings.second_moment(dd, kk);
                eg_sq += self.loadings.expected(dd, kk).powi(2);
            }
            let mut y2 = 0.0;
            let mut ey_sq = 0.0;
            for nn in 0..n {
                y2 += self.sources.second_moment(nn, kk);
                ey_sq += self.sources.mean[[nn, kk]].powi(2);
            }
            total += g2 * y2 - eg_sq * ey_sq;
        }
        total
    }

    /// Check every type invariant; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let (d, k) = self.loadings.activity.dim();
        let (n, j) = (self.n(), self.j());
        let shapes_ok = self.loadings.mean.dim() == (d, k)
            && self.loadings.precision.len() == k
            && self.sources.mean.dim() == (n, k)
            && self.sources.variance.dim() == (n, k)
            && self.sources.responsibilities.dim() == (n, k, j)
            && self.sources.mixture_weights.dim() == (k, j)
            && self.sources.scale_shape.dim() == (k, j)
            && self.sources.scale_rate.dim() == (k, j)
            && self.sticks.tau_tilde.len() == k
            && self.sticks.tau_hat.len() == k
            && self.sticks.q_weights.len() == k
            && self.precisions.lambda.len() == k;
        if !shapes_ok {
            return Err("inconsistent array shapes".into());
        }
        if self.loadings.activity.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err("activity outside [0, 1]".into());
        }
        if self.loadings.precision.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err("non-positive slab precision".into());
        }
        if self.loadings.mean.iter().any(|m| !m.is_finite()) {
            return Err("non-finite slab mean".into());
        }
        if self.sources.variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err("non-positive source variance".into());
        }
        if self.sources.mean.iter().any(|m| !m.is_finite()) {
            return Err("non-finite source mean".into());
        }
        for nn in 0..n {
            for kk in 0..k {
                let row = self.sources.responsibilities.slice(s![nn, kk, ..]);
                if row.iter().any(|z| *z < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
                    return Err(format!("responsibilities ({nn}, {kk}) not on the simplex"));
                }
            }
        }
        let positive = |a: &Array2<f64>| a.iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive(&self.sources.mixture_weights)
            || !positive(&self.sources.scale_shape)
            || !positive(&self.sources.scale_rate)
        {
            return Err("non-positive mixture or scale parameter".into());
        }
        let taus = self.sticks.tau_tilde.iter().chain(self.sticks.tau_hat.iter());
        if taus.clone().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err("non-positive stick parameter".into());
        }
        if k > 0 && (self.sticks.q_weights.sum() - 1.0).abs() > 1e-12 {
            return Err("stick weights do not sum to one".into());
        }
        if self.sticks.q_weights.iter().any(|q| *q < 0.0) {
            return Err("negative stick weight".into());
        }
        if !self.sticks.alpha.is_valid()
            || !self.precisions.phi.is_valid()
            || self.precisions.lambda.iter().any(|l| !l.is_valid())
        {
            return Err("invalid Gamma posterior".into());
        }
        Ok(())
    }

    /// Keep only the listed feature columns, in the given order.
    pub(crate) fn select_columns(&mut self, keep: &[usize]) {
        let l = &mut self.loadings;
        l.activity = l.activity.select(Axis(1), keep);
        l.mean = l.mean.select(Axis(1), keep);
        l.precision = l.precision.select(Axis(0), keep);
        let src = &mut self.sources;
        src.mean = src.mean.select(Axis(1), keep);
        src.variance = src.variance.select(Axis(1), keep);
        src.responsibilities = src.responsibilities.select(Axis(1), keep);
        src.mixture_weights = src.mixture_weights.select(Axis(0), keep);
        src.scale_shape = src.scale_shape.select(Axis(0), keep);
        src.scale_rate = src.scale_rate.select(Axis(0), keep);
        self.sticks.tau_tilde = self.sticks.tau_tilde.select(Axis(0), keep);
        self.sticks.tau_hat = self.sticks.tau_hat.select(Axis(0), keep);
        self.sticks.refresh_weights();
        self.precisions.lambda = keep.iter().map(|&k| self.precisions.lambda[k]).collect();
    }

    /// Remove columns whose largest activity is below `threshold`.
    ///
    /// Returns the number of removed columns. Refuses (leaving the state
    /// untouched) when every column would be removed.
    pub fn prune_features(&mut self, threshold: f64) -> Result<usize> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("prune threshold must lie in (0, 1), got {threshold}")));
        }
        let keep: Vec<usize> = self
            .loadings
            .activity
            .axis_iter(Axis(1))
            .enumerate()
            .filter(|(_, col)| col.iter().copied().fold(0.0, f64::max) >= threshold)
            .map(|(k, _)| k)
            .collect();
        if keep.is_empty() {
            return Err(Error::PruneAll { threshold, columns: self.k() });
        }
        let removed = self.k() - keep.len();
        if removed > 0 {
            self.select_columns(&keep);
        }
        Ok(removed)
    }

    /// Apply the same column permutation to every per-feature structure.
    pub fn permute_features(&mut self, order: &[usize]) {
        assert_eq!(order.len(), self.k(), "permutation length must equal K");
        self.select_columns(order);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_data() -> ObservationMatrix {
        ObservationMatrix::new(array![[1.0, -0.5, 0.3], [0.2, 0.4, -1.0], [0.0, 1.2, 0.7], [-0.8, 0.1, 0.5]]).unwrap()
    }

    #[test]
    fn observation_matrix_validation() {
        assert!(ObservationMatrix::new(Array2::zeros((0, 3))).is_err());
        assert!(ObservationMatrix::new(array![[1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn single_feature_shapes() {
        let x = toy_data();
        let s = init_model(&x, &Hyperparameters::default(), 1, UpdateMode::Exact, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(s.k(), 1);
        assert_eq!(s.loadings.precision.len(), 1);
        assert_eq!(s.sticks.tau_tilde.len(), 1);
        assert_eq!(s.sources.mixture_weights.dim(), (1, 2));
        assert_eq!(s.sources.mean.dim(), (4, 1));
        s.check_invariants().unwrap();
    }

    #[test]
    fn init_holds_priors() {
        let x = toy_data();
        let hp = Hyperparameters { scale_shape: 2.5, dirichlet: vec![0.3, 0.7], ..Default::default() };
        let s = init_model(&x, &hp, 3, UpdateMode::Exact, &mut RngStream::new(3, 0)).unwrap();
        for kk in 0..3 {
            assert_eq!(s.sources.mixture_weights[[kk, 0]], 0.3);
            assert_eq!(s.sources.mixture_weights[[kk, 1]], 0.7);
            assert_eq!(s.sources.scale_shape[[kk, 0]], 2.5);
        }
        let pi = s.sticks.expected_pi();
        assert!((pi[0] - 0.5).abs() < 1e-15 && (pi[2] - 0.125).abs() < 1e-15);
        assert_eq!(s.loadings.activity[[1, 2]], pi[2]);
    }

    #[test]
    fn init_is_deterministic() {
        let x = toy_data();
        let hp = Hyperparameters::default();
        let a = init_model(&x, &hp, 4, UpdateMode::Exact, &mut RngStream::new(11, 0)).unwrap();
        let b = init_model(&x, &hp, 4, UpdateMode::Exact, &mut RngStream::new(11, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_zero_features() {
        let err = init_model(&toy_data(), &Hyperparameters::default(), 0, UpdateMode::Exact, &mut RngStream::new(0, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn prune_paths() {
        let x = toy_data();
        let mut s = init_model(&x, &Hyperparameters::default(), 3, UpdateMode::Exact, &mut RngStream::new(1, 0)).unwrap();
        let before = s.clone();
        assert_eq!(s.prune_features(1e-3).unwrap(), 0);
        assert_eq!(s, before);

        s.loadings.activity.column_mut(1).fill(0.0);
        assert_eq!(s.prune_features(1e-3).unwrap(), 1);
        assert_eq!(s.k(), 2);
        s.check_invariants().unwrap();

        let snapshot = s.clone();
        let err = s.prune_features(1.0 - 1e-12);
        assert!(matches!(err, Err(Error::PruneAll { .. })));
        assert_eq!(s, snapshot);
        assert!(s.prune_features(0.0).is_err());
    }

    #[test]
    fn feature_counts_use_half_threshold() {
        let x = toy_data();
        let mut s = init_model(&x, &Hyperparameters::default(), 3, UpdateMode::Exact, &mut RngStream::new(1, 0)).unwrap();
        s.loadings.activity = array![[0.9, 0.6, 0.1], [0.2, 0.51, 0.5], [0.0, 0.0, 0.0]];
        let fc = s.feature_counts();
        assert_eq!(fc.per_dim_active, vec![2, 1, 0]);
        assert_eq!(fc.k, 2);
        assert_eq!(s.active_feature_count(), 2);
    }

    #[test]
    fn update_mode_parsing() {
        assert_eq!("exact".parse::<UpdateMode>().unwrap(), UpdateMode::Exact);
        assert_eq!("as-printed".parse::<UpdateMode>().unwrap(), UpdateMode::AsPrinted);
        assert!("literal".parse::<UpdateMode>().is_err());
    }
}
