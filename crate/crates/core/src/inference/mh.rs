//! Local Metropolis-Hastings move that proposes new features for one input
//! dimension.

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array1, Array2, Array3, Axis};

use super::state::{ModelState, ObservationMatrix, ACTIVE_THRESHOLD};
use crate::error::{Error, Result};
use crate::special::{sample_poisson, RngStream};

/// Upper bound on the number of columns proposed in a single move.
pub const MAX_PROPOSED_FEATURES: u64 = 1000;

/// Collapsed-likelihood weight of one set of loadings on dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaTerms {
    /// M = E[φ] E[gᵀg] + I.
    pub precision: DMatrix<f64>,
    /// N×K rows m_n = E[φ] M⁻¹ gᵀ r_n.
    pub means: Array2<f64>,
    /// ln θ = −N/2 ln|M| + ½ Σ_n m_nᵀ M m_n.
    pub log_theta: f64,
}

/// A proposal of `count` new features for dimension `dimension`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhProposal {
    pub dimension: usize,
    pub count: usize,
    /// Row G*_{d,:} drawn from the slab prior.
    pub loadings_star: Vec<f64>,
    pub proposed: ThetaTerms,
    /// Columns active (activity > 0.5) at `dimension` before the move.
    pub active: Vec<usize>,
    pub current: ThetaTerms,
}

impl MhProposal {
    pub fn log_ratio(&self) -> f64 {
        self.proposed.log_theta - self.current.log_theta
    }

    /// min{1, θ*/θ}.
    pub fn acceptance_probability(&self) -> f64 {
        self.log_ratio().min(0.0).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhOutcome {
    pub accepted: bool,
    pub count: usize,
}

/// ln θ for loadings with second-moment matrix `second` and mean `mean` on a
/// dimension whose residuals are `resid`.
pub(crate) fn theta_terms(e_phi: f64, second: &DMatrix<f64>, mean: &DVector<f64>, resid: &[f64]) -> Result<ThetaTerms> {
    let k = mean.len();
    let precision = second * e_phi + DMatrix::identity(k, k);
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("{k}x{k} proposal precision is not positive definite")))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let direction = chol.solve(&(mean * e_phi));
    let mut means = Array2::zeros((resid.len(), k));
    let mut quad = 0.0;
    for (n, &r) in resid.iter().enumerate() {
        let m = &direction * r;
        quad += m.dot(&(&precision * &m));
        for kk in 0..k {
            means[[n, kk]] = m[kk];
        }
    }
    Ok(ThetaTerms {
        precision,
        means,
        log_theta: -0.5 * resid.len() as f64 * log_det + 0.5 * quad,
    })
}

impl ModelState {
    /// Residuals x_nd − E[G_{d,:} y_n] for one dimension.
    pub(crate) fn dimension_residual(&self, x: &ObservationMatrix, d: usize) -> Vec<f64> {
        let x = x.view();
        let k = self.k();
        (0..self.n())
            .map(|n| x[[n, d]] - (0..k).map(|kk| self.loadings.expected(d, kk) * self.sources.mean[[n, kk]]).sum::<f64>())
            .collect()
    }

    /// Evaluate θ*_d and θ_d for the given proposed loadings row.
    pub fn propose_features(&self, x: &ObservationMatrix, d: usize, loadings_star: &[f64]) -> Result<MhProposal> {
        if d >= self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), actual: d });
        }
        let e_phi = self.e_phi();
        let resid = self.dimension_residual(x, d);

        let g_star = DVector::from_column_slice(loadings_star);
        let proposed = theta_terms(e_phi, &(&g_star * g_star.transpose()), &g_star, &resid)?;

        let active: Vec<usize> =
            (0..self.k()).filter(|&kk| self.loadings.activity[[d, kk]] > ACTIVE_THRESHOLD).collect();
        let mean = DVector::from_iterator(active.len(), active.iter().map(|&kk| self.loadings.expected(d, kk)));
        let mut second = &mean * mean.transpose();
        for (i, &kk) in active.iter().enumerate() {
            second[(i, i)] = self.loadings.second_moment(d, kk);
        }
        let current = theta_terms(e_phi, &second, &mean, &resid)?;

        Ok(MhProposal {
            dimension: d,
            count: loadings_star.len(),
            loadings_star: loadings_star.to_vec(),
            proposed,
            active,
            current,
        })
    }

    /// Poisson rate E[α]/(D − 1) of the number of proposed features.
    pub fn proposal_rate(&self) -> f64 {
        let d = self.d();
        let denom = if d > 1 { (d - 1) as f64 } else { 1.0 };
        self.e_alpha() / denom
    }

    /// One MH move for dimension `d`. The state is unchanged unless the
    /// proposal is accepted.
    pub fn mh_feature_step(&mut self, x: &ObservationMatrix, d: usize, rng: &mut RngStream) -> Result<MhOutcome> {
        let count = sample_poisson(self.proposal_rate(), rng)?;
        if count > MAX_PROPOSED_FEATURES {
            return Err(Error::Numerical(format!(
                "MH proposal of {count} features exceeds {MAX_PROPOSED_FEATURES}; E[alpha] = {}",
                self.e_alpha()
            )));
        }
        let count = count as usize;
        if count == 0 {
            return Ok(MhOutcome { accepted: false, count: 0 });
        }
        let sd = (self.hp.slab_rate / self.hp.slab_shape).sqrt();
        let g_star: Vec<f64> = (0..count).map(|_| sd * rng.standard_normal()).collect();
        let proposal = self.propose_features(x, d, &g_star)?;
        let u = rng.uniform();
        let accepted = u.ln() < proposal.log_ratio();
        if accepted {
            self.append_features(&proposal)?;
        }
        Ok(MhOutcome { accepted, count })
    }

    /// Append the proposed columns.
    ///
    /// Row d takes the sampled loadings with activity 1; other rows start
    /// at the spike with the prior stick expectation as activity. The new
    /// sources start at the proposal posterior N(m*_n, diag M*⁻¹).
    pub fn append_features(&mut self, proposal: &MhProposal) -> Result<()> {
        let (n, d, j) = (self.n(), self.d(), self.j());
        let new = proposal.count;
        let hp = self.hp.clone();
        let slab = hp.slab_prior();
        let scale = hp.scale_prior();

        let cov = proposal
            .proposed
            .precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("proposal precision is not positive definite".into()))?
            .inverse();

        let e_alpha = self.e_alpha();
        let st = &mut self.sticks;
        st.tau_tilde = concatenate![Axis(0), st.tau_tilde, Array1::from_elem(new, e_alpha)];
        st.tau_hat = concatenate![Axis(0), st.tau_hat, Array1::ones(new)];
        st.refresh_weights();
        let pi = st.expected_pi();
        let k_old = self.k();

        let mut activity = Array2::from_shape_fn((d, new), |(_, c)| pi[k_old + c]);
        activity.row_mut(proposal.dimension).fill(1.0);
        let mut mean = Array2::zeros((d, new));
        for (c, &g) in proposal.loadings_star.iter().enumerate() {
            mean[[proposal.dimension, c]] = g;
        }
        let l = &mut self.loadings;
        l.activity = concatenate![Axis(1), l.activity, activity];
        l.mean = concatenate![Axis(1), l.mean, mean];
        l.precision = concatenate![Axis(0), l.precision, Array1::from_elem(new, slab.mean())];

        let variance = Array2::from_shape_fn((n, new), |(_, c)| cov[(c, c)]);
        let s = &mut self.sources;
        s.mean = concatenate![Axis(1), s.mean, proposal.proposed.means];
        s.variance = concatenate![Axis(1), s.variance, variance];
        s.responsibilities = concatenate![Axis(1), s.responsibilities, Array3::from_elem((n, new, j), 1.0 / j as f64)];
        s.mixture_weights = concatenate![
            Axis(0),
            s.mixture_weights,
            Array2::from_shape_fn((new, j), |(_, jj)| hp.dirichlet[jj])
        ];
        s.scale_shape = concatenate![Axis(0), s.scale_shape, Array2::from_elem((new, j), scale.shape)];
        let rates = hp.initial_scale_rates();
        s.scale_rate = concatenate![Axis(0), s.scale_rate, Array2::from_shape_fn((new, j), |(_, jj)| rates[jj])];

        self.precisions.lambda.extend(std::iter::repeat_n(slab, new));
        Ok(())
    }
}
