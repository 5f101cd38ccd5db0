//! Evidence lower bound, split by factor so tests can check individual terms.

use super::state::{ModelState, ObservationMatrix};
use crate::special::{dirichlet_entropy, dirichlet_expected_log_density, xlogx, BetaParams, GammaParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// ELBO contributions. Each field is E_q[ln p(·)] − E_q[ln q(·)] for the
/// factors named.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    /// Gaussian likelihood of X.
    pub likelihood: f64,
    /// Slab density of active loadings plus the slab entropies.
    pub slab: f64,
    /// Bernoulli(π_k) activity prior under the multinomial bound, plus the
    /// entropy of q(Z).
    pub activity: f64,
    /// Beta(α, 1) stick prior plus the Beta entropies.
    pub sticks: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub phi: f64,
    /// Mixture-of-Gaussians source density plus the Gaussian entropies of q(y).
    pub sources: f64,
    /// Component assignment prior plus the entropy of ζ.
    pub assignments: f64,
    pub weights: f64,
    pub scales: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.slab
            + self.activity
            + self.sticks
            + self.alpha
            + self.lambda
            + self.phi
            + self.sources
            + self.assignments
            + self.weights
            + self.scales
    }
}

impl ModelState {
    pub fn elbo(&self, x: &ObservationMatrix) -> f64 {
        self.elbo_terms(x).total()
    }

    pub fn elbo_terms(&self, x: &ObservationMatrix) -> ElboTerms {
        let (n, d, k, j) = (self.n(), self.d(), self.k(), self.j());
        let hp = &self.hp;
        let phi = self.precisions.phi;
        let mut t = ElboTerms {
            likelihood: 0.5 * (n * d) as f64 * (phi.mean_log() - LN_2PI)
                - 0.5 * phi.mean() * self.expected_sq_residual(x),
            ..Default::default()
        };

        let sticks = self.sticks.summary();
        let e_alpha = self.sticks.alpha.mean();
        let e_log_alpha = self.sticks.alpha.mean_log();
        for kk in 0..k {
            let lam = self.precisions.lambda[kk];
            let (e_lam, e_log_lam) = (lam.mean(), lam.mean_log());
            let prec = self.loadings.precision[kk];
            for dd in 0..d {
                let rho = self.loadings.activity[[dd, kk]];
                let mu = self.loadings.mean[[dd, kk]];
                let slab_sq = mu * mu + 1.0 / prec;
                let slab_density = 0.5 * (e_log_lam - LN_2PI) - 0.5 * e_lam * slab_sq;
                let slab_entropy = 0.5 * (1.0 + LN_2PI - prec.ln());
                if rho > 0.0 {
                    t.slab += rho * (slab_density + slab_entropy);
                }
                t.activity += rho * sticks.e_log_pi[kk] + (1.0 - rho) * sticks.bound[kk] - xlogx(rho) - xlogx(1.0 - rho);
            }

            t.sticks += e_log_alpha + (e_alpha - 1.0) * sticks.e_log_v[kk];
            t.sticks += BetaParams { a: self.sticks.tau_tilde[kk], b: self.sticks.tau_hat[kk] }.entropy();

            t.lambda += hp.slab_prior().expected_log_density(e_lam, e_log_lam) + lam.entropy();
        }

        let alpha = self.sticks.alpha;
        t.alpha = hp.alpha_prior().expected_log_density(alpha.mean(), alpha.mean_log()) + alpha.entropy();
        t.phi = hp.noise_prior().expected_log_density(phi.mean(), phi.mean_log()) + phi.entropy();

        let log_w = self.sources.expected_log_weights();
        let log_inv = self.sources.expected_log_inverse_scales();
        let inv = self.sources.expected_inverse_scales();
        for nn in 0..n {
            for kk in 0..k {
                let y2 = self.sources.second_moment(nn, kk);
                for jj in 0..j {
                    let z = self.sources.responsibilities[[nn, kk, jj]];
                    if z > 0.0 {
                        t.sources += z * (0.5 * (log_inv[[kk, jj]] - LN_2PI) - 0.5 * inv[[kk, jj]] * y2);
                        t.assignments += z * log_w[[kk, jj]] - xlogx(z);
                    }
                }
                t.sources += 0.5 * (1.0 + LN_2PI + self.sources.variance[[nn, kk]].ln());
            }
        }

        let scale_prior = hp.scale_prior();
        for kk in 0..k {
            let post = self.sources.mixture_weights.row(kk).to_vec();
            t.weights += dirichlet_expected_log_density(&hp.dirichlet, &post) + dirichlet_entropy(&post);
            for jj in 0..j {
                let q = GammaParams {
                    shape: self.sources.scale_shape[[kk, jj]],
                    rate: self.sources.scale_rate[[kk, jj]],
                };
                t.scales += scale_prior.expected_log_density(q.mean(), q.mean_log()) + q.entropy();
            }
        }
        t
    }
}
