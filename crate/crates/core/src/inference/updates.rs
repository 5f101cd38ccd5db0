//! Closed-form coordinate updates of the variational posterior.

use ndarray::{s, Array1, ArrayView2};

use super::state::{ModelState, ObservationMatrix, StickSummary, UpdateMode};
use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, log_sum_exp, sigmoid, GammaParams};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Per-column quantities reused across the rows of one activity pass.
struct ActivityContext {
    sticks: StickSummary,
    e_lambda: Vec<f64>,
    e_log_lambda: Vec<f64>,
    sum_y2: Vec<f64>,
    e_phi: f64,
}

impl ModelState {
    fn activity_context(&self) -> ActivityContext {
        let k = self.k();
        ActivityContext {
            sticks: self.sticks.summary(),
            e_lambda: self.precisions.lambda.iter().map(|l| l.mean()).collect(),
            e_log_lambda: self.precisions.lambda.iter().map(|l| l.mean_log()).collect(),
            sum_y2: (0..k).map(|kk| (0..self.n()).map(|n| self.sources.second_moment(n, kk)).sum()).collect(),
            e_phi: self.e_phi(),
        }
    }

    /// Logit ω_dk of q(z_dk = 1); `sum_y_r` is Σ_n E[y_nk] r_ndk with the
    /// residual r excluding feature k.
    fn activity_logit(&self, ctx: &ActivityContext, d: usize, k: usize, sum_y_r: f64) -> f64 {
        let mu = self.loadings.mean[[d, k]];
        let prec = self.loadings.precision[k];
        let slab_sq = mu * mu + 1.0 / prec;
        // E_q[ln N(g | 0, λ⁻¹)] under the slab.
        let slab_prior = 0.5 * ctx.e_log_lambda[k] - HALF_LN_2PI - 0.5 * ctx.e_lambda[k] * slab_sq;
        match self.mode {
            UpdateMode::Exact => {
                let slab_entropy = 0.5 * (1.0 - prec.ln()) + HALF_LN_2PI;
                let fit = ctx.e_phi * (mu * sum_y_r - 0.5 * slab_sq * ctx.sum_y2[k]);
                ctx.sticks.e_log_pi[k] - ctx.sticks.bound[k] + slab_prior + slab_entropy + fit
            }
            UpdateMode::AsPrinted => ctx.sticks.e_log_pi[k] + ctx.sticks.bound[k] + slab_prior,
        }
    }

    /// The logit ω_dk that [`ModelState::update_activity`] would apply.
    pub fn activity_logit_at(&self, x: &ObservationMatrix, d: usize, k: usize) -> f64 {
        let ctx = self.activity_context();
        let sum_y_r = self.sum_y_residual(x.view(), d, k);
        self.activity_logit(&ctx, d, k, sum_y_r)
    }

    /// Σ_n E[y_nk] (x_nd − Σ_{k'≠k} E[g_dk'] E[y_nk']).
    fn sum_y_residual(&self, x: ArrayView2<f64>, d: usize, k: usize) -> f64 {
        let kk = self.k();
        (0..self.n())
            .map(|n| {
                let mut r = x[[n, d]];
                for j in 0..kk {
                    if j != k {
                        r -= self.loadings.expected(d, j) * self.sources.mean[[n, j]];
                    }
                }
                self.sources.mean[[n, k]] * r
            })
            .sum()
    }

    /// Update a single q(z_dk = 1) and return the new value.
    pub fn update_activity(&mut self, x: &ObservationMatrix, d: usize, k: usize) -> f64 {
        let ctx = self.activity_context();
        let sum_y_r = self.sum_y_residual(x.view(), d, k);
        let rho = sigmoid(self.activity_logit(&ctx, d, k, sum_y_r));
        self.loadings.activity[[d, k]] = rho;
        rho
    }

    /// Sweep q(z_dk = 1) over every d, then every k within d.
    pub fn update_activity_all(&mut self, x: &ObservationMatrix) {
        let ctx = self.activity_context();
        let x = x.view();
        let (n, k) = (self.n(), self.k());
        let mut resid = vec![0.0; n];
        for d in 0..self.d() {
            for (nn, r) in resid.iter_mut().enumerate() {
                *r = x[[nn, d]] - (0..k).map(|j| self.loadings.expected(d, j) * self.sources.mean[[nn, j]]).sum::<f64>();
            }
            for kk in 0..k {
                let g_old = self.loadings.expected(d, kk);
                let y = self.sources.mean.column(kk);
                let sum_y_r: f64 = resid.iter().zip(y.iter()).map(|(r, y)| y * (r + g_old * y)).sum();
                let rho = sigmoid(self.activity_logit(&ctx, d, kk, sum_y_r));
                self.loadings.activity[[d, kk]] = rho;
                let dg = self.loadings.expected(d, kk) - g_old;
                if dg != 0.0 {
                    for (r, y) in resid.iter_mut().zip(y.iter()) {
                        *r -= dg * y;
                    }
                }
            }
        }
    }

    /// Slab precisions and means of q(G), sweeping k within each row.
    pub fn update_loadings(&mut self, x: &ObservationMatrix) {
        let x = x.view();
        let (n, k) = (self.n(), self.k());
        let e_phi = self.e_phi();
        for kk in 0..k {
            let sum_y2: f64 = (0..n).map(|nn| self.sources.second_moment(nn, kk)).sum();
            self.loadings.precision[kk] = e_phi * sum_y2 + self.precisions.lambda[kk].mean();
        }
        let mut resid = vec![0.0; n];
        for d in 0..self.d() {
            for (nn, r) in resid.iter_mut().enumerate() {
                *r = x[[nn, d]] - (0..k).map(|j| self.loadings.expected(d, j) * self.sources.mean[[nn, j]]).sum::<f64>();
            }
            for kk in 0..k {
                let g_old = self.loadings.expected(d, kk);
                let y = self.sources.mean.column(kk);
                let sum_y_r: f64 = resid.iter().zip(y.iter()).map(|(r, y)| y * (r + g_old * y)).sum();
                self.loadings.mean[[d, kk]] = e_phi * sum_y_r / self.loadings.precision[kk];
                let dg = self.loadings.expected(d, kk) - g_old;
                if dg != 0.0 {
                    for (r, y) in resid.iter_mut().zip(y.iter()) {
                        *r -= dg * y;
                    }
                }
            }
        }
    }

    /// Source variances and means, sweeping k within each sample.
    pub fn update_sources(&mut self, x: &ObservationMatrix) {
        let x = x.view();
        let (n, d, k) = (self.n(), self.d(), self.k());
        let j = self.j();
        let e_phi = self.e_phi();
        let eg = self.loadings.expected_matrix();
        let g2 = self.loadings.column_second_moments();
        let inv_scale = self.sources.expected_inverse_scales();
        let mut resid = vec![0.0; d];
        for nn in 0..n {
            if self.mode == UpdateMode::Exact {
                for (dd, r) in resid.iter_mut().enumerate() {
                    *r = x[[nn, dd]] - (0..k).map(|kk| eg[[dd, kk]] * self.sources.mean[[nn, kk]]).sum::<f64>();
                }
            }
            for kk in 0..k {
                let prior_prec: f64 =
                    (0..j).map(|jj| self.sources.responsibilities[[nn, kk, jj]] * inv_scale[[kk, jj]]).sum();
                let var = 1.0 / (e_phi * g2[kk] + prior_prec);
                self.sources.variance[[nn, kk]] = var;
                let col = eg.column(kk);
                match self.mode {
                    UpdateMode::Exact => {
                        let m_old = self.sources.mean[[nn, kk]];
                        let proj: f64 = col.iter().zip(resid.iter()).map(|(g, r)| g * (r + g * m_old)).sum();
                        let m_new = var * e_phi * proj;
                        self.sources.mean[[nn, kk]] = m_new;
                        let dm = m_new - m_old;
                        if dm != 0.0 {
                            for (r, g) in resid.iter_mut().zip(col.iter()) {
                                *r -= g * dm;
                            }
                        }
                    }
                    UpdateMode::AsPrinted => {
                        let proj: f64 = col.iter().zip(x.row(nn).iter()).map(|(g, xv)| g * xv).sum();
                        self.sources.mean[[nn, kk]] = var * e_phi * proj;
                    }
                }
            }
        }
    }

    /// Component responsibilities ζ_nkj, normalised in the log domain.
    pub fn update_responsibilities(&mut self) {
        let (n, k, j) = (self.n(), self.k(), self.j());
        let log_w = self.sources.expected_log_weights();
        let log_inv = self.sources.expected_log_inverse_scales();
        let inv = self.sources.expected_inverse_scales();
        let mut buf = vec![0.0; j];
        for nn in 0..n {
            for kk in 0..k {
                let y2 = self.sources.second_moment(nn, kk);
                for (jj, b) in buf.iter_mut().enumerate() {
                    *b = log_w[[kk, jj]] + 0.5 * log_inv[[kk, jj]] - 0.5 * inv[[kk, jj]] * y2;
                }
                let norm = log_sum_exp(&buf);
                for (jj, b) in buf.iter().enumerate() {
                    self.sources.responsibilities[[nn, kk, jj]] = (b - norm).exp();
                }
            }
        }
    }

    /// ξ̃_kj = ξ_j + Σ_n ζ_nkj.
    pub fn update_mixture_weights(&mut self) {
        let (k, j) = (self.k(), self.j());
        for kk in 0..k {
            for jj in 0..j {
                let total: f64 = self.sources.responsibilities.slice(s![.., kk, jj]).sum();
                self.sources.mixture_weights[[kk, jj]] = self.hp.dirichlet[jj] + total;
            }
        }
    }

    /// Gamma posteriors over the source inverse variances.
    pub fn update_scales(&mut self) {
        let (n, k, j) = (self.n(), self.k(), self.j());
        for kk in 0..k {
            for jj in 0..j {
                let mut count = 0.0;
                let mut energy = 0.0;
                for nn in 0..n {
                    let z = self.sources.responsibilities[[nn, kk, jj]];
                    count += z;
                    energy += z * self.sources.second_moment(nn, kk);
                }
                self.sources.scale_shape[[kk, jj]] = self.hp.scale_shape + 0.5 * count;
                self.sources.scale_rate[[kk, jj]] = self.hp.scale_rate + 0.5 * energy;
            }
        }
    }

    /// q(λ_k).
    pub fn update_lambda(&mut self) {
        let d = self.d();
        let rate_factor = match self.mode {
            UpdateMode::Exact => 0.5,
            UpdateMode::AsPrinted => 1.0,
        };
        for kk in 0..self.k() {
            let active: f64 = self.loadings.activity.column(kk).sum();
            let g2: f64 = (0..d).map(|dd| self.loadings.second_moment(dd, kk)).sum();
            self.precisions.lambda[kk] = GammaParams {
                shape: self.hp.slab_shape + 0.5 * active,
                rate: self.hp.slab_rate + rate_factor * g2,
            };
        }
    }

    /// q(φ).
    pub fn update_phi(&mut self, x: &ObservationMatrix) {
        let shape = self.hp.noise_shape + 0.5 * (self.n() * self.d()) as f64;
        let rate = match self.mode {
            UpdateMode::Exact => self.hp.noise_rate + 0.5 * self.expected_sq_residual(x),
            UpdateMode::AsPrinted => {
                self.hp.noise_rate + self.mean_residual(x.view()).iter().map(|v| v * v).sum::<f64>()
            }
        };
        self.precisions.phi = GammaParams { shape, rate };
    }

    /// Stick posteriors q(v_k), the bound weights q_k, and then q(α).
    pub fn update_sticks(&mut self) -> Result<()> {
        let k = self.k();
        let d = self.d() as f64;
        let e_alpha = self.e_alpha();
        let active: Vec<f64> = (0..k).map(|kk| self.loadings.activity.column(kk).sum()).collect();
        let inactive: Vec<f64> = active.iter().map(|s| d - s).collect();
        // Suffix sums Σ_{m≥k} S_m.
        let mut active_tail = vec![0.0; k + 1];
        for kk in (0..k).rev() {
            active_tail[kk] = active_tail[kk + 1] + active[kk];
        }

        self.sticks.refresh_weights();
        let mut tau_tilde = Array1::zeros(k);
        let mut tau_hat = Array1::zeros(k);
        match self.mode {
            UpdateMode::Exact => {
                // Feature m uses its own multinomial over i ≤ m:
                // q_mi = exp(a_i − L_m), so Σ_{i=k+1}^{m} q_mi = 1 − exp(L_k − L_m).
                let sum = self.sticks.summary();
                for kk in 0..k {
                    let mut tt = e_alpha + active_tail[kk];
                    let mut th = 1.0;
                    for m in kk..k {
                        th += inactive[m] * (sum.log_weights[kk] - sum.bound[m]).exp();
                        if m > kk {
                            tt += inactive[m] * (1.0 - (sum.bound[kk] - sum.bound[m]).exp()).max(0.0);
                        }
                    }
                    tau_tilde[kk] = tt;
                    tau_hat[kk] = th;
                }
            }
            UpdateMode::AsPrinted => {
                let q = self.sticks.q_weights.clone();
                for kk in 0..k {
                    let mut tt = e_alpha + active_tail[kk];
                    let mut th = 1.0;
                    let mut partial = 0.0;
                    for m in kk..k {
                        th += inactive[m] * q[kk];
                        if m > kk {
                            partial += q[m];
                            tt += inactive[m] * partial;
                        }
                    }
                    tau_tilde[kk] = tt;
                    tau_hat[kk] = th;
                }
            }
        }
        self.sticks.tau_tilde = tau_tilde;
        self.sticks.tau_hat = tau_hat;
        self.sticks.refresh_weights();
        self.update_alpha()
    }

    /// q(α).
    pub fn update_alpha(&mut self) -> Result<()> {
        let k = self.k();
        let terms = match self.mode {
            UpdateMode::Exact => k,
            UpdateMode::AsPrinted => k.saturating_sub(1),
        };
        let mut rate = self.hp.alpha_rate;
        for kk in 0..terms {
            let tt = self.sticks.tau_tilde[kk];
            let th = self.sticks.tau_hat[kk];
            rate -= digamma_unchecked(tt) - digamma_unchecked(tt + th);
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Numerical(format!("q(alpha) rate is not positive: {rate}")));
        }
        self.sticks.alpha = GammaParams { shape: self.hp.alpha_shape + terms as f64, rate };
        Ok(())
    }

    /// One full mean-field pass in the order q(Z); q(y), ζ, q(ϖ), q(s⁻¹);
    /// q(λ), q(v), q(α), q(φ); q(G).
    pub fn mean_field_cycle(&mut self, x: &ObservationMatrix) -> Result<()> {
        self.update_activity_all(x);
        self.update_sources(x);
        self.update_responsibilities();
        self.update_mixture_weights();
        self.update_scales();
        self.update_lambda();
        self.update_sticks()?;
        self.update_phi(x);
        self.update_loadings(x);
        Ok(())
    }
}
