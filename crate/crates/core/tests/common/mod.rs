//! Random valid states and straight-line reference implementations shared by
//! the integration tests.
#![allow(dead_code)]

use ibpica::inference::{
    GlobalPrecisions, Hyperparameters, LoadingPosterior, ModelState, ObservationMatrix, SourcePosterior, StickState,
    UpdateMode,
};
use ibpica::conv::{LayerModel, PoolingSpec};
use ibpica::inference::init_model;
use ibpica::patches::{ReceptiveField, WhiteningTransform};
use ibpica::special::{digamma, GammaParams, RngStream};
use nalgebra::DMatrix;
use rand::Rng;
use ndarray::{Array1, Array2, Array3};

pub fn psi(x: f64) -> f64 {
    digamma(x).unwrap()
}

/// |a − b| ≤ tol · max(1, |b|).
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn pos(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// A random state satisfying every type invariant, with random data.
pub fn random_state(seed: u64, n: usize, d: usize, k: usize, j: usize, mode: UpdateMode) -> (ObservationMatrix, ModelState) {
    let mut rng = RngStream::new(seed, 77);
    let x = Array2::from_shape_fn((n, d), |_| 1.5 * rng.standard_normal());
    let hp = Hyperparameters {
        noise_shape: pos(&mut rng, 0.5, 2.0),
        noise_rate: pos(&mut rng, 0.5, 2.0),
        slab_shape: pos(&mut rng, 0.5, 2.0),
        slab_rate: pos(&mut rng, 0.5, 2.0),
        alpha_shape: pos(&mut rng, 0.5, 2.0),
        alpha_rate: pos(&mut rng, 0.5, 2.0),
        scale_shape: pos(&mut rng, 0.5, 2.0),
        scale_rate: pos(&mut rng, 0.5, 2.0),
        dirichlet: (0..j).map(|_| pos(&mut rng, 0.2, 2.0)).collect(),
    };
    let loadings = LoadingPosterior {
        activity: Array2::from_shape_fn((d, k), |_| pos(&mut rng, 0.02, 0.98)),
        mean: Array2::from_shape_fn((d, k), |_| rng.standard_normal()),
        precision: Array1::from_shape_fn(k, |_| pos(&mut rng, 0.5, 5.0)),
    };
    let mut responsibilities = Array3::from_shape_fn((n, k, j), |_| pos(&mut rng, 0.1, 1.0));
    for nn in 0..n {
        for kk in 0..k {
            let s: f64 = (0..j).map(|jj| responsibilities[[nn, kk, jj]]).sum();
            for jj in 0..j {
                responsibilities[[nn, kk, jj]] /= s;
            }
        }
    }
    let sources = SourcePosterior {
        mean: Array2::from_shape_fn((n, k), |_| rng.standard_normal()),
        variance: Array2::from_shape_fn((n, k), |_| pos(&mut rng, 0.05, 1.0)),
        responsibilities,
        mixture_weights: Array2::from_shape_fn((k, j), |_| pos(&mut rng, 0.5, 4.0)),
        scale_shape: Array2::from_shape_fn((k, j), |_| pos(&mut rng, 0.5, 4.0)),
        scale_rate: Array2::from_shape_fn((k, j), |_| pos(&mut rng, 0.5, 4.0)),
    };
    let mut sticks = StickState {
        tau_tilde: Array1::from_shape_fn(k, |_| pos(&mut rng, 0.5, 5.0)),
        tau_hat: Array1::from_shape_fn(k, |_| pos(&mut rng, 0.5, 5.0)),
        q_weights: Array1::zeros(k),
        alpha: GammaParams { shape: pos(&mut rng, 1.0, 4.0), rate: pos(&mut rng, 0.5, 2.0) },
    };
    sticks.refresh_weights();
    let precisions = GlobalPrecisions {
        lambda: (0..k).map(|_| GammaParams { shape: pos(&mut rng, 0.5, 4.0), rate: pos(&mut rng, 0.5, 4.0) }).collect(),
        phi: GammaParams { shape: pos(&mut rng, 1.0, 6.0), rate: pos(&mut rng, 0.5, 3.0) },
    };
    let state = ModelState { hp, mode, loadings, sources, sticks, precisions };
    state.check_invariants().unwrap();
    (ObservationMatrix::new(x).unwrap(), state)
}

pub fn eg(s: &ModelState, d: usize, k: usize) -> f64 {
    s.loadings.activity[[d, k]] * s.loadings.mean[[d, k]]
}

pub fn eg2(s: &ModelState, d: usize, k: usize) -> f64 {
    let m = s.loadings.mean[[d, k]];
    s.loadings.activity[[d, k]] * (m * m + 1.0 / s.loadings.precision[k])
}

pub fn ey2(s: &ModelState, n: usize, k: usize) -> f64 {
    s.sources.mean[[n, k]].powi(2) + s.sources.variance[[n, k]]
}

pub fn gamma_mean(g: GammaParams) -> f64 {
    g.shape / g.rate
}

pub fn gamma_mean_log(g: GammaParams) -> f64 {
    psi(g.shape) - g.rate.ln()
}

/// a_i = ψ(τ̂_i) + Σ_{m<i} ψ(τ̃_m) − Σ_{m≤i} ψ(τ̃_m + τ̂_m), from scratch.
pub fn stick_log_weights(tau_tilde: &[f64], tau_hat: &[f64]) -> Vec<f64> {
    (0..tau_tilde.len())
        .map(|i| {
            let mut a = psi(tau_hat[i]);
            for m in 0..i {
                a += psi(tau_tilde[m]);
            }
            for m in 0..=i {
                a -= psi(tau_tilde[m] + tau_hat[m]);
            }
            a
        })
        .collect()
}

/// Normalised exp of `a`, computed with a max shift.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Σ_i q_i a_i + H(q) with q = softmax(a): the optimised bound on
/// E[ln(1 − Π_{i≤k} v_i)] over the first k sticks.
pub fn stick_bound(a: &[f64]) -> f64 {
    let q = softmax(a);
    q.iter().zip(a).map(|(q, a)| q * a - if *q > 0.0 { q * q.ln() } else { 0.0 }).sum()
}

pub fn e_log_pi(s: &ModelState, k: usize) -> f64 {
    (0..=k).map(|i| psi(s.sticks.tau_tilde[i]) - psi(s.sticks.tau_tilde[i] + s.sticks.tau_hat[i])).sum()
}

/// ω_dk written out term by term.
pub fn activity_logit_oracle(x: &ObservationMatrix, s: &ModelState, d: usize, k: usize) -> f64 {
    let x = x.view();
    let a = stick_log_weights(s.sticks.tau_tilde.as_slice().unwrap(), s.sticks.tau_hat.as_slice().unwrap());
    let bound = stick_bound(&a[..=k]);
    let lam = s.precisions.lambda[k];
    let mu = s.loadings.mean[[d, k]];
    let prec = s.loadings.precision[k];
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let slab_prior = 0.5 * gamma_mean_log(lam) - 0.5 * ln_2pi - 0.5 * gamma_mean(lam) * (mu * mu + 1.0 / prec);
    match s.mode {
        UpdateMode::AsPrinted => e_log_pi(s, k) + bound + slab_prior,
        UpdateMode::Exact => {
            let entropy = 0.5 * (1.0 + ln_2pi) - 0.5 * prec.ln();
            let phi = gamma_mean(s.precisions.phi);
            let mut cross = 0.0;
            let mut y2 = 0.0;
            for n in 0..s.n() {
                let mut r = x[[n, d]];
                for kk in 0..s.k() {
                    if kk != k {
                        r -= eg(s, d, kk) * s.sources.mean[[n, kk]];
                    }
                }
                cross += s.sources.mean[[n, k]] * r;
                y2 += ey2(s, n, k);
            }
            e_log_pi(s, k) - bound + slab_prior + entropy + phi * (mu * cross - 0.5 * (mu * mu + 1.0 / prec) * y2)
        }
    }
}

/// Σ_n E‖x_n − G y_n‖² by explicit expansion over every (k, k′) pair.
pub fn expected_sq_residual_oracle(x: &ObservationMatrix, s: &ModelState) -> f64 {
    let x = x.view();
    let (n, d, k) = (s.n(), s.d(), s.k());
    let mut total = 0.0;
    for nn in 0..n {
        for dd in 0..d {
            let xv = x[[nn, dd]];
            total += xv * xv;
            for a in 0..k {
                total -= 2.0 * xv * eg(s, dd, a) * s.sources.mean[[nn, a]];
                for b in 0..k {
                    total += if a == b {
                        eg2(s, dd, a) * ey2(s, nn, a)
                    } else {
                        eg(s, dd, a) * eg(s, dd, b) * s.sources.mean[[nn, a]] * s.sources.mean[[nn, b]]
                    };
                }
            }
        }
    }
    total
}

/// Dense ln θ with LU determinant and explicit inverse:
/// −N/2 ln|M| + ½ Σ_n m_nᵀ M m_n with m_n = φ M⁻¹ ḡ r_n, M = φ S + I.
pub fn dense_log_theta(phi: f64, second: &DMatrix<f64>, mean: &[f64], resid: &[f64]) -> f64 {
    let k = mean.len();
    let m = second * phi + DMatrix::identity(k, k);
    let det = m.clone().lu().determinant();
    let inv = m.clone().try_inverse().unwrap();
    let g = nalgebra::DVector::from_column_slice(mean);
    let mut quad = 0.0;
    for &r in resid {
        let mn = &inv * &g * (phi * r);
        quad += (mn.transpose() * &m * &mn)[(0, 0)];
    }
    -0.5 * resid.len() as f64 * det.ln() + 0.5 * quad
}

/// ln θ* as a collapsed marginal-likelihood ratio: with y* ~ N(0, I) and
/// r = g*ᵀ y* + ε, Σ_n ln N(r_n | 0, 1/φ + ‖g*‖²) − ln N(r_n | 0, 1/φ).
pub fn marginal_log_theta(phi: f64, g_star: &[f64], resid: &[f64]) -> f64 {
    let g2: f64 = g_star.iter().map(|g| g * g).sum();
    let normal = |r: f64, var: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var;
    resid.iter().map(|&r| normal(r, 1.0 / phi + g2) - normal(r, 1.0 / phi)).sum()
}

/// Residuals x_nd − Σ_k E[g_dk] m_nk.
pub fn dimension_residual(x: &ObservationMatrix, s: &ModelState, d: usize) -> Vec<f64> {
    let x = x.view();
    (0..s.n())
        .map(|n| x[[n, d]] - (0..s.k()).map(|k| eg(s, d, k) * s.sources.mean[[n, k]]).sum::<f64>())
        .collect()
}

/// Reference implementations of every coordinate update, each writing into
/// a copy of the state.
pub mod reference {
    use super::*;

    pub fn activity_all(x: &ObservationMatrix, s: &ModelState) -> ModelState {
        let mut out = s.clone();
        for d in 0..s.d() {
            for k in 0..s.k() {
                let w = activity_logit_oracle(x, &out, d, k);
                out.loadings.activity[[d, k]] = 1.0 / (1.0 + (-w).exp());
            }
        }
        out
    }

    pub fn loadings(x: &ObservationMatrix, s: &ModelState) -> ModelState {
        let xv = x.view();
        let mut out = s.clone();
        let phi = gamma_mean(s.precisions.phi);
        for k in 0..s.k() {
            let y2: f64 = (0..s.n()).map(|n| ey2(s, n, k)).sum();
            out.loadings.precision[k] = phi * y2 + gamma_mean(s.precisions.lambda[k]);
        }
        for d in 0..s.d() {
            for k in 0..s.k() {
                let mut cross = 0.0;
                for n in 0..s.n() {
                    let mut r = xv[[n, d]];
                    for kk in 0..s.k() {
                        if kk != k {
                            r -= eg(&out, d, kk) * s.sources.mean[[n, kk]];
                        }
                    }
                    cross += s.sources.mean[[n, k]] * r;
                }
                out.loadings.mean[[d, k]] = phi * cross / out.loadings.precision[k];
            }
        }
        out
    }

    pub fn sources(x: &ObservationMatrix, s: &ModelState) -> ModelState {
        let xv = x.view();
        let mut out = s.clone();
        let phi = gamma_mean(s.precisions.phi);
        for n in 0..s.n() {
            for k in 0..s.k() {
                let g2: f64 = (0..s.d()).map(|d| eg2(s, d, k)).sum();
                let prior: f64 = (0..s.j())
                    .map(|j| s.sources.responsibilities[[n, k, j]] * s.sources.scale_shape[[k, j]] / s.sources.scale_rate[[k, j]])
                    .sum();
                let var = 1.0 / (phi * g2 + prior);
                let mut proj = 0.0;
                for d in 0..s.d() {
                    let mut r = xv[[n, d]];
                    if s.mode == UpdateMode::Exact {
                        for kk in 0..s.k() {
                            if kk != k {
                                r -= eg(s, d, kk) * out.sources.mean[[n, kk]];
                            }
                        }
                    }
                    proj += eg(s, d, k) * r;
                }
                out.sources.variance[[n, k]] = var;
                out.sources.mean[[n, k]] = var * phi * proj;
            }
        }
        out
    }

    pub fn responsibilities(s: &ModelState) -> ModelState {
        let mut out = s.clone();
        for n in 0..s.n() {
            for k in 0..s.k() {
                let total: f64 = (0..s.j()).map(|j| s.sources.mixture_weights[[k, j]]).sum();
                let logits: Vec<f64> = (0..s.j())
                    .map(|j| {
                        let (a, b) = (s.sources.scale_shape[[k, j]], s.sources.scale_rate[[k, j]]);
                        psi(s.sources.mixture_weights[[k, j]]) - psi(total) + 0.5 * (psi(a) - b.ln())
                            - 0.5 * (a / b) * ey2(s, n, k)
                    })
                    .collect();
                for (j, z) in softmax(&logits).into_iter().enumerate() {
                    out.sources.responsibilities[[n, k, j]] = z;
                }
            }
        }
        out
    }

    pub fn mixture_weights(s: &ModelState) -> ModelState {
        let mut out = s.clone();
        for k in 0..s.k() {
            for j in 0..s.j() {
                let mut total = s.hp.dirichlet[j];
                for n in 0..s.n() {
                    total += s.sources.responsibilities[[n, k, j]];
                }
                out.sources.mixture_weights[[k, j]] = total;
            }
        }
        out
    }

    pub fn scales(s: &ModelState) -> ModelState {
        let mut out = s.clone();
        for k in 0..s.k() {
            for j in 0..s.j() {
                let mut shape = s.hp.scale_shape;
                let mut rate = s.hp.scale_rate;
                for n in 0..s.n() {
                    let z = s.sources.responsibilities[[n, k, j]];
                    shape += 0.5 * z;
                    rate += 0.5 * z * ey2(s, n, k);
                }
                out.sources.scale_shape[[k, j]] = shape;
                out.sources.scale_rate[[k, j]] = rate;
            }
        }
        out
    }

    pub fn lambda(s: &ModelState) -> ModelState {
        let mut out = s.clone();
        let factor = if s.mode == UpdateMode::Exact { 0.5 } else { 1.0 };
        for k in 0..s.k() {
            let mut shape = s.hp.slab_shape;
            let mut rate = s.hp.slab_rate;
            for d in 0..s.d() {
                shape += 0.5 * s.loadings.activity[[d, k]];
                rate += factor * eg2(s, d, k);
            }
            out.precisions.lambda[k] = GammaParams { shape, rate };
        }
        out
    }

    pub fn phi(x: &ObservationMatrix, s: &ModelState) -> ModelState {
        let mut out = s.clone();
        let shape = s.hp.noise_shape + 0.5 * (s.n() * s.d()) as f64;
        let rate = match s.mode {
            UpdateMode::Exact => s.hp.noise_rate + 0.5 * expected_sq_residual_oracle(x, s),
            UpdateMode::AsPrinted => {
                let xv = x.view();
                let mut sq = 0.0;
                for n in 0..s.n() {
                    for d in 0..s.d() {
                        let fit: f64 = (0..s.k()).map(|k| eg(s, d, k) * s.sources.mean[[n, k]]).sum();
                        sq += (xv[[n, d]] - fit).powi(2);
                    }
                }
                s.hp.noise_rate + sq
            }
        };
        out.precisions.phi = GammaParams { shape, rate };
        out
    }

    /// q(v), q_k and q(α). Exact mode gives feature m its own multinomial
    /// q_m· over 1..m; the as-printed form shares one q over 1..K.
    pub fn sticks(s: &ModelState) -> ModelState {
        let mut out = s.clone();
        let (d, k) = (s.d() as f64, s.k());
        let tt_old = s.sticks.tau_tilde.to_vec();
        let th_old = s.sticks.tau_hat.to_vec();
        let a = stick_log_weights(&tt_old, &th_old);
        let e_alpha = gamma_mean(s.sticks.alpha);
        let active: Vec<f64> = (0..k).map(|m| (0..s.d()).map(|dd| s.loadings.activity[[dd, m]]).sum()).collect();
        let shared = softmax(&a);
        for kk in 0..k {
            let mut tt = e_alpha;
            let mut th = 1.0;
            for m in kk..k {
                tt += active[m];
                let q: Vec<f64> = if s.mode == UpdateMode::Exact { softmax(&a[..=m]) } else { shared.clone() };
                th += (d - active[m]) * q[kk];
                tt += (d - active[m]) * q[kk + 1..=m].iter().sum::<f64>();
            }
            out.sticks.tau_tilde[kk] = tt;
            out.sticks.tau_hat[kk] = th;
        }
        let a_new = stick_log_weights(out.sticks.tau_tilde.as_slice().unwrap(), out.sticks.tau_hat.as_slice().unwrap());
        out.sticks.q_weights = Array1::from(softmax(&a_new));
        let terms = if s.mode == UpdateMode::Exact { k } else { k - 1 };
        let mut rate = s.hp.alpha_rate;
        for i in 0..terms {
            rate -= psi(out.sticks.tau_tilde[i]) - psi(out.sticks.tau_tilde[i] + out.sticks.tau_hat[i]);
        }
        out.sticks.alpha = GammaParams { shape: s.hp.alpha_shape + terms as f64, rate };
        out
    }
}

/// Largest scaled difference between every posterior parameter of two
/// states, with the name of the worst field.
pub fn max_state_difference(a: &ModelState, b: &ModelState) -> (f64, &'static str) {
    let mut worst = (0.0, "");
    let mut cmp = |name: &'static str, xs: Vec<f64>, ys: Vec<f64>| {
        assert_eq!(xs.len(), ys.len(), "{name} length");
        for (x, y) in xs.iter().zip(&ys) {
            let diff = (x - y).abs() / y.abs().max(1.0);
            if diff > worst.0 || diff.is_nan() {
                worst = (if diff.is_nan() { f64::INFINITY } else { diff }, name);
            }
        }
    };
    let v = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    cmp("activity", v(&a.loadings.activity), v(&b.loadings.activity));
    cmp("slab mean", v(&a.loadings.mean), v(&b.loadings.mean));
    cmp("slab precision", a.loadings.precision.to_vec(), b.loadings.precision.to_vec());
    cmp("source mean", v(&a.sources.mean), v(&b.sources.mean));
    cmp("source variance", v(&a.sources.variance), v(&b.sources.variance));
    cmp(
        "responsibilities",
        a.sources.responsibilities.iter().copied().collect(),
        b.sources.responsibilities.iter().copied().collect(),
    );
    cmp("mixture weights", v(&a.sources.mixture_weights), v(&b.sources.mixture_weights));
    cmp("scale shape", v(&a.sources.scale_shape), v(&b.sources.scale_shape));
    cmp("scale rate", v(&a.sources.scale_rate), v(&b.sources.scale_rate));
    cmp("tau tilde", a.sticks.tau_tilde.to_vec(), b.sticks.tau_tilde.to_vec());
    cmp("tau hat", a.sticks.tau_hat.to_vec(), b.sticks.tau_hat.to_vec());
    cmp("q weights", a.sticks.q_weights.to_vec(), b.sticks.q_weights.to_vec());
    cmp("alpha", vec![a.sticks.alpha.shape, a.sticks.alpha.rate], vec![b.sticks.alpha.shape, b.sticks.alpha.rate]);
    cmp(
        "lambda",
        a.precisions.lambda.iter().flat_map(|l| [l.shape, l.rate]).collect(),
        b.precisions.lambda.iter().flat_map(|l| [l.shape, l.rate]).collect(),
    );
    cmp("phi", vec![a.precisions.phi.shape, a.precisions.phi.rate], vec![b.precisions.phi.shape, b.precisions.phi.rate]);
    worst
}

/// Every single-factor update, by name, applied through the library.
pub fn library_updates() -> Vec<(&'static str, fn(&ObservationMatrix, &mut ModelState))> {
    vec![
        ("activity", |x, s| s.update_activity_all(x)),
        ("loadings", |x, s| s.update_loadings(x)),
        ("sources", |x, s| s.update_sources(x)),
        ("responsibilities", |_, s| s.update_responsibilities()),
        ("mixture_weights", |_, s| s.update_mixture_weights()),
        ("scales", |_, s| s.update_scales()),
        ("lambda", |_, s| s.update_lambda()),
        ("phi", |x, s| s.update_phi(x)),
        ("sticks", |_, s| s.update_sticks().unwrap()),
    ]
}

/// The matching reference implementation for a library update name.
pub fn reference_update(name: &str, x: &ObservationMatrix, s: &ModelState) -> ModelState {
    match name {
        "activity" => reference::activity_all(x, s),
        "loadings" => reference::loadings(x, s),
        "sources" => reference::sources(x, s),
        "responsibilities" => reference::responsibilities(s),
        "mixture_weights" => reference::mixture_weights(s),
        "scales" => reference::scales(s),
        "lambda" => reference::lambda(s),
        "phi" => reference::phi(x, s),
        "sticks" => reference::sticks(s),
        other => panic!("unknown update {other}"),
    }
}

/// A layer with an initialised (untrained) model and a random whitening map.
pub fn random_layer(k: usize, input_dim: usize, rf: ReceptiveField, pooling: PoolingSpec, rng: &mut RngStream) -> LayerModel {
    let retained = rng.random_range(1..=input_dim.min(12));
    let x = ibpica::inference::ObservationMatrix::new(Array2::from_shape_fn((4, retained), |_| rng.standard_normal())).unwrap();
    let state = init_model(&x, &Hyperparameters::default(), k, UpdateMode::Exact, &mut rng.clone()).unwrap();
    let whitening = WhiteningTransform {
        mean: Array1::from_shape_fn(input_dim, |_| rng.standard_normal()),
        projection: Array2::from_shape_fn((retained, input_dim), |_| rng.standard_normal() * 0.1),
        retained_dim: retained,
        eig_floor: 0.0,
    };
    LayerModel::new(state.freeze(), whitening, rf, pooling, rng.random_bool(0.5)).unwrap()
}
