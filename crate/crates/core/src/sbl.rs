//! Off-grid sparse Bayesian learning.
//!
//! Each iteration updates the noise precision `α`, the element precisions
//! `γ`, and the off-grid gaps `β` in turn. The `α` and `γ` blocks are
//! closed-form maximizers of the EM surrogate; `β` takes one gradient step on
//! it. Channels are reconstructed by least squares on the selected support.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, SensingModel};
use crate::linalg::{dist_sq, min_norm_lstsq, nmse, CMat, CVec, HermitianFactor, LinalgError, C64};

/// Precisions above this value are clamped and the element counts as pruned.
pub const GAMMA_CAP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SblError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("numerical breakdown at iteration {iter}: {source}")]
    Numerical {
        iter: usize,
        #[source]
        source: LinalgError,
    },
    #[error("noise-precision update is degenerate (b + η = 0): exact noiseless fit")]
    DegenerateAlpha,
    #[error("support is empty")]
    EmptySupport,
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SblHyper {
    /// Shared Gamma hyperprior shape offset used in both precision updates.
    pub a: f64,
    /// Shared Gamma hyperprior rate.
    pub b: f64,
    /// Stop once `‖ĥᵗ − ĥᵗ⁻¹‖² ≤ delta`.
    pub delta: f64,
    pub max_iters: usize,
    /// Gradient step `Δβ` for the off-grid gaps.
    pub step_beta: f64,
    /// Relative variance threshold for the support.
    pub support_ratio: f64,
    /// The support keeps at most `⌊support_cap · T⌋` (at least one) of the
    /// largest-variance elements, so the least-squares fit stays overdetermined.
    /// `1.0` or more disables the cap.
    pub support_cap: f64,
    /// Reuse the `α`-step posterior for the `γ` update instead of recomputing
    /// it at the new `α`.
    pub reuse_posterior_for_gamma: bool,
    /// Halve the `β` step (up to 10 times) until the evidence does not drop.
    pub backtrack_beta: bool,
    /// Record the log-evidence after every block update in the trajectory.
    pub track_evidence: bool,
}

impl Default for SblHyper {
    fn default() -> Self {
        Self {
            a: 1e-6,
            b: 1e-6,
            delta: 1e-7,
            max_iters: 500,
            step_beta: 5e-7,
            support_ratio: 0.01,
            support_cap: 0.375,
            reuse_posterior_for_gamma: false,
            backtrack_beta: false,
            track_evidence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SblState {
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub iter: usize,
}

impl SblState {
    /// `α⁰ = 1/var(y)`, `γ⁰ = 1`, `β⁰ = 0`.
    pub fn initial(model: &SensingModel, y: &CVec) -> Self {
        let n = y.len().max(1) as f64;
        let mean: C64 = y.iter().sum::<C64>() / n;
        let var = y.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / n;
        let alpha = if var > 0.0 && var.is_finite() { 1.0 / var } else { 1.0 };
        Self {
            alpha,
            gamma: vec![1.0; model.n_cols()],
            beta: vec![0.0; model.n_cols()],
            iter: 0,
        }
    }

    pub fn is_valid(&self, model: &SensingModel) -> bool {
        let r = model.grid.max_gap();
        self.alpha > 0.0
            && self.alpha.is_finite()
            && self.gamma.len() == model.n_cols()
            && self.beta.len() == model.n_cols()
            && self.gamma.iter().all(|g| *g > 0.0 && g.is_finite())
            && self.beta.iter().all(|b| b.abs() <= r + 1e-15)
    }
}

/// Posterior of the sparse weights, `CN(μ, Σ)`. Only the parts of `Σ` the
/// updates need are kept: its diagonal and `ΦΣ`. The full matrix is available
/// through [`Sensing::covariance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: CVec,
    pub sigma_diag: Vec<f64>,
    /// `Φ Σ`, `T × Ĵ`.
    pub phi_sigma: CMat,
    /// `tr(ΦΣΦᴴ) + ‖y − Φμ‖²`.
    pub eta: f64,
}

impl Posterior {
    /// `Λ_jj = Σ_jj + |μ_j|²`.
    pub fn second_moment(&self, j: usize) -> f64 {
        self.sigma_diag[j] + self.mu[j].norm_sqr()
    }
}

/// `A(β)`, `Φ(β)` and `Φᴴy`, shared by all posteriors evaluated at the same gaps.
#[derive(Debug, Clone)]
pub struct Sensing {
    /// Dictionary, when built from a model.
    pub dictionary: Option<CMat>,
    pub phi: CMat,
    phi_h_y: CVec,
}

impl Sensing {
    pub fn new(model: &SensingModel, beta: &[f64], y: &CVec) -> Result<Self, SblError> {
        let a = model.dictionary(beta)?;
        let mut s = Self::from_phi(model.x() * &a, y)?;
        s.dictionary = Some(a);
        Ok(s)
    }

    pub fn from_phi(phi: CMat, y: &CVec) -> Result<Self, SblError> {
        if phi.nrows() != y.len() {
            return Err(SblError::Dimension {
                what: "observation length vs sensing rows",
                expected: phi.nrows(),
                got: y.len(),
            });
        }
        let phi_h_y = phi.ad_mul(y);
        Ok(Self {
            dictionary: None,
            phi,
            phi_h_y,
        })
    }

    pub fn n_cols(&self) -> usize {
        self.phi.ncols()
    }

    fn observation_space(&self) -> bool {
        self.phi.nrows() < self.phi.ncols()
    }

    /// Posterior of the sparse weights at `(α, γ)`.
    ///
    /// When `T < Ĵ` the solve is done in observation space,
    /// `Σ = Γ⁻¹ − Γ⁻¹Φᴴ(α⁻¹I + ΦΓ⁻¹Φᴴ)⁻¹ΦΓ⁻¹`, which factors a `T × T`
    /// matrix instead of `Ĵ × Ĵ`.
    pub fn posterior(&self, alpha: f64, gamma: &[f64], y: &CVec) -> Result<Posterior, LinalgError> {
        if self.observation_space() {
            self.posterior_observation_space(alpha, gamma, y)
        } else {
            self.posterior_weight_space(alpha, gamma, y)
        }
    }

    /// Full `Σ = (αΦᴴΦ + diag(γ))⁻¹`.
    pub fn covariance(&self, alpha: f64, gamma: &[f64]) -> Result<CMat, LinalgError> {
        if self.observation_space() {
            let (p, f) = self.observation_factor(alpha, gamma)?;
            let mut sigma = -(p.ad_mul(&f.solve_mat(&p)));
            for (j, g) in gamma.iter().enumerate() {
                sigma[(j, j)].re += 1.0 / g;
            }
            crate::linalg::hermitianize(&mut sigma);
            Ok(sigma)
        } else {
            Ok(self.weight_factor(alpha, gamma)?.inverse())
        }
    }

    fn weight_factor(&self, alpha: f64, gamma: &[f64]) -> Result<HermitianFactor, LinalgError> {
        let mut m = self.phi.ad_mul(&self.phi) * C64::from(alpha);
        for (j, g) in gamma.iter().enumerate() {
            m[(j, j)].re += g;
        }
        HermitianFactor::new(&m)
    }

    /// `(ΦΓ⁻¹, chol(α⁻¹I + ΦΓ⁻¹Φᴴ))`.
    fn observation_factor(&self, alpha: f64, gamma: &[f64]) -> Result<(CMat, HermitianFactor), LinalgError> {
        let mut p = self.phi.clone();
        for (j, g) in gamma.iter().enumerate() {
            p.column_mut(j).scale_mut(1.0 / g);
        }
        let mut c = &p * self.phi.adjoint();
        for i in 0..c.nrows() {
            c[(i, i)].re += 1.0 / alpha;
        }
        crate::linalg::hermitianize(&mut c);
        Ok((p, HermitianFactor::new(&c)?))
    }

    /// Factors `αΦᴴΦ + diag(γ)` directly.
    pub fn posterior_weight_space(&self, alpha: f64, gamma: &[f64], y: &CVec) -> Result<Posterior, LinalgError> {
        let sigma = self.weight_factor(alpha, gamma)?.inverse();
        let mu = &sigma * &self.phi_h_y * C64::from(alpha);
        let phi_sigma = &self.phi * &sigma;
        let sigma_diag = sigma.diagonal().iter().map(|z| z.re).collect();
        Ok(self.finish(mu, sigma_diag, phi_sigma, y))
    }

    pub fn posterior_observation_space(&self, alpha: f64, gamma: &[f64], y: &CVec) -> Result<Posterior, LinalgError> {
        let (p, f) = self.observation_factor(alpha, gamma)?;
        let b = f.solve_mat(&p);
        let sigma_diag = gamma
            .iter()
            .enumerate()
            .map(|(j, g)| 1.0 / g - p.column(j).dotc(&b.column(j)).re)
            .collect();
        let mu = p.ad_mul(&f.solve(y));
        // ΦΣ = ΦΓ⁻¹ − (ΦΓ⁻¹Φᴴ) C⁻¹ΦΓ⁻¹
        let k = &p * self.phi.adjoint();
        let phi_sigma = &p - &k * &b;
        Ok(self.finish(mu, sigma_diag, phi_sigma, y))
    }

    fn finish(&self, mu: CVec, sigma_diag: Vec<f64>, phi_sigma: CMat, y: &CVec) -> Posterior {
        let eta = trace_phi_h(&phi_sigma, &self.phi) + crate::linalg::dist_sq(y, &(&self.phi * &mu));
        Posterior {
            mu,
            sigma_diag,
            phi_sigma,
            eta,
        }
    }
}

/// `Re tr(M Φᴴ)`.
pub fn trace_phi_h(m: &CMat, phi: &CMat) -> f64 {
    m.iter().zip(phi.iter()).map(|(a, b)| (a * b.conj()).re).sum()
}

pub fn posterior_moments(model: &SensingModel, state: &SblState, y: &CVec) -> Result<Posterior, SblError> {
    let s = Sensing::new(model, &state.beta, y)?;
    s.posterior(state.alpha, &state.gamma, y)
        .map_err(|source| SblError::Numerical {
            iter: state.iter,
            source,
        })
}

/// `α = (T + a)/(b + η)`.
pub fn update_alpha(eta: f64, a: f64, b: f64, t: usize) -> Result<f64, SblError> {
    let den = b + eta;
    if !(den > 0.0) {
        return Err(SblError::DegenerateAlpha);
    }
    Ok((t as f64 + a) / den)
}

/// `γ_j = (a + 1)/(b + Λ_jj)` with `Λ = Σ + μμᴴ`, capped at [`GAMMA_CAP`].
pub fn update_gamma(post: &Posterior, a: f64, b: f64) -> Vec<f64> {
    (0..post.mu.len())
        .map(|j| gamma_from_second_moment(post.second_moment(j), a, b))
        .collect()
}

pub(crate) fn gamma_from_second_moment(lam: f64, a: f64, b: f64) -> f64 {
    let g = (a + 1.0) / (b + lam.max(0.0));
    if g.is_finite() {
        g.min(GAMMA_CAP)
    } else {
        GAMMA_CAP
    }
}

/// Gradient of the surrogate's `β`-dependent part,
/// `−α(‖y − Φ(β)μ‖² + tr(Φ(β)ΣΦ(β)ᴴ))`, at fixed `μ`, `Σ` and `alpha_next`.
///
/// Component `j` is `2Re{a′ᴴXᴴX a} c₁ + 2Re{a′ᴴXᴴ c₂}` with
/// `c₁ = −α(Σ_jj + |μ_j|²)`, `c₂ = α(μ̄_j y₋ⱼ − X Σ_{i≠j} Σ_ij a_i)` and
/// `y₋ⱼ = y − X Σ_{i≠j} μ_i a_i`.
pub fn beta_gradient(
    model: &SensingModel,
    beta: &[f64],
    post: &Posterior,
    y: &CVec,
    alpha_next: f64,
) -> Result<Vec<f64>, SblError> {
    let phi = model.sensing(beta)?;
    let dphi = model.x() * model.dictionary_derivative(beta)?;
    Ok(gradient_terms(&phi, &dphi, post, y, alpha_next, model.active_cols()))
}

fn gradient_terms(phi: &CMat, dphi: &CMat, post: &Posterior, y: &CVec, alpha: f64, active: usize) -> Vec<f64> {
    let residual = y - phi * &post.mu;
    let mut xi = vec![0.0; phi.ncols()];
    for (j, out) in xi.iter_mut().enumerate().take(active) {
        let pj = phi.column(j);
        let dj = dphi.column(j);
        let mu_j = post.mu[j];
        let s_jj = post.sigma_diag[j];
        let c1 = -alpha * (s_jj + mu_j.norm_sqr());
        // y₋ⱼ = r + φ_j μ_j ;  X Σ_{i≠j} Σ_ij a_i = (ΦΣ)_{:,j} − φ_j Σ_jj
        let y_minus_j = &residual + pj * mu_j;
        let cross = post.phi_sigma.column(j) - pj * C64::from(s_jj);
        let c2 = (y_minus_j * mu_j.conj() - cross) * C64::from(alpha);
        let first = dj.dotc(&pj).re * c1;
        let second = dj.dotc(&c2).re;
        *out = 2.0 * (first + second);
    }
    xi
}

/// `β + Δβ·Ξ`, clipped to half a grid cell.
pub fn update_beta(model: &SensingModel, beta: &[f64], xi: &[f64], step: f64) -> Vec<f64> {
    let mut next: Vec<f64> = beta.iter().zip(xi).map(|(b, g)| b + step * g).collect();
    model.clip_gaps(&mut next);
    next
}

/// `{ j : γ_j⁻¹ ≥ ratio · max γ⁻¹ }`, minus elements pruned at the cap (the
/// largest-variance element is always kept, so the set is never empty).
pub fn select_support(gamma: &[f64], ratio: f64) -> Vec<usize> {
    if gamma.is_empty() {
        return Vec::new();
    }
    let (best, max_var) = gamma
        .iter()
        .enumerate()
        .map(|(j, g)| (j, 1.0 / g))
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    gamma
        .iter()
        .enumerate()
        .filter(|&(j, &g)| j == best || (1.0 / g >= ratio * max_var && g < GAMMA_CAP))
        .map(|(j, _)| j)
        .collect()
}

/// Keeps the `cap` largest-variance elements of `support`, in index order.
pub fn cap_support(support: Vec<usize>, gamma: &[f64], cap: usize) -> Vec<usize> {
    if support.len() <= cap {
        return support;
    }
    let mut by_var = support;
    by_var.sort_by(|&i, &j| gamma[i].total_cmp(&gamma[j]).then(i.cmp(&j)));
    by_var.truncate(cap.max(1));
    by_var.sort_unstable();
    by_var
}

/// Support restricted to the columns backed by real grid points, capped
/// relative to the pilot length.
pub fn support_for(model: &SensingModel, gamma: &[f64], hyper: &SblHyper) -> Vec<usize> {
    let active = &gamma[..model.active_cols()];
    let support = select_support(active, hyper.support_ratio);
    if hyper.support_cap >= 1.0 {
        return support;
    }
    let cap = (hyper.support_cap * model.pilot_len() as f64).floor() as usize;
    cap_support(support, active, cap)
}

/// `ĥ = A_Ω · argmin_w ‖y − Φ_Ω w‖` (minimum-norm least squares).
pub fn reconstruct_channel(
    model: &SensingModel,
    beta: &[f64],
    support: &[usize],
    y: &CVec,
) -> Result<CVec, SblError> {
    if support.is_empty() {
        return Err(SblError::EmptySupport);
    }
    let a = model.dictionary(beta)?;
    let a_s = a.select_columns(support);
    let phi_s = model.x() * &a_s;
    let w = min_norm_lstsq(&phi_s, y);
    Ok(a_s * w)
}

/// `ln p(y | α, γ, Φ) + ln p(α) + Σ ln p(γ_j)` up to a constant, with
/// `y ~ CN(0, α⁻¹I + Φ diag(γ⁻¹) Φᴴ)` and Gamma priors of shape `a + 1`, rate `b`.
pub fn log_evidence_dict(phi: &CMat, alpha: f64, gamma: &[f64], y: &CVec, a: f64, b: f64) -> Result<f64, LinalgError> {
    let t = phi.nrows();
    let mut c = CMat::zeros(t, t);
    for (j, g) in gamma.iter().enumerate() {
        let col = phi.column(j);
        c += (&col * col.adjoint()) * C64::from(1.0 / g);
    }
    for i in 0..t {
        c[(i, i)].re += 1.0 / alpha;
    }
    crate::linalg::hermitianize(&mut c);
    let f = HermitianFactor::new(&c)?;
    let quad = y.dotc(&f.solve(y)).re;
    let data = -(t as f64) * std::f64::consts::PI.ln() - f.log_det() - quad;
    let prior = |x: f64| a * x.ln() - b * x;
    Ok(data + prior(alpha) + gamma.iter().map(|&g| prior(g)).sum::<f64>())
}

pub fn log_evidence(model: &SensingModel, state: &SblState, y: &CVec, hyper: &SblHyper) -> Result<f64, SblError> {
    let phi = model.sensing(&state.beta)?;
    log_evidence_dict(&phi, state.alpha, &state.gamma, y, hyper.a, hyper.b).map_err(|source| SblError::Numerical {
        iter: state.iter,
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub alpha: f64,
    /// `max(‖ĥᵗ − ĥᵗ⁻¹‖², ‖A μᵗ − A μᵗ⁻¹‖²)`.
    pub change: f64,
    /// Log-evidence at the start of the iteration and after the `α`, `γ`, and
    /// `β` updates (only with `track_evidence`).
    pub evidence: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SblResult {
    pub h_hat: CVec,
    pub support: Vec<usize>,
    pub state: SblState,
    pub iters_used: usize,
    pub converged: bool,
    /// NMSE against the true channel when one was supplied.
    pub nmse: Option<f64>,
    pub trajectory: Vec<IterRecord>,
}

/// Initial reconstruction `ĥ⁰` from the support of the initial state.
pub fn initial_estimate(model: &SensingModel, state: &SblState, y: &CVec, hyper: &SblHyper) -> Result<CVec, SblError> {
    let support = support_for(model, &state.gamma, hyper);
    reconstruct_channel(model, &state.beta, &support, y)
}

/// Sensing quantities and the posterior at a given state; the first step of
/// every iteration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sensing: Sensing,
    pub post: Posterior,
}

impl Prepared {
    pub fn new(model: &SensingModel, state: &SblState, y: &CVec) -> Result<Self, SblError> {
        let sensing = Sensing::new(model, &state.beta, y)?;
        let post = sensing
            .posterior(state.alpha, &state.gamma, y)
            .map_err(|source| SblError::Numerical {
                iter: state.iter,
                source,
            })?;
        Ok(Self { sensing, post })
    }

    /// Posterior-mean channel `A(β) μ`.
    pub fn mean_channel(&self) -> CVec {
        self.sensing.dictionary.as_ref().expect("built from a model") * &self.post.mu
    }
}

/// One full `α → γ → β` iteration. `update_gaps = false` freezes `β`.
pub fn sbl_iteration(
    model: &SensingModel,
    state: &SblState,
    y: &CVec,
    hyper: &SblHyper,
    update_gaps: bool,
) -> Result<(SblState, Option<[f64; 4]>), SblError> {
    let prepared = Prepared::new(model, state, y)?;
    sbl_iteration_prepared(model, state, &prepared, y, hyper, update_gaps)
}

/// [`sbl_iteration`] with the posterior at `state` already computed.
pub fn sbl_iteration_prepared(
    model: &SensingModel,
    state: &SblState,
    prepared: &Prepared,
    y: &CVec,
    hyper: &SblHyper,
    update_gaps: bool,
) -> Result<(SblState, Option<[f64; 4]>), SblError> {
    let iter = state.iter;
    let num = |source| SblError::Numerical { iter, source };
    let sensing = &prepared.sensing;
    let t = model.pilot_len();
    let evid = |alpha: f64, gamma: &[f64], phi: &CMat| log_evidence_dict(phi, alpha, gamma, y, hyper.a, hyper.b).map_err(num);

    let e0 = if hyper.track_evidence { evid(state.alpha, &state.gamma, &sensing.phi)? } else { 0.0 };

    let alpha = update_alpha(prepared.post.eta, hyper.a, hyper.b, t)?;
    let e1 = if hyper.track_evidence { evid(alpha, &state.gamma, &sensing.phi)? } else { 0.0 };

    let fresh;
    let post_g = if hyper.reuse_posterior_for_gamma {
        &prepared.post
    } else {
        fresh = sensing.posterior(alpha, &state.gamma, y).map_err(num)?;
        &fresh
    };
    let mut gamma = update_gamma(post_g, hyper.a, hyper.b);
    freeze_padding(model, &mut gamma, &state.gamma);
    let e2 = if hyper.track_evidence { evid(alpha, &gamma, &sensing.phi)? } else { 0.0 };

    let beta = if update_gaps {
        let post_b = sensing.posterior(alpha, &gamma, y).map_err(num)?;
        let dphi = model.x() * model.dictionary_derivative(&state.beta)?;
        let xi = gradient_terms(&sensing.phi, &dphi, &post_b, y, alpha, model.active_cols());
        if hyper.backtrack_beta {
            backtrack(model, state, &xi, alpha, &gamma, y, hyper, e2)?
        } else {
            update_beta(model, &state.beta, &xi, hyper.step_beta)
        }
    } else {
        state.beta.clone()
    };

    let next = SblState {
        alpha,
        gamma,
        beta,
        iter: iter + 1,
    };
    let evidence = if hyper.track_evidence {
        let e3 = evid(next.alpha, &next.gamma, &model.sensing(&next.beta)?)?;
        Some([e0, e1, e2, e3])
    } else {
        None
    };
    Ok((next, evidence))
}

/// Padding columns carry no signal; their precision is left untouched so that
/// a padded problem evolves exactly like the unpadded one.
pub(crate) fn freeze_padding(model: &SensingModel, gamma: &mut [f64], previous: &[f64]) {
    let active = model.active_cols();
    gamma[active..].copy_from_slice(&previous[active..]);
}

#[allow(clippy::too_many_arguments)]
fn backtrack(
    model: &SensingModel,
    state: &SblState,
    xi: &[f64],
    alpha: f64,
    gamma: &[f64],
    y: &CVec,
    hyper: &SblHyper,
    base: f64,
) -> Result<Vec<f64>, SblError> {
    let base = if hyper.track_evidence {
        base
    } else {
        let phi = model.sensing(&state.beta)?;
        log_evidence_dict(&phi, alpha, gamma, y, hyper.a, hyper.b).map_err(|source| SblError::Numerical {
            iter: state.iter,
            source,
        })?
    };
    let mut step = hyper.step_beta;
    for _ in 0..=10 {
        let cand = update_beta(model, &state.beta, xi, step);
        let phi = model.sensing(&cand)?;
        if let Ok(e) = log_evidence_dict(&phi, alpha, gamma, y, hyper.a, hyper.b) {
            if e >= base {
                return Ok(cand);
            }
        }
        step *= 0.5;
    }
    Ok(state.beta.clone())
}

/// Posterior-mean channel `A(β) μ` at `state`.
pub fn posterior_mean_channel(model: &SensingModel, state: &SblState, y: &CVec) -> Result<CVec, SblError> {
    Ok(Prepared::new(model, state, y)?.mean_channel())
}

fn run(model: &SensingModel, y: &CVec, truth: Option<&CVec>, hyper: &SblHyper, update_gaps: bool) -> Result<SblResult, SblError> {
    if y.len() != model.pilot_len() {
        return Err(SblError::Dimension {
            what: "observation length vs pilot length",
            expected: model.pilot_len(),
            got: y.len(),
        });
    }
    let mut state = SblState::initial(model, y);
    let mut prepared = Prepared::new(model, &state, y)?;
    let mut h_prev = initial_estimate(model, &state, y, hyper)?;
    let mut mean_prev = prepared.mean_channel();
    let mut trajectory = Vec::new();
    let mut converged = false;
    let mut support = Vec::new();
    while state.iter < hyper.max_iters.max(1) {
        let (next, evidence) = sbl_iteration_prepared(model, &state, &prepared, y, hyper, update_gaps)?;
        state = next;
        prepared = Prepared::new(model, &state, y)?;
        support = support_for(model, &state.gamma, hyper);
        let h = reconstruct_channel(model, &state.beta, &support, y)?;
        let mean = prepared.mean_channel();
        // While the support still spans more than T columns the least-squares
        // estimate is the same minimum-norm fit every iteration, so the
        // posterior-mean estimate has to settle as well.
        let change = dist_sq(&h, &h_prev).max(dist_sq(&mean, &mean_prev));
        trajectory.push(IterRecord {
            alpha: state.alpha,
            change,
            evidence,
        });
        h_prev = h;
        mean_prev = mean;
        if change <= hyper.delta {
            converged = true;
            break;
        }
    }
    Ok(SblResult {
        nmse: truth.map(|h| nmse(&h_prev, h)),
        h_hat: h_prev,
        support,
        iters_used: state.iter,
        state,
        converged,
        trajectory,
    })
}

/// Off-grid SBL until `‖ĥᵗ − ĥᵗ⁻¹‖² ≤ δ` or `max_iters`.
pub fn run_sbl(model: &SensingModel, y: &CVec, truth: Option<&CVec>, hyper: &SblHyper) -> Result<SblResult, SblError> {
    run(model, y, truth, hyper, true)
}

/// On-grid baseline: the same loop with `β` frozen at zero.
pub fn run_standard_sbl(model: &SensingModel, y: &CVec, truth: Option<&CVec>, hyper: &SblHyper) -> Result<SblResult, SblError> {
    run(model, y, truth, hyper, false)
}
