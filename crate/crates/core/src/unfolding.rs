//! One SBL iteration turned into a parameterized layer.
//!
//! A layer maps `(α, γ, β)` to the next state through three branches:
//!
//! - `α` from the refined posterior `Σ̃ = Σ + O₁`, `μ̃ = μ + o₂`;
//! - `γ` from `[Σ̃ + μ̃μ̃ᴴ]_jj` at the new `α`;
//! - `β` from a gradient-like step that replaces `a′` by `W₁a + b₁` and the
//!   data term by `W₂y + Φb₂ + b₃`.
//!
//! [`plain_equivalent_params`] builds parameters under which the layer
//! reproduces [`crate::sbl::sbl_iteration`], and [`theorem1_params`] builds
//! the `(O₁, o₂)` pair under which one layer's `α` equals two plain `α` steps.

use thiserror::Error;

use crate::channel::SensingModel;
use crate::linalg::{dist_sq, pinv, CMat, CVec, C64};
use crate::sbl::{
    freeze_padding, trace_phi_h, update_alpha, Posterior, Prepared, SblError, SblHyper, SblState, Sensing,
    GAMMA_CAP,
};

/// Lower clamp for `α` and `γ` after a layer.
pub const PRECISION_FLOOR: f64 = 1e-12;
/// Upper clamp for `α` after a layer.
pub const ALPHA_CAP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum UnfoldError {
    #[error(transparent)]
    Sbl(#[from] SblError),
    #[error("parameter {what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("flat parameter vector has length {got}, codec expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("parameter {what} is not representable in {mode:?} mode")]
    NotRepresentable { what: &'static str, mode: CodecMode },
}

/// Square complex operator in one of four structured forms.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixParam {
    /// `z·I`.
    Scalar(C64),
    Diagonal(CVec),
    /// `diag(d) + u vᴴ`.
    DiagRank1 { diag: CVec, u: CVec, v: CVec },
    Full(CMat),
}

impl MatrixParam {
    pub fn zero() -> Self {
        MatrixParam::Scalar(C64::new(0.0, 0.0))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            MatrixParam::Scalar(z) => *z == C64::new(0.0, 0.0),
            MatrixParam::Diagonal(d) => d.iter().all(|z| *z == C64::new(0.0, 0.0)),
            MatrixParam::DiagRank1 { diag, u, v } => {
                diag.iter().chain(u.iter()).chain(v.iter()).all(|z| *z == C64::new(0.0, 0.0))
            }
            MatrixParam::Full(m) => m.iter().all(|z| *z == C64::new(0.0, 0.0)),
        }
    }

    /// Side length implied by the representation, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            MatrixParam::Scalar(_) => None,
            MatrixParam::Diagonal(d) => Some(d.len()),
            MatrixParam::DiagRank1 { diag, .. } => Some(diag.len()),
            MatrixParam::Full(m) => Some(m.nrows()),
        }
    }

    fn check(&self, n: usize, what: &'static str) -> Result<(), UnfoldError> {
        let bad = |got| UnfoldError::Dimension { what, expected: n, got };
        match self {
            MatrixParam::Scalar(_) => Ok(()),
            MatrixParam::Diagonal(d) if d.len() != n => Err(bad(d.len())),
            MatrixParam::DiagRank1 { diag, u, v } => {
                for x in [diag, u, v] {
                    if x.len() != n {
                        return Err(bad(x.len()));
                    }
                }
                Ok(())
            }
            MatrixParam::Full(m) if m.nrows() != n || m.ncols() != n => Err(bad(m.nrows().max(m.ncols()))),
            _ => Ok(()),
        }
    }

    pub fn is_finite(&self) -> bool {
        let fin = |z: &C64| z.re.is_finite() && z.im.is_finite();
        match self {
            MatrixParam::Scalar(z) => fin(z),
            MatrixParam::Diagonal(d) => d.iter().all(fin),
            MatrixParam::DiagRank1 { diag, u, v } => diag.iter().chain(u.iter()).chain(v.iter()).all(fin),
            MatrixParam::Full(m) => m.iter().all(fin),
        }
    }

    /// Entry `(j, j)`.
    pub fn diag_entry(&self, j: usize) -> C64 {
        match self {
            MatrixParam::Scalar(z) => *z,
            MatrixParam::Diagonal(d) => d[j],
            MatrixParam::DiagRank1 { diag, u, v } => diag[j] + u[j] * v[j].conj(),
            MatrixParam::Full(m) => m[(j, j)],
        }
    }

    pub fn to_dense(&self, n: usize) -> CMat {
        match self {
            MatrixParam::Scalar(z) => CMat::identity(n, n) * *z,
            MatrixParam::Diagonal(d) => CMat::from_diagonal(d),
            MatrixParam::DiagRank1 { diag, u, v } => CMat::from_diagonal(diag) + u * v.adjoint(),
            MatrixParam::Full(m) => m.clone(),
        }
    }

    /// `self · m`.
    pub fn mul_mat(&self, m: &CMat) -> CMat {
        match self {
            MatrixParam::Scalar(z) => m * *z,
            MatrixParam::Diagonal(d) => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            MatrixParam::DiagRank1 { diag, u, v } => {
                let mut out = MatrixParam::Diagonal(diag.clone()).mul_mat(m);
                out += u * m.ad_mul(v).adjoint();
                out
            }
            MatrixParam::Full(w) => w * m,
        }
    }

    /// `self · x`.
    pub fn mul_vec(&self, x: &CVec) -> CVec {
        match self {
            MatrixParam::Scalar(z) => x * *z,
            MatrixParam::Diagonal(d) => d.component_mul(x),
            MatrixParam::DiagRank1 { diag, u, v } => diag.component_mul(x) + u * v.dotc(x),
            MatrixParam::Full(w) => w * x,
        }
    }

    /// `m · self`.
    pub fn right_mul(&self, m: &CMat) -> CMat {
        match self {
            MatrixParam::Scalar(z) => m * *z,
            MatrixParam::Diagonal(d) => {
                let mut out = m.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= d[j];
                }
                out
            }
            MatrixParam::DiagRank1 { diag, u, v } => {
                MatrixParam::Diagonal(diag.clone()).right_mul(m) + (m * u) * v.adjoint()
            }
            MatrixParam::Full(w) => m * w,
        }
    }
}

/// Problem dimensions a layer is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    /// Antennas `N`.
    pub n: usize,
    /// Pilot length `T`.
    pub t: usize,
    /// Dictionary columns `Ĵ`.
    pub j: usize,
}

impl LayerDims {
    pub fn of(model: &SensingModel) -> Self {
        Self {
            n: model.n_antennas(),
            t: model.pilot_len(),
            j: model.n_cols(),
        }
    }
}

/// Trainable parameters of one layer.
///
/// The Gamma-prior constants are kept separately for the `α` and `γ`
/// branches; setting both pairs equal gives the single shared `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub c1: Vec<f64>,
    pub step_beta: Vec<f64>,
    /// `N × N`.
    pub w1: MatrixParam,
    pub b1: CVec,
    /// `T × T`.
    pub w2: MatrixParam,
    pub b2: CVec,
    pub b3: CVec,
    /// `Ĵ × Ĵ`.
    pub o1: MatrixParam,
    pub o2: CVec,
}

impl LayerParams {
    /// All-zero parameters with shared hyperprior constants `(a, b)`.
    pub fn zeros(dims: LayerDims, a: f64, b: f64) -> Self {
        Self {
            a_alpha: a,
            b_alpha: b,
            a_gamma: a,
            b_gamma: b,
            c1: vec![0.0; dims.j],
            step_beta: vec![0.0; dims.j],
            w1: MatrixParam::zero(),
            b1: CVec::zeros(dims.n),
            w2: MatrixParam::zero(),
            b2: CVec::zeros(dims.j),
            b3: CVec::zeros(dims.t),
            o1: MatrixParam::zero(),
            o2: CVec::zeros(dims.j),
        }
    }

    pub fn validate(&self, dims: LayerDims) -> Result<(), UnfoldError> {
        let vec_len = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(UnfoldError::Dimension { what, expected, got })
            }
        };
        vec_len("c1", dims.j, self.c1.len())?;
        vec_len("step_beta", dims.j, self.step_beta.len())?;
        vec_len("b1", dims.n, self.b1.len())?;
        vec_len("b2", dims.j, self.b2.len())?;
        vec_len("b3", dims.t, self.b3.len())?;
        vec_len("o2", dims.j, self.o2.len())?;
        self.w1.check(dims.n, "w1")?;
        self.w2.check(dims.t, "w2")?;
        self.o1.check(dims.j, "o1")
    }

    pub fn is_finite(&self) -> bool {
        let fin = |z: &C64| z.re.is_finite() && z.im.is_finite();
        [self.a_alpha, self.b_alpha, self.a_gamma, self.b_gamma]
            .iter()
            .chain(&self.c1)
            .chain(&self.step_beta)
            .all(|x| x.is_finite())
            && self.b1.iter().chain(self.b2.iter()).chain(self.b3.iter()).chain(self.o2.iter()).all(fin)
            && self.w1.is_finite()
            && self.w2.is_finite()
            && self.o1.is_finite()
    }
}

/// Multipliers applied to the plain algorithm's `c₁`, `W₂` and `b₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlainScales {
    pub c1: f64,
    pub w2: f64,
    pub b2: f64,
}

impl Default for PlainScales {
    fn default() -> Self {
        Self { c1: 1.0, w2: 1.0, b2: 1.0 }
    }
}

/// Where the `β` branch takes `c₁`, `W₂` and `b₂` from.
///
/// The plain algorithm's values depend on the posterior at
/// `(α⁽ˡ⁺¹⁾, γ⁽ˡ⁺¹⁾, β⁽ˡ⁾)`, which only exists inside the layer, so a policy
/// that wants to act relative to them has to defer their construction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BetaCoupling {
    /// Use the values stored in [`LayerParams`].
    #[default]
    Given,
    /// `c₁ = s·(−αΛ_jj)`, `W₂ = s·αI`, `b₂ = s·(−αμ)` from the in-layer posterior.
    Plain(PlainScales),
}

fn clamp_precision(x: f64, cap: f64, previous: f64) -> f64 {
    if x.is_nan() {
        previous
    } else {
        x.clamp(PRECISION_FLOOR, cap)
    }
}

/// `(T + a)/(b + η)` clamped to `[PRECISION_FLOOR, ALPHA_CAP]`.
fn clamped_ratio(num: f64, den: f64, cap: f64, previous: f64) -> f64 {
    if num <= 0.0 {
        return PRECISION_FLOOR;
    }
    if den <= 0.0 {
        return cap;
    }
    clamp_precision(num / den, cap, previous)
}

/// `η̃ = tr(Φ(Σ + O₁)Φᴴ) + ‖y − Φ(μ + o₂)‖²`.
fn refined_eta(sensing: &Sensing, post: &Posterior, phi_o1: &CMat, o2: &CVec, y: &CVec) -> f64 {
    let phi = &sensing.phi;
    let tr = trace_phi_h(&post.phi_sigma, phi) + trace_phi_h(phi_o1, phi);
    let mu = &post.mu + o2;
    tr + dist_sq(y, &(phi * mu))
}

/// `α` branch on a posterior at `(α⁽ˡ⁾, γ⁽ˡ⁾, β⁽ˡ⁾)`.
pub fn alpha_branch(sensing: &Sensing, post: &Posterior, params: &LayerParams, y: &CVec, previous: f64) -> f64 {
    let phi_o1 = params.o1.right_mul(&sensing.phi);
    alpha_from(sensing, post, params, &phi_o1, y, previous)
}

fn alpha_from(sensing: &Sensing, post: &Posterior, params: &LayerParams, phi_o1: &CMat, y: &CVec, previous: f64) -> f64 {
    let eta = refined_eta(sensing, post, phi_o1, &params.o2, y);
    let t = sensing.phi.nrows() as f64;
    clamped_ratio(t + params.a_alpha, params.b_alpha + eta, ALPHA_CAP, previous)
}

/// `γ` branch on a posterior at `(α⁽ˡ⁺¹⁾, γ⁽ˡ⁾, β⁽ˡ⁾)`.
pub fn gamma_branch(post: &Posterior, params: &LayerParams, previous: &[f64]) -> Vec<f64> {
    (0..post.mu.len())
        .map(|j| {
            let lam = post.sigma_diag[j] + params.o1.diag_entry(j).re + (post.mu[j] + params.o2[j]).norm_sqr();
            clamped_ratio(params.a_gamma + 1.0, params.b_gamma + lam, GAMMA_CAP, previous[j])
        })
        .collect()
}

struct BetaTerms<'a> {
    c1: std::borrow::Cow<'a, [f64]>,
    data: CVec,
}

fn beta_terms<'a>(
    sensing: &Sensing,
    post: &Posterior,
    params: &'a LayerParams,
    coupling: BetaCoupling,
    alpha: f64,
    y: &CVec,
) -> BetaTerms<'a> {
    let phi = &sensing.phi;
    match coupling {
        BetaCoupling::Given => BetaTerms {
            c1: std::borrow::Cow::Borrowed(&params.c1),
            data: params.w2.mul_vec(y) + phi * &params.b2 + &params.b3,
        },
        BetaCoupling::Plain(s) => {
            let c1 = (0..post.mu.len()).map(|j| -s.c1 * alpha * post.second_moment(j)).collect();
            // W₂y + Φb₂ with W₂ = s·αI, b₂ = s·(−αμ)
            let data = y * C64::from(s.w2 * alpha) - phi * &post.mu * C64::from(s.b2 * alpha) + &params.b3;
            BetaTerms {
                c1: std::borrow::Cow::Owned(c1),
                data,
            }
        }
    }
}

/// `β` branch on a posterior at `(α⁽ˡ⁺¹⁾, γ⁽ˡ⁺¹⁾, β⁽ˡ⁾)`.
///
/// Component `j` moves by `Δβ_j·Ξ̃_j` with
/// `Ξ̃_j = Re{ψ_jᴴφ_j}·c₁_j + Re{ψ_jᴴ c̃₂_j}`, `ψ_j = X(W₁a_j + b₁)` and
/// `c̃₂_j = μ̃̄_j (W₂y + Φb₂ + b₃) + α(Λ̃_jj φ_j − (ΦΣ̃)_{:,j})`.
#[allow(clippy::too_many_arguments)]
pub fn beta_branch(
    model: &SensingModel,
    sensing: &Sensing,
    post: &Posterior,
    params: &LayerParams,
    coupling: BetaCoupling,
    alpha: f64,
    beta: &[f64],
    y: &CVec,
) -> Vec<f64> {
    let phi_o1 = params.o1.right_mul(&sensing.phi);
    beta_from(model, sensing, post, params, coupling, &phi_o1, alpha, beta, y)
}

#[allow(clippy::too_many_arguments)]
fn beta_from(
    model: &SensingModel,
    sensing: &Sensing,
    post: &Posterior,
    params: &LayerParams,
    coupling: BetaCoupling,
    phi_o1: &CMat,
    alpha: f64,
    beta: &[f64],
    y: &CVec,
) -> Vec<f64> {
    let phi = &sensing.phi;
    let a = sensing.dictionary.as_ref().expect("sensing built from a model");
    let mut g = params.w1.mul_mat(a);
    for mut col in g.column_iter_mut() {
        col += &params.b1;
    }
    let psi = model.x() * g;
    let terms = beta_terms(sensing, post, params, coupling, alpha, y);
    let psi_h_data = psi.ad_mul(&terms.data);

    let mut next = beta.to_vec();
    for j in 0..model.active_cols() {
        let pj = psi.column(j);
        let phi_j = phi.column(j);
        let mu = post.mu[j] + params.o2[j];
        let lam = post.sigma_diag[j] + params.o1.diag_entry(j).re + mu.norm_sqr();
        let psi_phi = pj.dotc(&phi_j).re;
        let psi_cross = pj.dotc(&post.phi_sigma.column(j)).re + pj.dotc(&phi_o1.column(j)).re;
        let second = (mu.conj() * psi_h_data[j]).re + alpha * (lam * psi_phi - psi_cross);
        let xi = psi_phi * terms.c1[j] + second;
        let moved = beta[j] + params.step_beta[j] * xi;
        if moved.is_finite() {
            next[j] = moved;
        }
    }
    model.clip_gaps(&mut next);
    next
}

/// One layer from `state` with parameters taken as given.
pub fn unfolded_layer(model: &SensingModel, state: &SblState, params: &LayerParams, y: &CVec) -> Result<SblState, UnfoldError> {
    let prepared = Prepared::new(model, state, y)?;
    unfolded_layer_prepared(model, state, &prepared, params, BetaCoupling::Given, y)
}

/// One layer with the posterior at `state` already computed.
pub fn unfolded_layer_prepared(
    model: &SensingModel,
    state: &SblState,
    prepared: &Prepared,
    params: &LayerParams,
    coupling: BetaCoupling,
    y: &CVec,
) -> Result<SblState, UnfoldError> {
    params.validate(LayerDims::of(model))?;
    let iter = state.iter;
    let num = |source| SblError::Numerical { iter, source };
    let sensing = &prepared.sensing;
    let phi_o1 = params.o1.right_mul(&sensing.phi);

    let alpha = alpha_from(sensing, &prepared.post, params, &phi_o1, y, state.alpha);

    let post_g = sensing.posterior(alpha, &state.gamma, y).map_err(num)?;
    let mut gamma = gamma_branch(&post_g, params, &state.gamma);
    freeze_padding(model, &mut gamma, &state.gamma);

    let post_b = sensing.posterior(alpha, &gamma, y).map_err(num)?;
    let beta = beta_from(model, sensing, &post_b, params, coupling, &phi_o1, alpha, &state.beta, y);

    Ok(SblState {
        alpha,
        gamma,
        beta,
        iter: iter + 1,
    })
}

/// Parameters that are the same in every plain-equivalent layer: the
/// hyperprior constants, `W₁ = diag(−j2π(d/λ)n)` (so `W₁a = a′/cos φ`) and
/// `Δβ_j = 2cos(φ̂_j + β_j)·Δβ`. `c₁`, `W₂` and `b₂` are left at zero.
pub fn plain_static_params(model: &SensingModel, beta: &[f64], hyper: &SblHyper) -> LayerParams {
    let dims = LayerDims::of(model);
    let mut p = LayerParams::zeros(dims, hyper.a, hyper.b);
    p.w1 = MatrixParam::Diagonal(model.geom.derivative_operator_diag());
    for j in 0..model.active_cols() {
        p.step_beta[j] = 2.0 * model.column_angle(j, beta).cos() * hyper.step_beta;
    }
    p
}

/// Parameters under which one layer from `state` reproduces one plain
/// iteration (posterior recomputed for `γ`, no backtracking).
///
/// `c₁ = −α⁽ˡ⁺¹⁾Λ_jj`, `W₂ = α⁽ˡ⁺¹⁾I` and `b₂ = −α⁽ˡ⁺¹⁾μ` come from the
/// plain posterior at `(α⁽ˡ⁺¹⁾, γ⁽ˡ⁺¹⁾, β⁽ˡ⁾)`, which this function computes.
pub fn plain_equivalent_params(
    model: &SensingModel,
    state: &SblState,
    y: &CVec,
    hyper: &SblHyper,
) -> Result<LayerParams, UnfoldError> {
    let prepared = Prepared::new(model, state, y)?;
    let mut p = plain_static_params(model, &state.beta, hyper);
    let iter = state.iter;
    let num = |source| SblError::Numerical { iter, source };
    let sensing = &prepared.sensing;
    let alpha = alpha_branch(sensing, &prepared.post, &p, y, state.alpha);
    let post_g = sensing.posterior(alpha, &state.gamma, y).map_err(num)?;
    let mut gamma = gamma_branch(&post_g, &p, &state.gamma);
    freeze_padding(model, &mut gamma, &state.gamma);
    let post_b = sensing.posterior(alpha, &gamma, y).map_err(num)?;
    for j in 0..p.c1.len() {
        p.c1[j] = -alpha * post_b.second_moment(j);
    }
    p.w2 = MatrixParam::Scalar(C64::from(alpha));
    p.b2 = &post_b.mu * C64::from(-alpha);
    Ok(p)
}

/// Closed-form `(O₁, o₂)` under which the `α` branch started at `alpha_l`
/// returns the value two plain `α` updates reach from `alpha_t`, with `γ`
/// and `β` held at `state`.
///
/// With `κ = (T + a)/(b + η(αᵗ))` and `R_x = (xΦᴴΦ + diag γ)⁻¹`:
/// `O₁ = R_κ − R_{α_l}` and `o₂ = Φ†Φ(κR_κ − α_l R_{α_l})Φᴴy`.
pub fn theorem1_params(
    model: &SensingModel,
    state: &SblState,
    y: &CVec,
    hyper: &SblHyper,
    alpha_t: f64,
    alpha_l: f64,
) -> Result<(CMat, CVec), UnfoldError> {
    let sensing = Sensing::new(model, &state.beta, y)?;
    let iter = state.iter;
    let num = |source| SblError::Numerical { iter, source };
    let t = model.pilot_len();
    let post_t = sensing.posterior(alpha_t, &state.gamma, y).map_err(num)?;
    let kappa = update_alpha(post_t.eta, hyper.a, hyper.b, t)?;
    if kappa == alpha_l {
        let j = model.n_cols();
        return Ok((CMat::zeros(j, j), CVec::zeros(j)));
    }
    let r_k = sensing.covariance(kappa, &state.gamma).map_err(num)?;
    let r_l = sensing.covariance(alpha_l, &state.gamma).map_err(num)?;
    let o1 = r_k - r_l;
    let mu_k = sensing.posterior(kappa, &state.gamma, y).map_err(num)?.mu;
    let mu_l = sensing.posterior(alpha_l, &state.gamma, y).map_err(num)?.mu;
    let phi = &sensing.phi;
    let o2 = pinv(phi) * (phi * (mu_k - mu_l));
    Ok((o1, o2))
}

/// `|α_layer − αᵗ⁺²| / |αᵗ⁺²|` for one layer with [`theorem1_params`]
/// started at `state`, against two plain `α` updates from the same state.
pub fn verify_one_layer_two_iters(
    model: &SensingModel,
    state: &SblState,
    y: &CVec,
    hyper: &SblHyper,
) -> Result<f64, UnfoldError> {
    let (o1, o2) = theorem1_params(model, state, y, hyper, state.alpha, state.alpha)?;
    let sensing = Sensing::new(model, &state.beta, y)?;
    let iter = state.iter;
    let num = |source| SblError::Numerical { iter, source };
    let t = model.pilot_len();

    let post_t = sensing.posterior(state.alpha, &state.gamma, y).map_err(num)?;
    let alpha_1 = update_alpha(post_t.eta, hyper.a, hyper.b, t)?;
    let post_1 = sensing.posterior(alpha_1, &state.gamma, y).map_err(num)?;
    let alpha_2 = update_alpha(post_1.eta, hyper.a, hyper.b, t)?;

    let mut params = LayerParams::zeros(LayerDims::of(model), hyper.a, hyper.b);
    params.o1 = MatrixParam::Full(o1);
    params.o2 = o2;
    let alpha_layer = alpha_branch(&sensing, &post_t, &params, y, state.alpha);
    Ok((alpha_layer - alpha_2).abs() / alpha_2.abs())
}

/// How the matrix-valued parameters `W₁`, `W₂`, `O₁` are represented in a
/// flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Scalar,
    Diagonal,
    DiagRank1,
    Full,
}

impl CodecMode {
    /// Real entries used for one `n × n` matrix parameter.
    pub fn matrix_len(self, n: usize) -> usize {
        match self {
            CodecMode::Scalar => 2,
            CodecMode::Diagonal => 2 * n,
            CodecMode::DiagRank1 => 6 * n,
            CodecMode::Full => 2 * n * n,
        }
    }
}

/// Flat real encoding of [`LayerParams`].
///
/// Layout, in order (complex values as `(re, im)` pairs, `m(n)` the
/// matrix length of the mode):
///
/// | field | length |
/// |---|---|
/// | `a_alpha, b_alpha, a_gamma, b_gamma` | 4 |
/// | `c1` | Ĵ |
/// | `step_beta` | Ĵ |
/// | `w1` | m(N) |
/// | `b1` | 2N |
/// | `w2` | m(T) |
/// | `b2` | 2Ĵ |
/// | `b3` | 2T |
/// | `o1` | m(Ĵ) |
/// | `o2` | 2Ĵ |
///
/// with `m(n)` = 2 (scalar), 2n (diagonal), 6n (diagonal `d`, then `u`,
/// then `v`) or 2n² (full, column-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCodec {
    pub mode: CodecMode,
    pub dims: LayerDims,
    pub flat_len: usize,
}

impl ParamCodec {
    pub fn new(mode: CodecMode, dims: LayerDims) -> Self {
        let LayerDims { n, t, j } = dims;
        let flat_len = 4 + 6 * j + 2 * n + 2 * t + mode.matrix_len(n) + mode.matrix_len(t) + mode.matrix_len(j);
        Self { mode, dims, flat_len }
    }

    pub fn encode(&self, p: &LayerParams) -> Result<Vec<f64>, UnfoldError> {
        p.validate(self.dims)?;
        let mut out = Vec::with_capacity(self.flat_len);
        out.extend([p.a_alpha, p.b_alpha, p.a_gamma, p.b_gamma]);
        out.extend(&p.c1);
        out.extend(&p.step_beta);
        self.put_matrix(&mut out, &p.w1, self.dims.n, "w1")?;
        put_complex(&mut out, p.b1.iter());
        self.put_matrix(&mut out, &p.w2, self.dims.t, "w2")?;
        put_complex(&mut out, p.b2.iter());
        put_complex(&mut out, p.b3.iter());
        self.put_matrix(&mut out, &p.o1, self.dims.j, "o1")?;
        put_complex(&mut out, p.o2.iter());
        debug_assert_eq!(out.len(), self.flat_len);
        Ok(out)
    }

    pub fn decode(&self, flat: &[f64]) -> Result<LayerParams, UnfoldError> {
        if flat.len() != self.flat_len {
            return Err(UnfoldError::Length {
                expected: self.flat_len,
                got: flat.len(),
            });
        }
        let LayerDims { n, t, j } = self.dims;
        let mut r = Cursor { flat, pos: 0 };
        let head = r.reals(4);
        Ok(LayerParams {
            a_alpha: head[0],
            b_alpha: head[1],
            a_gamma: head[2],
            b_gamma: head[3],
            c1: r.reals(j).to_vec(),
            step_beta: r.reals(j).to_vec(),
            w1: r.matrix(self.mode, n),
            b1: r.complex(n),
            w2: r.matrix(self.mode, t),
            b2: r.complex(j),
            b3: r.complex(t),
            o1: r.matrix(self.mode, j),
            o2: r.complex(j),
        })
    }

    fn put_matrix(&self, out: &mut Vec<f64>, m: &MatrixParam, n: usize, what: &'static str) -> Result<(), UnfoldError> {
        let not_rep = UnfoldError::NotRepresentable { what, mode: self.mode };
        let zeros = || CVec::zeros(n);
        match (self.mode, m) {
            (CodecMode::Scalar, MatrixParam::Scalar(z)) => put_complex(out, std::iter::once(z)),
            (CodecMode::Scalar, _) => return Err(not_rep),
            (CodecMode::Diagonal, MatrixParam::Scalar(z)) => put_complex(out, zeros().add_scalar(*z).iter()),
            (CodecMode::Diagonal, MatrixParam::Diagonal(d)) => put_complex(out, d.iter()),
            (CodecMode::Diagonal, _) => return Err(not_rep),
            (CodecMode::DiagRank1, MatrixParam::Full(_)) => return Err(not_rep),
            (CodecMode::DiagRank1, MatrixParam::DiagRank1 { diag, u, v }) => {
                put_complex(out, diag.iter().chain(u.iter()).chain(v.iter()))
            }
            (CodecMode::DiagRank1, other) => {
                let diag = CVec::from_fn(n, |i, _| other.diag_entry(i));
                put_complex(out, diag.iter().chain(zeros().iter()).chain(zeros().iter()))
            }
            (CodecMode::Full, other) => put_complex(out, other.to_dense(n).iter()),
        }
        Ok(())
    }
}

fn put_complex<'a>(out: &mut Vec<f64>, it: impl Iterator<Item = &'a C64>) {
    for z in it {
        out.push(z.re);
        out.push(z.im);
    }
}

struct Cursor<'a> {
    flat: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn reals(&mut self, k: usize) -> &'a [f64] {
        let s = &self.flat[self.pos..self.pos + k];
        self.pos += k;
        s
    }

    fn complex(&mut self, k: usize) -> CVec {
        let s = self.reals(2 * k);
        CVec::from_fn(k, |i, _| C64::new(s[2 * i], s[2 * i + 1]))
    }

    fn matrix(&mut self, mode: CodecMode, n: usize) -> MatrixParam {
        match mode {
            CodecMode::Scalar => MatrixParam::Scalar(self.complex(1)[0]),
            CodecMode::Diagonal => MatrixParam::Diagonal(self.complex(n)),
            CodecMode::DiagRank1 => MatrixParam::DiagRank1 {
                diag: self.complex(n),
                u: self.complex(n),
                v: self.complex(n),
            },
            CodecMode::Full => {
                let v = self.complex(n * n);
                MatrixParam::Full(CMat::from_column_slice(n, n, v.as_slice()))
            }
        }
    }
}
