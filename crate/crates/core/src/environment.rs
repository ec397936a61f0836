//! Channel estimation as an episodic MDP.
//!
//! A state is the SBL state plus the residual of the current reconstruction.
//! An action is `[L, u…]`: the halting score followed by the policy's
//! parameter outputs in `[−1, 1]`, which an [`ActionMap`] turns into one
//! transition (an unfolded layer, or a direct black-box update). Rewards need
//! the true channel; halting only looks at `L`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelSample, SensingModel};
use crate::ddpg::{compute_reward, DdpgAgent, ResidualSlice, Transition};
use crate::linalg::{dist_sq, norm_sq, CVec};
use crate::sbl::{reconstruct_channel, support_for, Prepared, SblError, SblHyper, SblState, GAMMA_CAP};
use crate::unfolding::{
    plain_equivalent_params, plain_static_params, unfolded_layer_prepared, BetaCoupling, CodecMode, LayerDims,
    MatrixParam, ParamCodec, UnfoldError, ALPHA_CAP, PRECISION_FLOOR,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Sbl(#[from] SblError),
    #[error(transparent)]
    Unfold(#[from] UnfoldError),
    #[error("action has {got} components, expected {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("observation has {got} entries, model expects {expected}")]
    Observation { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
}

/// Feature value range for `log γ`.
pub const LOG_GAMMA_CLIP: f64 = 30.0;
/// Divisor of the log-precision features.
pub const LOG_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopRule {
    /// Stop once the halting score `L_t ≤ ε`.
    HaltingScore,
    /// Continue while an extra leading policy output `τ_t` exceeds `threshold`.
    Tau { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub max_layers: usize,
    pub epsilon: f64,
    pub eta_pen: f64,
    pub rho: f64,
    pub lambda_halt: f64,
    pub discount: f64,
    pub stop: StopRule,
    pub hyper: SblHyper,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_layers: 15,
            epsilon: 0.2,
            eta_pen: 1e-3,
            rho: 1.0,
            lambda_halt: 0.0,
            discount: 0.9,
            stop: StopRule::HaltingScore,
            hyper: SblHyper::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(EnvError::Config(format!("epsilon {} not in (0, 1)", self.epsilon)));
        }
        if self.max_layers == 0 {
            return Err(EnvError::Config("max_layers must be at least 1".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(EnvError::Config(format!("rho {} is negative", self.rho)));
        }
        Ok(())
    }
}

/// Ranges for the compact action map. Each output `u ∈ [−1, 1]` is mapped
/// affinely onto `[lo, hi]` (on a log scale for the gains).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompactRanges {
    /// `α` gain `k`: the layer returns `k` times the plain `α` update.
    pub alpha_gain: (f64, f64),
    /// Shrink `c`: `O₁ = −c·diag(Σ)` at the layer input.
    pub shrink: (f64, f64),
    /// `γ` gain.
    pub gamma_gain: (f64, f64),
    /// Multiplier on the plain `Δβ`.
    pub step_gain: (f64, f64),
}

impl Default for CompactRanges {
    fn default() -> Self {
        Self {
            alpha_gain: (0.5, 10.0),
            shrink: (0.0, 0.95),
            gamma_gain: (0.5, 2.0),
            step_gain: (0.1, 10.0),
        }
    }
}

fn lin(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + 0.5 * (u.clamp(-1.0, 1.0) + 1.0) * (hi - lo)
}

fn log_lin(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lin(u, (lo.ln(), hi.ln())).exp()
}

fn inv_lin(v: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

fn inv_log_lin(v: f64, (lo, hi): (f64, f64)) -> f64 {
    inv_lin(v.ln(), (lo.ln(), hi.ln()))
}

/// How policy outputs become a transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionMap {
    /// Four outputs: `α` gain, covariance shrink, `γ` gain, `Δβ` gain, on
    /// top of the plain layer with in-layer `β` coupling.
    Compact(CompactRanges),
    /// The full parameter vector of a [`ParamCodec`], as
    /// `plain + scale·u` around the plain-equivalent parameters.
    Codec { mode: CodecMode, scale: f64 },
    /// No unfolded layer: outputs are direct steps
    /// `log α += s_α u₀`, `log γ_j += s_γ u_j`, `β_j += s_β (r/2) u_j`.
    BlackBox {
        log_alpha_step: f64,
        log_gamma_step: f64,
        beta_step: f64,
    },
}

impl Default for ActionMap {
    fn default() -> Self {
        ActionMap::Compact(CompactRanges::default())
    }
}

impl ActionMap {
    pub fn black_box() -> Self {
        ActionMap::BlackBox {
            log_alpha_step: 2.0,
            log_gamma_step: 2.0,
            beta_step: 0.5,
        }
    }

    /// Number of parameter outputs (without the halting score or `τ`).
    pub fn dim(&self, dims: LayerDims) -> usize {
        match self {
            ActionMap::Compact(_) => 4,
            ActionMap::Codec { mode, .. } => ParamCodec::new(*mode, dims).flat_len,
            ActionMap::BlackBox { .. } => 1 + 2 * dims.j,
        }
    }

    /// Outputs under which an unfolded map reproduces one plain iteration.
    /// For the black-box map this is the "no change" action.
    pub fn plain_action(&self, dims: LayerDims) -> Vec<f64> {
        match self {
            ActionMap::Compact(r) => vec![
                inv_log_lin(1.0, r.alpha_gain),
                inv_lin(0.0, r.shrink),
                inv_log_lin(1.0, r.gamma_gain),
                inv_log_lin(1.0, r.step_gain),
            ],
            _ => vec![0.0; self.dim(dims)],
        }
    }
}

/// Current SBL state, reconstruction and policy features.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub sbl: SblState,
    pub h_hat: CVec,
    pub residual: CVec,
    pub t: usize,
    /// `[ln α/s, ln γ/s (Ĵ), β/β_max (Ĵ), Re r (T), Im r (T), t/T_max]`
    /// with `s` = [`LOG_SCALE`].
    pub features: Vec<f64>,
    /// `‖h − ĥᵗ‖²`.
    pub err: f64,
}

pub fn feature_len(dims: LayerDims) -> usize {
    2 + 2 * dims.j + 2 * dims.t
}

pub fn residual_slice(dims: LayerDims) -> ResidualSlice {
    ResidualSlice {
        offset: 1 + 2 * dims.j,
        len: 2 * dims.t,
    }
}

fn features(state: &SblState, residual: &CVec, max_gap: f64, depth: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 + 2 * state.gamma.len() + 2 * residual.len());
    f.push(state.alpha.ln() / LOG_SCALE);
    f.extend(
        state
            .gamma
            .iter()
            .map(|g| g.ln().clamp(-LOG_GAMMA_CLIP, LOG_GAMMA_CLIP) / LOG_SCALE),
    );
    f.extend(state.beta.iter().map(|b| b / max_gap));
    f.extend(residual.iter().map(|r| r.re));
    f.extend(residual.iter().map(|r| r.im));
    f.push(depth);
    f
}

/// One problem instance: model, (padded) observation and true channel.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub model: &'a SensingModel,
    pub y: &'a CVec,
    pub h: &'a CVec,
}

impl<'a> Episode<'a> {
    pub fn new(model: &'a SensingModel, y: &'a CVec, sample: &'a ChannelSample) -> Result<Self, EnvError> {
        if y.len() != model.pilot_len() {
            return Err(EnvError::Observation {
                expected: model.pilot_len(),
                got: y.len(),
            });
        }
        Ok(Self { model, y, h: &sample.h })
    }

    fn observe(&self, sbl: SblState, t: usize, cfg: &EnvConfig) -> Result<EnvState, EnvError> {
        let support = support_for(self.model, &sbl.gamma, &cfg.hyper);
        let h_hat = reconstruct_channel(self.model, &sbl.beta, &support, self.y)?;
        let residual = self.y - self.model.x() * &h_hat;
        let depth = t as f64 / cfg.max_layers.max(1) as f64;
        let features = features(&sbl, &residual, self.model.grid.max_gap(), depth);
        let err = dist_sq(self.h, &h_hat);
        Ok(EnvState {
            sbl,
            h_hat,
            residual,
            t,
            features,
            err,
        })
    }

    pub fn nmse(&self, err: f64) -> f64 {
        err / norm_sq(self.h)
    }

    /// `α⁰ = 1/var(y)`, `γ⁰ = 1`, `β⁰ = 0`, and `ĥ⁰` from one support
    /// selection and least-squares pass.
    pub fn reset(&self, cfg: &EnvConfig) -> Result<EnvState, EnvError> {
        self.observe(SblState::initial(self.model, self.y), 0, cfg)
    }
}

/// Result of one [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The stop rule fired and no layer was applied.
    pub halted: bool,
}

/// Leading action components before the map's outputs: `L`, then `τ` under
/// [`StopRule::Tau`].
pub fn action_prefix(stop: StopRule) -> usize {
    match stop {
        StopRule::HaltingScore => 1,
        StopRule::Tau { .. } => 2,
    }
}

fn apply_map(
    ep: &Episode,
    cfg: &EnvConfig,
    map: &ActionMap,
    state: &EnvState,
    u: &[f64],
) -> Result<SblState, EnvError> {
    let model = ep.model;
    let hyper = &cfg.hyper;
    let dims = LayerDims::of(model);
    match map {
        ActionMap::Compact(r) => {
            let prepared = Prepared::new(model, &state.sbl, ep.y)?;
            let k = log_lin(u[0], r.alpha_gain);
            let c = lin(u[1], r.shrink);
            let g = log_lin(u[2], r.gamma_gain);
            let s = log_lin(u[3], r.step_gain);
            let t = dims.t as f64;
            let mut p = plain_static_params(model, &state.sbl.beta, hyper);
            p.a_alpha = k * (t + hyper.a) - t;
            p.a_gamma = g * (1.0 + hyper.a) - 1.0;
            for d in &mut p.step_beta {
                *d *= s;
            }
            if c != 0.0 {
                let sd = &prepared.post.sigma_diag;
                p.o1 = MatrixParam::Diagonal(CVec::from_fn(sd.len(), |j, _| (-c * sd[j]).into()));
            }
            let coupling = BetaCoupling::Plain(Default::default());
            Ok(unfolded_layer_prepared(model, &state.sbl, &prepared, &p, coupling, ep.y)?)
        }
        ActionMap::Codec { mode, scale } => {
            let codec = ParamCodec::new(*mode, dims);
            let base = plain_equivalent_params(model, &state.sbl, ep.y, hyper)?;
            let mut flat = codec.encode(&base)?;
            for (f, v) in flat.iter_mut().zip(u) {
                *f += scale * v;
            }
            let p = codec.decode(&flat)?;
            let prepared = Prepared::new(model, &state.sbl, ep.y)?;
            Ok(unfolded_layer_prepared(model, &state.sbl, &prepared, &p, BetaCoupling::Given, ep.y)?)
        }
        ActionMap::BlackBox {
            log_alpha_step,
            log_gamma_step,
            beta_step,
        } => {
            let j = dims.j;
            let prev = &state.sbl;
            let alpha = (prev.alpha.ln() + log_alpha_step * u[0]).exp();
            let mut gamma: Vec<f64> = prev
                .gamma
                .iter()
                .zip(&u[1..1 + j])
                .map(|(g, v)| (g.ln() + log_gamma_step * v).exp().clamp(PRECISION_FLOOR, GAMMA_CAP))
                .collect();
            let half = model.grid.max_gap();
            let mut beta: Vec<f64> = prev
                .beta
                .iter()
                .zip(&u[1 + j..1 + 2 * j])
                .map(|(b, v)| b + beta_step * half * v)
                .collect();
            for jj in model.active_cols()..j {
                gamma[jj] = prev.gamma[jj];
                beta[jj] = 0.0;
            }
            model.clip_gaps(&mut beta);
            Ok(SblState {
                alpha: alpha.clamp(PRECISION_FLOOR, ALPHA_CAP),
                gamma,
                beta,
                iter: prev.iter + 1,
            })
        }
    }
}

/// One MDP step from `state` with `action = [L_t, (τ_t,) u…]`.
///
/// If the stop rule fires on the incoming state (`L_t ≤ ε`, or `τ_t ≤`
/// threshold) the episode ends without another layer, so the output is `ĥᵗ`
/// after `t` layers. Otherwise one layer is applied and the episode ends when
/// `t + 1 = T_max`. `force_depth` disables the stop rule and ends the episode
/// after exactly that many layers.
///
/// The reward pairs `L_t` with `‖h − ĥᵗ‖²` of the incoming state.
pub fn step(
    ep: &Episode,
    cfg: &EnvConfig,
    map: &ActionMap,
    state: &EnvState,
    action: &[f64],
    force_depth: Option<usize>,
) -> Result<StepOutcome, EnvError> {
    let dims = LayerDims::of(ep.model);
    let prefix = action_prefix(cfg.stop);
    let expected = prefix + map.dim(dims);
    if action.len() != expected {
        return Err(EnvError::ActionLength {
            expected,
            got: action.len(),
        });
    }
    let score = action[0];
    let halt_term = if cfg.lambda_halt != 0.0 {
        state.err / score.max(f64::MIN_POSITIVE) + cfg.rho * score
    } else {
        0.0
    };
    let halted = match (force_depth, cfg.stop) {
        (Some(_), _) => false,
        (None, StopRule::HaltingScore) => score <= cfg.epsilon,
        (None, StopRule::Tau { threshold }) => action[1] <= threshold,
    };
    if halted {
        return Ok(StepOutcome {
            state: state.clone(),
            reward: -cfg.lambda_halt * halt_term,
            done: true,
            halted: true,
        });
    }
    let next_sbl = apply_map(ep, cfg, map, state, &action[prefix..])?;
    let next = ep.observe(next_sbl, state.t + 1, cfg)?;
    let reward = compute_reward(ep.nmse(state.err), ep.nmse(next.err), cfg.eta_pen, halt_term, cfg.lambda_halt);
    let cap = force_depth.unwrap_or(cfg.max_layers).max(1);
    let done = next.t >= cap;
    Ok(StepOutcome {
        state: next,
        reward,
        done,
        halted: false,
    })
}

/// Anything that picks `[L, (τ,) u…]` from state features.
pub trait Policy {
    fn act(&self, features: &[f64], explore: bool, rng: &mut dyn rand::RngCore) -> Vec<f64>;
}

impl Policy for DdpgAgent {
    fn act(&self, features: &[f64], explore: bool, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        DdpgAgent::act(self, features, explore, rng)
    }
}

/// A constant action; with the map's plain action this runs plain SBL.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedAction(pub Vec<f64>);

impl Policy for FixedAction {
    fn act(&self, _features: &[f64], _explore: bool, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.0.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub features: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub score: f64,
    /// `‖h − ĥᵗ‖²` before the step.
    pub err: f64,
    /// NMSE after the step.
    pub nmse: f64,
    pub done: bool,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    pub final_features: Vec<f64>,
    pub initial_nmse: f64,
    pub final_nmse: f64,
    pub final_err: f64,
    pub layers_used: usize,
    pub h_hat: CVec,
    /// `Σ_t γ^t r_t`.
    pub discounted_return: f64,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Replay transitions in step order.
    pub fn transitions(&self) -> Vec<Transition> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| Transition {
                s: s.features.clone(),
                a: s.action.clone(),
                r: s.reward,
                s_next: self
                    .steps
                    .get(i + 1)
                    .map_or_else(|| self.final_features.clone(), |n| n.features.clone()),
                done: s.done,
                err: s.err,
            })
            .collect()
    }
}

/// Runs one episode from [`Episode::reset`] until `done`.
pub fn rollout(
    ep: &Episode,
    cfg: &EnvConfig,
    map: &ActionMap,
    policy: &dyn Policy,
    explore: bool,
    force_depth: Option<usize>,
    rng: &mut dyn rand::RngCore,
) -> Result<EpisodeTrace, EnvError> {
    let mut state = ep.reset(cfg)?;
    let initial_nmse = ep.nmse(state.err);
    let mut steps = Vec::new();
    let mut ret = 0.0;
    let mut disc = 1.0;
    loop {
        let action = policy.act(&state.features, explore, rng);
        let out = step(ep, cfg, map, &state, &action, force_depth)?;
        ret += disc * out.reward;
        disc *= cfg.discount;
        let done = out.done;
        steps.push(StepRecord {
            features: std::mem::take(&mut state.features),
            score: action[0],
            action,
            reward: out.reward,
            err: state.err,
            nmse: ep.nmse(out.state.err),
            done,
            halted: out.halted,
        });
        state = out.state;
        if done {
            break;
        }
    }
    Ok(EpisodeTrace {
        layers_used: state.t,
        steps,
        initial_nmse,
        final_nmse: ep.nmse(state.err),
        final_err: state.err,
        final_features: state.features,
        h_hat: state.h_hat,
        discounted_return: ret,
    })
}

/// Samples a score-free plain action for warm-up exploration:
/// the plain action plus uniform noise of width `spread`.
pub fn jittered_action<R: Rng + ?Sized>(base: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    base.iter()
        .map(|b| (b + spread * rng.random_range(-1.0..=1.0)).clamp(-1.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_maps_invert() {
        let r = (0.5, 10.0);
        for u in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert!((inv_lin(lin(u, r), r) - u).abs() < 1e-12);
            assert!((inv_log_lin(log_lin(u, r), r) - u).abs() < 1e-12);
        }
        assert!((log_lin(-1.0, r) - 0.5).abs() < 1e-12);
        assert!((log_lin(1.0, r) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn compact_plain_action_maps_to_unit_gains() {
        let r = CompactRanges::default();
        let u = ActionMap::Compact(r).plain_action(LayerDims { n: 4, t: 3, j: 5 });
        assert!((log_lin(u[0], r.alpha_gain) - 1.0).abs() < 1e-12);
        assert!(lin(u[1], r.shrink).abs() < 1e-12);
        assert!((log_lin(u[3], r.step_gain) - 1.0).abs() < 1e-12);
    }
}
