//! DDPG with hand-written backpropagation.
//!
//! Networks work on batches stored column-wise (`features × batch`). The
//! actor outputs the layer-parameter part of the action in `[−1, 1]`; the
//! halting score is produced by a separate [`HaltingNet`] that only sees the
//! residual slice of the state, and is trained on the halting cost with the
//! true channel error as supervision.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::bin::{Reader, Writer};
use crate::channel::FormatError;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error("network needs at least an input and an output layer, got sizes {0:?}")]
    Architecture(Vec<usize>),
    #[error("halting score {0} is outside (0, 1)")]
    HaltingScore(f64),
    #[error("length mismatch: {0} errors vs {1} scores")]
    Length(usize, usize),
    #[error("checkpoint: {0}")]
    Format(#[from] FormatError),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// `dy/dz` given the pre-activation `z` and output `y`.
    fn slope(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Result<Self, FormatError> {
        Ok(match c {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return Err(FormatError::Invalid(format!("activation code {c}"))),
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected network `y⁽ˡ⁺¹⁾ = φ(W y⁽ˡ⁾ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Mat>,
    pub biases: Vec<Vector>,
    pub activations: Vec<Activation>,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Layer inputs; `outputs[0]` is the network input.
    outputs: Vec<Mat>,
    pre: Vec<Mat>,
}

/// Parameter gradients, summed over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vector>,
}

impl MlpGrads {
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization; the last layer uses
    /// `±final_scale` instead when given.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_scale: Option<f64>,
        rng: &mut R,
    ) -> Result<Self, DdpgError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DdpgError::Architecture(sizes.to_vec()));
        }
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut activations = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l + 1 == layers;
            let bound = match (last, final_scale) {
                (true, Some(s)) => s,
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            weights.push(Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound)));
            biases.push(Vector::from_fn(fan_out, |_, _| rng.random_range(-bound..=bound)));
            activations.push(if last { output } else { hidden });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activations,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Batched forward pass; columns of `x` are samples.
    pub fn forward(&self, x: &Mat) -> (Mat, MlpCache) {
        let mut outputs = Vec::with_capacity(self.weights.len() + 1);
        let mut pre = Vec::with_capacity(self.weights.len());
        outputs.push(x.clone());
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = w * outputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let y = z.map(|v| act.apply(v));
            pre.push(z);
            outputs.push(y);
        }
        let y = outputs.last().unwrap().clone();
        (y, MlpCache { outputs, pre })
    }

    pub fn predict(&self, x: &Mat) -> Mat {
        let mut h = x.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = w * &h;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            z.apply(|v| *v = act.apply(*v));
            h = z;
        }
        h
    }

    pub fn predict_one(&self, x: &[f64]) -> Vec<f64> {
        self.predict(&Mat::from_column_slice(x.len(), 1, x)).as_slice().to_vec()
    }

    /// Backward pass for upstream gradient `dy`; returns the input gradient and
    /// parameter gradients summed over the batch.
    pub fn backward(&self, cache: &MlpCache, dy: &Mat) -> (Mat, MlpGrads) {
        let layers = self.weights.len();
        let mut gw = vec![Mat::zeros(0, 0); layers];
        let mut gb = vec![Vector::zeros(0); layers];
        let mut delta = dy.clone();
        for l in (0..layers).rev() {
            let act = self.activations[l];
            let z = &cache.pre[l];
            let y = &cache.outputs[l + 1];
            for ((d, zv), yv) in delta.iter_mut().zip(z.iter()).zip(y.iter()) {
                *d *= act.slope(*zv, *yv);
            }
            gw[l] = &delta * cache.outputs[l].transpose();
            gb[l] = delta.column_sum();
            delta = self.weights[l].tr_mul(&delta);
        }
        (delta, MlpGrads { weights: gw, biases: gb })
    }
}

/// `target ← τ·main + (1 − τ)·target`.
pub fn soft_update(main: &Mlp, target: &mut Mlp, tau: f64) {
    for (t, m) in target.params_mut().zip(main.params()) {
        *t = tau * m + (1.0 - tau) * *t;
    }
}

/// Adam over a flat parameter sequence.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step `θ ← θ − lr·m̂/(√v̂ + ε)`.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = f64>) {
        self.t = self.t.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One environment step as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    /// Full action `[L, Θ…]`.
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    /// `‖h − ĥ‖²` at `s`, the halting network's supervision target.
    pub err: f64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.entries.get(i)
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.entries[rng.random_range(0..self.entries.len())]).collect()
    }
}

/// Halting-score network on the residual `y − Xĥ` (as re/im features).
#[derive(Debug, Clone, PartialEq)]
pub enum HaltingNet {
    /// `σ(p₁‖Q r‖² + p₂)` with `p₁ = exp(log_p1) > 0`.
    Quadratic { q: Mat, log_p1: f64, p2: f64 },
    /// `r` fully connected layers with a sigmoid scalar head.
    Deep(Mlp),
}

#[derive(Debug, Clone)]
pub enum HaltingCache {
    Quadratic { qr: Mat, s: Vec<f64>, out: Vec<f64>, x: Mat },
    Deep(MlpCache, Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltingKind {
    Quadratic,
    Deep,
}

impl HaltingNet {
    /// `hidden` are the widths of the hidden layers of the deep form; the
    /// quadratic form uses `hidden[0]` (or the input size) rows for `Q`.
    pub fn new<R: Rng + ?Sized>(kind: HaltingKind, input: usize, hidden: &[usize], rng: &mut R) -> Result<Self, DdpgError> {
        match kind {
            HaltingKind::Quadratic => {
                let rows = hidden.first().copied().unwrap_or(input);
                let bound = 1.0 / (input as f64).sqrt();
                Ok(HaltingNet::Quadratic {
                    q: Mat::from_fn(rows, input, |_, _| rng.random_range(-bound..=bound)),
                    log_p1: 0.0,
                    p2: 0.0,
                })
            }
            HaltingKind::Deep => {
                let mut sizes = vec![input];
                sizes.extend_from_slice(hidden);
                sizes.push(1);
                Ok(HaltingNet::Deep(Mlp::new(&sizes, Activation::Tanh, Activation::Sigmoid, None, rng)?))
            }
        }
    }

    pub fn kind(&self) -> HaltingKind {
        match self {
            HaltingNet::Quadratic { .. } => HaltingKind::Quadratic,
            HaltingNet::Deep(_) => HaltingKind::Deep,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            HaltingNet::Quadratic { q, .. } => q.ncols(),
            HaltingNet::Deep(m) => m.input_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            HaltingNet::Quadratic { q, .. } => q.len() + 2,
            HaltingNet::Deep(m) => m.param_count(),
        }
    }

    pub fn params_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            HaltingNet::Quadratic { q, log_p1, p2 } => {
                Box::new(q.iter_mut().chain(std::iter::once(log_p1)).chain(std::iter::once(p2)))
            }
            HaltingNet::Deep(m) => Box::new(m.params_mut()),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Vec<f64>, HaltingCache) {
        match self {
            HaltingNet::Quadratic { q, log_p1, p2 } => {
                let qr = q * x;
                let s: Vec<f64> = qr.column_iter().map(|c| c.norm_squared()).collect();
                let out: Vec<f64> = s.iter().map(|s| sigmoid(log_p1.exp() * s + p2)).collect();
                (
                    out.clone(),
                    HaltingCache::Quadratic {
                        qr,
                        s,
                        out,
                        x: x.clone(),
                    },
                )
            }
            HaltingNet::Deep(m) => {
                let (y, cache) = m.forward(x);
                let out: Vec<f64> = y.iter().copied().collect();
                (out.clone(), HaltingCache::Deep(cache, out))
            }
        }
    }

    pub fn score(&self, residual_features: &[f64]) -> f64 {
        let x = Mat::from_column_slice(residual_features.len(), 1, residual_features);
        self.forward(&x).0[0]
    }

    /// Parameter gradients (in [`HaltingNet::params_mut`] order) for upstream
    /// `dL` per sample.
    pub fn backward(&self, cache: &HaltingCache, d_out: &[f64]) -> Vec<f64> {
        match (self, cache) {
            (HaltingNet::Quadratic { log_p1, .. }, HaltingCache::Quadratic { qr, s, out, x }) => {
                let p1 = log_p1.exp();
                let mut gq = Mat::zeros(qr.nrows(), x.nrows());
                let (mut g_lp1, mut g_p2) = (0.0, 0.0);
                for k in 0..out.len() {
                    let dz = d_out[k] * out[k] * (1.0 - out[k]);
                    g_lp1 += dz * p1 * s[k];
                    g_p2 += dz;
                    // d‖Qx‖²/dQ = 2 (Qx) xᵀ
                    gq += qr.column(k) * x.column(k).transpose() * (2.0 * p1 * dz);
                }
                gq.iter().copied().chain([g_lp1, g_p2]).collect()
            }
            (HaltingNet::Deep(m), HaltingCache::Deep(c, _)) => {
                let dy = Mat::from_row_slice(1, d_out.len(), d_out);
                m.backward(c, &dy).1.iter().collect()
            }
            _ => panic!("halting cache does not match the network form"),
        }
    }
}

/// `Σ_t e_t/L_t + ρ L_t`.
pub fn halting_cost(errors: &[f64], scores: &[f64], rho: f64) -> Result<f64, DdpgError> {
    if errors.len() != scores.len() {
        return Err(DdpgError::Length(errors.len(), scores.len()));
    }
    let mut total = 0.0;
    for (&e, &l) in errors.iter().zip(scores) {
        if !(l > 0.0 && l < 1.0) {
            return Err(DdpgError::HaltingScore(l));
        }
        total += e / l + rho * l;
    }
    Ok(total)
}

/// `(nmse_prev − nmse_cur − η) − λ·halt_term`.
pub fn compute_reward(nmse_prev: f64, nmse_cur: f64, eta_pen: f64, halt_term: f64, lambda_halt: f64) -> f64 {
    (nmse_prev - nmse_cur - eta_pen) - lambda_halt * halt_term
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub discount: f64,
    pub soft_tau: f64,
    /// Hard target copy every this many updates instead of Polyak averaging.
    pub hard_copy_period: Option<usize>,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub halting_lr: f64,
    pub buffer_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Environment steps per gradient update.
    pub update_period: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub halting_kind: HaltingKind,
    pub halting_hidden: Vec<usize>,
    pub lambda_halt: f64,
    pub rho: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            discount: 0.9,
            soft_tau: 0.005,
            hard_copy_period: None,
            batch_size: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            halting_lr: 1e-3,
            buffer_capacity: 100_000,
            warmup: 1_000,
            update_period: 1,
            noise_start: 0.3,
            noise_end: 0.02,
            actor_hidden: vec![64, 64, 64],
            critic_hidden: vec![64, 64, 64],
            halting_kind: HaltingKind::Quadratic,
            halting_hidden: vec![64, 64, 64],
            lambda_halt: 1.0,
            rho: 1.0,
        }
    }
}

/// Where the residual features sit inside the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualSlice {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub td_loss: f64,
    pub policy_objective: f64,
    pub halting_cost: f64,
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub halting: HaltingNet,
    pub buffer: ReplayBuffer,
    pub noise_sigma: f64,
    pub config: DdpgConfig,
    pub residual: ResidualSlice,
    actor_opt: Adam,
    critic_opt: Adam,
    halting_opt: Adam,
    updates: usize,
    steps: usize,
}

fn stack(rows: usize, cols: &[&[f64]]) -> Mat {
    let mut m = Mat::zeros(rows, cols.len());
    for (k, c) in cols.iter().enumerate() {
        m.column_mut(k).copy_from_slice(c);
    }
    m
}

impl DdpgAgent {
    /// `state_dim` features, `action_dim` layer-parameter outputs (the
    /// halting score is an extra leading action component).
    pub fn new<R: Rng + ?Sized>(
        config: DdpgConfig,
        state_dim: usize,
        action_dim: usize,
        residual: ResidualSlice,
        rng: &mut R,
    ) -> Result<Self, DdpgError> {
        let mut a_sizes = vec![state_dim];
        a_sizes.extend(&config.actor_hidden);
        a_sizes.push(action_dim);
        let actor = Mlp::new(&a_sizes, Activation::Relu, Activation::Tanh, Some(3e-3), rng)?;
        let mut c_sizes = vec![state_dim + 1 + action_dim];
        c_sizes.extend(&config.critic_hidden);
        c_sizes.push(1);
        let critic = Mlp::new(&c_sizes, Activation::Relu, Activation::Identity, Some(3e-3), rng)?;
        let halting = HaltingNet::new(config.halting_kind, residual.len, &config.halting_hidden, rng)?;
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor_opt: Adam::new(config.actor_lr, actor.param_count()),
            critic_opt: Adam::new(config.critic_lr, critic.param_count()),
            halting_opt: Adam::new(config.halting_lr, halting.param_count()),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            noise_sigma: config.noise_start,
            actor,
            critic,
            halting,
            residual,
            config,
            updates: 0,
            steps: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Layer-parameter action components (without the halting score).
    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    fn residual_of<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[self.residual.offset..self.residual.offset + self.residual.len]
    }

    pub fn halting_score(&self, s: &[f64]) -> f64 {
        self.halting.score(self.residual_of(s))
    }

    /// `[L, Θ…]`: halting score, then the actor output plus optional Gaussian
    /// noise, clipped to `[−1, 1]`.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], explore: bool, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.action_dim());
        out.push(self.halting_score(s));
        let mu = self.actor.predict_one(s);
        for m in mu {
            let noise = if explore && self.noise_sigma > 0.0 {
                self.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            out.push((m + noise).clamp(-1.0, 1.0));
        }
        out
    }

    /// Linear decay of the exploration noise; `progress` in `[0, 1]`.
    pub fn set_progress(&mut self, progress: f64) {
        let p = progress.clamp(0.0, 1.0);
        self.noise_sigma = self.config.noise_start + (self.config.noise_end - self.config.noise_start) * p;
    }

    /// Replaces the halting network with a fresh one of `kind` (and resets
    /// its optimizer).
    pub fn reset_halting<R: Rng + ?Sized>(&mut self, kind: HaltingKind, rng: &mut R) -> Result<(), DdpgError> {
        self.halting = HaltingNet::new(kind, self.residual.len, &self.config.halting_hidden, rng)?;
        self.halting_opt = Adam::new(self.halting_opt.lr, self.halting.param_count());
        Ok(())
    }

    /// Sets every learning rate to `factor` times its configured value.
    pub fn scale_learning_rates(&mut self, factor: f64) {
        self.actor_opt.lr = self.config.actor_lr * factor;
        self.critic_opt.lr = self.config.critic_lr * factor;
        self.halting_opt.lr = self.config.halting_lr * factor;
    }

    /// Gradient updates done so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    fn critic_input(&self, states: &Mat, scores: &[f64], actions: &Mat) -> Mat {
        let sd = states.nrows();
        let ad = actions.nrows();
        let mut x = Mat::zeros(sd + 1 + ad, states.ncols());
        x.rows_mut(0, sd).copy_from(states);
        for (k, l) in scores.iter().enumerate() {
            x[(sd, k)] = *l;
        }
        x.rows_mut(sd + 1, ad).copy_from(actions);
        x
    }

    fn scores(&self, states: &Mat) -> Vec<f64> {
        let r = states.rows(self.residual.offset, self.residual.len).into_owned();
        self.halting.forward(&r).0
    }

    /// `r + γ(1 − done)·Q′(s′, [L(s′), μ′(s′)])`.
    pub fn td_targets(&self, batch: &[&Transition]) -> Vec<f64> {
        let sd = self.state_dim();
        let next = stack(sd, &batch.iter().map(|t| t.s_next.as_slice()).collect::<Vec<_>>());
        let a_next = self.target_actor.predict(&next);
        let l_next = self.scores(&next);
        let q_next = self.target_critic.predict(&self.critic_input(&next, &l_next, &a_next));
        batch
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let cont = if t.done { 0.0 } else { 1.0 };
                t.r + self.config.discount * cont * q_next[(0, k)]
            })
            .collect()
    }

    /// One step on the mean squared TD error; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let targets = self.td_targets(batch);
        let sd = self.state_dim();
        let states = stack(sd, &batch.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>());
        let ad = self.action_dim();
        let actions = stack(ad, &batch.iter().map(|t| &t.a[1..]).collect::<Vec<_>>());
        let scores: Vec<f64> = batch.iter().map(|t| t.a[0]).collect();
        let (q, cache) = self.critic.forward(&self.critic_input(&states, &scores, &actions));
        let b = batch.len() as f64;
        let mut loss = 0.0;
        let dq = Mat::from_fn(1, batch.len(), |_, k| {
            let e = q[(0, k)] - targets[k];
            loss += e * e / b;
            2.0 * e / b
        });
        let (_, grads) = self.critic.backward(&cache, &dq);
        self.critic_opt.step(self.critic.params_mut(), grads.iter());
        loss
    }

    /// One ascent step on mean `Q(s, [L(s), μ(s)])` through the critic's
    /// action input; returns the pre-step objective.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let sd = self.state_dim();
        let states = stack(sd, &batch.iter().map(|t| t.s.as_slice()).collect::<Vec<_>>());
        let (actions, a_cache) = self.actor.forward(&states);
        let scores = self.scores(&states);
        let (q, c_cache) = self.critic.forward(&self.critic_input(&states, &scores, &actions));
        let b = batch.len() as f64;
        let objective = q.sum() / b;
        // descend on −Q
        let dq = Mat::from_element(1, batch.len(), -1.0 / b);
        let (dx, _) = self.critic.backward(&c_cache, &dq);
        let da = dx.rows(sd + 1, self.action_dim()).into_owned();
        let (_, grads) = self.actor.backward(&a_cache, &da);
        self.actor_opt.step(self.actor.params_mut(), grads.iter());
        objective
    }

    /// Supervised step on `λ·mean(e/L + ρL)` for the halting network; returns
    /// the pre-step mean cost.
    pub fn halting_update(&mut self, batch: &[&Transition]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let r = stack(
            self.residual.len,
            &batch.iter().map(|t| self.residual_of(&t.s)).collect::<Vec<_>>(),
        );
        let (scores, cache) = self.halting.forward(&r);
        let b = batch.len() as f64;
        let rho = self.config.rho;
        let lam = self.config.lambda_halt;
        let mut cost = 0.0;
        let d: Vec<f64> = batch
            .iter()
            .zip(&scores)
            .map(|(t, &l)| {
                let l = l.max(1e-12);
                cost += (t.err / l + rho * l) / b;
                lam * (rho - t.err / (l * l)) / b
            })
            .collect();
        if lam > 0.0 {
            let grads = self.halting.backward(&cache, &d);
            self.halting_opt.step(self.halting.params_mut(), grads.into_iter());
        }
        cost
    }

    pub fn update_targets(&mut self) {
        match self.config.hard_copy_period {
            Some(p) if p > 0 => {
                if self.updates % p == 0 {
                    self.target_actor = self.actor.clone();
                    self.target_critic = self.critic.clone();
                }
            }
            _ => {
                soft_update(&self.actor, &mut self.target_actor, self.config.soft_tau);
                soft_update(&self.critic, &mut self.target_critic, self.config.soft_tau);
            }
        }
    }

    /// Records a transition and, when due, runs one critic/actor/halting update.
    pub fn observe<R: Rng + ?Sized>(&mut self, t: Transition, rng: &mut R) -> Option<UpdateStats> {
        self.buffer.push(t);
        self.steps += 1;
        let cfg = &self.config;
        if self.buffer.len() < cfg.warmup.max(cfg.batch_size) || self.steps % cfg.update_period.max(1) != 0 {
            return None;
        }
        let n = cfg.batch_size;
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.buffer.len())).collect();
        let owned: Vec<Transition> = idx.iter().map(|&i| self.buffer.entries[i].clone()).collect();
        let batch: Vec<&Transition> = owned.iter().collect();
        let td_loss = self.critic_update(&batch);
        let policy_objective = self.actor_update(&batch);
        let halting_cost = self.halting_update(&batch);
        self.updates += 1;
        self.update_targets();
        Some(UpdateStats {
            td_loss,
            policy_objective,
            halting_cost,
        })
    }

    pub fn is_finite(&self) -> bool {
        let halting = match &self.halting {
            HaltingNet::Deep(m) => m.params().all(f64::is_finite),
            HaltingNet::Quadratic { q, log_p1, p2 } => {
                q.iter().all(|v| v.is_finite()) && log_p1.is_finite() && p2.is_finite()
            }
        };
        halting && self.actor.params().chain(self.critic.params()).all(f64::is_finite)
    }

    /// Serializes networks and config; `meta` is an opaque caller string
    /// stored alongside (e.g. the experiment config).
    pub fn save(&self, meta: &str) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.str(meta);
        w.u64(self.residual.offset as u64);
        w.u64(self.residual.len as u64);
        w.f64(self.noise_sigma);
        for net in [&self.actor, &self.critic, &self.target_actor, &self.target_critic] {
            write_mlp(&mut w, net);
        }
        match &self.halting {
            HaltingNet::Quadratic { q, log_p1, p2 } => {
                w.u32(0);
                w.u64(q.nrows() as u64);
                w.u64(q.ncols() as u64);
                w.f64s(q.iter().copied());
                w.f64(*log_p1);
                w.f64(*p2);
            }
            HaltingNet::Deep(m) => {
                w.u32(1);
                write_mlp(&mut w, m);
            }
        }
        w.buf
    }

    /// Inverse of [`DdpgAgent::save`]. Optimizer moments and the replay
    /// buffer are not stored; a loaded agent starts them fresh.
    pub fn load(bytes: &[u8]) -> Result<(Self, String), DdpgError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CKPT_MAGIC {
            return Err(FormatError::BadMagic("checkpoint").into());
        }
        let v = r.u32()?;
        if v != CKPT_VERSION {
            return Err(FormatError::Version {
                found: v,
                expected: CKPT_VERSION,
            }
            .into());
        }
        let config: DdpgConfig = serde_json::from_str(&r.str()?)?;
        let meta = r.str()?;
        let residual = ResidualSlice {
            offset: r.u64()? as usize,
            len: r.u64()? as usize,
        };
        let noise_sigma = r.f64()?;
        let actor = read_mlp(&mut r)?;
        let critic = read_mlp(&mut r)?;
        let target_actor = read_mlp(&mut r)?;
        let target_critic = read_mlp(&mut r)?;
        let halting = match r.u32()? {
            0 => {
                let rows = r.len(0)?;
                let cols = r.len(0)?;
                let n = rows.checked_mul(cols).ok_or_else(|| FormatError::Invalid("Q size".into()))?;
                let q = Mat::from_column_slice(rows, cols, &r.f64s(n)?);
                HaltingNet::Quadratic {
                    q,
                    log_p1: r.f64()?,
                    p2: r.f64()?,
                }
            }
            1 => HaltingNet::Deep(read_mlp(&mut r)?),
            k => return Err(FormatError::Invalid(format!("halting form {k}")).into()),
        };
        if !r.is_at_end() {
            return Err(FormatError::Invalid("trailing bytes".into()).into());
        }
        if actor.input_dim() != critic.input_dim() - 1 - actor.output_dim() {
            return Err(FormatError::Invalid("actor/critic dimensions disagree".into()).into());
        }
        Ok((
            Self {
                actor_opt: Adam::new(config.actor_lr, actor.param_count()),
                critic_opt: Adam::new(config.critic_lr, critic.param_count()),
                halting_opt: Adam::new(config.halting_lr, halting.param_count()),
                buffer: ReplayBuffer::new(config.buffer_capacity),
                noise_sigma,
                actor,
                critic,
                target_actor,
                target_critic,
                halting,
                residual,
                config,
                updates: 0,
                steps: 0,
            },
            meta,
        ))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"ADUCKPT\0";
const CKPT_VERSION: u32 = 1;

fn write_mlp(w: &mut Writer, m: &Mlp) {
    w.u64(m.sizes.len() as u64);
    for s in &m.sizes {
        w.u64(*s as u64);
    }
    for a in &m.activations {
        w.u32(a.code());
    }
    for (wt, b) in m.weights.iter().zip(&m.biases) {
        w.f64s(wt.iter().copied());
        w.f64s(b.iter().copied());
    }
}

fn read_mlp(r: &mut Reader) -> Result<Mlp, FormatError> {
    let layers = r.len(8)?;
    if layers < 2 {
        return Err(FormatError::Invalid(format!("{layers} layer sizes")));
    }
    let sizes: Vec<usize> = (0..layers).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
    let activations = (0..layers - 1)
        .map(|_| r.u32().and_then(Activation::from_code))
        .collect::<Result<Vec<_>, _>>()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layers - 1 {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let n = fi
            .checked_mul(fo)
            .ok_or_else(|| FormatError::Invalid("layer size overflow".into()))?;
        let wt = r.f64s(n)?;
        weights.push(Mat::from_column_slice(fo, fi, &wt));
        biases.push(Vector::from_vec(r.f64s(fo)?));
    }
    Ok(Mlp {
        sizes,
        weights,
        biases,
        activations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_network_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mlp::new(&[3, 3], Activation::Identity, Activation::Identity, None, &mut rng).unwrap();
        m.weights[0] = Mat::identity(3, 3);
        m.biases[0] = Vector::zeros(3);
        assert_eq!(m.predict_one(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sigmoid_unit_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mlp::new(&[1, 1], Activation::Sigmoid, Activation::Sigmoid, None, &mut rng).unwrap();
        m.weights[0][(0, 0)] = 1.0;
        m.biases[0][0] = 0.0;
        let x = Mat::from_element(1, 1, 0.0);
        let (y, cache) = m.forward(&x);
        assert_eq!(y[(0, 0)], 0.5);
        let (dx, _) = m.backward(&cache, &Mat::from_element(1, 1, 1.0));
        assert_eq!(dx[(0, 0)], 0.25);
    }

    #[test]
    fn cost_and_reward_arithmetic() {
        assert!((halting_cost(&[0.01], &[0.1], 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(halting_cost(&[0.01], &[0.0], 1.0).is_err());
        assert!(halting_cost(&[0.01, 0.2], &[0.5], 1.0).is_err());
        assert!((compute_reward(0.3, 0.3, 0.01, 0.0, 0.0) + 0.01).abs() < 1e-15);
        assert!((compute_reward(0.30, 0.25, 0.01, 0.0, 0.0) - 0.04).abs() < 1e-12);
        assert!((compute_reward(0.3, 0.29, 0.01, 0.2, 1.0) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn replay_is_fifo_and_bounded() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(Transition {
                s: vec![i as f64],
                a: vec![],
                r: 0.0,
                s_next: vec![],
                done: false,
                err: 0.0,
            });
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().s[0], 2.0);
    }
}
