//! Experiment configuration, dataset plumbing, training and evaluation
//! drivers, and metrics output.
//!
//! Every driver is a function of the config and its seeds: datasets, training
//! episodes and evaluation rollouts draw from fixed ChaCha streams, and
//! per-sample work that runs in parallel is reduced in input order. Wall-clock
//! times are the only nondeterministic output and are written as `0` unless
//! `record_wall_time` is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    generate_pilots, read_dataset, write_dataset, ArrayGeometry, ChannelError, Dataset, DatasetSpec, Grid,
    RayModel, SensingModel,
};
use crate::ddpg::{DdpgAgent, DdpgConfig, DdpgError, ReplayBuffer, Transition};
use crate::environment::{
    action_prefix, feature_len, residual_slice, rollout, ActionMap, EnvConfig, EnvError, Episode, EpisodeTrace,
    Policy, StopRule,
};
use crate::linalg::{to_db, CVec};
use crate::par::Execution;
use crate::sbl::{run_sbl, run_standard_sbl, SblError, SblHyper};
use crate::unfolding::LayerDims;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ddpg(#[from] DdpgError),
    #[error(transparent)]
    Sbl(#[from] SblError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at episode {episode}: {what}")]
    Divergence { episode: usize, what: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Episodes between validation passes.
    pub validate_every: usize,
    /// Validation uses the first this many validation samples.
    pub val_samples: usize,
    /// Linear decay of all learning rates from 1 to `lr_final_ratio`.
    pub lr_decay: bool,
    pub lr_final_ratio: f64,
    /// After training, the halting network is refit on greedy rollouts of the
    /// selected policy over this many training samples...
    pub halting_fit_samples: usize,
    /// ...for this many minibatch steps.
    pub halting_fit_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 1500,
            validate_every: 100,
            val_samples: 100,
            lr_decay: false,
            lr_final_ratio: 0.01,
            halting_fit_samples: 400,
            halting_fit_steps: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub epsilon_sweep: Vec<f64>,
    /// Fixed-depth policies run for `L ∈ {fixed_depth_min, …, T_max}`.
    pub fixed_depth_min: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon_sweep: vec![0.2, 0.25, 0.3, 0.35],
            fixed_depth_min: 2,
        }
    }
}

/// Smaller system evaluated through zero padding to the trained dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroPadConfig {
    pub pilot_len: usize,
    pub grid_size: usize,
}

impl Default for ZeroPadConfig {
    fn default() -> Self {
        Self {
            pilot_len: 12,
            grid_size: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_antennas: usize,
    /// Antenna spacing over wavelength.
    pub spacing_ratio: f64,
    pub grid_size: usize,
    pub pilot_len: usize,
    pub pilot_power: f64,
    /// SNR of the generated datasets.
    pub snr_db: f64,
    pub snr_sweep_db: Vec<f64>,
    pub rays_min: usize,
    pub rays_max: usize,
    pub angle_spread_deg: f64,
    pub center_margin_deg: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Seeds pilots, datasets and observation noise.
    pub data_seed: u64,
    /// Seeds network initialization, exploration and minibatches.
    pub train_seed: u64,
    pub sbl: SblHyper,
    pub env: EnvConfig,
    pub action: ActionMap,
    pub blackbox_action: ActionMap,
    pub ddpg: DdpgConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub zero_pad: ZeroPadConfig,
    pub execution: Execution,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_antennas: 32,
            spacing_ratio: 0.5,
            grid_size: 64,
            pilot_len: 16,
            pilot_power: 1.0,
            snr_db: 20.0,
            snr_sweep_db: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            rays_min: 3,
            rays_max: 8,
            angle_spread_deg: RayModel::DEFAULT_SPREAD_DEG,
            center_margin_deg: RayModel::DEFAULT_MARGIN_DEG,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
            data_seed: 1,
            train_seed: 0,
            sbl: SblHyper::default(),
            env: EnvConfig::default(),
            action: ActionMap::default(),
            blackbox_action: ActionMap::black_box(),
            ddpg: DdpgConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            zero_pad: ZeroPadConfig::default(),
            execution: Execution::Parallel,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_antennas == 0 || self.grid_size == 0 || self.pilot_len == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.snr_sweep_db.is_empty() {
            return bad("snr_sweep_db is empty".into());
        }
        if self.rays_min == 0 || self.rays_min > self.rays_max {
            return bad(format!("ray range [{}, {}]", self.rays_min, self.rays_max));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if !(self.ddpg.discount > 0.0 && self.ddpg.discount < 1.0) {
            return bad(format!("discount {} not in (0, 1)", self.ddpg.discount));
        }
        if !(self.ddpg.soft_tau > 0.0 && self.ddpg.soft_tau <= 1.0) {
            return bad(format!("soft_tau {} not in (0, 1]", self.ddpg.soft_tau));
        }
        if self.zero_pad.pilot_len > self.pilot_len || self.zero_pad.grid_size > self.grid_size {
            return bad("zero_pad dimensions exceed the trained dimensions".into());
        }
        if self.eval.epsilon_sweep.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad("epsilon_sweep values must lie in (0, 1)".into());
        }
        self.env_config().validate()?;
        Ok(())
    }

    /// Environment config with the SBL hyperparameters filled in.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            hyper: self.sbl.clone(),
            ..self.env.clone()
        }
    }

    /// Agent config; `rho` follows the environment's.
    pub fn agent_config(&self) -> DdpgConfig {
        DdpgConfig {
            rho: self.env.rho,
            ..self.ddpg.clone()
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry, HarnessError> {
        Ok(ArrayGeometry::new(self.n_antennas, self.spacing_ratio)?)
    }

    fn spec(&self, n: usize) -> DatasetSpec {
        DatasetSpec {
            n_samples: n,
            rays_min: self.rays_min,
            rays_max: self.rays_max,
            snr_db: self.snr_db,
            angle_spread_deg: self.angle_spread_deg,
            center_margin_deg: self.center_margin_deg,
            normalize_gain: true,
        }
    }

    fn seed_for(&self, role: u64) -> u64 {
        self.data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(role)
    }

    /// Seed of the noise used for SNR sweeps; shared by every scheme.
    pub fn noise_seed(&self) -> u64 {
        self.seed_for(4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const DATASET_FILES: [&str; 3] = ["train.bin", "val.bin", "test.bin"];

/// Train/validation/test sets with disjoint seeds and one shared pilot
/// matrix.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets, HarnessError> {
    let geom = cfg.geometry()?;
    let grid = Grid::uniform(cfg.grid_size)?;
    let mut pilot_rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(0));
    let pilot = generate_pilots(cfg.pilot_len, &geom, cfg.pilot_power, &mut pilot_rng)?;
    let make = |n, role| {
        Dataset::generate_with_pilot(geom, grid.clone(), pilot.clone(), &cfg.spec(n), cfg.seed_for(role), cfg.execution)
    };
    Ok(Datasets {
        train: make(cfg.train_size, 1)?,
        val: make(cfg.val_size, 2)?,
        test: make(cfg.test_size, 3)?,
    })
}

pub fn write_datasets(data: &Datasets, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (d, name) in [&data.train, &data.val, &data.test].into_iter().zip(DATASET_FILES) {
        write_dataset(d, &dir.join(name))?;
    }
    Ok(())
}

pub fn read_datasets(dir: &Path) -> Result<Datasets, HarnessError> {
    let read = |name: &str| read_dataset(&dir.join(name));
    Ok(Datasets {
        train: read(DATASET_FILES[0])?,
        val: read(DATASET_FILES[1])?,
        test: read(DATASET_FILES[2])?,
    })
}

/// One CSV line: a scheme evaluated at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scheme: String,
    pub sweep_var: String,
    pub sweep_value: f64,
    /// Mean over samples of `‖ĥ − h‖²/‖h‖²`.
    pub nmse: f64,
    pub nmse_db: f64,
    pub mean_layers: f64,
    /// Layer (or iteration) count → number of samples.
    pub histogram: BTreeMap<usize, usize>,
    pub seconds: f64,
}

pub const CSV_HEADER: [&str; 7] = [
    "scheme",
    "sweep_var",
    "sweep_value",
    "nmse_db",
    "mean_layers",
    "histogram",
    "seconds",
];

impl MetricsRow {
    /// `depth:count` pairs joined by `;`.
    pub fn histogram_field(&self) -> String {
        self.histogram
            .iter()
            .map(|(d, c)| format!("{d}:{c}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.scheme.clone(),
            r.sweep_var.clone(),
            r.sweep_value.to_string(),
            r.nmse_db.to_string(),
            r.mean_layers.to_string(),
            r.histogram_field(),
            r.seconds.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// A scheme's per-sample results with their summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeRun {
    pub row: MetricsRow,
    pub nmse: Vec<f64>,
    pub layers: Vec<usize>,
}

fn summarize(
    scheme: &str,
    sweep_var: &str,
    sweep_value: f64,
    nmse: Vec<f64>,
    layers: Vec<usize>,
    seconds: f64,
) -> SchemeRun {
    let n = nmse.len().max(1) as f64;
    let mean = nmse.iter().sum::<f64>() / n;
    let mut histogram = BTreeMap::new();
    for l in &layers {
        *histogram.entry(*l).or_insert(0) += 1;
    }
    SchemeRun {
        row: MetricsRow {
            scheme: scheme.into(),
            sweep_var: sweep_var.into(),
            sweep_value,
            nmse: mean,
            nmse_db: to_db(mean),
            mean_layers: layers.iter().sum::<usize>() as f64 / n,
            histogram,
            seconds,
        },
        nmse,
        layers,
    }
}

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn start(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn seconds(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

/// Runs the off-grid (`off_grid = true`) or on-grid SBL baseline to
/// convergence on every sample.
pub fn eval_sbl(
    model: &SensingModel,
    data: &Dataset,
    hyper: &SblHyper,
    off_grid: bool,
    exec: Execution,
) -> Result<(Vec<f64>, Vec<usize>), HarnessError> {
    let results = exec.map(&data.samples, |s| {
        let r = if off_grid {
            run_sbl(model, &s.y, Some(&s.h), hyper)
        } else {
            run_standard_sbl(model, &s.y, Some(&s.h), hyper)
        }?;
        Ok::<_, SblError>((r.nmse.unwrap_or(f64::NAN), r.iters_used))
    });
    let mut nmse = Vec::with_capacity(results.len());
    let mut iters = Vec::with_capacity(results.len());
    for r in results {
        let (n, i) = r?;
        nmse.push(n);
        iters.push(i);
    }
    Ok((nmse, iters))
}

/// `sbl_offgrid` and `sbl_standard` rows over the SNR sweep.
pub fn run_sbl_baselines(
    cfg: &ExperimentConfig,
    model: &SensingModel,
    test: &Dataset,
) -> Result<Vec<SchemeRun>, HarnessError> {
    let mut out = Vec::new();
    for &snr in &cfg.snr_sweep_db {
        let data = test.reobserve(snr, cfg.noise_seed());
        for (scheme, off_grid) in [("sbl_offgrid", true), ("sbl_standard", false)] {
            let clock = Clock::start(cfg.record_wall_time);
            let (nmse, iters) = eval_sbl(model, &data, &cfg.sbl, off_grid, cfg.execution)?;
            out.push(summarize(scheme, "snr_db", snr, nmse, iters, clock.seconds()));
        }
    }
    Ok(out)
}

/// A greedy full-length rollout of one sample, from which every stop rule
/// and fixed depth can be read off: the policy is deterministic and halting
/// never changes the state, so a halted episode is a prefix of this one.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// NMSE of `ĥᵗ` for `t = 0..=T_max`.
    pub nmse_by_depth: Vec<f64>,
    /// Halting score `L_t` for `t = 0..T_max`.
    pub scores: Vec<f64>,
    /// Value the stop rule compares against its threshold (`L_t` or `τ_t`).
    pub stop_values: Vec<f64>,
    /// `‖h − ĥᵗ‖²` for `t = 0..T_max`.
    pub errs: Vec<f64>,
    pub n_rays: usize,
}

impl SampleTrace {
    pub fn from_episode(trace: &EpisodeTrace, stop: StopRule, n_rays: usize) -> Self {
        let mut nmse_by_depth = vec![trace.initial_nmse];
        nmse_by_depth.extend(trace.steps.iter().map(|s| s.nmse));
        let stop_idx = match stop {
            StopRule::HaltingScore => 0,
            StopRule::Tau { .. } => 1,
        };
        Self {
            nmse_by_depth,
            scores: trace.steps.iter().map(|s| s.score).collect(),
            stop_values: trace.steps.iter().map(|s| s.action[stop_idx]).collect(),
            errs: trace.steps.iter().map(|s| s.err).collect(),
            n_rays,
        }
    }

    pub fn max_depth(&self) -> usize {
        self.scores.len()
    }

    /// `T_s = min{t : value_t ≤ threshold}`, capped at `T_max`.
    pub fn halting_depth(&self, threshold: f64) -> usize {
        self.stop_values
            .iter()
            .position(|v| *v <= threshold)
            .unwrap_or(self.max_depth())
    }

    /// `(NMSE, layers)` under the stop rule.
    pub fn adaptive(&self, threshold: f64) -> (f64, usize) {
        let d = self.halting_depth(threshold);
        (self.nmse_by_depth[d], d)
    }
}

/// Greedy full-depth traces for every sample of `data` (observations
/// zero-padded to the model when shorter).
pub fn trace_samples<P: Policy + Sync>(
    model: &SensingModel,
    data: &Dataset,
    env: &EnvConfig,
    map: &ActionMap,
    policy: &P,
    exec: Execution,
) -> Result<Vec<SampleTrace>, HarnessError> {
    let results = exec.map_range(data.samples.len(), |i| {
        let s = &data.samples[i];
        let y = if s.y.len() < model.pilot_len() {
            model.pad_observation(&s.y)
        } else {
            s.y.clone()
        };
        let ep = Episode::new(model, &y, s)?;
        // greedy rollouts never draw from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let trace = rollout(&ep, env, map, policy, false, Some(env.max_layers), &mut rng)?;
        Ok::<_, EnvError>(SampleTrace::from_episode(&trace, env.stop, s.n_rays()))
    });
    results.into_iter().map(|r| r.map_err(HarnessError::from)).collect()
}

fn stop_threshold(env: &EnvConfig) -> f64 {
    match env.stop {
        StopRule::HaltingScore => env.epsilon,
        StopRule::Tau { threshold } => threshold,
    }
}

/// Adaptive rows at one threshold.
pub fn adaptive_run(traces: &[SampleTrace], scheme: &str, sweep_var: &str, value: f64, threshold: f64) -> SchemeRun {
    let (nmse, layers): (Vec<f64>, Vec<usize>) = traces.iter().map(|t| t.adaptive(threshold)).unzip();
    summarize(scheme, sweep_var, value, nmse, layers, 0.0)
}

/// Fixed-depth run at depth `l`.
pub fn fixed_run(traces: &[SampleTrace], scheme: &str, l: usize) -> SchemeRun {
    let nmse = traces.iter().map(|t| t.nmse_by_depth[l]).collect();
    summarize(scheme, "depth", l as f64, nmse, vec![l; traces.len()], 0.0)
}

/// Everything `evaluate` reports for one trained agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEvaluation {
    pub traces: Vec<SampleTrace>,
    /// Adaptive over the ε sweep (`{prefix}_adaptive`, `epsilon`).
    pub epsilon: Vec<SchemeRun>,
    /// Forced depths (`{prefix}_fixed`, `depth`).
    pub fixed: Vec<SchemeRun>,
    /// Adaptive at the configured threshold per ray count (`rays`).
    pub rays: Vec<SchemeRun>,
    /// Adaptive at the configured threshold over the SNR sweep (`snr_db`).
    pub snr: Vec<SchemeRun>,
}

impl AgentEvaluation {
    pub fn rows(&self) -> Vec<MetricsRow> {
        [&self.epsilon, &self.fixed, &self.rays, &self.snr]
            .into_iter()
            .flatten()
            .map(|r| r.row.clone())
            .collect()
    }
}

pub fn evaluate_agent(
    cfg: &ExperimentConfig,
    map: &ActionMap,
    agent: &DdpgAgent,
    model: &SensingModel,
    test: &Dataset,
    prefix: &str,
) -> Result<AgentEvaluation, HarnessError> {
    let env = cfg.env_config();
    let clock = Clock::start(cfg.record_wall_time);
    let traces = trace_samples(model, test, &env, map, agent, cfg.execution)?;
    let seconds = clock.seconds();
    let adaptive = format!("{prefix}_adaptive");
    let mut epsilon: Vec<SchemeRun> = cfg
        .eval
        .epsilon_sweep
        .iter()
        .map(|&e| adaptive_run(&traces, &adaptive, "epsilon", e, e))
        .collect();
    let fixed_scheme = format!("{prefix}_fixed");
    let mut fixed: Vec<SchemeRun> = (cfg.eval.fixed_depth_min.max(1)..=env.max_layers)
        .map(|l| fixed_run(&traces, &fixed_scheme, l))
        .collect();
    // rollouts are shared; attribute the time to every derived row
    for r in epsilon.iter_mut().chain(fixed.iter_mut()) {
        r.row.seconds = seconds;
    }
    let threshold = stop_threshold(&env);
    let mut ray_counts: Vec<usize> = traces.iter().map(|t| t.n_rays).collect();
    ray_counts.sort_unstable();
    ray_counts.dedup();
    let rays = ray_counts
        .iter()
        .map(|&j| {
            let subset: Vec<SampleTrace> = traces.iter().filter(|t| t.n_rays == j).cloned().collect();
            let mut r = adaptive_run(&subset, &adaptive, "rays", j as f64, threshold);
            r.row.seconds = seconds;
            r
        })
        .collect();
    let mut snr = Vec::new();
    for &s in &cfg.snr_sweep_db {
        let clock = Clock::start(cfg.record_wall_time);
        let data = test.reobserve(s, cfg.noise_seed());
        let t = trace_samples(model, &data, &env, map, agent, cfg.execution)?;
        let mut r = adaptive_run(&t, &adaptive, "snr_db", s, threshold);
        r.row.seconds = clock.seconds();
        snr.push(r);
    }
    Ok(AgentEvaluation {
        traces,
        epsilon,
        fixed,
        rays,
        snr,
    })
}

/// Evaluates a trained agent on a smaller system zero-padded to the trained
/// dimensions, next to the matched-dimension test set.
pub fn zero_pad_eval(
    cfg: &ExperimentConfig,
    map: &ActionMap,
    agent: &DdpgAgent,
    test: &Dataset,
) -> Result<Vec<SchemeRun>, HarnessError> {
    let env = cfg.env_config();
    let threshold = stop_threshold(&env);
    let small_cfg = ExperimentConfig {
        pilot_len: cfg.zero_pad.pilot_len,
        grid_size: cfg.zero_pad.grid_size,
        ..cfg.clone()
    };
    let small = generate_datasets(&small_cfg)?.test;
    let small_model = small.sensing_model()?.padded(cfg.pilot_len, cfg.grid_size)?;
    let full_model = test.sensing_model()?;
    let mut out = Vec::new();
    for (model, data, t) in [(&full_model, test, cfg.pilot_len), (&small_model, &small, cfg.zero_pad.pilot_len)] {
        let clock = Clock::start(cfg.record_wall_time);
        let traces = trace_samples(model, data, &env, map, agent, cfg.execution)?;
        let seconds = clock.seconds();
        let mut a = adaptive_run(&traces, "zero_pad_adaptive", "pilot_len", t as f64, threshold);
        let mut f = fixed_run(&traces, "zero_pad_fixed", env.max_layers);
        f.row.sweep_var = "pilot_len".into();
        f.row.sweep_value = t as f64;
        a.row.seconds = seconds;
        f.row.seconds = seconds;
        out.push(a);
        out.push(f);
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub sample: usize,
    pub total_reward: f64,
    pub final_nmse_db: f64,
    pub td_loss: f64,
    pub policy_objective: f64,
    pub halting_cost: f64,
    /// Validation NMSE (dB) at full depth, on validation episodes.
    pub val_nmse_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: DdpgAgent,
    pub log: Vec<EpisodeLog>,
    pub best_episode: usize,
    pub best_val_nmse_db: f64,
}

/// Exploration before the replay buffer is warm: uniform parameter
/// outputs, halting score from the network.
struct UniformExplorer<'a>(&'a DdpgAgent);

impl Policy for UniformExplorer<'_> {
    fn act(&self, features: &[f64], _explore: bool, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut a = vec![self.0.halting_score(features)];
        a.extend((0..self.0.action_dim()).map(|_| rng.random_range(-1.0..=1.0)));
        a
    }
}

pub fn new_agent(cfg: &ExperimentConfig, map: &ActionMap, model: &SensingModel, seed: u64) -> Result<DdpgAgent, HarnessError> {
    let dims = LayerDims::of(model);
    let action_dim = action_prefix(cfg.env.stop) - 1 + map.dim(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DdpgAgent::new(
        cfg.agent_config(),
        feature_len(dims),
        action_dim,
        residual_slice(dims),
        &mut rng,
    )?)
}

/// Mean linear NMSE at full depth under the greedy policy.
pub fn validation_nmse(
    cfg: &ExperimentConfig,
    map: &ActionMap,
    agent: &DdpgAgent,
    model: &SensingModel,
    val: &Dataset,
) -> Result<f64, HarnessError> {
    let subset = Dataset {
        samples: val.samples.iter().take(cfg.train.val_samples.max(1)).cloned().collect(),
        ..val.clone()
    };
    let traces = trace_samples(model, &subset, &cfg.env_config(), map, agent, cfg.execution)?;
    let n = traces.len().max(1) as f64;
    Ok(traces.iter().map(|t| *t.nmse_by_depth.last().unwrap()).sum::<f64>() / n)
}

/// DDPG training on `train`, keeping the networks with the best full-depth
/// validation NMSE, then refitting the halting network on the selected
/// policy. Episodes always run to `T_max` so that late layers are visited;
/// the stop rule is applied at evaluation.
pub fn train_agent(
    cfg: &ExperimentConfig,
    map: &ActionMap,
    model: &SensingModel,
    train: &Dataset,
    val: &Dataset,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, HarnessError> {
    let env = cfg.env_config();
    let mut agent = new_agent(cfg, map, model, cfg.train_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    rng.set_stream(1);
    let episodes = cfg.train.episodes;
    let mut log = Vec::with_capacity(episodes);
    let mut best: Option<(f64, usize, DdpgAgent)> = None;
    for e in 0..episodes {
        let frac = e as f64 / episodes.max(1) as f64;
        agent.set_progress(frac);
        if cfg.train.lr_decay {
            agent.scale_learning_rates(cfg.train.lr_final_ratio.powf(frac));
        }
        let idx = rng.random_range(0..train.len());
        let s = &train.samples[idx];
        let ep = Episode::new(model, &s.y, s)?;
        let warm = agent.buffer.len() >= cfg.ddpg.warmup;
        let trace = if warm {
            rollout(&ep, &env, map, &agent, true, Some(env.max_layers), &mut rng)?
        } else {
            rollout(&ep, &env, map, &UniformExplorer(&agent), true, Some(env.max_layers), &mut rng)?
        };
        let mut stats = Vec::new();
        for t in trace.transitions() {
            if let Some(u) = agent.observe(t, &mut rng) {
                stats.push(u);
            }
        }
        let mean = |f: fn(&crate::ddpg::UpdateStats) -> f64| {
            if stats.is_empty() {
                f64::NAN
            } else {
                stats.iter().map(f).sum::<f64>() / stats.len() as f64
            }
        };
        let td_loss = mean(|u| u.td_loss);
        if !agent.is_finite() || td_loss.is_infinite() {
            return Err(HarnessError::Divergence {
                episode: e,
                what: "non-finite network parameters or TD loss".into(),
            });
        }
        let mut entry = EpisodeLog {
            episode: e,
            sample: idx,
            total_reward: trace.total_reward(),
            final_nmse_db: to_db(trace.final_nmse),
            td_loss,
            policy_objective: mean(|u| u.policy_objective),
            halting_cost: mean(|u| u.halting_cost),
            val_nmse_db: None,
        };
        let last = e + 1 == episodes;
        if (warm && (e + 1) % cfg.train.validate_every.max(1) == 0) || last {
            let v = validation_nmse(cfg, map, &agent, model, val)?;
            entry.val_nmse_db = Some(to_db(v));
            progress(&format!(
                "episode {:>6}  val nmse {:>7.2} dB  td {:.3e}",
                e + 1,
                to_db(v),
                td_loss
            ));
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, e, agent.clone()));
            }
        }
        log.push(entry);
    }
    let (best_v, best_episode, mut agent) = match best {
        Some(b) => b,
        None => (validation_nmse(cfg, map, &agent, model, val)?, 0, agent),
    };
    fit_halting(cfg, map, &mut agent, model, train, &mut rng)?;
    if !agent.is_finite() {
        return Err(HarnessError::Divergence {
            episode: episodes,
            what: "non-finite halting network after refit".into(),
        });
    }
    Ok(TrainOutcome {
        agent,
        log,
        best_episode,
        best_val_nmse_db: to_db(best_v),
    })
}

/// Supervised refit of the halting network on `(residual, ‖h − ĥᵗ‖²)` pairs
/// from greedy full-depth rollouts of the current policy.
pub fn fit_halting<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    map: &ActionMap,
    agent: &mut DdpgAgent,
    model: &SensingModel,
    train: &Dataset,
    rng: &mut R,
) -> Result<(), HarnessError> {
    let n = cfg.train.halting_fit_samples.min(train.len());
    if n == 0 || cfg.train.halting_fit_steps == 0 {
        return Ok(());
    }
    let subset = Dataset {
        samples: train.samples[..n].to_vec(),
        ..train.clone()
    };
    let env = cfg.env_config();
    let per_sample: Vec<Result<Vec<Transition>, EnvError>> = cfg.execution.map_range(n, |i| {
        let s = &subset.samples[i];
        let ep = Episode::new(model, &s.y, s)?;
        let mut r = ChaCha8Rng::seed_from_u64(i as u64);
        let trace = rollout(&ep, &env, map, agent, false, Some(env.max_layers), &mut r)?;
        Ok(trace.transitions())
    });
    let mut pool = ReplayBuffer::new(n * env.max_layers);
    for r in per_sample {
        for t in r? {
            pool.push(t);
        }
    }
    for _ in 0..cfg.train.halting_fit_steps {
        let batch = pool.sample(cfg.ddpg.batch_size, rng);
        agent.halting_update(&batch);
    }
    Ok(())
}

/// Metadata stored in checkpoints: enough to rebuild the evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub action: ActionMap,
    pub best_episode: usize,
    pub best_val_nmse_db: f64,
}

pub fn save_checkpoint(path: &Path, agent: &DdpgAgent, meta: &CheckpointMeta) -> Result<(), HarnessError> {
    let bytes = agent.save(&serde_json::to_string(meta)?);
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(DdpgAgent, CheckpointMeta), HarnessError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (agent, meta) = DdpgAgent::load(&bytes)?;
    Ok((agent, serde_json::from_str(&meta)?))
}

pub fn write_train_log(path: &Path, log: &[EpisodeLog]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "episode",
        "sample",
        "total_reward",
        "final_nmse_db",
        "td_loss",
        "policy_objective",
        "halting_cost",
        "val_nmse_db",
    ])?;
    for l in log {
        w.write_record([
            l.episode.to_string(),
            l.sample.to_string(),
            l.total_reward.to_string(),
            l.final_nmse_db.to_string(),
            l.td_loss.to_string(),
            l.policy_objective.to_string(),
            l.halting_cost.to_string(),
            l.val_nmse_db.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Output locations under one directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub root: PathBuf,
}

impl OutputPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn ensure(&self) -> Result<(), HarnessError> {
        std::fs::create_dir_all(&self.root).map_err(io_err(&self.root))
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Channel estimate of one sample under the greedy policy and stop rule
/// (the full episode, not derived from a trace).
pub fn estimate<P: Policy>(
    model: &SensingModel,
    env: &EnvConfig,
    map: &ActionMap,
    policy: &P,
    y: &CVec,
    sample: &crate::channel::ChannelSample,
) -> Result<EpisodeTrace, HarnessError> {
    let ep = Episode::new(model, y, sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(rollout(&ep, env, map, policy, false, None, &mut rng)?)
}
