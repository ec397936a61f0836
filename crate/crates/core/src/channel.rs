//! ULA cluster/ray channel model, pilots, noisy observations, the off-grid
//! dictionary, and the binary dataset container.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{complex_gaussian, CMat, CVec, C64};
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid generation parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_antennas: usize,
    /// Antenna spacing over carrier wavelength, `d/λ`.
    pub spacing_ratio: f64,
}

impl ArrayGeometry {
    pub fn new(n_antennas: usize, spacing_ratio: f64) -> Result<Self, ChannelError> {
        if n_antennas == 0 {
            return Err(ChannelError::Geometry("array needs at least one antenna".into()));
        }
        if !(spacing_ratio > 0.0 && spacing_ratio.is_finite()) {
            return Err(ChannelError::Geometry(format!(
                "spacing ratio must be positive, got {spacing_ratio}"
            )));
        }
        Ok(Self {
            n_antennas,
            spacing_ratio,
        })
    }

    /// Half-wavelength array with `n` antennas.
    pub fn half_wavelength(n: usize) -> Result<Self, ChannelError> {
        Self::new(n, 0.5)
    }

    fn phase_rate(&self) -> f64 {
        2.0 * PI * self.spacing_ratio
    }

    /// Diagonal of the operator that maps `a(φ)` to `a′(φ)/cos φ`:
    /// element `n` is `−j·2π·(d/λ)·n`.
    pub fn derivative_operator_diag(&self) -> CVec {
        let k = self.phase_rate();
        CVec::from_fn(self.n_antennas, |n, _| C64::new(0.0, -k * n as f64))
    }
}

/// Unit-norm array response at `angle` (radians).
pub fn steering_vector(geom: &ArrayGeometry, angle: f64) -> CVec {
    let n = geom.n_antennas;
    let scale = 1.0 / (n as f64).sqrt();
    let step = C64::from_polar(1.0, -geom.phase_rate() * angle.sin());
    let mut v = CVec::zeros(n);
    let mut z = C64::new(scale, 0.0);
    for e in v.iter_mut() {
        *e = z;
        z *= step;
    }
    v
}

/// Derivative of [`steering_vector`] with respect to the angle.
pub fn steering_derivative(geom: &ArrayGeometry, angle: f64) -> CVec {
    let mut a = steering_vector(geom, angle);
    let k = geom.phase_rate() * angle.cos();
    for (i, e) in a.iter_mut().enumerate() {
        *e *= C64::new(0.0, -k * i as f64);
    }
    a
}

/// Uniform angular grid: the centers of `len` equal cells of `[−π/2, π/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    resolution: f64,
}

impl Grid {
    pub fn uniform(len: usize) -> Result<Self, ChannelError> {
        if len < 2 {
            return Err(ChannelError::Grid(format!("need at least 2 points, got {len}")));
        }
        let resolution = PI / len as f64;
        let points = (0..len)
            .map(|i| -FRAC_PI_2 + (i as f64 + 0.5) * resolution)
            .collect();
        Ok(Self { points, resolution })
    }

    /// A single-point grid centered at `angle` with cell width `resolution`.
    /// Only used for small unit checks; real grids come from [`Grid::uniform`].
    pub fn single(angle: f64, resolution: f64) -> Self {
        Self {
            points: vec![angle],
            resolution,
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn max_gap(&self) -> f64 {
        self.resolution / 2.0
    }

    /// Index of the grid point nearest to `angle`.
    pub fn nearest(&self, angle: f64) -> usize {
        let raw = ((angle + FRAC_PI_2) / self.resolution).floor();
        (raw.max(0.0) as usize).min(self.points.len() - 1)
    }

    pub fn clip_gap(&self, beta: f64) -> f64 {
        let m = self.max_gap();
        beta.clamp(-m, m)
    }
}

/// Dictionary `A(β)` with column `j` the steering vector at `φ̂_j + β_j`.
/// Gaps beyond half a grid cell are clipped.
pub fn build_dictionary(
    geom: &ArrayGeometry,
    grid: &Grid,
    beta: &[f64],
) -> Result<CMat, ChannelError> {
    if beta.len() != grid.len() {
        return Err(ChannelError::Dimension {
            what: "off-grid gaps vs grid points",
            expected: grid.len(),
            got: beta.len(),
        });
    }
    let mut a = CMat::zeros(geom.n_antennas, grid.len());
    for (j, (&p, &b)) in grid.points().iter().zip(beta).enumerate() {
        a.set_column(j, &steering_vector(geom, p + grid.clip_gap(b)));
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    /// `T × N` pilot symbols.
    pub x: CMat,
    pub power: f64,
}

impl PilotMatrix {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// I.i.d. complex Gaussian pilots rescaled so that `tr(X Xᴴ) = P·T·N`.
pub fn generate_pilots<R: Rng + ?Sized>(
    t: usize,
    geom: &ArrayGeometry,
    power: f64,
    rng: &mut R,
) -> Result<PilotMatrix, ChannelError> {
    if t == 0 || !(power > 0.0) {
        return Err(ChannelError::Parameter(format!(
            "pilot length must be >= 1 and power > 0 (got T={t}, P={power})"
        )));
    }
    let n = geom.n_antennas;
    let mut x = CMat::from_fn(t, n, |_, _| complex_gaussian(rng, 1.0));
    let energy: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    let target = power * (t * n) as f64;
    x *= C64::from((target / energy).sqrt());
    Ok(PilotMatrix { x, power })
}

/// `y = X h + n` with `n ~ CN(0, σ² I)`.
pub fn observe<R: Rng + ?Sized>(pilot: &PilotMatrix, h: &CVec, noise_var: f64, rng: &mut R) -> CVec {
    let mut y = &pilot.x * h;
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_gaussian(rng, noise_var);
        }
    }
    y
}

/// Cluster/ray description used by [`generate_channel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayModel {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    /// Per-ray gain variance `σ_α²`.
    pub gain_var: f64,
    /// Half-width of the uniform ray spread around each cluster center (radians).
    pub angle_spread: f64,
    /// Distance kept between cluster centers and `±π/2` (radians).
    pub center_margin: f64,
}

impl RayModel {
    pub const DEFAULT_SPREAD_DEG: f64 = 2.0;
    pub const DEFAULT_MARGIN_DEG: f64 = 5.0;

    pub fn new(n_clusters: usize, rays_per_cluster: usize, gain_var: f64) -> Self {
        Self {
            n_clusters,
            rays_per_cluster,
            gain_var,
            angle_spread: Self::DEFAULT_SPREAD_DEG.to_radians(),
            center_margin: Self::DEFAULT_MARGIN_DEG.to_radians(),
        }
    }

    pub fn n_rays(&self) -> usize {
        self.n_clusters * self.rays_per_cluster
    }
}

/// Splits a ray count `J` into `(N_c, N_s)` with `N_s` the largest divisor of
/// `J` not exceeding `√J`.
pub fn cluster_split(n_rays: usize) -> (usize, usize) {
    let mut ns = 1;
    let mut d = 1;
    while d * d <= n_rays {
        if n_rays % d == 0 {
            ns = d;
        }
        d += 1;
    }
    (n_rays / ns.max(1), ns.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h: CVec,
    pub ray_angles: Vec<f64>,
    pub ray_gains: Vec<C64>,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub y: CVec,
    pub noise_var: f64,
    pub gain_var: f64,
}

impl ChannelSample {
    /// Builds a sample from explicit rays; `h` is the gain-weighted sum of
    /// steering vectors. The observation is left empty.
    pub fn from_rays(
        geom: &ArrayGeometry,
        ray_angles: Vec<f64>,
        ray_gains: Vec<C64>,
        n_clusters: usize,
        rays_per_cluster: usize,
        gain_var: f64,
    ) -> Result<Self, ChannelError> {
        if ray_angles.len() != ray_gains.len() || ray_angles.len() != n_clusters * rays_per_cluster {
            return Err(ChannelError::Dimension {
                what: "ray angles/gains vs clusters*rays",
                expected: n_clusters * rays_per_cluster,
                got: ray_angles.len(),
            });
        }
        let mut h = CVec::zeros(geom.n_antennas);
        for (&phi, &g) in ray_angles.iter().zip(&ray_gains) {
            h += steering_vector(geom, phi) * g;
        }
        Ok(Self {
            h,
            ray_angles,
            ray_gains,
            n_clusters,
            rays_per_cluster,
            y: CVec::zeros(0),
            noise_var: 0.0,
            gain_var,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.ray_angles.len()
    }
}

/// Draws cluster centers, ray angles, and gains; fills `h` and the ray fields.
pub fn generate_channel<R: Rng + ?Sized>(
    geom: &ArrayGeometry,
    model: &RayModel,
    rng: &mut R,
) -> Result<ChannelSample, ChannelError> {
    if model.n_clusters == 0 || model.rays_per_cluster == 0 || !(model.gain_var > 0.0) {
        return Err(ChannelError::Parameter(format!(
            "need N_c, N_s >= 1 and gain_var > 0, got {model:?}"
        )));
    }
    let lo = -FRAC_PI_2 + model.center_margin;
    let hi = FRAC_PI_2 - model.center_margin;
    if !(lo < hi) {
        return Err(ChannelError::Parameter("center margin leaves no room".into()));
    }
    let edge = FRAC_PI_2 - 1e-9;
    let mut angles = Vec::with_capacity(model.n_rays());
    let mut gains = Vec::with_capacity(model.n_rays());
    for _ in 0..model.n_clusters {
        let center = rng.random_range(lo..hi);
        for _ in 0..model.rays_per_cluster {
            let offset = if model.angle_spread > 0.0 {
                rng.random_range(-model.angle_spread..=model.angle_spread)
            } else {
                0.0
            };
            angles.push((center + offset).clamp(-edge, edge));
            gains.push(complex_gaussian(rng, model.gain_var));
        }
    }
    ChannelSample::from_rays(
        geom,
        angles,
        gains,
        model.n_clusters,
        model.rays_per_cluster,
        model.gain_var,
    )
}

/// Everything the estimator needs besides the observation: array, grid, and
/// pilots. `n_cols` may exceed the grid size, in which case the trailing
/// dictionary columns are zero (zero-padding to a larger trained system).
#[derive(Debug, Clone, PartialEq)]
pub struct SensingModel {
    pub geom: ArrayGeometry,
    pub grid: Grid,
    pub pilot: PilotMatrix,
    n_cols: usize,
}

impl SensingModel {
    pub fn new(geom: ArrayGeometry, grid: Grid, pilot: PilotMatrix) -> Result<Self, ChannelError> {
        if pilot.x.ncols() != geom.n_antennas {
            return Err(ChannelError::Dimension {
                what: "pilot columns vs antennas",
                expected: geom.n_antennas,
                got: pilot.x.ncols(),
            });
        }
        let n_cols = grid.len();
        Ok(Self {
            geom,
            grid,
            pilot,
            n_cols,
        })
    }

    /// Pads pilots with zero rows up to `t_total` and the dictionary with zero
    /// columns up to `j_total`.
    pub fn padded(&self, t_total: usize, j_total: usize) -> Result<Self, ChannelError> {
        let t = self.pilot_len();
        if t_total < t || j_total < self.n_cols {
            return Err(ChannelError::Parameter(format!(
                "cannot pad ({t}, {}) down to ({t_total}, {j_total})",
                self.n_cols
            )));
        }
        let mut x = CMat::zeros(t_total, self.geom.n_antennas);
        x.view_mut((0, 0), (t, self.geom.n_antennas))
            .copy_from(&self.pilot.x);
        Ok(Self {
            geom: self.geom,
            grid: self.grid.clone(),
            pilot: PilotMatrix {
                x,
                power: self.pilot.power,
            },
            n_cols: j_total,
        })
    }

    pub fn n_antennas(&self) -> usize {
        self.geom.n_antennas
    }

    pub fn pilot_len(&self) -> usize {
        self.pilot.x.nrows()
    }

    /// Number of dictionary columns (grid size plus padding).
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of columns backed by real grid points.
    pub fn active_cols(&self) -> usize {
        self.grid.len()
    }

    pub fn x(&self) -> &CMat {
        &self.pilot.x
    }

    /// Angle of column `j` under gaps `beta` (active columns only).
    pub fn column_angle(&self, j: usize, beta: &[f64]) -> f64 {
        self.grid.points()[j] + self.grid.clip_gap(beta[j])
    }

    pub fn clip_gaps(&self, beta: &mut [f64]) {
        let active = self.active_cols();
        for (j, b) in beta.iter_mut().enumerate() {
            *b = if j < active { self.grid.clip_gap(*b) } else { 0.0 };
        }
    }

    fn check_beta(&self, beta: &[f64]) -> Result<(), ChannelError> {
        if beta.len() != self.n_cols {
            return Err(ChannelError::Dimension {
                what: "off-grid gaps vs dictionary columns",
                expected: self.n_cols,
                got: beta.len(),
            });
        }
        Ok(())
    }

    /// `A(β)`, `N × n_cols`.
    pub fn dictionary(&self, beta: &[f64]) -> Result<CMat, ChannelError> {
        self.check_beta(beta)?;
        let mut a = CMat::zeros(self.geom.n_antennas, self.n_cols);
        for j in 0..self.active_cols() {
            a.set_column(j, &steering_vector(&self.geom, self.column_angle(j, beta)));
        }
        Ok(a)
    }

    /// Column-wise derivative `dA/dβ`, `N × n_cols`.
    pub fn dictionary_derivative(&self, beta: &[f64]) -> Result<CMat, ChannelError> {
        self.check_beta(beta)?;
        let mut d = CMat::zeros(self.geom.n_antennas, self.n_cols);
        for j in 0..self.active_cols() {
            d.set_column(j, &steering_derivative(&self.geom, self.column_angle(j, beta)));
        }
        Ok(d)
    }

    /// Sensing matrix `Φ(β) = X A(β)`, `T × n_cols`.
    pub fn sensing(&self, beta: &[f64]) -> Result<CMat, ChannelError> {
        Ok(&self.pilot.x * self.dictionary(beta)?)
    }

    /// Pads an observation with zeros to the pilot length of this model.
    pub fn pad_observation(&self, y: &CVec) -> CVec {
        let mut out = CVec::zeros(self.pilot_len());
        out.rows_mut(0, y.len()).copy_from(y);
        out
    }
}

/// How the samples of a [`Dataset`] are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub rays_min: usize,
    pub rays_max: usize,
    pub snr_db: f64,
    /// Ray spread half-width in degrees.
    pub angle_spread_deg: f64,
    /// Cluster-center margin from `±90°` in degrees.
    pub center_margin_deg: f64,
    /// Use `σ_α² = 1/J` so that `E‖h‖² = 1` for every ray count.
    pub normalize_gain: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 200,
            rays_min: 3,
            rays_max: 8,
            snr_db: 20.0,
            angle_spread_deg: RayModel::DEFAULT_SPREAD_DEG,
            center_margin_deg: RayModel::DEFAULT_MARGIN_DEG,
            normalize_gain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ChannelSample>,
    pub geometry: ArrayGeometry,
    pub grid: Grid,
    pub pilot: PilotMatrix,
    pub seed: u64,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn noise_var_for_snr(power: f64, snr_db: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

impl Dataset {
    /// Generates a dataset whose contents are a function of `seed` only.
    /// Pilots use stream 0; sample `i` uses its own stream `i + 1`, so samples
    /// can be drawn in parallel.
    pub fn generate(
        geometry: ArrayGeometry,
        grid: Grid,
        pilot_len: usize,
        power: f64,
        spec: &DatasetSpec,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, ChannelError> {
        if spec.rays_min == 0 || spec.rays_min > spec.rays_max {
            return Err(ChannelError::Parameter(format!(
                "bad ray range [{}, {}]",
                spec.rays_min, spec.rays_max
            )));
        }
        let pilot = generate_pilots(pilot_len, &geometry, power, &mut sample_rng(seed, 0))?;
        Self::generate_with_pilot(geometry, grid, pilot, spec, seed, exec)
    }

    /// Like [`Dataset::generate`] with the pilot matrix given, so that
    /// several datasets can share one observation model.
    pub fn generate_with_pilot(
        geometry: ArrayGeometry,
        grid: Grid,
        pilot: PilotMatrix,
        spec: &DatasetSpec,
        seed: u64,
        exec: Execution,
    ) -> Result<Self, ChannelError> {
        if spec.rays_min == 0 || spec.rays_min > spec.rays_max {
            return Err(ChannelError::Parameter(format!(
                "bad ray range [{}, {}]",
                spec.rays_min, spec.rays_max
            )));
        }
        if pilot.x.ncols() != geometry.n_antennas {
            return Err(ChannelError::Dimension {
                what: "pilot columns vs antennas",
                expected: geometry.n_antennas,
                got: pilot.x.ncols(),
            });
        }
        let power = pilot.power;
        let noise_var = noise_var_for_snr(power, spec.snr_db);
        let samples = exec
            .map_range(spec.n_samples, |i| {
                let mut rng = sample_rng(seed, i as u64 + 1);
                let j = rng.random_range(spec.rays_min..=spec.rays_max);
                let (nc, ns) = cluster_split(j);
                let gain_var = if spec.normalize_gain { 1.0 / j as f64 } else { 1.0 };
                let model = RayModel {
                    n_clusters: nc,
                    rays_per_cluster: ns,
                    gain_var,
                    angle_spread: spec.angle_spread_deg.to_radians(),
                    center_margin: spec.center_margin_deg.to_radians(),
                };
                let mut s = generate_channel(&geometry, &model, &mut rng)?;
                s.y = observe(&pilot, &s.h, noise_var, &mut rng);
                s.noise_var = noise_var;
                Ok(s)
            })
            .into_iter()
            .collect::<Result<Vec<_>, ChannelError>>()?;
        Ok(Self {
            samples,
            geometry,
            grid,
            pilot,
            seed,
        })
    }

    /// Same channels, fresh observations at `snr_db`. The unit-variance noise
    /// draw for sample `i` depends only on `(noise_seed, i)`, so sweeps over
    /// SNR are paired.
    pub fn reobserve(&self, snr_db: f64, noise_seed: u64) -> Self {
        let noise_var = noise_var_for_snr(self.pilot.power, snr_db);
        let mut out = self.clone();
        for (i, s) in out.samples.iter_mut().enumerate() {
            let mut rng = sample_rng(noise_seed, i as u64 + 1);
            let mut y = &self.pilot.x * &s.h;
            for v in y.iter_mut() {
                *v += complex_gaussian(&mut rng, 1.0) * noise_var.sqrt();
            }
            s.y = y;
            s.noise_var = noise_var;
        }
        out
    }

    pub fn sensing_model(&self) -> Result<SensingModel, ChannelError> {
        SensingModel::new(self.geometry, self.grid.clone(), self.pilot.clone())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        codec::decode(bytes)
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), ChannelError> {
    std::fs::write(path, dataset.to_bytes()).map_err(|source| ChannelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, ChannelError> {
    let bytes = std::fs::read(path).map_err(|source| ChannelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Dataset::from_bytes(&bytes)?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes: not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid content: {0}")]
    Invalid(String),
}

/// Little-endian cursor helpers shared by the binary containers.
pub(crate) mod bin {
    use super::FormatError;
    use crate::linalg::C64;

    #[derive(Default)]
    pub struct Writer {
        pub buf: Vec<u8>,
    }

    impl Writer {
        pub fn bytes(&mut self, b: &[u8]) {
            self.buf.extend_from_slice(b);
        }
        pub fn u32(&mut self, v: u32) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        pub fn u64(&mut self, v: u64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        pub fn f64(&mut self, v: f64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        pub fn c64(&mut self, v: C64) {
            self.f64(v.re);
            self.f64(v.im);
        }
        pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
            for v in vs {
                self.f64(v);
            }
        }
        pub fn c64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a C64>) {
            for v in vs {
                self.c64(*v);
            }
        }
        pub fn str(&mut self, s: &str) {
            self.u64(s.len() as u64);
            self.bytes(s.as_bytes());
        }
    }

    pub struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(buf: &'a [u8]) -> Self {
            Self { buf, pos: 0 }
        }
        pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
            match end {
                Some(end) => {
                    let s = &self.buf[self.pos..end];
                    self.pos = end;
                    Ok(s)
                }
                None => Err(FormatError::Truncated {
                    offset: self.pos,
                    needed: n - (self.buf.len() - self.pos),
                }),
            }
        }
        pub fn u32(&mut self) -> Result<u32, FormatError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        pub fn u64(&mut self) -> Result<u64, FormatError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        /// Reads a count and rejects values that cannot fit in the remaining bytes.
        pub fn len(&mut self, elem_bytes: usize) -> Result<usize, FormatError> {
            let n = self.u64()?;
            let remaining = (self.buf.len() - self.pos) as u64;
            if elem_bytes > 0 && n > remaining / elem_bytes as u64 {
                return Err(FormatError::Truncated {
                    offset: self.pos,
                    needed: (n * elem_bytes as u64 - remaining) as usize,
                });
            }
            Ok(n as usize)
        }
        pub fn f64(&mut self) -> Result<f64, FormatError> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        pub fn c64(&mut self) -> Result<C64, FormatError> {
            Ok(C64::new(self.f64()?, self.f64()?))
        }
        pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
            (0..n).map(|_| self.f64()).collect()
        }
        pub fn c64s(&mut self, n: usize) -> Result<Vec<C64>, FormatError> {
            (0..n).map(|_| self.c64()).collect()
        }
        pub fn str(&mut self) -> Result<String, FormatError> {
            let n = self.len(1)?;
            String::from_utf8(self.take(n)?.to_vec())
                .map_err(|e| FormatError::Invalid(format!("utf-8: {e}")))
        }
        pub fn is_at_end(&self) -> bool {
            self.pos == self.buf.len()
        }
    }
}

mod codec {
    //! Layout (all little-endian):
    //! `magic[8] version:u32 | N:u64 T:u64 Ĵ:u64 d/λ:f64 seed:u64 P:f64 count:u64 |`
    //! `X: T·N complex, row-major |` then per sample
    //! `N_c:u64 N_s:u64 σ²:f64 σ_α²:f64 angles:J·f64 gains:J·c64 h:N·c64 y_len:u64 y:c64…`.
    //! Complex values are stored as interleaved `(re, im)` pairs.

    use super::bin::{Reader, Writer};
    use super::*;

    const MAGIC: &[u8; 8] = b"ADUDSET\0";
    const VERSION: u32 = 1;

    pub fn encode(d: &Dataset) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let (t, n) = d.pilot.x.shape();
        w.u64(d.geometry.n_antennas as u64);
        w.u64(t as u64);
        w.u64(d.grid.len() as u64);
        w.f64(d.geometry.spacing_ratio);
        w.u64(d.seed);
        w.f64(d.pilot.power);
        w.u64(d.samples.len() as u64);
        for r in 0..t {
            for c in 0..n {
                w.c64(d.pilot.x[(r, c)]);
            }
        }
        for s in &d.samples {
            w.u64(s.n_clusters as u64);
            w.u64(s.rays_per_cluster as u64);
            w.f64(s.noise_var);
            w.f64(s.gain_var);
            w.f64s(s.ray_angles.iter().copied());
            w.c64s(&s.ray_gains);
            w.c64s(s.h.iter());
            w.u64(s.y.len() as u64);
            w.c64s(s.y.iter());
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| FormatError::BadMagic("dataset"))? != MAGIC {
            return Err(FormatError::BadMagic("dataset"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u64()? as usize;
        let t = r.u64()? as usize;
        let j_hat = r.u64()? as usize;
        let spacing = r.f64()?;
        let seed = r.u64()?;
        let power = r.f64()?;
        let count = r.len(1)?;
        let geometry = ArrayGeometry::new(n, spacing).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let grid = Grid::uniform(j_hat).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let x_entries = r.c64s(t.checked_mul(n).ok_or_else(|| FormatError::Invalid("pilot size overflow".into()))?)?;
        let x = CMat::from_row_slice(t, n, &x_entries);
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nc = r.u64()? as usize;
            let ns = r.u64()? as usize;
            let noise_var = r.f64()?;
            let gain_var = r.f64()?;
            let j = nc
                .checked_mul(ns)
                .ok_or_else(|| FormatError::Invalid("ray count overflow".into()))?;
            let ray_angles = r.f64s(j)?;
            let ray_gains = r.c64s(j)?;
            let h = CVec::from_vec(r.c64s(n)?);
            let y_len = r.len(16)?;
            let y = CVec::from_vec(r.c64s(y_len)?);
            samples.push(ChannelSample {
                h,
                ray_angles,
                ray_gains,
                n_clusters: nc,
                rays_per_cluster: ns,
                y,
                noise_var,
                gain_var,
            });
        }
        if !r.is_at_end() {
            return Err(FormatError::Invalid("trailing bytes after last sample".into()));
        }
        Ok(Dataset {
            samples,
            geometry,
            grid,
            pilot: PilotMatrix { x, power },
            seed,
        })
    }
}
