#![allow(dead_code)]

use adaptive_unfold::channel::{generate_pilots, observe, ArrayGeometry, ChannelSample, Grid, SensingModel};
use adaptive_unfold::linalg::complex_gaussian;
use adaptive_unfold::sbl::SblState;
use adaptive_unfold::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `N`-antenna, `T`-pilot, `Ĵ`-column model with a few off-grid rays
/// observed at the given noise variance.
pub fn instance(seed: u64, n: usize, t: usize, j: usize, rays: usize, noise_var: f64) -> (SensingModel, ChannelSample) {
    let mut rng = rng(seed);
    let geom = ArrayGeometry::half_wavelength(n).unwrap();
    let grid = Grid::uniform(j).unwrap();
    let pilot = generate_pilots(t, &geom, 1.0, &mut rng).unwrap();
    let angles: Vec<f64> = (0..rays).map(|_| rng.random_range(-1.3..1.3)).collect();
    let gains: Vec<C64> = (0..rays).map(|_| complex_gaussian(&mut rng, 1.0 / rays as f64)).collect();
    let mut s = ChannelSample::from_rays(&geom, angles, gains, 1, rays, 1.0 / rays as f64).unwrap();
    s.y = observe(&pilot, &s.h, noise_var, &mut rng);
    s.noise_var = noise_var;
    (SensingModel::new(geom, grid, pilot).unwrap(), s)
}

/// A valid state away from initialization: random precisions and gaps.
pub fn random_state(model: &SensingModel, seed: u64) -> SblState {
    let mut rng = rng(seed ^ 0x9e37);
    let r = model.grid.max_gap();
    let j = model.n_cols();
    SblState {
        alpha: 10f64.powf(rng.random_range(-0.5..2.0)),
        gamma: (0..j).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect(),
        beta: (0..j).map(|_| rng.random_range(-r..r)).collect(),
        iter: 0,
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

/// `‖a − b‖ / ‖b‖`.
pub fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}
