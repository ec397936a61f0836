//! Off-grid sparse Bayesian channel estimation for ULA massive-MIMO links,
//! its unfolding into parameterized layers, and a DDPG agent that chooses
//! per-layer parameters together with an adaptive halting decision.
//!
//! Module map:
//! - [`channel`]: array geometry, cluster/ray channels, pilots, observations, dataset files.
//! - [`sbl`]: the off-grid SBL estimator (block-MM updates) and the on-grid baseline.
//! - [`unfolding`]: the parameterized layer, its plain-algorithm equivalence, and parameter codecs.
//! - [`ddpg`]: MLPs with manual backprop, replay, actor/critic updates, halting network.
//! - [`environment`]: the estimation MDP, stopping rule, and episode traces.
//! - [`harness`]: experiment configs, training/evaluation drivers, metrics and CSV output.

pub mod channel;
pub mod ddpg;
pub mod environment;
pub mod harness;
pub mod linalg;
pub mod par;
pub mod sbl;
pub mod unfolding;

pub use linalg::{CMat, CVec, C64};
