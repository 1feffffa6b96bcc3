//! moveact — joint on-line estimation and prediction of continuous
//! movements and discrete actions.
//!
//! The engine couples four ingredients:
//!
//! - [`allen`]: qualitative temporal relations between labelled intervals,
//!   with per-label-pair admissibility tables and plausibility scores;
//! - [`hierarchy`]: multi-level action composition (movements compose into
//!   actions) scored for structural and temporal consistency;
//! - [`dynamics`]: label-conditioned linear-Gaussian autoregressive models
//!   of joint-angle trajectories, serving forecasting, likelihood
//!   evaluation, and generative classification;
//! - [`segmenter`]: a semi-Markov recursive filter with explicit segment
//!   durations, constraint gating, exact MAP segmentation, and brute-force
//!   oracles for testing.
//!
//! [`simgen`] generates labelled reaching-motion datasets from a kinematic
//! 3-DOF arm with minimum-jerk joint profiles, [`metrics`] implements the
//! evaluation protocols (PCC/RMSE forecasting metrics, on-line
//! classification protocols, timing), and [`cli`] wires everything into
//! reproducible runs with persisted artifacts.
//!
//! Start with the runnable examples (`cargo run --release -p moveact
//! --example online_filter`) or the `moveact` binary (`moveact --help`).

pub mod allen;
pub mod cli;
pub mod dynamics;
pub mod hierarchy;
pub mod metrics;
pub mod segmenter;
pub mod simgen;

pub use allen::{ActionInterval, AllenRelation, CompositionTable, Label};
pub use dynamics::{LabelDynamics, Trajectory};
pub use segmenter::{FilterState, SegmentModel};
