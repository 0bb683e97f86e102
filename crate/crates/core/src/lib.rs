//! Differentiable simulation of a multi-span, dual-polarization WDM fiber
//! link together with an end-to-end learning loop that jointly shapes the
//! geometry and the probabilities of 4D constellations.
//!
//! The crate is organised bottom-up:
//!
//! - [`constellation`]: 4D formats, PM-QAM and Maxwell-Boltzmann baselines, file I/O.
//! - [`dsp`]: root-raised-cosine shaping, matched filtering, dispersion compensation.
//! - [`channel`]: split-step Manakov propagation, EDFA noise, WDM multiplexing and
//!   the adjoint of the split-step solver.
//! - [`nn`]: a small tape-based reverse-mode autodiff engine, dense networks,
//!   straight-through Gumbel-Softmax and ADAM.
//! - [`metrics`]: GMI estimators and net-rate / overhead / reach arithmetic.
//! - [`trainer`]: the autoencoder training loop and learned-format extraction.
//! - [`harness`]: launch-power and distance sweeps, energy reports, self tests.

pub mod channel;
pub mod constellation;
pub mod dsp;
mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
mod real;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{fft_plan, Precision, Real};

pub use channel::{FiberLink, WdmConfig};
pub use constellation::Constellation4D;
pub use dsp::{DualPolWaveform, RrcFilter};
pub use metrics::GmiReport;
pub use trainer::{LearnedFormat, TrainConfig, Trainer};
