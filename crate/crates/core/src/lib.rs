//! Multi-channel speech enhancement with a two-stage 2-D convolutional
//! time-frequency feature fusion frontend, a causal TCN complex-mask
//! estimator and an auxiliary frozen acoustic model.
//!
//! Layout:
//! - [`dsp`]: framing, STFT/iSTFT, log-power spectra, WAV I/O
//! - [`spatial`]: phase differences, diffuse coherence, superdirective beamforming
//! - [`nn`]: reverse-mode differentiation, layers, Adam, checkpoints
//! - [`frontend`], [`tcn`], [`model`]: feature fusion, mask estimator, full chain
//! - [`am`]: TDNN acoustic model on proxy targets
//! - [`losses`], [`metrics`]: training objective, SI-SNR and (E-)STOI
//! - [`room`]: room simulation and corpora
//! - [`train`]: multi-task training and BMUF

pub mod dsp;
pub mod am;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod model;
mod error;
pub mod nn;
pub mod room;
pub mod selftest;
pub mod spatial;
pub mod tcn;
pub mod train;

pub use error::{Error, Result};
