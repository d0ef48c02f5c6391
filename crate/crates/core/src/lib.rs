//! Learned matrix-form modems for doubly-dispersive channels.
//!
//! The crate generates sparse delay-Doppler channels, trains a network that
//! maps channel matrices to modulation/demodulation matrix pairs, unifies its
//! outputs across channels with a weight-shared siamese phase, distills one
//! fixed modem by element-wise median, and benchmarks it against cyclic-prefix
//! OFDM by sub-channel rate and Monte-Carlo bit error rate.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the precisions used in practice: training runs in 32-bit,
//! evaluation and all oracles in 64-bit.

pub mod channel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod link;
pub mod modem;
pub mod modnet;
pub(crate) mod nn;
pub mod objective;
pub mod optim;
pub mod training;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

use ndarray::{Array1, Array2};
use num_complex::Complex;

pub type ComplexMatrix<T> = Array2<Complex<T>>;
pub type ComplexVector<T> = Array1<Complex<T>>;

/// Evaluation-precision modem.
pub type Modem64 = modem::Modem<f64>;
/// Training-precision modem.
pub type Modem32 = modem::Modem<f32>;
/// Network parameters at training precision.
pub type ModNet32 = modnet::ModNetParams<f32>;
pub type ModNet64 = modnet::ModNetParams<f64>;
