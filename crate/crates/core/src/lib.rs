//! Simulation and analysis toolkit for an endless optical phase delay (EOPD).
//!
//! An IQ modulator with two null-biased child MZMs and a quadrature phase
//! shifter rotates the phase of an optical carrier by an unbounded amount
//! while its two drive voltages stay within `±V_π`. This crate models that
//! plant, synthesizes the drive waveforms for an arbitrary continuous phase
//! trajectory, recovers drifted biases and gains by gradient descent on the
//! magnitude monitor, and simulates the device as the actuator of a
//! carrier-phase synchronization loop for a self-homodyne QPSK receiver.
//!
//! Modules:
//! - [`plant`]: field transfer, monitor photocurrents, parameter drift.
//! - [`control`]: drive-waveform synthesis and phase unwrapping.
//! - [`calibration`]: risk function, finite-difference gradient descent,
//!   Monte-Carlo harness.
//! - [`sync_loop`]: closed/open-loop carrier phase synchronization.
//! - [`analysis`]: spectra, harmonic suppression, slope fits, EVM, eye metrics.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod calibration;
pub mod control;
pub mod error;
pub mod plant;
pub mod sync_loop;

pub use error::{Error, Result};
