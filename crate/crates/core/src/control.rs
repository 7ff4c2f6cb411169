//! Drive-waveform synthesis for a desired phase trajectory, and phase
//! unwrapping.
//!
//! With both MZMs at null and the Q arm at quadrature, the output field is
//! `sin(πα/2V_π) + j·sin(πβ/2V_π)`. Choosing
//!
//! ```text
//! α = (2V_π/π)·asin(r·cos θ_d)      β = (2V_π/π)·asin(r·sin θ_d)
//! ```
//!
//! places the field at `r·e^{jθ_d}`. On the principal `asin` branch both
//! drives stay inside `[−V_π, V_π]` and are continuous whenever `θ_d` is,
//! so `θ_d` can grow forever without a reset. For a linear ramp and `r = 1`
//! both drives are triangle waves a quarter period apart.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample-rate contract: at least this many samples per control period.
pub const MIN_SAMPLES_PER_PERIOD: f64 = 64.0;

/// Desired phase `θ_d(t)`, unbounded and continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrajectory {
    pub t: Vec<f64>,
    pub theta_d: Vec<f64>,
}

impl PhaseTrajectory {
    pub fn new(t: Vec<f64>, theta_d: Vec<f64>) -> Result<Self> {
        let traj = Self { t, theta_d };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.len() != self.theta_d.len() {
            return Err(Error::invalid(format!(
                "trajectory length mismatch: {} time stamps, {} phases",
                self.t.len(),
                self.theta_d.len()
            )));
        }
        if self.t.is_empty() {
            return Err(Error::invalid("trajectory is empty"));
        }
        if self.theta_d.iter().chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::invalid("trajectory contains non-finite values"));
        }
        if self.t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("trajectory time base must be strictly increasing"));
        }
        if let Some(k) = self.theta_d.windows(2).position(|w| (w[1] - w[0]).abs() > PI) {
            return Err(Error::invalid(format!(
                "phase step between samples {k} and {} exceeds π",
                k + 1
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Sampled drive voltages for the I arm (`alpha_sig`) and Q arm (`beta_sig`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlWaveform {
    pub t: Vec<f64>,
    pub alpha_sig: Vec<f64>,
    pub beta_sig: Vec<f64>,
    /// Half-wave voltage assumed when the waveform was synthesized.
    pub v_pi_ref: f64,
    /// Target field magnitude.
    pub r: f64,
}

impl ControlWaveform {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sample rate implied by the first two time stamps, if any.
    pub fn sample_rate(&self) -> Option<f64> {
        match self.t.as_slice() {
            [t0, t1, ..] => Some(1.0 / (t1 - t0)),
            _ => None,
        }
    }

    /// Largest absolute sample-to-sample step over both drives (V).
    pub fn max_step(&self) -> f64 {
        self.alpha_sig
            .windows(2)
            .chain(self.beta_sig.windows(2))
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute drive voltage over both arms (V).
    pub fn peak(&self) -> f64 {
        self.alpha_sig
            .iter()
            .chain(&self.beta_sig)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_sig.len() != self.t.len() || self.beta_sig.len() != self.t.len() {
            return Err(Error::invalid("control waveform columns differ in length"));
        }
        if !(self.v_pi_ref.is_finite() && self.v_pi_ref > 0.0) {
            return Err(Error::invalid(format!("v_pi_ref must be > 0, got {}", self.v_pi_ref)));
        }
        check_radius(self.r)
    }
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("radius r must lie in (0, 1], got {r}")));
    }
    Ok(())
}

/// Drive pair `(α, β)` placing the nominal output field at `r·e^{jθ}`.
#[inline]
pub fn drive_for_phase(theta: f64, r: f64, v_pi: f64) -> (f64, f64) {
    let scale = 2.0 * v_pi / PI;
    let (s, c) = theta.sin_cos();
    // Clamp guards asin against r·cos θ landing a hair above 1.
    let alpha = scale * (r * c).clamp(-1.0, 1.0).asin();
    let beta = scale * (r * s).clamp(-1.0, 1.0).asin();
    (alpha, beta)
}

pub fn synthesize_controls(traj: &PhaseTrajectory, r: f64, v_pi: f64) -> Result<ControlWaveform> {
    check_radius(r)?;
    if !(v_pi.is_finite() && v_pi > 0.0) {
        return Err(Error::invalid(format!("v_pi must be > 0, got {v_pi}")));
    }
    traj.validate()?;
    let (alpha_sig, beta_sig) = traj
        .theta_d
        .iter()
        .map(|&theta| drive_for_phase(theta, r, v_pi))
        .unzip();
    Ok(ControlWaveform {
        t: traj.t.clone(),
        alpha_sig,
        beta_sig,
        v_pi_ref: v_pi,
        r,
    })
}

/// `θ_d(t) = 2π·f_con·t` sampled at `sample_rate` from 0 to `duration`
/// inclusive.
pub fn linear_ramp_trajectory(f_con: f64, duration: f64, sample_rate: f64) -> Result<PhaseTrajectory> {
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(Error::invalid(format!("sample_rate must be > 0, got {sample_rate}")));
    }
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::invalid(format!("duration must be >= 0, got {duration}")));
    }
    if !f_con.is_finite() {
        return Err(Error::invalid("f_con must be finite"));
    }
    if sample_rate < MIN_SAMPLES_PER_PERIOD * f_con.abs() {
        return Err(Error::invalid(format!(
            "undersampled: {sample_rate} Hz is below {MIN_SAMPLES_PER_PERIOD} samples per \
             period of a {f_con} Hz control signal"
        )));
    }
    let intervals = (duration * sample_rate).round() as usize;
    let t: Vec<f64> = (0..=intervals).map(|k| k as f64 / sample_rate).collect();
    let theta_d = t.iter().map(|&t| TAU * f_con * t).collect();
    Ok(PhaseTrajectory { t, theta_d })
}

/// Remove `2π` jumps: every sample after the first is shifted by the
/// multiple of `2π` that brings its step from the previous output within
/// `[−π, π]`. Steps already within that range are left untouched.
pub fn unwrap_phase(wrapped: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(wrapped.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &w in wrapped {
        let mut value = w + offset;
        if let Some(p) = prev {
            let step = value - p;
            if step.abs() > PI {
                let turns = (step / TAU).round();
                offset -= turns * TAU;
                value = w + offset;
            }
        }
        out.push(value);
        prev = Some(value);
    }
    out
}

/// Output phase of the nominal plant for the given drives, unwrapped.
pub fn eopd_phase(w: &ControlWaveform) -> Result<Vec<f64>> {
    w.validate()?;
    let k = PI / (2.0 * w.v_pi_ref);
    let mut wrapped = Vec::with_capacity(w.len());
    for (index, (&a, &b)) in w.alpha_sig.iter().zip(&w.beta_sig).enumerate() {
        let re = (k * a).sin();
        let im = (k * b).sin();
        if re == 0.0 && im == 0.0 {
            return Err(Error::Degenerate {
                index,
                reason: "both arms at null, phase undefined",
            });
        }
        wrapped.push(im.atan2(re));
    }
    Ok(unwrap_phase(&wrapped))
}
