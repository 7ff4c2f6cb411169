//! IQ modulator plant: two child MZMs biased at null, a phase shifter in the
//! Q arm, and the two monitor photodetectors used to check the magnitude and
//! phase conditions.
//!
//! All fields are baseband envelopes relative to the input carrier; the
//! optical carrier itself is factored out. Photocurrents are normalized
//! (responsivity and load folded into unit scale).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{unwrap_phase, ControlWaveform};
use crate::error::{Error, Result};

/// Output field relative to the input field, `E_out / E_in`.
pub type ComplexField = Complex64;

/// The physical combiner halves the sum of the two arms. The plant undoes
/// that with a fixed factor so that the nominal device reproduces
/// `sin(πα/2V_π) + j·sin(πβ/2V_π)` exactly.
const NOMINAL_PEAK_RESCALE: f64 = 2.0;

/// Smallest phase step per sample accepted without a warning in
/// [`simulate_trace`]: one 64th of a cycle, plus slack for rounding.
const MAX_QUIET_STEP: f64 = 2.0 * PI / 64.0 * (1.0 + 1e-6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulatorParams {
    /// Half-wave voltage of the I-arm MZM (V).
    pub v_pi_i: f64,
    /// Half-wave voltage of the Q-arm MZM (V).
    pub v_pi_q: f64,
    /// Half-wave voltage of the phase shifter embedded in the Q arm (V).
    pub v_pi_pm: f64,
    pub alpha_dc: f64,
    pub beta_dc: f64,
    /// Phase-shifter bias (V); nominally `V_π/2` for a 90° arm offset.
    pub gamma: f64,
    pub alpha_gain: f64,
    pub beta_gain: f64,
    pub combiner_norm: f64,
    /// I/Q power-split asymmetry; the I arm is weighted `1 + imbalance`, the
    /// Q arm `1 − imbalance`.
    pub imbalance: f64,
}

impl ModulatorParams {
    /// Ideal device with every half-wave voltage equal to `v_pi`, both MZMs
    /// at null (`−V_π`) and the phase shifter at quadrature (`V_π/2`).
    pub fn nominal(v_pi: f64) -> Self {
        Self {
            v_pi_i: v_pi,
            v_pi_q: v_pi,
            v_pi_pm: v_pi,
            alpha_dc: -v_pi,
            beta_dc: -v_pi,
            gamma: v_pi / 2.0,
            alpha_gain: 1.0,
            beta_gain: 1.0,
            combiner_norm: 1.0,
            imbalance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("v_pi_i", self.v_pi_i),
            ("v_pi_q", self.v_pi_q),
            ("v_pi_pm", self.v_pi_pm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let rest = [
            self.alpha_dc,
            self.beta_dc,
            self.gamma,
            self.alpha_gain,
            self.beta_gain,
            self.combiner_norm,
            self.imbalance,
        ];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("modulator parameters must be finite"));
        }
        Ok(())
    }

    /// Field transfer without input checks; see [`field_transfer`].
    #[inline]
    pub fn field(&self, v_alpha: f64, v_beta: f64) -> ComplexField {
        let i_arm = self.i_arm(v_alpha);
        let q_arm = self.q_arm(v_beta);
        let rotation = Complex64::from_polar(1.0, self.quadrature_phase());
        (Complex64::new(i_arm, 0.0) + rotation * q_arm) * self.output_scale()
    }

    /// Weighted field amplitude of the I-arm MZM.
    #[inline]
    pub fn i_arm(&self, v_alpha: f64) -> f64 {
        (1.0 + self.imbalance) * (PI * (self.alpha_gain * v_alpha + self.alpha_dc) / (2.0 * self.v_pi_i)).cos()
    }

    /// Weighted field amplitude of the Q-arm MZM, before the phase shifter.
    #[inline]
    pub fn q_arm(&self, v_beta: f64) -> f64 {
        (1.0 - self.imbalance) * (PI * (self.beta_gain * v_beta + self.beta_dc) / (2.0 * self.v_pi_q)).cos()
    }

    /// Phase added to the Q arm by the embedded shifter (rad).
    #[inline]
    pub fn quadrature_phase(&self) -> f64 {
        PI * self.gamma / self.v_pi_pm
    }

    #[inline]
    pub(crate) fn output_scale(&self) -> f64 {
        self.combiner_norm * 0.5 * NOMINAL_PEAK_RESCALE
    }
}

impl Default for ModulatorParams {
    fn default() -> Self {
        Self::nominal(3.0)
    }
}

/// Output field for drive voltages `v_alpha` (I arm) and `v_beta` (Q arm).
///
/// Each child MZM contributes `cos(π(g·v + v_dc) / 2V_π)`; the Q arm is
/// rotated by `πγ / V_π,pm` and the sum is scaled by the combiner. At nominal
/// parameters this is `sin(πv_α/2V_π) + j·sin(πv_β/2V_π)`. The magnitude is
/// bounded by `2·combiner_norm`.
pub fn field_transfer(params: &ModulatorParams, v_alpha: f64, v_beta: f64) -> Result<ComplexField> {
    if !(v_alpha.is_finite() && v_beta.is_finite()) {
        return Err(Error::invalid(format!(
            "drive voltages must be finite, got ({v_alpha}, {v_beta})"
        )));
    }
    params.validate()?;
    Ok(params.field(v_alpha, v_beta))
}

/// Magnitude monitor: photocurrent of the output field, `|f|²`.
#[inline]
pub fn monitor_m1(f: ComplexField) -> f64 {
    f.norm_sqr()
}

/// Phase monitor: output mixed with a unit reference arm, `|1 + f|²`.
/// Equals `2(1 + cos θ)` when `|f| = 1`.
#[inline]
pub fn monitor_m2(f: ComplexField) -> f64 {
    (Complex64::new(1.0, 0.0) + f).norm_sqr()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DriftDistribution {
    /// Relative deviation uniform on `[−range, range]`.
    #[default]
    Uniform,
    /// Relative deviation normal with `σ = range/2`, clipped to `±range`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub relative_range: f64,
    pub distribution: DriftDistribution,
    pub seed: u64,
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.relative_range.is_finite() && self.relative_range >= 0.0) {
            return Err(Error::invalid(format!(
                "relative_range must be finite and >= 0, got {}",
                self.relative_range
            )));
        }
        Ok(())
    }
}

/// Perturb `alpha_dc`, `beta_dc`, `gamma`, `alpha_gain` and `beta_gain`
/// independently by a relative amount drawn per `spec`. Deterministic for a
/// fixed seed.
pub fn apply_drift(params: &ModulatorParams, spec: &DriftSpec) -> Result<ModulatorParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(apply_drift_with(
        params,
        spec.relative_range,
        spec.distribution,
        &mut rng,
    ))
}

/// [`apply_drift`] with a caller-owned generator. Draws happen in a fixed
/// order: `alpha_dc`, `beta_dc`, `gamma`, `alpha_gain`, `beta_gain`.
pub fn apply_drift_with<R: Rng + ?Sized>(
    params: &ModulatorParams,
    relative_range: f64,
    distribution: DriftDistribution,
    rng: &mut R,
) -> ModulatorParams {
    let mut draw = || -> f64 {
        if relative_range == 0.0 {
            return 0.0;
        }
        match distribution {
            DriftDistribution::Uniform => rng.random_range(-relative_range..=relative_range),
            DriftDistribution::Gaussian => {
                let normal = Normal::new(0.0, relative_range / 2.0).expect("sigma is finite");
                normal.sample(rng).clamp(-relative_range, relative_range)
            }
        }
    };
    let mut out = *params;
    out.alpha_dc *= 1.0 + draw();
    out.beta_dc *= 1.0 + draw();
    out.gamma *= 1.0 + draw();
    out.alpha_gain *= 1.0 + draw();
    out.beta_gain *= 1.0 + draw();
    out
}

/// Time-aligned monitor photocurrents and the true output phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorTrace {
    pub t: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// Unwrapped argument of the output field (rad).
    pub theta_true: Vec<f64>,
}

impl MonitorTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Drive the plant with `w` sample by sample and record both monitors.
pub fn simulate_trace(params: &ModulatorParams, w: &ControlWaveform) -> Result<MonitorTrace> {
    if w.is_empty() {
        return Err(Error::invalid("control waveform is empty"));
    }
    params.validate()?;
    let n = w.len();
    let mut m1 = Vec::with_capacity(n);
    let mut m2 = Vec::with_capacity(n);
    let mut wrapped = Vec::with_capacity(n);
    for (&a, &b) in w.alpha_sig.iter().zip(&w.beta_sig) {
        let f = params.field(a, b);
        m1.push(monitor_m1(f));
        m2.push(monitor_m2(f));
        wrapped.push(f.arg());
    }
    let theta_true = unwrap_phase(&wrapped);
    if theta_true.windows(2).any(|p| (p[1] - p[0]).abs() > MAX_QUIET_STEP) {
        log::warn!(
            "output phase moves more than 2π/64 rad per sample; \
             fewer than 64 samples per control period"
        );
    }
    Ok(MonitorTrace {
        t: w.t.clone(),
        m1,
        m2,
        theta_true,
    })
}
