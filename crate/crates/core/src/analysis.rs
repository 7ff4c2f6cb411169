//! Measurements used to validate the device and the loop: magnitude
//! spectra and harmonic suppression of the phase monitor, phase-slope fits,
//! QPSK EVM, and eye opening at the symbol centre.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::control::unwrap_phase;
use crate::error::{Error, Result};

/// Floor applied to empty bins so `mag_db` stays finite.
const DB_FLOOR: f64 = -400.0;

/// Bins on either side of a nominal frequency searched for its peak.
const PEAK_SEARCH_BINS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Rect,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; n],
            // Periodic Hann: a tone centred on a bin leaks into its two
            // neighbours only.
            Window::Hann => (0..n)
                .map(|k| 0.5 * (1.0 - (TAU * k as f64 / n as f64).cos()))
                .collect(),
        }
    }
}

/// One-sided magnitude spectrum in dB relative to its largest bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq: Vec<f64>,
    pub mag_db: Vec<f64>,
    /// Bin spacing (Hz).
    pub resolution: f64,
}

impl Spectrum {
    pub fn peak_frequency(&self) -> f64 {
        let k = self
            .mag_db
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.freq[k]
    }

    /// Largest level within a couple of bins of `f` (dB), or `None` if `f`
    /// is outside the spectrum.
    pub fn level_near(&self, f: f64) -> Option<f64> {
        let nyquist = *self.freq.last()?;
        if !(f >= 0.0 && f <= nyquist + 0.5 * self.resolution) {
            return None;
        }
        let centre = (f / self.resolution).round() as usize;
        let lo = centre.saturating_sub(PEAK_SEARCH_BINS);
        let hi = (centre + PEAK_SEARCH_BINS).min(self.mag_db.len() - 1);
        self.mag_db[lo..=hi].iter().cloned().reduce(f64::max)
    }
}

pub fn spectrum(samples: &[f64], sample_rate: f64, window: Window) -> Result<Spectrum> {
    if samples.len() < 16 {
        return Err(Error::invalid(format!(
            "spectrum needs at least 16 samples, got {}",
            samples.len()
        )));
    }
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(Error::invalid(format!("sample_rate must be > 0, got {sample_rate}")));
    }
    let n = samples.len();
    let mut buf: Vec<Complex64> = samples
        .iter()
        .zip(window.coefficients(n))
        .map(|(&x, w)| Complex64::new(x * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let bins = n / 2 + 1;
    let mags: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    let mag_db = mags
        .iter()
        .map(|&m| {
            if peak > 0.0 && m > 0.0 {
                (20.0 * (m / peak).log10()).max(DB_FLOOR)
            } else if peak > 0.0 {
                DB_FLOOR
            } else {
                0.0
            }
        })
        .collect();
    let resolution = sample_rate / n as f64;
    Ok(Spectrum {
        freq: (0..bins).map(|k| k as f64 * resolution).collect(),
        mag_db,
        resolution,
    })
}

/// Level of the fundamental `f0` minus the strongest of its harmonics
/// `2f0..=n·f0` that fall inside the spectrum (dB).
pub fn harmonic_suppression(s: &Spectrum, f0: f64, n: usize) -> Result<f64> {
    if !(f0 > 0.0) {
        return Err(Error::invalid(format!("fundamental must be > 0 Hz, got {f0}")));
    }
    let fundamental = s
        .level_near(f0)
        .ok_or_else(|| Error::invalid(format!("fundamental {f0} Hz outside spectrum")))?;
    let worst = (2..=n.max(2))
        .filter_map(|k| s.level_near(k as f64 * f0))
        .reduce(f64::max)
        .ok_or_else(|| Error::invalid(format!("no harmonic of {f0} Hz inside spectrum")))?;
    Ok(fundamental - worst)
}

/// Least-squares slope of the unwrapped phase against time (rad/s).
pub fn phase_slope(theta: &[f64], t: &[f64]) -> Result<f64> {
    if theta.len() != t.len() {
        return Err(Error::invalid("phase and time lengths differ"));
    }
    if theta.len() < 2 {
        return Err(Error::invalid("phase slope needs at least 2 samples"));
    }
    let theta = unwrap_phase(theta);
    let n = t.len() as f64;
    let t_mean = t.iter().sum::<f64>() / n;
    let y_mean = theta.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&x, &y) in t.iter().zip(&theta) {
        sxy += (x - t_mean) * (y - y_mean);
        sxx += (x - t_mean) * (x - t_mean);
    }
    if !(sxx > 0.0) {
        return Err(Error::invalid("degenerate time base"));
    }
    Ok(sxy / sxx)
}

/// Unit-radius QPSK point nearest to `z` (constellation at π/4 + kπ/2).
pub fn nearest_qpsk(z: Complex64) -> Complex64 {
    let sector = ((z.arg() - FRAC_PI_4) / FRAC_PI_2).round();
    Complex64::from_polar(1.0, FRAC_PI_4 + sector * FRAC_PI_2)
}

/// RMS error vector magnitude against the nearest unit-radius QPSK point,
/// in percent of the constellation radius.
pub fn evm(i: &[f64], q: &[f64]) -> Result<f64> {
    if i.len() != q.len() {
        return Err(Error::invalid("I and Q lengths differ"));
    }
    if i.is_empty() {
        return Err(Error::invalid("EVM needs at least one symbol"));
    }
    let sum: f64 = i
        .iter()
        .zip(q)
        .map(|(&i, &q)| {
            let z = Complex64::new(i, q);
            (z - nearest_qpsk(z)).norm_sqr()
        })
        .sum();
    Ok(100.0 * (sum / i.len() as f64).sqrt())
}

/// RMS error vector magnitude against the transmitted symbols
/// `e^{jφ_m}`, after removing the rotation by a multiple of π/2 that fits
/// best (QPSK carrier recovery cannot tell those apart). Percent.
pub fn evm_data_aided(i: &[f64], q: &[f64], phi_m: &[f64]) -> Result<f64> {
    if i.len() != q.len() || i.len() != phi_m.len() {
        return Err(Error::invalid("I, Q and symbol lengths differ"));
    }
    if i.is_empty() {
        return Err(Error::invalid("EVM needs at least one symbol"));
    }
    let best = (0..4)
        .map(|k| {
            let rot = Complex64::from_polar(1.0, -(k as f64) * FRAC_PI_2);
            i.iter()
                .zip(q)
                .zip(phi_m)
                .map(|((&i, &q), &phi)| (Complex64::new(i, q) * rot - Complex64::from_polar(1.0, phi)).norm_sqr())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    Ok(100.0 * (best / i.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeMetrics {
    /// Inner opening at the symbol centre over the rail separation, in
    /// `[0, 1]`.
    pub eye_opening: f64,
    /// RMS spread of centre samples about their rail, over half the rail
    /// separation (percent).
    pub evm_percent: f64,
    pub n_traces: usize,
}

/// Fold `waveform` into symbol-long traces and measure the eye at the
/// centre sample. Samples at the centre instant are split into an upper and
/// a lower rail at the midpoint of their range.
pub fn eye_metrics(waveform: &[f64], symbol_period: f64, sample_rate: f64) -> Result<EyeMetrics> {
    let sps = (symbol_period * sample_rate).round();
    if !(sps.is_finite() && sps >= 1.0) {
        return Err(Error::invalid("symbol period shorter than one sample"));
    }
    let sps = sps as usize;
    let n_traces = waveform.len() / sps;
    if n_traces < 10 {
        return Err(Error::invalid(format!(
            "eye needs at least 10 symbol periods, got {n_traces}"
        )));
    }
    let centre: Vec<f64> = (0..n_traces).map(|k| waveform[k * sps + sps / 2]).collect();
    let hi = centre.iter().cloned().fold(f64::MIN, f64::max);
    let lo = centre.iter().cloned().fold(f64::MAX, f64::min);
    let mid = 0.5 * (hi + lo);
    let (upper, lower): (Vec<f64>, Vec<f64>) = centre.iter().partition(|&&x| x >= mid);
    if upper.is_empty() || lower.is_empty() || hi == lo {
        return Ok(EyeMetrics {
            eye_opening: 0.0,
            evm_percent: 0.0,
            n_traces,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (upper_rail, lower_rail) = (mean(&upper), mean(&lower));
    let separation = upper_rail - lower_rail;
    let inner_top = upper.iter().cloned().fold(f64::MAX, f64::min);
    let inner_bottom = lower.iter().cloned().fold(f64::MIN, f64::max);
    let eye_opening = ((inner_top - inner_bottom) / separation).clamp(0.0, 1.0);
    let spread: f64 = upper
        .iter()
        .map(|x| (x - upper_rail).powi(2))
        .chain(lower.iter().map(|x| (x - lower_rail).powi(2)))
        .sum::<f64>()
        / n_traces as f64;
    Ok(EyeMetrics {
        eye_opening,
        evm_percent: 100.0 * spread.sqrt() / (0.5 * separation),
        n_traces,
    })
}
