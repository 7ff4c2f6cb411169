//! Carrier-phase synchronization of a self-homodyne QPSK receiver with the
//! EOPD as the loop actuator.
//!
//! The signal and its carrier arrive with a slowly varying phase offset
//! `φ_off`. The EOPD delays the carrier by `θ_EOPD` before mixing, so the
//! receiver sees `φ_m + φ_off + θ_EOPD`. A QPSK Costas detector turns the
//! residual into `V_pd`, an inverting PI filter produces `V_pd,lf`, and the
//! control electronics run the drive waveforms at frequency
//! `f = vco_gain · V_pd,lf`, i.e. `θ_d` integrates `2πf`. The output phase
//! comes back through the modulator model only. Because the drives stay
//! bounded however far `θ_d` runs, the loop can follow an offset that grows
//! without limit.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{evm, evm_data_aided, eye_metrics};
use crate::control::drive_for_phase;
use crate::error::{Error, Result};
use crate::plant::ModulatorParams;

/// Closed-loop runs whose unwrapped residual exceeds this are unstable.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

const QPSK_PHASES: [f64; 4] = [FRAC_PI_4, 3.0 * FRAC_PI_4, 5.0 * FRAC_PI_4, 7.0 * FRAC_PI_4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetProcess {
    /// `φ_off = rate · t` (rad/s).
    Ramp { rate: f64 },
    /// Wiener process with `Var[φ_off(t)] = diffusion · t` (rad²/s).
    RandomWalk { diffusion: f64 },
    /// `φ_off = amplitude · sin(2π·frequency·t)`.
    Sinusoidal { amplitude: f64, frequency: f64 },
}

impl Default for OffsetProcess {
    fn default() -> Self {
        OffsetProcess::Ramp { rate: TAU * 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    Open,
    #[default]
    Closed,
}

/// PI loop filter, `V_pd,lf = −(kp·V_pd + ki·∫V_pd dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopFilter {
    pub kp: f64,
    /// Integral gain (1/s).
    pub ki: f64,
}

impl LoopFilter {
    /// Gains giving a second-order loop with natural frequency
    /// `natural_freq` (Hz) and damping `damping`, for a detector slope of
    /// `√2 · detector_gain` V/rad and an actuator of `vco_gain` Hz/V.
    pub fn design(natural_freq: f64, damping: f64, detector_gain: f64, vco_gain: f64) -> Self {
        let wn = TAU * natural_freq;
        let k = loop_gain(detector_gain, vco_gain);
        Self {
            kp: 2.0 * damping * wn / k,
            ki: wn * wn / k,
        }
    }
}

/// Open-loop gain from residual phase to phase rate (1/s).
fn loop_gain(detector_gain: f64, vco_gain: f64) -> f64 {
    TAU * vco_gain * detector_gain * 2f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub symbol_rate: f64,
    pub samples_per_symbol: usize,
    pub n_symbols: usize,
    pub offset_process: OffsetProcess,
    /// Detector gain (V); the small-signal slope is `√2` times this per rad.
    pub detector_gain: f64,
    pub loop_filter: LoopFilter,
    /// Actuator gain from `V_pd,lf` to control-signal frequency (Hz/V).
    pub vco_gain: f64,
    pub mode: LoopMode,
    pub seed: u64,
    /// Half-wave voltage of the EOPD modulator (V).
    pub v_pi: f64,
    /// Target field magnitude of the EOPD.
    pub radius: f64,
}

pub const DEFAULT_SYMBOL_RATE: f64 = 10e9;
pub const DEFAULT_DETECTOR_GAIN: f64 = 1.0;
pub const DEFAULT_VCO_GAIN: f64 = 1e7;
pub const DEFAULT_DAMPING: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            symbol_rate: DEFAULT_SYMBOL_RATE,
            samples_per_symbol: 16,
            n_symbols: 10_000,
            offset_process: OffsetProcess::default(),
            detector_gain: DEFAULT_DETECTOR_GAIN,
            loop_filter: LoopFilter::design(
                DEFAULT_SYMBOL_RATE / 2000.0,
                DEFAULT_DAMPING,
                DEFAULT_DETECTOR_GAIN,
                DEFAULT_VCO_GAIN,
            ),
            vco_gain: DEFAULT_VCO_GAIN,
            mode: LoopMode::Closed,
            seed: 1,
            v_pi: 3.0,
            radius: 1.0,
        }
    }
}

impl LoopConfig {
    pub fn sample_rate(&self) -> f64 {
        self.symbol_rate * self.samples_per_symbol as f64
    }

    pub fn n_samples(&self) -> usize {
        self.n_symbols * self.samples_per_symbol
    }

    /// Small-signal natural frequency of the closed loop (Hz).
    pub fn natural_frequency(&self) -> f64 {
        let k = loop_gain(self.detector_gain, self.vco_gain);
        (k * self.loop_filter.ki).abs().sqrt() / TAU
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.symbol_rate.is_finite() && self.symbol_rate > 0.0) {
            return Err(Error::invalid("symbol_rate must be > 0"));
        }
        if self.samples_per_symbol < 4 {
            return Err(Error::invalid("samples_per_symbol must be >= 4"));
        }
        if self.n_symbols == 0 {
            return Err(Error::invalid("n_symbols must be >= 1"));
        }
        let gains = [
            self.detector_gain,
            self.loop_filter.kp,
            self.loop_filter.ki,
            self.vco_gain,
            self.v_pi,
        ];
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("loop gains must be finite"));
        }
        if !(self.v_pi > 0.0) {
            return Err(Error::invalid("v_pi must be > 0"));
        }
        if !(self.radius > 0.0 && self.radius <= 1.0) {
            return Err(Error::invalid(format!(
                "radius must lie in (0, 1], got {}",
                self.radius
            )));
        }
        let offset_ok = match self.offset_process {
            OffsetProcess::Ramp { rate } => rate.is_finite(),
            OffsetProcess::RandomWalk { diffusion } => diffusion.is_finite() && diffusion >= 0.0,
            OffsetProcess::Sinusoidal { amplitude, frequency } => amplitude.is_finite() && frequency.is_finite(),
        };
        if !offset_ok {
            return Err(Error::invalid("offset process parameters invalid"));
        }
        let bandwidth = self.natural_frequency();
        if bandwidth >= self.symbol_rate / 10.0 {
            log::warn!(
                "loop natural frequency {bandwidth:.3e} Hz is not below symbol_rate/10 ({:.3e} Hz)",
                self.symbol_rate / 10.0
            );
        }
        Ok(())
    }
}

/// `n_symbols` i.i.d. QPSK phases from `{π/4, 3π/4, 5π/4, 7π/4}`.
pub fn qpsk_source(n_symbols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    (0..n_symbols).map(|_| QPSK_PHASES[rng.random_range(0..4)]).collect()
}

/// Repeat each symbol `samples_per_symbol` times.
pub fn hold(symbols: &[f64], samples_per_symbol: usize) -> Vec<f64> {
    symbols
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, samples_per_symbol))
        .collect()
}

/// `n_samples` samples of the offset process at spacing `dt`, starting at
/// `t = 0` with `φ_off = 0` for the ramp and the random walk.
pub fn offset_process(process: &OffsetProcess, n_samples: usize, dt: f64, seed: u64) -> Vec<f64> {
    match *process {
        OffsetProcess::Ramp { rate } => (0..n_samples).map(|k| rate * k as f64 * dt).collect(),
        OffsetProcess::Sinusoidal { amplitude, frequency } => (0..n_samples)
            .map(|k| amplitude * (TAU * frequency * k as f64 * dt).sin())
            .collect(),
        OffsetProcess::RandomWalk { diffusion } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let step = (diffusion * dt).sqrt();
            let mut phi = 0.0;
            (0..n_samples)
                .map(|k| {
                    if k > 0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        phi += step * z;
                    }
                    phi
                })
                .collect()
        }
    }
}

/// Baseband mixer output: `(cos, sin)` of `φ_m + φ_off + θ_EOPD`.
#[inline]
pub fn mix(phi_m: f64, phi_off: f64, theta_eopd: f64) -> (f64, f64) {
    let (s, c) = (phi_m + phi_off + theta_eopd).sin_cos();
    (c, s)
}

pub fn receiver_mix(phi_m: &[f64], phi_off: &[f64], theta_eopd: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi_m.len() != phi_off.len() || phi_m.len() != theta_eopd.len() {
        return Err(Error::invalid("receiver_mix: input lengths differ"));
    }
    Ok(phi_m
        .iter()
        .zip(phi_off)
        .zip(theta_eopd)
        .map(|((&m, &o), &t)| mix(m, o, t))
        .unzip())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unaveraged QPSK Costas error `sign(i)·q − sign(q)·i`. Equals
/// `√2·sin ε` for a residual `ε` inside the QPSK sector.
#[inline]
pub fn costas_error(i: f64, q: f64) -> f64 {
    sign(i) * q - sign(q) * i
}

/// Costas detector followed by a one-symbol moving average.
#[derive(Debug, Clone)]
pub struct PhaseDetector {
    gain: f64,
    window: VecDeque<f64>,
    len: usize,
    sum: f64,
}

impl PhaseDetector {
    pub fn new(gain: f64, samples_per_symbol: usize) -> Self {
        let len = samples_per_symbol.max(1);
        Self {
            gain,
            window: VecDeque::with_capacity(len),
            len,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, i: f64, q: f64) -> f64 {
        let e = costas_error(i, q);
        if self.window.len() == self.len {
            self.sum -= self.window.pop_front().unwrap_or(0.0);
        }
        self.window.push_back(e);
        self.sum += e;
        self.gain * self.sum / self.len as f64
    }
}

/// Detector output `V_pd` for a block of I/Q samples.
pub fn phase_detector(i: &[f64], q: &[f64], detector_gain: f64, samples_per_symbol: usize) -> Vec<f64> {
    let mut pd = PhaseDetector::new(detector_gain, samples_per_symbol);
    i.iter().zip(q).map(|(&i, &q)| pd.push(i, q)).collect()
}

/// Wrap into the QPSK sector `(−π/4, π/4]`.
pub fn wrap_quarter(x: f64) -> f64 {
    let mut r = x - FRAC_PI_2 * (x / FRAC_PI_2).round();
    if r <= -FRAC_PI_4 {
        r += FRAC_PI_2;
    } else if r > FRAC_PI_4 {
        r -= FRAC_PI_2;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LoopTrace {
    pub sample_rate: f64,
    pub samples_per_symbol: usize,
    pub t: Vec<f64>,
    pub phi_m: Vec<f64>,
    pub phi_off: Vec<f64>,
    pub theta_d: Vec<f64>,
    pub theta_eopd: Vec<f64>,
    pub alpha_sig: Vec<f64>,
    pub beta_sig: Vec<f64>,
    pub v_pd: Vec<f64>,
    pub v_pd_lf: Vec<f64>,
    pub i_out: Vec<f64>,
    pub q_out: Vec<f64>,
    /// `φ_off + θ_EOPD` wrapped into `(−π/4, π/4]`.
    pub residual: Vec<f64>,
}

impl LoopTrace {
    fn with_capacity(n: usize, sample_rate: f64, samples_per_symbol: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self {
            sample_rate,
            samples_per_symbol,
            t: v(),
            phi_m: v(),
            phi_off: v(),
            theta_d: v(),
            theta_eopd: v(),
            alpha_sig: v(),
            beta_sig: v(),
            v_pd: v(),
            v_pd_lf: v(),
            i_out: v(),
            q_out: v(),
            residual: v(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Indices of the centre sample of every complete symbol.
    pub fn symbol_centres(&self) -> impl Iterator<Item = usize> + '_ {
        let sps = self.samples_per_symbol;
        (0..self.len() / sps).map(move |k| k * sps + sps / 2)
    }
}

/// Simulate the loop sample by sample.
pub fn run_loop(config: &LoopConfig) -> Result<LoopTrace> {
    config.validate()?;
    let n = config.n_samples();
    let sps = config.samples_per_symbol;
    let fs = config.sample_rate();
    let dt = 1.0 / fs;
    let symbols = qpsk_source(config.n_symbols, config.seed);
    let phi_off = offset_process(&config.offset_process, n, dt, config.seed);
    let plant = ModulatorParams::nominal(config.v_pi);
    let mut detector = PhaseDetector::new(config.detector_gain, sps);
    let closed = config.mode == LoopMode::Closed;

    let mut trace = LoopTrace::with_capacity(n, fs, sps);
    let mut theta_d = 0.0;
    let mut integrator = 0.0;
    let mut v_lf = 0.0;
    let mut theta_eopd: Option<f64> = None;

    for (k, &off) in phi_off.iter().enumerate() {
        if closed && k > 0 {
            theta_d += TAU * config.vco_gain * v_lf * dt;
        }
        let (alpha, beta) = drive_for_phase(theta_d, config.radius, config.v_pi);
        let wrapped = plant.field(alpha, beta).arg();
        let theta = match theta_eopd {
            None => wrapped,
            Some(prev) => prev + wrap_pi(wrapped - prev),
        };
        theta_eopd = Some(theta);

        let phi_m = symbols[k / sps];
        let (i, q) = mix(phi_m, off, theta);
        let v_pd = detector.push(i, q);
        integrator += config.loop_filter.ki * v_pd * dt;
        v_lf = -(config.loop_filter.kp * v_pd + integrator);

        let unwrapped_residual = off + theta;
        trace.t.push(k as f64 * dt);
        trace.phi_m.push(phi_m);
        trace.phi_off.push(off);
        trace.theta_d.push(theta_d);
        trace.theta_eopd.push(theta);
        trace.alpha_sig.push(alpha);
        trace.beta_sig.push(beta);
        trace.v_pd.push(v_pd);
        trace.v_pd_lf.push(v_lf);
        trace.i_out.push(i);
        trace.q_out.push(q);
        trace.residual.push(wrap_quarter(unwrapped_residual));

        if closed && !(unwrapped_residual.abs() <= DIVERGENCE_LIMIT) {
            return Err(Error::Unstable {
                sample: k,
                residual: unwrapped_residual,
                trace: Box::new(trace),
            });
        }
    }
    Ok(trace)
}

fn wrap_pi(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

/// Scalar results of one loop run. Residual statistics use the second half
/// of the run (after lock); constellation metrics use symbol centres over
/// the same span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub residual_rms: f64,
    /// EVM against the transmitted symbols with the QPSK quarter-turn
    /// ambiguity removed (percent).
    pub evm_percent: f64,
    /// EVM against the nearest constellation point (percent).
    pub evm_nearest_percent: f64,
    /// Eye opening of the in-phase output.
    pub eye_opening: f64,
    pub v_pd_lf_final: f64,
    pub theta_d_final: f64,
    pub max_drive: f64,
}

pub fn summarize(trace: &LoopTrace) -> Result<LoopSummary> {
    if trace.is_empty() {
        return Err(Error::invalid("empty loop trace"));
    }
    let start = trace.len() / 2;
    let tail = &trace.residual[start..];
    let residual_rms = (tail.iter().map(|r| r * r).sum::<f64>() / tail.len() as f64).sqrt();

    let centres: Vec<usize> = trace.symbol_centres().filter(|&k| k >= start).collect();
    if centres.is_empty() {
        return Err(Error::invalid("loop trace too short for symbol statistics"));
    }
    let pick = |v: &[f64]| -> Vec<f64> { centres.iter().map(|&k| v[k]).collect() };
    let (i, q, phi_m) = (pick(&trace.i_out), pick(&trace.q_out), pick(&trace.phi_m));
    let sps = trace.samples_per_symbol;
    let first_symbol = start.div_ceil(sps) * sps;
    let eye = eye_metrics(
        &trace.i_out[first_symbol..],
        sps as f64 / trace.sample_rate,
        trace.sample_rate,
    )?;
    let max_drive = trace
        .alpha_sig
        .iter()
        .chain(&trace.beta_sig)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(LoopSummary {
        residual_rms,
        evm_percent: evm_data_aided(&i, &q, &phi_m)?,
        evm_nearest_percent: evm(&i, &q)?,
        eye_opening: eye.eye_opening,
        v_pd_lf_final: *trace.v_pd_lf.last().unwrap(),
        theta_d_final: *trace.theta_d.last().unwrap(),
        max_drive,
    })
}

/// Steady-state `V_pd,lf` that cancels a ramp offset of `rate` rad/s.
pub fn ramp_steady_state_control(rate: f64, vco_gain: f64) -> f64 {
    -rate / (TAU * vco_gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    #[test]
    fn qpsk_source_is_reproducible() {
        assert_eq!(qpsk_source(100, 4), qpsk_source(100, 4));
        assert_ne!(qpsk_source(100, 4), qpsk_source(100, 5));
        let one = qpsk_source(1, 9);
        assert_eq!(one.len(), 1);
        assert!(QPSK_PHASES.contains(&one[0]));
        assert_eq!(hold(&one, 16), vec![one[0]; 16]);
    }

    #[test]
    fn qpsk_symbols_are_balanced() {
        let symbols = qpsk_source(100_000, 2024);
        let mut counts = [0usize; 4];
        for s in &symbols {
            counts[QPSK_PHASES.iter().position(|p| p == s).unwrap()] += 1;
        }
        let expected = symbols.len() as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 3 degrees of freedom, 99.9 % point.
        assert!(chi2 < 16.27, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 / symbols.len() as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn offset_examples() {
        let ramp = offset_process(&OffsetProcess::Ramp { rate: TAU * 1e3 }, 1001, 1e-6, 0);
        assert_abs_diff_eq!(*ramp.last().unwrap(), TAU, epsilon = 1e-12);
        let still = offset_process(&OffsetProcess::RandomWalk { diffusion: 0.0 }, 100, 1e-3, 0);
        assert!(still.iter().all(|&x| x == 0.0));
        let sine = offset_process(
            &OffsetProcess::Sinusoidal {
                amplitude: 2.0,
                frequency: 1.0,
            },
            5,
            0.25,
            0,
        );
        assert_abs_diff_eq!(sine[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sine[3], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn random_walk_variance_grows_linearly() {
        let diffusion = 4.0;
        let (n, dt) = (200, 1e-3);
        let horizon = (n - 1) as f64 * dt;
        let finals: Vec<f64> = (0..1000)
            .map(|seed| {
                *offset_process(&OffsetProcess::RandomWalk { diffusion }, n, dt, seed)
                    .last()
                    .unwrap()
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64;
        assert!((var / (diffusion * horizon) - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn mixer_examples() {
        let (i, q) = mix(FRAC_PI_4, 0.0, 0.0);
        assert_abs_diff_eq!(i, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(q, FRAC_1_SQRT_2, epsilon = 1e-15);
        for off in [-7.3, 0.4, 123.0] {
            let (i, q) = mix(0.0, off, -off);
            assert_abs_diff_eq!(i, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(q, 0.0, epsilon = 1e-15);
        }
        let (i, q) = mix(0.0, FRAC_PI_2, 0.0);
        assert_abs_diff_eq!(i, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q, 1.0, epsilon = 1e-15);
        assert!(receiver_mix(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    fn detector_output(residual: f64) -> f64 {
        let sps = 8;
        let phi_m = hold(&qpsk_source(100, 3), sps);
        let off = vec![residual; phi_m.len()];
        let theta = vec![0.0; phi_m.len()];
        let (i, q) = receiver_mix(&phi_m, &off, &theta).unwrap();
        let v = phase_detector(&i, &q, 1.0, sps);
        v.iter().skip(sps).sum::<f64>() / (v.len() - sps) as f64
    }

    #[test]
    fn detector_examples() {
        assert_abs_diff_eq!(detector_output(0.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(detector_output(FRAC_PI_2), 0.0, epsilon = 1e-12);
        let small = detector_output(0.05);
        let predicted = 2f64.sqrt() * 0.05;
        assert!(small > 0.0);
        assert!((small / predicted - 1.0).abs() < 0.2);
        assert!(detector_output(-0.05) < 0.0);
    }

    #[test]
    fn wrap_quarter_range() {
        for k in -40..40 {
            let x = k as f64 * 0.173;
            let w = wrap_quarter(x);
            assert!(w > -FRAC_PI_4 && w <= FRAC_PI_4 + 1e-15);
            let turns = (x - w) / FRAC_PI_2;
            assert_abs_diff_eq!(turns, turns.round(), epsilon = 1e-9);
        }
        assert_abs_diff_eq!(wrap_quarter(PI), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn filter_design_hits_requested_natural_frequency() {
        let cfg = LoopConfig::default();
        assert_abs_diff_eq!(
            cfg.natural_frequency(),
            cfg.symbol_rate / 2000.0,
            epsilon = 1e-6 * cfg.symbol_rate
        );
    }

    #[test]
    fn config_validation() {
        let bad = [
            LoopConfig {
                samples_per_symbol: 3,
                ..Default::default()
            },
            LoopConfig {
                n_symbols: 0,
                ..Default::default()
            },
            LoopConfig {
                symbol_rate: 0.0,
                ..Default::default()
            },
            LoopConfig {
                radius: 0.0,
                ..Default::default()
            },
            LoopConfig {
                vco_gain: f64::NAN,
                ..Default::default()
            },
            LoopConfig {
                offset_process: OffsetProcess::RandomWalk { diffusion: -1.0 },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(run_loop(&c).is_err(), "{c:?}");
        }
    }

    #[test]
    fn zero_offset_stays_locked_and_static() {
        let cfg = LoopConfig {
            offset_process: OffsetProcess::Ramp { rate: 0.0 },
            n_symbols: 2000,
            ..Default::default()
        };
        let trace = run_loop(&cfg).unwrap();
        assert!(trace.residual.iter().all(|r| r.abs() < 1e-12));
        assert!(trace.alpha_sig.iter().all(|&a| (a - cfg.v_pi).abs() < 1e-12));
        assert!(trace.beta_sig.iter().all(|&b| b.abs() < 1e-12));
    }

    #[test]
    fn closed_loop_cancels_ramp() {
        let cfg = LoopConfig::default();
        let trace = run_loop(&cfg).unwrap();
        let s = summarize(&trace).unwrap();
        assert!(s.residual_rms < 0.05, "{s:?}");
        let OffsetProcess::Ramp { rate } = cfg.offset_process else {
            unreachable!()
        };
        let expected = ramp_steady_state_control(rate, cfg.vco_gain);
        assert!((s.v_pd_lf_final / expected - 1.0).abs() < 0.01, "{s:?} vs {expected}");
        // θ_EOPD runs opposite to the offset.
        let t_end = *trace.t.last().unwrap();
        assert!((trace.theta_eopd.last().unwrap() + rate * t_end).abs() < 0.05);
    }

    #[test]
    fn open_loop_rotates_constellation() {
        let cfg = LoopConfig {
            mode: LoopMode::Open,
            ..Default::default()
        };
        let trace = run_loop(&cfg).unwrap();
        assert!(trace.theta_d.iter().all(|&t| t == 0.0));
        let s = summarize(&trace).unwrap();
        assert!(s.eye_opening < 0.1, "{s:?}");
        // V_pd swings both ways as the residual sweeps the sector.
        let max = trace.v_pd.iter().cloned().fold(f64::MIN, f64::max);
        let min = trace.v_pd.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max > 0.5 && min < -0.5);
    }

    #[test]
    fn drives_stay_bounded_over_many_turns() {
        let symbol_rate = DEFAULT_SYMBOL_RATE;
        let cfg = LoopConfig {
            n_symbols: 30_000,
            offset_process: OffsetProcess::Ramp { rate: TAU * 20e6 },
            loop_filter: LoopFilter::design(
                symbol_rate / 200.0,
                DEFAULT_DAMPING,
                DEFAULT_DETECTOR_GAIN,
                DEFAULT_VCO_GAIN,
            ),
            ..Default::default()
        };
        let trace = run_loop(&cfg).unwrap();
        let s = summarize(&trace).unwrap();
        assert!(s.theta_d_final.abs() > 100.0 * PI, "{s:?}");
        assert!(s.max_drive <= cfg.v_pi);
        assert!(s.residual_rms < 0.05);
    }

    #[test]
    fn runaway_loop_reports_instability() {
        // An offset far outside the pull-in range runs away from the loop.
        let cfg = LoopConfig {
            offset_process: OffsetProcess::Ramp { rate: TAU * 5e9 },
            ..Default::default()
        };
        match run_loop(&cfg) {
            Err(Error::Unstable { trace, sample, .. }) => assert_eq!(trace.len(), sample + 1),
            other => panic!("expected instability, got {other:?}"),
        }
    }
}
