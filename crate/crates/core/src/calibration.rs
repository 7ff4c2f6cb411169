//! Bias and gain calibration by iterative gradient descent on the magnitude
//! monitor.
//!
//! The control electronics (CE) set five quantities: the two MZM biases, the
//! phase-shifter bias and the two drive gains ([`ParamVector`]). The device
//! drifts, so the settings that put the MZMs at null and the Q arm at
//! quadrature move away from their factory values. A drifted device is
//! described by the [`ModulatorParams`] it presents when the CE applies the
//! nominal settings; a candidate setting shifts each bias by its offset from
//! nominal and scales each gain by its ratio to nominal. The optimum
//! candidate therefore cancels the drift exactly.
//!
//! The risk `J` is the mean squared difference between the actual monitor
//! `M1` and the monitor predicted for an ideal device driven by the same
//! ideal waveform. Gradients are central finite differences of `J`, which is
//! all a real CE can observe. Parameters are updated one at a time, in the
//! order γ, β_sg, β_dc, α_sg, α_dc, each using the freshest values of the
//! others, with steps scaled by the parameter's natural magnitude (`V_π` for
//! voltages, 1 for gains).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{linear_ramp_trajectory, synthesize_controls, ControlWaveform, MIN_SAMPLES_PER_PERIOD};
use crate::error::{Error, Result};
use crate::plant::{apply_drift_with, monitor_m1, DriftSpec, ModulatorParams};

/// A run counts as converged when its final risk is below 0.1 %.
pub const CONVERGED_RISK: f64 = 1e-3;

/// The five CE settings optimized by the descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha_dc: f64,
    pub beta_dc: f64,
    pub gamma: f64,
    pub alpha_sg: f64,
    pub beta_sg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    Gamma,
    BetaGain,
    BetaDc,
    AlphaGain,
    AlphaDc,
}

/// Update order within one epoch.
pub const UPDATE_ORDER: [Param; 5] = [
    Param::Gamma,
    Param::BetaGain,
    Param::BetaDc,
    Param::AlphaGain,
    Param::AlphaDc,
];

impl ParamVector {
    /// Factory settings for a device with the given half-wave voltages.
    pub fn nominal_for(plant: &ModulatorParams) -> Self {
        Self {
            alpha_dc: -plant.v_pi_i,
            beta_dc: -plant.v_pi_q,
            gamma: plant.v_pi_pm / 2.0,
            alpha_sg: 1.0,
            beta_sg: 1.0,
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Gamma => self.gamma,
            Param::BetaGain => self.beta_sg,
            Param::BetaDc => self.beta_dc,
            Param::AlphaGain => self.alpha_sg,
            Param::AlphaDc => self.alpha_dc,
        }
    }

    pub fn set(&mut self, p: Param, value: f64) {
        match p {
            Param::Gamma => self.gamma = value,
            Param::BetaGain => self.beta_sg = value,
            Param::BetaDc => self.beta_dc = value,
            Param::AlphaGain => self.alpha_sg = value,
            Param::AlphaDc => self.alpha_dc = value,
        }
    }

    pub fn is_valid(&self) -> bool {
        UPDATE_ORDER.iter().all(|&p| self.get(p).is_finite()) && self.alpha_sg > 0.0 && self.beta_sg > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    /// Learning rate in normalized units.
    pub mu: f64,
    pub epochs: usize,
    /// Descent is skipped (and stopped) once the risk is at or below this.
    pub gate: f64,
    /// Risk above which the settings are reset to nominal.
    pub reset_threshold: f64,
    /// Finite-difference step in normalized units (`× V_π` for voltages).
    pub fd_step: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            mu: 0.05,
            epochs: 500,
            gate: 1e-5,
            reset_threshold: 0.5,
            fd_step: 1e-3,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::invalid(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.gate.is_finite() && self.gate >= 0.0) {
            return Err(Error::invalid(format!("gate must be >= 0, got {}", self.gate)));
        }
        if !(self.reset_threshold > self.gate) {
            return Err(Error::invalid(format!(
                "reset_threshold ({}) must exceed gate ({})",
                self.reset_threshold, self.gate
            )));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::invalid(format!("fd_step must be > 0, got {}", self.fd_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Risk after each epoch; entry 0 is the initial risk.
    pub j_history: Vec<f64>,
    /// Settings evaluated at each entry of `j_history`.
    pub param_history: Vec<ParamVector>,
    pub resets: usize,
    /// Epochs whose risk crossed the reset threshold.
    pub reset_epochs: Vec<usize>,
    pub converged: bool,
    pub final_j: f64,
}

impl CalibrationReport {
    pub fn initial_j(&self) -> f64 {
        self.j_history[0]
    }

    pub fn final_params(&self) -> ParamVector {
        *self.param_history.last().expect("history is never empty")
    }

    /// Number of descent epochs actually run.
    pub fn epochs_run(&self) -> usize {
        self.j_history.len() - 1
    }
}

/// Something with a risk to minimize over [`ParamVector`].
pub trait Objective {
    fn risk(&self, pv: &ParamVector) -> f64;

    /// Natural magnitude of a parameter; finite-difference and descent steps
    /// are taken in units of it.
    fn scale(&self, p: Param) -> f64;
}

/// Ideal M1 for a waveform: the nominal plant at the waveform's `V_π`.
pub fn predicted_m1(waveform: &ControlWaveform) -> Vec<f64> {
    let ideal = ModulatorParams::nominal(waveform.v_pi_ref);
    waveform
        .alpha_sig
        .iter()
        .zip(&waveform.beta_sig)
        .map(|(&a, &b)| monitor_m1(ideal.field(a, b)))
        .collect()
}

/// Mean squared difference between two monitor traces.
pub fn risk(m1_actual: &[f64], m1_predicted: &[f64]) -> Result<f64> {
    if m1_actual.len() != m1_predicted.len() {
        return Err(Error::invalid(format!(
            "risk: length mismatch ({} vs {})",
            m1_actual.len(),
            m1_predicted.len()
        )));
    }
    if m1_actual.is_empty() {
        return Err(Error::invalid("risk: empty traces"));
    }
    Ok(mean_square_diff(m1_actual, m1_predicted))
}

fn mean_square_diff(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Risk of a drifted device driven by the ideal waveform under candidate
/// CE settings.
#[derive(Debug, Clone)]
pub struct PlantObjective {
    true_plant: ModulatorParams,
    nominal: ParamVector,
    alpha_sig: Vec<f64>,
    beta_sig: Vec<f64>,
    /// Drive angles `πv/2V_π` per arm, before gain.
    alpha_angle: Vec<f64>,
    beta_angle: Vec<f64>,
    predicted: Vec<f64>,
}

impl PlantObjective {
    pub fn new(true_plant: &ModulatorParams, waveform: &ControlWaveform) -> Result<Self> {
        true_plant.validate()?;
        waveform.validate()?;
        if waveform.is_empty() {
            return Err(Error::invalid("calibration waveform is empty"));
        }
        let angles = |v: &[f64], v_pi: f64| -> Vec<f64> { v.iter().map(|x| PI * x / (2.0 * v_pi)).collect() };
        Ok(Self {
            true_plant: *true_plant,
            nominal: ParamVector::nominal_for(true_plant),
            alpha_sig: waveform.alpha_sig.clone(),
            beta_sig: waveform.beta_sig.clone(),
            alpha_angle: angles(&waveform.alpha_sig, true_plant.v_pi_i),
            beta_angle: angles(&waveform.beta_sig, true_plant.v_pi_q),
            predicted: predicted_m1(waveform),
        })
    }

    pub fn nominal(&self) -> ParamVector {
        self.nominal
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    /// Device parameters seen by the optics under candidate settings `pv`.
    pub fn effective_plant(&self, pv: &ParamVector) -> ModulatorParams {
        let mut p = self.true_plant;
        p.alpha_dc += pv.alpha_dc - self.nominal.alpha_dc;
        p.beta_dc += pv.beta_dc - self.nominal.beta_dc;
        p.gamma += pv.gamma - self.nominal.gamma;
        p.alpha_gain *= pv.alpha_sg / self.nominal.alpha_sg;
        p.beta_gain *= pv.beta_sg / self.nominal.beta_sg;
        p
    }

    pub fn actual_m1(&self, pv: &ParamVector) -> Vec<f64> {
        let plant = self.effective_plant(pv);
        self.alpha_sig
            .iter()
            .zip(&self.beta_sig)
            .map(|(&a, &b)| monitor_m1(plant.field(a, b)))
            .collect()
    }

    /// Actual M2 (phase monitor) under candidate settings.
    pub fn actual_m2(&self, pv: &ParamVector) -> Vec<f64> {
        let plant = self.effective_plant(pv);
        self.alpha_sig
            .iter()
            .zip(&self.beta_sig)
            .map(|(&a, &b)| crate::plant::monitor_m2(plant.field(a, b)))
            .collect()
    }

    fn risk_from_arms(&self, i_arm: &[f64], q_arm: &[f64], plant: &ModulatorParams) -> f64 {
        let cross = 2.0 * plant.quadrature_phase().cos();
        let scale2 = plant.output_scale().powi(2);
        let sum: f64 = i_arm
            .iter()
            .zip(q_arm)
            .zip(&self.predicted)
            .map(|((&i, &q), &pred)| {
                let m1 = scale2 * (i * i + q * q + cross * i * q);
                (m1 - pred) * (m1 - pred)
            })
            .sum();
        sum / self.predicted.len() as f64
    }

    /// Same update as [`descent_step`], evaluated incrementally: a bias or
    /// γ probe only touches one arm (or neither), and bias probes reuse
    /// `cos`/`sin` tables of the gain-scaled drive angle via angle addition.
    /// Returns the risk at the updated settings.
    pub fn sequential_epoch(&self, pv: &mut ParamVector, cfg: &DescentConfig) -> f64 {
        let n = self.predicted.len();
        let mut i_arm = vec![0.0; n];
        let mut q_arm = vec![0.0; n];
        let mut probe_up = vec![0.0; n];
        let mut probe_down = vec![0.0; n];
        let mut a_table = ArmTable::new(&self.alpha_angle);
        let mut b_table = ArmTable::new(&self.beta_angle);

        let mut plant = self.effective_plant(pv);
        a_table.tabulate(plant.alpha_gain);
        b_table.tabulate(plant.beta_gain);
        let (wa, wb) = (1.0 + plant.imbalance, 1.0 - plant.imbalance);
        let a_phase = |p: &ModulatorParams| PI * p.alpha_dc / (2.0 * p.v_pi_i);
        let b_phase = |p: &ModulatorParams| PI * p.beta_dc / (2.0 * p.v_pi_q);
        a_table.fill(wa, a_phase(&plant), &mut i_arm);
        b_table.fill(wb, b_phase(&plant), &mut q_arm);

        for p in UPDATE_ORDER {
            let s = self.scale(p);
            let h = cfg.fd_step * s;
            let x = pv.get(p);
            let mut up = *pv;
            up.set(p, x + h);
            let mut down = *pv;
            down.set(p, x - h);
            let (pu, pd) = (self.effective_plant(&up), self.effective_plant(&down));
            let (j_up, j_down) = match p {
                Param::Gamma => (
                    self.risk_from_arms(&i_arm, &q_arm, &pu),
                    self.risk_from_arms(&i_arm, &q_arm, &pd),
                ),
                Param::BetaGain => {
                    fill_direct(&self.beta_angle, pu.beta_gain, wb, b_phase(&pu), &mut probe_up);
                    fill_direct(&self.beta_angle, pd.beta_gain, wb, b_phase(&pd), &mut probe_down);
                    (
                        self.risk_from_arms(&i_arm, &probe_up, &pu),
                        self.risk_from_arms(&i_arm, &probe_down, &pd),
                    )
                }
                Param::BetaDc => {
                    b_table.fill(wb, b_phase(&pu), &mut probe_up);
                    b_table.fill(wb, b_phase(&pd), &mut probe_down);
                    (
                        self.risk_from_arms(&i_arm, &probe_up, &pu),
                        self.risk_from_arms(&i_arm, &probe_down, &pd),
                    )
                }
                Param::AlphaGain => {
                    fill_direct(&self.alpha_angle, pu.alpha_gain, wa, a_phase(&pu), &mut probe_up);
                    fill_direct(&self.alpha_angle, pd.alpha_gain, wa, a_phase(&pd), &mut probe_down);
                    (
                        self.risk_from_arms(&probe_up, &q_arm, &pu),
                        self.risk_from_arms(&probe_down, &q_arm, &pd),
                    )
                }
                Param::AlphaDc => {
                    a_table.fill(wa, a_phase(&pu), &mut probe_up);
                    a_table.fill(wa, a_phase(&pd), &mut probe_down);
                    (
                        self.risk_from_arms(&probe_up, &q_arm, &pu),
                        self.risk_from_arms(&probe_down, &q_arm, &pd),
                    )
                }
            };
            let g = (j_up - j_down) / (2.0 * h);
            pv.set(p, x - cfg.mu * s * s * g);

            plant = self.effective_plant(pv);
            match p {
                Param::Gamma => {}
                Param::BetaGain => {
                    b_table.tabulate(plant.beta_gain);
                    b_table.fill(wb, b_phase(&plant), &mut q_arm);
                }
                Param::BetaDc => b_table.fill(wb, b_phase(&plant), &mut q_arm),
                Param::AlphaGain => {
                    a_table.tabulate(plant.alpha_gain);
                    a_table.fill(wa, a_phase(&plant), &mut i_arm);
                }
                Param::AlphaDc => a_table.fill(wa, a_phase(&plant), &mut i_arm),
            }
        }
        self.risk_from_arms(&i_arm, &q_arm, &plant)
    }
}

/// `cos`/`sin` of `gain · angle` per sample, so that
/// `cos(gain·angle + phase)` for any `phase` costs no further trig calls.
struct ArmTable<'a> {
    angle: &'a [f64],
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl<'a> ArmTable<'a> {
    fn new(angle: &'a [f64]) -> Self {
        Self {
            angle,
            cos: vec![0.0; angle.len()],
            sin: vec![0.0; angle.len()],
        }
    }

    fn tabulate(&mut self, gain: f64) {
        for ((c, s), &x) in self.cos.iter_mut().zip(self.sin.iter_mut()).zip(self.angle) {
            (*s, *c) = (gain * x).sin_cos();
        }
    }

    fn fill(&self, weight: f64, phase: f64, out: &mut [f64]) {
        let (sp, cp) = phase.sin_cos();
        for ((o, &c), &s) in out.iter_mut().zip(&self.cos).zip(&self.sin) {
            *o = weight * (c * cp - s * sp);
        }
    }
}

fn fill_direct(angle: &[f64], gain: f64, weight: f64, phase: f64, out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(angle) {
        *o = weight * (gain * x + phase).cos();
    }
}

impl Objective for PlantObjective {
    fn risk(&self, pv: &ParamVector) -> f64 {
        let plant = self.effective_plant(pv);
        // |I + e^{jφ}Q|² = I² + Q² + 2IQ·cos φ, scaled by the combiner.
        let cross = 2.0 * plant.quadrature_phase().cos();
        let scale2 = plant.output_scale().powi(2);
        let mut sum = 0.0;
        for ((&a, &b), &pred) in self.alpha_sig.iter().zip(&self.beta_sig).zip(&self.predicted) {
            let i = plant.i_arm(a);
            let q = plant.q_arm(b);
            let m1 = scale2 * (i * i + q * q + cross * i * q);
            sum += (m1 - pred) * (m1 - pred);
        }
        sum / self.predicted.len() as f64
    }

    fn scale(&self, p: Param) -> f64 {
        match p {
            Param::Gamma => self.true_plant.v_pi_pm,
            Param::BetaDc => self.true_plant.v_pi_q,
            Param::AlphaDc => self.true_plant.v_pi_i,
            Param::AlphaGain | Param::BetaGain => 1.0,
        }
    }
}

/// Central difference of the risk along one parameter, step
/// `step · scale(p)`.
pub fn partial<O: Objective + ?Sized>(objective: &O, pv: &ParamVector, p: Param, step: f64) -> f64 {
    let h = step * objective.scale(p);
    let x = pv.get(p);
    let mut probe = *pv;
    probe.set(p, x + h);
    let up = objective.risk(&probe);
    probe.set(p, x - h);
    let down = objective.risk(&probe);
    (up - down) / (2.0 * h)
}

/// Finite-difference gradient of the risk, each component taken with the
/// others held at `pv`.
pub fn gradient<O: Objective + ?Sized>(pv: &ParamVector, objective: &O, cfg: &DescentConfig) -> ParamVector {
    let mut g = *pv;
    for p in UPDATE_ORDER {
        g.set(p, partial(objective, pv, p, cfg.fd_step));
    }
    g
}

/// One epoch of sequential updates `p ← p − μ·s²·∂J/∂p`, in
/// [`UPDATE_ORDER`], each partial taken at the freshest settings.
pub fn descent_step<O: Objective + ?Sized>(objective: &O, pv: &mut ParamVector, cfg: &DescentConfig) {
    for p in UPDATE_ORDER {
        let s = objective.scale(p);
        let g = partial(objective, pv, p, cfg.fd_step);
        pv.set(p, pv.get(p) - cfg.mu * s * s * g);
    }
}

/// Run the descent from `init` against the drifted device `true_plant`.
///
/// Skips the loop if the initial risk is already at or below `cfg.gate`, and
/// stops early once it gets there. Whenever an epoch ends with the risk
/// above `cfg.reset_threshold` (or a gain driven non-positive), the next
/// epoch starts again from nominal settings.
pub fn calibrate(
    true_plant: &ModulatorParams,
    init: &ParamVector,
    waveform: &ControlWaveform,
    cfg: &DescentConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if !init.is_valid() {
        return Err(Error::invalid(format!("initial parameters invalid: {init:?}")));
    }
    let objective = PlantObjective::new(true_plant, waveform)?;
    run_descent(&objective, init, cfg)
}

fn run_descent(objective: &PlantObjective, init: &ParamVector, cfg: &DescentConfig) -> Result<CalibrationReport> {
    let nominal = objective.nominal();
    let mut pv = *init;
    let mut j = objective.risk(&pv);
    let mut report = CalibrationReport {
        j_history: vec![j],
        param_history: vec![pv],
        resets: 0,
        reset_epochs: Vec::new(),
        converged: false,
        final_j: j,
    };
    if !j.is_finite() {
        return Err(Error::NumericFailure {
            epoch: 0,
            report: Box::new(report),
        });
    }
    if j > cfg.gate {
        for epoch in 1..=cfg.epochs {
            j = objective.sequential_epoch(&mut pv, cfg);
            if !j.is_finite() {
                report.final_j = *report.j_history.last().unwrap();
                report.converged = report.final_j < CONVERGED_RISK;
                return Err(Error::NumericFailure {
                    epoch,
                    report: Box::new(report),
                });
            }
            report.j_history.push(j);
            report.param_history.push(pv);
            if j > cfg.reset_threshold || !pv.is_valid() {
                pv = nominal;
                report.resets += 1;
                report.reset_epochs.push(epoch);
            } else if j <= cfg.gate {
                break;
            }
        }
    }
    report.final_j = j;
    report.converged = j < CONVERGED_RISK;
    Ok(report)
}

/// Ideal `r = 1` ramp waveform of `n_samples` samples spanning `periods`
/// control periods at `f_con`, without the closing sample so the trace is
/// exactly periodic.
pub fn ramp_waveform(v_pi: f64, f_con: f64, periods: f64, n_samples: usize) -> Result<ControlWaveform> {
    if n_samples < 2 {
        return Err(Error::invalid("calibration waveform needs at least 2 samples"));
    }
    if !(f_con > 0.0 && periods > 0.0) {
        return Err(Error::invalid("f_con and periods must be > 0"));
    }
    if (n_samples as f64) < MIN_SAMPLES_PER_PERIOD * periods {
        return Err(Error::invalid(format!(
            "{n_samples} samples over {periods} periods is below {MIN_SAMPLES_PER_PERIOD} per period"
        )));
    }
    let duration = periods / f_con;
    let sample_rate = n_samples as f64 / duration;
    let mut traj = linear_ramp_trajectory(f_con, duration, sample_rate)?;
    traj.t.truncate(n_samples);
    traj.theta_d.truncate(n_samples);
    synthesize_controls(&traj, 1.0, v_pi)
}

/// Outcome of one Monte-Carlo calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub drifted: ModulatorParams,
    pub initial_j: f64,
    pub final_j: f64,
    pub epochs: usize,
    pub resets: usize,
    pub converged: bool,
    pub j_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: Vec<RunOutcome>,
    pub convergence_fraction: f64,
    /// Number of runs per reset count.
    pub reset_histogram: BTreeMap<usize, usize>,
}

impl MonteCarloSummary {
    pub fn final_j(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.final_j).collect()
    }

    /// Quantile of the final risk over all runs (nearest-rank on the sorted
    /// values, linear interpolation between ranks).
    pub fn final_j_quantile(&self, q: f64) -> f64 {
        quantile(&self.final_j(), q)
    }

    /// Quantile across runs of the risk at each epoch. Runs that stopped
    /// early hold their last value.
    pub fn settling_quantile(&self, q: f64) -> Vec<f64> {
        let longest = self.runs.iter().map(|r| r.j_history.len()).max().unwrap_or(0);
        (0..longest)
            .map(|epoch| {
                let column: Vec<f64> = self
                    .runs
                    .iter()
                    .map(|r| r.j_history[epoch.min(r.j_history.len() - 1)])
                    .collect();
                quantile(&column, q)
            })
            .collect()
    }
}

/// Linear-interpolated quantile of `values`, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `n_runs` independent calibrations, each against `nominal_plant` drifted
/// per `spec`. Run `k` draws its drift from stream `k` of a ChaCha8
/// generator keyed by `spec.seed`, so results do not depend on `parallel`.
pub fn monte_carlo(
    nominal_plant: &ModulatorParams,
    waveform: &ControlWaveform,
    n_runs: usize,
    spec: &DriftSpec,
    cfg: &DescentConfig,
    parallel: bool,
) -> Result<MonteCarloSummary> {
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be >= 1"));
    }
    spec.validate()?;
    cfg.validate()?;
    nominal_plant.validate()?;
    waveform.validate()?;

    let one = |run: usize| -> Result<RunOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(run as u64);
        let drifted = apply_drift_with(nominal_plant, spec.relative_range, spec.distribution, &mut rng);
        let init = ParamVector::nominal_for(nominal_plant);
        let report = calibrate(&drifted, &init, waveform, cfg)?;
        Ok(RunOutcome {
            run,
            drifted,
            initial_j: report.initial_j(),
            final_j: report.final_j,
            epochs: report.epochs_run(),
            resets: report.resets,
            converged: report.converged,
            j_history: report.j_history,
        })
    };

    let runs: Vec<RunOutcome> = if parallel {
        (0..n_runs).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..n_runs).map(one).collect::<Result<_>>()?
    };

    let converged = runs.iter().filter(|r| r.converged).count();
    let mut reset_histogram = BTreeMap::new();
    for r in &runs {
        *reset_histogram.entry(r.resets).or_insert(0) += 1;
    }
    Ok(MonteCarloSummary {
        convergence_fraction: converged as f64 / n_runs as f64,
        runs,
        reset_histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::DriftDistribution;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const V_PI: f64 = 3.0;

    fn waveform() -> ControlWaveform {
        ramp_waveform(V_PI, 1e6, 2.0, 512).unwrap()
    }

    #[test]
    fn predicted_m1_examples() {
        let w = waveform();
        for m in predicted_m1(&w) {
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        }

        let traj = linear_ramp_trajectory(1e6, 2e-6, 128e6).unwrap();
        let half = synthesize_controls(&traj, 0.5, V_PI).unwrap();
        for m in predicted_m1(&half) {
            assert_abs_diff_eq!(m, 0.25, epsilon = 1e-12);
        }

        let constant = ControlWaveform {
            t: vec![0.0, 1.0, 2.0],
            alpha_sig: vec![V_PI; 3],
            beta_sig: vec![0.0; 3],
            v_pi_ref: V_PI,
            r: 1.0,
        };
        assert_eq!(predicted_m1(&constant).len(), 3);
        for m in predicted_m1(&constant) {
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn risk_examples() {
        let a = [0.3, 0.7, 1.1, 0.2];
        assert_eq!(risk(&a, &a).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert_abs_diff_eq!(risk(&shifted, &a).unwrap(), 0.01, epsilon = 1e-15);
        assert!(risk(&a, &a[..3]).is_err());
        assert!(risk(&[], &[]).is_err());
    }

    #[test]
    fn gradient_vanishes_at_nominal() {
        let w = waveform();
        let plant = ModulatorParams::nominal(V_PI);
        let obj = PlantObjective::new(&plant, &w).unwrap();
        let g = gradient(&obj.nominal(), &obj, &DescentConfig::default());
        for p in UPDATE_ORDER {
            assert!(g.get(p).abs() < 1e-6, "{p:?}: {}", g.get(p));
        }
    }

    #[test]
    fn gamma_partial_points_back_to_nominal() {
        let w = waveform();
        let plant = ModulatorParams::nominal(V_PI);
        let obj = PlantObjective::new(&plant, &w).unwrap();
        let cfg = DescentConfig::default();
        for delta in [0.2, -0.2] {
            let mut pv = obj.nominal();
            pv.gamma += delta;
            let g = partial(&obj, &pv, Param::Gamma, cfg.fd_step);
            // Oracle: direct comparison of J on either side.
            let mut up = pv;
            up.gamma += 0.01;
            let mut down = pv;
            down.gamma -= 0.01;
            let uphill = obj.risk(&up) > obj.risk(&down);
            assert_eq!(g > 0.0, uphill);
            assert_eq!(g > 0.0, delta > 0.0);
        }
    }

    #[test]
    fn gradient_is_stable_under_step_refinement() {
        let w = waveform();
        let nominal = ModulatorParams::nominal(V_PI);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = DescentConfig::default();
        let norm = |g: &ParamVector, h: &ParamVector| -> f64 {
            UPDATE_ORDER
                .iter()
                .map(|&p| (g.get(p) - h.get(p)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let zero = ParamVector {
            alpha_dc: 0.0,
            beta_dc: 0.0,
            gamma: 0.0,
            alpha_sg: 0.0,
            beta_sg: 0.0,
        };
        for _ in 0..5 {
            let plant = apply_drift_with(&nominal, 0.3, DriftDistribution::Uniform, &mut rng);
            let obj = PlantObjective::new(&plant, &w).unwrap();
            let pv = obj.nominal();
            let g = gradient(&pv, &obj, &cfg);
            for (divisor, tol) in [(2.0, 1e-3), (10.0, 1e-4)] {
                let fine = DescentConfig {
                    fd_step: cfg.fd_step / divisor,
                    ..cfg
                };
                let h = gradient(&pv, &obj, &fine);
                assert!(norm(&g, &h) / norm(&h, &zero) < tol);
            }
        }
    }

    #[test]
    fn incremental_epoch_matches_generic_step() {
        let w = waveform();
        let mut plant = ModulatorParams::nominal(V_PI);
        plant.alpha_dc *= 1.2;
        plant.beta_dc *= 0.85;
        plant.gamma *= 1.25;
        plant.alpha_gain = 0.8;
        plant.beta_gain = 1.15;
        plant.imbalance = 0.05;
        let obj = PlantObjective::new(&plant, &w).unwrap();
        let cfg = DescentConfig::default();
        let mut generic = obj.nominal();
        let mut fast = obj.nominal();
        for _ in 0..25 {
            descent_step(&obj, &mut generic, &cfg);
            let j = obj.sequential_epoch(&mut fast, &cfg);
            assert_abs_diff_eq!(j, obj.risk(&fast), epsilon = 1e-13);
        }
        for p in UPDATE_ORDER {
            assert_abs_diff_eq!(generic.get(p), fast.get(p), epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_drift_skips_descent() {
        let w = waveform();
        let plant = ModulatorParams::nominal(V_PI);
        let init = ParamVector::nominal_for(&plant);
        let report = calibrate(&plant, &init, &w, &DescentConfig::default()).unwrap();
        assert_eq!(report.j_history.len(), 1);
        assert_eq!(report.epochs_run(), 0);
        assert!(report.converged);
        assert_eq!(report.resets, 0);
        assert!(report.final_j <= 1e-20);
    }

    #[test]
    fn single_parameter_drifts_converge() {
        let w = waveform();
        let nominal = ModulatorParams::nominal(V_PI);
        let init = ParamVector::nominal_for(&nominal);
        let cfg = DescentConfig::default();
        let perturbations: [fn(&mut ModulatorParams, f64); 5] = [
            |p, f| p.alpha_dc *= f,
            |p, f| p.beta_dc *= f,
            |p, f| p.gamma *= f,
            |p, f| p.alpha_gain *= f,
            |p, f| p.beta_gain *= f,
        ];
        for (k, perturb) in perturbations.iter().enumerate() {
            for factor in [0.9, 0.95, 1.05, 1.1] {
                let mut plant = nominal;
                perturb(&mut plant, factor);
                let report = calibrate(&plant, &init, &w, &cfg).unwrap();
                assert!(
                    report.final_j < CONVERGED_RISK,
                    "param {k} x{factor}: final J {}",
                    report.final_j
                );
            }
        }
    }

    #[test]
    fn reset_restarts_from_nominal() {
        let w = waveform();
        let nominal = ModulatorParams::nominal(V_PI);
        let mut plant = nominal;
        plant.alpha_dc *= 0.2;
        plant.beta_dc *= 1.8;
        plant.gamma *= 2.0;
        let init = ParamVector::nominal_for(&nominal);
        let cfg = DescentConfig {
            epochs: 20,
            reset_threshold: 0.3,
            ..DescentConfig::default()
        };
        let obj = PlantObjective::new(&plant, &w).unwrap();
        assert!(obj.risk(&init) > cfg.reset_threshold);

        let report = calibrate(&plant, &init, &w, &cfg).unwrap();
        assert!(report.resets >= 1);
        assert_eq!(report.reset_epochs.len(), report.resets);
        assert!(report.epochs_run() <= cfg.epochs);

        let mut from_nominal = obj.nominal();
        descent_step(&obj, &mut from_nominal, &cfg);
        for &epoch in &report.reset_epochs {
            assert!(report.j_history[epoch] > cfg.reset_threshold);
            if epoch < report.epochs_run() {
                let got = report.param_history[epoch + 1];
                for p in UPDATE_ORDER {
                    assert_abs_diff_eq!(got.get(p), from_nominal.get(p), epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            DescentConfig {
                mu: 0.0,
                ..Default::default()
            },
            DescentConfig {
                epochs: 0,
                ..Default::default()
            },
            DescentConfig {
                gate: -1.0,
                ..Default::default()
            },
            DescentConfig {
                reset_threshold: 1e-6,
                ..Default::default()
            },
            DescentConfig {
                fd_step: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn monte_carlo_single_run_without_drift() {
        let spec = DriftSpec {
            relative_range: 0.0,
            distribution: Default::default(),
            seed: 5,
        };
        let plant = ModulatorParams::nominal(V_PI);
        let mc = monte_carlo(&plant, &waveform(), 1, &spec, &DescentConfig::default(), false).unwrap();
        assert_eq!(mc.runs.len(), 1);
        assert_eq!(mc.convergence_fraction, 1.0);
        assert!(mc.runs[0].final_j < 1e-20);
        assert!(monte_carlo(&plant, &waveform(), 0, &spec, &DescentConfig::default(), false).is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic_and_order_independent() {
        let spec = DriftSpec {
            relative_range: 0.3,
            distribution: Default::default(),
            seed: 99,
        };
        let plant = ModulatorParams::nominal(V_PI);
        let cfg = DescentConfig {
            epochs: 40,
            ..Default::default()
        };
        let a = monte_carlo(&plant, &waveform(), 6, &spec, &cfg, false).unwrap();
        let b = monte_carlo(&plant, &waveform(), 6, &spec, &cfg, false).unwrap();
        let c = monte_carlo(&plant, &waveform(), 6, &spec, &cfg, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.runs.windows(2).all(|w| w[0].drifted != w[1].drifted));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile(&[4.0], 0.9), 4.0);
        assert!(quantile(&[], 0.5).is_nan());
    }

    proptest! {
        #[test]
        fn risk_is_non_negative_and_zero_only_on_match(
            a in prop::collection::vec(-2.0f64..2.0, 1..64),
            shift in 0.0f64..1.0,
        ) {
            let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let j = risk(&a, &b).unwrap();
            prop_assert!(j >= 0.0);
            prop_assert_eq!(j == 0.0, shift == 0.0);
        }
    }
}
