//! One function per experiment. Each computes everything in memory first, so
//! a bad config fails before the output directory is touched.

use std::path::{Path, PathBuf};

use eopd_core::analysis::{harmonic_suppression, phase_slope, spectrum};
use eopd_core::calibration::{
    calibrate, monte_carlo, ramp_waveform, CalibrationReport, MonteCarloSummary, ParamVector, PlantObjective,
};
use eopd_core::control::{eopd_phase, linear_ramp_trajectory, synthesize_controls};
use eopd_core::plant::{apply_drift, monitor_m2, simulate_trace, ModulatorParams};
use eopd_core::sync_loop::{run_loop, summarize, LoopMode, LoopSummary, LoopTrace};
use serde::Serialize;
use serde_json::Value;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::output::{create_dir, path, write_columns, write_json, write_rows, Provenance};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
}

/// What a successful command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out: PathBuf,
    pub summary: Value,
}

/// Resolve command-line overrides into the config and run the experiment.
pub fn run(opts: RunOptions) -> Result<Outcome, CliError> {
    let mut cfg = opts.config;
    if let Some(declared) = cfg.experiment {
        if declared != opts.kind {
            return Err(CliError::config(format!(
                "config declares experiment \"{}\" but \"{}\" was requested",
                declared.name(),
                opts.kind.name()
            )));
        }
    }
    cfg.experiment = Some(opts.kind);
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(k) = opts.parallel {
        cfg.montecarlo.parallel = k;
    }
    let out = opts
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::config("no output directory (use --out or set `out`)"))?;
    cfg.validate_common()?;

    let summary = match opts.kind {
        ExperimentKind::Ramp => cmd_ramp(&cfg, &out)?,
        ExperimentKind::Calibrate => cmd_calibrate(&cfg, &out)?,
        ExperimentKind::Montecarlo => cmd_montecarlo(&cfg, &out)?,
        ExperimentKind::Syncloop => cmd_syncloop(&cfg, &out)?,
    };
    Ok(Outcome { out, summary })
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        experiment: cfg.experiment.map_or("unknown", ExperimentKind::name),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("summary serializes")
}

#[derive(Debug, Serialize)]
struct RampSummary {
    #[serde(flatten)]
    provenance: Provenance,
    n_samples: usize,
    /// Least-squares slope of the output phase (rad/s).
    phase_slope: f64,
    /// Peak-to-peak M1.
    magnitude_ripple: f64,
    /// Fundamental over strongest harmonic of M2 (dB); absent when the
    /// control signal is static or its harmonics fall outside the band.
    harmonic_suppression_db: Option<f64>,
    final_phase: f64,
    final_phase_commanded: f64,
    max_drive: f64,
}

pub fn cmd_ramp(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let r = &cfg.ramp;
    let device = cfg.plant.device();
    let traj = linear_ramp_trajectory(r.f_con, r.duration, r.sample_rate)?;
    let w = synthesize_controls(&traj, r.radius, cfg.plant.v_pi)?;
    let mon = simulate_trace(&device, &w)?;
    let commanded = eopd_phase(&w)?;
    let slope = phase_slope(&mon.theta_true, &mon.t)?;
    let (lo, hi) = mon
        .m1
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    let suppression = if r.f_con != 0.0 {
        spectrum(&mon.m2, r.sample_rate, r.window)
            .and_then(|s| harmonic_suppression(&s, r.f_con.abs(), r.harmonics))
            .ok()
    } else {
        None
    };
    let summary = RampSummary {
        provenance: provenance(cfg),
        n_samples: w.len(),
        phase_slope: slope,
        magnitude_ripple: hi - lo,
        harmonic_suppression_db: suppression,
        final_phase: *mon.theta_true.last().unwrap(),
        final_phase_commanded: *commanded.last().unwrap(),
        max_drive: w.peak(),
    };

    create_dir(out)?;
    write_columns(
        &path(out, "waveforms.csv"),
        &["t", "alpha_sig", "beta_sig"],
        &[&w.t, &w.alpha_sig, &w.beta_sig],
    )?;
    write_columns(
        &path(out, "monitors.csv"),
        &["t", "m1", "m2", "theta_true"],
        &[&mon.t, &mon.m1, &mon.m2, &mon.theta_true],
    )?;
    let value = to_value(&summary);
    write_json(&path(out, "summary.json"), &value)?;
    Ok(value)
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    #[serde(flatten)]
    provenance: Provenance,
    initial_j: f64,
    final_j: f64,
    epochs: usize,
    resets: usize,
    reset_epochs: Vec<usize>,
    converged: bool,
    drifted_plant: ModulatorParams,
    final_params: ParamVector,
    /// RMS deviation of M2 from the ideal device, before and after.
    m2_rms_deviation_before: f64,
    m2_rms_deviation_after: f64,
}

const PARAM_HEADER: [&str; 6] = ["epoch", "alpha_dc", "beta_dc", "gamma", "alpha_sg", "beta_sg"];

fn param_row(epoch: usize, p: &ParamVector) -> Vec<f64> {
    vec![epoch as f64, p.alpha_dc, p.beta_dc, p.gamma, p.alpha_sg, p.beta_sg]
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let c = &cfg.calibration;
    let nominal = cfg.plant.nominal();
    c.descent.validate()?;
    let drifted = apply_drift(&cfg.plant.device(), &c.drift(cfg.seed))?;
    let w = ramp_waveform(cfg.plant.v_pi, c.f_con, c.periods, c.n_samples)?;
    let init = ParamVector::nominal_for(&nominal);
    let report: CalibrationReport = calibrate(&drifted, &init, &w, &c.descent)?;
    let final_params = report.final_params();

    let obj = PlantObjective::new(&drifted, &w)?;
    let predicted_m2: Vec<f64> = w
        .alpha_sig
        .iter()
        .zip(&w.beta_sig)
        .map(|(&a, &b)| monitor_m2(nominal.field(a, b)))
        .collect();
    let (m1_before, m1_after) = (obj.actual_m1(&init), obj.actual_m1(&final_params));
    let (m2_before, m2_after) = (obj.actual_m2(&init), obj.actual_m2(&final_params));

    let summary = CalibrationSummary {
        provenance: provenance(cfg),
        initial_j: report.initial_j(),
        final_j: report.final_j,
        epochs: report.epochs_run(),
        resets: report.resets,
        reset_epochs: report.reset_epochs.clone(),
        converged: report.converged,
        drifted_plant: drifted,
        final_params,
        m2_rms_deviation_before: rms_diff(&m2_before, &predicted_m2),
        m2_rms_deviation_after: rms_diff(&m2_after, &predicted_m2),
    };

    create_dir(out)?;
    write_rows(
        &path(out, "j_history.csv"),
        &["epoch", "j"],
        report.j_history.iter().enumerate().map(|(k, &j)| vec![k as f64, j]),
    )?;
    write_rows(
        &path(out, "params_history.csv"),
        &PARAM_HEADER,
        report.param_history.iter().enumerate().map(|(k, p)| param_row(k, p)),
    )?;
    write_columns(
        &path(out, "before_after_m1.csv"),
        &["t", "predicted", "before", "after"],
        &[&w.t, obj.predicted(), &m1_before, &m1_after],
    )?;
    write_columns(
        &path(out, "before_after_m2.csv"),
        &["t", "predicted", "before", "after"],
        &[&w.t, &predicted_m2, &m2_before, &m2_after],
    )?;
    let value = to_value(&summary);
    write_json(&path(out, "summary.json"), &value)?;
    Ok(value)
}

#[derive(Debug, Serialize)]
struct MonteCarloAggregate {
    #[serde(flatten)]
    provenance: Provenance,
    n_runs: usize,
    convergence_fraction: f64,
    final_j_median: f64,
    final_j_q10: f64,
    final_j_q90: f64,
    final_j_max: f64,
    /// Runs per number of resets.
    reset_histogram: std::collections::BTreeMap<usize, usize>,
}

fn run_monte_carlo(
    cfg: &ExperimentConfig,
    w: &eopd_core::control::ControlWaveform,
) -> Result<MonteCarloSummary, CliError> {
    let c = &cfg.calibration;
    let m = &cfg.montecarlo;
    let nominal = cfg.plant.device();
    let spec = c.drift(cfg.seed);
    if m.parallel <= 1 {
        return Ok(monte_carlo(&nominal, w, m.n_runs, &spec, &c.descent, false)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.parallel)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {} workers: {e}", m.parallel)))?;
    Ok(pool.install(|| monte_carlo(&nominal, w, m.n_runs, &spec, &c.descent, true))?)
}

pub fn cmd_montecarlo(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let c = &cfg.calibration;
    if cfg.montecarlo.parallel == 0 {
        return Err(CliError::config("parallel must be >= 1"));
    }
    c.descent.validate()?;
    let w = ramp_waveform(cfg.plant.v_pi, c.f_con, c.periods, c.n_samples)?;
    let mc = run_monte_carlo(cfg, &w)?;

    let summary = MonteCarloAggregate {
        provenance: provenance(cfg),
        n_runs: mc.runs.len(),
        convergence_fraction: mc.convergence_fraction,
        final_j_median: mc.final_j_quantile(0.5),
        final_j_q10: mc.final_j_quantile(0.1),
        final_j_q90: mc.final_j_quantile(0.9),
        final_j_max: mc.final_j_quantile(1.0),
        reset_histogram: mc.reset_histogram.clone(),
    };

    create_dir(out)?;
    write_rows(
        &path(out, "runs.csv"),
        &[
            "run",
            "initial_j",
            "final_j",
            "epochs",
            "resets",
            "converged",
            "alpha_dc",
            "beta_dc",
            "gamma",
            "alpha_gain",
            "beta_gain",
        ],
        mc.runs.iter().map(|r| {
            let d = &r.drifted;
            vec![
                r.run as f64,
                r.initial_j,
                r.final_j,
                r.epochs as f64,
                r.resets as f64,
                f64::from(u8::from(r.converged)),
                d.alpha_dc,
                d.beta_dc,
                d.gamma,
                d.alpha_gain,
                d.beta_gain,
            ]
        }),
    )?;
    let (q10, q50, q90) = (
        mc.settling_quantile(0.1),
        mc.settling_quantile(0.5),
        mc.settling_quantile(0.9),
    );
    let epochs: Vec<f64> = (0..q50.len()).map(|k| k as f64).collect();
    write_columns(
        &path(out, "j_settling.csv"),
        &["epoch", "j_q10", "j_median", "j_q90"],
        &[&epochs, &q10, &q50, &q90],
    )?;
    let value = to_value(&summary);
    write_json(&path(out, "summary.json"), &value)?;
    Ok(value)
}

#[derive(Debug, Serialize)]
struct LoopRunSummary {
    #[serde(flatten)]
    provenance: Provenance,
    mode: LoopMode,
    /// Set when the closed loop diverged; the trace stops at that sample.
    unstable: bool,
    n_samples: usize,
    #[serde(flatten)]
    metrics: Option<LoopSummary>,
}

/// Run one loop, write its files into `dir`, and return its summary. An
/// unstable run still writes the partial trace before failing.
fn loop_run(cfg: &ExperimentConfig, mode: LoopMode, dir: &Path) -> Result<Value, CliError> {
    let lc = cfg.syncloop.loop_config(mode, cfg.seed, cfg.plant.v_pi);
    lc.validate()?;
    let (trace, failure) = match run_loop(&lc) {
        Ok(t) => (t, None),
        Err(eopd_core::Error::Unstable {
            sample,
            residual,
            trace,
        }) => (
            *trace,
            Some(eopd_core::Error::Unstable {
                sample,
                residual,
                trace: Box::default(),
            }),
        ),
        Err(e) => return Err(e.into()),
    };
    let metrics = match failure {
        None => Some(summarize(&trace)?),
        Some(_) => None,
    };
    let summary = LoopRunSummary {
        provenance: provenance(cfg),
        mode,
        unstable: failure.is_some(),
        n_samples: trace.len(),
        metrics,
    };

    create_dir(dir)?;
    write_loop_files(&trace, dir)?;
    let value = to_value(&summary);
    write_json(&path(dir, "summary.json"), &value)?;
    match failure {
        None => Ok(value),
        Some(source) => Err(CliError::Partial {
            source,
            out: dir.to_path_buf(),
        }),
    }
}

fn write_loop_files(trace: &LoopTrace, dir: &Path) -> Result<(), CliError> {
    write_columns(
        &path(dir, "loop_trace.csv"),
        &["t", "phi_off", "theta_eopd", "v_pd", "v_pd_lf", "residual"],
        &[
            &trace.t,
            &trace.phi_off,
            &trace.theta_eopd,
            &trace.v_pd,
            &trace.v_pd_lf,
            &trace.residual,
        ],
    )?;
    let sps = trace.samples_per_symbol;
    write_rows(
        &path(dir, "constellation.csv"),
        &["symbol", "t", "i", "q", "phi_m"],
        trace.symbol_centres().map(|k| {
            vec![
                (k / sps) as f64,
                trace.t[k],
                trace.i_out[k],
                trace.q_out[k],
                trace.phi_m[k],
            ]
        }),
    )?;
    // Eye traces: the in-phase output folded one symbol period at a time.
    let n_symbols = trace.len() / sps;
    let dt = 1.0 / trace.sample_rate;
    write_rows(
        &path(dir, "eye.csv"),
        &["trace", "t_in_symbol", "i", "q"],
        (0..n_symbols * sps).map(|k| vec![(k / sps) as f64, (k % sps) as f64 * dt, trace.i_out[k], trace.q_out[k]]),
    )
}

pub fn cmd_syncloop(cfg: &ExperimentConfig, out: &Path) -> Result<Value, CliError> {
    let s = &cfg.syncloop;
    if !s.paired {
        return loop_run(cfg, s.mode, out);
    }
    // Validate once up front so neither run writes anything on a bad config.
    cfg.syncloop
        .loop_config(LoopMode::Closed, cfg.seed, cfg.plant.v_pi)
        .validate()?;
    let open = loop_run(cfg, LoopMode::Open, &out.join("open"))?;
    let closed = loop_run(cfg, LoopMode::Closed, &out.join("closed"))?;
    let value = serde_json::json!({
        "experiment": "syncloop",
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "open": open,
        "closed": closed,
    });
    write_json(&path(out, "summary.json"), &value)?;
    Ok(value)
}
