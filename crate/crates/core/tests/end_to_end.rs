use std::f64::consts::TAU;

use eopd_core::analysis::{harmonic_suppression, spectrum, Window};
use eopd_core::control::{linear_ramp_trajectory, synthesize_controls};
use eopd_core::plant::{simulate_trace, ModulatorParams};
use eopd_core::sync_loop::{run_loop, summarize, wrap_quarter, LoopConfig, LoopMode, OffsetProcess};

const V_PI: f64 = 3.0;

fn m2_suppression(detune: f64) -> f64 {
    let mut plant = ModulatorParams::nominal(V_PI);
    plant.alpha_dc *= 1.0 + detune;
    plant.beta_dc *= 1.0 + detune;
    plant.gamma *= 1.0 + detune;
    let traj = linear_ramp_trajectory(1e6, 64e-6, 64e6).unwrap();
    let w = synthesize_controls(&traj, 1.0, V_PI).unwrap();
    let mon = simulate_trace(&plant, &w).unwrap();
    let s = spectrum(&mon.m2, 64e6, Window::Hann).unwrap();
    harmonic_suppression(&s, 1e6, 5).unwrap()
}

#[test]
fn m2_suppression_falls_with_bias_detuning() {
    let levels: Vec<f64> = [0.0, 0.02, 0.05, 0.1].iter().map(|&d| m2_suppression(d)).collect();
    assert!(levels[0] >= 40.0, "{levels:?}");
    assert!(levels.iter().all(|l| l.is_finite()));
    assert!(levels.windows(2).all(|p| p[1] < p[0]), "{levels:?}");
    assert!(levels[2] >= 20.0, "{levels:?}");
}

#[test]
fn loop_follows_random_walk() {
    let cfg = LoopConfig {
        offset_process: OffsetProcess::RandomWalk { diffusion: 1e4 },
        seed: 5,
        ..Default::default()
    };
    let s = summarize(&run_loop(&cfg).unwrap()).unwrap();
    assert!(s.residual_rms < 0.05, "{s:?}");
    assert!(s.evm_percent < 10.0, "{s:?}");
}

#[test]
fn loop_follows_sinusoidal_offset() {
    let cfg = LoopConfig {
        offset_process: OffsetProcess::Sinusoidal {
            amplitude: 3.0,
            frequency: 2e5,
        },
        ..Default::default()
    };
    let trace = run_loop(&cfg).unwrap();
    let s = summarize(&trace).unwrap();
    assert!(s.residual_rms < 0.05, "{s:?}");
    // Lock is to a multiple of a quarter turn, not necessarily to zero.
    let last = trace.len() - 1;
    let unwrapped = trace.phi_off[last] + trace.theta_eopd[last];
    assert!(wrap_quarter(unwrapped).abs() < 0.05);
}

#[test]
fn closing_the_loop_opens_the_eye() {
    let closed = LoopConfig {
        n_symbols: 4000,
        seed: 3,
        ..Default::default()
    };
    let open = LoopConfig {
        mode: LoopMode::Open,
        ..closed
    };
    let c = summarize(&run_loop(&closed).unwrap()).unwrap();
    let o = summarize(&run_loop(&open).unwrap()).unwrap();
    assert!(c.eye_opening > o.eye_opening + 0.5, "{c:?} {o:?}");
    assert!(o.evm_percent > 10.0 * c.evm_percent.max(0.1));
}

#[test]
fn loop_control_reaches_ramp_steady_state() {
    for rate in [TAU * 2e5, -TAU * 1e6] {
        let cfg = LoopConfig {
            offset_process: OffsetProcess::Ramp { rate },
            ..Default::default()
        };
        let s = summarize(&run_loop(&cfg).unwrap()).unwrap();
        let expected = -rate / (TAU * cfg.vco_gain);
        assert!(
            (s.v_pd_lf_final - expected).abs() < 1e-3 * expected.abs(),
            "{rate}: {s:?}"
        );
        assert!(s.max_drive <= V_PI);
    }
}
