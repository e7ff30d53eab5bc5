use std::f64::consts::PI;

use proptest::prelude::*;
use resocomb::harmonic_balance::{hb_solve, probe_about, residual_on_grid, HbOptions};
use resocomb::model::{energy, rhs_at, CircuitParams, DriveSpec, Signal, StateVector, Tone};
use resocomb::ode::{solve_to, Tolerances};
use resocomb::sweep::{cell_metric, find_thresholds, run_sweep, Axis, Metric, SweepPlan};
use resocomb::spectral::transmission;
use resocomb::timedomain::{integrate_at, settle, SettleOptions};

fn quiet(p: &CircuitParams) -> [f64; 3] {
    let f = |_: f64, y: &[f64; 3]| rhs_at(y, 0.0, p);
    solve_to(f, 0.0, [0.4, -0.2, 0.0], 200.0, Tolerances::new(1e-11, 1e-14)).unwrap()
}

#[test]
fn conservative_energy_drift_is_small() {
    // gamma_x = 0 is outside the validated domain; the stepper takes it as is
    let p = CircuitParams {
        gamma_x: 0.0,
        omega_x: 1.3,
        gamma_c: 0.0,
        gamma_p: 0.02,
        eta: 0.0,
    };
    let y = quiet(&p);
    let e0 = energy(&StateVector::new(0.4, -0.2, 0.0), &p).unwrap().total;
    let e1 = energy(&StateVector::from_array(y), &p).unwrap().total;
    let periods = 200.0 * p.omega_x / (2.0 * PI);
    assert!((e1 - e0).abs() / e0 / periods < 1e-10, "{e0} {e1}");
}

#[test]
fn tighter_tolerance_never_hurts() {
    let p = CircuitParams::new(0.01, 1.0, 0.005, 0.006, 0.0).unwrap();
    let d = DriveSpec::single(1e-3, 1.01);
    let s0 = StateVector::new(1e-3, 0.0, 0.0);
    let end = |rtol: f64| {
        let t = integrate_at(&p, &d, s0, 0.0, &[100.0], Tolerances::new(rtol, rtol * 1e-3)).unwrap();
        *t.last().unwrap()
    };
    let reference = end(1e-12);
    let err = |s: StateVector| (s.q_x - reference.q_x).hypot(s.v_x - reference.v_x).hypot(s.q_p - reference.q_p);
    let mut last = f64::INFINITY;
    for k in 0..6 {
        let e = err(end(1e-4 / 2f64.powi(k)));
        assert!(e <= last * 1.0001, "error grew at step {k}: {e} > {last}");
        last = e;
    }
}

#[test]
fn collocation_does_not_alias() {
    let p = CircuitParams::new(0.01, 1.0, 0.005, 0.006, 1.0).unwrap();
    for amp in [1e-3, 3e-3, 1e-2] {
        let sol = hb_solve(&p, &Tone::new(amp, 1.04), &HbOptions::default(), None).unwrap();
        let fine = residual_on_grid(&p, &sol, 4);
        assert!(fine <= 10.0 * sol.residual.max(1e-15), "{fine} vs {}", sol.residual);
    }
}

#[test]
fn probe_response_is_linear_in_probe() {
    let p = CircuitParams::new(0.01, 1.0, 0.005, 0.006, 1.0).unwrap();
    let opts = SettleOptions {
        record_periods: 4,
        ..SettleOptions::default()
    };
    let ratio = |r: f64| {
        let d = DriveSpec::from_tones(vec![Tone::new(3e-3, 1.04), Tone::new(3e-3 * r, 1.0)]);
        let seg = settle(&p, &d, StateVector::default(), &opts).unwrap();
        transmission(&seg, &d, 1, Signal::QX).unwrap()
    };
    let (a, b) = (ratio(1e-4), ratio(1e-5));
    assert!((a - b).norm() < 1e-3 * a.norm(), "{a} {b}");
    let orbit = hb_solve(&p, &Tone::new(3e-3, 1.04), &HbOptions::default(), None).unwrap();
    let h = probe_about(&p, &orbit, 1.0, 10).unwrap();
    assert!((h.ratio - a).norm() < 1e-2 * a.norm(), "{} {a}", h.ratio);
}

fn small_plan() -> SweepPlan {
    let mut plan = SweepPlan::new(Axis::linear(0.98, 1.02, 3), Axis::log(1e-3, 1e-2, 3), Metric::Transmission);
    plan.settle = SettleOptions {
        max_periods: 2000,
        record_periods: 8,
        ..SettleOptions::default()
    };
    plan
}

#[test]
fn sweep_is_deterministic_and_cells_are_independent() {
    let p = CircuitParams::new(0.01, 1.0, 0.005, 0.006, 1.0).unwrap();
    let plan = small_plan();
    let a = run_sweep(&plan, &p, Some(3)).unwrap();
    let b = run_sweep(&plan, &p, Some(1)).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_long_csv(&mut ca).unwrap();
    b.write_long_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    let (r, c) = (1, 2);
    let alone = cell_metric(&plan, &p, a.frequencies[c], a.amplitudes[r], None);
    assert_eq!(alone.value.to_bits(), a.value(r, c).to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_refinement_is_bounded(lo in 1e-3..3e-3f64, hi in 5e-3..2e-2f64) {
        // window-shaped response; doubling grid density must not move a
        // threshold by more than the coarse resolution
        let metric = |a: f64| if a > lo && a < hi { 1.0 } else { 0.0 };
        let coarse = Axis::log(1e-4, 1e-1, 16);
        let fine = Axis::log(1e-4, 1e-1, 31);
        let run = |ax: &Axis| {
            let amps = ax.values();
            let vals: Vec<f64> = amps.iter().map(|&a| metric(a)).collect();
            find_thresholds(&amps, &vals, 0.5, |a| Some(metric(a))).unwrap()
        };
        let (c, f) = (run(&coarse), run(&fine));
        let bound = coarse.resolution();
        for (x, y) in [(c.lower, f.lower), (c.upper, f.upper)] {
            let (x, y) = (x.unwrap(), y.unwrap());
            prop_assert!((x / y - 1.0).abs() <= bound, "{x} {y}");
        }
    }
}
