use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use resocomb::model::{energy, eval_rhs, linear_transfer, CircuitParams, DriveSpec, StateVector};
use resocomb::scenario::{load_scenario, to_text};
use resocomb::slowflow::{
    build_frame, fixed_points, slowflow_jacobian, slowflow_jacobian_fd, slowflow_rhs, small_signal_gain, FrameSpec, Quadratures,
    SearchGrid, SlowFlowParams,
};
use resocomb::spectral::{comb_metrics, find_peaks, spectrum_of, Peak, Window};
use resocomb::sweep::Axis;

fn params(eta: f64) -> impl Strategy<Value = CircuitParams> {
    (1e-3..0.1f64, 0.5..2.0f64, 0.0..0.05f64, 1e-3..0.1f64)
        .prop_map(move |(gx, wx, gc, gp)| CircuitParams::new(gx, wx, gc, gp, eta).unwrap())
}

fn state() -> impl Strategy<Value = StateVector> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b, c)| StateVector::new(a, b, c))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn slow_params() -> impl Strategy<Value = SlowFlowParams> {
    (1e-4..0.01f64, -0.02..0.02f64, 0.0..10.0f64, 0.0..10.0f64, 0.1..2.0f64, 0.1..2.0f64).prop_map(|(da, wa, chi, mu, kv, kp)| {
        SlowFlowParams {
            omega_a: 1.0 + wa,
            delta_a: da,
            chi,
            mu,
            k_v: kv,
            k_p: kp,
            frame: FrameSpec {
                omega_r: 1.0,
                n: 0,
                delta_x: 0.0,
                delta_p: 0.0,
            },
            v0: 0.0,
            q_x0: 0.0,
            phi_sig: 0.0,
            derived: false,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rhs_is_linear_without_nonlinearity(p in params(0.0), s1 in state(), s2 in state(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let none = DriveSpec::none();
        let mix = StateVector::new(a * s1.q_x + b * s2.q_x, a * s1.v_x + b * s2.v_x, a * s1.q_p + b * s2.q_p);
        let f = eval_rhs(&mix, 0.3, &p, &none).unwrap();
        let f1 = eval_rhs(&s1, 0.3, &p, &none).unwrap();
        let f2 = eval_rhs(&s2, 0.3, &p, &none).unwrap();
        prop_assert!(close(f.q_x, a * f1.q_x + b * f2.q_x, 1e-12));
        prop_assert!(close(f.v_x, a * f1.v_x + b * f2.v_x, 1e-12));
        prop_assert!(close(f.q_p, a * f1.q_p + b * f2.q_p, 1e-12));
    }

    #[test]
    fn energy_terms_add_up(p in params(1.0), eta in 0.0..5.0f64, s in state()) {
        let p = CircuitParams { eta, ..p };
        let e = energy(&s, &p).unwrap();
        prop_assert!(e.kinetic >= 0.0 && e.potential >= 0.0 && e.quartic >= 0.0);
        prop_assert_eq!(e.total, e.kinetic + e.potential + e.quartic);
    }

    #[test]
    fn extinction_at_linear_order(gx in 1e-3..0.1f64, wx in 0.5..2.0f64, g in 1e-3..0.1f64, w in 0.1..3.0f64) {
        let p = CircuitParams::new(gx, wx, g, g, 0.0).unwrap();
        let (qx, qp) = linear_transfer(&p, w).unwrap();
        prop_assert_eq!(qx, Complex64::new(0.0, 0.0));
        let expected = 1.0 / (2.0 * g * w);
        prop_assert!(((qx + qp).norm() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn frame_round_trip(wx in 10.0..20.0f64, d in -0.02..0.02f64, n in prop::sample::select(vec![0u32, 2, 3, 4, 5])) {
        prop_assume!(d.abs() > 1e-4);
        let wp = wx + d;
        let f = build_frame(wp, wx, n).unwrap();
        prop_assert_eq!(f.delta_p, n as f64 * f.delta_x);
        prop_assert!((f.omega_p() - wp).abs() <= 4.0 * f64::EPSILON * wp);
    }

    #[test]
    fn unforced_flow_is_odd(sf in slow_params(), u in -1.0..1.0f64, v in -1.0..1.0f64) {
        let a = slowflow_rhs(Quadratures::new(u, v), 0.7, &sf).unwrap();
        let b = slowflow_rhs(Quadratures::new(-u, -v), 0.7, &sf).unwrap();
        prop_assert!(close(a.u, -b.u, 1e-14) && close(a.v, -b.v, 1e-14));
    }

    #[test]
    fn slowflow_jacobian_matches_differences(sf in slow_params(), u in -0.5..0.5f64, v in -0.5..0.5f64) {
        let q = Quadratures::new(u, v);
        let ja = slowflow_jacobian(q, &sf);
        let jf = slowflow_jacobian_fd(q, &sf, 1e-6);
        for r in 0..2 {
            for c in 0..2 {
                prop_assert!((ja[r][c] - jf[r][c]).abs() <= 1e-6 * (1.0 + ja[r][c].abs()));
            }
        }
    }

    #[test]
    fn peaks_ignore_global_scale(a in 0.1..10.0f64, scale in 1e-3..1e3f64, w2 in 1.5..2.5f64) {
        let dt = 0.05;
        let x: Vec<f64> = (0..4096).map(|i| {
            let t = i as f64 * dt;
            a * (1.0 * t).sin() + 0.01 * (w2 * t).cos()
        }).collect();
        let y: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let px = find_peaks(&spectrum_of(&x, dt, Window::BlackmanHarris).unwrap(), 1e-8);
        let py = find_peaks(&spectrum_of(&y, dt, Window::BlackmanHarris).unwrap(), 1e-8);
        prop_assert_eq!(px.len(), py.len());
        for (p, q) in px.iter().zip(&py) {
            prop_assert!(close(p.omega, q.omega, 1e-12));
            prop_assert!(close(q.power, p.power * scale * scale, 1e-9));
        }
    }

    #[test]
    fn parseval(seed in prop::collection::vec(-1.0..1.0f64, 64..512), w in prop::sample::select(vec![Window::Rectangular, Window::Hann, Window::BlackmanHarris])) {
        let s = spectrum_of(&seed, 0.1, w).unwrap();
        let p = s.parseval_power();
        prop_assert!((p - s.windowed_power).abs() <= 1e-10 * s.windowed_power.max(1e-300));
    }

    #[test]
    fn comb_spacing_survives_mirroring(wp in 0.5..2.0f64, s in 1e-3..0.05f64, k in 3usize..9, jitter in prop::collection::vec(-1e-5..1e-5f64, 9)) {
        let peaks: Vec<Peak> = (0..k).map(|i| Peak {
            omega: wp + (i as f64 - 1.0) * s + jitter[i] * s,
            power: 1.0 / (1.0 + i as f64),
            bin: i,
        }).collect();
        let mirrored: Vec<Peak> = peaks.iter().map(|p| Peak { omega: 2.0 * wp - p.omega, ..*p }).collect();
        let a = comb_metrics(&peaks, wp, None).unwrap();
        let b = comb_metrics(&mirrored, wp, None).unwrap();
        prop_assert!(close(a.spacing, b.spacing, 1e-9));
        prop_assert!(a.equidistance_residual >= 0.0);
    }

    #[test]
    fn axis_hits_its_ends(min in 1e-4..1.0f64, span in 1e-3..10.0f64, count in 2usize..50, log in any::<bool>()) {
        let ax = if log { Axis::log(min, min + span, count) } else { Axis::linear(min, min + span, count) };
        let v = ax.values();
        prop_assert_eq!(v.len(), count);
        prop_assert_eq!(v[0], min);
        prop_assert!(close(v[count - 1], min + span, 1e-12));
        prop_assert!(v.windows(2).all(|w| w[1] > w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn origin_eigenvalues_are_linear_part(sf in slow_params()) {
        let fps = fixed_points(&sf, &SearchGrid { half_width: 0.1, count: 3 });
        let origin = fps.iter().find(|f| f.q.norm() < 1e-12).expect("origin is always an equilibrium");
        let w = sf.big_omega_a();
        let mut im: Vec<f64> = origin.eigenvalues.iter().map(|e| e.im).collect();
        im.sort_by(f64::total_cmp);
        for e in &origin.eigenvalues {
            prop_assert!((e.re + sf.delta_a).abs() <= 1e-12);
        }
        prop_assert!((im[0] + w.abs()).abs() <= 1e-12 && (im[1] - w.abs()).abs() <= 1e-12);
    }

    #[test]
    fn equilibria_come_in_pairs(sf in slow_params()) {
        let fps = fixed_points(&sf, &SearchGrid::default());
        for f in &fps {
            if f.q.norm() > 1e-9 {
                let twin = fps.iter().any(|g| (g.q.u + f.q.u).abs() < 1e-7 && (g.q.v + f.q.v).abs() < 1e-7);
                prop_assert!(twin, "{:?} has no mirror image", f.q);
            }
        }
    }

    #[test]
    fn gain_is_nonnegative(sf in slow_params(), pump in 0.0..1e-3f64) {
        let deltas: Vec<f64> = (0..21).map(|i| -0.02 + 0.002 * i as f64).collect();
        if let Ok(curves) = small_signal_gain(&sf, &[pump], &deltas) {
            prop_assert!(curves[0].gains.iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn scenario_round_trips(p in params(1.0), amp in 1e-6..1.0f64, w in 0.1..3.0f64, rec in 4usize..200, floor in 1e-12..1e-2f64) {
        let doc = format!(
            "schema = 1\nkind = \"simulate\"\n[model]\ngamma_x = {}\nomega_x = {}\ngamma_c = {}\ngamma_p = {}\neta = {}\n\
             [[drive.tones]]\namplitude = {amp}\nomega = {w}\nphase = {}\n[simulate]\npeak_floor = {floor}\nsettle = {{ record_periods = {rec} }}\n",
            p.gamma_x, p.omega_x, p.gamma_c, p.gamma_p, p.eta, w * PI / 7.0
        );
        let sc = load_scenario(&doc).unwrap();
        let text = to_text(&sc).unwrap();
        let again = load_scenario(&text).unwrap();
        prop_assert_eq!(&again, &sc);
        prop_assert_eq!(to_text(&again).unwrap(), text);
    }
}
