//! Acceptance run over the shipped recipes and reference parameter sets.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero when any
//! criterion fails. Numeric arguments select criteria, e.g. `-- 4 9`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use resocomb::harmonic_balance::{continuation, hb_solve, probe_transmission, HbOptions};
use resocomb::model::{linear_transfer, CircuitParams, DriveSpec, Signal, StateVector, Tone};
use resocomb::ode::{uniform_times, Tolerances};
use resocomb::run::{load_scenario_file, run, RunOptions, MANIFEST_NAME};
use resocomb::slowflow::{
    build_frame, check_regime, integrate_slowflow, loop_analysis, slowflow_jacobian, slowflow_jacobian_fd, Quadratures,
    ResonatorSpec, SlowFlowParams,
};
use resocomb::spectral::{comb_metrics, find_peaks, peaks_near, spectrum, Window};
use resocomb::timedomain::{demodulate, integrate_at, settle, SettleOptions, SteadySegment};
use tempfile::TempDir;

type Check = Result<(bool, String), String>;

fn recipe_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes")
}

/// Recipes run once into a scratch directory and shared between criteria.
struct Recipes {
    root: TempDir,
    done: HashMap<String, PathBuf>,
}

impl Recipes {
    fn new() -> Self {
        Self {
            root: TempDir::new().expect("scratch directory"),
            done: HashMap::new(),
        }
    }

    fn output(&mut self, name: &str) -> Result<PathBuf, String> {
        if let Some(d) = self.done.get(name) {
            return Ok(d.clone());
        }
        let sc = load_scenario_file(&recipe_dir().join(format!("{name}.toml"))).map_err(|e| format!("{name}: {e}"))?;
        let dir = self.root.path().join(name).join("first");
        run(&sc, &dir, RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        self.done.insert(name.to_string(), dir.clone());
        Ok(dir)
    }

    fn rerun(&self, name: &str, first: &Path) -> Result<PathBuf, String> {
        let sc = load_scenario_file(&first.join(MANIFEST_NAME)).map_err(|e| format!("{name}: {e}"))?;
        let dir = self.root.path().join(name).join("again");
        run(&sc, &dir, RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        Ok(dir)
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        .collect())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Complex coefficient `c` of `Re(c e^{ikωt})` in a segment spanning whole periods.
fn harmonic(seg: &SteadySegment, which: Signal, omega: f64, k: usize) -> Complex64 {
    let x = seg.signal(which);
    let acc: Complex64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| v * Complex64::from_polar(1.0, -(k as f64) * omega * seg.time(i)))
        .sum();
    let scale = if k == 0 { 1.0 } else { 2.0 };
    acc * scale / x.len() as f64
}

fn reference() -> CircuitParams {
    CircuitParams::new(0.01, 1.0, 0.005, 0.006, 1.0).unwrap()
}

fn active() -> CircuitParams {
    CircuitParams::new(0.01, 1.0, 0.012, 0.012, 1.0).unwrap()
}

fn linear_oracle(_: &mut Recipes) -> Check {
    let p = CircuitParams { eta: 0.0, ..reference() };
    let half = 10.0 * 2.0 * p.linear_damping();
    let opts = SettleOptions {
        criterion_tol: 1e-10,
        record_periods: 4,
        ..SettleOptions::default()
    };
    let mut worst: f64 = 0.0;
    for w in linspace(p.omega_x - half, p.omega_x + half, 50) {
        let d = DriveSpec::single(1e-3, w);
        let seg = settle(&p, &d, StateVector::ZERO, &opts).map_err(err)?;
        let td = resocomb::spectral::transmission(&seg, &d, 0, Signal::QX).map_err(err)?;
        let (qx, _) = linear_transfer(&p, w).map_err(err)?;
        worst = worst.max((td - qx).norm() / qx.norm());
    }
    Ok((worst < 1e-5, format!("max relative deviation {worst:.2e} over 50 detunings")))
}

fn extinction(_: &mut Recipes) -> Check {
    let p = CircuitParams::new(0.01, 1.0, 0.005, 0.005, 0.0).unwrap();
    let half = 10.0 * 2.0 * p.linear_damping();
    let opts = SettleOptions {
        record_periods: 4,
        max_periods: 400,
        ..SettleOptions::default()
    };
    let (mut leak, mut sum_dev): (f64, f64) = (0.0, 0.0);
    for w in linspace(p.omega_x - half, p.omega_x + half, 50) {
        let (qx, qp) = linear_transfer(&p, w).map_err(err)?;
        let expected = 1.0 / (2.0 * p.gamma_c * w);
        sum_dev = sum_dev.max(((qx + qp).norm() - expected).abs() / expected);
        // start on the steady orbit of the dissipative branch
        let amp = 1e-3;
        let d = DriveSpec::single(amp, w);
        let s0 = StateVector::new(0.0, 0.0, amp * qp.im);
        let seg = settle(&p, &d, s0, &opts).map_err(err)?;
        let t = resocomb::spectral::transmission(&seg, &d, 0, Signal::QX).map_err(err)?;
        leak = leak.max(t.norm());
    }
    Ok((
        leak < 1e-8 && sum_dev < 1e-10,
        format!("max |q_x| transmission {leak:.2e}, max |Q_x+Q_p| deviation {sum_dev:.2e}"),
    ))
}

fn overdamping(r: &mut Recipes) -> Check {
    let dir = r.output("intensity_map")?;
    let rows = read_csv(&dir.join("contrast.csv"))?;
    let c: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let n = c.len();
    let (low, mid) = (c[0], c[n / 2]);
    let third = n.div_ceil(3);
    let monotone = c[..third].windows(2).all(|w| w[1] > w[0]);
    Ok((
        low < 0.1 * mid && monotone,
        format!(
            "contrast {low:.3e} at lowest amplitude vs {mid:.3e} at mid ({:.1}%), lower third {}",
            100.0 * low / mid,
            if monotone { "increasing" } else { "not increasing" }
        ),
    ))
}

fn hb_equivalence(_: &mut Recipes) -> Check {
    let p = reference();
    let omega = 1.04;
    let amps: Vec<f64> = (0..10).map(|i| 1e-4 * 6f64.powf(i as f64 / 9.0)).collect();
    let branch = continuation(&p, omega, &amps, &HbOptions::default()).map_err(err)?;
    if !branch.folds.is_empty() {
        return Ok((false, format!("branch folds at {:?}", branch.folds)));
    }
    let opts = SettleOptions {
        criterion_tol: 1e-11,
        rel_tol: 1e-12,
        abs_tol: 1e-16,
        samples_per_fastest_period: 64,
        record_periods: 4,
        ..SettleOptions::default()
    };
    let (mut td_dev, mut trunc): (f64, f64) = (0.0, 0.0);
    for pt in &branch.points {
        let tone = Tone::new(pt.amplitude, omega);
        let s5 = &pt.solution;
        let s9 = hb_solve(&p, &tone, &HbOptions::with_harmonics(9), Some(s5)).map_err(err)?;
        let seg = settle(&p, &DriveSpec::from_tones(vec![tone]), StateVector::ZERO, &opts).map_err(err)?;
        let fund = s5.q_x[1].norm();
        for k in 1..=5 {
            let c = harmonic(&seg, Signal::QX, omega, k);
            td_dev = td_dev.max((c - s5.q_x[k]).norm() / fund);
            trunc = trunc.max((s9.q_x[k] - s5.q_x[k]).norm() / fund);
        }
    }
    Ok((
        td_dev < 1e-4 && trunc < 1e-6,
        format!("harmonics 1-5 vs time domain {td_dev:.2e}, N=5 vs N=9 {trunc:.2e} (relative to the fundamental)"),
    ))
}

fn probe_gain(_: &mut Recipes) -> Check {
    let p = reference();
    let pump = Tone::new(3e-3, 1.04);
    let probe_amp = pump.amplitude * 1e-4;
    let on = |w: f64| probe_transmission(&p, &pump, &Tone::new(probe_amp, w), 5, 10).map(|r| r.ratio);
    let off = |w: f64| linear_transfer(&p, w).map(|t| t.0);
    let lw = 2.0 * p.linear_damping();
    let fine = linspace(p.omega_x - 3.0 * lw, p.omega_x + 3.0 * lw, 241);
    let mags: Vec<f64> = fine.iter().map(|&w| on(w).map(|r| r.norm())).collect::<Result<_, _>>().map_err(err)?;
    let top = (0..mags.len()).max_by(|a, b| mags[*a].total_cmp(&mags[*b])).unwrap();
    let w_res = fine[top];
    let gain = 20.0 * (mags[top] / off(w_res).map_err(err)?.norm()).log10();
    let window: Vec<usize> = (0..fine.len()).filter(|&i| (fine[i] - w_res).abs() <= 3.0 * lw).collect();
    let left = window.iter().filter(|&&i| i <= top).map(|&i| mags[i]).collect::<Vec<_>>();
    let right = window.iter().filter(|&&i| i >= top).map(|&i| mags[i]).collect::<Vec<_>>();
    let decays = left.windows(2).all(|w| w[1] > w[0]) && right.windows(2).all(|w| w[1] < w[0]);

    let opts = SettleOptions {
        record_periods: 2,
        ..SettleOptions::default()
    };
    let mut worst: f64 = 0.0;
    for w in [0.98, 0.99, 1.0, 1.01, 1.02] {
        let d = DriveSpec::from_tones(vec![pump, Tone::new(probe_amp, w)]);
        let seg = settle(&p, &d, StateVector::ZERO, &opts).map_err(err)?;
        let td = resocomb::spectral::transmission(&seg, &d, 1, Signal::QX).map_err(err)?;
        let htm = on(w).map_err(err)?;
        worst = worst.max((td - htm).norm() / htm.norm());
    }
    Ok((
        gain >= 3.0 && decays && worst < 0.01,
        format!(
            "gain {gain:.2} dB at {w_res:.4}, {} over ±3 linewidths, two-tone deviation {:.2}%",
            if decays { "monotone decay" } else { "non-monotone" },
            100.0 * worst
        ),
    ))
}

/// Frequency of the free-running oscillation of the active set.
fn free_running(p: &CircuitParams) -> Result<f64, String> {
    let opts = SettleOptions {
        record_periods: 2000,
        samples_per_fastest_period: 16,
        max_periods: 3000,
        ..SettleOptions::default()
    };
    let seg = settle(p, &DriveSpec::none(), StateVector::new(1e-3, 0.0, 0.0), &opts).map_err(err)?;
    let spec = spectrum(&seg, Signal::QX, Window::BlackmanHarris).map_err(err)?;
    let peaks = find_peaks(&spec, 1e-6);
    peaks
        .iter()
        .max_by(|a, b| a.power.total_cmp(&b.power))
        .map(|q| q.omega)
        .ok_or_else(|| "no free-running line".to_string())
}

fn comb_spacing(_: &mut Recipes) -> Check {
    let p = active();
    let wx = free_running(&p)?;
    let opts = SettleOptions {
        record_periods: 1000,
        samples_per_fastest_period: 16,
        max_periods: 3000,
        ..SettleOptions::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for wp in [1.025, 1.0275, 1.03, 1.0325, 1.035] {
        let seg = settle(&p, &DriveSpec::single(1.2e-3, wp), StateVector::new(1e-3, 0.0, 0.0), &opts).map_err(err)?;
        let spec = spectrum(&seg, Signal::QX, Window::BlackmanHarris).map_err(err)?;
        let peaks = peaks_near(&find_peaks(&spec, 1e-8), wp, 0.2);
        match comb_metrics(&peaks, wp, Some(wx)) {
            Ok(c) => {
                let n = c.inferred_n.unwrap_or(0);
                let predicted = if n > 1 { (wp - wx).abs() / (n - 1) as f64 } else { f64::NAN };
                let dev = (c.spacing / predicted - 1.0).abs();
                let good = c.sideband_count() >= 5 && c.equidistance_residual < 0.01 && dev < 0.02;
                ok &= good;
                notes.push(format!(
                    "{wp}: {} sidebands, residual {:.1e}, n={n}, spacing off by {:.2}%",
                    c.sideband_count(),
                    c.equidistance_residual,
                    100.0 * dev
                ));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{wp}: {e}"));
            }
        }
    }
    Ok((ok, format!("free-running line {wx:.6}; {}", notes.join("; "))))
}

fn thresholds(r: &mut Recipes) -> Check {
    let t = read_json(&r.output("thresholds")?.join("thresholds.json"))?;
    let lower = t["lower"].as_f64();
    let upper = t["upper"].as_f64();

    // loop prediction from the averaged circuit in the order-2 frame
    let p = active();
    let wp = 1.03;
    let prediction = (|| -> Result<(Option<f64>, Option<f64>), String> {
        let frame = build_frame(wp, p.omega_x, 2).map_err(err)?;
        let sf = SlowFlowParams::averaged_from_circuit(&p, frame, 0.0, 0.0, 0.0).map_err(err)?;
        let res = ResonatorSpec {
            gamma_x: p.gamma_x,
            omega_x: p.omega_x,
            kappa: p.gamma_c * p.gamma_c / p.gamma_p,
        };
        let deltas = linspace(-0.05, 0.05, 1001);
        let amps = linspace(-4.0, -2.0, 41).into_iter().map(|e| 10f64.powf(e));
        let mut on = Vec::new();
        for a in amps {
            let rep = loop_analysis(&sf.with_pump(a), &res, 2, &deltas).map_err(err)?;
            on.push((a, rep.nyquist[0].oscillating));
        }
        let lo = on.windows(2).find(|w| !w[0].1 && w[1].1).map(|w| w[1].0);
        let hi = on.windows(2).rev().find(|w| w[0].1 && !w[1].1).map(|w| w[0].0);
        Ok((lo, hi))
    })();
    let close = |m: Option<f64>, q: Option<f64>| matches!((m, q), (Some(m), Some(q)) if (m / q - 1.0).abs() < 0.1);
    let (consistent, pred_note) = match prediction {
        Ok((lo, hi)) => (close(lower, lo) && close(upper, hi), format!("loop prediction {lo:?} / {hi:?}")),
        Err(e) => (false, format!("no loop prediction: {e}")),
    };

    // first-sideband power across the upper half of the oscillation window
    let rows = read_csv(&r.output("power_dependence")?.join("intensity_long.csv"))?;
    let f0 = rows[0][0];
    let col: Vec<(f64, f64)> = rows.iter().filter(|r| r[0] == f0).map(|r| (r[1], r[2])).collect();
    let present: Vec<&(f64, f64)> = col.iter().filter(|(_, v)| *v > 0.0).collect();
    let trend = match (present.first(), present.last()) {
        (Some(a), Some(b)) if present.len() >= 3 => {
            let mid = (a.0 * b.0).sqrt();
            let upper_half: Vec<f64> = present.iter().filter(|(x, _)| *x >= mid).map(|(_, v)| *v).collect();
            upper_half.len() >= 2 && upper_half.windows(2).all(|w| w[1] < w[0])
        }
        _ => false,
    };
    Ok((
        lower.is_some() && upper.is_some() && consistent && trend,
        format!(
            "thresholds {lower:?} / {upper:?}; {pred_note}; sideband power {} over the upper half",
            if trend { "decreasing" } else { "not decreasing" }
        ),
    ))
}

fn coexistence(r: &mut Recipes) -> Check {
    let dir = r.output("coexistence")?;
    let cells = read_json(&dir.join("coexist.json"))?;
    let cells = cells.as_array().ok_or("coexist.json is not a list")?;
    let both: Vec<&serde_json::Value> = cells
        .iter()
        .filter(|c| {
            let osc = c["oscillating"].as_array().cloned().unwrap_or_default();
            osc.contains(&2.into()) && osc.contains(&3.into())
        })
        .collect();
    let margins = |c: &serde_json::Value, n: u64| {
        let r = c["results"].as_array()?.iter().find(|r| r["n"] == n)?;
        Some((r["gain_margin_db"].as_f64()?.abs(), r["phase_margin_deg"].as_f64()?))
    };
    let weaker = both
        .iter()
        .filter(|c| match (margins(c, 2), margins(c, 3)) {
            (Some((g2, p2)), Some((g3, p3))) => g3 < g2 && p3 < p2,
            _ => false,
        })
        .count();
    let families = crowding(&dir)?;
    Ok((
        weaker > 0 && families.0,
        format!(
            "orders 2 and 3 both unstable at {} pump levels, order 3 less stable at {weaker}; {}",
            both.len(),
            families.1
        ),
    ))
}

/// Both spacing families in the time-domain spectrum of the coexistence
/// recipe: lines on the order-2 grid `ω_p + k(ω_p − ω_x)` and intermediate
/// lines on the order-3 grid at half-integer multiples.
fn crowding(dir: &Path) -> Result<(bool, String), String> {
    let sc = load_scenario_file(&dir.join(MANIFEST_NAME)).map_err(err)?;
    let (Some(drive), Some(wx)) = (&sc.drive, sc.coexist.as_ref().and_then(|c| c.spectrum).and_then(|s| s.omega_x_eff)) else {
        return Ok((false, "no time-domain spectrum in the recipe".into()));
    };
    let wp = drive.tones[0].omega;
    let s2 = (wp - wx).abs();
    let rows = read_csv(&dir.join("peaks.csv"))?;
    let max = rows.iter().map(|r| r[1]).fold(0.0, f64::max);
    let offsets: Vec<f64> = rows
        .iter()
        .filter(|r| r[1] > 1e-6 * max && (r[0] - wp).abs() < 0.2)
        .map(|r| 2.0 * (r[0] - wp) / s2)
        .filter(|k| k.abs() > 0.5 && (k - k.round()).abs() < 0.1)
        .collect();
    let even = offsets.iter().filter(|k| k.round() as i64 % 2 == 0).count();
    let odd = offsets.len() - even;
    Ok((
        even > 0 && odd > 0,
        format!("time-domain lines: {even} on the order-2 grid, {odd} intermediate"),
    ))
}

fn slowflow_fidelity(_: &mut Recipes) -> Check {
    let p = CircuitParams { eta: 0.0, ..reference() };
    let frame = build_frame(p.omega_x + 0.004, p.omega_x, 2).map_err(err)?;
    let upsilon = 0.05;
    let delta_a = p.linear_damping();
    let v0 = 1e-4;
    let sf = SlowFlowParams::averaged_from_circuit(&p, frame, v0, delta_a / (50.0 * upsilon * upsilon), 0.0).map_err(err)?;
    let regime = check_regime(&sf, upsilon);
    if !regime.valid {
        return Ok((false, format!("regime rejected: {}", regime.reason.unwrap_or_default())));
    }
    let envelope_period = 2.0 * PI / frame.delta_x.abs();
    let t_end = 10.0 * envelope_period;
    let dt = 2.0 * PI / (32.0 * frame.omega_p());
    let n = (t_end / dt).ceil() as usize;
    let times = uniform_times(0.0, dt, n);
    let traj = integrate_at(&p, &DriveSpec::single(v0, frame.omega_p()), StateVector::ZERO, 0.0, &times, Tolerances::new(1e-10, 1e-14))
        .map_err(err)?;
    let seg = SteadySegment::from_samples(0.0, dt, traj.states);
    let env = demodulate(&seg, Signal::QX, frame.omega_r, 0.1).map_err(err)?;
    let sf_traj = integrate_slowflow(&sf, Quadratures::ZERO, 0.0, &times, Tolerances::new(1e-10, 1e-14)).map_err(err)?;
    let scale = sf_traj.iter().map(|q| q.norm()).fold(0.0, f64::max);
    // the zero-phase filter needs a few time constants at either end
    let edge = 3.0 * 2.0 * PI / 0.1;
    let mut worst: f64 = 0.0;
    for (i, q) in sf_traj.iter().enumerate() {
        let t = times[i];
        if t < edge || t > t_end - edge {
            continue;
        }
        worst = worst.max((env.u[i] - q.u).hypot(env.v[i] - q.v) / scale);
    }

    let mut jac: f64 = 0.0;
    let strong = SlowFlowParams { mu: 0.3, chi: 2.0, ..sf };
    for (u, v) in [(0.1, -0.2), (0.3, 0.05), (-0.25, 0.4), (0.0, 0.0)] {
        let q = Quadratures::new(u, v);
        let (a, b) = (slowflow_jacobian(q, &strong), slowflow_jacobian_fd(q, &strong, 1e-6));
        for r in 0..2 {
            for c in 0..2 {
                jac = jac.max((a[r][c] - b[r][c]).abs() / (1.0 + a[r][c].abs()));
            }
        }
    }
    Ok((
        worst < 0.05 && jac < 1e-6,
        format!("envelope deviation {:.2}% of peak over 10 envelope periods, Jacobian vs differences {jac:.1e}", 100.0 * worst),
    ))
}

fn determinism(r: &mut Recipes) -> Check {
    let mut names: Vec<String> = fs::read_dir(recipe_dir())
        .map_err(err)?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "toml").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    let mut bad = Vec::new();
    for name in &names {
        let first = r.output(name)?;
        let again = r.rerun(name, &first)?;
        let m = read_json(&first.join(MANIFEST_NAME))?;
        for f in m["files"].as_array().ok_or("manifest without files")? {
            let f = f["name"].as_str().ok_or("file record without name")?;
            if fs::read(first.join(f)).map_err(err)? != fs::read(again.join(f)).map_err(err)? {
                bad.push(format!("{name}/{f}"));
            }
        }
        if read_json(&again.join(MANIFEST_NAME))?["inputs_hash"] != m["inputs_hash"] {
            bad.push(format!("{name}/inputs_hash"));
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} recipes reproduced byte for byte", names.len())
        } else {
            format!("differences in {}", bad.join(", "))
        },
    ))
}

type Criterion = (usize, &'static str, Duration, fn(&mut Recipes) -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "linear oracle", Duration::from_secs(30), linear_oracle),
        (2, "mode extinction", Duration::from_secs(5), extinction),
        (3, "low-power overdamping", Duration::from_secs(300), overdamping),
        (4, "harmonic balance equivalence", Duration::from_secs(120), hb_equivalence),
        (5, "probe amplification", Duration::from_secs(180), probe_gain),
        (6, "comb spacing", Duration::from_secs(600), comb_spacing),
        (7, "thresholds and power trend", Duration::from_secs(600), thresholds),
        (8, "coexistence and crowding", Duration::from_secs(900), coexistence),
        (9, "slow-flow fidelity", Duration::from_secs(120), slowflow_fidelity),
        (10, "determinism", Duration::MAX, determinism),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut recipes = Recipes::new();
    let mut failed = 0;
    for (k, name, limit, check) in criteria {
        if !picked.is_empty() && !picked.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let outcome = check(&mut recipes);
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((pass, detail)) if took <= limit => (pass, detail),
            Ok((_, detail)) => (false, format!("{detail}; over the {} s budget", limit.as_secs())),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {k:>2} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
