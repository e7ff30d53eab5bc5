//! Adaptive time integration of the circuit model, steady-state detection and
//! quadrature demodulation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rhs_at, CircuitParams, DriveSpec, Signal, StateVector};
use crate::ode::{uniform_times, Dopri5, Tolerances};

/// Accepted steps per drive period above which the run is flagged as stiff.
const STIFF_STEPS_PER_PERIOD: f64 = 2000.0;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub params_used: CircuitParams,
    pub drive_used: DriveSpec,
    pub steps: usize,
    pub stiff: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&StateVector> {
        self.states.last()
    }
}

fn check_tolerances(rel_tol: f64, abs_tol: f64) -> Result<()> {
    let ok = |v: f64| v.is_finite() && v > 0.0 && v <= 1e-2;
    if !ok(rel_tol) || !ok(abs_tol) {
        return Err(Error::domain("tolerances must lie in (0, 1e-2]"));
    }
    Ok(())
}

fn check_inputs(params: &CircuitParams, drive: &DriveSpec, state0: &StateVector) -> Result<()> {
    params.validate()?;
    drive.validate()?;
    if !state0.is_finite() {
        return Err(Error::domain("initial state must be finite"));
    }
    Ok(())
}

fn model_fn<'a>(params: &'a CircuitParams, drive: &'a DriveSpec) -> impl FnMut(f64, &[f64; 3]) -> [f64; 3] + 'a {
    move |t, y| rhs_at(y, drive.voltage(t), params)
}

fn stiff_flag(steps: usize, duration: f64, drive: &DriveSpec, params: &CircuitParams) -> bool {
    let omega = drive.max_omega().unwrap_or(params.omega_x).max(params.omega_x);
    let periods = (duration.abs() * omega / (2.0 * PI)).max(1.0);
    steps as f64 / periods > STIFF_STEPS_PER_PERIOD
}

/// Integrates from `t = 0` to `t_end`, recording every accepted step.
pub fn integrate(
    params: &CircuitParams,
    drive: &DriveSpec,
    state0: StateVector,
    t_end: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Trajectory> {
    check_tolerances(rel_tol, abs_tol)?;
    check_inputs(params, drive, &state0)?;
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::domain("t_end must be > 0"));
    }
    let mut solver = Dopri5::new(model_fn(params, drive), 0.0, state0.to_array(), 1.0, Tolerances::new(rel_tol, abs_tol));
    let mut times = vec![0.0];
    let mut states = vec![state0];
    while solver.t() < t_end {
        solver.step(t_end)?;
        times.push(solver.t());
        states.push(StateVector::from_array(*solver.y()));
    }
    let steps = solver.accepted;
    Ok(Trajectory {
        times,
        states,
        params_used: *params,
        drive_used: drive.clone(),
        steps,
        stiff: stiff_flag(steps, t_end, drive, params),
    })
}

/// Integrates from `t0` (where the state is `state0`) through the requested
/// instants, returning dense-output samples there. Instants must be strictly
/// monotone and on one side of `t0`; backward integration is allowed.
pub fn integrate_at(
    params: &CircuitParams,
    drive: &DriveSpec,
    state0: StateVector,
    t0: f64,
    times: &[f64],
    tol: Tolerances,
) -> Result<Trajectory> {
    check_tolerances(tol.rtol, tol.atol)?;
    check_inputs(params, drive, &state0)?;
    let Some(&t_last) = times.last() else {
        return Err(Error::domain("no sample instants requested"));
    };
    let dir = if t_last < t0 { -1.0 } else { 1.0 };
    if times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) || (times[0] - t0) * dir < 0.0 {
        return Err(Error::domain("sample instants must be strictly monotone away from t0"));
    }
    let mut solver = Dopri5::new(model_fn(params, drive), t0, state0.to_array(), dir, tol);
    let mut states = vec![StateVector::ZERO; times.len()];
    solver.run_sampled(t_last, times, |i, _, y| states[i] = StateVector::from_array(*y))?;
    let steps = solver.accepted;
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        params_used: *params,
        drive_used: drive.clone(),
        steps,
        stiff: stiff_flag(steps, t_last - t0, drive, params),
    })
}

/// Base angular frequency of a tone set: the largest frequency whose integer
/// multiples contain every tone. Returns `None` when the ratios are not
/// rational with a small enough denominator.
pub fn base_omega(drive: &DriveSpec, max_denominator: u64) -> Option<f64> {
    let reference = drive
        .tones
        .iter()
        .filter(|t| t.amplitude > 0.0)
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))?
        .omega;
    // Express every tone as (num/den) * reference, then base = reference / lcm(den) * gcd(num').
    let mut fracs = Vec::new();
    for tone in drive.tones.iter().filter(|t| t.amplitude > 0.0) {
        let (num, den) = rational_approx(tone.omega / reference, max_denominator)?;
        fracs.push((num, den));
    }
    let lcm_den = fracs.iter().fold(1u64, |acc, &(_, d)| lcm(acc, d));
    let g = fracs.iter().fold(0u64, |acc, &(n, d)| gcd(acc, n * (lcm_den / d)));
    Some(reference * g as f64 / lcm_den as f64)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Best rational approximation with denominator ≤ `max_den` by continued
/// fractions, accepted only if it is exact to ~1e-12 relative.
fn rational_approx(x: f64, max_den: u64) -> Option<(u64, u64)> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e12 {
            break;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - x).abs() <= 1e-12 * x {
            return Some((h1, k1));
        }
        let frac = r - a as f64;
        if frac < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettleOptions {
    pub max_periods: usize,
    /// Period-to-period RMS change (relative) below which the run counts as settled.
    pub criterion_tol: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Minimum samples per period of the highest drive frequency.
    pub samples_per_fastest_period: usize,
    /// Number of base periods in the returned segment.
    pub record_periods: usize,
    /// Largest denominator accepted when reducing tone ratios to a common period.
    pub max_denominator: u64,
}

impl Default for SettleOptions {
    fn default() -> Self {
        Self {
            max_periods: 5000,
            criterion_tol: 1e-6,
            rel_tol: 1e-10,
            abs_tol: 1e-13,
            samples_per_fastest_period: 32,
            record_periods: 64,
            max_denominator: 1000,
        }
    }
}

/// A uniformly sampled stretch of a (nearly) steady trajectory.
#[derive(Debug, Clone)]
pub struct SteadySegment {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<StateVector>,
    /// Samples per normalized time unit.
    pub sample_rate: f64,
    pub base_omega: f64,
    pub periods: usize,
    pub converged: bool,
    /// Envelope stationary and periodic even though the state is not periodic at the base period.
    pub quasi_periodic: bool,
    /// Angular frequency of the envelope modulation when `quasi_periodic`.
    pub envelope_omega: Option<f64>,
    pub residual: f64,
    /// End of the transient, i.e. time at which the recorded segment starts.
    pub settle_time: f64,
}

impl SteadySegment {
    pub fn from_samples(t0: f64, dt: f64, states: Vec<StateVector>) -> Self {
        Self {
            t0,
            dt,
            states,
            sample_rate: 1.0 / dt,
            base_omega: 0.0,
            periods: 0,
            converged: true,
            quasi_periodic: false,
            envelope_omega: None,
            residual: 0.0,
            settle_time: t0,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| self.time(i)).collect()
    }

    pub fn signal(&self, which: Signal) -> Vec<f64> {
        self.states.iter().map(|s| which.pick(s)).collect()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.states.len() as f64
    }

    pub fn last_state(&self) -> Option<StateVector> {
        self.states.last().copied()
    }
}

fn rms_change(prev: &[[f64; 3]], cur: &[[f64; 3]]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, b) in prev.iter().zip(cur) {
        for i in 0..3 {
            diff += (a[i] - b[i]).powi(2);
            norm += b[i] * b[i];
        }
    }
    if norm < 1e-300 {
        return diff.sqrt();
    }
    (diff / norm).sqrt()
}

/// Integrates until the state repeats from one base period to the next, then
/// records `record_periods` whole base periods on a uniform grid.
///
/// For tone sets without a usable common period the pump (strongest tone)
/// period is used and the quasi-periodic flag reports whether the
/// demodulated envelope is stationary.
pub fn settle(
    params: &CircuitParams,
    drive: &DriveSpec,
    state0: StateVector,
    opts: &SettleOptions,
) -> Result<SteadySegment> {
    check_tolerances(opts.rel_tol, opts.abs_tol)?;
    check_inputs(params, drive, &state0)?;
    if opts.record_periods == 0 || opts.samples_per_fastest_period < 4 {
        return Err(Error::domain("record_periods must be > 0 and samples_per_fastest_period >= 4"));
    }
    let pump_omega = drive
        .tones
        .iter()
        .filter(|t| t.amplitude > 0.0)
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
        .map(|t| t.omega);
    let (base, commensurate) = match base_omega(drive, opts.max_denominator) {
        Some(b) => (b, true),
        // zero drive: settle on the photonic period
        None => (pump_omega.unwrap_or(params.omega_x), pump_omega.is_none()),
    };
    let fastest = drive.max_omega().unwrap_or(base).max(params.omega_x).max(base);
    let period = 2.0 * PI / base;
    let per_period = ((fastest / base) * opts.samples_per_fastest_period as f64).ceil() as usize;
    let dt = period / per_period as f64;

    let tol = Tolerances::new(opts.rel_tol, opts.abs_tol);
    let mut solver = Dopri5::new(model_fn(params, drive), 0.0, state0.to_array(), 1.0, tol);

    let mut prev: Vec<[f64; 3]> = Vec::new();
    let mut cur: Vec<[f64; 3]> = Vec::with_capacity(per_period);
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut k = 0usize;
    while k < opts.max_periods {
        let t_start = k as f64 * period;
        let times: Vec<f64> = (1..=per_period).map(|i| t_start + dt * i as f64).collect();
        cur.clear();
        solver.run_sampled(t_start + period, &times, |_, _, y| cur.push(*y))?;
        k += 1;
        if !prev.is_empty() {
            residual = rms_change(&prev, &cur);
            if residual < opts.criterion_tol && commensurate {
                converged = true;
                break;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let t_rec = k as f64 * period;
    let n = opts.record_periods * per_period;
    let times = uniform_times(t_rec, dt, n);
    let mut states = Vec::with_capacity(n);
    solver.run_sampled(times[n - 1], &times, |_, _, y| states.push(StateVector::from_array(*y)))?;

    let mut seg = SteadySegment {
        t0: t_rec,
        dt,
        states,
        sample_rate: 1.0 / dt,
        base_omega: base,
        periods: k,
        converged,
        quasi_periodic: false,
        envelope_omega: None,
        residual,
        settle_time: t_rec,
    };
    if !converged {
        if let Some(wp) = pump_omega {
            if let Some(env) = envelope_periodicity(&seg, wp)? {
                seg.quasi_periodic = true;
                seg.envelope_omega = Some(env);
            }
        }
    }
    Ok(seg)
}

/// Detects a stationary, periodic envelope of `q_x` relative to the pump.
/// Returns the envelope angular frequency when found.
pub fn envelope_periodicity(seg: &SteadySegment, pump_omega: f64) -> Result<Option<f64>> {
    let env = demodulate(seg, Signal::QX, pump_omega, 0.25 * pump_omega)?;
    let mag: Vec<f64> = env.u.iter().zip(&env.v).map(|(u, v)| (u * u + v * v).sqrt()).collect();
    // Discard filter edges.
    let skip = (2.0 * 2.0 * PI / pump_omega / seg.dt).ceil() as usize;
    if mag.len() < 4 * skip + 16 {
        return Ok(None);
    }
    let core = &mag[skip..mag.len() - skip];
    let mean = core.iter().sum::<f64>() / core.len() as f64;
    let centered: Vec<f64> = core.iter().map(|m| m - mean).collect();
    let var = centered.iter().map(|c| c * c).sum::<f64>() / centered.len() as f64;
    if mean <= 0.0 || var.sqrt() < 1e-9 * mean {
        // constant envelope: periodic motion, not quasi-periodic
        return Ok(None);
    }
    // First autocorrelation maximum after the first zero crossing.
    let n = centered.len();
    let max_lag = n / 2;
    let acf = |lag: usize| -> f64 {
        let m = n - lag;
        centered[..m].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / (m as f64 * var)
    };
    let mut lag = 1;
    while lag < max_lag && acf(lag) > 0.0 {
        lag += 1;
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for l in lag..max_lag {
        let c = acf(l);
        if c > best.1 {
            best = (l, c);
        }
    }
    if best.0 == 0 || best.1 < 0.98 {
        return Ok(None);
    }
    // Refine the lag by a parabola through neighbours.
    let l = best.0;
    let (a, b, c) = (acf(l - 1), best.1, acf(l + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-300 { 0.5 * (a - c) / denom } else { 0.0 };
    let period = (l as f64 + shift) * seg.dt;
    Ok(Some(2.0 * PI / period))
}

/// Quadrature components of a signal relative to a reference frequency.
#[derive(Debug, Clone)]
pub struct EnvelopeSeries {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub omega_r: f64,
}

impl EnvelopeSeries {
    /// `U cos ω_R t + V sin ω_R t` at every sample.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.times
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(t, (u, v))| u * (self.omega_r * t).cos() + v * (self.omega_r * t).sin())
            .collect()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).collect()
    }
}

/// Second-order Butterworth low-pass section (bilinear transform, prewarped).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butterworth_lowpass(cutoff: f64, dt: f64) -> Self {
        let k = (cutoff * dt / 2.0).tan();
        let s2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + s2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm],
        }
    }

    /// Transposed direct form II, state initialised to the steady response to `x[0]`.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let x0 = x.first().copied().unwrap_or(0.0);
        let mut z2 = (b2 - a2) * x0;
        let mut z1 = (b1 - a1) * x0 + z2;
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    /// Zero-phase forward–backward filtering with even reflection at both ends.
    fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        let pad = pad.min(n.saturating_sub(1));
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(x[n - 1 - i]);
        }
        let mut y = self.run(&ext);
        y.reverse();
        let mut y = self.run(&y);
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Mixes the selected signal down with `cos`/`sin` at `omega_r` and low-pass
/// filters both products (zero-phase, second order) at `lp_bandwidth`.
pub fn demodulate(
    segment: &SteadySegment,
    which: Signal,
    omega_r: f64,
    lp_bandwidth: f64,
) -> Result<EnvelopeSeries> {
    if !(omega_r.is_finite() && omega_r > 0.0) {
        return Err(Error::domain("reference frequency must be > 0"));
    }
    if !(lp_bandwidth > 0.0 && lp_bandwidth < omega_r / 2.0) {
        return Err(Error::domain("low-pass bandwidth must lie in (0, omega_r / 2)"));
    }
    if lp_bandwidth * segment.dt >= PI {
        return Err(Error::domain("low-pass bandwidth above the sampling Nyquist limit"));
    }
    let times = segment.times();
    let x = segment.signal(which);
    let mixed_c: Vec<f64> = x.iter().zip(&times).map(|(x, t)| 2.0 * x * (omega_r * t).cos()).collect();
    let mixed_s: Vec<f64> = x.iter().zip(&times).map(|(x, t)| 2.0 * x * (omega_r * t).sin()).collect();
    let filter = Biquad::butterworth_lowpass(lp_bandwidth, segment.dt);
    let pad = (6.0 * 2.0 * PI / (lp_bandwidth * segment.dt)).ceil() as usize;
    Ok(EnvelopeSeries {
        u: filter.filtfilt(&mixed_c, pad),
        v: filter.filtfilt(&mixed_s, pad),
        times,
        omega_r,
    })
}
