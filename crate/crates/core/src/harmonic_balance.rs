//! Periodic steady states by harmonic balance, amplitude continuation through
//! folds, and small-probe transmission through the pumped system.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_transfer, rhs_at, state_jacobian, CircuitParams, StateVector, Tone};
use crate::ode::{Dopri5, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HbOptions {
    pub harmonics: usize,
    /// Residual tolerance relative to the drive amplitude.
    pub tol: f64,
    pub max_iter: usize,
    /// Condition number of the equilibrated Jacobian treated as singular.
    pub condition_limit: f64,
}

impl Default for HbOptions {
    fn default() -> Self {
        Self {
            harmonics: 5,
            tol: 1e-10,
            max_iter: 50,
            condition_limit: 1e12,
        }
    }
}

impl HbOptions {
    pub fn with_harmonics(harmonics: usize) -> Self {
        Self {
            harmonics,
            ..Self::default()
        }
    }
}

/// Truncated Fourier series of a periodic orbit,
/// `x(t) = Re Σ_k c_k e^{ikωt}` for `k = 0..=N`.
#[derive(Debug, Clone, Serialize)]
pub struct FourierSolution {
    pub omega: f64,
    pub harmonics: usize,
    pub q_x: Vec<Complex64>,
    pub q_p: Vec<Complex64>,
    /// Projected residual norm divided by the drive amplitude.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub drive: Tone,
}

impl FourierSolution {
    fn from_real(z: &[f64], n: usize, omega: f64, drive: Tone) -> Self {
        let split = |c: &[f64]| -> Vec<Complex64> {
            let mut out = vec![Complex64::new(c[0], 0.0)];
            for k in 1..=n {
                out.push(Complex64::new(c[2 * k - 1], -c[2 * k]));
            }
            out
        };
        let w = 2 * n + 1;
        Self {
            omega,
            harmonics: n,
            q_x: split(&z[..w]),
            q_p: split(&z[w..]),
            residual: f64::NAN,
            converged: false,
            iterations: 0,
            drive,
        }
    }

    fn to_real(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(4 * self.harmonics + 2);
        for c in [&self.q_x, &self.q_p] {
            z.push(c[0].re);
            for k in 1..=self.harmonics {
                let ck = c.get(k).copied().unwrap_or_default();
                z.push(ck.re);
                z.push(-ck.im);
            }
        }
        z
    }

    /// The same orbit represented with `n` harmonics (zero padded or truncated).
    pub fn resized(&self, n: usize) -> Self {
        let fit = |c: &[Complex64]| (0..=n).map(|k| c.get(k).copied().unwrap_or_default()).collect();
        Self {
            harmonics: n,
            q_x: fit(&self.q_x),
            q_p: fit(&self.q_p),
            ..self.clone()
        }
    }

    fn eval(c: &[Complex64], omega: f64, t: f64) -> (f64, f64) {
        let mut x = 0.0;
        let mut dx = 0.0;
        for (k, ck) in c.iter().enumerate() {
            let e = Complex64::from_polar(1.0, k as f64 * omega * t);
            x += (ck * e).re;
            dx += (ck * e * Complex64::new(0.0, k as f64 * omega)).re;
        }
        (x, dx)
    }

    /// State on the orbit at time `t`.
    pub fn state_at(&self, t: f64) -> StateVector {
        let (q_x, v_x) = Self::eval(&self.q_x, self.omega, t);
        let (q_p, _) = Self::eval(&self.q_p, self.omega, t);
        StateVector::new(q_x, v_x, q_p)
    }

    pub fn amplitude(&self, k: usize) -> f64 {
        self.q_x.get(k).map_or(0.0, |c| c.norm())
    }

    /// Writes `harmonic,re_qx,im_qx,re_qp,im_qp` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "harmonic,re_qx,im_qx,re_qp,im_qp")?;
        for k in 0..=self.harmonics {
            let (x, p) = (self.q_x[k], self.q_p[k]);
            writeln!(w, "{k},{:e},{:e},{:e},{:e}", x.re, x.im, p.re, p.im)?;
        }
        Ok(())
    }
}

/// Collocation form of the model over one drive period.
struct Galerkin<'a> {
    p: &'a CircuitParams,
    omega: f64,
    n: usize,
    points: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    drive_sin: Vec<f64>,
}

impl<'a> Galerkin<'a> {
    fn new(p: &'a CircuitParams, omega: f64, phase: f64, n: usize, points: usize) -> Self {
        let mut cos = vec![0.0; (n + 1) * points];
        let mut sin = vec![0.0; (n + 1) * points];
        for k in 0..=n {
            for j in 0..points {
                let th = 2.0 * PI * (k * j) as f64 / points as f64;
                cos[k * points + j] = th.cos();
                sin[k * points + j] = th.sin();
            }
        }
        let drive_sin = (0..points)
            .map(|j| (2.0 * PI * j as f64 / points as f64 + phase).sin())
            .collect();
        Self {
            p,
            omega,
            n,
            points,
            cos,
            sin,
            drive_sin,
        }
    }

    fn unknowns(&self) -> usize {
        4 * self.n + 2
    }

    /// Value, first and second time derivatives of a real series at every point.
    fn synth(&self, c: &[f64], out: &mut [[f64; 3]]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut v = [c[0], 0.0, 0.0];
            for k in 1..=self.n {
                let (a, b) = (c[2 * k - 1], c[2 * k]);
                let (co, si) = (self.cos[k * self.points + j], self.sin[k * self.points + j]);
                let kw = k as f64 * self.omega;
                v[0] += a * co + b * si;
                v[1] += kw * (-a * si + b * co);
                v[2] -= kw * kw * (a * co + b * si);
            }
            *o = v;
        }
    }

    fn project(&self, r: &[f64], out: &mut [f64]) {
        let m = self.points as f64;
        out[0] = r.iter().sum::<f64>() / m;
        for k in 1..=self.n {
            let (mut c, mut s) = (0.0, 0.0);
            for (j, rj) in r.iter().enumerate() {
                c += rj * self.cos[k * self.points + j];
                s += rj * self.sin[k * self.points + j];
            }
            out[2 * k - 1] = 2.0 * c / m;
            out[2 * k] = 2.0 * s / m;
        }
    }

    fn residual(&self, z: &[f64], amp: f64, out: &mut [f64]) {
        let w = 2 * self.n + 1;
        let mut x = vec![[0.0; 3]; self.points];
        let mut q = vec![[0.0; 3]; self.points];
        self.synth(&z[..w], &mut x);
        self.synth(&z[w..], &mut q);
        let p = self.p;
        let mut r1 = vec![0.0; self.points];
        let mut r2 = vec![0.0; self.points];
        for j in 0..self.points {
            let v = amp * self.drive_sin[j];
            r1[j] = x[j][2] + 2.0 * p.gamma_x * x[j][1] + p.omega_x * p.omega_x * x[j][0] + 2.0 * p.gamma_c * q[j][1] - v;
            r2[j] = 2.0 * p.gamma_p * q[j][1] + p.eta * q[j][0].powi(3) + 2.0 * p.gamma_c * x[j][1] - v;
        }
        let (o1, o2) = out.split_at_mut(w);
        self.project(&r1, o1);
        self.project(&r2, o2);
        if p.eta == 0.0 {
            // Without the cubic term only the derivative of q_p enters, so its
            // mean is free and its equation vanishes identically; pin it to zero.
            o2[0] = z[w];
        }
    }

    fn residual_vec(&self, z: &[f64], amp: f64) -> Vec<f64> {
        let mut r = vec![0.0; self.unknowns()];
        self.residual(z, amp, &mut r);
        r
    }

    /// Forward-difference Jacobian with steps of 1e-7 times the variable scale.
    fn jacobian(&self, z: &[f64], amp: f64, r0: &[f64]) -> DMatrix<f64> {
        let m = self.unknowns();
        let scale = z.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(amp).max(1e-12);
        let mut jac = DMatrix::zeros(m, m);
        let mut zp = z.to_vec();
        let mut r = vec![0.0; m];
        for c in 0..m {
            let h = 1e-7 * z[c].abs().max(1e-3 * scale);
            zp[c] = z[c] + h;
            self.residual(&zp, amp, &mut r);
            for row in 0..m {
                jac[(row, c)] = (r[row] - r0[row]) / h;
            }
            zp[c] = z[c];
        }
        jac
    }

    /// Derivative of the residual with respect to the drive amplitude (exact: it is linear).
    fn amp_derivative(&self) -> Vec<f64> {
        let w = 2 * self.n + 1;
        let mut d = vec![0.0; self.unknowns()];
        let neg: Vec<f64> = self.drive_sin.iter().map(|s| -s).collect();
        self.project(&neg, &mut d[..w]);
        let (_, tail) = d.split_at_mut(w);
        self.project(&neg, tail);
        if self.p.eta == 0.0 {
            d[w] = 0.0;
        }
        d
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Condition number of the row- and column-equilibrated matrix.
fn equilibrated_condition(j: &DMatrix<f64>) -> f64 {
    let mut a = j.clone();
    for mut row in a.row_iter_mut() {
        let m = row.amax();
        if m > 0.0 {
            row /= m;
        }
    }
    for mut col in a.column_iter_mut() {
        let m = col.amax();
        if m > 0.0 {
            col /= m;
        }
    }
    let sv = a.singular_values();
    let (max, min) = sv.iter().fold((0.0f64, f64::INFINITY), |(mx, mn), s| (mx.max(*s), mn.min(*s)));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_drive(params: &CircuitParams, drive: &Tone, opts: &HbOptions) -> Result<()> {
    params.validate()?;
    if opts.harmonics < 1 {
        return Err(Error::domain("harmonic order must be >= 1"));
    }
    if !(drive.omega.is_finite() && drive.omega > 0.0 && drive.amplitude.is_finite() && drive.amplitude >= 0.0) {
        return Err(Error::domain("drive tone needs omega > 0 and a finite amplitude >= 0"));
    }
    Ok(())
}

fn linear_guess(params: &CircuitParams, drive: &Tone, n: usize) -> Result<Vec<f64>> {
    let (qx, qp) = linear_transfer(params, drive.omega)?;
    let u = Complex64::from_polar(drive.amplitude, drive.phase);
    let mut z = vec![0.0; 4 * n + 2];
    let w = 2 * n + 1;
    // Im(Z e^{iθ}) = Z.im cos θ + Z.re sin θ
    for (off, q) in [(0, qx * u), (w, qp * u)] {
        z[off + 1] = q.im;
        z[off + 2] = q.re;
    }
    Ok(z)
}

/// Damped Newton on the collocation residual.
fn newton(g: &Galerkin, mut z: Vec<f64>, amp: f64, opts: &HbOptions) -> Result<(Vec<f64>, f64, usize)> {
    let scale = if amp > 0.0 { amp } else { 1.0 };
    let mut r = g.residual_vec(&z, amp);
    let mut rn = norm(&r);
    for it in 0..=opts.max_iter {
        if rn <= opts.tol * scale {
            return Ok((z, rn / scale, it));
        }
        if it == opts.max_iter {
            break;
        }
        let jac = g.jacobian(&z, amp, &r);
        let cond = equilibrated_condition(&jac);
        if cond > opts.condition_limit {
            return Err(Error::BifurcationProximity { condition: cond });
        }
        let Some(step) = jac.lu().solve(&DVector::from_column_slice(&r)) else {
            return Err(Error::BifurcationProximity { condition: f64::INFINITY });
        };
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a - lambda * d).collect();
            let rt = g.residual_vec(&trial, amp);
            let nt = norm(&rt);
            if nt.is_finite() && (nt < (1.0 - 1e-4 * lambda) * rn || lambda < 1.0 / 1024.0) {
                z = trial;
                r = rt;
                rn = nt;
                break;
            }
            lambda *= 0.5;
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: rn / scale,
    })
}

/// Periodic response to a single tone. Without a guess the linear response
/// is used as the starting point, falling back to a ramp in drive amplitude
/// when Newton fails from there.
pub fn hb_solve(
    params: &CircuitParams,
    drive: &Tone,
    opts: &HbOptions,
    initial_guess: Option<&FourierSolution>,
) -> Result<FourierSolution> {
    check_drive(params, drive, opts)?;
    let n = opts.harmonics;
    let g = Galerkin::new(params, drive.omega, drive.phase, n, 4 * (n + 1));
    let finish = |z: Vec<f64>, residual: f64, iterations: usize| {
        let mut s = FourierSolution::from_real(&z, n, drive.omega, *drive);
        s.residual = residual;
        s.converged = true;
        s.iterations = iterations;
        s
    };
    if let Some(guess) = initial_guess {
        let (z, r, it) = newton(&g, guess.resized(n).to_real(), drive.amplitude, opts)?;
        return Ok(finish(z, r, it));
    }
    if drive.amplitude == 0.0 {
        return Ok(finish(vec![0.0; g.unknowns()], 0.0, 0));
    }
    match newton(&g, linear_guess(params, drive, n)?, drive.amplitude, opts) {
        Ok((z, r, it)) => Ok(finish(z, r, it)),
        Err(first) => {
            let steps = 40;
            let mut z = linear_guess(params, &Tone { amplitude: drive.amplitude * 1e-4, ..*drive }, n)?;
            for s in 0..=steps {
                let a = drive.amplitude * 10f64.powf(-4.0 * (1.0 - s as f64 / steps as f64));
                match newton(&g, z, a, opts) {
                    Ok((zn, r, it)) => {
                        if s == steps {
                            return Ok(finish(zn, r, it));
                        }
                        z = zn;
                    }
                    Err(_) => return Err(first),
                }
            }
            Err(first)
        }
    }
}

/// Projected residual of a solution on a collocation grid `factor` times finer.
pub fn residual_on_grid(params: &CircuitParams, sol: &FourierSolution, factor: usize) -> f64 {
    let n = sol.harmonics;
    let g = Galerkin::new(params, sol.omega, sol.drive.phase, n, 4 * (n + 1) * factor.max(1));
    let amp = sol.drive.amplitude;
    let r = g.residual_vec(&sol.to_real(), amp);
    norm(&r) / if amp > 0.0 { amp } else { 1.0 }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchPoint {
    pub amplitude: f64,
    pub solution: FourierSolution,
}

#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Drive amplitudes at which the branch turns back.
    pub folds: Vec<f64>,
}

impl Branch {
    /// Fundamental amplitude of `q_x` along the branch.
    pub fn response(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.amplitude, p.solution.amplitude(1))).collect()
    }
}

/// Follows the periodic orbit along a monotone amplitude schedule. Where the
/// plain warm-started solve fails the branch is traced by pseudo-arclength
/// stepping until it passes the failing schedule point, recording folds.
pub fn continuation(
    params: &CircuitParams,
    omega: f64,
    amplitudes: &[f64],
    opts: &HbOptions,
) -> Result<Branch> {
    if amplitudes.len() < 2 {
        return Err(Error::domain("continuation needs at least two amplitudes"));
    }
    let dir = (amplitudes[1] - amplitudes[0]).signum();
    if dir == 0.0 || amplitudes.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
        return Err(Error::domain("amplitude schedule must be strictly monotone"));
    }
    let n = opts.harmonics;
    let tone = |a: f64| Tone::new(a, omega);
    let mut branch = Branch {
        points: Vec::new(),
        folds: Vec::new(),
    };
    let first = hb_solve(params, &tone(amplitudes[0]), opts, None).map_err(|e| Error::Continuation {
        step: 0,
        source: Box::new(e),
    })?;
    branch.points.push(BranchPoint {
        amplitude: amplitudes[0],
        solution: first,
    });
    let g = Galerkin::new(params, omega, 0.0, n, 4 * (n + 1));
    let mut step = 1;
    while step < amplitudes.len() {
        let target = amplitudes[step];
        let last = &branch.points.last().unwrap().solution;
        match hb_solve(params, &tone(target), opts, Some(last)) {
            Ok(sol) if !jumped(last, &sol) => {
                branch.points.push(BranchPoint {
                    amplitude: target,
                    solution: sol,
                });
                step += 1;
            }
            _ => {
                arclength(&g, &mut branch, target, dir, opts).map_err(|e| Error::Continuation {
                    step,
                    source: Box::new(e),
                })?;
                // resume at the first schedule point beyond the arclength run
                let reached = branch.points.last().unwrap().amplitude;
                while step < amplitudes.len() && (amplitudes[step] - reached) * dir <= 0.0 {
                    step += 1;
                }
            }
        }
    }
    Ok(branch)
}

/// A warm-started solve that lands far from its seed has jumped branches.
fn jumped(a: &FourierSolution, b: &FourierSolution) -> bool {
    let (x, y) = (a.amplitude(1), b.amplitude(1));
    (x - y).abs() > 0.25 * x.max(y)
}

fn arclength(g: &Galerkin, branch: &mut Branch, target: f64, dir: f64, opts: &HbOptions) -> Result<()> {
    let m = g.unknowns();
    let pts = &branch.points;
    let a_ref = pts.last().unwrap().amplitude.abs().max(1e-300);
    let z_ref = pts
        .last()
        .unwrap()
        .solution
        .to_real()
        .iter()
        .fold(0.0f64, |s, v| s.max(v.abs()))
        .max(1e-300);
    // scaled coordinates y = (z / z_ref, A / a_ref)
    let to_y = |p: &BranchPoint| -> Vec<f64> {
        let mut y: Vec<f64> = p.solution.to_real().iter().map(|v| v / z_ref).collect();
        y.push(p.amplitude / a_ref);
        y
    };
    let mut y = to_y(pts.last().unwrap());
    let mut tangent = if pts.len() >= 2 {
        let prev = to_y(&pts[pts.len() - 2]);
        let t: Vec<f64> = y.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let nt = norm(&t);
        t.iter().map(|v| v / nt).collect::<Vec<f64>>()
    } else {
        let mut t = vec![0.0; m + 1];
        t[m] = dir;
        t
    };
    let mut h = 0.5 * (target - pts.last().unwrap().amplitude).abs() / a_ref;
    h = h.max(1e-6);
    let h_max = 4.0 * h;
    let da = g.amp_derivative();
    let omega = g.omega;
    let tone = |a: f64| Tone::new(a, omega);
    for _ in 0..4000 {
        let pred: Vec<f64> = y.iter().zip(&tangent).map(|(a, t)| a + h * t).collect();
        match correct(g, &pred, &tangent, z_ref, a_ref, &da, opts) {
            Ok(ynew) => {
                let t: Vec<f64> = ynew.iter().zip(&y).map(|(a, b)| a - b).collect();
                let nt = norm(&t);
                let t: Vec<f64> = t.iter().map(|v| v / nt).collect();
                if t[m] * tangent[m] < 0.0 {
                    // turning point between y and ynew: parabola through the amplitudes
                    let fold = fold_amplitude(&branch.points, ynew[m] * a_ref, y[m] * a_ref);
                    branch.folds.push(fold);
                }
                let amp = ynew[m] * a_ref;
                let z: Vec<f64> = ynew[..m].iter().map(|v| v * z_ref).collect();
                let mut sol = FourierSolution::from_real(&z, g.n, omega, tone(amp));
                sol.converged = true;
                sol.residual = norm(&g.residual_vec(&z, amp)) / amp.abs().max(1e-300);
                branch.points.push(BranchPoint { amplitude: amp, solution: sol });
                y = ynew;
                tangent = t;
                if (amp - target) * dir >= 0.0 && tangent[m] * dir > 0.0 {
                    return Ok(());
                }
                h = (h * 1.3).min(h_max);
            }
            Err(e) => {
                h *= 0.5;
                if h < 1e-10 {
                    return Err(e);
                }
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: 4000,
        residual: f64::NAN,
    })
}

/// Newton on the residual augmented with the arclength constraint.
fn correct(
    g: &Galerkin,
    pred: &[f64],
    tangent: &[f64],
    z_ref: f64,
    a_ref: f64,
    da: &[f64],
    opts: &HbOptions,
) -> Result<Vec<f64>> {
    let m = g.unknowns();
    let mut y = pred.to_vec();
    for _ in 0..12 {
        let z: Vec<f64> = y[..m].iter().map(|v| v * z_ref).collect();
        let amp = y[m] * a_ref;
        let r = g.residual_vec(&z, amp);
        let constraint: f64 = y.iter().zip(pred).zip(tangent).map(|((a, b), t)| (a - b) * t).sum();
        let rn = norm(&r);
        if rn <= opts.tol * amp.abs().max(1e-300) && constraint.abs() < 1e-12 {
            return Ok(y);
        }
        let jz = g.jacobian(&z, amp, &r);
        let mut big = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..m {
                big[(i, j)] = jz[(i, j)] * z_ref;
            }
            big[(i, m)] = da[i] * a_ref;
        }
        for j in 0..=m {
            big[(m, j)] = tangent[j];
        }
        let mut rhs = DVector::from_column_slice(&r);
        rhs = rhs.push(constraint);
        let step = big.lu().solve(&rhs).ok_or(Error::BifurcationProximity { condition: f64::INFINITY })?;
        for i in 0..=m {
            y[i] -= step[i];
        }
        if y.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: 12,
        residual: f64::NAN,
    })
}

fn fold_amplitude(points: &[BranchPoint], a_new: f64, a_cur: f64) -> f64 {
    // extremum of a parabola through the last three amplitudes versus arc index
    if points.len() >= 2 {
        let a0 = points[points.len() - 2].amplitude;
        let (a1, a2) = (a_cur, a_new);
        let denom = a0 - 2.0 * a1 + a2;
        if denom.abs() > 1e-300 {
            let s = 0.5 * (a0 - a2) / denom;
            if s.abs() <= 1.0 {
                return a1 - 0.25 * (a0 - a2) * s;
            }
        }
    }
    if a_new.abs() > a_cur.abs() {
        a_new
    } else {
        a_cur
    }
}

/// Floquet multipliers of the orbit: eigenvalues of the monodromy matrix of
/// the variational equations over one drive period.
pub fn floquet_multipliers(params: &CircuitParams, sol: &FourierSolution) -> Result<Vec<Complex64>> {
    let period = 2.0 * PI / sol.omega;
    let drive = sol.drive;
    let p = *params;
    let y0 = sol.state_at(0.0).to_array();
    let f = move |t: f64, y: &[f64; 12]| -> [f64; 12] {
        let x = [y[0], y[1], y[2]];
        let v = drive.amplitude * (drive.omega * t + drive.phase).sin();
        let dx = rhs_at(&x, v, &p);
        let jac = state_jacobian(&x, &p);
        let mut out = [0.0; 12];
        out[..3].copy_from_slice(&dx);
        for c in 0..3 {
            for r in 0..3 {
                out[3 + 3 * c + r] = (0..3).map(|k| jac[r][k] * y[3 + 3 * c + k]).sum();
            }
        }
        out
    };
    let mut y = [0.0; 12];
    y[..3].copy_from_slice(&y0);
    y[3] = 1.0;
    y[7] = 1.0;
    y[11] = 1.0;
    let tol = Tolerances::new(1e-10, 1e-13);
    let mut solver = Dopri5::new(f, 0.0, y, 1.0, tol);
    while solver.t() < period {
        solver.step(period)?;
    }
    let yf = *solver.y();
    let mono = Matrix3::from_fn(|r, c| yf[3 + 3 * c + r]);
    Ok(mono.complex_eigenvalues().iter().copied().collect())
}

/// Largest Floquet multiplier magnitude; below one means the orbit is stable.
pub fn floquet_multiplier(params: &CircuitParams, sol: &FourierSolution) -> Result<f64> {
    Ok(floquet_multipliers(params, sol)?.iter().map(|e| e.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeResponse {
    /// Complex q_x response at the probe frequency divided by the probe phasor.
    pub ratio: Complex64,
    /// 2-norm condition number of the harmonic transfer matrix.
    pub condition: f64,
    /// Set when the transfer matrix is ill-conditioned: the pumped orbit is
    /// close to losing stability and the result is unreliable.
    pub near_oscillation: bool,
}

/// Condition number above which the probe response is flagged.
pub const NEAR_OSCILLATION_CONDITION: f64 = 1e10;

/// Probe response of the system linearized about the pumped orbit, from the
/// harmonic transfer matrix truncated at `n_mix` sidebands on each side.
pub fn probe_transmission(
    params: &CircuitParams,
    pump: &Tone,
    probe: &Tone,
    n_pump: usize,
    n_mix: usize,
) -> Result<ProbeResponse> {
    if !(probe.omega.is_finite() && probe.omega > 0.0) {
        return Err(Error::domain("probe frequency must be > 0"));
    }
    let orbit = hb_solve(params, pump, &HbOptions::with_harmonics(n_pump), None)?;
    probe_about(params, &orbit, probe.omega, n_mix)
}

/// Probe response about an already solved pump orbit.
pub fn probe_about(params: &CircuitParams, orbit: &FourierSolution, omega_s: f64, n_mix: usize) -> Result<ProbeResponse> {
    let wp = orbit.omega;
    // Fourier coefficients of 3 η q_p(t)², K_j for j in -2N..=2N
    let n = orbit.harmonics;
    let span = 2 * n;
    let samples = 8 * (n + 1);
    let kt: Vec<f64> = (0..samples)
        .map(|l| {
            let t = 2.0 * PI * l as f64 / (samples as f64 * wp);
            3.0 * params.eta * orbit.state_at(t).q_p.powi(2)
        })
        .collect();
    let table: Vec<Complex64> = (-(span as i64)..=span as i64)
        .map(|j| {
            kt.iter()
                .enumerate()
                .map(|(l, v)| v * Complex64::from_polar(1.0, -2.0 * PI * (j * l as i64) as f64 / samples as f64))
                .sum::<Complex64>()
                / samples as f64
        })
        .collect();
    let kj = |j: i64| -> Complex64 {
        if j.unsigned_abs() as usize > span {
            return Complex64::new(0.0, 0.0);
        }
        table[(j + span as i64) as usize]
    };
    let mm = n_mix as i64;
    let size = 2 * (2 * n_mix + 1);
    let idx = |m: i64| (m + mm) as usize;
    let i = Complex64::i();
    let p = params;
    let mut a = DMatrix::<Complex64>::zeros(size, size);
    let mut b = DVector::<Complex64>::zeros(size);
    for m in -mm..=mm {
        let w = omega_s + m as f64 * wp;
        let (rx, rp) = (2 * idx(m), 2 * idx(m) + 1);
        a[(rx, rx)] = Complex64::new(p.omega_x * p.omega_x - w * w, 2.0 * p.gamma_x * w);
        a[(rx, rp)] = 2.0 * i * p.gamma_c * w;
        a[(rp, rx)] = 2.0 * i * p.gamma_c * w;
        a[(rp, rp)] = 2.0 * i * p.gamma_p * w;
        for l in -mm..=mm {
            let k = kj(m - l);
            if k != Complex64::new(0.0, 0.0) {
                a[(rp, 2 * idx(l) + 1)] += k;
            }
        }
    }
    b[2 * idx(0)] = Complex64::new(1.0, 0.0);
    b[2 * idx(0) + 1] = Complex64::new(1.0, 0.0);
    let sv = a.clone().singular_values();
    let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(x, y), s| (x.max(*s), y.min(*s)));
    let condition = if mn > 0.0 { mx / mn } else { f64::INFINITY };
    let x = a.lu().solve(&b).ok_or(Error::BifurcationProximity { condition })?;
    Ok(ProbeResponse {
        ratio: x[2 * idx(0)],
        condition,
        near_oscillation: condition > NEAR_OSCILLATION_CONDITION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(eta: f64) -> CircuitParams {
        CircuitParams::new(0.01, 1.0, 0.02, 0.05, eta).unwrap()
    }

    #[test]
    fn linear_case_matches_closed_form() {
        let p = params(0.0);
        for w in [0.97, 1.0, 1.013] {
            let tone = Tone::new(0.01, w).with_phase(0.3);
            let sol = hb_solve(&p, &tone, &HbOptions::default(), None).unwrap();
            let (qx, qp) = linear_transfer(&p, w).unwrap();
            let u = Complex64::from_polar(0.01, 0.3);
            // c_1 = -i Z for a sine-phasor Z
            let ex = -Complex64::i() * qx * u;
            let ep = -Complex64::i() * qp * u;
            assert!((sol.q_x[1] - ex).norm() < 1e-10 * ex.norm());
            assert!((sol.q_p[1] - ep).norm() < 1e-10 * ep.norm());
            for k in [0, 2, 3, 4, 5] {
                assert!(sol.q_x[k].norm() < 1e-12 * ex.norm(), "k={k}");
            }
        }
    }

    #[test]
    fn zero_drive_gives_zero() {
        let sol = hb_solve(&params(1.0), &Tone::new(0.0, 1.0), &HbOptions::default(), None).unwrap();
        assert!(sol.q_x.iter().chain(&sol.q_p).all(|c| c.norm() == 0.0));
        assert_eq!(sol.q_x.len(), 6);
    }

    #[test]
    fn nonlinear_orbit_has_odd_harmonics() {
        let p = params(1.0);
        let sol = hb_solve(&p, &Tone::new(0.02, 1.0), &HbOptions::default(), None).unwrap();
        assert!(sol.converged && sol.residual < 1e-10);
        assert!(sol.q_p[3].norm() > 1e-6 * sol.q_p[1].norm());
        for k in [0, 2, 4] {
            assert!(sol.q_p[k].norm() < 1e-9 * sol.q_p[1].norm(), "k={k}");
        }
        let fine = residual_on_grid(&p, &sol, 4);
        assert!(fine <= 10.0 * sol.residual.max(1e-15), "{fine} vs {}", sol.residual);
    }

    #[test]
    fn harmonic_order_rejected() {
        let e = hb_solve(&params(1.0), &Tone::new(0.01, 1.0), &HbOptions::with_harmonics(0), None);
        assert!(e.is_err());
    }

    #[test]
    fn continuation_linear_scaling() {
        let p = params(0.0);
        let amps: Vec<f64> = (1..=6).map(|i| 0.002 * i as f64).collect();
        let br = continuation(&p, 1.003, &amps, &HbOptions::default()).unwrap();
        assert!(br.folds.is_empty());
        let r0 = br.points[0].solution.amplitude(1) / amps[0];
        for pt in &br.points {
            assert!((pt.solution.amplitude(1) / pt.amplitude - r0).abs() < 1e-10 * r0);
        }
    }

    #[test]
    fn probe_without_pump_is_linear() {
        let p = params(1.0);
        let r = probe_transmission(&p, &Tone::new(0.0, 1.02), &Tone::new(1e-6, 1.004), 5, 4).unwrap();
        let (qx, _) = linear_transfer(&p, 1.004).unwrap();
        assert!((r.ratio - qx).norm() < 1e-6 * qx.norm());
        assert!(!r.near_oscillation);
    }

    #[test]
    fn linear_orbit_multipliers() {
        let p = params(0.0);
        let sol = hb_solve(&p, &Tone::new(0.01, 1.0), &HbOptions::default(), None).unwrap();
        let mut mags: Vec<f64> = floquet_multipliers(&p, &sol).unwrap().iter().map(|m| m.norm()).collect();
        mags.sort_by(f64::total_cmp);
        // photonic pair decays at the net damping; the free q_p offset is neutral
        let g = p.gamma_x - p.gamma_c * p.gamma_c / p.gamma_p;
        let decay = (-g * 2.0 * PI).exp();
        assert!((mags[0] - decay).abs() < 1e-7 && (mags[1] - decay).abs() < 1e-7, "{mags:?}");
        assert!((mags[2] - 1.0).abs() < 1e-7);
    }
}
