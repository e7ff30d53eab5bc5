//! Dormand–Prince 5(4) integrator with step-size control and continuous
//! (dense) output, generic over fixed-size state arrays.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on |h|; `None` means unbounded.
    pub h_max: Option<f64>,
    pub max_steps: usize,
    /// Any state component beyond this magnitude aborts with [`Error::Divergence`].
    pub overflow_guard: f64,
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            h_max: None,
            max_steps: 50_000_000,
            overflow_guard: 1e12,
        }
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = Some(h_max);
        self
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::new(1e-9, 1e-12)
    }
}

fn axpy<const N: usize>(y: &[f64; N], terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += c * k[i];
        }
    }
    out
}

/// Single-trajectory stepper. Call [`Dopri5::step`] repeatedly; after each
/// accepted step [`Dopri5::dense`] interpolates inside the last step.
pub struct Dopri5<const N: usize, F>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    f: F,
    tol: Tolerances,
    t: f64,
    y: [f64; N],
    k1: [f64; N],
    h: f64,
    dir: f64,
    facold: f64,
    last_rejected: bool,
    t_old: f64,
    h_old: f64,
    cont: [[f64; N]; 5],
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl<const N: usize, F> Dopri5<N, F>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    /// `direction` is +1 for forward and -1 for backward integration.
    pub fn new(mut f: F, t0: f64, y0: [f64; N], direction: f64, tol: Tolerances) -> Self {
        let k1 = f(t0, &y0);
        let dir = if direction < 0.0 { -1.0 } else { 1.0 };
        let mut s = Self {
            f,
            tol,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            dir,
            facold: 1e-4,
            last_rejected: false,
            t_old: t0,
            h_old: 0.0,
            cont: [y0; 5],
            accepted: 0,
            rejected: 0,
            evaluations: 1,
        };
        s.h = s.initial_step();
        s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64; N] {
        &self.y
    }

    /// Start of the last accepted step.
    pub fn t_prev(&self) -> f64 {
        self.t_old
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.tol.atol + self.tol.rtol * a.abs().max(b.abs())
    }

    fn h_cap(&self) -> f64 {
        self.tol.h_max.unwrap_or(f64::INFINITY)
    }

    // Hairer & Wanner's starting step heuristic.
    fn initial_step(&mut self) -> f64 {
        let mut dnf = 0.0;
        let mut dny = 0.0;
        for i in 0..N {
            let sk = self.scale(self.y[i], self.y[i]);
            dnf += (self.k1[i] / sk).powi(2);
            dny += (self.y[i] / sk).powi(2);
        }
        dnf /= N as f64;
        dny /= N as f64;
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            (dny / dnf).sqrt() * 0.01
        };
        h = h.min(self.h_cap());
        let y1 = axpy(&self.y, &[(self.dir * h, &self.k1)]);
        let f1 = (self.f)(self.t + self.dir * h, &y1);
        self.evaluations += 1;
        let mut der2 = 0.0;
        for i in 0..N {
            let sk = self.scale(self.y[i], self.y[i]);
            der2 += ((f1[i] - self.k1[i]) / sk).powi(2);
        }
        der2 = (der2 / N as f64).sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(0.2)
        };
        (100.0 * h).min(h1).min(self.h_cap())
    }

    /// Advances by one accepted step, never stepping past `t_limit`.
    pub fn step(&mut self, t_limit: f64) -> Result<()> {
        const SAFE: f64 = 0.9;
        const BETA: f64 = 0.04;
        const EXPO1: f64 = 0.2 - BETA * 0.75;
        const FACC1: f64 = 5.0;
        const FACC2: f64 = 0.1;

        loop {
            if self.accepted + self.rejected >= self.tol.max_steps {
                return Err(Error::domain(format!("step budget exhausted at t = {}", self.t)));
            }
            let remaining = (t_limit - self.t) * self.dir;
            if remaining <= 0.0 {
                return Ok(());
            }
            let mut h = self.h.min(self.h_cap());
            if h >= remaining || (remaining - h) < 1e-12 * remaining {
                h = remaining;
            }
            if h < 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepUnderflow { time: self.t });
            }
            let hs = self.dir * h;
            let (t, y, k1) = (self.t, self.y, self.k1);
            let y2 = axpy(&y, &[(hs * A21, &k1)]);
            let k2 = (self.f)(t + C2 * hs, &y2);
            let y3 = axpy(&y, &[(hs * A31, &k1), (hs * A32, &k2)]);
            let k3 = (self.f)(t + C3 * hs, &y3);
            let y4 = axpy(&y, &[(hs * A41, &k1), (hs * A42, &k2), (hs * A43, &k3)]);
            let k4 = (self.f)(t + C4 * hs, &y4);
            let y5 = axpy(&y, &[(hs * A51, &k1), (hs * A52, &k2), (hs * A53, &k3), (hs * A54, &k4)]);
            let k5 = (self.f)(t + C5 * hs, &y5);
            let y6 = axpy(
                &y,
                &[(hs * A61, &k1), (hs * A62, &k2), (hs * A63, &k3), (hs * A64, &k4), (hs * A65, &k5)],
            );
            let t_new = if h == remaining { t_limit } else { t + hs };
            let k6 = (self.f)(t + hs, &y6);
            let y_new = axpy(
                &y,
                &[(hs * A71, &k1), (hs * A73, &k3), (hs * A74, &k4), (hs * A75, &k5), (hs * A76, &k6)],
            );
            let k7 = (self.f)(t_new, &y_new);
            self.evaluations += 6;

            let mut err = 0.0;
            for i in 0..N {
                let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sk = self.scale(y[i], y_new[i]);
                err += (e / sk).powi(2);
            }
            let err = (err / N as f64).sqrt();
            if !err.is_finite() {
                self.h = h * 0.1;
                self.rejected += 1;
                self.last_rejected = true;
                continue;
            }

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                let fac = (fac11 / self.facold.powf(BETA) / SAFE).clamp(FACC2, FACC1);
                let mut h_new = h / fac;
                self.facold = err.max(1e-4);
                if self.last_rejected {
                    h_new = h_new.min(h);
                }
                self.last_rejected = false;

                for i in 0..N {
                    let ydiff = y_new[i] - y[i];
                    let bspl = hs * k1[i] - ydiff;
                    self.cont[0][i] = y[i];
                    self.cont[1][i] = ydiff;
                    self.cont[2][i] = bspl;
                    self.cont[3][i] = ydiff - hs * k7[i] - bspl;
                    self.cont[4][i] = hs
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
                if y_new.iter().any(|v| !v.is_finite() || v.abs() > self.tol.overflow_guard) {
                    return Err(Error::Divergence { time: t_new });
                }
                self.t_old = t;
                self.h_old = hs;
                self.t = t_new;
                self.y = y_new;
                self.k1 = k7;
                self.h = h_new;
                self.accepted += 1;
                return Ok(());
            }
            self.h = h / (fac11 / SAFE).min(FACC1);
            self.rejected += 1;
            self.last_rejected = true;
        }
    }

    /// Continuous extension inside the last accepted step `[t_prev, t]`.
    pub fn dense(&self, t: f64) -> [f64; N] {
        if self.h_old == 0.0 {
            return self.y;
        }
        let th = (t - self.t_old) / self.h_old;
        let th1 = 1.0 - th;
        let c = &self.cont;
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = c[0][i] + th * (c[1][i] + th1 * (c[2][i] + th * (c[3][i] + th1 * c[4][i])));
        }
        out
    }

    /// Integrates to `t_end`, reporting the state at each requested sample
    /// time (which must be ordered in the integration direction).
    pub fn run_sampled(
        &mut self,
        t_end: f64,
        samples: &[f64],
        mut on_sample: impl FnMut(usize, f64, &[f64; N]),
    ) -> Result<()> {
        let mut next = 0;
        while next < samples.len() && (samples[next] - self.t) * self.dir <= 0.0 {
            on_sample(next, samples[next], &self.y);
            next += 1;
        }
        while (t_end - self.t) * self.dir > 0.0 {
            self.step(t_end)?;
            while next < samples.len() && (samples[next] - self.t) * self.dir <= 0.0 {
                let y = self.dense(samples[next]);
                on_sample(next, samples[next], &y);
                next += 1;
            }
        }
        Ok(())
    }
}

/// Integrates `f` from `t0` to `t_end` and returns the final state.
pub fn solve_to<const N: usize, F>(f: F, t0: f64, y0: [f64; N], t_end: f64, tol: Tolerances) -> Result<[f64; N]>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    let mut s = Dopri5::new(f, t0, y0, t_end - t0, tol);
    while (t_end - s.t()) * s.dir > 0.0 {
        s.step(t_end)?;
    }
    Ok(*s.y())
}

/// Uniformly spaced sample instants `t0, t0 + dt, …` covering `count` points.
pub fn uniform_times(t0: f64, dt: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| t0 + dt * i as f64).collect()
}
