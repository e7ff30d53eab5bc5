//! Rotating-frame quadrature dynamics of the antiresonant subsystem: frame
//! construction, the slow-flow equations, fixed points, small-signal gain and
//! Nyquist loop analysis for comb onset.
//!
//! With quadratures `(U, V)` relative to the reference frequency `ω_R`:
//!
//! ```text
//! V' = -[Ω_a - μ(3V² - U²)] U - δ_a [1 - χ(U² + V²)] V + (k_v V_0 / 2ω_R) sin(Δ_p t) + (k_p ω_x q_x0 / 2ω_R) sin(Δ_x t + φ)
//! U' = -δ_a [1 - χ(U² + V²)] U + [Ω_a - μ(3U² - V²)] V - (k_v V_0 / 2ω_R) cos(Δ_p t) - (k_p ω_x q_x0 / 2ω_R) cos(Δ_x t + φ)
//! ```

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CircuitParams;
use crate::ode::{Dopri5, Tolerances};

/// Minimum ratio between the reference frequency and the relative frequencies.
pub const FRAME_RATIO_MIN: f64 = 100.0;
/// Below this ratio the frame is accepted with a warning.
pub const FRAME_RATIO_WARN: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub omega_r: f64,
    pub n: u32,
    pub delta_x: f64,
    pub delta_p: f64,
}

impl FrameSpec {
    pub fn omega_p(&self) -> f64 {
        self.omega_r + self.delta_p
    }

    pub fn omega_x(&self) -> f64 {
        self.omega_r + self.delta_x
    }

    /// `ω_R` over the largest relative frequency.
    pub fn ratio(&self) -> f64 {
        self.omega_r / self.delta_x.abs().max(self.delta_p.abs())
    }

    pub fn needs_warning(&self) -> bool {
        self.ratio() < FRAME_RATIO_WARN
    }
}

/// Reference frame in which the pump sits at `n` times the signal's relative
/// frequency: `Δ_x = (ω_p − ω_x)/(n − 1)`, `ω_R = ω_x − Δ_x`, `Δ_p = nΔ_x`.
/// `n = 0` is the degenerate frame `ω_R = ω_p`.
pub fn build_frame(omega_p: f64, omega_x: f64, n: u32) -> Result<FrameSpec> {
    if !(omega_p.is_finite() && omega_x.is_finite() && omega_p > 0.0 && omega_x > 0.0) {
        return Err(Error::domain("frame frequencies must be finite and > 0"));
    }
    if n == 1 {
        return Err(Error::DegenerateFrame);
    }
    let delta_x = (omega_p - omega_x) / (n as f64 - 1.0);
    let omega_r = omega_x - delta_x;
    let frame = FrameSpec {
        omega_r,
        n,
        delta_x,
        delta_p: n as f64 * delta_x,
    };
    if omega_r <= 0.0 || frame.ratio() <= FRAME_RATIO_MIN {
        return Err(Error::domain(format!(
            "reference frequency {omega_r} is not >> relative frequencies (ratio {:.1}, need > {FRAME_RATIO_MIN})",
            frame.ratio()
        )));
    }
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedCoefficients {
    pub delta_a: f64,
    pub omega_a_sq: f64,
    pub k_v: f64,
    pub k_p: f64,
    pub chi: f64,
    pub mu: f64,
}

/// Slow-flow coefficients from the physical scales of the antiresonant
/// branch. `omega` is the frequency entering `χ` and `μ`.
pub fn derive_coefficients(l_p: f64, r_x: f64, z_i: f64, eta: f64, phi0: f64, omega: f64) -> Result<DerivedCoefficients> {
    for (name, v) in [("L_p", l_p), ("R_x", r_x), ("Z_i", z_i), ("eta", eta), ("phi0", phi0), ("omega", omega)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::domain(format!("{name} must be finite and > 0")));
        }
    }
    let s = eta.cbrt() * phi0.powf(-2.0 / 3.0);
    let omega_a_sq = 3.0 / l_p * s;
    let chi = 15.0 / 72.0 * omega * omega / (phi0 * phi0);
    Ok(DerivedCoefficients {
        delta_a: 1.5 * z_i * s,
        omega_a_sq,
        k_v: 3.0 * s,
        k_p: 3.0 * r_x / l_p * s,
        chi,
        mu: chi * omega_a_sq / omega,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowFlowParams {
    /// Antiresonance angular frequency; the frame detuning `Ω_a` follows from it.
    pub omega_a: f64,
    pub delta_a: f64,
    pub chi: f64,
    pub mu: f64,
    pub k_v: f64,
    pub k_p: f64,
    pub frame: FrameSpec,
    pub v0: f64,
    #[serde(default)]
    pub q_x0: f64,
    #[serde(default)]
    pub phi_sig: f64,
    /// Set when `μ = χ ω_a² / ω` holds by construction.
    #[serde(default)]
    pub derived: bool,
}

impl SlowFlowParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("omega_a", self.omega_a),
            ("delta_a", self.delta_a),
            ("chi", self.chi),
            ("mu", self.mu),
            ("k_v", self.k_v),
            ("k_p", self.k_p),
            ("v0", self.v0),
            ("q_x0", self.q_x0),
            ("phi_sig", self.phi_sig),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::validation(name, "must be finite"));
            }
        }
        if self.delta_a <= 0.0 {
            return Err(Error::validation("delta_a", "must be > 0"));
        }
        if self.chi < 0.0 {
            return Err(Error::validation("chi", "must be >= 0"));
        }
        if self.mu < 0.0 {
            return Err(Error::validation("mu", "must be >= 0"));
        }
        if self.omega_a <= 0.0 {
            return Err(Error::validation("omega_a", "must be > 0"));
        }
        if self.v0 < 0.0 || self.q_x0 < 0.0 {
            return Err(Error::validation(if self.v0 < 0.0 { "v0" } else { "q_x0" }, "must be >= 0"));
        }
        if !(self.frame.omega_r > 0.0) {
            return Err(Error::validation("frame.omega_r", "must be > 0"));
        }
        Ok(())
    }

    /// `Ω_a = (ω_a² − ω_R²) / (2 ω_R)`.
    pub fn big_omega_a(&self) -> f64 {
        let wr = self.frame.omega_r;
        (self.omega_a * self.omega_a - wr * wr) / (2.0 * wr)
    }

    pub fn pump_force(&self) -> f64 {
        self.k_v * self.v0 / (2.0 * self.frame.omega_r)
    }

    /// Forcing per unit signal amplitude `q_x0`.
    pub fn signal_force_per_unit(&self) -> f64 {
        self.k_p * self.frame.omega_x() / (2.0 * self.frame.omega_r)
    }

    pub fn with_frame(self, frame: FrameSpec) -> Self {
        Self { frame, ..self }
    }

    pub fn with_pump(self, v0: f64) -> Self {
        Self { v0, ..self }
    }

    pub fn with_signal(self, q_x0: f64, phi_sig: f64) -> Self {
        Self { q_x0, phi_sig, ..self }
    }

    /// Builds the parameter set from derived coefficients, keeping the
    /// `μ = χ ω_a² / ω` relation.
    pub fn from_derived(c: &DerivedCoefficients, frame: FrameSpec, v0: f64) -> Result<Self> {
        let sf = Self {
            omega_a: c.omega_a_sq.sqrt(),
            delta_a: c.delta_a,
            chi: c.chi,
            mu: c.mu,
            k_v: c.k_v,
            k_p: c.k_p,
            frame,
            v0,
            q_x0: 0.0,
            phi_sig: 0.0,
            derived: true,
        };
        sf.validate()?;
        Ok(sf)
    }

    /// Quadrature equations of the photonic charge obtained by averaging the
    /// circuit model in the given frame: `ω_a = ω_x`, `δ_a = γ_x − γ_c²/γ_p`,
    /// `k_v = 1 − γ_c/γ_p`. The cubic terms of the circuit have no
    /// counterpart here, so `χ` and `μ` are supplied by the caller; `k_p` is
    /// zero because the photonic charge is the state itself.
    pub fn averaged_from_circuit(params: &CircuitParams, frame: FrameSpec, v0: f64, chi: f64, mu: f64) -> Result<Self> {
        params.validate()?;
        let sf = Self {
            omega_a: params.omega_x,
            delta_a: params.linear_damping(),
            chi,
            mu,
            k_v: 1.0 - params.gamma_c / params.gamma_p,
            k_p: 0.0,
            frame,
            v0,
            q_x0: 0.0,
            phi_sig: 0.0,
            derived: false,
        };
        sf.validate()?;
        Ok(sf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quadratures {
    pub u: f64,
    pub v: f64,
}

impl Quadratures {
    pub const ZERO: Self = Self { u: 0.0, v: 0.0 };

    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn norm(&self) -> f64 {
        self.u.hypot(self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[inline]
fn unforced(u: f64, v: f64, sf: &SlowFlowParams) -> (f64, f64) {
    let w = sf.big_omega_a();
    let a2 = u * u + v * v;
    let damp = sf.delta_a * (1.0 - sf.chi * a2);
    let du = -damp * u + (w - sf.mu * (3.0 * u * u - v * v)) * v;
    let dv = -(w - sf.mu * (3.0 * v * v - u * u)) * u - damp * v;
    (du, dv)
}

/// Time derivative of the quadratures.
pub fn slowflow_rhs(q: Quadratures, t: f64, sf: &SlowFlowParams) -> Result<Quadratures> {
    if !q.is_finite() || !t.is_finite() {
        return Err(Error::domain("slow-flow state and time must be finite"));
    }
    Ok(rhs_raw(q.u, q.v, t, sf))
}

#[inline]
fn rhs_raw(u: f64, v: f64, t: f64, sf: &SlowFlowParams) -> Quadratures {
    let (mut du, mut dv) = unforced(u, v, sf);
    let fp = sf.pump_force();
    let fs = sf.signal_force_per_unit() * sf.q_x0;
    let (sp, cp) = (sf.frame.delta_p * t).sin_cos();
    let (ss, cs) = (sf.frame.delta_x * t + sf.phi_sig).sin_cos();
    dv += fp * sp + fs * ss;
    du -= fp * cp + fs * cs;
    Quadratures { u: du, v: dv }
}

/// Forcing averaged over its period: only components at zero relative
/// frequency survive.
fn rhs_averaged(u: f64, v: f64, sf: &SlowFlowParams) -> (f64, f64) {
    let (mut du, dv) = unforced(u, v, sf);
    if sf.frame.delta_p == 0.0 {
        du -= sf.pump_force();
    }
    let mut dv = dv;
    if sf.frame.delta_x == 0.0 {
        let fs = sf.signal_force_per_unit() * sf.q_x0;
        dv += fs * sf.phi_sig.sin();
        du -= fs * sf.phi_sig.cos();
    }
    (du, dv)
}

/// Analytic Jacobian `∂(U', V')/∂(U, V)`; the forcing does not depend on the state.
pub fn slowflow_jacobian(q: Quadratures, sf: &SlowFlowParams) -> [[f64; 2]; 2] {
    let (u, v) = (q.u, q.v);
    let (d, c, m, w) = (sf.delta_a, sf.chi, sf.mu, sf.big_omega_a());
    let damp = d * (1.0 - c * (u * u + v * v));
    [
        [-damp + 2.0 * d * c * u * u - 6.0 * m * u * v, w - 3.0 * m * u * u + 3.0 * m * v * v + 2.0 * d * c * u * v],
        [-w + 3.0 * m * (v * v - u * u) + 2.0 * d * c * u * v, -damp + 2.0 * d * c * v * v + 6.0 * m * u * v],
    ]
}

/// Central finite-difference Jacobian of the unforced flow.
pub fn slowflow_jacobian_fd(q: Quadratures, sf: &SlowFlowParams, h: f64) -> [[f64; 2]; 2] {
    let f = |u: f64, v: f64| unforced(u, v, sf);
    let (a, b) = (f(q.u + h, q.v), f(q.u - h, q.v));
    let (c, d) = (f(q.u, q.v + h), f(q.u, q.v - h));
    [
        [(a.0 - b.0) / (2.0 * h), (c.0 - d.0) / (2.0 * h)],
        [(a.1 - b.1) / (2.0 * h), (c.1 - d.1) / (2.0 * h)],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    /// `δ_a / (χ Υ²)`, accepted in [0.01, 100].
    pub damping_ratio: f64,
    /// `ω_R / (χ Υ²)`, must exceed 100.
    pub frame_ratio: f64,
    pub valid: bool,
    pub reason: Option<String>,
}

/// Checks `δ_a ∼ χΥ²` and `ω_R ≫ χΥ²` at the quadrature amplitude scale `Υ`.
pub fn check_regime(sf: &SlowFlowParams, upsilon: f64) -> RegimeReport {
    let nl = sf.chi * upsilon * upsilon;
    if !(nl > 0.0) {
        return RegimeReport {
            damping_ratio: f64::INFINITY,
            frame_ratio: f64::INFINITY,
            valid: false,
            reason: Some("no nonlinearity at this amplitude scale".into()),
        };
    }
    let damping_ratio = sf.delta_a / nl;
    let frame_ratio = sf.frame.omega_r / nl;
    let reason = if !(0.01..=100.0).contains(&damping_ratio) {
        Some(format!("delta_a / (chi Y^2) = {damping_ratio:.3e} outside [0.01, 100]"))
    } else if frame_ratio <= 100.0 {
        Some(format!("omega_R / (chi Y^2) = {frame_ratio:.3e} not above 100"))
    } else {
        None
    };
    RegimeReport {
        damping_ratio,
        frame_ratio,
        valid: reason.is_none(),
        reason,
    }
}

/// Integrates the slow flow from `(t0, q0)` and samples it at `times`.
pub fn integrate_slowflow(sf: &SlowFlowParams, q0: Quadratures, t0: f64, times: &[f64], tol: Tolerances) -> Result<Vec<Quadratures>> {
    sf.validate()?;
    let Some(&t_end) = times.last() else {
        return Ok(Vec::new());
    };
    let dir = if t_end < t0 { -1.0 } else { 1.0 };
    let f = |t: f64, y: &[f64; 2]| {
        let d = rhs_raw(y[0], y[1], t, sf);
        [d.u, d.v]
    };
    let mut solver = Dopri5::new(f, t0, [q0.u, q0.v], dir, tol);
    let mut out = vec![Quadratures::ZERO; times.len()];
    solver.run_sampled(t_end, times, |i, _, y| out[i] = Quadratures::new(y[0], y[1]))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    StableNode,
    StableFocus,
    UnstableNode,
    UnstableFocus,
    Saddle,
    /// Eigenvalues on the imaginary axis within rounding.
    Marginal,
}

impl Classification {
    pub fn from_eigenvalues(e: &[Complex64; 2]) -> Self {
        let scale = e.iter().map(|z| z.norm()).fold(1e-300, f64::max);
        let eps = 1e-12 * scale;
        let (r0, r1) = (e[0].re, e[1].re);
        let complex = e[0].im.abs() > eps;
        if r0.abs() <= eps || r1.abs() <= eps {
            Classification::Marginal
        } else if r0 * r1 < 0.0 {
            Classification::Saddle
        } else if r0 < 0.0 {
            if complex {
                Classification::StableFocus
            } else {
                Classification::StableNode
            }
        } else if complex {
            Classification::UnstableFocus
        } else {
            Classification::UnstableNode
        }
    }

    pub fn is_stable(self) -> bool {
        matches!(self, Classification::StableNode | Classification::StableFocus)
    }
}

fn eigenvalues2(j: &[[f64; 2]; 2]) -> [Complex64; 2] {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = Complex64::new(tr * tr / 4.0 - det, 0.0).sqrt();
    [tr / 2.0 + disc, tr / 2.0 - disc]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPoint {
    pub q: Quadratures,
    pub eigenvalues: [Complex64; 2],
    pub classification: Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    pub half_width: f64,
    pub count: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            count: 9,
        }
    }
}

fn fixed_point_at(q: Quadratures, sf: &SlowFlowParams) -> FixedPoint {
    let eigenvalues = eigenvalues2(&slowflow_jacobian(q, sf));
    FixedPoint {
        q,
        eigenvalues,
        classification: Classification::from_eigenvalues(&eigenvalues),
    }
}

fn newton2(mut q: Quadratures, sf: &SlowFlowParams) -> Option<Quadratures> {
    for _ in 0..60 {
        let (fu, fv) = rhs_averaged(q.u, q.v, sf);
        let scale = 1e-14 * (1.0 + q.norm()) * (sf.delta_a + sf.big_omega_a().abs());
        if fu.hypot(fv) <= scale {
            return Some(q);
        }
        let j = slowflow_jacobian(q, sf);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let du = (j[1][1] * fu - j[0][1] * fv) / det;
        let dv = (-j[1][0] * fu + j[0][0] * fv) / det;
        q = Quadratures::new(q.u - du, q.v - dv);
        if !q.is_finite() || q.norm() > 1e12 {
            return None;
        }
    }
    let (fu, fv) = rhs_averaged(q.u, q.v, sf);
    (fu.hypot(fv) <= 1e-10 * (1.0 + q.norm()) * (sf.delta_a + sf.big_omega_a().abs())).then_some(q)
}

/// Equilibria of the period-averaged flow, found by Newton from a square grid
/// of seeds and deduplicated.
pub fn fixed_points(sf: &SlowFlowParams, grid: &SearchGrid) -> Vec<FixedPoint> {
    let count = grid.count.max(1);
    let mut roots: Vec<Quadratures> = Vec::new();
    for i in 0..count {
        for j in 0..count {
            let coord = |k: usize| {
                if count == 1 {
                    0.0
                } else {
                    -grid.half_width + 2.0 * grid.half_width * k as f64 / (count - 1) as f64
                }
            };
            if let Some(r) = newton2(Quadratures::new(coord(i), coord(j)), sf) {
                if roots.iter().all(|o| (o.u - r.u).hypot(o.v - r.v) > 1e-6) {
                    roots.push(r);
                }
            }
        }
    }
    roots.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.u.total_cmp(&b.u)));
    roots.into_iter().map(|q| fixed_point_at(q, sf)).collect()
}

/// Pumped steady state of the slow flow in its frame: a fixed point when the
/// pump is at zero relative frequency, otherwise a periodic orbit at `Δ_p`
/// stored as Fourier coefficients `(U_k, V_k)`, `k = 0..=K`.
#[derive(Debug, Clone, Serialize)]
pub struct PumpedState {
    pub v0: f64,
    pub omega: f64,
    pub u: Vec<Complex64>,
    pub v: Vec<Complex64>,
    /// Largest Floquet multiplier magnitude (periodic case) or `exp(T max Re λ)` with `T = 1`.
    pub max_multiplier: f64,
    pub stable: bool,
}

impl PumpedState {
    pub fn mean(&self) -> Quadratures {
        Quadratures::new(self.u[0].re, self.v[0].re)
    }

    pub fn at(&self, t: f64) -> Quadratures {
        let ev = |c: &[Complex64]| -> f64 {
            c.iter()
                .enumerate()
                .map(|(k, ck)| (ck * Complex64::from_polar(1.0, k as f64 * self.omega * t)).re)
                .sum()
        };
        Quadratures::new(ev(&self.u), ev(&self.v))
    }
}

/// Harmonics kept for the pumped orbit in the rotating frame.
pub const SLOWFLOW_HARMONICS: usize = 5;

struct OrbitHb<'a> {
    sf: &'a SlowFlowParams,
    k: usize,
    points: usize,
    omega: f64,
}

impl OrbitHb<'_> {
    fn synth(&self, c: &[f64], j: usize) -> (f64, f64) {
        let th = 2.0 * PI * j as f64 / self.points as f64;
        let (mut x, mut dx) = (c[0], 0.0);
        for k in 1..=self.k {
            let (s, co) = (k as f64 * th).sin_cos();
            x += c[2 * k - 1] * co + c[2 * k] * s;
            dx += k as f64 * self.omega * (-c[2 * k - 1] * s + c[2 * k] * co);
        }
        (x, dx)
    }

    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let w = 2 * self.k + 1;
        let sf_nosig = self.sf.with_signal(0.0, 0.0);
        let mut ru = vec![0.0; self.points];
        let mut rv = vec![0.0; self.points];
        for j in 0..self.points {
            let (u, du) = self.synth(&z[..w], j);
            let (v, dv) = self.synth(&z[w..], j);
            let t = 2.0 * PI * j as f64 / (self.points as f64 * self.omega);
            let f = rhs_raw(u, v, t, &sf_nosig);
            ru[j] = du - f.u;
            rv[j] = dv - f.v;
        }
        let mut out = vec![0.0; 2 * w];
        for (off, r) in [(0, &ru), (w, &rv)] {
            out[off] = r.iter().sum::<f64>() / self.points as f64;
            for k in 1..=self.k {
                let (mut c, mut s) = (0.0, 0.0);
                for (j, rj) in r.iter().enumerate() {
                    let th = 2.0 * PI * (k * j) as f64 / self.points as f64;
                    c += rj * th.cos();
                    s += rj * th.sin();
                }
                out[off + 2 * k - 1] = 2.0 * c / self.points as f64;
                out[off + 2 * k] = 2.0 * s / self.points as f64;
            }
        }
        out
    }
}

fn newton_fd(f: impl Fn(&[f64]) -> Vec<f64>, mut z: Vec<f64>, typical: f64, tol: f64) -> Option<Vec<f64>> {
    let m = z.len();
    let mut r = f(&z);
    let mut rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..50 {
        if rn <= tol {
            return Some(z);
        }
        let scale = z.iter().fold(typical, |a, v| a.max(v.abs()));
        let mut jac = DMatrix::zeros(m, m);
        let mut zp = z.clone();
        for c in 0..m {
            let h = 1e-7 * z[c].abs().max(1e-3 * scale);
            zp[c] = z[c] + h;
            let rp = f(&zp);
            for row in 0..m {
                jac[(row, c)] = (rp[row] - r[row]) / h;
            }
            zp[c] = z[c];
        }
        let step = jac.lu().solve(&DVector::from_column_slice(&r))?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a - lambda * d).collect();
            let rt = f(&trial);
            let nt = rt.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nt.is_finite() && (nt < (1.0 - 1e-4 * lambda) * rn || lambda < 1e-3) {
                z = trial;
                r = rt;
                rn = nt;
                break;
            }
            lambda *= 0.5;
        }
    }
    (rn <= tol * 1e3).then_some(z)
}

fn pumped_state_from(sf: &SlowFlowParams, seed: &PumpedState) -> Option<PumpedState> {
    let omega = sf.frame.delta_p.abs();
    let scale = sf.pump_force().max(1e-300);
    if omega == 0.0 {
        let q = newton2(seed.mean(), sf)?;
        let e = eigenvalues2(&slowflow_jacobian(q, sf));
        let growth = e[0].re.max(e[1].re);
        return Some(PumpedState {
            v0: sf.v0,
            omega: 0.0,
            u: vec![Complex64::new(q.u, 0.0)],
            v: vec![Complex64::new(q.v, 0.0)],
            max_multiplier: growth.exp(),
            stable: growth < 0.0,
        });
    }
    let k = SLOWFLOW_HARMONICS;
    let hb = OrbitHb {
        sf,
        k,
        points: 4 * (k + 1),
        omega,
    };
    let mut z = Vec::with_capacity(4 * k + 2);
    for c in [&seed.u, &seed.v] {
        z.push(c.first().map_or(0.0, |x| x.re));
        for i in 1..=k {
            let ck = c.get(i).copied().unwrap_or_default();
            z.push(ck.re);
            z.push(-ck.im);
        }
    }
    let typical = scale / omega.max(sf.delta_a.abs());
    let z = newton_fd(|z| hb.residual(z), z, typical, 1e-12 * scale)?;
    let w = 2 * k + 1;
    let to_c = |c: &[f64]| -> Vec<Complex64> {
        let mut out = vec![Complex64::new(c[0], 0.0)];
        for i in 1..=k {
            out.push(Complex64::new(c[2 * i - 1], -c[2 * i]));
        }
        out
    };
    let mut st = PumpedState {
        v0: sf.v0,
        omega,
        u: to_c(&z[..w]),
        v: to_c(&z[w..]),
        max_multiplier: f64::NAN,
        stable: false,
    };
    let mu = orbit_multiplier(sf, &st).ok()?;
    st.max_multiplier = mu;
    st.stable = mu < 1.0;
    Some(st)
}

fn orbit_multiplier(sf: &SlowFlowParams, st: &PumpedState) -> Result<f64> {
    let period = 2.0 * PI / st.omega;
    let sf0 = sf.with_signal(0.0, 0.0);
    let f = |t: f64, y: &[f64; 6]| {
        let d = rhs_raw(y[0], y[1], t, &sf0);
        let j = slowflow_jacobian(Quadratures::new(y[0], y[1]), &sf0);
        [
            d.u,
            d.v,
            j[0][0] * y[2] + j[0][1] * y[3],
            j[1][0] * y[2] + j[1][1] * y[3],
            j[0][0] * y[4] + j[0][1] * y[5],
            j[1][0] * y[4] + j[1][1] * y[5],
        ]
    };
    let q0 = st.at(0.0);
    let mut solver = Dopri5::new(f, 0.0, [q0.u, q0.v, 1.0, 0.0, 0.0, 1.0], 1.0, Tolerances::new(1e-10, 1e-14));
    while solver.t() < period {
        solver.step(period)?;
    }
    let y = solver.y();
    let m = Matrix2::new(y[2], y[4], y[3], y[5]);
    Ok(m.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max))
}

/// Follows the pumped state from the unpumped origin up to `sf.v0` and
/// requires it to be stable there.
pub fn pumped_state(sf: &SlowFlowParams) -> Result<PumpedState> {
    sf.validate()?;
    let steps = 24;
    let mut st = PumpedState {
        v0: 0.0,
        omega: sf.frame.delta_p.abs(),
        u: vec![Complex64::default()],
        v: vec![Complex64::default()],
        max_multiplier: 0.0,
        stable: true,
    };
    for s in 1..=steps {
        let v0 = sf.v0 * s as f64 / steps as f64;
        st = pumped_state_from(&sf.with_pump(v0), &st).ok_or(Error::NoPumpedState { pump: sf.v0 })?;
    }
    if !st.stable {
        return Err(Error::NoPumpedState { pump: sf.v0 });
    }
    Ok(st)
}

/// Complex quadrature response `(Ũ, Ṽ)` at relative frequency `delta` to the
/// signal forcing with unit `q_x0` and zero phase, linearized about `st`.
pub fn quadrature_response(sf: &SlowFlowParams, st: &PumpedState, delta: f64, n_mix: usize) -> Result<[Complex64; 2]> {
    let c = sf.signal_force_per_unit();
    // sin θ = Re(-i e^{iθ}), -cos θ = Re(-e^{iθ})
    let force = [Complex64::new(-c, 0.0), Complex64::new(0.0, -c)];
    let i = Complex64::i();
    if st.omega == 0.0 {
        let j = slowflow_jacobian(st.mean(), sf);
        let a = Matrix2::new(
            i * delta - j[0][0],
            Complex64::new(-j[0][1], 0.0),
            Complex64::new(-j[1][0], 0.0),
            i * delta - j[1][1],
        );
        let x = a
            .lu()
            .solve(&nalgebra::Vector2::new(force[0], force[1]))
            .ok_or(Error::BifurcationProximity { condition: f64::INFINITY })?;
        return Ok([x[0], x[1]]);
    }
    // Fourier coefficients of the Jacobian along the orbit
    let k = st.u.len() - 1;
    let samples = 8 * (k + 1);
    let jac: Vec<[[f64; 2]; 2]> = (0..samples)
        .map(|l| slowflow_jacobian(st.at(2.0 * PI * l as f64 / (samples as f64 * st.omega)), sf))
        .collect();
    let table: Vec<[[Complex64; 2]; 2]> = (-(2 * k as i64)..=2 * k as i64)
        .map(|h| {
            let mut c = [[Complex64::default(); 2]; 2];
            for (l, m) in jac.iter().enumerate() {
                let e = Complex64::from_polar(1.0 / samples as f64, -2.0 * PI * (h * l as i64) as f64 / samples as f64);
                for r in 0..2 {
                    for col in 0..2 {
                        c[r][col] += m[r][col] * e;
                    }
                }
            }
            c
        })
        .collect();
    let coef = |h: i64, r: usize, col: usize| -> Complex64 {
        if h.unsigned_abs() as usize > 2 * k {
            return Complex64::default();
        }
        table[(h + 2 * k as i64) as usize][r][col]
    };
    let mm = n_mix as i64;
    let size = 2 * (2 * n_mix + 1);
    let idx = |m: i64| 2 * (m + mm) as usize;
    let mut a = DMatrix::<Complex64>::zeros(size, size);
    let mut b = DVector::<Complex64>::zeros(size);
    for m in -mm..=mm {
        let w = delta + m as f64 * st.omega;
        for r in 0..2 {
            a[(idx(m) + r, idx(m) + r)] += i * w;
            for l in -mm..=mm {
                for col in 0..2 {
                    a[(idx(m) + r, idx(l) + col)] -= coef(m - l, r, col);
                }
            }
        }
    }
    b[idx(0)] = force[0];
    b[idx(0) + 1] = force[1];
    let x = a.lu().solve(&b).ok_or(Error::BifurcationProximity { condition: f64::INFINITY })?;
    Ok([x[idx(0)], x[idx(0) + 1]])
}

#[derive(Debug, Clone, Serialize)]
pub struct GainCurve {
    pub pump: f64,
    pub deltas: Vec<f64>,
    pub gains: Vec<f64>,
}

impl GainCurve {
    pub fn peak(&self) -> (f64, f64) {
        self.deltas
            .iter()
            .zip(&self.gains)
            .map(|(d, g)| (*d, *g))
            .fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

/// Writes `delta,gain_db,pump_power` rows for every curve.
pub fn write_gain_csv(curves: &[GainCurve], mut w: impl Write) -> Result<()> {
    writeln!(w, "delta,gain_db,pump_power")?;
    for c in curves {
        for (d, g) in c.deltas.iter().zip(&c.gains) {
            writeln!(w, "{d:e},{},{:e}", 20.0 * g.max(1e-300).log10(), c.pump)?;
        }
    }
    Ok(())
}

/// `G_s(Δ) = √(|Ũ|² + |Ṽ|²) / q_x0` about the pumped state, one curve per pump amplitude.
pub fn small_signal_gain(sf: &SlowFlowParams, pumps: &[f64], deltas: &[f64]) -> Result<Vec<GainCurve>> {
    sf.validate()?;
    if sf.k_p == 0.0 {
        return Err(Error::validation("k_p", "signal forcing gain is zero, the gain is undefined"));
    }
    let mut curves = Vec::with_capacity(pumps.len());
    for &pump in pumps {
        let sfp = sf.with_pump(pump);
        let st = pumped_state(&sfp).map_err(|_| Error::NoPumpedState { pump })?;
        let n_mix = 2 * SLOWFLOW_HARMONICS;
        let gains = deltas
            .iter()
            .map(|&d| quadrature_response(&sfp, &st, d, n_mix).map(|x| x[0].norm().hypot(x[1].norm())))
            .collect::<Result<Vec<f64>>>()?;
        curves.push(GainCurve {
            pump,
            deltas: deltas.to_vec(),
            gains,
        });
    }
    Ok(curves)
}

/// The photonic resonator closing the loop: `H_res(Δ) = κ / (γ_x + i(Δ − Δ_x))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonatorSpec {
    pub gamma_x: f64,
    pub omega_x: f64,
    pub kappa: f64,
}

impl ResonatorSpec {
    pub fn response(&self, delta: f64, delta_x: f64) -> Complex64 {
        self.kappa / Complex64::new(self.gamma_x, delta - delta_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NyquistResult {
    pub n: u32,
    /// Net encirclements of −1 by the open-loop locus.
    pub encirclements: i64,
    pub oscillating: bool,
    /// `−20 log10 |L|` at the phase crossover closest to instability.
    pub gain_margin_db: Option<f64>,
    /// `180° − |arg L|` at the gain crossover closest to instability.
    pub phase_margin_deg: Option<f64>,
    pub peak_loop_gain: f64,
}

impl NyquistResult {
    /// Magnitude of the (in)stability margin in dB.
    pub fn margin_magnitude_db(&self) -> f64 {
        self.gain_margin_db.map_or(f64::INFINITY, f64::abs)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub fixed_point: Quadratures,
    pub eigenvalues: [Complex64; 2],
    pub classification: Classification,
    pub pumped_multiplier: f64,
    pub nyquist: Vec<NyquistResult>,
}

impl StabilityReport {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(e.into()))
    }
}

/// Loop gain `L(Δ)` on the grid, refined where the phase of `1 + L` or
/// the magnitude crossing of `|L| = 1` is poorly resolved.
fn refined_locus(l: impl Fn(f64) -> Result<Complex64>, deltas: &[f64]) -> Result<Vec<(f64, Complex64)>> {
    let mut pts: Vec<(f64, Complex64)> = deltas.iter().map(|&d| l(d).map(|v| (d, v))).collect::<Result<_>>()?;
    for _ in 0..12 {
        let mut out = Vec::with_capacity(pts.len() * 2);
        let mut changed = false;
        for w in pts.windows(2) {
            out.push(w[0]);
            let (a, b) = (w[0].1, w[1].1);
            let dphi = ((1.0 + b) / (1.0 + a)).arg().abs();
            let crosses = (a.norm() - 1.0) * (b.norm() - 1.0) < 0.0;
            if dphi > 0.2 || (crosses && (a - b).norm() > 1e-3) {
                let mid = 0.5 * (w[0].0 + w[1].0);
                if mid > w[0].0 && mid < w[1].0 {
                    out.push((mid, l(mid)?));
                    changed = true;
                }
            }
        }
        out.push(*pts.last().unwrap());
        pts = out;
        if !changed {
            break;
        }
    }
    Ok(pts)
}

fn nyquist_metrics(n: u32, locus: &[(f64, Complex64)]) -> NyquistResult {
    let mut winding = 0.0;
    let closed = locus.iter().chain(std::iter::once(&locus[0]));
    let mut prev: Option<Complex64> = None;
    for (_, l) in closed {
        let z = 1.0 + l;
        if let Some(p) = prev {
            winding += (z / p).arg();
        }
        prev = Some(z);
    }
    let encirclements = (winding / (2.0 * PI)).round() as i64;
    let mut gm: Option<f64> = None;
    let mut pm: Option<f64> = None;
    for w in locus.windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        if a.im * b.im <= 0.0 && a.im != b.im {
            let s = a.im / (a.im - b.im);
            let x = a + (b - a) * s;
            if x.re < 0.0 {
                let m = -20.0 * x.norm().log10();
                gm = Some(gm.map_or(m, |g: f64| g.min(m)));
            }
        }
        let (ma, mb) = (a.norm() - 1.0, b.norm() - 1.0);
        if ma * mb <= 0.0 && ma != mb {
            let s = ma / (ma - mb);
            let x = a + (b - a) * s;
            let m = 180.0 - x.arg().abs().to_degrees();
            pm = Some(pm.map_or(m, |p: f64| p.min(m)));
        }
    }
    NyquistResult {
        n,
        encirclements,
        oscillating: encirclements != 0,
        gain_margin_db: gm,
        phase_margin_deg: pm,
        peak_loop_gain: locus.iter().map(|(_, l)| l.norm()).fold(0.0, f64::max),
    }
}

/// Open-loop gain `G(Δ) · H_res(Δ)` where `G` is the complex small-signal
/// gain from the signal port to `Ũ − iṼ`.
pub fn open_loop(sf: &SlowFlowParams, st: &PumpedState, resonator: &ResonatorSpec, delta: f64) -> Result<Complex64> {
    let x = quadrature_response(sf, st, delta, 2 * SLOWFLOW_HARMONICS)?;
    let g = 0.5 * (x[0] - Complex64::i() * x[1]);
    Ok(g * resonator.response(delta, sf.frame.delta_x))
}

/// Nyquist analysis of the antiresonance/resonator loop in the frame of order `n`.
pub fn loop_analysis(sf: &SlowFlowParams, resonator: &ResonatorSpec, n: u32, deltas: &[f64]) -> Result<StabilityReport> {
    sf.validate()?;
    if deltas.len() < 2 || deltas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("detuning grid must be strictly increasing"));
    }
    let max_gap = deltas.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let per_linewidth = resonator.gamma_x / max_gap;
    if per_linewidth < 10.0 * (1.0 - 1e-9) {
        return Err(Error::Resolution {
            points_per_linewidth: per_linewidth,
        });
    }
    let frame = build_frame(sf.frame.omega_p(), resonator.omega_x, n)?;
    let sfn = sf.with_frame(frame);
    let st = pumped_state(&sfn)?;
    let locus = refined_locus(|d| open_loop(&sfn, &st, resonator, d), deltas)?;
    let fp = st.mean();
    let eigenvalues = eigenvalues2(&slowflow_jacobian(fp, &sfn));
    Ok(StabilityReport {
        fixed_point: fp,
        eigenvalues,
        classification: Classification::from_eigenvalues(&eigenvalues),
        pumped_multiplier: st.max_multiplier,
        nyquist: vec![nyquist_metrics(n, &locus)],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoexistenceCell {
    pub pump: f64,
    pub oscillating: Vec<u32>,
    pub results: Vec<NyquistResult>,
    /// Orders whose pumped state could not be established.
    pub failed: Vec<u32>,
}

/// Loop analysis for every `(pump, n)` pair. The pump frequency is taken
/// from the base frame; each order gets its own frame.
pub fn coexistence_scan(
    sf: &SlowFlowParams,
    resonator: &ResonatorSpec,
    orders: &[u32],
    pumps: &[f64],
    deltas: &[f64],
) -> Result<Vec<CoexistenceCell>> {
    if orders.contains(&1) {
        return Err(Error::DegenerateFrame);
    }
    let mut cells = Vec::with_capacity(pumps.len());
    for &pump in pumps {
        let mut cell = CoexistenceCell {
            pump,
            oscillating: Vec::new(),
            results: Vec::new(),
            failed: Vec::new(),
        };
        for &n in orders {
            match loop_analysis(&sf.with_pump(pump), resonator, n, deltas) {
                Ok(rep) => {
                    let r = rep.nyquist[0];
                    if r.oscillating {
                        cell.oscillating.push(n);
                    }
                    cell.results.push(r);
                }
                Err(Error::NoPumpedState { .. }) => cell.failed.push(n),
                Err(e) => return Err(e),
            }
        }
        cells.push(cell);
    }
    Ok(cells)
}

/// Writes `pump,n,oscillating,gain_margin_db,phase_margin_deg` rows.
pub fn write_coexistence_csv(cells: &[CoexistenceCell], mut w: impl Write) -> Result<()> {
    writeln!(w, "pump,n,oscillating,gain_margin_db,phase_margin_deg")?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    for c in cells {
        for r in &c.results {
            writeln!(w, "{},{},{},{},{}", c.pump, r.n, r.oscillating, opt(r.gain_margin_db), opt(r.phase_margin_deg))?;
        }
    }
    Ok(())
}
