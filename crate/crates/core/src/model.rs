//! The lumped-circuit resonator model: a series-resonant photonic branch in
//! parallel with a dissipative branch carrying a cubic nonlinear capacitance.
//!
//! In normalized variables the equations of motion read
//!
//! ```text
//! q_x'' + 2 γ_x q_x' + ω_x² q_x + 2 γ_c q_p' = V(t)
//!         2 γ_p q_p' + η q_p³   + 2 γ_c q_x' = V(t)
//! ```
//!
//! The material equation is first order, so the state is `(q_x, q_x', q_p)`.

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// The model constants. All rates are normalized angular frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    pub gamma_x: f64,
    pub omega_x: f64,
    pub gamma_c: f64,
    pub gamma_p: f64,
    pub eta: f64,
}

impl CircuitParams {
    pub fn new(gamma_x: f64, omega_x: f64, gamma_c: f64, gamma_p: f64, eta: f64) -> Result<Self> {
        let p = Self {
            gamma_x,
            omega_x,
            gamma_c,
            gamma_p,
            eta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks the parameter invariants, reporting the first offending field name.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(field, msg)| Error::validation(field, msg))
    }

    pub(crate) fn check(&self) -> std::result::Result<(), (&'static str, &'static str)> {
        let fields = [
            ("gamma_x", self.gamma_x),
            ("omega_x", self.omega_x),
            ("gamma_c", self.gamma_c),
            ("gamma_p", self.gamma_p),
            ("eta", self.eta),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err((name, "must be finite"));
            }
        }
        if self.gamma_x <= 0.0 {
            return Err(("gamma_x", "must be > 0"));
        }
        if self.omega_x <= 0.0 {
            return Err(("omega_x", "must be > 0"));
        }
        if self.gamma_c < 0.0 {
            return Err(("gamma_c", "must be >= 0"));
        }
        if self.gamma_p <= 0.0 {
            return Err(("gamma_p", "must be > 0 (gamma_p = 0 makes the material equation algebraic)"));
        }
        if self.eta < 0.0 {
            return Err(("eta", "must be >= 0"));
        }
        Ok(())
    }

    /// Same parameters with the nonlinearity switched off.
    pub fn linearized(&self) -> Self {
        Self { eta: 0.0, ..*self }
    }

    /// Net damping of the photonic mode in the linear limit, `γ_x − γ_c²/γ_p`.
    pub fn linear_damping(&self) -> f64 {
        self.gamma_x - self.gamma_c * self.gamma_c / self.gamma_p
    }
}

/// One sinusoidal drive component `amplitude · sin(omega t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub amplitude: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Tone {
    pub fn new(amplitude: f64, omega: f64) -> Self {
        Self {
            amplitude,
            omega,
            phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }
}

/// Superposition of drive tones. An empty tone list is zero drive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSpec {
    pub tones: Vec<Tone>,
}

impl DriveSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(amplitude: f64, omega: f64) -> Self {
        Self {
            tones: vec![Tone::new(amplitude, omega)],
        }
    }

    pub fn from_tones(tones: Vec<Tone>) -> Self {
        Self { tones }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tones.iter().enumerate() {
            if !(t.amplitude.is_finite() && t.omega.is_finite() && t.phase.is_finite()) {
                return Err(Error::validation(format!("drive.tones[{i}]"), "must be finite"));
            }
            if t.amplitude < 0.0 {
                return Err(Error::validation(format!("drive.tones[{i}].amplitude"), "must be >= 0"));
            }
            if t.omega <= 0.0 {
                return Err(Error::validation(format!("drive.tones[{i}].omega"), "must be > 0"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn voltage(&self, t: f64) -> f64 {
        self.tones
            .iter()
            .map(|tone| tone.amplitude * (tone.omega * t + tone.phase).sin())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tones.iter().all(|t| t.amplitude == 0.0)
    }

    pub fn max_omega(&self) -> Option<f64> {
        self.tones.iter().map(|t| t.omega).reduce(f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub q_x: f64,
    pub v_x: f64,
    pub q_p: f64,
}

impl StateVector {
    pub const ZERO: Self = Self {
        q_x: 0.0,
        v_x: 0.0,
        q_p: 0.0,
    };

    pub fn new(q_x: f64, v_x: f64, q_p: f64) -> Self {
        Self { q_x, v_x, q_p }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.q_x, self.v_x, self.q_p]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.q_x.is_finite() && self.v_x.is_finite() && self.q_p.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.q_x * self.q_x + self.v_x * self.v_x + self.q_p * self.q_p).sqrt()
    }
}

/// Which state component an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    #[default]
    QX,
    VX,
    QP,
}

impl Signal {
    pub fn pick(self, s: &StateVector) -> f64 {
        match self {
            Signal::QX => s.q_x,
            Signal::VX => s.v_x,
            Signal::QP => s.q_p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub kinetic: f64,
    pub potential: f64,
    pub quartic: f64,
    pub total: f64,
}

/// Right-hand side of the first-order system at a known drive voltage.
#[inline]
pub fn rhs_at(y: &[f64; 3], volts: f64, p: &CircuitParams) -> [f64; 3] {
    let [q_x, v_x, q_p] = *y;
    let w_p = (volts - p.eta * q_p * q_p * q_p - 2.0 * p.gamma_c * v_x) / (2.0 * p.gamma_p);
    let a_x = volts - 2.0 * p.gamma_x * v_x - p.omega_x * p.omega_x * q_x - 2.0 * p.gamma_c * w_p;
    [v_x, a_x, w_p]
}

/// Jacobian of the first-order system with respect to the state.
#[inline]
pub fn state_jacobian(y: &[f64; 3], p: &CircuitParams) -> [[f64; 3]; 3] {
    let stiff = 3.0 * p.eta * y[2] * y[2] / (2.0 * p.gamma_p);
    let cross = p.gamma_c / p.gamma_p;
    [
        [0.0, 1.0, 0.0],
        [
            -p.omega_x * p.omega_x,
            -2.0 * p.gamma_x + 2.0 * p.gamma_c * cross,
            2.0 * p.gamma_c * stiff,
        ],
        [0.0, -cross, -stiff],
    ]
}

/// Time derivative of the state, `(q_x', q_x'', q_p')`.
pub fn eval_rhs(state: &StateVector, t: f64, params: &CircuitParams, drive: &DriveSpec) -> Result<StateVector> {
    if !state.is_finite() {
        return Err(Error::domain("state has non-finite components"));
    }
    if !t.is_finite() {
        return Err(Error::domain("time must be finite"));
    }
    params.validate()?;
    let d = rhs_at(&state.to_array(), drive.voltage(t), params);
    Ok(StateVector::from_array(d))
}

/// Stored energy in normalized form: `½v_x² + ½ω_x²q_x² + (η/4)q_p⁴`.
pub fn energy(state: &StateVector, params: &CircuitParams) -> Result<EnergyBreakdown> {
    if !state.is_finite() {
        return Err(Error::domain("state has non-finite components"));
    }
    let kinetic = 0.5 * state.v_x * state.v_x;
    let potential = 0.5 * params.omega_x * params.omega_x * state.q_x * state.q_x;
    let quartic = 0.25 * params.eta * state.q_p.powi(4);
    Ok(EnergyBreakdown {
        kinetic,
        potential,
        quartic,
        total: kinetic + potential + quartic,
    })
}

/// Closed-form response of the linearized model to a unit drive at `omega`.
///
/// Phasors use the `e^{iωt}` convention: a drive `sin(ωt)` produces
/// `q_x(t) = Im(Q_x e^{iωt})`.
pub fn linear_transfer(params: &CircuitParams, omega: f64) -> Result<(Complex64, Complex64)> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::domain("linear_transfer requires omega > 0"));
    }
    params.validate()?;
    let p = params;
    let i = Complex64::i();
    let ratio = p.gamma_c / p.gamma_p;
    let denom = Complex64::new(p.omega_x * p.omega_x - omega * omega, 0.0)
        + 2.0 * i * omega * (p.gamma_x - p.gamma_c * ratio);
    let q_x = Complex64::new(1.0 - ratio, 0.0) / denom;
    let q_p = (1.0 - 2.0 * i * p.gamma_c * omega * q_x) / (2.0 * i * p.gamma_p * omega);
    Ok((q_x, q_p))
}
