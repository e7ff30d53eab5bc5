//! Scenario documents: a versioned TOML description of one experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic_balance::HbOptions;
use crate::model::{CircuitParams, DriveSpec, Signal, Tone};
use crate::slowflow::{build_frame, derive_coefficients, ResonatorSpec, SearchGrid, SlowFlowParams};
use crate::spectral::Window;
use crate::sweep::{Axis, SweepPlan};
use crate::timedomain::SettleOptions;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    Hb,
    Slowflow,
    Sweep,
    Spectrum,
    Probe,
    Coexist,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Hb => "hb",
            Kind::Slowflow => "slowflow",
            Kind::Sweep => "sweep",
            Kind::Spectrum => "spectrum",
            Kind::Probe => "probe",
            Kind::Coexist => "coexist",
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Always true: nothing in a run depends on randomness or scheduling.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CircuitParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drive: Option<DriveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slowflow_model: Option<SlowFlowModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resonator: Option<ResonatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hb: Option<HbConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slowflow: Option<SlowflowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coexist: Option<CoexistConfig>,
}

/// Physical scales from which the slow-flow coefficients are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveScales {
    pub l_p: f64,
    pub r_x: f64,
    pub z_i: f64,
    pub eta: f64,
    pub phi0: f64,
    pub omega: f64,
}

/// Slow-flow parameters in scenario form: explicit coefficients or derived
/// ones, plus the frame given by pump frequency, signal frequency and order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowFlowModel {
    pub omega_p: f64,
    pub omega_x: f64,
    pub n: u32,
    pub v0: f64,
    #[serde(default)]
    pub q_x0: f64,
    #[serde(default)]
    pub phi_sig: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derive: Option<DeriveScales>,
}

impl SlowFlowModel {
    pub fn params(&self) -> Result<SlowFlowParams> {
        let frame = build_frame(self.omega_p, self.omega_x, self.n)?;
        let explicit = [
            ("omega_a", self.omega_a),
            ("delta_a", self.delta_a),
            ("chi", self.chi),
            ("mu", self.mu),
            ("k_v", self.k_v),
            ("k_p", self.k_p),
        ];
        let sf = match self.derive {
            Some(d) => {
                if let Some((name, _)) = explicit.iter().find(|(_, v)| v.is_some()) {
                    return Err(Error::validation(*name, "give either explicit coefficients or a derive table, not both"));
                }
                let c = derive_coefficients(d.l_p, d.r_x, d.z_i, d.eta, d.phi0, d.omega)
                    .map_err(|e| Error::validation("derive", e.to_string()))?;
                SlowFlowParams::from_derived(&c, frame, self.v0)?
            }
            None => {
                let get = |name: &str, v: Option<f64>| v.ok_or_else(|| Error::validation(name, "required"));
                SlowFlowParams {
                    omega_a: get("omega_a", self.omega_a)?,
                    delta_a: get("delta_a", self.delta_a)?,
                    chi: get("chi", self.chi)?,
                    mu: get("mu", self.mu)?,
                    k_v: get("k_v", self.k_v)?,
                    k_p: get("k_p", self.k_p)?,
                    frame,
                    v0: self.v0,
                    q_x0: 0.0,
                    phi_sig: 0.0,
                    derived: false,
                }
            }
        };
        let sf = sf.with_signal(self.q_x0, self.phi_sig);
        sf.validate()?;
        Ok(sf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub settle: SettleOptions,
    #[serde(default)]
    pub initial: [f64; 3],
    #[serde(default)]
    pub window: Window,
    #[serde(default = "default_floor")]
    pub peak_floor: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            settle: SettleOptions::default(),
            initial: [0.0; 3],
            window: Window::default(),
            peak_floor: default_floor(),
        }
    }
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            settle: SettleOptions::default(),
            window: Window::default(),
            signal: default_signal(),
            peak_floor: default_floor(),
            comb_half_width: default_half_width(),
            omega_x_eff: None,
            seed_q_x: 0.0,
        }
    }
}

fn default_floor() -> f64 {
    crate::spectral::DEFAULT_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HbConfig {
    #[serde(default)]
    pub options: HbOptions,
    /// Continuation schedule in drive amplitude; the drive's own amplitude when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Axis>,
    #[serde(default)]
    pub floquet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlowflowConfig {
    /// Pump amplitudes for the small-signal gain curves.
    pub pumps: Vec<f64>,
    pub deltas: Axis,
    #[serde(default)]
    pub grid: SearchGrid,
    /// Quadrature amplitude scale for the regime check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<f64>,
    /// Comb orders for loop analysis; needs a resonator block.
    #[serde(default)]
    pub loop_orders: Vec<u32>,
    /// Optional integration of the slow flow from the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub plan: SweepPlan,
    /// Column (frequency index) used for threshold search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_column: Option<usize>,
    #[serde(default = "default_criterion")]
    pub threshold_criterion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_x_eff: Option<f64>,
}

fn default_criterion() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default)]
    pub settle: SettleOptions,
    #[serde(default)]
    pub window: Window,
    #[serde(default = "default_signal")]
    pub signal: Signal,
    #[serde(default = "default_floor")]
    pub peak_floor: f64,
    #[serde(default = "default_half_width")]
    pub comb_half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_x_eff: Option<f64>,
    #[serde(default)]
    pub seed_q_x: f64,
}

fn default_signal() -> Signal {
    Signal::QX
}

fn default_half_width() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub pump: Tone,
    pub probe_amplitude: f64,
    /// Probe angular frequencies.
    pub probe: Axis,
    #[serde(default = "default_n_pump")]
    pub n_pump: usize,
    #[serde(default = "default_n_mix")]
    pub n_mix: usize,
}

fn default_n_pump() -> usize {
    5
}

fn default_n_mix() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoexistConfig {
    pub orders: Vec<u32>,
    pub pumps: Axis,
    pub deltas: Axis,
    /// Time-domain spectrum of the circuit in `model`/`drive`, when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumConfig>,
}

fn byte_to_line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { path, message } => Error::Validation {
            path: format!("{prefix}.{path}"),
            message,
        },
        Error::Domain(message) => Error::Validation {
            path: prefix.to_string(),
            message,
        },
        other => other,
    }
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let sc: Scenario = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| byte_to_line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    sc.validate()?;
    Ok(sc)
}

/// Canonical text form; loading it again gives an identical scenario.
pub fn to_text(sc: &Scenario) -> Result<String> {
    toml::to_string(sc).map_err(|e| Error::validation("scenario", e.to_string()))
}

impl Scenario {
    fn require<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T> {
        block
            .as_ref()
            .ok_or_else(|| Error::validation(name, format!("block required for kind `{}`", self.kind.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::validation("schema", format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        if !self.deterministic {
            return Err(Error::validation("deterministic", "must be true"));
        }
        let blocks = [
            (Kind::Simulate, self.simulate.is_some()),
            (Kind::Hb, self.hb.is_some()),
            (Kind::Slowflow, self.slowflow.is_some()),
            (Kind::Sweep, self.sweep.is_some()),
            (Kind::Spectrum, self.spectrum.is_some()),
            (Kind::Probe, self.probe.is_some()),
            (Kind::Coexist, self.coexist.is_some()),
        ];
        for (k, present) in blocks {
            if present && k != self.kind {
                return Err(Error::validation(k.name(), format!("block does not belong to kind `{}`", self.kind.name())));
            }
        }
        if let Some(m) = &self.model {
            m.validate().map_err(|e| prefixed("model", e))?;
        }
        if let Some(d) = &self.drive {
            d.validate().map_err(|e| prefixed("drive", e))?;
        }
        if let Some(s) = &self.slowflow_model {
            s.params().map_err(|e| prefixed("slowflow_model", e))?;
        }
        if let Some(r) = &self.resonator {
            for (name, v) in [("gamma_x", r.gamma_x), ("omega_x", r.omega_x), ("kappa", r.kappa)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::validation(format!("resonator.{name}"), "must be finite and > 0"));
                }
            }
        }
        match self.kind {
            Kind::Simulate => {
                self.require(&self.model, "model")?;
                self.require(&self.drive, "drive")?;
                let c = self.simulate.unwrap_or_default();
                check_floor(c.peak_floor, "simulate.peak_floor")?;
            }
            Kind::Spectrum => {
                self.require(&self.model, "model")?;
                self.require(&self.drive, "drive")?;
                let c = self.spectrum.unwrap_or_default();
                check_floor(c.peak_floor, "spectrum.peak_floor")?;
            }
            Kind::Hb => {
                self.require(&self.model, "model")?;
                let d = self.require(&self.drive, "drive")?;
                if d.tones.len() != 1 {
                    return Err(Error::validation("drive.tones", "harmonic balance needs exactly one tone"));
                }
                if let Some(a) = self.hb.and_then(|h| h.amplitudes) {
                    a.validate("hb.amplitudes")?;
                }
                let o = self.hb.unwrap_or_default().options;
                if o.harmonics == 0 {
                    return Err(Error::validation("hb.options.harmonics", "must be >= 1"));
                }
            }
            Kind::Slowflow => {
                self.require(&self.slowflow_model, "slowflow_model")?;
                let c = self.require(&self.slowflow, "slowflow")?;
                c.deltas.validate("slowflow.deltas")?;
                if c.pumps.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::validation("slowflow.pumps", "must be finite and >= 0"));
                }
                if !c.loop_orders.is_empty() {
                    self.require(&self.resonator, "resonator")?;
                }
                if c.loop_orders.contains(&1) {
                    return Err(Error::validation("slowflow.loop_orders", "order 1 is degenerate"));
                }
                if let Some(t) = c.t_end {
                    if !(t.is_finite() && t > 0.0) || c.samples < 2 {
                        return Err(Error::validation("slowflow.t_end", "must be > 0 with at least 2 samples"));
                    }
                }
            }
            Kind::Sweep => {
                self.require(&self.model, "model")?;
                let c = self.require(&self.sweep, "sweep")?;
                c.plan.validate().map_err(|e| prefixed("sweep.plan", e))?;
                if let Some(col) = c.threshold_column {
                    if col >= c.plan.frequency.count {
                        return Err(Error::validation("sweep.threshold_column", "outside the frequency axis"));
                    }
                }
            }
            Kind::Probe => {
                self.require(&self.model, "model")?;
                let c = self.require(&self.probe, "probe")?;
                c.probe.validate("probe.probe")?;
                if !(c.probe_amplitude > 0.0 && c.probe_amplitude.is_finite()) {
                    return Err(Error::validation("probe.probe_amplitude", "must be > 0"));
                }
                if !(c.pump.omega > 0.0 && c.pump.amplitude >= 0.0) {
                    return Err(Error::validation("probe.pump", "needs omega > 0 and amplitude >= 0"));
                }
            }
            Kind::Coexist => {
                self.require(&self.slowflow_model, "slowflow_model")?;
                self.require(&self.resonator, "resonator")?;
                let c = self.require(&self.coexist, "coexist")?;
                c.pumps.validate("coexist.pumps")?;
                c.deltas.validate("coexist.deltas")?;
                if c.orders.is_empty() || c.orders.contains(&1) {
                    return Err(Error::validation("coexist.orders", "must be non-empty and exclude 1"));
                }
                if self.model.is_some() != self.drive.is_some() {
                    return Err(Error::validation("drive", "model and drive must be given together"));
                }
                if let Some(sp) = c.spectrum {
                    check_floor(sp.peak_floor, "coexist.spectrum.peak_floor")?;
                }
            }
        }
        Ok(())
    }
}

fn check_floor(v: f64, path: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(path, "must lie in (0, 1)"))
    }
}
