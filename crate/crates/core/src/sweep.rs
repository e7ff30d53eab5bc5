//! Grid experiments over pump frequency and drive amplitude: intensity maps,
//! threshold search and oscillation-region maps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CircuitParams, DriveSpec, Signal, StateVector};
use crate::spectral::{comb_metrics, find_peaks, peaks_near, spectrum, transmission, Window, DEFAULT_FLOOR};
use crate::timedomain::{settle, SettleOptions, SteadySegment};

/// Extra attempts with doubled settle time for cells that neither converge
/// nor show a stationary envelope.
pub const MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl Axis {
    pub fn linear(min: f64, max: f64, count: usize) -> Self {
        Self {
            min,
            max,
            count,
            spacing: Spacing::Linear,
        }
    }

    pub fn log(min: f64, max: f64, count: usize) -> Self {
        Self {
            min,
            max,
            count,
            spacing: Spacing::Log,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.count < 2 {
            return Err(Error::validation(format!("{path}.count"), "must be >= 2"));
        }
        if !(self.min.is_finite() && self.max.is_finite()) {
            return Err(Error::validation(format!("{path}.min"), "axis bounds must be finite"));
        }
        if self.min >= self.max {
            return Err(Error::validation(format!("{path}.max"), "must exceed min"));
        }
        if self.spacing == Spacing::Log && self.min <= 0.0 {
            return Err(Error::validation(format!("{path}.min"), "log axis needs min > 0"));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                let s = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.min + (self.max - self.min) * s,
                    Spacing::Log => self.min * (self.max / self.min).powf(s),
                }
            })
            .collect()
    }

    /// Largest ratio (log) or gap (linear) between neighbouring points.
    pub fn resolution(&self) -> f64 {
        match self.spacing {
            Spacing::Linear => (self.max - self.min) / (self.count - 1) as f64,
            Spacing::Log => (self.max / self.min).powf(1.0 / (self.count - 1) as f64) - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `|q_x / V|` at the drive frequency.
    Transmission,
    /// 1 when an equidistant comb is present, else 0.
    CombPresence,
    /// Power of the strongest line adjacent to the pump.
    SidebandPower,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

fn default_half_width() -> f64 {
    0.2
}

fn default_equidistance() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub frequency: Axis,
    pub amplitude: Axis,
    pub metric: Metric,
    #[serde(default)]
    pub settle: SettleOptions,
    #[serde(default)]
    pub window: Window,
    /// Relative power floor for peak detection.
    #[serde(default = "default_floor")]
    pub peak_floor: f64,
    /// Comb lines are searched within this distance of the pump.
    #[serde(default = "default_half_width")]
    pub comb_half_width: f64,
    /// Largest equidistance residual accepted as a comb.
    #[serde(default = "default_equidistance")]
    pub equidistance_tol: f64,
    /// Initial photonic charge; a small seed lets self-oscillation start.
    #[serde(default)]
    pub seed_q_x: f64,
}

impl SweepPlan {
    pub fn new(frequency: Axis, amplitude: Axis, metric: Metric) -> Self {
        Self {
            frequency,
            amplitude,
            metric,
            settle: SettleOptions::default(),
            window: Window::default(),
            peak_floor: DEFAULT_FLOOR,
            comb_half_width: default_half_width(),
            equidistance_tol: default_equidistance(),
            seed_q_x: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frequency.validate("frequency")?;
        self.amplitude.validate("amplitude")?;
        if self.frequency.min <= 0.0 {
            return Err(Error::validation("frequency.min", "must be > 0"));
        }
        if self.amplitude.min < 0.0 {
            return Err(Error::validation("amplitude.min", "must be >= 0"));
        }
        if !(self.peak_floor > 0.0 && self.peak_floor < 1.0) {
            return Err(Error::validation("peak_floor", "must lie in (0, 1)"));
        }
        if !(self.comb_half_width > 0.0) {
            return Err(Error::validation("comb_half_width", "must be > 0"));
        }
        if !(self.equidistance_tol > 0.0) {
            return Err(Error::validation("equidistance_tol", "must be > 0"));
        }
        if !self.seed_q_x.is_finite() {
            return Err(Error::validation("seed_q_x", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum CellStatus {
    Converged,
    QuasiPeriodic,
    NotConverged,
    Failed(String),
}

impl CellStatus {
    pub fn has_value(&self) -> bool {
        matches!(self, CellStatus::Converged | CellStatus::QuasiPeriodic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    /// Metric value; NaN whenever `status` carries no value.
    pub value: f64,
    pub status: CellStatus,
    pub spacing: Option<f64>,
    pub inferred_n: Option<i64>,
    pub attempts: usize,
}

impl CellResult {
    fn sentinel(status: CellStatus, attempts: usize) -> Self {
        Self {
            value: f64::NAN,
            status,
            spacing: None,
            inferred_n: None,
            attempts,
        }
    }
}

/// Settles one cell, retrying with doubled transient budget when needed.
pub fn settle_cell(plan: &SweepPlan, params: &CircuitParams, omega: f64, amplitude: f64) -> Result<(SteadySegment, usize)> {
    let drive = DriveSpec::single(amplitude, omega);
    let state0 = StateVector::new(plan.seed_q_x, 0.0, 0.0);
    let mut opts = plan.settle;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let seg = settle(params, &drive, state0, &opts)?;
        if seg.converged || seg.quasi_periodic || attempts > MAX_RETRIES {
            return Ok((seg, attempts));
        }
        opts.max_periods *= 2;
    }
}

/// The metric of a single `(ω, A)` cell, exactly as `run_sweep` computes it.
pub fn cell_metric(plan: &SweepPlan, params: &CircuitParams, omega: f64, amplitude: f64, omega_x_eff: Option<f64>) -> CellResult {
    let (seg, attempts) = match settle_cell(plan, params, omega, amplitude) {
        Ok(s) => s,
        Err(e) => return CellResult::sentinel(CellStatus::Failed(e.to_string()), 1),
    };
    let status = if seg.converged {
        CellStatus::Converged
    } else if seg.quasi_periodic {
        CellStatus::QuasiPeriodic
    } else {
        return CellResult::sentinel(CellStatus::NotConverged, attempts);
    };
    match evaluate(plan, &seg, omega, amplitude, omega_x_eff) {
        Ok((value, spacing, inferred_n)) => CellResult {
            value,
            status,
            spacing,
            inferred_n,
            attempts,
        },
        Err(e) => CellResult::sentinel(CellStatus::Failed(e.to_string()), attempts),
    }
}

type Evaluated = (f64, Option<f64>, Option<i64>);

fn evaluate(plan: &SweepPlan, seg: &SteadySegment, omega: f64, amplitude: f64, omega_x_eff: Option<f64>) -> Result<Evaluated> {
    if plan.metric == Metric::Transmission {
        if amplitude == 0.0 {
            return Err(Error::domain("transmission undefined at zero drive"));
        }
        let t = transmission(seg, &DriveSpec::single(amplitude, omega), 0, Signal::QX)?;
        return Ok((t.norm(), None, None));
    }
    let spec = spectrum(seg, Signal::QX, plan.window)?;
    let peaks = peaks_near(&find_peaks(&spec, plan.peak_floor), omega, plan.comb_half_width);
    let comb = match comb_metrics(&peaks, omega, omega_x_eff) {
        Ok(c) if c.is_equidistant(plan.equidistance_tol) => Some(c),
        Ok(_) | Err(Error::InsufficientComb { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(match (plan.metric, comb) {
        (Metric::CombPresence, Some(c)) => (1.0, Some(c.spacing), c.inferred_n),
        (Metric::CombPresence, None) => (0.0, None, None),
        (_, Some(c)) => {
            let p = c.lines.iter().filter(|l| l.index.abs() == 1).map(|l| l.power).fold(0.0, f64::max);
            (p, Some(c.spacing), c.inferred_n)
        }
        (_, None) => (0.0, None, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub plan_hash: String,
    pub params_hash: String,
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("plain data serializes");
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct IntensityMap {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub metric: Metric,
    /// `cells[row][col]`, row = amplitude index, column = frequency index.
    pub cells: Vec<Vec<CellResult>>,
    pub provenance: Provenance,
}

impl IntensityMap {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.cells[row][col].value
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.cells[row].iter().map(|c| c.value).collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.cells.iter().map(|r| r[col].value).collect()
    }

    /// Mode contrast of every amplitude row.
    pub fn contrast_profile(&self) -> Vec<f64> {
        (0..self.amplitudes.len()).map(|r| mode_contrast(&self.row(r))).collect()
    }

    /// `freq,amp,metric,converged` rows; sentinel cells print `nan`.
    pub fn write_long_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "freq,amp,metric,converged")?;
        for (r, amp) in self.amplitudes.iter().enumerate() {
            for (c, f) in self.frequencies.iter().enumerate() {
                let cell = &self.cells[r][c];
                writeln!(w, "{f},{amp},{},{}", fmt_value(cell.value), cell.status.has_value())?;
            }
        }
        Ok(())
    }

    /// Matrix layout: first row holds the frequencies, first column the amplitudes.
    pub fn write_dense_csv(&self, mut w: impl Write) -> Result<()> {
        write!(w, "amp")?;
        for f in &self.frequencies {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
        for (r, amp) in self.amplitudes.iter().enumerate() {
            write!(w, "{amp}")?;
            for cell in &self.cells[r] {
                write!(w, ",{}", fmt_value(cell.value))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Whitespace-separated blocks, one per amplitude, for `splot ... with pm3d`.
    pub fn write_gnuplot(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# freq amp metric")?;
        for (r, amp) in self.amplitudes.iter().enumerate() {
            for (c, f) in self.frequencies.iter().enumerate() {
                writeln!(w, "{f} {amp} {}", fmt_value(self.cells[r][c].value))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

/// `(max − median) / median` over the finite entries of a frequency row.
pub fn mode_contrast(row: &[f64]) -> f64 {
    let mut v: Vec<f64> = row.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let peak = v[n - 1];
    if median == 0.0 {
        return if peak == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (peak - median) / median
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::validation("threads", "must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))
}

fn run_grid(plan: &SweepPlan, params: &CircuitParams, omega_x_eff: Option<f64>, threads: Option<usize>) -> Result<IntensityMap> {
    plan.validate()?;
    params.validate()?;
    let freqs = plan.frequency.values();
    let amps = plan.amplitude.values();
    let cells: Vec<(usize, usize)> = (0..amps.len()).flat_map(|r| (0..freqs.len()).map(move |c| (r, c))).collect();
    let results: Vec<CellResult> =
        pool(threads)?.install(|| cells.par_iter().map(|&(r, c)| cell_metric(plan, params, freqs[c], amps[r], omega_x_eff)).collect());
    let mut grid = vec![Vec::with_capacity(freqs.len()); amps.len()];
    for ((r, _), res) in cells.into_iter().zip(results) {
        grid[r].push(res);
    }
    Ok(IntensityMap {
        frequencies: freqs,
        amplitudes: amps,
        metric: plan.metric,
        cells: grid,
        provenance: Provenance {
            plan_hash: sha256_json(plan),
            params_hash: sha256_json(params),
        },
    })
}

/// Evaluates the plan's metric on every grid cell. Cell failures are
/// recorded, never fatal; the result does not depend on scheduling.
pub fn run_sweep(plan: &SweepPlan, params: &CircuitParams, threads: Option<usize>) -> Result<IntensityMap> {
    run_grid(plan, params, None, threads)
}

/// Comb-presence map. With `omega_x_eff` the comb order of each oscillating
/// cell is inferred as well.
pub fn oscillation_map(plan: &SweepPlan, params: &CircuitParams, omega_x_eff: Option<f64>, threads: Option<usize>) -> Result<IntensityMap> {
    let plan = SweepPlan {
        metric: Metric::CombPresence,
        ..plan.clone()
    };
    run_grid(&plan, params, omega_x_eff, threads)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub criterion: f64,
    /// Final bracket around each threshold.
    pub lower_bracket: Option<(f64, f64)>,
    pub upper_bracket: Option<(f64, f64)>,
}

impl ThresholdReport {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(e.into()))
    }
}

/// Relative bracket width at which bisection stops.
pub const THRESHOLD_RESOLUTION: f64 = 0.01;

fn bisect(mut lo: f64, mut hi: f64, rising: bool, criterion: f64, refine: &mut impl FnMut(f64) -> Option<f64>) -> (f64, f64) {
    while (hi - lo) > THRESHOLD_RESOLUTION * lo.abs().max(hi.abs()) {
        let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        let Some(v) = refine(mid) else { break };
        if !v.is_finite() {
            break;
        }
        let above = v >= criterion;
        if above == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// Lower threshold: first upward crossing of `criterion` along increasing
/// amplitude; upper: last downward crossing. `refine` evaluates the metric
/// at an intermediate amplitude (returning `None` stops refinement).
pub fn find_thresholds(amplitudes: &[f64], values: &[f64], criterion: f64, mut refine: impl FnMut(f64) -> Option<f64>) -> Result<ThresholdReport> {
    if amplitudes.len() != values.len() {
        return Err(Error::domain("amplitude and metric slices differ in length"));
    }
    let pts: Vec<(f64, f64)> = amplitudes.iter().copied().zip(values.iter().copied()).filter(|(_, v)| v.is_finite()).collect();
    if pts.len() < 8 {
        return Err(Error::domain(format!("threshold search needs at least 8 valid amplitude points, got {}", pts.len())));
    }
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::domain("amplitudes must be strictly increasing"));
    }
    let mut report = ThresholdReport {
        lower: None,
        upper: None,
        criterion,
        lower_bracket: None,
        upper_bracket: None,
    };
    if let Some(w) = pts.windows(2).find(|w| w[0].1 < criterion && w[1].1 >= criterion) {
        let (lo, hi) = bisect(w[0].0, w[1].0, true, criterion, &mut refine);
        report.lower = Some(0.5 * (lo + hi));
        report.lower_bracket = Some((lo, hi));
    }
    if let Some(w) = pts.windows(2).rev().find(|w| w[0].1 >= criterion && w[1].1 < criterion) {
        let (lo, hi) = bisect(w[0].0, w[1].0, false, criterion, &mut refine);
        report.upper = Some(0.5 * (lo + hi));
        report.upper_bracket = Some((lo, hi));
    }
    if let (Some(l), Some(u)) = (report.lower, report.upper) {
        if l >= u {
            report.upper = None;
            report.upper_bracket = None;
        }
    }
    Ok(report)
}

/// Thresholds along one frequency column, refined by extra simulations.
pub fn column_thresholds(
    map: &IntensityMap,
    plan: &SweepPlan,
    params: &CircuitParams,
    col: usize,
    criterion: f64,
    omega_x_eff: Option<f64>,
) -> Result<ThresholdReport> {
    let omega = *map
        .frequencies
        .get(col)
        .ok_or_else(|| Error::domain(format!("no frequency column {col}")))?;
    let plan = SweepPlan {
        metric: map.metric,
        ..plan.clone()
    };
    find_thresholds(&map.amplitudes, &map.column(col), criterion, |a| {
        let c = cell_metric(&plan, params, omega, a, omega_x_eff);
        c.status.has_value().then_some(c.value)
    })
}
