//! Scenario execution: dispatch to the analysis pipelines, output files and
//! the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harmonic_balance::{continuation, floquet_multipliers, hb_solve, probe_about, HbOptions};
use crate::model::{linear_transfer, CircuitParams, DriveSpec, Signal, StateVector};
use crate::scenario::{load_scenario, to_text, Kind, Scenario, SCHEMA_VERSION};
use crate::slowflow::{
    check_regime, coexistence_scan, fixed_points, integrate_slowflow, loop_analysis, small_signal_gain, write_coexistence_csv,
    write_gain_csv, Quadratures,
};
use crate::spectral::{comb_metrics, db, find_peaks, peaks_near, spectrum, transmission, Spectrum};
use crate::sweep::{column_thresholds, run_sweep};
use crate::timedomain::{settle, SettleOptions, SteadySegment};
use crate::ode::Tolerances;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } => 3,
        Error::Validation { .. } => 4,
        Error::Io(_) => 5,
        Error::NoConvergence { .. } | Error::BifurcationProximity { .. } | Error::Continuation { .. } => 6,
        Error::Divergence { .. } | Error::StepUnderflow { .. } => 7,
        Error::InsufficientComb { .. } | Error::DegenerateFrame | Error::Resolution { .. } | Error::NoPumpedState { .. } => 8,
        Error::Domain(_) => 9,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub resocomb: &'static str,
    pub schema: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub kind: Kind,
    pub inputs_hash: String,
    pub versions: Versions,
    pub wall_time_s: f64,
    /// `complete`, or `partial` when the run stopped on an error.
    pub status: &'static str,
    pub error: Option<String>,
    pub files: Vec<FileRecord>,
    /// Canonical scenario text; rerunning it reproduces the data files.
    pub scenario: String,
}

struct Outputs {
    dir: PathBuf,
    names: Vec<String>,
    verbose: bool,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        if self.verbose {
            eprintln!("writing {}", self.dir.join(name).display());
        }
        self.names.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, v).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn records(&self) -> Result<Vec<FileRecord>> {
        self.names
            .iter()
            .map(|n| {
                let data = fs::read(self.dir.join(n))?;
                Ok(FileRecord {
                    name: n.clone(),
                    bytes: data.len() as u64,
                    sha256: format!("{:x}", Sha256::digest(&data)),
                })
            })
            .collect()
    }
}

/// Hash of the canonical scenario text with the output location removed.
pub fn inputs_hash(sc: &Scenario) -> Result<String> {
    let canon = Scenario {
        output_dir: None,
        ..sc.clone()
    };
    Ok(format!("{:x}", Sha256::digest(to_text(&canon)?.as_bytes())))
}

/// Reads a scenario file, or the scenario embedded in a run manifest.
pub fn load_scenario_file(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(s) = v.get("scenario").and_then(|s| s.as_str()) {
            return load_scenario(s);
        }
    }
    load_scenario(&text)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub threads: Option<usize>,
    pub verbose: bool,
}

/// Runs the scenario into `out_dir` and writes the manifest. On failure the
/// manifest is still written, marked partial, and the error is returned.
pub fn run(sc: &Scenario, out_dir: &Path, opts: RunOptions) -> Result<Manifest> {
    sc.validate()?;
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        names: Vec::new(),
        verbose: opts.verbose,
    };
    let result = dispatch(sc, &mut out, opts);
    let mut manifest = Manifest {
        kind: sc.kind,
        inputs_hash: inputs_hash(sc)?,
        versions: Versions {
            resocomb: env!("CARGO_PKG_VERSION"),
            schema: SCHEMA_VERSION,
        },
        wall_time_s: 0.0,
        status: if result.is_ok() { "complete" } else { "partial" },
        error: result.as_ref().err().map(|e| e.to_string()),
        files: out.records()?,
        scenario: to_text(sc)?,
    };
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let mut w = BufWriter::new(File::create(out_dir.join(MANIFEST_NAME))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    result.map(|_| manifest)
}

fn dispatch(sc: &Scenario, out: &mut Outputs, opts: RunOptions) -> Result<()> {
    match sc.kind {
        Kind::Simulate => simulate(sc, out, true),
        Kind::Spectrum => simulate(sc, out, false),
        Kind::Hb => harmonic_balance(sc, out),
        Kind::Slowflow => slow_flow(sc, out),
        Kind::Sweep => sweep(sc, out, opts),
        Kind::Probe => probe(sc, out),
        Kind::Coexist => coexist(sc, out),
    }
}

fn model(sc: &Scenario) -> Result<CircuitParams> {
    sc.model.ok_or_else(|| Error::validation("model", "missing"))
}

fn drive(sc: &Scenario) -> Result<DriveSpec> {
    sc.drive.clone().ok_or_else(|| Error::validation("drive", "missing"))
}

#[derive(Serialize)]
struct ToneResponse {
    omega: f64,
    re: f64,
    im: f64,
    magnitude: f64,
}

#[derive(Serialize)]
struct SettleSummary {
    converged: bool,
    quasi_periodic: bool,
    envelope_omega: Option<f64>,
    periods: usize,
    residual: f64,
    settle_time: f64,
    base_omega: f64,
    transmission: Vec<ToneResponse>,
}

fn summarize(seg: &SteadySegment, d: &DriveSpec) -> Result<SettleSummary> {
    let mut tr = Vec::new();
    for (i, t) in d.tones.iter().enumerate() {
        if t.amplitude > 0.0 {
            let c = transmission(seg, d, i, Signal::QX)?;
            tr.push(ToneResponse {
                omega: t.omega,
                re: c.re,
                im: c.im,
                magnitude: c.norm(),
            });
        }
    }
    Ok(SettleSummary {
        converged: seg.converged,
        quasi_periodic: seg.quasi_periodic,
        envelope_omega: seg.envelope_omega,
        periods: seg.periods,
        residual: seg.residual,
        settle_time: seg.settle_time,
        base_omega: seg.base_omega,
        transmission: tr,
    })
}

fn write_peaks(out: &mut Outputs, spec: &Spectrum, floor: f64) -> Result<Vec<crate::spectral::Peak>> {
    let peaks = find_peaks(spec, floor);
    let max = spec.max_power();
    let mut w = out.create("peaks.csv")?;
    writeln!(w, "omega,power,power_db_rel")?;
    for p in &peaks {
        writeln!(w, "{},{},{}", p.omega, p.power, db(p.power / max))?;
    }
    w.flush()?;
    Ok(peaks)
}

fn simulate(sc: &Scenario, out: &mut Outputs, trajectory: bool) -> Result<()> {
    let p = model(sc)?;
    let d = drive(sc)?;
    let (settle_opts, state0, window, floor, signal, half_width, wx_eff): (SettleOptions, StateVector, _, f64, Signal, f64, Option<f64>) =
        if trajectory {
            let c = sc.simulate.unwrap_or_default();
            (c.settle, StateVector::from_array(c.initial), c.window, c.peak_floor, Signal::QX, 0.2, None)
        } else {
            let c = sc.spectrum.or(sc.coexist.as_ref().and_then(|c| c.spectrum)).unwrap_or_default();
            (
                c.settle,
                StateVector::new(c.seed_q_x, 0.0, 0.0),
                c.window,
                c.peak_floor,
                c.signal,
                c.comb_half_width,
                c.omega_x_eff,
            )
        };
    let seg = settle(&p, &d, state0, &settle_opts)?;
    if trajectory {
        let mut w = out.create("trajectory.csv")?;
        writeln!(w, "t,q_x,v_x,q_p")?;
        for (i, s) in seg.states.iter().enumerate() {
            writeln!(w, "{},{},{},{}", seg.time(i), s.q_x, s.v_x, s.q_p)?;
        }
        w.flush()?;
    }
    let spec = spectrum(&seg, signal, window)?;
    let mut w = out.create("spectrum.csv")?;
    spec.write_csv(&mut w)?;
    w.flush()?;
    let peaks = write_peaks(out, &spec, floor)?;
    if !trajectory {
        let pump = d
            .tones
            .iter()
            .filter(|t| t.amplitude > 0.0)
            .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
            .map(|t| t.omega);
        if let Some(wp) = pump {
            match comb_metrics(&peaks_near(&peaks, wp, half_width), wp, wx_eff) {
                Ok(c) => out.json("comb.json", &c)?,
                Err(Error::InsufficientComb { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let summary = summarize(&seg, &d)?;
    out.json("summary.json", &summary)
}

fn harmonic_balance(sc: &Scenario, out: &mut Outputs) -> Result<()> {
    let p = model(sc)?;
    let tone = drive(sc)?.tones[0];
    let cfg = sc.hb.unwrap_or_default();
    let opts: HbOptions = cfg.options;
    match cfg.amplitudes {
        Some(axis) => {
            let branch = continuation(&p, tone.omega, &axis.values(), &opts)?;
            let mut w = out.create("branch.csv")?;
            write!(w, "amplitude")?;
            for k in 0..=opts.harmonics {
                write!(w, ",q_x_{k}")?;
            }
            writeln!(w, ",residual")?;
            for bp in &branch.points {
                write!(w, "{}", bp.amplitude)?;
                for k in 0..=opts.harmonics {
                    write!(w, ",{}", bp.solution.amplitude(k))?;
                }
                writeln!(w, ",{}", bp.solution.residual)?;
            }
            w.flush()?;
            out.json("folds.json", &branch.folds)
        }
        None => {
            let sol = hb_solve(&p, &tone, &opts, None)?;
            let mut w = out.create("hb.csv")?;
            sol.write_csv(&mut w)?;
            w.flush()?;
            #[derive(Serialize)]
            struct Report {
                residual: f64,
                iterations: usize,
                floquet: Option<Vec<[f64; 2]>>,
            }
            let floquet = if cfg.floquet {
                Some(floquet_multipliers(&p, &sol)?.iter().map(|z| [z.re, z.im]).collect())
            } else {
                None
            };
            out.json(
                "hb.json",
                &Report {
                    residual: sol.residual,
                    iterations: sol.iterations,
                    floquet,
                },
            )
        }
    }
}

fn slow_flow(sc: &Scenario, out: &mut Outputs) -> Result<()> {
    let sm = sc.slowflow_model.ok_or_else(|| Error::validation("slowflow_model", "missing"))?;
    let sf = sm.params()?;
    let cfg = sc.slowflow.clone().ok_or_else(|| Error::validation("slowflow", "missing"))?;
    let deltas = cfg.deltas.values();
    if sf.k_p != 0.0 && !cfg.pumps.is_empty() {
        let curves = small_signal_gain(&sf, &cfg.pumps, &deltas)?;
        let mut w = out.create("gain.csv")?;
        write_gain_csv(&curves, &mut w)?;
        w.flush()?;
    }
    let fps = fixed_points(&sf.with_signal(0.0, 0.0), &cfg.grid);
    out.json("fixed_points.json", &fps)?;
    if let Some(u) = cfg.upsilon {
        out.json("regime.json", &check_regime(&sf, u))?;
    }
    if !cfg.loop_orders.is_empty() {
        let res = sc.resonator.ok_or_else(|| Error::validation("resonator", "missing"))?;
        let reports = cfg
            .loop_orders
            .iter()
            .map(|&n| loop_analysis(&sf, &res, n, &deltas))
            .collect::<Result<Vec<_>>>()?;
        out.json("loop.json", &reports)?;
    }
    if let Some(t_end) = cfg.t_end {
        let times: Vec<f64> = (1..=cfg.samples).map(|i| t_end * i as f64 / cfg.samples as f64).collect();
        let q = integrate_slowflow(&sf, Quadratures::ZERO, 0.0, &times, Tolerances::new(1e-10, 1e-14))?;
        let mut w = out.create("slowflow_trajectory.csv")?;
        writeln!(w, "t,u,v")?;
        for (t, q) in times.iter().zip(&q) {
            writeln!(w, "{t},{},{}", q.u, q.v)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn sweep(sc: &Scenario, out: &mut Outputs, opts: RunOptions) -> Result<()> {
    let p = model(sc)?;
    let cfg = sc.sweep.clone().ok_or_else(|| Error::validation("sweep", "missing"))?;
    let map = run_sweep(&cfg.plan, &p, opts.threads)?;
    let mut w = out.create("intensity_long.csv")?;
    map.write_long_csv(&mut w)?;
    w.flush()?;
    let mut w = out.create("intensity_dense.csv")?;
    map.write_dense_csv(&mut w)?;
    w.flush()?;
    let mut w = out.create("intensity.dat")?;
    map.write_gnuplot(&mut w)?;
    w.flush()?;
    let mut w = out.create("contrast.csv")?;
    writeln!(w, "amp,contrast")?;
    for (a, c) in map.amplitudes.iter().zip(map.contrast_profile()) {
        writeln!(w, "{a},{}", if c.is_finite() { c.to_string() } else { "nan".into() })?;
    }
    w.flush()?;
    let thresholds = match cfg.threshold_column {
        Some(col) => Some(column_thresholds(&map, &cfg.plan, &p, col, cfg.threshold_criterion, cfg.omega_x_eff)?),
        None => None,
    };
    out.json("thresholds.json", &thresholds)
}

fn probe(sc: &Scenario, out: &mut Outputs) -> Result<()> {
    let p = model(sc)?;
    let cfg = sc.probe.ok_or_else(|| Error::validation("probe", "missing"))?;
    let orbit = hb_solve(&p, &cfg.pump, &HbOptions::with_harmonics(cfg.n_pump), None)?;
    let lin = p.linearized();
    let mut w = out.create("probe.csv")?;
    writeln!(w, "omega,re,im,magnitude,response_amplitude,pump_off_magnitude,gain_db,condition,near_oscillation")?;
    for ws in cfg.probe.values() {
        let r = probe_about(&p, &orbit, ws, cfg.n_mix)?;
        let off = linear_transfer(&lin, ws)?.0.norm();
        let gain = 20.0 * (r.ratio.norm() / off).log10();
        writeln!(
            w,
            "{ws},{},{},{},{},{off},{},{},{}",
            r.ratio.re,
            r.ratio.im,
            r.ratio.norm(),
            r.ratio.norm() * cfg.probe_amplitude,
            if gain.is_finite() { gain.to_string() } else { "inf".into() },
            r.condition,
            r.near_oscillation
        )?;
    }
    w.flush()?;
    Ok(())
}

fn coexist(sc: &Scenario, out: &mut Outputs) -> Result<()> {
    let sm = sc.slowflow_model.ok_or_else(|| Error::validation("slowflow_model", "missing"))?;
    let sf = sm.params()?;
    let res = sc.resonator.ok_or_else(|| Error::validation("resonator", "missing"))?;
    let cfg = sc.coexist.clone().ok_or_else(|| Error::validation("coexist", "missing"))?;
    let cells = coexistence_scan(&sf, &res, &cfg.orders, &cfg.pumps.values(), &cfg.deltas.values())?;
    let mut w = out.create("coexist.csv")?;
    write_coexistence_csv(&cells, &mut w)?;
    w.flush()?;
    out.json("coexist.json", &cells)?;
    if sc.model.is_some() && sc.drive.is_some() {
        simulate(sc, out, false)?;
    }
    Ok(())
}

/// Output directory: explicit override, else the scenario's own, else `out/<kind>`.
pub fn resolve_out_dir(sc: &Scenario, cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| sc.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(sc.kind.name()))
}
