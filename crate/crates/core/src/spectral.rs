//! Windowed amplitude spectra, peak extraction, comb metrics and single-tone
//! transmission estimates.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DriveSpec, Signal};
use crate::timedomain::SteadySegment;

/// Relative power floor used when none is given.
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rectangular,
    Hann,
    /// Four-term Blackman–Harris, peak sidelobe about -92 dB.
    #[default]
    BlackmanHarris,
}

impl Window {
    /// Half-width of the main lobe in bins.
    pub fn main_lobe_bins(self) -> usize {
        match self {
            Window::Rectangular => 1,
            Window::Hann => 2,
            Window::BlackmanHarris => 4,
        }
    }

    /// Periodic (DFT-even) coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let terms: &[f64] = match self {
            Window::Rectangular => &[1.0],
            Window::Hann => &[0.5, 0.5],
            Window::BlackmanHarris => &[0.35875, 0.48829, 0.14128, 0.01168],
        };
        (0..n)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n as f64;
                terms
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| (if k % 2 == 0 { a } else { -a }) * (k as f64 * x).cos())
                    .sum()
            })
            .collect()
    }
}

/// One-sided amplitude spectrum. A sinusoid of amplitude `A` centred on a bin
/// shows `|amplitudes[k]| = A` there.
#[derive(Debug, Clone, Serialize)]
pub struct Spectrum {
    pub omegas: Vec<f64>,
    pub amplitudes: Vec<Complex64>,
    pub window: Window,
    /// Bin spacing in angular frequency.
    pub resolution: f64,
    pub n: usize,
    pub dt: f64,
    /// Mean of the window coefficients.
    pub coherent_gain: f64,
    /// Mean square of the windowed samples.
    pub windowed_power: f64,
}

impl Spectrum {
    pub fn power(&self, k: usize) -> f64 {
        self.amplitudes[k].norm_sqr()
    }

    pub fn powers(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn max_power(&self) -> f64 {
        self.powers().into_iter().fold(0.0, f64::max)
    }

    /// Mean square of the windowed samples recomputed from the amplitudes.
    pub fn parseval_power(&self) -> f64 {
        let last = self.amplitudes.len() - 1;
        let mut sum = 0.0;
        for (k, a) in self.amplitudes.iter().enumerate() {
            let edge = k == 0 || (k == last && self.n.is_multiple_of(2));
            sum += if edge { a.norm_sqr() } else { 0.5 * a.norm_sqr() };
        }
        self.coherent_gain * self.coherent_gain * sum
    }

    pub fn bin_of(&self, omega: f64) -> usize {
        ((omega / self.resolution).round().max(0.0) as usize).min(self.omegas.len() - 1)
    }

    /// Writes `omega,re,im,power_db` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "omega,re,im,power_db")?;
        for (o, a) in self.omegas.iter().zip(&self.amplitudes) {
            writeln!(w, "{o:e},{:e},{:e},{}", a.re, a.im, db(a.norm_sqr()))?;
        }
        Ok(())
    }
}

/// Power ratio in decibels, clamped at -400 dB.
pub fn db(power: f64) -> f64 {
    10.0 * power.max(1e-40).log10()
}

/// Spectrum of uniformly sampled data.
pub fn spectrum_of(samples: &[f64], dt: f64, window: Window) -> Result<Spectrum> {
    let n = samples.len();
    if n < 8 {
        return Err(Error::domain("spectrum needs at least 8 samples"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("sample interval must be > 0"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite sample"));
    }
    let w = window.coefficients(n);
    let sum_w: f64 = w.iter().sum();
    let mut buf: Vec<Complex64> = samples.iter().zip(&w).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
    let windowed_power = buf.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64;
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let resolution = 2.0 * PI / (n as f64 * dt);
    let amplitudes = (0..=half)
        .map(|k| {
            let edge = k == 0 || (n.is_multiple_of(2) && k == half);
            buf[k] * if edge { 1.0 } else { 2.0 } / sum_w
        })
        .collect();
    Ok(Spectrum {
        omegas: (0..=half).map(|k| k as f64 * resolution).collect(),
        amplitudes,
        window,
        resolution,
        n,
        dt,
        coherent_gain: sum_w / n as f64,
        windowed_power,
    })
}

pub fn spectrum(segment: &SteadySegment, which: Signal, window: Window) -> Result<Spectrum> {
    spectrum_of(&segment.signal(which), segment.dt, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub omega: f64,
    /// Interpolated peak power (squared amplitude).
    pub power: f64,
    pub bin: usize,
}

impl Peak {
    pub fn amplitude(&self) -> f64 {
        self.power.sqrt()
    }
}

/// Local maxima above `floor × max power`, refined by a parabola through
/// the logarithm of the three bins around each maximum. Bins inside the main
/// lobe of the DC component are skipped.
pub fn find_peaks(spec: &Spectrum, floor: f64) -> Vec<Peak> {
    let p = spec.powers();
    let threshold = floor * p.iter().copied().fold(0.0, f64::max);
    let mut peaks = Vec::new();
    for k in spec.window.main_lobe_bins()..p.len().saturating_sub(1) {
        if p[k] <= threshold || p[k] <= p[k - 1] || p[k] < p[k + 1] {
            continue;
        }
        let (a, b, c) = (p[k - 1].max(1e-300).ln(), p[k].ln(), p[k + 1].max(1e-300).ln());
        let denom = a - 2.0 * b + c;
        let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        peaks.push(Peak {
            omega: (k as f64 + delta) * spec.resolution,
            power: (b - 0.25 * (a - c) * delta).exp(),
            bin: k,
        });
    }
    peaks
}

/// Peaks within `half_width` of `center`, sorted by frequency.
pub fn peaks_near(peaks: &[Peak], center: f64, half_width: f64) -> Vec<Peak> {
    let mut sel: Vec<Peak> = peaks.iter().copied().filter(|p| (p.omega - center).abs() <= half_width).collect();
    sel.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    sel
}

#[derive(Debug, Clone, Serialize)]
pub struct Sideband {
    /// Offset from the pump line in units of the spacing.
    pub index: i64,
    pub omega: f64,
    pub power: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CombReport {
    pub lines: Vec<Sideband>,
    pub spacing: f64,
    /// Largest deviation of an adjacent separation from the mean, relative to the mean.
    pub equidistance_residual: f64,
    pub pump_omega: f64,
    pub inferred_n: Option<i64>,
    /// Distance of the raw order estimate from the nearest integer.
    pub n_residual: Option<f64>,
}

impl CombReport {
    pub fn is_equidistant(&self, tol: f64) -> bool {
        self.equidistance_residual < tol
    }

    /// Lines on either side of the pump, excluding the pump itself.
    pub fn sideband_count(&self) -> usize {
        self.lines.iter().filter(|l| l.index != 0).count()
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Io(e.into()))
    }
}

/// Spacing, equidistance and inferred order of a set of comb lines.
/// `omega_x` enables the order estimate `n = |ω_p − ω_x| / spacing + 1`.
pub fn comb_metrics(peaks: &[Peak], omega_p: f64, omega_x: Option<f64>) -> Result<CombReport> {
    if peaks.len() < 3 {
        return Err(Error::InsufficientComb { found: peaks.len() });
    }
    let mut sorted = peaks.to_vec();
    sorted.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    let gaps: Vec<f64> = sorted.windows(2).map(|w| w[1].omega - w[0].omega).collect();
    let spacing = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let equidistance_residual = gaps.iter().map(|g| (g - spacing).abs()).fold(0.0, f64::max) / spacing;
    let pump = sorted
        .iter()
        .min_by(|a, b| (a.omega - omega_p).abs().total_cmp(&(b.omega - omega_p).abs()))
        .map(|p| p.omega)
        .unwrap_or(omega_p);
    let lines = sorted
        .iter()
        .map(|p| Sideband {
            index: ((p.omega - pump) / spacing).round() as i64,
            omega: p.omega,
            power: p.power,
        })
        .collect();
    let (inferred_n, n_residual) = match omega_x {
        Some(wx) => {
            let raw = (omega_p - wx).abs() / spacing + 1.0;
            (Some(raw.round() as i64), Some((raw - raw.round()).abs()))
        }
        None => (None, None),
    };
    Ok(CombReport {
        lines,
        spacing,
        equidistance_residual,
        pump_omega: pump,
        inferred_n,
        n_residual,
    })
}

/// Complex response of `which` at the frequency of drive tone `tone_index`,
/// divided by that tone's complex amplitude.
///
/// When the segment spans whole periods of every drive tone the projection
/// uses a rectangular window, which is exact for periodic data; otherwise the
/// low-sidelobe window suppresses leakage from the other tones.
pub fn transmission(segment: &SteadySegment, drive: &DriveSpec, tone_index: usize, which: Signal) -> Result<Complex64> {
    let tone = drive
        .tones
        .get(tone_index)
        .ok_or_else(|| Error::domain(format!("no drive tone with index {tone_index}")))?;
    if tone.amplitude <= 0.0 {
        return Err(Error::domain("transmission needs a tone with non-zero amplitude"));
    }
    if tone.omega * segment.dt >= PI {
        return Err(Error::domain("tone above the Nyquist frequency of the segment"));
    }
    let n = segment.len();
    if n < 8 {
        return Err(Error::domain("segment too short"));
    }
    let duration = segment.duration();
    let whole = |w: f64| {
        let cycles = duration * w / (2.0 * PI);
        (cycles - cycles.round()).abs() < 1e-6 && cycles.round() >= 1.0
    };
    let window = if drive.tones.iter().all(|t| whole(t.omega)) {
        Window::Rectangular
    } else {
        Window::BlackmanHarris
    };
    let w = window.coefficients(n);
    let sum_w: f64 = w.iter().sum();
    let x = segment.signal(which);
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, (xi, wi)) in x.iter().zip(&w).enumerate() {
        let t = segment.time(i);
        acc += xi * wi * Complex64::from_polar(1.0, -tone.omega * t);
    }
    // x = Re(C e^{iωt}) projects to C; the sine-based phasor is Z = iC.
    let c = acc * 2.0 / sum_w;
    let z = Complex64::i() * c;
    Ok(z / Complex64::from_polar(tone.amplitude, tone.phase))
}
