//! Absorption spectra from dipole time series, polariton peak extraction and
//! polarization statistics.

use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::trajectory::{write_preamble, Trajectory, TrajectoryMeta};

/// Power spectrum on a uniform angular-frequency axis (hartree).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum1D {
    pub omega: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Bin width 2π/(window_len·dt).
    pub resolution: f64,
    pub n_windows: usize,
}

impl Spectrum1D {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Index of the bin closest to `omega`.
    pub fn bin_of(&self, omega: f64) -> usize {
        ((omega / self.resolution).round().max(0.0) as usize).min(self.len().saturating_sub(1))
    }

    /// The bins with `lo <= ω <= hi`.
    pub fn band(&self, lo: f64, hi: f64) -> Spectrum1D {
        let (omega, intensity) = self
            .omega
            .iter()
            .zip(&self.intensity)
            .filter(|(w, _)| **w >= lo && **w <= hi)
            .unzip();
        Spectrum1D {
            omega,
            intensity,
            resolution: self.resolution,
            n_windows: self.n_windows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window_len: usize,
    pub shift: usize,
    /// Upper bound on the number of windows averaged.
    pub n_windows: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::new(4096)
    }
}

impl WindowSpec {
    /// `window_len` with a one-third shift and at most 33 windows.
    pub fn new(window_len: usize) -> Self {
        Self {
            window_len,
            shift: (window_len / 3).max(1),
            n_windows: 33,
        }
    }

    pub fn with_shift_fraction(mut self, frac: f64) -> Result<Self> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::invalid(format!(
                "window shift fraction must lie in (0, 1], got {frac}"
            )));
        }
        self.shift = ((self.window_len as f64 * frac).round() as usize).max(1);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 4 {
            return Err(Error::invalid("window length must be at least 4"));
        }
        if self.shift == 0 || self.shift > self.window_len {
            return Err(Error::invalid("window shift must lie in [1, window_len]"));
        }
        if self.n_windows == 0 {
            return Err(Error::invalid("at least one window is required"));
        }
        Ok(())
    }

    /// Windows that fit into `len` samples, capped at `n_windows`.
    pub fn windows_for(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            ((len - self.window_len) / self.shift + 1).min(self.n_windows)
        }
    }
}

/// Periodic Blackman window.
pub fn blackman(len: usize) -> Vec<f64> {
    let n = len as f64;
    (0..len)
        .map(|j| {
            let x = 2.0 * std::f64::consts::PI * j as f64 / n;
            0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
        })
        .collect()
}

/// Welch estimate with Blackman windows and per-window mean subtraction.
///
/// The one-sided intensities are scaled so that their mean over bins equals
/// the mean power of the windowed, mean-free signal.
pub fn power_spectrum(signal: &[f64], dt: f64, spec: &WindowSpec) -> Result<Spectrum1D> {
    spec.validate()?;
    if !(dt > 0.0) {
        return Err(Error::invalid("sampling interval must be positive"));
    }
    let l = spec.window_len;
    if signal.len() < l {
        return Err(Error::SignalTooShort {
            len: signal.len(),
            window: l,
        });
    }
    let n_win = spec.windows_for(signal.len());
    let window = blackman(l);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(l);
    let n_bins = l / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); l];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for w in 0..n_win {
        let seg = &signal[w * spec.shift..w * spec.shift + l];
        let mean = seg.iter().sum::<f64>() / l as f64;
        for ((b, x), h) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * h, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (a, y) in acc.iter_mut().zip(&buf) {
            *a += y.norm_sqr();
        }
    }
    let norm = n_bins as f64 / (l as f64 * l as f64) / n_win as f64;
    let intensity = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let fold = if k == 0 || (l.is_multiple_of(2) && k == l / 2) { 1.0 } else { 2.0 };
            fold * a * norm
        })
        .collect();
    let resolution = 2.0 * std::f64::consts::PI / (l as f64 * dt);
    Ok(Spectrum1D {
        omega: (0..n_bins).map(|k| k as f64 * resolution).collect(),
        intensity,
        resolution,
        n_windows: n_win,
    })
}

/// Spectrum of the total projected dipole.
pub fn global_absorption(traj: &Trajectory, spec: &WindowSpec) -> Result<Spectrum1D> {
    if traj.dipole_total.is_empty() {
        return Err(Error::MissingObservable("dipole_total"));
    }
    power_spectrum(&traj.dipole_total, traj.meta.sample_dt(), spec)
}

/// Sum of the single-molecule spectra, accumulated in molecule order.
pub fn local_absorption(traj: &Trajectory, spec: &WindowSpec, exec: Execution) -> Result<Spectrum1D> {
    if traj.dipole_local.is_empty() || traj.dipole_local[0].is_empty() {
        return Err(Error::MissingObservable("dipole_local"));
    }
    let dt = traj.meta.sample_dt();
    let parts = map_indexed(exec, traj.dipole_local.len(), |n| {
        power_spectrum(&traj.dipole_local[n], dt, spec)
    });
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("at least one molecule")?;
    for p in iter {
        let p = p?;
        total.intensity.iter_mut().zip(&p.intensity).for_each(|(a, b)| *a += b);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    /// Interpolated position (hartree).
    pub omega: f64,
    pub intensity: f64,
    pub prominence: f64,
    /// Index into the spectrum that was searched.
    pub bin: usize,
}

/// Local maxima whose prominence is at least `min_prominence` times the
/// spectrum maximum, positioned by a parabola through the three top bins.
pub fn find_peaks(s: &Spectrum1D, min_prominence: f64) -> Vec<Peak> {
    let y = &s.intensity;
    let n = y.len();
    let ymax = y.iter().cloned().fold(0.0, f64::max);
    if n < 3 || !(ymax > 0.0) {
        return Vec::new();
    }
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if y[i] > y[i - 1] {
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let c = (i + j) / 2;
                let prom = prominence(y, c);
                if prom >= min_prominence * ymax {
                    let (delta, height) = if i == j {
                        parabolic(y[c - 1], y[c], y[c + 1])
                    } else {
                        (0.0, y[c])
                    };
                    peaks.push(Peak {
                        omega: (c as f64 + delta) * s.resolution + s.omega[0],
                        intensity: height,
                        prominence: prom,
                        bin: c,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn prominence(y: &[f64], i: usize) -> f64 {
    let h = y[i];
    let mut left_min = h;
    for k in (0..i).rev() {
        if y[k] > h {
            break;
        }
        left_min = left_min.min(y[k]);
    }
    let mut right_min = h;
    for &v in &y[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Vertex offset (in bins) and height of the parabola through three points.
fn parabolic(a: f64, b: f64, c: f64) -> (f64, f64) {
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return (0.0, b);
    }
    let d = 0.5 * (a - c) / den;
    let d = d.clamp(-0.5, 0.5);
    (d, b - 0.25 * (a - c) * d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolaritonPeaks {
    pub omega_lp: f64,
    pub omega_up: f64,
    pub rabi: f64,
    pub midpoint: f64,
    /// Peak within one bin of the cavity frequency, if any.
    pub dark: Option<f64>,
}

/// Default relative prominence for polariton detection. At large N the weak
/// branch holds well under 1% of the strong branch's intensity.
pub const DEFAULT_MIN_PROMINENCE: f64 = 1e-3;

pub fn rabi_analysis(s: &Spectrum1D, omega_cavity: f64) -> Result<PolaritonPeaks> {
    rabi_analysis_with(s, omega_cavity, DEFAULT_MIN_PROMINENCE)
}

/// Relative half-width of the band around the cavity frequency searched for
/// polaritons. Rotating permanent dipoles put most of the power near ω = 0.
pub const POLARITON_BAND: f64 = 0.5;

/// LP/UP are the most prominent peaks below/above the cavity frequency,
/// ignoring anything within one bin of it. Only the band
/// (1 ± POLARITON_BAND)·ω_c is searched, and prominence is relative to its maximum.
pub fn rabi_analysis_with(s: &Spectrum1D, omega_cavity: f64, min_prominence: f64) -> Result<PolaritonPeaks> {
    let band = s.band(
        (1.0 - POLARITON_BAND) * omega_cavity,
        (1.0 + POLARITON_BAND) * omega_cavity,
    );
    let peaks = find_peaks(&band, min_prominence);
    let near = |p: &&Peak| (p.omega - omega_cavity).abs() <= s.resolution;
    let dark = peaks
        .iter()
        .filter(near)
        .max_by(|a, b| a.prominence.total_cmp(&b.prominence))
        .map(|p| p.omega);
    let best = |below: bool| {
        peaks
            .iter()
            .filter(|p| !near(p) && ((p.omega < omega_cavity) == below))
            .max_by(|a, b| a.prominence.total_cmp(&b.prominence))
            .map(|p| p.omega)
    };
    match (best(true), best(false)) {
        (Some(lp), Some(up)) => Ok(PolaritonPeaks {
            omega_lp: lp,
            omega_up: up,
            rabi: up - lp,
            midpoint: 0.5 * (up + lp),
            dark,
        }),
        (lp, up) => Err(Error::PeaksNotFound(format!(
            "{} peaks found; lower branch {}, upper branch {}",
            peaks.len(),
            if lp.is_some() { "present" } else { "missing" },
            if up.is_some() { "present" } else { "missing" }
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationStats {
    pub mean_dr: f64,
    pub mean_abs_dr: f64,
    /// Standard deviation across molecules of the time-averaged |Δr_n|.
    pub std_abs_dr: f64,
    /// Standard error of `mean_dr` from the spread of per-molecule means.
    pub sem_dr: f64,
    /// Standard error of `mean_abs_dr`, likewise.
    pub sem_abs_dr: f64,
    pub n_molecules: usize,
    pub n_samples: usize,
}

pub fn polarization_stats(traj: &Trajectory) -> Result<PolarizationStats> {
    let dr = traj.dr.as_ref().ok_or(Error::MissingObservable("dr"))?;
    polarization_stats_from(dr)
}

/// Statistics of a `dr[n][t]` table.
pub fn polarization_stats_from(dr: &[Vec<f64>]) -> Result<PolarizationStats> {
    let n = dr.len();
    let t = dr.first().map_or(0, Vec::len);
    if n == 0 || t == 0 {
        return Err(Error::MissingObservable("dr"));
    }
    if let Some(bad) = dr.iter().find(|c| c.len() != t) {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: bad.len(),
        });
    }
    let means: Vec<f64> = dr.iter().map(|c| c.iter().sum::<f64>() / t as f64).collect();
    let abs_means: Vec<f64> = dr
        .iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>() / t as f64)
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        if v.len() < 2 {
            return 0.0;
        }
        let m = avg(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    let std_abs = sd(&abs_means);
    Ok(PolarizationStats {
        mean_dr: avg(&means),
        mean_abs_dr: avg(&abs_means),
        std_abs_dr: std_abs,
        sem_dr: sd(&means) / (n as f64).sqrt(),
        sem_abs_dr: std_abs / (n as f64).sqrt(),
        n_molecules: n,
        n_samples: t,
    })
}

/// `spectrum.csv`: omega_mH, intensity_global, intensity_local.
pub fn write_spectrum_csv<W: Write>(
    mut w: W,
    meta: &TrajectoryMeta,
    global: &Spectrum1D,
    local: &Spectrum1D,
) -> Result<()> {
    write_preamble(&mut w, "spectrum", meta)?;
    writeln!(w, "# resolution_mH={:e}", global.resolution * 1e3)?;
    writeln!(w, "# n_windows={}", global.n_windows)?;
    writeln!(w, "omega_mH,intensity_global,intensity_local")?;
    for ((o, g), l) in global.omega.iter().zip(&global.intensity).zip(&local.intensity) {
        writeln!(w, "{:e},{g:e},{l:e}", o * 1e3)?;
    }
    Ok(())
}

/// `peaks.csv`: one row per detected peak, then the polariton summary.
pub fn write_peaks_csv<W: Write>(
    mut w: W,
    meta: &TrajectoryMeta,
    peaks: &[Peak],
    polaritons: Option<&PolaritonPeaks>,
) -> Result<()> {
    write_preamble(&mut w, "peaks", meta)?;
    if let Some(p) = polaritons {
        writeln!(w, "# omega_lp_mH={:e}", p.omega_lp * 1e3)?;
        writeln!(w, "# omega_up_mH={:e}", p.omega_up * 1e3)?;
        writeln!(w, "# rabi_mH={:e}", p.rabi * 1e3)?;
        writeln!(w, "# midpoint_mH={:e}", p.midpoint * 1e3)?;
        if let Some(d) = p.dark {
            writeln!(w, "# dark_mH={:e}", d * 1e3)?;
        }
    }
    writeln!(w, "omega_mH,intensity,prominence")?;
    for p in peaks {
        writeln!(w, "{:e},{:e},{:e}", p.omega * 1e3, p.intensity, p.prominence)?;
    }
    Ok(())
}

/// `polarization.csv`, one row per trajectory.
pub fn write_polarization_csv<W: Write>(mut w: W, rows: &[(TrajectoryMeta, PolarizationStats)]) -> Result<()> {
    writeln!(w, "# cavity-md polarization")?;
    for (m, _) in rows {
        writeln!(w, "# N={} config_hash={} seed={}", m.n_molecules, m.config_hash, m.seed)?;
    }
    writeln!(
        w,
        "N,mean_dr_bohr,mean_abs_dr_bohr,std_abs_dr_bohr,sem_dr_bohr,sem_abs_dr_bohr,n_samples"
    )?;
    for (m, s) in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            m.n_molecules, s.mean_dr, s.mean_abs_dr, s.std_abs_dr, s.sem_dr, s.sem_abs_dr, s.n_samples
        )?;
    }
    Ok(())
}
