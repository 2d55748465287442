//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::analysis::{
    find_peaks, global_absorption, local_absorption, polarization_stats, rabi_analysis_with, write_peaks_csv,
    write_polarization_csv, write_spectrum_csv, WindowSpec, DEFAULT_MIN_PROMINENCE,
};
use crate::checks::check_forces;
use crate::config::{lambda_for_n, load_config, ExperimentConfig, OrientationMode, MH};
use crate::dynamics::{run_trajectory, Simulation};
use crate::error::{Error, Result};
use crate::harmonic::{integrator_frequency, polariton_prediction_projected, ShinMetiuFixtures};
use crate::par::map_indexed;
use crate::trajectory::{Trajectory, TrajectoryWriter};

/// Finite-difference step for `check-forces`.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative force error.
pub const FORCE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "cavity-md",
    version,
    about = "Cavity-Hartree molecular dynamics of Shin-Metiu ensembles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one trajectory and write trajectory.csv.
    Run(RunArgs),
    /// Global and local spectra plus polariton peaks of a trajectory.
    Spectrum(SpectrumArgs),
    /// Polarization statistics of one or more trajectories.
    Polarization(PolarizationArgs),
    /// Harmonic-model polariton predictions versus N.
    Oracle(SweepArgs),
    /// Analytic versus finite-difference forces at random configurations.
    CheckForces(CheckForcesArgs),
    /// Trajectories and Rabi analysis for a list of ensemble sizes.
    ScalingSweep(ScalingArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub traj: PathBuf,
    /// Cavity frequency in mH.
    #[arg(long = "omega-cavity")]
    pub omega_cavity: f64,
    #[arg(long, default_value_t = 4096)]
    pub window: usize,
    /// Window shift as a fraction of the window length.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub shift: f64,
    #[arg(long = "min-prominence", default_value_t = DEFAULT_MIN_PROMINENCE)]
    pub min_prominence: f64,
    /// Output directory (default: next to the trajectory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PolarizationArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub traj: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated ensemble sizes.
    #[arg(long = "n-list", default_value = "1,4,16,64")]
    pub n_list: String,
    /// Rescale λ with N so that the Rabi splitting stays fixed.
    #[arg(long = "fixed-rabi", action = ArgAction::Set, default_value_t = false)]
    pub fixed_rabi: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub sweep: SweepArgs,
    #[arg(long, default_value_t = 4096)]
    pub window: usize,
    #[arg(long = "min-prominence", default_value_t = DEFAULT_MIN_PROMINENCE)]
    pub min_prominence: f64,
}

#[derive(Debug, Args)]
pub struct CheckForcesArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "n-samples", default_value_t = 10)]
    pub n_samples: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Spectrum(a) => cmd_spectrum(&a),
        Command::Polarization(a) => cmd_polarization(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::CheckForces(a) => cmd_check_forces(&a),
        Command::ScalingSweep(a) => cmd_scaling(&a),
    }
}

/// Human-readable report plus the final `ERROR code=… step=…` line.
pub fn report_error<W: Write>(w: &mut W, err: &Error) {
    let _ = writeln!(w, "error: {err}");
    let step = err.step().map_or_else(|| "none".to_string(), |s| s.to_string());
    let _ = writeln!(w, "ERROR code={} step={step}", err.code());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_n_list(s: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad ensemble size `{t}`")))
        })
        .collect::<Result<_>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(Error::invalid("--n-list needs positive ensemble sizes"));
    }
    Ok(v)
}

/// Writes the trajectory of `cfg` to `dir/trajectory.csv`, streaming samples
/// and appending an error marker if the run fails.
pub fn write_trajectory(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let mut sim = Simulation::new(cfg)?;
    let file = BufWriter::new(File::create(dir.join("trajectory.csv"))?);
    let mut writer = TrajectoryWriter::new(file, sim.meta())?;
    let result = sim.run(|s| writer.write(s));
    if let Err(e) = &result {
        writer.error_marker(e)?;
    }
    writer.finish()?;
    result
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    write_trajectory(&cfg, &dir)?;
    println!("wrote {}", dir.join("trajectory.csv").display());
    Ok(())
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::read_csv(BufReader::new(File::open(path)?))
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<()> {
    let traj = read_trajectory(&a.traj)?;
    let spec = WindowSpec::new(a.window).with_shift_fraction(a.shift)?;
    let available = if traj.len() >= spec.window_len {
        (traj.len() - spec.window_len) / spec.shift + 1
    } else {
        0
    };
    if available < spec.n_windows {
        eprintln!(
            "warning: {} samples hold {} windows of {} (target {})",
            traj.len(),
            available,
            spec.window_len,
            spec.n_windows
        );
    }
    let global = global_absorption(&traj, &spec)?;
    let local = local_absorption(&traj, &spec, crate::par::Execution::Parallel)?;
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.traj.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&dir)?;
    write_spectrum_csv(
        BufWriter::new(File::create(dir.join("spectrum.csv"))?),
        &traj.meta,
        &global,
        &local,
    )?;
    let peaks = find_peaks(&global, a.min_prominence);
    let polaritons = rabi_analysis_with(&global, a.omega_cavity * MH, a.min_prominence);
    write_peaks_csv(
        BufWriter::new(File::create(dir.join("peaks.csv"))?),
        &traj.meta,
        &peaks,
        polaritons.as_ref().ok(),
    )?;
    let p = polaritons?;
    println!(
        "LP {:.4} mH  UP {:.4} mH  Rabi {:.4} mH  midpoint {:.4} mH",
        p.omega_lp / MH,
        p.omega_up / MH,
        p.rabi / MH,
        p.midpoint / MH
    );
    Ok(())
}

fn cmd_polarization(a: &PolarizationArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.traj {
        let traj = read_trajectory(path)?;
        let stats = polarization_stats(&traj)?;
        rows.push((traj.meta.clone(), stats));
    }
    create_dir(&a.out)?;
    write_polarization_csv(BufWriter::new(File::create(a.out.join("polarization.csv"))?), &rows)?;
    for (m, s) in &rows {
        println!(
            "N={:<5} mean_dr={:+.3e}  mean|dr|={:.3e}  std|dr|={:.3e} bohr",
            m.n_molecules, s.mean_dr, s.mean_abs_dr, s.std_abs_dr
        );
    }
    Ok(())
}

/// λ for ensemble size `n`: fixed, or rescaled from `cavity[0].lambda`.
pub fn sweep_lambda(cfg: &ExperimentConfig, n: usize, fixed_rabi: bool) -> f64 {
    let l = cfg.cavity[0].lambda;
    if fixed_rabi {
        lambda_for_n(l, n, cfg.ensemble.orientation)
    } else {
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub lambda: f64,
    pub omega_lp: f64,
    pub omega_up: f64,
}

fn write_sweep_csv(path: &Path, cfg: &ExperimentConfig, kind: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# cavity-md {kind}")?;
    writeln!(w, "# version={}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "# config_hash={}", cfg.hash()?)?;
    writeln!(w, "# seed={}", cfg.seed)?;
    writeln!(w, "N,lambda_au,omega_lp_mH,omega_up_mH,rabi_mH,midpoint_mH")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.n,
            r.lambda,
            r.omega_lp / MH,
            r.omega_up / MH,
            (r.omega_up - r.omega_lp) / MH,
            0.5 * (r.omega_up + r.omega_lp) / MH
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Harmonic-model LP/UP for each N. Random orientations use the isotropic
/// average ⟨cos²θ⟩ = 1/3 for every molecule.
pub fn oracle_sweep(cfg: &ExperimentConfig, ns: &[usize], fixed_rabi: bool) -> Result<Vec<SweepRow>> {
    let fx = ShinMetiuFixtures::extract(&cfg.build_molecule()?)?;
    let omega = cfg.cavity[0].omega_mh * MH;
    ns.iter()
        .map(|&n| {
            let lambda = sweep_lambda(cfg, n, fixed_rabi);
            let c = match cfg.ensemble.orientation {
                OrientationMode::Aligned => 1.0,
                OrientationMode::Random => (1.0f64 / 3.0).sqrt(),
            };
            let modes = polariton_prediction_projected(&fx.ensemble(n, omega, lambda), &vec![c; n])?;
            Ok(SweepRow {
                n,
                lambda,
                omega_lp: modes.lower_polariton().unwrap_or(f64::NAN),
                omega_up: modes.upper_polariton().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

fn cmd_oracle(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let rows = oracle_sweep(&cfg, &parse_n_list(&a.n_list)?, a.fixed_rabi)?;
    let dir = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    write_sweep_csv(&dir.join("oracle.csv"), &cfg, "oracle", &rows)?;
    for r in &rows {
        println!(
            "N={:<5} LP {:.4} mH  UP {:.4} mH",
            r.n,
            r.omega_lp / MH,
            r.omega_up / MH
        );
    }
    Ok(())
}

fn cmd_check_forces(a: &CheckForcesArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let results = check_forces(&cfg, a.n_samples, FD_STEP)?;
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    for (k, r) in results.iter().enumerate() {
        println!("sample {k}: max relative error {:.3e}", r.max_relative_error);
    }
    println!("max relative force error {worst:.3e} (tolerance {FORCE_TOLERANCE:.0e})");
    if worst > FORCE_TOLERANCE {
        return Err(Error::NumericalFailure(format!(
            "force check failed: relative error {worst:.3e} exceeds {FORCE_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

/// Runs every N (in parallel under the config's execution policy) and
/// extracts LP/UP from each global spectrum. Trajectories go to
/// `dir/N<n>/trajectory.csv` when `dir` is given.
pub fn scaling_sweep(
    cfg: &ExperimentConfig,
    ns: &[usize],
    fixed_rabi: bool,
    spec: &WindowSpec,
    min_prominence: f64,
    dir: Option<&Path>,
) -> Vec<Result<SweepRow>> {
    map_indexed(cfg.run.execution, ns.len(), |k| {
        let n = ns[k];
        let mut c = cfg.clone();
        c.ensemble.n_molecules = n;
        c.cavity[0].lambda = sweep_lambda(cfg, n, fixed_rabi);
        let traj = match dir {
            Some(d) => {
                let sub = d.join(format!("N{n}"));
                write_trajectory(&c, &sub)?;
                read_trajectory(&sub.join("trajectory.csv"))?
            }
            None => run_trajectory(&c)?,
        };
        let s = global_absorption(&traj, spec)?;
        let reference = integrator_frequency(c.cavity[0].omega_mh * MH, c.thermostat.dt)?;
        let p = rabi_analysis_with(&s, reference, min_prominence)?;
        Ok(SweepRow {
            n,
            lambda: c.cavity[0].lambda,
            omega_lp: p.omega_lp,
            omega_up: p.omega_up,
        })
    })
}

fn cmd_scaling(a: &ScalingArgs) -> Result<()> {
    let cfg = load_config(&a.sweep.config)?;
    let ns = parse_n_list(&a.sweep.n_list)?;
    let dir = a.sweep.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let spec = WindowSpec::new(a.window);
    let results = scaling_sweep(&cfg, &ns, a.sweep.fixed_rabi, &spec, a.min_prominence, Some(&dir));
    let mut rows = Vec::new();
    let mut first_err = None;
    for (n, r) in ns.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("N={n}: {e}");
                rows.push(SweepRow {
                    n: *n,
                    lambda: sweep_lambda(&cfg, *n, a.sweep.fixed_rabi),
                    omega_lp: f64::NAN,
                    omega_up: f64::NAN,
                });
                first_err.get_or_insert(e);
            }
        }
    }
    write_sweep_csv(&dir.join("scaling.csv"), &cfg, "scaling", &rows)?;
    for r in &rows {
        println!(
            "N={:<5} Rabi {:.4} mH  midpoint {:.4} mH",
            r.n,
            (r.omega_up - r.omega_lp) / MH,
            0.5 * (r.omega_up + r.omega_lp) / MH
        );
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_list_parsing() {
        assert_eq!(parse_n_list("1, 4,16,64").unwrap(), vec![1, 4, 16, 64]);
        assert!(parse_n_list("1,x").is_err());
        assert!(parse_n_list("0,2").is_err());
        assert!(parse_n_list("").is_err());
    }

    #[test]
    fn error_line_format() {
        let e = Error::Step {
            step: 17,
            source: Box::new(Error::NoConvergence {
                iterations: 200,
                last_delta: 1e-3,
            }),
        };
        let mut buf = Vec::new();
        report_error(&mut buf, &e);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().last().unwrap(), "ERROR code=no-convergence step=17");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
