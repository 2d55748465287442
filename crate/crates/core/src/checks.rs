//! Finite-difference verification of the analytic forces.

use rand::Rng;

use crate::config::{ExperimentConfig, OrientationMode};
use crate::dynamics::{random_unit_vector, RngStreams, StreamKind};
use crate::error::Result;
use crate::hartree::{CavityHartree, EnsembleState, ScfOptions};

/// Forces below this magnitude (hartree/bohr) are compared in absolute terms.
pub const FORCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ForceComparison {
    /// Analytic forces on (R_1…R_N, q_1…q_M).
    pub analytic: Vec<f64>,
    /// −dE/dx from central differences of reconverged energies.
    pub finite_difference: Vec<f64>,
    pub max_relative_error: f64,
}

/// Central-difference forces at `state` with step `h`.
pub fn finite_difference_forces(solver: &CavityHartree, state: &EnsembleState, h: f64) -> Result<Vec<f64>> {
    let n = state.n_molecules();
    let m = state.n_modes();
    let energy = |st: &EnsembleState| -> Result<f64> { Ok(solver.solve(st, None)?.energy.total) };
    let mut out = Vec::with_capacity(n + m);
    for k in 0..n + m {
        let mut plus = state.clone();
        let mut minus = state.clone();
        if k < n {
            plus.r[k] += h;
            minus.r[k] -= h;
        } else {
            plus.q[k - n] += h;
            minus.q[k - n] -= h;
        }
        out.push(-(energy(&plus)? - energy(&minus)?) / (2.0 * h));
    }
    Ok(out)
}

/// Analytic versus finite-difference forces at one configuration.
pub fn compare_forces(solver: &CavityHartree, state: &EnsembleState, h: f64) -> Result<ForceComparison> {
    let sol = solver.solve(state, None)?;
    let mut analytic = solver.nuclear_forces(&sol, state)?;
    analytic.extend(solver.photon_forces(&sol, state)?);
    let finite_difference = finite_difference_forces(solver, state, h)?;
    let max_relative_error = analytic
        .iter()
        .zip(&finite_difference)
        .map(|(a, f)| (a - f).abs() / f.abs().max(FORCE_FLOOR))
        .fold(0.0, f64::max);
    Ok(ForceComparison {
        analytic,
        finite_difference,
        max_relative_error,
    })
}

/// A random configuration near the bare minimum, with the cavity displaced
/// around its relaxed position.
pub fn random_configuration(solver: &CavityHartree, cfg: &ExperimentConfig, sample: u64) -> Result<EnsembleState> {
    let n = cfg.ensemble.n_molecules;
    let modes = solver.modes();
    let r0 = solver.molecule().bo_minimum()?;
    let mut rng = RngStreams::stream(cfg.seed, StreamKind::Sampling, sample);
    let mut st = EnsembleState::at_rest(vec![r0; n], modes.len());
    for i in 0..n {
        st.r[i] = r0 + rng.random_range(-0.3..0.3);
        if cfg.ensemble.orientation == OrientationMode::Random {
            st.orient[i] = random_unit_vector(&mut rng);
        }
    }
    let sol = solver.solve(&st, None)?;
    let mut q = Vec::with_capacity(modes.len());
    for (a, md) in modes.iter().enumerate() {
        let x = solver.electronic_polarization(&st, &sol, a)?;
        let big_x = solver.nuclear_polarization(&st, a)?;
        q.push((big_x + x) / md.omega + rng.random_range(-1.0..1.0) * 0.02 / md.omega);
    }
    st.q = q;
    Ok(st)
}

/// Compares forces at `n_samples` random configurations of `cfg`'s ensemble
/// with tight SCF settings.
pub fn check_forces(cfg: &ExperimentConfig, n_samples: usize, h: f64) -> Result<Vec<ForceComparison>> {
    let solver = cfg.build_solver()?.with_options(ScfOptions::tight())?;
    (0..n_samples as u64)
        .map(|k| {
            let st = random_configuration(&solver, cfg, k)?;
            compare_forces(&solver, &st, h)
        })
        .collect()
}
