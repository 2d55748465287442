//! Normal modes of N harmonic molecules coupled to one cavity mode.
//!
//! Each molecule has a vibrational coordinate u_n with frequency ω_v and
//! dipole slope μ′, and a harmonic electronic dipole d_n with polarizability
//! α_e. With the cavity coordinate q the potential is
//!
//! ```text
//! V = Σ_n [½ M ω_v² u_n² + d_n²/(2α_e)] + ½ (ω q − Σ_n λ_n (μ′ u_n + d_n))²
//! ```
//!
//! Minimizing over the d_n gives ½ κ (ω q − μ′ Σ λ_n u_n)² with
//! κ = 1/(1 + α_e Σ λ_n²), so the mass-weighted Hessian in (√M u_n, q) is
//!
//! ```text
//! H_nm = ω_v² δ_nm + κ μ′² λ_n λ_m / M
//! H_nq = −κ μ′ λ_n ω / √M
//! H_qq = κ ω²
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diagonalize, DenseOperator};
use crate::shin_metiu::ShinMetiu;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicEnsembleParams {
    pub n_molecules: usize,
    /// Bare vibrational frequency (hartree).
    pub omega_vib: f64,
    /// dμ/dR (a.u.).
    pub mu_prime: f64,
    pub mass: f64,
    pub omega_cavity: f64,
    pub lambda: f64,
    /// Static electronic polarizability (a.u.).
    pub alpha_e: f64,
}

impl HarmonicEnsembleParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_molecules == 0 {
            return Err(Error::invalid("at least one molecule is required"));
        }
        for (name, v) in [
            ("omega_vib", self.omega_vib),
            ("mass", self.mass),
            ("omega_cavity", self.omega_cavity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("alpha_e", self.alpha_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.mu_prime.is_finite() {
            return Err(Error::invalid("mu_prime must be finite"));
        }
        Ok(())
    }

    /// κ = 1/(1 + α_e Σ λ_n²) for the given orientation projections.
    pub fn screening(&self, projections: &[f64]) -> f64 {
        let s: f64 = projections.iter().map(|c| (self.lambda * c).powi(2)).sum();
        1.0 / (1.0 + self.alpha_e * s)
    }
}

/// Mass-weighted Hessian for aligned molecules; the cavity is the last index.
pub fn build_hessian(p: &HarmonicEnsembleParams) -> Result<DenseOperator> {
    build_hessian_projected(p, &vec![1.0; p.n_molecules])
}

/// Hessian with per-molecule couplings λ·c_n (c_n = e_z·n_n).
pub fn build_hessian_projected(p: &HarmonicEnsembleParams, projections: &[f64]) -> Result<DenseOperator> {
    p.validate()?;
    let n = p.n_molecules;
    if projections.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: projections.len(),
        });
    }
    let kappa = p.screening(projections);
    let lam: Vec<f64> = projections.iter().map(|c| p.lambda * c).collect();
    let sm = p.mass.sqrt();
    Ok(DenseOperator::from_fn(n + 1, |i, j| match (i < n, j < n) {
        (true, true) => {
            let d = if i == j { p.omega_vib * p.omega_vib } else { 0.0 };
            d + kappa * p.mu_prime * p.mu_prime * lam[i] * lam[j] / p.mass
        }
        (true, false) => -kappa * p.mu_prime * lam[i] * p.omega_cavity / sm,
        (false, true) => -kappa * p.mu_prime * lam[j] * p.omega_cavity / sm,
        (false, false) => kappa * p.omega_cavity * p.omega_cavity,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalModes {
    /// Ascending (hartree).
    pub frequencies: Vec<f64>,
    /// Squared cavity component of each normalized mode.
    pub participation: Vec<f64>,
}

impl NormalModes {
    /// Indices of the two modes with the largest cavity weight, low first.
    pub fn polariton_indices(&self) -> Option<(usize, usize)> {
        if self.frequencies.len() < 2 {
            return None;
        }
        let mut idx: Vec<usize> = (0..self.frequencies.len()).collect();
        idx.sort_by(|&a, &b| self.participation[b].total_cmp(&self.participation[a]).then(a.cmp(&b)));
        let (a, b) = (idx[0].min(idx[1]), idx[0].max(idx[1]));
        Some((a, b))
    }

    pub fn lower_polariton(&self) -> Option<f64> {
        self.polariton_indices().map(|(a, _)| self.frequencies[a])
    }

    pub fn upper_polariton(&self) -> Option<f64> {
        self.polariton_indices().map(|(_, b)| self.frequencies[b])
    }

    pub fn rabi(&self) -> Option<f64> {
        Some(self.upper_polariton()? - self.lower_polariton()?)
    }

    pub fn midpoint(&self) -> Option<f64> {
        Some(0.5 * (self.upper_polariton()? + self.lower_polariton()?))
    }
}

/// Normal-mode frequencies and cavity participations of a Hessian whose
/// last coordinate is the cavity.
pub fn normal_modes(h: &DenseOperator) -> Result<NormalModes> {
    let eig = diagonalize(h)?;
    let n = h.dim();
    let mut frequencies = Vec::with_capacity(n);
    let mut participation = Vec::with_capacity(n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev < 0.0 {
            return Err(Error::ImaginaryFrequency {
                index: k,
                eigenvalue: ev,
            });
        }
        frequencies.push(ev.sqrt());
        let v = eig.eigenvectors[k].amplitudes();
        participation.push(v[n - 1] * v[n - 1]);
    }
    Ok(NormalModes {
        frequencies,
        participation,
    })
}

pub fn polariton_prediction(p: &HarmonicEnsembleParams) -> Result<NormalModes> {
    normal_modes(&build_hessian(p)?)
}

pub fn polariton_prediction_projected(p: &HarmonicEnsembleParams, projections: &[f64]) -> Result<NormalModes> {
    normal_modes(&build_hessian_projected(p, projections)?)
}

/// Frequency at which a velocity-Verlet (or OBABO) integrator with step `dt`
/// oscillates on a harmonic mode of frequency `omega`.
pub fn integrator_frequency(omega: f64, dt: f64) -> Result<f64> {
    let x = 0.5 * omega * dt;
    if !(omega >= 0.0 && dt > 0.0 && x < 1.0) {
        return Err(Error::invalid(format!(
            "ω dt = {} outside the stable range [0, 2)",
            omega * dt
        )));
    }
    Ok(2.0 * x.asin() / dt)
}

/// Harmonic parameters of a Shin-Metiu molecule at its positive minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShinMetiuFixtures {
    pub r0: f64,
    pub omega_vib: f64,
    /// Permanent dipole Z R₀ − ⟨r⟩ at the minimum.
    pub mu0: f64,
    pub mu_prime: f64,
    pub alpha_e: f64,
    pub mass: f64,
}

impl ShinMetiuFixtures {
    pub fn extract(model: &ShinMetiu) -> Result<Self> {
        let r0 = model.bo_minimum()?;
        let omega_vib = model.harmonic_frequency(r0)?;
        let z = model.params.charge;
        let mu = |r: f64| -> Result<f64> { Ok(z * r - model.bare_ground_state(r)?.r_mean) };
        let h = 1e-3;
        let mu_prime = (-mu(r0 + 2.0 * h)? + 8.0 * mu(r0 + h)? - 8.0 * mu(r0 - h)? + mu(r0 - 2.0 * h)?) / (12.0 * h);
        let f = 1e-4;
        let e = |field: f64| -> Result<f64> {
            let s = model.field_ground_state(r0, field)?;
            Ok(s.electronic_energy + field * s.r_mean)
        };
        let alpha_e = -(-e(2.0 * f)? + 16.0 * e(f)? - 30.0 * e(0.0)? + 16.0 * e(-f)? - e(-2.0 * f)?) / (12.0 * f * f);
        Ok(Self {
            r0,
            omega_vib,
            mu0: mu(r0)?,
            mu_prime,
            alpha_e,
            mass: model.params.mass,
        })
    }

    pub fn ensemble(&self, n_molecules: usize, omega_cavity: f64, lambda: f64) -> HarmonicEnsembleParams {
        HarmonicEnsembleParams {
            n_molecules,
            omega_vib: self.omega_vib,
            mu_prime: self.mu_prime,
            mass: self.mass,
            omega_cavity,
            lambda,
            alpha_e: self.alpha_e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, lambda: f64, alpha_e: f64) -> HarmonicEnsembleParams {
        HarmonicEnsembleParams {
            n_molecules: n,
            omega_vib: 6.27e-3,
            mu_prime: 0.227,
            mass: 1836.0,
            omega_cavity: 6.27e-3,
            lambda,
            alpha_e,
        }
    }

    #[test]
    fn integrator_frequency_limits() {
        let w = 6.27e-3;
        let f = integrator_frequency(w, 50.0).unwrap();
        assert!((f / w - 1.0 - (w * 50.0).powi(2) / 24.0).abs() < 1e-4);
        assert!((integrator_frequency(w, 1e-3).unwrap() - w).abs() < 1e-10 * w);
        assert!(integrator_frequency(w, 400.0).is_err());
    }

    #[test]
    fn uncoupled_modes_are_bare() {
        let p = HarmonicEnsembleParams {
            omega_cavity: 5.0e-3,
            ..params(3, 0.0, 15.0)
        };
        let h = build_hessian(&p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(h.get(i, j), 0.0);
                }
            }
        }
        let m = polariton_prediction(&p).unwrap();
        assert!((m.frequencies[0] - 5.0e-3).abs() < 1e-15);
        for f in &m.frequencies[1..] {
            assert!((f - 6.27e-3).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let p = HarmonicEnsembleParams {
            omega_cavity: 6.0e-3,
            ..params(1, 0.05, 0.0)
        };
        let g = p.lambda * p.mu_prime / p.mass.sqrt();
        let a = p.omega_vib.powi(2) + g * g;
        let c = p.omega_cavity.powi(2);
        let b = -g * p.omega_cavity;
        let disc = ((a - c).powi(2) + 4.0 * b * b).sqrt();
        let lo = (0.5 * (a + c - disc)).sqrt();
        let hi = (0.5 * (a + c + disc)).sqrt();
        let m = polariton_prediction(&p).unwrap();
        assert!((m.frequencies[0] - lo).abs() < 1e-14);
        assert!((m.frequencies[1] - hi).abs() < 1e-14);
    }

    #[test]
    fn resonant_splitting_to_first_order() {
        let p = params(1, 0.001, 0.0);
        let m = polariton_prediction(&p).unwrap();
        let expected = p.lambda * p.mu_prime / p.mass.sqrt();
        assert!((m.rabi().unwrap() / expected - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sqrt_n_law_and_fixed_rabi() {
        let r1 = polariton_prediction(&params(1, 0.002, 0.0)).unwrap().rabi().unwrap();
        for n in [4, 16] {
            let r = polariton_prediction(&params(n, 0.002, 0.0)).unwrap().rabi().unwrap();
            assert!((r / r1 / (n as f64).sqrt() - 1.0).abs() < 0.01, "N={n}");
        }
        for n in [1, 4, 64, 256] {
            let lam = 0.032 / (n as f64).sqrt();
            let r = polariton_prediction(&params(n, lam, 0.0)).unwrap().rabi().unwrap();
            let r0 = polariton_prediction(&params(1, 0.032, 0.0)).unwrap().rabi().unwrap();
            assert!((r / r0 - 1.0).abs() < 0.01, "N={n}");
        }
    }

    #[test]
    fn polarizability_redshifts_the_midpoint() {
        let mut last = f64::INFINITY;
        for alpha in [0.0, 5.0, 15.0, 30.0] {
            let mid = polariton_prediction(&params(100, 0.0085, alpha))
                .unwrap()
                .midpoint()
                .unwrap();
            assert!(mid < last);
            last = mid;
        }
    }

    #[test]
    fn dark_modes_sit_at_the_bare_frequency() {
        let m = polariton_prediction(&params(5, 0.01, 15.0)).unwrap();
        let (lp, up) = m.polariton_indices().unwrap();
        for (k, f) in m.frequencies.iter().enumerate() {
            if k != lp && k != up {
                assert!((f - 6.27e-3).abs() < 1e-12);
                assert!(m.participation[k] < 1e-20);
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_hessian(&params(0, 0.01, 1.0)).is_err());
        assert!(build_hessian(&params(2, -0.01, 1.0)).is_err());
    }
}
