//! Shin-Metiu model molecule: one moving proton between two fixed ions and
//! one electron, all interactions erf-softened Coulomb.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ground_state, kinetic_operator, DenseOperator, Grid1D, WaveFunction1D};

/// Below `|d| < SERIES_CUTOFF · R_soft` the erf kernels use their Taylor series.
const SERIES_CUTOFF: f64 = 0.02;
const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShinMetiuParams {
    /// Fixed-ion separation (bohr).
    pub l: f64,
    pub r_f: f64,
    pub r_l: f64,
    pub r_r: f64,
    /// Moving-nucleus mass (a.u.).
    pub mass: f64,
    /// Moving-nucleus charge.
    pub charge: f64,
}

impl Default for ShinMetiuParams {
    fn default() -> Self {
        Self {
            l: 9.45,
            r_f: 1.511,
            r_l: 1.511,
            r_r: 1.511,
            mass: 1836.0,
            charge: 1.0,
        }
    }
}

impl ShinMetiuParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("molecule.l", self.l),
            ("molecule.r_f", self.r_f),
            ("molecule.r_l", self.r_l),
            ("molecule.r_r", self.r_r),
            ("molecule.mass", self.mass),
            ("molecule.charge", self.charge),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn half_l(&self) -> f64 {
        0.5 * self.l
    }

    pub fn check_geometry(&self, r: f64) -> Result<()> {
        if r.is_finite() && r.abs() < self.half_l() {
            Ok(())
        } else {
            Err(Error::Domain {
                r,
                half_l: self.half_l(),
            })
        }
    }
}

/// erf(|d|/R_soft)/|d|, with the limit 2/(√π R_soft) at d = 0.
pub fn soft_coulomb(d: f64, r_soft: f64) -> f64 {
    let u = d.abs();
    let x = u / r_soft;
    if x < SERIES_CUTOFF {
        let x2 = x * x;
        TWO_OVER_SQRT_PI / r_soft * (1.0 - x2 / 3.0 + x2 * x2 / 10.0 - x2 * x2 * x2 / 42.0)
    } else {
        libm::erf(x) / u
    }
}

/// d/dd of [`soft_coulomb`]; odd in d and zero at d = 0.
pub fn soft_coulomb_derivative(d: f64, r_soft: f64) -> f64 {
    let y = d / r_soft;
    if y.abs() < SERIES_CUTOFF {
        let y2 = y * y;
        TWO_OVER_SQRT_PI / (r_soft * r_soft) * y * (-2.0 / 3.0 + y2 * (2.0 / 5.0 + y2 * (-1.0 / 7.0 + y2 / 27.0)))
    } else {
        let u = d.abs();
        let g = TWO_OVER_SQRT_PI * (-y * y).exp() / (r_soft * u) - libm::erf(u / r_soft) / (u * u);
        g * d.signum()
    }
}

/// Electron potential V(r_i; R) on the grid.
pub fn electron_potential(grid: &Grid1D, r: f64, p: &ShinMetiuParams) -> Result<Vec<f64>> {
    p.check_geometry(r)?;
    let h = p.half_l();
    Ok(grid
        .points()
        .iter()
        .map(|&x| -p.charge * soft_coulomb(x - r, p.r_f) - soft_coulomb(x - h, p.r_r) - soft_coulomb(x + h, p.r_l))
        .collect())
}

/// Repulsion of the moving nucleus from the two fixed ions.
pub fn nuclear_potential(r: f64, p: &ShinMetiuParams) -> Result<f64> {
    p.check_geometry(r)?;
    let h = p.half_l();
    Ok(p.charge * (1.0 / (h - r) + 1.0 / (h + r)))
}

pub fn nuclear_potential_gradient(r: f64, p: &ShinMetiuParams) -> Result<f64> {
    p.check_geometry(r)?;
    let h = p.half_l();
    Ok(p.charge * (1.0 / ((h - r) * (h - r)) - 1.0 / ((h + r) * (h + r))))
}

/// −∂V(r_i; R)/∂R on the grid. Contracting with |ψ_i|² gives the
/// Hellmann-Feynman electron-nucleus force.
pub fn electron_nuclear_force_kernel(grid: &Grid1D, r: f64, p: &ShinMetiuParams) -> Result<Vec<f64>> {
    p.check_geometry(r)?;
    Ok(grid
        .points()
        .iter()
        .map(|&x| -p.charge * soft_coulomb_derivative(x - r, p.r_f))
        .collect())
}

/// Molecular dipole Z·R − ⟨r⟩; the fixed ions at ±L/2 cancel.
pub fn molecular_dipole(r: f64, r_mean: f64, p: &ShinMetiuParams) -> f64 {
    p.charge * r - r_mean
}

/// A Shin-Metiu molecule bound to a grid, with the kinetic matrix cached.
#[derive(Debug, Clone)]
pub struct ShinMetiu {
    pub params: ShinMetiuParams,
    pub grid: Grid1D,
    kinetic: DenseOperator,
}

/// Bare electronic ground state at one geometry.
#[derive(Debug, Clone)]
pub struct BareState {
    pub electronic_energy: f64,
    pub psi: WaveFunction1D,
    pub r_mean: f64,
}

impl ShinMetiu {
    pub fn new(params: ShinMetiuParams, grid: Grid1D) -> Result<Self> {
        params.validate()?;
        let kinetic = kinetic_operator(&grid, 1.0)?;
        Ok(Self { params, grid, kinetic })
    }

    pub fn kinetic(&self) -> &DenseOperator {
        &self.kinetic
    }

    /// Bare electronic Hamiltonian Ĥ^e(R) = p̂²/2 + V(r; R).
    pub fn electronic_hamiltonian(&self, r: f64) -> Result<DenseOperator> {
        let v = electron_potential(&self.grid, r, &self.params)?;
        let mut h = self.kinetic.clone();
        h.add_diagonal(&v);
        Ok(h)
    }

    pub fn bare_ground_state(&self, r: f64) -> Result<BareState> {
        self.field_ground_state(r, 0.0)
    }

    /// Ground state of Ĥ^e(R) + F·r̂.
    pub fn field_ground_state(&self, r: f64, field: f64) -> Result<BareState> {
        let mut h = self.electronic_hamiltonian(r)?;
        if field != 0.0 {
            let lin: Vec<f64> = self.grid.points().iter().map(|x| field * x).collect();
            h.add_diagonal(&lin);
        }
        let (e, psi) = ground_state(&h)?;
        let r_mean = psi.diagonal_expectation(self.grid.points());
        Ok(BareState {
            electronic_energy: e - field * r_mean,
            psi,
            r_mean,
        })
    }

    /// Born-Oppenheimer energy E_0(R) = ε_0(R) + H^n(R).
    pub fn bo_energy(&self, r: f64) -> Result<f64> {
        Ok(self.bare_ground_state(r)?.electronic_energy + nuclear_potential(r, &self.params)?)
    }

    /// Minimum of the bare Born-Oppenheimer surface on R > 0 (golden section).
    pub fn bo_minimum(&self) -> Result<f64> {
        let h = self.params.half_l();
        // coarse scan, then refine around the best point
        let n_scan = 64;
        let lo_lim = 0.0;
        let hi_lim = h - 0.3;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=n_scan {
            let r = lo_lim + (hi_lim - lo_lim) * k as f64 / n_scan as f64;
            let e = self.bo_energy(r)?;
            if e < best.0 {
                best = (e, r);
            }
        }
        let step = (hi_lim - lo_lim) / n_scan as f64;
        let (mut a, mut b) = ((best.1 - step).max(lo_lim), (best.1 + step).min(hi_lim));
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (self.bo_energy(c)?, self.bo_energy(d)?);
        while b - a > 1e-9 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.bo_energy(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.bo_energy(d)?;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// √(E_0''/M) at `r` from a five-point second difference.
    pub fn harmonic_frequency(&self, r: f64) -> Result<f64> {
        let k = self.bo_curvature(r)?;
        if !(k > 0.0) {
            return Err(Error::ImaginaryFrequency {
                index: 0,
                eigenvalue: k,
            });
        }
        Ok((k / self.params.mass).sqrt())
    }

    pub fn bo_curvature(&self, r: f64) -> Result<f64> {
        let h = 1e-3;
        let e = |x: f64| self.bo_energy(x);
        Ok((-e(r + 2.0 * h)? + 16.0 * e(r + h)? - 30.0 * e(r)? + 16.0 * e(r - h)? - e(r - 2.0 * h)?) / (12.0 * h * h))
    }
}

/// Reference value of the bare fundamental used for thermal initialization.
pub const REFERENCE_VIBRATIONAL_FREQUENCY: f64 = 6.27e-3;
