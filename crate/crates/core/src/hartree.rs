//! Self-consistent cavity-Hartree electronic structure for an ensemble of
//! Shin-Metiu molecules coupled to cavity modes polarized along z.
//!
//! Molecule n sees
//!
//! ```text
//! Ĥ_n = Ĥ_n^e + Σ_α [ c_{n,α} x̂_{n,α} + x̂_{n,α}²/2 ],   x̂_{n,α} = −λ_{α,n} r̂
//! c_{n,α} = X_α − ω_α q_α + Σ_{m≠n} ⟨x̂_{m,α}⟩
//! ```
//!
//! and the molecules only talk to each other through their mean dipoles.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ground_state, ground_state_near, DenseOperator, WaveFunction1D};
use crate::par::{try_map_indexed, Execution};
use crate::shin_metiu::{
    electron_nuclear_force_kernel, electron_potential, nuclear_potential, nuclear_potential_gradient, ShinMetiu,
};

pub const E_Z: [f64; 3] = [0.0, 0.0, 1.0];

/// One cavity mode, polarized along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityMode {
    /// ω_α (hartree).
    pub omega: f64,
    /// λ_α (a.u.).
    pub lambda: f64,
}

impl CavityMode {
    pub fn new(omega: f64, lambda: f64) -> Result<Self> {
        let m = Self { omega, lambda };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::invalid(format!(
                "cavity frequency must be positive, got {}",
                self.omega
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "coupling must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Classical coordinates of the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    /// Nuclear positions R_n (bohr).
    pub r: Vec<f64>,
    /// Nuclear velocities.
    pub v: Vec<f64>,
    /// Cavity displacement coordinates q_α.
    pub q: Vec<f64>,
    /// Cavity momenta p_α.
    pub p: Vec<f64>,
    /// Unit orientation vectors n_n.
    pub orient: Vec<[f64; 3]>,
    pub time: f64,
}

impl EnsembleState {
    /// Aligned molecules at rest, cavity at q = p = 0.
    pub fn at_rest(r: Vec<f64>, n_modes: usize) -> Self {
        let n = r.len();
        Self {
            r,
            v: vec![0.0; n],
            q: vec![0.0; n_modes],
            p: vec![0.0; n_modes],
            orient: vec![E_Z; n],
            time: 0.0,
        }
    }

    pub fn n_molecules(&self) -> usize {
        self.r.len()
    }

    pub fn n_modes(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.r.len();
        if n == 0 {
            return Err(Error::invalid("ensemble has no molecules"));
        }
        for (len, what) in [(self.v.len(), n), (self.orient.len(), n)] {
            if len != what {
                return Err(Error::DimensionMismatch {
                    expected: what,
                    got: len,
                });
            }
        }
        if self.p.len() != self.q.len() {
            return Err(Error::DimensionMismatch {
                expected: self.q.len(),
                got: self.p.len(),
            });
        }
        for (i, o) in self.orient.iter().enumerate() {
            let norm = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            if !((norm - 1.0).abs() <= 1e-12) {
                return Err(Error::invalid(format!("orientation {i} has norm {norm}")));
            }
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !(finite(&self.r) && finite(&self.v) && finite(&self.q) && finite(&self.p)) {
            return Err(Error::NumericalFailure("non-finite classical coordinate".into()));
        }
        Ok(())
    }
}

/// Terms of the variational Hartree energy (hartree).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// Σ⟨Ĥ_n^e⟩ + Σ H_n^n.
    pub bare: f64,
    /// Σ ⟨x̂²⟩/2.
    pub dse_local: f64,
    /// Σ (X_α − ω_α q_α)⟨x̂_{n,α}⟩.
    pub coupling: f64,
    /// ½·V_dd.
    pub dipole_dipole: f64,
    /// Σ p²/2 + ω²/2 (q − X/ω)².
    pub photon: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn assemble(bare: f64, dse_local: f64, coupling: f64, dipole_dipole: f64, photon: f64) -> Self {
        Self {
            bare,
            dse_local,
            coupling,
            dipole_dipole,
            photon,
            total: bare + dse_local + coupling + dipole_dipole + photon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScfOptions {
    /// Convergence threshold on the total-energy change between sweeps (hartree).
    pub energy_tol: f64,
    /// Convergence threshold on max |⟨r⟩_out − ⟨r⟩_in| within a sweep (bohr).
    pub dipole_tol: f64,
    pub max_iter: usize,
    /// Linear mixing fraction on the mean dipoles.
    pub mixing: f64,
    /// Anderson history length; 0 disables acceleration.
    pub anderson_depth: usize,
}

impl Default for ScfOptions {
    fn default() -> Self {
        Self {
            energy_tol: 1e-7,
            dipole_tol: 1e-7,
            max_iter: 200,
            mixing: 1.0,
            anderson_depth: 4,
        }
    }
}

impl ScfOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_tol > 0.0) {
            return Err(Error::validation("scf.energy_tol", "must be positive"));
        }
        if !(self.dipole_tol > 0.0) {
            return Err(Error::validation("scf.dipole_tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("scf.max_iter", "must be at least 1"));
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return Err(Error::validation("scf.mixing", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Tight settings for finite-difference checks.
    pub fn tight() -> Self {
        Self {
            energy_tol: 1e-13,
            dipole_tol: 1e-11,
            max_iter: 500,
            ..Self::default()
        }
    }
}

/// Converged per-molecule ground states and derived quantities.
#[derive(Debug, Clone)]
pub struct ElectronicSolution {
    pub psi: Vec<WaveFunction1D>,
    /// Dressed eigenvalues ε_n.
    pub eps: Vec<f64>,
    /// ⟨r̂⟩_n.
    pub r_mean: Vec<f64>,
    /// ⟨r̂²⟩_n.
    pub r2_mean: Vec<f64>,
    /// ⟨Ĥ_n^e⟩ without any cavity term.
    pub electronic_energy: Vec<f64>,
    pub energy: EnergyBreakdown,
    pub iterations: usize,
    /// max |⟨r⟩_out − ⟨r⟩_in| of the last sweep.
    pub residual: f64,
    key: Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    r: Vec<f64>,
    q: Vec<f64>,
    cos: Vec<f64>,
}

impl Snapshot {
    fn of(state: &EnsembleState) -> Self {
        Self {
            r: state.r.clone(),
            q: state.q.clone(),
            cos: state.orient.iter().map(|o| o[2]).collect(),
        }
    }

    fn matches(&self, state: &EnsembleState) -> bool {
        self.r == state.r
            && self.q == state.q
            && self.cos.iter().zip(&state.orient).all(|(c, o)| *c == o[2])
            && self.cos.len() == state.orient.len()
    }
}

impl ElectronicSolution {
    pub fn n_molecules(&self) -> usize {
        self.r_mean.len()
    }

    /// Whether this solution was computed for `state`'s geometry, field and orientations.
    pub fn belongs_to(&self, state: &EnsembleState) -> bool {
        self.key.matches(state)
    }
}

/// Cavity-dressed ensemble solver. One per trajectory.
#[derive(Debug, Clone)]
pub struct CavityHartree {
    molecule: ShinMetiu,
    modes: Vec<CavityMode>,
    options: ScfOptions,
    execution: Execution,
    r2: Vec<f64>,
}

/// Per-solve quantities that do not change between sweeps.
struct Context {
    n: usize,
    m: usize,
    /// λ_{α,n} at `n * m + α`.
    lam: Vec<f64>,
    /// X_α − ω_α q_α.
    base: Vec<f64>,
    potentials: Vec<Vec<f64>>,
}

struct MoleculeResult {
    eps: f64,
    psi: WaveFunction1D,
    r: f64,
    r2: f64,
    e_el: f64,
}

impl CavityHartree {
    pub fn new(molecule: ShinMetiu, modes: Vec<CavityMode>, options: ScfOptions) -> Result<Self> {
        for m in &modes {
            m.validate()?;
        }
        options.validate()?;
        let r2 = molecule.grid.points().iter().map(|x| x * x).collect();
        Ok(Self {
            molecule,
            modes,
            options,
            execution: Execution::default(),
            r2,
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn with_options(mut self, options: ScfOptions) -> Result<Self> {
        options.validate()?;
        self.options = options;
        Ok(self)
    }

    pub fn molecule(&self) -> &ShinMetiu {
        &self.molecule
    }

    pub fn modes(&self) -> &[CavityMode] {
        &self.modes
    }

    pub fn options(&self) -> &ScfOptions {
        &self.options
    }

    pub fn execution(&self) -> Execution {
        self.execution
    }

    fn check_modes(&self, state: &EnsembleState) -> Result<()> {
        if state.n_modes() != self.modes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.modes.len(),
                got: state.n_modes(),
            });
        }
        Ok(())
    }

    /// λ_{α,n} = λ_α (e_z · n_n).
    pub fn effective_coupling(&self, n: usize, alpha: usize, state: &EnsembleState) -> Result<f64> {
        let mode = self.modes.get(alpha).ok_or(Error::IndexOutOfRange {
            index: alpha,
            len: self.modes.len(),
        })?;
        let o = state.orient.get(n).ok_or(Error::IndexOutOfRange {
            index: n,
            len: state.orient.len(),
        })?;
        Ok(mode.lambda * o[2])
    }

    /// X_α = Σ_n λ_{α,n} Z R_n.
    pub fn nuclear_polarization(&self, state: &EnsembleState, alpha: usize) -> Result<f64> {
        let mode = self.modes.get(alpha).ok_or(Error::IndexOutOfRange {
            index: alpha,
            len: self.modes.len(),
        })?;
        let z = self.molecule.params.charge;
        Ok(state
            .r
            .iter()
            .zip(&state.orient)
            .map(|(r, o)| mode.lambda * o[2] * z * r)
            .sum())
    }

    fn context(&self, state: &EnsembleState) -> Result<Context> {
        state.validate()?;
        self.check_modes(state)?;
        let (n, m) = (state.n_molecules(), self.modes.len());
        let mut lam = Vec::with_capacity(n * m);
        for o in &state.orient {
            lam.extend(self.modes.iter().map(|md| md.lambda * o[2]));
        }
        let mut base = Vec::with_capacity(m);
        for (a, md) in self.modes.iter().enumerate() {
            base.push(self.nuclear_polarization(state, a)? - md.omega * state.q[a]);
        }
        let potentials = try_map_indexed(self.execution, n, |i| {
            electron_potential(&self.molecule.grid, state.r[i], &self.molecule.params)
        })?;
        Ok(Context {
            n,
            m,
            lam,
            base,
            potentials,
        })
    }

    /// Σ_n ⟨x̂_{n,α}⟩ for every mode, summed in molecule order.
    fn total_polarizations(ctx: &Context, r_mean: &[f64]) -> Vec<f64> {
        let mut xt = vec![0.0; ctx.m];
        for (i, r) in r_mean.iter().enumerate() {
            for (a, x) in xt.iter_mut().enumerate() {
                *x -= ctx.lam[i * ctx.m + a] * r;
            }
        }
        xt
    }

    /// Linear and quadratic coefficients of r̂ in molecule i's cavity term.
    fn field_coefficients(ctx: &Context, xt: &[f64], r_mean: &[f64], i: usize) -> (f64, f64) {
        let mut a = 0.0;
        let mut b = 0.0;
        for al in 0..ctx.m {
            let l = ctx.lam[i * ctx.m + al];
            let c = ctx.base[al] + xt[al] + l * r_mean[i];
            a -= l * c;
            b += 0.5 * l * l;
        }
        (a, b)
    }

    fn dressed_from(&self, potential: &[f64], a: f64, b: f64) -> DenseOperator {
        let mut h = self.molecule.kinetic().clone();
        let diag: Vec<f64> = potential
            .iter()
            .zip(self.molecule.grid.points())
            .zip(&self.r2)
            .map(|((v, x), x2)| v + a * x + b * x2)
            .collect();
        h.add_diagonal(&diag);
        h
    }

    /// Dressed Hamiltonian of molecule `n` given every ⟨x̂_{m,α}⟩
    /// (`mean_dipoles[α][m]`).
    pub fn dressed_hamiltonian(
        &self,
        n: usize,
        state: &EnsembleState,
        mean_dipoles: &[Vec<f64>],
    ) -> Result<DenseOperator> {
        state.validate()?;
        self.check_modes(state)?;
        let nm = state.n_molecules();
        if n >= nm {
            return Err(Error::IndexOutOfRange { index: n, len: nm });
        }
        if mean_dipoles.len() != self.modes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.modes.len(),
                got: mean_dipoles.len(),
            });
        }
        let mut a = 0.0;
        let mut b = 0.0;
        for (al, (md, xs)) in self.modes.iter().zip(mean_dipoles).enumerate() {
            if xs.len() != nm {
                return Err(Error::DimensionMismatch {
                    expected: nm,
                    got: xs.len(),
                });
            }
            let l = self.effective_coupling(n, al, state)?;
            let others: f64 = xs.iter().enumerate().filter(|(m, _)| *m != n).map(|(_, x)| x).sum();
            let c = self.nuclear_polarization(state, al)? - md.omega * state.q[al] + others;
            a -= l * c;
            b += 0.5 * l * l;
        }
        let v = electron_potential(&self.molecule.grid, state.r[n], &self.molecule.params)?;
        Ok(self.dressed_from(&v, a, b))
    }

    fn sweep(&self, ctx: &Context, r_in: &[f64], psi: Option<&[WaveFunction1D]>) -> Result<Vec<MoleculeResult>> {
        let xt = Self::total_polarizations(ctx, r_in);
        let x = self.molecule.grid.points();
        try_map_indexed(self.execution, ctx.n, |i| {
            let (a, b) = Self::field_coefficients(ctx, &xt, r_in, i);
            let h = self.dressed_from(&ctx.potentials[i], a, b);
            let (eps, psi) = match psi {
                Some(g) => ground_state_near(&h, &g[i])?,
                None => ground_state(&h)?,
            };
            let r = psi.diagonal_expectation(x);
            let r2 = psi.diagonal_expectation(&self.r2);
            Ok(MoleculeResult {
                eps,
                psi,
                r,
                r2,
                e_el: eps - a * r - b * r2,
            })
        })
    }

    fn assemble_energy(
        &self,
        ctx: &Context,
        state: &EnsembleState,
        e_el: &[f64],
        r: &[f64],
        r2: &[f64],
    ) -> Result<EnergyBreakdown> {
        let mut bare = 0.0;
        for (e, rn) in e_el.iter().zip(&state.r) {
            bare += e + nuclear_potential(*rn, &self.molecule.params)?;
        }
        let xt = Self::total_polarizations(ctx, r);
        let mut dse = 0.0;
        let mut self_sq = vec![0.0; ctx.m];
        for i in 0..ctx.n {
            for al in 0..ctx.m {
                let l = ctx.lam[i * ctx.m + al];
                dse += 0.5 * l * l * r2[i];
                let xi = l * r[i];
                self_sq[al] += xi * xi;
            }
        }
        let mut coupling = 0.0;
        let mut dd = 0.0;
        let mut photon = 0.0;
        for (al, md) in self.modes.iter().enumerate() {
            coupling += ctx.base[al] * xt[al];
            dd += 0.5 * (xt[al] * xt[al] - self_sq[al]);
            let disp = md.omega * state.q[al] - (ctx.base[al] + md.omega * state.q[al]);
            photon += 0.5 * state.p[al] * state.p[al] + 0.5 * disp * disp;
        }
        Ok(EnergyBreakdown::assemble(bare, dse, coupling, dd, photon))
    }

    /// Converged ensemble ground state, starting from `guess` if given and
    /// from the bare ground states otherwise.
    pub fn solve(&self, state: &EnsembleState, guess: Option<&ElectronicSolution>) -> Result<ElectronicSolution> {
        match guess {
            Some(g) => self.solve_with_guess(state, &g.psi, &g.r_mean),
            None => self.solve_inner(state, None),
        }
    }

    /// Like [`solve`](Self::solve) with explicit starting orbitals and mean
    /// positions (e.g. extrapolated from earlier steps).
    pub fn solve_with_guess(
        &self,
        state: &EnsembleState,
        psi: &[WaveFunction1D],
        r_mean: &[f64],
    ) -> Result<ElectronicSolution> {
        let n = state.n_molecules();
        for len in [psi.len(), r_mean.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if let Some(p) = psi.iter().find(|p| p.len() != self.molecule.grid.n_points()) {
            return Err(Error::DimensionMismatch {
                expected: self.molecule.grid.n_points(),
                got: p.len(),
            });
        }
        self.solve_inner(state, Some((psi, r_mean)))
    }

    fn solve_inner(
        &self,
        state: &EnsembleState,
        guess: Option<(&[WaveFunction1D], &[f64])>,
    ) -> Result<ElectronicSolution> {
        let ctx = self.context(state)?;
        let opts = &self.options;
        let coupled = ctx.n > 1 && ctx.lam.iter().any(|&l| l != 0.0);

        let (mut psi, mut r_in): (Option<Vec<WaveFunction1D>>, Vec<f64>) = match guess {
            Some((p, r)) => (Some(p.to_vec()), r.to_vec()),
            None => {
                let bare = try_map_indexed(self.execution, ctx.n, |i| {
                    let h = self.dressed_from(&ctx.potentials[i], 0.0, 0.0);
                    ground_state(&h)
                })?;
                let x = self.molecule.grid.points();
                let r = bare.iter().map(|(_, p)| p.diagonal_expectation(x)).collect();
                (Some(bare.into_iter().map(|(_, p)| p).collect()), r)
            }
        };

        let mut mixer = Mixer::new(opts.anderson_depth, opts.mixing);
        let mut e_prev: Option<f64> = None;
        let mut last_delta = f64::INFINITY;
        let mut prev_sign = 0.0;
        let mut alternations = 0;
        for it in 1..=opts.max_iter {
            let out = self.sweep(&ctx, &r_in, psi.as_deref())?;
            let r_out: Vec<f64> = out.iter().map(|o| o.r).collect();
            let r2: Vec<f64> = out.iter().map(|o| o.r2).collect();
            let e_el: Vec<f64> = out.iter().map(|o| o.e_el).collect();
            let energy = self.assemble_energy(&ctx, state, &e_el, &r_out, &r2)?;
            if !energy.total.is_finite() {
                return Err(Error::NumericalFailure("non-finite SCF energy".into()));
            }
            let residual = r_out.iter().zip(&r_in).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let delta = e_prev.map(|e| energy.total - e);
            if let Some(d) = delta {
                last_delta = d.abs();
            }
            let converged = !coupled || (residual < opts.dipole_tol && delta.is_none_or(|d| d.abs() < opts.energy_tol));
            if converged {
                let (eps, psi): (Vec<f64>, Vec<WaveFunction1D>) = out.into_iter().map(|o| (o.eps, o.psi)).unzip();
                return Ok(ElectronicSolution {
                    psi,
                    eps,
                    r_mean: r_out,
                    r2_mean: r2,
                    electronic_energy: e_el,
                    energy,
                    iterations: it,
                    residual,
                    key: Snapshot::of(state),
                });
            }
            if let Some(d) = delta {
                let s = d.signum();
                alternations = if s != 0.0 && s == -prev_sign {
                    alternations + 1
                } else {
                    0
                };
                prev_sign = s;
                if opts.anderson_depth == 0 && alternations >= 5 && mixer.beta == 1.0 {
                    mixer.beta = 0.5;
                }
            }
            e_prev = Some(energy.total);
            psi = Some(out.into_iter().map(|o| o.psi).collect());
            r_in = mixer.next(&r_in, &r_out);
        }
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            last_delta,
        })
    }

    fn check_fresh(&self, sol: &ElectronicSolution, state: &EnsembleState) -> Result<()> {
        if sol.belongs_to(state) {
            Ok(())
        } else {
            Err(Error::StaleSolution)
        }
    }

    /// Energy terms of `sol` with the current cavity momenta of `state`.
    pub fn energy_breakdown(&self, state: &EnsembleState, sol: &ElectronicSolution) -> Result<EnergyBreakdown> {
        self.check_fresh(sol, state)?;
        let ctx = self.context_light(state)?;
        self.assemble_energy(&ctx, state, &sol.electronic_energy, &sol.r_mean, &sol.r2_mean)
    }

    /// Hartree energy functional evaluated with arbitrary trial orbitals.
    pub fn energy_of_orbitals(&self, state: &EnsembleState, psi: &[WaveFunction1D]) -> Result<EnergyBreakdown> {
        let n = state.n_molecules();
        if psi.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: psi.len(),
            });
        }
        let ctx = self.context_light(state)?;
        let x = self.molecule.grid.points();
        let mut e_el = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        let mut r2 = Vec::with_capacity(n);
        for (i, p) in psi.iter().enumerate() {
            let h = self.molecule.electronic_hamiltonian(state.r[i])?;
            e_el.push(crate::grid::expectation(&h, p)?);
            r.push(p.diagonal_expectation(x));
            r2.push(p.diagonal_expectation(&self.r2));
        }
        self.assemble_energy(&ctx, state, &e_el, &r, &r2)
    }

    /// Context without the electron potentials.
    fn context_light(&self, state: &EnsembleState) -> Result<Context> {
        state.validate()?;
        self.check_modes(state)?;
        let (n, m) = (state.n_molecules(), self.modes.len());
        let mut lam = Vec::with_capacity(n * m);
        for o in &state.orient {
            lam.extend(self.modes.iter().map(|md| md.lambda * o[2]));
        }
        let mut base = Vec::with_capacity(m);
        for (a, md) in self.modes.iter().enumerate() {
            base.push(self.nuclear_polarization(state, a)? - md.omega * state.q[a]);
        }
        Ok(Context {
            n,
            m,
            lam,
            base,
            potentials: Vec::new(),
        })
    }

    /// Σ_n ⟨x̂_{n,α}⟩ of a solution.
    pub fn electronic_polarization(
        &self,
        state: &EnsembleState,
        sol: &ElectronicSolution,
        alpha: usize,
    ) -> Result<f64> {
        self.check_fresh(sol, state)?;
        let mut x = 0.0;
        for (n, r) in sol.r_mean.iter().enumerate() {
            x -= self.effective_coupling(n, alpha, state)? * r;
        }
        Ok(x)
    }

    /// Hellmann-Feynman force on R_n.
    pub fn nuclear_force(&self, n: usize, sol: &ElectronicSolution, state: &EnsembleState) -> Result<f64> {
        self.check_fresh(sol, state)?;
        if n >= state.n_molecules() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: state.n_molecules(),
            });
        }
        let mut cavity = Vec::with_capacity(self.modes.len());
        for (al, md) in self.modes.iter().enumerate() {
            let x = self.electronic_polarization(state, sol, al)?;
            cavity.push(md.omega * state.q[al] - self.nuclear_polarization(state, al)? - x);
        }
        self.nuclear_force_with(n, sol, state, &cavity)
    }

    fn nuclear_force_with(
        &self,
        n: usize,
        sol: &ElectronicSolution,
        state: &EnsembleState,
        cavity: &[f64],
    ) -> Result<f64> {
        let p = &self.molecule.params;
        let r = state.r[n];
        let kernel = electron_nuclear_force_kernel(&self.molecule.grid, r, p)?;
        let electronic: f64 = sol.psi[n].diagonal_expectation(&kernel);
        let mut f = -nuclear_potential_gradient(r, p)? + electronic;
        for (al, c) in cavity.iter().enumerate() {
            f += p.charge * self.effective_coupling(n, al, state)? * c;
        }
        Ok(f)
    }

    /// Forces on every nucleus.
    pub fn nuclear_forces(&self, sol: &ElectronicSolution, state: &EnsembleState) -> Result<Vec<f64>> {
        self.check_fresh(sol, state)?;
        let mut cavity = Vec::with_capacity(self.modes.len());
        for (al, md) in self.modes.iter().enumerate() {
            let x = self.electronic_polarization(state, sol, al)?;
            cavity.push(md.omega * state.q[al] - self.nuclear_polarization(state, al)? - x);
        }
        try_map_indexed(self.execution, state.n_molecules(), |n| {
            self.nuclear_force_with(n, sol, state, &cavity)
        })
    }

    /// −ω²q + ωX + ω Σ_n ⟨x̂_{n,α}⟩.
    pub fn photon_force(&self, alpha: usize, sol: &ElectronicSolution, state: &EnsembleState) -> Result<f64> {
        self.check_fresh(sol, state)?;
        let md = self.modes.get(alpha).ok_or(Error::IndexOutOfRange {
            index: alpha,
            len: self.modes.len(),
        })?;
        let x = self.electronic_polarization(state, sol, alpha)?;
        let big_x = self.nuclear_polarization(state, alpha)?;
        Ok(-md.omega * md.omega * state.q[alpha] + md.omega * big_x + md.omega * x)
    }

    pub fn photon_forces(&self, sol: &ElectronicSolution, state: &EnsembleState) -> Result<Vec<f64>> {
        (0..self.modes.len())
            .map(|a| self.photon_force(a, sol, state))
            .collect()
    }

    /// Δr_n = ⟨r̂⟩_n − ⟨r̂⟩_n of the bare molecule at the same R_n.
    pub fn local_polarization_shift(&self, n: usize, state: &EnsembleState, sol: &ElectronicSolution) -> Result<f64> {
        self.check_fresh(sol, state)?;
        if n >= state.n_molecules() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: state.n_molecules(),
            });
        }
        if self.modes.iter().all(|m| m.lambda == 0.0) {
            return Ok(0.0);
        }
        let h = self.molecule.electronic_hamiltonian(state.r[n])?;
        let (_, psi) = ground_state_near(&h, &sol.psi[n])?;
        Ok(sol.r_mean[n] - psi.diagonal_expectation(self.molecule.grid.points()))
    }

    pub fn local_polarization_shifts(&self, state: &EnsembleState, sol: &ElectronicSolution) -> Result<Vec<f64>> {
        self.check_fresh(sol, state)?;
        try_map_indexed(self.execution, state.n_molecules(), |n| {
            self.local_polarization_shift(n, state, sol)
        })
    }
}

/// V_dd = Σ_α Σ_n ⟨x̂_{n,α}⟩ Σ_{m≠n} ⟨x̂_{m,α}⟩, with `polarizations[α][n]`.
pub fn dipole_dipole_energy(polarizations: &[Vec<f64>]) -> f64 {
    polarizations
        .iter()
        .map(|xs| {
            let total: f64 = xs.iter().sum();
            xs.iter().map(|x| x * (total - x)).sum::<f64>()
        })
        .sum()
}

/// Linear or Anderson (type II) mixing on the mean positions.
struct Mixer {
    depth: usize,
    beta: f64,
    xs: VecDeque<Vec<f64>>,
    fs: VecDeque<Vec<f64>>,
}

impl Mixer {
    fn new(depth: usize, beta: f64) -> Self {
        Self {
            depth,
            beta,
            xs: VecDeque::new(),
            fs: VecDeque::new(),
        }
    }

    fn next(&mut self, x: &[f64], gx: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = gx.iter().zip(x).map(|(g, x)| g - x).collect();
        let linear =
            |x: &[f64], f: &[f64], beta: f64| -> Vec<f64> { x.iter().zip(f).map(|(x, f)| x + beta * f).collect() };
        if self.depth == 0 {
            return linear(x, &f, self.beta);
        }
        self.xs.push_back(x.to_vec());
        self.fs.push_back(f.clone());
        if self.xs.len() > self.depth + 1 {
            self.xs.pop_front();
            self.fs.pop_front();
        }
        let k = self.xs.len() - 1;
        if k == 0 {
            return linear(x, &f, self.beta);
        }
        let n = x.len();
        let dx = DMatrix::from_fn(n, k, |i, j| self.xs[j + 1][i] - self.xs[j][i]);
        let df = DMatrix::from_fn(n, k, |i, j| self.fs[j + 1][i] - self.fs[j][i]);
        let svd = df.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let gamma = match svd.solve(&DVector::from_column_slice(&f), smax * 1e-10) {
            Ok(g) if smax > 0.0 && g.iter().all(|v| v.is_finite()) => g,
            _ => {
                self.restart(x, &f);
                return linear(x, &f, self.beta);
            }
        };
        let corr = (dx + df * self.beta) * gamma;
        let out: Vec<f64> = (0..n).map(|i| x[i] + self.beta * f[i] - corr[i]).collect();
        if out.iter().all(|v| v.is_finite()) {
            out
        } else {
            self.restart(x, &f);
            linear(x, &f, self.beta)
        }
    }

    fn restart(&mut self, x: &[f64], f: &[f64]) {
        self.xs.clear();
        self.fs.clear();
        self.xs.push_back(x.to_vec());
        self.fs.push_back(f.to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::shin_metiu::ShinMetiuParams;
    use approx::assert_relative_eq;

    fn molecule() -> ShinMetiu {
        ShinMetiu::new(ShinMetiuParams::default(), make_grid(41, 0.8).unwrap()).unwrap()
    }

    fn solver(omega: f64, lambda: f64) -> CavityHartree {
        CavityHartree::new(
            molecule(),
            vec![CavityMode::new(omega, lambda).unwrap()],
            ScfOptions::default(),
        )
        .unwrap()
    }

    fn tilted(theta: f64) -> [f64; 3] {
        [theta.sin(), 0.0, theta.cos()]
    }

    #[test]
    fn effective_coupling_examples() {
        let s = solver(6.27e-3, 0.0085);
        let mut st = EnsembleState::at_rest(vec![0.0, 0.0, 0.0], 1);
        st.orient[1] = [1.0, 0.0, 0.0];
        st.orient[2] = tilted(std::f64::consts::PI / 3.0);
        assert_eq!(s.effective_coupling(0, 0, &st).unwrap(), 0.0085);
        assert_eq!(s.effective_coupling(1, 0, &st).unwrap(), 0.0);
        assert_relative_eq!(s.effective_coupling(2, 0, &st).unwrap(), 0.00425, max_relative = 1e-12);
        assert!(matches!(
            s.effective_coupling(3, 0, &st),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            s.effective_coupling(0, 1, &st),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nuclear_polarization_examples() {
        let s = solver(6.27e-3, 0.01);
        assert_eq!(
            s.nuclear_polarization(&EnsembleState::at_rest(vec![0.0; 4], 1), 0)
                .unwrap(),
            0.0
        );
        assert_eq!(
            s.nuclear_polarization(&EnsembleState::at_rest(vec![1.0, -1.0], 1), 0)
                .unwrap(),
            0.0
        );
        let s = solver(6.27e-3, 0.0085);
        assert_relative_eq!(
            s.nuclear_polarization(&EnsembleState::at_rest(vec![0.5], 1), 0)
                .unwrap(),
            0.00425,
            max_relative = 1e-14
        );
    }

    #[test]
    fn dipole_dipole_examples() {
        assert_eq!(dipole_dipole_energy(&[vec![0.3]]), 0.0);
        assert_relative_eq!(dipole_dipole_energy(&[vec![0.1, -0.2]]), -0.04, max_relative = 1e-14);
        let d = 0.7;
        assert_relative_eq!(dipole_dipole_energy(&[vec![d; 3]]), 6.0 * d * d, max_relative = 1e-14);
    }

    #[test]
    fn dressed_hamiltonian_reduces_to_bare_without_coupling() {
        let s = solver(6.27e-3, 0.0);
        let mut st = EnsembleState::at_rest(vec![1.2, -0.4], 1);
        st.q[0] = 3.0;
        let h = s.dressed_hamiltonian(0, &st, &[vec![0.1, 0.2]]).unwrap();
        let bare = s.molecule().electronic_hamiltonian(1.2).unwrap();
        assert_eq!(h, bare);
    }

    #[test]
    fn dressed_hamiltonian_field_cancellation_leaves_confinement() {
        let (w, l) = (6.27e-3, 0.05);
        let s = solver(w, l);
        let mut st = EnsembleState::at_rest(vec![0.8], 1);
        st.q[0] = s.nuclear_polarization(&st, 0).unwrap() / w;
        let h = s.dressed_hamiltonian(0, &st, &[vec![0.0]]).unwrap();
        let bare = s.molecule().electronic_hamiltonian(0.8).unwrap();
        let x = s.molecule().grid.points();
        for i in 0..x.len() {
            for j in 0..x.len() {
                let expect = bare.get(i, j) + if i == j { 0.5 * l * l * x[i] * x[i] } else { 0.0 };
                assert!((h.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dressed_hamiltonian_is_linear_in_partner_dipoles() {
        let s = solver(6.27e-3, 0.02);
        let mut st = EnsembleState::at_rest(vec![0.8, -1.1, 0.3], 1);
        st.orient[0] = tilted(0.4);
        st.q[0] = 0.7;
        let l = s.effective_coupling(0, 0, &st).unwrap();
        let base = vec![vec![0.01, -0.02, 0.005]];
        let delta = 0.013;
        let shifted = vec![vec![0.01, -0.02 + delta, 0.005]];
        let h0 = s.dressed_hamiltonian(0, &st, &base).unwrap();
        let h1 = s.dressed_hamiltonian(0, &st, &shifted).unwrap();
        let x = s.molecule().grid.points();
        for i in 0..x.len() {
            let d = h1.get(i, i) - h0.get(i, i);
            assert!((d - (-l * delta * x[i])).abs() < 1e-14, "{i}: {d}");
            // own dipole does not enter
        }
        let own = vec![vec![0.5, -0.02, 0.005]];
        assert_eq!(s.dressed_hamiltonian(0, &st, &own).unwrap(), h0);
    }

    #[test]
    fn uncoupled_solve_gives_bare_states() {
        let s = solver(6.27e-3, 0.0);
        let mut st = EnsembleState::at_rest(vec![1.7, -0.9, 0.2], 1);
        st.q[0] = 2.0;
        st.p[0] = 0.01;
        let sol = s.solve(&st, None).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.energy.dipole_dipole, 0.0);
        let mut bare_sum = 0.0;
        for (i, r) in st.r.iter().enumerate() {
            let b = s.molecule().bare_ground_state(*r).unwrap();
            assert!((b.r_mean - sol.r_mean[i]).abs() < 1e-10);
            assert!(b.psi.overlap(&sol.psi[i]).abs() > 1.0 - 1e-12);
            bare_sum += s.molecule().bo_energy(*r).unwrap();
        }
        let photon = 0.5 * (6.27e-3f64).powi(2) * 4.0 + 0.5 * 1e-4;
        assert_relative_eq!(sol.energy.photon, photon, max_relative = 1e-12);
        assert!((sol.energy.total - (bare_sum + photon)).abs() < 1e-11);
    }

    #[test]
    fn single_molecule_has_no_dipole_dipole_term() {
        let s = solver(6.27e-3, 0.05);
        let mut st = EnsembleState::at_rest(vec![1.3], 1);
        st.q[0] = -4.0;
        let sol = s.solve(&st, None).unwrap();
        assert_eq!(sol.energy.dipole_dipole, 0.0);
        assert!(sol.energy.coupling != 0.0);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let s = solver(6.27e-3, 0.03);
        let mut st = EnsembleState::at_rest(vec![1.7, -1.5, 1.9, 0.4], 1);
        st.orient[1] = tilted(1.0);
        st.q[0] = 1.5;
        st.p[0] = -0.003;
        let e = s.solve(&st, None).unwrap().energy;
        let sum = e.bare + e.dse_local + e.coupling + e.dipole_dipole + e.photon;
        assert!((e.total - sum).abs() <= 1e-12 * e.total.abs());
        assert!(e.photon >= 0.0);
    }

    #[test]
    fn symmetric_single_molecule_feels_no_force() {
        let s = solver(6.27e-3, 0.05);
        let st = EnsembleState::at_rest(vec![0.0], 1);
        let sol = s.solve(&st, None).unwrap();
        assert!(s.nuclear_force(0, &sol, &st).unwrap().abs() < 1e-12);
        assert!(s.local_polarization_shift(0, &st, &sol).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uncoupled_forces_are_born_oppenheimer_and_harmonic() {
        let s = solver(6.27e-3, 0.0);
        let mut st = EnsembleState::at_rest(vec![1.4, -0.6], 1);
        st.q[0] = 0.9;
        let sol = s.solve(&st, None).unwrap();
        let h = 1e-4;
        for n in 0..2 {
            let r = st.r[n];
            let m = s.molecule();
            let fd = -(m.bo_energy(r + h).unwrap() - m.bo_energy(r - h).unwrap()) / (2.0 * h);
            assert!((s.nuclear_force(n, &sol, &st).unwrap() - fd).abs() < 1e-7);
            assert_eq!(s.local_polarization_shift(n, &st, &sol).unwrap(), 0.0);
        }
        assert_relative_eq!(
            s.photon_force(0, &sol, &st).unwrap(),
            -(6.27e-3f64).powi(2) * 0.9,
            max_relative = 1e-14
        );
    }

    #[test]
    fn photon_equilibrium_has_zero_force() {
        let w = 6.27e-3;
        let s = solver(w, 0.02);
        let mut st = EnsembleState::at_rest(vec![1.7, 1.6], 1);
        let sol = s.solve(&st, None).unwrap();
        let x = s.electronic_polarization(&st, &sol, 0).unwrap();
        let big_x = s.nuclear_polarization(&st, 0).unwrap();
        st.q[0] = (big_x + x) / w;
        // the electronic polarization moves with q; iterate the linear fixed point
        for _ in 0..50 {
            let sol = s.solve(&st, None).unwrap();
            st.q[0] = (big_x + s.electronic_polarization(&st, &sol, 0).unwrap()) / w;
        }
        let sol = s.solve(&st, None).unwrap();
        assert!(s.photon_force(0, &sol, &st).unwrap().abs() < 1e-9);
    }

    #[test]
    fn stale_solution_is_rejected() {
        let s = solver(6.27e-3, 0.02);
        let mut st = EnsembleState::at_rest(vec![1.7, 1.6], 1);
        let sol = s.solve(&st, None).unwrap();
        st.r[1] += 1e-9;
        assert!(matches!(s.nuclear_force(0, &sol, &st), Err(Error::StaleSolution)));
        assert!(matches!(s.photon_force(0, &sol, &st), Err(Error::StaleSolution)));
        st.r[1] -= 1e-9;
        st.orient[0] = tilted(0.1);
        assert!(matches!(
            s.local_polarization_shift(0, &st, &sol),
            Err(Error::StaleSolution)
        ));
    }

    #[test]
    fn iteration_cap_is_an_error() {
        let opts = ScfOptions {
            max_iter: 1,
            ..ScfOptions::default()
        };
        let s = solver(6.27e-3, 0.05).with_options(opts).unwrap();
        let st = EnsembleState::at_rest(vec![1.7, 1.6, 1.5], 1);
        assert!(matches!(
            s.solve(&st, None),
            Err(Error::NoConvergence { iterations: 1, .. })
        ));
    }

    #[test]
    fn nucleus_outside_the_box_is_a_domain_error() {
        let s = solver(6.27e-3, 0.05);
        let st = EnsembleState::at_rest(vec![1.0, 4.8], 1);
        assert!(matches!(s.solve(&st, None), Err(Error::Domain { .. })));
    }

    #[test]
    fn plain_mixing_matches_anderson() {
        let mut st = EnsembleState::at_rest(vec![1.7, -1.6, 1.8, 1.5, -1.75], 1);
        st.q[0] = 0.4;
        for (i, o) in st.orient.iter_mut().enumerate() {
            *o = tilted(0.3 * i as f64);
        }
        let tight = ScfOptions::tight();
        let a = solver(6.27e-3, 0.08)
            .with_options(tight)
            .unwrap()
            .solve(&st, None)
            .unwrap();
        let plain = ScfOptions {
            anderson_depth: 0,
            ..tight
        };
        let b = solver(6.27e-3, 0.08)
            .with_options(plain)
            .unwrap()
            .solve(&st, None)
            .unwrap();
        assert!(a.iterations < b.iterations, "{} vs {}", a.iterations, b.iterations);
        for (x, y) in a.r_mean.iter().zip(&b.r_mean) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((a.energy.total - b.energy.total).abs() < 1e-12);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut st = EnsembleState::at_rest(vec![1.7, -1.6, 1.8, 1.5, -1.75, 0.2], 1);
        for (i, o) in st.orient.iter_mut().enumerate() {
            *o = tilted(0.25 * i as f64);
        }
        let a = solver(6.27e-3, 0.05).with_execution(Execution::Sequential);
        let b = solver(6.27e-3, 0.05).with_execution(Execution::Parallel);
        let sa = a.solve(&st, None).unwrap();
        let sb = b.solve(&st, None).unwrap();
        assert_eq!(sa.r_mean, sb.r_mean);
        assert_eq!(sa.energy, sb.energy);
        assert_eq!(a.nuclear_forces(&sa, &st).unwrap(), b.nuclear_forces(&sb, &st).unwrap());
    }
}
