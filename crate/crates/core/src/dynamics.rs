//! Langevin propagation of nuclei and cavity coordinates, rotational
//! diffusion of molecular orientations, and trajectory recording.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OrientationMode, PhotonStart};
use crate::error::{Error, Result};
use crate::hartree::{CavityHartree, ElectronicSolution, EnsembleState, E_Z};
use crate::shin_metiu::REFERENCE_VIBRATIONAL_FREQUENCY;
use crate::trajectory::{Sample, Trajectory, TrajectoryMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermostatParams {
    /// k_B T (hartree).
    pub kt: f64,
    /// Friction (1/a.u. time).
    pub gamma: f64,
    /// Time step (a.u.).
    pub dt: f64,
    /// Rotational diffusion parameter.
    pub tau_r: f64,
    pub rotations_enabled: bool,
}

impl Default for ThermostatParams {
    fn default() -> Self {
        Self {
            kt: 0.5e-3,
            gamma: 0.3e-5,
            dt: 50.0,
            tau_r: 0.5e-5,
            rotations_enabled: false,
        }
    }
}

impl ThermostatParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kt >= 0.0 && self.gamma >= 0.0 && self.tau_r >= 0.0 && self.dt > 0.0)
            || ![self.kt, self.gamma, self.dt, self.tau_r].iter().all(|x| x.is_finite())
        {
            return Err(Error::invalid(format!("invalid thermostat parameters {self:?}")));
        }
        Ok(())
    }

    /// c₁ = exp(−γ dt/2).
    pub fn c1(&self) -> f64 {
        (-0.5 * self.gamma * self.dt).exp()
    }
}

/// Families of random substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Nuclear = 1,
    Photon = 2,
    Orientation = 3,
    InitNuclear = 4,
    InitPhoton = 5,
    InitOrientation = 6,
    Sampling = 7,
}

/// One ChaCha substream per degree of freedom.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    /// Nuclear coordinates, then cavity modes.
    pub thermostat: Vec<ChaCha8Rng>,
    /// Three per molecule.
    pub orientation: Vec<ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64, n_molecules: usize, n_modes: usize) -> Self {
        let mut thermostat: Vec<ChaCha8Rng> = (0..n_molecules)
            .map(|i| Self::stream(seed, StreamKind::Nuclear, i as u64))
            .collect();
        thermostat.extend((0..n_modes).map(|a| Self::stream(seed, StreamKind::Photon, a as u64)));
        let orientation = (0..3 * n_molecules)
            .map(|i| Self::stream(seed, StreamKind::Orientation, i as u64))
            .collect();
        Self {
            seed,
            thermostat,
            orientation,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(seed, kind, index)`.
    pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((kind as u64) << 56) | (index & ((1 << 56) - 1)));
        rng
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Half-step Ornstein-Uhlenbeck map v ← c₁v + √((1−c₁²)kT/m)·ξ.
fn ornstein_uhlenbeck(v: &mut [f64], mass: &[f64], thermo: &ThermostatParams, rngs: &mut [ChaCha8Rng]) {
    let c1 = thermo.c1();
    let s = (1.0 - c1 * c1) * thermo.kt;
    if c1 == 1.0 {
        return;
    }
    for ((vi, m), rng) in v.iter_mut().zip(mass).zip(rngs.iter_mut()) {
        *vi *= c1;
        if s > 0.0 {
            *vi += (s / m).sqrt() * normal(rng);
        }
    }
}

/// One O-B-A-B-O step for generic coordinates. `f` holds the forces at `x`
/// on entry and at the new `x` on exit; `forces` is called once, after the
/// drift.
pub fn obabo_step<F>(
    x: &mut [f64],
    v: &mut [f64],
    f: &mut [f64],
    mass: &[f64],
    thermo: &ThermostatParams,
    rngs: &mut [ChaCha8Rng],
    forces: F,
) -> Result<()>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    if v.len() != n || f.len() != n || mass.len() != n || rngs.len() < n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len().min(f.len()).min(mass.len()).min(rngs.len()),
        });
    }
    let dt = thermo.dt;
    ornstein_uhlenbeck(v, mass, thermo, rngs);
    for i in 0..n {
        v[i] += 0.5 * dt * f[i] / mass[i];
        x[i] += dt * v[i];
    }
    let fnew = forces(x)?;
    if fnew.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: fnew.len(),
        });
    }
    f.copy_from_slice(&fnew);
    for i in 0..n {
        v[i] += 0.5 * dt * f[i] / mass[i];
    }
    ornstein_uhlenbeck(v, mass, thermo, rngs);
    Ok(())
}

/// n ← (n + √(dt τ_R) S × n)/|…| with S standard normal, three streams per
/// molecule.
pub fn rotation_step(orient: &mut [[f64; 3]], tau_r: f64, dt: f64, rngs: &mut [ChaCha8Rng]) -> Result<()> {
    if rngs.len() < 3 * orient.len() {
        return Err(Error::DimensionMismatch {
            expected: 3 * orient.len(),
            got: rngs.len(),
        });
    }
    if tau_r == 0.0 {
        return Ok(());
    }
    let amp = (dt * tau_r).sqrt();
    for (o, r) in orient.iter_mut().zip(rngs.chunks_exact_mut(3)) {
        let s = [normal(&mut r[0]), normal(&mut r[1]), normal(&mut r[2])];
        let c = [
            s[1] * o[2] - s[2] * o[1],
            s[2] * o[0] - s[0] * o[2],
            s[0] * o[1] - s[1] * o[0],
        ];
        let mut n = [o[0] + amp * c[0], o[1] + amp * c[1], o[2] + amp * c[2]];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        n.iter_mut().for_each(|x| *x /= norm);
        *o = n;
    }
    Ok(())
}

/// Uniform random unit vector.
pub fn random_unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Thermal initial state.
///
/// Nuclei are drawn around the positive bare minimum with spread
/// √(kT/(M ω_vib²)), velocities from Maxwell-Boltzmann. Cavity coordinates
/// are drawn with variance kT/ω² around either the origin or the relaxed
/// displacement, depending on `run.photon_start`.
pub fn initialize(cfg: &ExperimentConfig, solver: &CavityHartree) -> Result<EnsembleState> {
    cfg.validate()?;
    let seed = cfg.seed;
    let n = cfg.ensemble.n_molecules;
    let modes = solver.modes();
    let kt = cfg.thermostat.kt;
    let molecule = solver.molecule();
    let mass = molecule.params.mass;
    let r0 = molecule.bo_minimum()?;
    let sigma_r = (kt / (mass * REFERENCE_VIBRATIONAL_FREQUENCY.powi(2))).sqrt();

    let mut state = EnsembleState::at_rest(vec![r0; n], modes.len());
    for i in 0..n {
        let mut rng = RngStreams::stream(seed, StreamKind::InitNuclear, i as u64);
        let (a, b) = (normal(&mut rng), normal(&mut rng));
        state.r[i] = r0 + sigma_r * a;
        state.v[i] = (kt / mass).sqrt() * b;
        if cfg.ensemble.orientation == OrientationMode::Random {
            let mut rng = RngStreams::stream(seed, StreamKind::InitOrientation, i as u64);
            state.orient[i] = random_unit_vector(&mut rng);
        } else {
            state.orient[i] = E_Z;
        }
    }
    for r in &state.r {
        molecule.params.check_geometry(*r)?;
    }
    let centers = match cfg.run.photon_start {
        PhotonStart::Origin => vec![0.0; modes.len()],
        PhotonStart::Equilibrium => relaxed_cavity(solver, &state)?,
    };
    for (a, md) in modes.iter().enumerate() {
        let mut rng = RngStreams::stream(seed, StreamKind::InitPhoton, a as u64);
        let (x, y) = (normal(&mut rng), normal(&mut rng));
        state.q[a] = centers[a] + kt.sqrt() / md.omega * x;
        state.p[a] = kt.sqrt() * y;
    }
    Ok(state)
}

/// Cavity displacements with zero force, q_α = (X_α + ⟨x̂_α⟩(q))/ω_α, found
/// by a secant iteration per mode sweep.
pub fn relaxed_cavity(solver: &CavityHartree, state: &EnsembleState) -> Result<Vec<f64>> {
    let mut st = state.clone();
    let modes = solver.modes();
    let mut guess: Option<ElectronicSolution> = None;
    for _ in 0..50 {
        let mut max_shift: f64 = 0.0;
        for a in 0..modes.len() {
            let w = modes[a].omega;
            let residual = |q: f64, st: &mut EnsembleState, g: &mut Option<ElectronicSolution>| -> Result<f64> {
                st.q[a] = q;
                let sol = solver.solve(st, g.as_ref())?;
                let f = solver.photon_force(a, &sol, st)? / (w * w);
                *g = Some(sol);
                Ok(f)
            };
            let mut q0 = st.q[a];
            let mut f0 = residual(q0, &mut st, &mut guess)?;
            let mut q1 = q0 + f0;
            let start = q0;
            for _ in 0..30 {
                let f1 = residual(q1, &mut st, &mut guess)?;
                if f1 == 0.0 || (q1 - q0).abs() <= 1e-13 * (1.0 + q1.abs()) {
                    break;
                }
                let q2 = q1 - f1 * (q1 - q0) / (f1 - f0);
                (q0, f0, q1) = (q1, f1, q2);
            }
            st.q[a] = q1;
            max_shift = max_shift.max((q1 - start).abs());
        }
        if max_shift <= 1e-12 * (1.0 + st.q.iter().fold(0.0f64, |m, q| m.max(q.abs()))) || modes.len() == 1 {
            return Ok(st.q);
        }
    }
    Ok(st.q)
}

/// Owns the coupled state and advances it one O-B-A-B-O step at a time.
#[derive(Debug, Clone)]
pub struct Propagator {
    solver: CavityHartree,
    thermo: ThermostatParams,
    rng: RngStreams,
    state: EnsembleState,
    sol: ElectronicSolution,
    forces: Vec<f64>,
    previous_r_mean: Option<Vec<f64>>,
    steps: usize,
    sweeps: usize,
}

impl Propagator {
    pub fn new(solver: CavityHartree, thermo: ThermostatParams, rng: RngStreams, state: EnsembleState) -> Result<Self> {
        thermo.validate()?;
        let sol = solver.solve(&state, None)?;
        let mut forces = solver.nuclear_forces(&sol, &state)?;
        forces.extend(solver.photon_forces(&sol, &state)?);
        Ok(Self {
            solver,
            thermo,
            rng,
            state,
            sweeps: sol.iterations,
            sol,
            forces,
            previous_r_mean: None,
            steps: 0,
        })
    }

    pub fn state(&self) -> &EnsembleState {
        &self.state
    }

    pub fn solution(&self) -> &ElectronicSolution {
        &self.sol
    }

    pub fn solver(&self) -> &CavityHartree {
        &self.solver
    }

    pub fn thermostat(&self) -> &ThermostatParams {
        &self.thermo
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total SCF sweeps so far, including the initial solve.
    pub fn total_sweeps(&self) -> usize {
        self.sweeps
    }

    /// Forces on (R_1…R_N, q_1…q_M) at the current state.
    pub fn forces(&self) -> &[f64] {
        &self.forces
    }

    /// Nuclear plus cavity kinetic energy.
    pub fn kinetic_energy(&self) -> (f64, f64) {
        let m = self.solver.molecule().params.mass;
        let nuc = self.state.v.iter().map(|v| 0.5 * m * v * v).sum();
        let ph = self.state.p.iter().map(|p| 0.5 * p * p).sum();
        (nuc, ph)
    }

    /// One Langevin step; orientations diffuse during the drift.
    pub fn langevin_step(&mut self) -> Result<()> {
        let n = self.state.n_molecules();
        let m = self.state.n_modes();
        let mass_n = self.solver.molecule().params.mass;
        let mut x: Vec<f64> = self.state.r.iter().chain(&self.state.q).copied().collect();
        let mut v: Vec<f64> = self.state.v.iter().chain(&self.state.p).copied().collect();
        let mass: Vec<f64> = std::iter::repeat_n(mass_n, n)
            .chain(std::iter::repeat_n(1.0, m))
            .collect();

        let guess_r: Vec<f64> = match &self.previous_r_mean {
            Some(prev) => self.sol.r_mean.iter().zip(prev).map(|(a, b)| 2.0 * a - b).collect(),
            None => self.sol.r_mean.clone(),
        };
        let thermo = self.thermo;
        let solver = &self.solver;
        let psi = &self.sol.psi;
        let mut new_state = self.state.clone();
        let orient_rngs = &mut self.rng.orientation;
        let mut new_sol: Option<ElectronicSolution> = None;

        obabo_step(
            &mut x,
            &mut v,
            &mut self.forces,
            &mass,
            &thermo,
            &mut self.rng.thermostat,
            |x| {
                new_state.r.copy_from_slice(&x[..n]);
                new_state.q.copy_from_slice(&x[n..]);
                new_state.time += thermo.dt;
                if thermo.rotations_enabled {
                    rotation_step(&mut new_state.orient, thermo.tau_r, thermo.dt, orient_rngs)?;
                }
                let sol = solver.solve_with_guess(&new_state, psi, &guess_r)?;
                let mut f = solver.nuclear_forces(&sol, &new_state)?;
                f.extend(solver.photon_forces(&sol, &new_state)?);
                new_sol = Some(sol);
                Ok(f)
            },
        )?;

        new_state.v.copy_from_slice(&v[..n]);
        new_state.p.copy_from_slice(&v[n..]);
        let sol = new_sol.expect("force callback ran");
        self.sweeps += sol.iterations;
        self.previous_r_mean = Some(std::mem::replace(&mut self.sol, sol).r_mean);
        self.state = new_state;
        self.steps += 1;
        Ok(())
    }
}

/// A configured run: initial state, propagator and sampling.
pub struct Simulation {
    cfg: ExperimentConfig,
    propagator: Propagator,
    meta: TrajectoryMeta,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let solver = cfg.build_solver()?;
        let state = initialize(cfg, &solver)?;
        let rng = RngStreams::new(cfg.seed, state.n_molecules(), state.n_modes());
        let propagator = Propagator::new(solver, cfg.thermostat_params(), rng, state)?;
        let meta = TrajectoryMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            n_molecules: cfg.ensemble.n_molecules,
            n_modes: cfg.cavity.len(),
            dt: cfg.thermostat.dt,
            stride: cfg.run.stride,
            omega_cavity: cfg.modes().iter().map(|m| m.omega).collect(),
            has_polarization: cfg.run.polarization_diagnostics,
        };
        Ok(Self {
            cfg: cfg.clone(),
            propagator,
            meta,
        })
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    /// Observables at the current state.
    pub fn sample(&self, step: usize) -> Result<Sample> {
        let p = &self.propagator;
        let st = p.state();
        let sol = p.solution();
        let solver = p.solver();
        let z = solver.molecule().params.charge;
        let dipole_local: Vec<f64> =
            st.r.iter()
                .zip(&sol.r_mean)
                .zip(&st.orient)
                .map(|((r, x), o)| (z * r - x) * o[2])
                .collect();
        let dr = if self.cfg.run.polarization_diagnostics {
            Some(solver.local_polarization_shifts(st, sol)?)
        } else {
            None
        };
        let (ekin_nuclear, ekin_photon) = p.kinetic_energy();
        Ok(Sample {
            step,
            time: st.time,
            q: st.q.clone(),
            p: st.p.clone(),
            dipole_total: dipole_local.iter().sum(),
            dipole_local,
            dr,
            ekin_nuclear,
            ekin_photon,
            energy: solver.energy_breakdown(st, sol)?,
            scf_iterations: sol.iterations,
        })
    }

    /// Burn-in, then `n_steps` recorded steps. `on_sample` sees every
    /// `stride`-th state starting with the first. Step errors carry the
    /// index of the failing step (counted from the end of burn-in).
    pub fn run<F>(&mut self, mut on_sample: F) -> Result<()>
    where
        F: FnMut(&Sample) -> Result<()>,
    {
        for _ in 0..self.cfg.run.burn_in {
            self.propagator.langevin_step().map_err(|e| Error::Step {
                step: 0,
                source: Box::new(e),
            })?;
        }
        on_sample(&self.sample(0)?)?;
        let stride = self.cfg.run.stride;
        for k in 1..=self.cfg.run.n_steps {
            let wrap = |e: Error| Error::Step {
                step: k,
                source: Box::new(e),
            };
            self.propagator.langevin_step().map_err(wrap)?;
            if k % stride == 0 {
                on_sample(&self.sample(k).map_err(wrap)?)?;
            }
        }
        Ok(())
    }
}

/// Runs `cfg` and collects the sampled observables in memory.
pub fn run_trajectory(cfg: &ExperimentConfig) -> Result<Trajectory> {
    let mut sim = Simulation::new(cfg)?;
    let mut traj = Trajectory::new(sim.meta().clone());
    sim.run(|s| traj.push(s))?;
    Ok(traj)
}
