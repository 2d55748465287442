use nalgebra::{DMatrix, SymmetricEigen};

use cavity_md::dynamics::{obabo_step, RngStreams, ThermostatParams};
use cavity_md::grid::make_grid;
use cavity_md::harmonic::{
    build_hessian_projected, integrator_frequency, normal_modes, HarmonicEnsembleParams, ShinMetiuFixtures,
};
use cavity_md::shin_metiu::{ShinMetiu, ShinMetiuParams};

/// Force constants of V = Σ[½Mω_v²u² + d²/(2α)] + ½(ωq − Σλ_n(μ′u_n + d_n))²
/// over (u_1..u_N, d_1..d_N, q) written as diag + g gᵀ.
fn full_force_constants(p: &HarmonicEnsembleParams, c: &[f64]) -> DMatrix<f64> {
    let n = p.n_molecules;
    let dim = 2 * n + 1;
    let mut g = vec![0.0; dim];
    let mut diag = vec![0.0; dim];
    for i in 0..n {
        g[i] = -p.lambda * c[i] * p.mu_prime;
        g[n + i] = -p.lambda * c[i];
        diag[i] = p.mass * p.omega_vib * p.omega_vib;
        diag[n + i] = 1.0 / p.alpha_e;
    }
    g[2 * n] = p.omega_cavity;
    DMatrix::from_fn(dim, dim, |i, j| g[i] * g[j] + if i == j { diag[i] } else { 0.0 })
}

/// Adiabatic elimination of the d_n and mass weighting of the u_n.
fn reduced_hessian(p: &HarmonicEnsembleParams, c: &[f64]) -> DMatrix<f64> {
    let n = p.n_molecules;
    let k = full_force_constants(p, c);
    let slow: Vec<usize> = (0..n).chain([2 * n]).collect();
    let fast: Vec<usize> = (n..2 * n).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| k[(rows[i], cols[j])]);
    let kss = pick(&slow, &slow);
    let ksf = pick(&slow, &fast);
    let kff_inv = pick(&fast, &fast).try_inverse().unwrap();
    let eff = kss - &ksf * kff_inv * ksf.transpose();
    let mass = |i: usize| if i < n { p.mass } else { 1.0 };
    DMatrix::from_fn(n + 1, n + 1, |i, j| eff[(i, j)] / (mass(i) * mass(j)).sqrt())
}

fn params(n: usize, lambda: f64) -> HarmonicEnsembleParams {
    HarmonicEnsembleParams {
        n_molecules: n,
        omega_vib: 6.26544e-3,
        mu_prime: 0.22719,
        mass: 1836.0,
        omega_cavity: 6.27e-3,
        lambda,
        alpha_e: 15.8136,
    }
}

#[test]
fn closed_form_hessian_equals_brute_force_elimination() {
    for (n, lambda) in [(1, 0.004), (4, 0.02), (16, 0.03), (50, 0.01)] {
        let p = params(n, lambda);
        let c: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.2).cos()).collect();
        let brute = reduced_hessian(&p, &c);
        let h = build_hessian_projected(&p, &c).unwrap();
        let scale = brute.amax();
        for i in 0..=n {
            for j in 0..=n {
                assert!((h.get(i, j) - brute[(i, j)]).abs() <= 1e-12 * scale, "N={n} ({i},{j})");
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(brute)
            .eigenvalues
            .iter()
            .map(|x| x.sqrt())
            .collect();
        ev.sort_by(f64::total_cmp);
        let modes = normal_modes(&h).unwrap();
        for (a, b) in modes.frequencies.iter().zip(&ev) {
            assert!((a - b).abs() <= 1e-10 * b, "N={n}: {a} vs {b}");
        }
    }
}

#[test]
fn molecular_fixtures_are_frozen() {
    let m = ShinMetiu::new(ShinMetiuParams::default(), make_grid(41, 0.8).unwrap()).unwrap();
    let fx = ShinMetiuFixtures::extract(&m).unwrap();
    assert!((fx.r0 - 1.735982).abs() < 2e-6, "{}", fx.r0);
    assert!((fx.omega_vib - 6.26544e-3).abs() < 2e-8, "{}", fx.omega_vib);
    assert!((fx.mu0 + 1.22024).abs() < 2e-5, "{}", fx.mu0);
    assert!((fx.mu_prime - 0.22719).abs() < 2e-5, "{}", fx.mu_prime);
    assert!((fx.alpha_e - 15.8136).abs() < 2e-3, "{}", fx.alpha_e);
    // the polarizability also equals −d⟨r⟩/dF
    let f = 1e-4;
    let slope =
        (m.field_ground_state(fx.r0, f).unwrap().r_mean - m.field_ground_state(fx.r0, -f).unwrap().r_mean) / (2.0 * f);
    assert!((fx.alpha_e + slope).abs() < 1e-4 * fx.alpha_e);
}

#[test]
fn integrator_frequency_is_exact_for_free_oscillation() {
    let omega = 6.27e-3;
    let dt = 50.0;
    let thermo = ThermostatParams {
        kt: 0.0,
        gamma: 0.0,
        dt,
        tau_r: 0.0,
        rotations_enabled: false,
    };
    let mut rngs = RngStreams::new(1, 1, 0).thermostat;
    let (mut x, mut v, mut f) = (vec![1.0], vec![0.0], vec![-omega * omega]);
    let w = integrator_frequency(omega, dt).unwrap();
    for k in 1..=2000 {
        obabo_step(&mut x, &mut v, &mut f, &[1.0], &thermo, &mut rngs, |x| {
            Ok(vec![-omega * omega * x[0]])
        })
        .unwrap();
        assert!((x[0] - (w * dt * k as f64).cos()).abs() < 1e-9, "step {k}");
    }
}
