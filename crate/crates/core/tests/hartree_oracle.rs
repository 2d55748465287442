//! Cavity-Hartree solutions against a from-scratch Gauss-Seidel solver built
//! on dense nalgebra eigendecompositions.

use nalgebra::{DMatrix, SymmetricEigen};

use cavity_md::grid::make_grid;
use cavity_md::hartree::{CavityHartree, CavityMode, EnsembleState, ScfOptions};
use cavity_md::shin_metiu::{ShinMetiu, ShinMetiuParams};

const L: f64 = 9.45;
const RC: f64 = 1.511;

fn soft(d: f64) -> f64 {
    let u = d.abs();
    if u < 1e-10 {
        2.0 / (std::f64::consts::PI.sqrt() * RC)
    } else {
        libm::erf(u / RC) / u
    }
}

struct Oracle {
    x: Vec<f64>,
    t: DMatrix<f64>,
}

impl Oracle {
    fn new() -> Self {
        let n = 41;
        let dx = 0.8;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 - 20.0) * dx).collect();
        let t = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                std::f64::consts::PI.powi(2) / (6.0 * dx * dx)
            } else {
                let k = i as f64 - j as f64;
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                sign / (dx * dx * k * k)
            }
        });
        Self { x, t }
    }

    fn bare(&self, r: f64) -> DMatrix<f64> {
        let mut h = self.t.clone();
        for (i, &x) in self.x.iter().enumerate() {
            h[(i, i)] += -soft(x - r) - soft(x - L / 2.0) - soft(x + L / 2.0);
        }
        h
    }

    /// Returns (⟨r⟩ per molecule, total energy).
    fn solve(&self, st: &EnsembleState, modes: &[(f64, f64)]) -> (Vec<f64>, f64) {
        let n = st.r.len();
        let lam = |a: usize, i: usize| modes[a].1 * st.orient[i][2];
        let big_x: Vec<f64> = (0..modes.len())
            .map(|a| (0..n).map(|i| lam(a, i) * st.r[i]).sum())
            .collect();
        let bare: Vec<DMatrix<f64>> = st.r.iter().map(|&r| self.bare(r)).collect();
        let mut r_mean = vec![0.0; n];
        let mut r2_mean = vec![0.0; n];
        let mut e_el = vec![0.0; n];
        for _sweep in 0..400 {
            let mut change: f64 = 0.0;
            for i in 0..n {
                let mut h = bare[i].clone();
                for (a, &(w, _)) in modes.iter().enumerate() {
                    let others: f64 = (0..n).filter(|&m| m != i).map(|m| -lam(a, m) * r_mean[m]).sum();
                    let c = big_x[a] - w * st.q[a] + others;
                    let l = lam(a, i);
                    for (k, &x) in self.x.iter().enumerate() {
                        h[(k, k)] += -l * c * x + 0.5 * l * l * x * x;
                    }
                }
                let eig = SymmetricEigen::new(h);
                let k0 = eig.eigenvalues.imin();
                let psi = eig.eigenvectors.column(k0);
                let rm: f64 = self.x.iter().enumerate().map(|(k, x)| psi[k] * psi[k] * x).sum();
                r2_mean[i] = self.x.iter().enumerate().map(|(k, x)| psi[k] * psi[k] * x * x).sum();
                e_el[i] = (psi.transpose() * &bare[i] * psi)[(0, 0)];
                change = change.max((rm - r_mean[i]).abs());
                r_mean[i] = rm;
            }
            if change < 1e-14 {
                break;
            }
        }
        let mut e: f64 = (0..n)
            .map(|i| e_el[i] + 1.0 / (L / 2.0 - st.r[i]) + 1.0 / (L / 2.0 + st.r[i]))
            .sum();
        for (a, &(w, _)) in modes.iter().enumerate() {
            let d: f64 = big_x[a] - (0..n).map(|i| lam(a, i) * r_mean[i]).sum::<f64>();
            let var: f64 = (0..n)
                .map(|i| lam(a, i).powi(2) * (r2_mean[i] - r_mean[i].powi(2)))
                .sum();
            e += 0.5 * st.p[a].powi(2) + 0.5 * (w * st.q[a] - d).powi(2) + 0.5 * var;
        }
        (r_mean, e)
    }
}

fn solver(modes: &[(f64, f64)]) -> CavityHartree {
    let molecule = ShinMetiu::new(ShinMetiuParams::default(), make_grid(41, 0.8).unwrap()).unwrap();
    let modes = modes.iter().map(|&(w, l)| CavityMode::new(w, l).unwrap()).collect();
    CavityHartree::new(molecule, modes, ScfOptions::tight()).unwrap()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn compare(st: &EnsembleState, modes: &[(f64, f64)]) {
    let (r_ref, e_ref) = Oracle::new().solve(st, modes);
    let sol = solver(modes).solve(st, None).unwrap();
    for (a, b) in sol.r_mean.iter().zip(&r_ref) {
        assert!((a - b).abs() < 1e-8, "⟨r⟩ {a} vs oracle {b}");
    }
    assert!(
        (sol.energy.total - e_ref).abs() < 1e-9,
        "energy {} vs oracle {e_ref}",
        sol.energy.total
    );
}

#[test]
fn two_aligned_molecules_match_oracle() {
    let mut st = EnsembleState::at_rest(vec![1.7, -0.9], 1);
    st.q[0] = 35.0;
    st.p[0] = 0.01;
    compare(&st, &[(6.27e-3, 0.05)]);
}

#[test]
fn two_molecules_strong_coupling_match_oracle() {
    let mut st = EnsembleState::at_rest(vec![1.2, 2.1], 1);
    st.q[0] = -20.0;
    compare(&st, &[(6.27e-3, 0.2)]);
}

#[test]
fn tilted_molecules_two_modes_match_oracle() {
    let mut st = EnsembleState::at_rest(vec![1.7, 0.4, -1.3], 2);
    st.orient = vec![unit([0.3, 0.1, 0.9]), unit([-0.5, 0.7, -0.4]), unit([0.0, 0.2, 1.0])];
    st.q = vec![12.0, -7.0];
    st.p = vec![0.002, -0.004];
    compare(&st, &[(6.27e-3, 0.06), (5.0e-3, 0.03)]);
}

#[test]
fn uncoupled_limit_matches_oracle() {
    let st = EnsembleState::at_rest(vec![1.735982, -1.735982], 1);
    compare(&st, &[(6.27e-3, 0.0)]);
}
