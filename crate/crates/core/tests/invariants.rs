use proptest::prelude::*;

use cavity_md::grid::{ground_state, make_grid, WaveFunction1D};
use cavity_md::hartree::{CavityHartree, CavityMode, EnsembleState, ScfOptions};
use cavity_md::shin_metiu::{ShinMetiu, ShinMetiuParams};

fn solver(lambda: f64) -> CavityHartree {
    let molecule = ShinMetiu::new(ShinMetiuParams::default(), make_grid(41, 0.8).unwrap()).unwrap();
    CavityHartree::new(
        molecule,
        vec![CavityMode::new(6.27e-3, lambda).unwrap()],
        ScfOptions::tight(),
    )
    .unwrap()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn state_strategy(max_n: usize) -> impl Strategy<Value = EnsembleState> {
    (1..=max_n)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64), n),
                -40.0..40.0f64,
                -0.01..0.01f64,
            )
        })
        .prop_map(|(r, o, q, p)| {
            let mut st = EnsembleState::at_rest(r, 1);
            st.orient = o.into_iter().map(|(a, b, c)| unit([a, b, c])).collect();
            st.q[0] = q;
            st.p[0] = p;
            st
        })
}

fn forces(s: &CavityHartree, st: &EnsembleState) -> (f64, Vec<f64>, Vec<f64>) {
    let sol = s.solve(st, None).unwrap();
    let mut f = s.nuclear_forces(&sol, st).unwrap();
    f.extend(s.photon_forces(&sol, st).unwrap());
    (sol.energy.total, sol.r_mean, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relabeling_molecules_permutes_everything(st in state_strategy(5), lambda in 0.0..0.08f64, shift in 0usize..5) {
        let s = solver(lambda);
        let n = st.n_molecules();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut ps = st.clone();
        ps.r = perm.iter().map(|&i| st.r[i]).collect();
        ps.orient = perm.iter().map(|&i| st.orient[i]).collect();
        let (e, r, f) = forces(&s, &st);
        let (pe, pr, pf) = forces(&s, &ps);
        prop_assert!((e - pe).abs() < 1e-10);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((pr[k] - r[i]).abs() < 1e-8);
            prop_assert!((pf[k] - f[i]).abs() < 1e-8);
        }
        prop_assert!((pf[n] - f[n]).abs() < 1e-8);
    }

    #[test]
    fn mirror_image_has_equal_energy_and_opposite_forces(st in state_strategy(4), lambda in 0.0..0.08f64) {
        let s = solver(lambda);
        let mut m = st.clone();
        m.r.iter_mut().for_each(|r| *r = -*r);
        m.q[0] = -m.q[0];
        let (e, r, f) = forces(&s, &st);
        let (me, mr, mf) = forces(&s, &m);
        prop_assert!((e - me).abs() < 1e-10);
        for (a, b) in r.iter().zip(&mr) {
            prop_assert!((a + b).abs() < 1e-8);
        }
        for (a, b) in f.iter().zip(&mf) {
            prop_assert!((a + b).abs() < 1e-8);
        }
    }

    #[test]
    fn scf_orbitals_minimize_the_mean_field_energy(
        st in state_strategy(4),
        lambda in 0.0..0.1f64,
        noise in prop::collection::vec(-1.0..1.0f64, 41),
        eps in 1e-4..1e-2f64,
    ) {
        let s = solver(lambda);
        let sol = s.solve(&st, None).unwrap();
        let e0 = s.energy_of_orbitals(&st, &sol.psi).unwrap().total;
        prop_assert!((e0 - sol.energy.total).abs() < 1e-10);
        let psi: Vec<WaveFunction1D> = sol
            .psi
            .iter()
            .map(|p| {
                let amp = p.amplitudes().iter().zip(&noise).map(|(a, z)| a + eps * z).collect();
                WaveFunction1D::new(amp).unwrap()
            })
            .collect();
        let e1 = s.energy_of_orbitals(&st, &psi).unwrap().total;
        prop_assert!(e1 >= e0 - 1e-10, "perturbed {e1} below SCF {e0}");
    }

    #[test]
    fn converged_orbitals_are_ground_states_of_their_field(st in state_strategy(4), lambda in 0.0..0.1f64) {
        let s = solver(lambda);
        let sol = s.solve(&st, None).unwrap();
        let means: Vec<Vec<f64>> = vec![(0..st.n_molecules())
            .map(|m| -s.effective_coupling(m, 0, &st).unwrap() * sol.r_mean[m])
            .collect()];
        for n in 0..st.n_molecules() {
            let h = s.dressed_hamiltonian(n, &st, &means).unwrap();
            let (e, psi) = ground_state(&h).unwrap();
            prop_assert!((e - sol.eps[n]).abs() < 1e-9);
            prop_assert!(psi.overlap(&sol.psi[n]).abs() > 1.0 - 1e-9);
        }
    }
}
