use proptest::prelude::*;

use cavity_md::config::{parse_config, CavityConfig, ExperimentConfig, OrientationMode, PhotonStart};
use cavity_md::par::Execution;
use cavity_md::Error;

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        any::<u64>(),
        (3usize..80, 0.1..2.0f64),
        prop::collection::vec((0.5..20.0f64, 0.0..0.3f64), 1..4),
        (1usize..1000, any::<bool>()),
        (
            0.0..1e-2f64,
            0.0..1e-3f64,
            1.0..100.0f64,
            0.0..1e-4f64,
            prop::option::of(any::<bool>()),
        ),
        (
            0usize..100_000,
            1usize..20,
            any::<bool>(),
            0usize..500,
            any::<bool>(),
            any::<bool>(),
        ),
    )
        .prop_map(|(seed, (np, dx), modes, (n, random), (kt, gamma, dt, tau, rot), run)| {
            let mut c = ExperimentConfig::default();
            c.seed = seed;
            c.grid.n_points = np;
            c.grid.spacing = dx;
            c.cavity = modes
                .into_iter()
                .map(|(omega_mh, lambda)| CavityConfig { omega_mh, lambda })
                .collect();
            c.ensemble.n_molecules = n;
            c.ensemble.orientation = if random {
                OrientationMode::Random
            } else {
                OrientationMode::Aligned
            };
            c.thermostat.kt = kt;
            c.thermostat.gamma = gamma;
            c.thermostat.dt = dt;
            c.thermostat.tau_r = tau;
            c.thermostat.rotations = rot;
            c.run.n_steps = run.0;
            c.run.stride = run.1;
            c.run.polarization_diagnostics = run.2;
            c.run.burn_in = run.3;
            c.run.photon_start = if run.4 {
                PhotonStart::Origin
            } else {
                PhotonStart::Equilibrium
            };
            c.run.execution = if run.5 {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            c
        })
}

proptest! {
    #[test]
    fn toml_round_trip_is_lossless(cfg in config_strategy()) {
        let text = cfg.to_toml_string().unwrap();
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn hash_ignores_only_the_output_directory(cfg in config_strategy(), dir in "[a-z]{1,12}") {
        let mut other = cfg.clone();
        other.output_dir = dir.into();
        prop_assert_eq!(other.hash().unwrap(), cfg.hash().unwrap());
        other.seed = cfg.seed.wrapping_add(1);
        prop_assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn invalid_values_name_their_field() {
    for (text, field) in [
        ("[thermostat]\ndt = 0.0\n", "thermostat.dt"),
        ("[[cavity]]\nomega_mh = -1.0\n", "cavity[0].omega_mh"),
        ("[ensemble]\nN = 0\n", "ensemble.n_molecules"),
        ("[run]\nstride = 0\n", "run.stride"),
        ("[scf]\nmax_iter = 0\n", "scf.max_iter"),
    ] {
        match parse_config(text) {
            Err(Error::Validation { field: f, .. }) => assert_eq!(f, field, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn syntax_errors_report_position() {
    match parse_config("seed = 1\n[grid]\nspacing = = 2\n") {
        Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        parse_config("[ensemble]\nN = \"many\"\n"),
        Err(Error::ConfigParse { .. })
    ));
}
