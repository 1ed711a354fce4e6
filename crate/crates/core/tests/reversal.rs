use expfunc::mc_engine::{ks_two_sample, mean_and_se, simulate_functional, simulate_v_pathwise, simulate_v_pathwise_from, McConfig};
use expfunc::process_model::ProcessModel;
use expfunc::quadrature::QuadConfig;
use expfunc::reversal::*;

fn model_file(name: &str) -> ProcessModel {
    let path = format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"));
    ProcessModel::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// `(E f(V_δ) - f(1)) / δ` from `V_0 = 1`, with its standard error.
fn finite_difference(m: &ProcessModel, f: &TestFunction, delta: f64, seed: u64) -> (f64, f64) {
    let cfg = McConfig {
        dt: delta / 100.0,
        n_paths: 1_000_000,
        seed,
        record_every: 100,
        ..McConfig::default()
    };
    let b = simulate_v_pathwise_from(m, delta, 1.0, &cfg).unwrap();
    let d: Vec<f64> = b.terminal().iter().map(|v| (f.value(*v) - f.value(1.0)) / delta).collect();
    mean_and_se(&d)
}

#[test]
fn generator_matches_monte_carlo_difference_quotient() {
    let m = ProcessModel::brownian(0.0, 1.0);
    let rev = reverse_triplet(m.clone(), 1.0).unwrap();
    let f = TestFunction::shipped(1.0);
    let quad = QuadConfig::default();
    let g = generator_apply(&rev, &f, 1.0, 0.5, &quad).unwrap();
    // a = 1/2, f'(1) = e^{-1}, f''(1) = 0.
    assert!((g - 1.5 * (-1f64).exp()).abs() < 1e-12);
    let (d1, s1) = finite_difference(&m, &f, 0.02, 41);
    let (d2, s2) = finite_difference(&m, &f, 0.01, 42);
    let extrapolated = 2.0 * d2 - d1;
    let se = (4.0 * s2 * s2 + s1 * s1).sqrt();
    assert!((extrapolated - g).abs() < 4.0 * se, "{extrapolated} vs {g} (se {se})");
}

#[test]
fn dynkin_identity_holds_for_brownian() {
    let rev = reverse_triplet(ProcessModel::brownian(1.5, 1.0), 1.0).unwrap();
    let cfg = McConfig {
        seed: 43,
        record_every: 10,
        ..McConfig::default()
    };
    let batch = simulate_v_pathwise(&rev, &cfg).unwrap();
    let r = dynkin_check(&rev, &TestFunction::shipped(1.0), 1.0, &batch, &QuadConfig::default()).unwrap();
    assert!(r.within(3.0), "{r:?}");
    let zero = dynkin_check(&rev, &TestFunction::zero(), 1.0, &batch, &QuadConfig::default()).unwrap();
    assert_eq!(zero.residual, 0.0);
}

#[test]
fn dynkin_identity_is_exact_up_to_mesh_error_for_pure_drift() {
    let rev = reverse_triplet(ProcessModel::brownian(1.0, 0.0), 1.0).unwrap();
    let cfg = McConfig {
        n_paths: 8,
        seed: 44,
        ..McConfig::default()
    };
    let batch = simulate_v_pathwise(&rev, &cfg).unwrap();
    for (_, f) in TestFunction::shipped_set() {
        let r = dynkin_check(&rev, &f, 1.0, &batch, &QuadConfig::default()).unwrap();
        // Trapezoid error of a smooth integrand on a 1e-3 mesh.
        assert!(r.residual < 1e-6, "{r:?}");
    }
}

#[test]
fn dynkin_needs_s_on_the_mesh() {
    let rev = reverse_triplet(ProcessModel::brownian(1.0, 1.0), 1.0).unwrap();
    let cfg = McConfig {
        n_paths: 16,
        record_every: 100,
        ..McConfig::default()
    };
    let batch = simulate_v_pathwise(&rev, &cfg).unwrap();
    let r = dynkin_check(&rev, &TestFunction::shipped(1.0), 0.55, &batch, &QuadConfig::default());
    assert!(matches!(r, Err(expfunc::Error::Domain(_))));
}

#[test]
fn reversed_paths_reproduce_the_law_of_a_piecewise_model() {
    let m = model_file("piecewise.json");
    let direct = simulate_functional(&m, 1.0, &McConfig { seed: 45, ..McConfig::default() }).unwrap();
    let rev = reverse_triplet(m, 1.0).unwrap();
    let v = simulate_v_pathwise(&rev, &McConfig { seed: 46, record_every: 1000, ..McConfig::default() }).unwrap();
    let ks = ks_two_sample(&direct.values, &v.terminal()).unwrap();
    assert!(ks.p_value > 0.01, "{ks:?}");
}
