use expfunc::oracle::*;
use expfunc::process_model::{validate_model, Characteristics, ProcessModel};
use expfunc::quadrature::QuadConfig;

fn repo_file(rel: &str) -> String {
    std::fs::read_to_string(format!("{}/../../{rel}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn shipped_models_parse_and_validate() {
    for name in ["brownian", "exponential_jumps", "double_exponential", "compound_poisson", "piecewise"] {
        let m = ProcessModel::from_json(&repo_file(&format!("models/{name}.json"))).unwrap();
        let r = validate_model(&m, 1.0, &QuadConfig::default()).unwrap();
        assert!(r.ok(), "{name}: {r:?}");
    }
    let b = ProcessModel::from_json(&repo_file("models/brownian.json")).unwrap();
    assert_eq!((b.drift(0.0), b.variance(0.0)), (1.5, 1.0));
}

#[test]
fn named_scenarios_pass() {
    let text = r#"{
        "scenarios": [
            { "name": "zero-process t=1", "model": { "b": 0.0, "c": 0.0 }, "check": "mean_mc", "t": 1.0, "paths": 1000 },
            { "name": "brownian-dufresne", "model": { "b": 1.0, "c": 1.0 }, "check": "pide_closed_form", "t": 30.0 },
            {
                "name": "reversal-law",
                "model": { "b": { "affine": { "intercept": 1.0, "slope": 1.0 } }, "c": 1.0 },
                "check": "reversal_law",
                "t": 1.0,
                "paths": 20000,
                "seed": 9
            }
        ]
    }"#;
    let matrix: ScenarioMatrix = serde_json::from_str(text).unwrap();
    let r = crosscheck_suite(&matrix).unwrap();
    assert!(r.skipped.is_empty());
    assert_eq!(r.reports.len(), 3);
    assert!(r.all_pass(), "{:#?}", r.reports);
    let zero = &r.reports[0];
    assert_eq!(zero.expected, 1.0);
    assert!((zero.observed - 1.0).abs() < 1e-12);
}

#[test]
fn shipped_scenario_matrix_parses() {
    let matrix: ScenarioMatrix = serde_json::from_str(&repo_file("scenarios/default.json")).unwrap();
    assert!(matrix.scenarios.len() >= 5);
}

#[test]
fn oracle_runs_are_deterministic() {
    let text = r#"{ "scenarios": [
        { "name": "jumps", "model": { "b": 1.0, "c": 1.0, "jumps": { "kind": "exponential_positive", "mu": 2.0 } },
          "check": "mean_mc", "t": 1.0, "paths": 5000, "seed": 3 } ] }"#;
    let matrix: ScenarioMatrix = serde_json::from_str(text).unwrap();
    assert_eq!(crosscheck_suite(&matrix).unwrap(), crosscheck_suite(&matrix).unwrap());
}

#[test]
fn mean_identity_reference_values() {
    assert_eq!(mean_it(&ProcessModel::brownian(1.0, 2.0), 2.0).unwrap(), 2.0);
    let v = mean_it(&ProcessModel::brownian(0.0, 1.0), 1.0).unwrap();
    assert!((v - 1.29744254140025).abs() < 1e-12, "{v}");
}
