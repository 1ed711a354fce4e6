//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Reference values come from `statrs` (inverse gamma) and Simpson sums
//! written here, never from the solver code paths under test.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use expfunc::grid::SpaceGrid;
use expfunc::mc_engine::{ks_one_sample, ks_two_sample, mean_and_se, simulate_functional, simulate_v_pathwise, McConfig};
use expfunc::pide::{exponential_tail_term, jump_tail_pointwise, rhs_direct_pointwise, rhs_tail_pointwise, solve_density, PideConfig, SmoothSlice};
use expfunc::process_model::{check_smoothness_conditions, JumpDistribution, JumpMeasure, ProcessModel, RateProfile, SmoothnessReport};
use expfunc::quadrature::QuadConfig;
use expfunc::reversal::{dynkin_check, reverse_triplet, TestFunction};
use expfunc::stationary::solve_stationary;
use statrs::distribution::{Continuous, InverseGamma};

type Outcome = Result<(bool, String), String>;

/// Inverse gamma law of `I_∞` for Brownian motion with drift `b` and variance `c`.
fn dufresne(b: f64, c: f64) -> InverseGamma {
    InverseGamma::new(2.0 * b / c, 2.0 / c).unwrap()
}

fn sup_error(grid: &SpaceGrid, p: &[f64], lo: f64, hi: f64, law: &InverseGamma) -> f64 {
    grid.y()
        .iter()
        .zip(p)
        .filter(|(y, _)| **y >= lo && **y <= hi)
        .map(|(y, v)| (v - law.pdf(*y)).abs())
        .fold(0.0, f64::max)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn stationary_closed_form() -> Outcome {
    let grid = SpaceGrid::log_spaced(1e-4, 1e4, 801).map_err(e)?;
    let (sol, took) = timed(|| solve_stationary(&ProcessModel::brownian(1.0, 1.0), &grid, 1e-10));
    let sol = sol.map_err(e)?;
    // 4 x^{-3} e^{-2/x}
    let direct = grid
        .y()
        .iter()
        .zip(&sol.p_inf)
        .filter(|(y, _)| **y >= 0.2 && **y <= 5.0)
        .map(|(y, p)| (p - 4.0 * y.powi(-3) * (-2.0 / y).exp()).abs())
        .fold(0.0, f64::max);
    let err = sup_error(&grid, &sol.p_inf, 0.2, 5.0, &dufresne(1.0, 1.0)).max(direct);
    let ok = err < 1e-3 && took < Duration::from_secs(10);
    Ok((ok, format!("sup error {err:.3e} (< 1e-3), {:.2}s (< 10s)", took.as_secs_f64())))
}

fn long_horizon_density() -> Outcome {
    let grid = SpaceGrid::log_spaced(1e-4, 1e4, 801).map_err(e)?;
    let rev = reverse_triplet(ProcessModel::brownian(1.0, 1.0), 30.0).map_err(e)?;
    let (field, took) = timed(|| solve_density(&rev, 30.0, &grid, &PideConfig::default()));
    let field = field.map_err(e)?;
    let err = sup_error(&grid, field.final_slice(), 0.2, 5.0, &dufresne(1.0, 1.0));
    let ok = err < 0.02 && took < Duration::from_secs(120);
    Ok((ok, format!("sup error {err:.3e} (< 0.02), {:.2}s (< 120s)", took.as_secs_f64())))
}

fn pide_vs_mc() -> Outcome {
    let model = ProcessModel::brownian(1.5, 1.0);
    let grid = SpaceGrid::log_spaced(1e-4, 1e4, 801).map_err(e)?;
    let start = Instant::now();
    let rev = reverse_triplet(model.clone(), 1.0).map_err(e)?;
    let field = solve_density(&rev, 1.0, &grid, &PideConfig::default()).map_err(e)?;
    let cdf = field.final_cdf();
    let cfg = McConfig {
        n_paths: 1_000_000,
        seed: 2024,
        ..McConfig::default()
    };
    let samples = simulate_functional(&model, 1.0, &cfg).map_err(e)?.values;
    let ks = ks_one_sample(&samples, |y| grid.interpolate(&cdf, y, 0.0, 1.0)).map_err(e)?;
    let took = start.elapsed();
    let ok = ks.statistic < 0.03 && took < Duration::from_secs(180);
    Ok((ok, format!("KS distance {:.4} (< 0.03), {:.1}s (< 180s)", ks.statistic, took.as_secs_f64())))
}

/// `∫_0^t exp(a s) ds` by Simpson, with `a` written out per scenario.
fn simpson_mean(a: f64, t: f64) -> f64 {
    let n = 2000;
    let h = t / n as f64;
    let f = |s: f64| (a * s).exp();
    let inner: f64 = (1..n).map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    h / 3.0 * (f(0.0) + f(t) + inner)
}

fn moment_identity() -> Outcome {
    // a = -b + c/2 + ∫(e^{-x} - 1 + x) K(dx); for e^{-μx} on x > 0 the
    // integral is 1/(μ+1) - 1/μ + 1/μ², and for the negative side with
    // density w e^{-μ|x|} it is w (1/(μ-1) - 1/μ - 1/μ²).
    let exp_pos = |mu: f64| 1.0 / (mu + 1.0) - 1.0 / mu + 1.0 / (mu * mu);
    let exp_neg = |mu: f64| 1.0 / (mu - 1.0) - 1.0 / mu - 1.0 / (mu * mu);
    let cases = [
        ("pure drift", ProcessModel::brownian(1.0, 0.0), -1.0),
        ("brownian", ProcessModel::brownian(1.5, 1.0), -1.0),
        (
            "exp mu=2",
            ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 2.0 }),
            -0.5 + exp_pos(2.0),
        ),
        (
            "exp mu=3",
            ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 }),
            -0.5 + exp_pos(3.0),
        ),
        (
            "double exp",
            ProcessModel::levy(
                0.5,
                0.5,
                JumpMeasure::DoubleExponential {
                    mu_plus: 2.0,
                    mu_minus: 3.0,
                    w_plus: 0.5,
                },
            ),
            -0.25 + 0.5 * exp_pos(2.0) + 0.5 * exp_neg(3.0),
        ),
    ];
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, model, a)) in cases.iter().enumerate() {
        let cfg = McConfig {
            seed: 100 + i as u64,
            ..McConfig::default()
        };
        let xs = simulate_functional(model, 1.0, &cfg).map_err(e)?.values;
        let (mean, se) = mean_and_se(&xs);
        let expected = simpson_mean(*a, 1.0);
        let diff = (mean - expected).abs();
        // Identical paths leave only rounding noise in the standard error.
        let deterministic = se <= 1e-12 * mean.abs();
        let pass = if !deterministic {
            diff <= 3.0 * se
        } else {
            // Deterministic path: only the trapezoid error of the mesh remains,
            // bounded by t dt² max|f''| / 12 with f = e^{-s}.
            diff <= 1e-6 / 12.0
        };
        ok &= pass;
        let z = if deterministic { 0.0 } else { diff / se };
        parts.push(format!("{name}: |d|={diff:.2e} ({z:.2} se)"));
    }
    let took = start.elapsed();
    ok &= took < Duration::from_secs(120);
    Ok((ok, format!("{}; {:.1}s (< 120s)", parts.join(", "), took.as_secs_f64())))
}

fn reversal_law() -> Outcome {
    let model = ProcessModel::new(RateProfile::affine(1.0, 1.0), 1.0, JumpMeasure::None);
    let rev = reverse_triplet(model.clone(), 1.0).map_err(e)?;
    let mut passes = 0;
    let mut ps = Vec::new();
    for rep in 0..10u64 {
        let direct = McConfig {
            seed: 1000 + 2 * rep,
            ..McConfig::default()
        };
        let reversed = McConfig {
            seed: 1001 + 2 * rep,
            record_every: 1000,
            ..McConfig::default()
        };
        let i_t = simulate_functional(&model, 1.0, &direct).map_err(e)?.values;
        let v_t = simulate_v_pathwise(&rev, &reversed).map_err(e)?.terminal();
        let ks = ks_two_sample(&i_t, &v_t).map_err(e)?;
        if ks.p_value > 0.01 {
            passes += 1;
        }
        ps.push(format!("{:.3}", ks.p_value));
    }
    Ok((passes >= 9, format!("{passes}/10 with p > 0.01 (need 9); p = [{}]", ps.join(", "))))
}

fn dynkin() -> Outcome {
    let rev = reverse_triplet(ProcessModel::brownian(1.0, 1.0), 1.0).map_err(e)?;
    let cfg = McConfig {
        seed: 77,
        record_every: 10,
        ..McConfig::default()
    };
    let batch = simulate_v_pathwise(&rev, &cfg).map_err(e)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (lambda, f) in TestFunction::shipped_set() {
        let r = dynkin_check(&rev, &f, 1.0, &batch, &QuadConfig::default()).map_err(e)?;
        ok &= r.within(3.0);
        parts.push(format!("λ={lambda}: {:.2} se", r.residual / r.std_error));
    }
    Ok((ok, parts.join(", ")))
}

fn jump_forms() -> Outcome {
    let quad = QuadConfig::default();
    let measures = [
        JumpMeasure::ExponentialPositive { mu: 2.0 },
        JumpMeasure::ExponentialPositive { mu: 3.0 },
        JumpMeasure::DoubleExponential {
            mu_plus: 2.5,
            mu_minus: 3.0,
            w_plus: 0.4,
        },
    ];
    let slices = [(0.0, 0.5), (-1.0, 0.4), (0.7, 0.8)];
    let ys: Vec<f64> = (0..25).map(|i| 10f64.powf(-1.5 + 0.125 * i as f64)).collect();
    let mut worst: f64 = 0.0;
    for k in &measures {
        let model = ProcessModel::levy(0.8, 0.6, k.clone());
        for &(mu, sigma) in &slices {
            let slice = SmoothSlice::lognormal(mu, sigma);
            let direct: Vec<f64> = ys
                .iter()
                .map(|y| rhs_direct_pointwise(&model, 0.0, &slice, *y, &quad))
                .collect::<Result<_, _>>()
                .map_err(e)?;
            let tail: Vec<f64> = ys
                .iter()
                .map(|y| rhs_tail_pointwise(&model, 0.0, &slice, *y, &quad))
                .collect::<Result<_, _>>()
                .map_err(e)?;
            let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (d, t) in direct.iter().zip(&tail) {
                worst = worst.max((d - t).abs() / d.abs().max(1e-3 * scale));
            }
            if let JumpMeasure::ExponentialPositive { mu: rate } = k {
                for y in &ys {
                    let general = jump_tail_pointwise(k, &slice, *y, &quad).map_err(e)?;
                    let special = exponential_tail_term(*rate, &*slice.p, *y, &quad).map_err(e)?;
                    worst = worst.max((general - special).abs() / general.abs().max(1e-3 * scale));
                }
            }
        }
    }
    Ok((worst <= 1e-6, format!("max relative gap {worst:.2e} (<= 1e-6)")))
}

fn conservation_and_order() -> Outcome {
    let law = dufresne(1.0, 1.0);
    let model = ProcessModel::brownian(1.0, 1.0);
    let coarse = SpaceGrid::log_spaced(1e-4, 1e4, 401).map_err(e)?;
    let fine = coarse.refined();
    let stat = |g: &SpaceGrid| -> Result<f64, String> {
        let s = solve_stationary(&model, g, 1e-10).map_err(e)?;
        Ok(sup_error(g, &s.p_inf, 0.2, 5.0, &law))
    };
    let stat_ratio = stat(&coarse)? / stat(&fine)?;
    let rev = reverse_triplet(model.clone(), 30.0).map_err(e)?;
    let mut drift: f64 = 0.0;
    let mut pide_err = Vec::new();
    for g in [&coarse, &fine] {
        let f = solve_density(&rev, 30.0, g, &PideConfig::default()).map_err(e)?;
        drift = drift.max(f.mass_drift_rate());
        pide_err.push(sup_error(g, f.final_slice(), 0.2, 5.0, &law));
    }
    let jumpy = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let f = solve_density(
        &reverse_triplet(jumpy, 1.0).map_err(e)?,
        1.0,
        &SpaceGrid::log_spaced(1e-4, 1e4, 801).map_err(e)?,
        &PideConfig::default(),
    )
    .map_err(e)?;
    drift = drift.max(f.mass_drift_rate());
    let pide_ratio = pide_err[0] / pide_err[1];
    let ok = drift < 1e-3 && stat_ratio >= 3.0 && pide_ratio >= 3.0;
    Ok((
        ok,
        format!("mass drift {drift:.2e}/unit time (< 1e-3); refinement ratio stationary {stat_ratio:.2}, t=30 density {pide_ratio:.2} (>= 3)"),
    ))
}

fn smoothness_truth_table() -> Outcome {
    let quad = QuadConfig::default();
    let bounded = |lo: f64, hi: f64| JumpMeasure::CompoundPoisson {
        intensity: 1.0,
        distribution: JumpDistribution::Uniform { lo, hi },
    };
    let report = |d, n, p| SmoothnessReport {
        diffusion_positive: d,
        negative_exp_moments_finite: n,
        positive_jumps_bounded: p,
        all: d && n && p,
    };
    let cases = [
        ("c0 = 0", ProcessModel::levy(1.0, 0.0, bounded(-1.0, 0.5)), report(false, true, true)),
        (
            "unbounded positive jumps",
            ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 }),
            report(true, true, false),
        ),
        ("bounded jumps, c0 > 0", ProcessModel::levy(1.0, 1.0, bounded(-2.0, 0.5)), report(true, true, true)),
        ("no jumps, c0 > 0", ProcessModel::brownian(1.0, 1.0), report(true, true, true)),
        (
            "heavy negative tail",
            ProcessModel::levy(
                1.0,
                1.0,
                JumpMeasure::DoubleExponential {
                    mu_plus: 2.0,
                    mu_minus: 3.0,
                    w_plus: 0.5,
                },
            ),
            report(true, false, false),
        ),
    ];
    let mut wrong = Vec::new();
    for (name, model, expected) in &cases {
        let got = check_smoothness_conditions(model, 4.0, &quad).map_err(e)?;
        if got != *expected {
            wrong.push(format!("{name}: got {got:?}"));
        }
    }
    let detail = if wrong.is_empty() {
        format!("{} rows match", cases.len())
    } else {
        wrong.join("; ")
    };
    Ok((wrong.is_empty(), detail))
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_expfunc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .status()
        .map_err(e)?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {status}"))
    }
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let model = dir.path().join("model.json");
    std::fs::write(&model, r#"{"b": 1.0, "c": 1.0, "jumps": {"kind": "exponential_positive", "mu": 3.0}}"#).map_err(e)?;
    let m = model.to_str().unwrap();
    let runs = [
        vec!["simulate", "--model", m, "--paths", "20000", "--seed", "5"],
        vec!["density-mc", "--model", m, "--paths", "20000", "--seed", "5"],
        vec!["solve-pide", "--model", m, "--paths", "20000", "--seed", "5", "--grid-points", "401"],
    ];
    let files = ["simulate.csv", "density-mc.csv", "solve-pide.csv"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for args in &runs {
        run_cli(&a, args)?;
        run_cli(&b, args)?;
    }
    let mut same = true;
    for f in files {
        same &= std::fs::read(a.join(f)).map_err(e)? == std::fs::read(b.join(f)).map_err(e)?;
    }
    Ok((same, format!("{} CSVs compared byte for byte", files.len())))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("stationary density vs closed form", stationary_closed_form),
        ("density at t = 30 vs closed form", long_horizon_density),
        ("density vs Monte Carlo at t = 1", pide_vs_mc),
        ("first moment identity", moment_identity),
        ("time-reversal law equality", reversal_law),
        ("Dynkin identity", dynkin),
        ("direct vs tail jump forms", jump_forms),
        ("mass conservation and grid order", conservation_and_order),
        ("smoothness truth table", smoothness_truth_table),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(msg) => (false, format!("error: {msg}")),
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
