use expfunc::grid::SpaceGrid;
use expfunc::mc_engine::{ks_one_sample, simulate_functional, McConfig};
use expfunc::oracle::simpson;
use expfunc::pide::{solve_density, PideConfig};
use expfunc::process_model::{JumpMeasure, ProcessModel};
use expfunc::reversal::reverse_triplet;
use expfunc::stationary::*;
use statrs::distribution::{Continuous, ContinuousCDF, InverseGamma};

fn grid(n: usize) -> SpaceGrid {
    SpaceGrid::log_spaced(1e-4, 1e4, n).unwrap()
}

fn law(b: f64, c: f64) -> InverseGamma {
    InverseGamma::new(2.0 * b / c, 2.0 / c).unwrap()
}

#[test]
fn closed_form_is_normalised_with_known_mean() {
    for &(b, c) in &[(1.0, 1.0), (1.5, 1.0), (2.0, 0.5)] {
        // ∫ p dy = ∫ y p(y) dz with y = e^z.
        let mass = simpson(|z| z.exp() * brownian_closed_form(b, c, z.exp()).unwrap(), -12.0, 16.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-6, "({b}, {c}): {mass}");
    }
    let mean = simpson(|z| (2.0 * z).exp() * brownian_closed_form(1.5, 1.0, z.exp()).unwrap(), -12.0, 25.0, 40_000);
    assert!((mean - 1.0).abs() < 1e-6, "{mean}");
    assert!((brownian_closed_form(1.0, 1.0, 1.0).unwrap() - law(1.0, 1.0).pdf(1.0)).abs() < 1e-14);
}

#[test]
fn brownian_cdf_matches_inverse_gamma() {
    let g = grid(801);
    let sol = solve_stationary(&ProcessModel::brownian(1.0, 1.0), &g, 1e-10).unwrap();
    let l = law(1.0, 1.0);
    let err = g
        .y()
        .iter()
        .zip(&sol.f_inf)
        .filter(|(y, _)| **y >= 0.1 && **y <= 20.0)
        .map(|(y, f)| (f - l.cdf(*y)).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
    assert!(sol.projection < 1e-4);
}

#[test]
fn mode_sits_at_inverse_gamma_mode() {
    let g = grid(801);
    let sol = solve_stationary(&ProcessModel::brownian(2.0, 0.5), &g, 1e-10).unwrap();
    let k = (0..g.len()).max_by(|&i, &j| sol.p_inf[i].total_cmp(&sol.p_inf[j])).unwrap();
    // Mode of the inverse gamma law is β/(α + 1).
    let (alpha, beta) = (8.0, 4.0);
    let mode = beta / (alpha + 1.0);
    assert!((g.y()[k].ln() - f64::ln(mode)).abs() <= g.h(), "{} vs {mode}", g.y()[k]);
}

#[test]
fn closed_form_residual_is_second_order() {
    let m = ProcessModel::brownian(1.0, 1.0);
    let res = |n: usize| {
        let g = grid(n);
        let p: Vec<f64> = g.y().iter().map(|y| brownian_closed_form(1.0, 1.0, *y).unwrap()).collect();
        stationary_residual(&m, &g, &p).unwrap()
    };
    let (coarse, fine) = (res(401), res(801));
    assert!(coarse / fine >= 3.0, "{coarse} / {fine}");

    let g = grid(801);
    let wrong: Vec<f64> = g.y().iter().map(|y| InverseGamma::new(3.0, 2.0).unwrap().pdf(*y)).collect();
    assert!(stationary_residual(&m, &g, &wrong).unwrap() > 10.0 * fine);
}

#[test]
fn exponential_jumps_satisfy_the_stationary_equation() {
    let m = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let g = grid(1601);
    let sol = solve_stationary(&m, &g, 1e-10).unwrap();
    let res = stationary_residual(&m, &g, &sol.p_inf).unwrap();
    assert!(res < 1e-3, "residual {res}");
    assert!(sol.projection < 1e-4);

    let cfg = McConfig {
        dt: 0.01,
        n_paths: 20_000,
        seed: 31,
        ..McConfig::default()
    };
    let xs = simulate_functional(&m, 30.0, &cfg).unwrap();
    let ks = ks_one_sample(&xs.values, |y| g.interpolate(&sol.f_inf, y, 0.0, 1.0)).unwrap();
    assert!(ks.statistic < 0.03, "{ks:?}");
}

#[test]
fn extending_the_grid_leaves_the_solution_unchanged() {
    let m = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let tol = 1e-7;
    let g = grid(801);
    // Same spacing, upper end moved out by ln 2.
    let extra = (std::f64::consts::LN_2 / g.h()).round() as usize;
    let wide = SpaceGrid::log_spaced(1e-4, 1e-4 * (g.h() * (800 + extra) as f64).exp(), 801 + extra).unwrap();
    let a = solve_stationary(&m, &g, tol).unwrap();
    let b = solve_stationary(&m, &wide, tol).unwrap();
    let gap = a.f_inf.iter().zip(&b.f_inf).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < 2.0 * tol, "gap {gap}");
}

#[test]
fn long_horizon_density_matches_stationary_solution() {
    let m = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let g = grid(801);
    let sol = solve_stationary(&m, &g, 1e-10).unwrap();
    let field = solve_density(&reverse_triplet(m, 30.0).unwrap(), 30.0, &g, &PideConfig::default()).unwrap();
    let median = g.y()[sol.f_inf.iter().position(|f| *f >= 0.5).unwrap()];
    let gap = g
        .y()
        .iter()
        .zip(field.final_slice().iter().zip(&sol.p_inf))
        .filter(|(y, _)| **y >= 0.2 * median && **y <= 5.0 * median)
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap < 0.02, "{gap}");
}

#[test]
fn zero_drift_functional_keeps_growing() {
    let m = ProcessModel::brownian(0.0, 1.0);
    let cfg = McConfig {
        dt: 0.01,
        n_paths: 4000,
        seed: 32,
        ..McConfig::default()
    };
    let median = |t: f64| {
        let mut v = simulate_functional(&m, t, &cfg).unwrap().values;
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    };
    let (a, b, c) = (median(10.0), median(20.0), median(40.0));
    assert!(a < b && b < c, "{a} {b} {c}");
    assert!(!check_finiteness(&m).unwrap());
}
