use expfunc::mc_engine::*;
use expfunc::process_model::{JumpDistribution, JumpMeasure, ProcessModel, RateProfile};
use expfunc::reversal::reverse_triplet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Uniform};
use statrs::distribution::{Continuous, InverseGamma};

fn cfg(n_paths: usize, seed: u64) -> McConfig {
    McConfig {
        n_paths,
        seed,
        ..McConfig::default()
    }
}

#[test]
fn brownian_terminal_moments() {
    let c = McConfig {
        record_every: 1000,
        ..cfg(1_000_000, 3)
    };
    let x1 = simulate_x(&ProcessModel::brownian(0.0, 1.0), 1.0, &c).unwrap().terminal();
    let (mean, _) = mean_and_se(&x1);
    let var = x1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (x1.len() - 1) as f64;
    assert!(mean.abs() < 3e-3, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
}

#[test]
fn increments_over_disjoint_intervals_are_uncorrelated() {
    let n = 100_000;
    let c = McConfig {
        record_every: 500,
        ..cfg(n, 4)
    };
    let m = ProcessModel::levy(0.5, 1.0, JumpMeasure::ExponentialPositive { mu: 2.0 });
    let b = simulate_x(&m, 1.0, &c).unwrap();
    let d1: Vec<f64> = (0..n).map(|i| b.row(i)[1] - b.row(i)[0]).collect();
    let d2: Vec<f64> = (0..n).map(|i| b.row(i)[2] - b.row(i)[1]).collect();
    let (m1, _) = mean_and_se(&d1);
    let (m2, _) = mean_and_se(&d2);
    let cov: f64 = d1.iter().zip(&d2).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / n as f64;
    let v1: f64 = d1.iter().map(|a| (a - m1).powi(2)).sum::<f64>() / n as f64;
    let v2: f64 = d2.iter().map(|a| (a - m2).powi(2)).sum::<f64>() / n as f64;
    let corr = cov / (v1 * v2).sqrt();
    assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "correlation {corr}");
}

#[test]
fn halving_dt_moves_the_mean_less_than_one_standard_error() {
    let m = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let coarse = simulate_functional(&m, 1.0, &McConfig { dt: 2e-3, ..cfg(100_000, 5) }).unwrap();
    let fine = simulate_functional(&m, 1.0, &cfg(100_000, 5)).unwrap();
    let (a, se) = mean_and_se(&coarse.values);
    let (b, _) = mean_and_se(&fine.values);
    assert!((a - b).abs() < se, "{a} vs {b}, se {se}");
}

#[test]
fn larger_drift_never_increases_the_functional() {
    let c = cfg(2000, 6);
    let lo = ProcessModel::levy(0.5, 1.0, JumpMeasure::DoubleExponential { mu_plus: 2.0, mu_minus: 3.0, w_plus: 0.5 });
    let hi = ProcessModel::new(
        RateProfile::affine(0.7, 0.5),
        1.0,
        JumpMeasure::DoubleExponential { mu_plus: 2.0, mu_minus: 3.0, w_plus: 0.5 },
    );
    let a = simulate_functional(&lo, 1.0, &c).unwrap();
    let b = simulate_functional(&hi, 1.0, &c).unwrap();
    assert!(a.values.iter().zip(&b.values).all(|(a, b)| b <= a));
}

#[test]
fn reversed_sde_matches_direct_law_for_brownian() {
    let m = ProcessModel::brownian(1.5, 1.0);
    let direct = simulate_functional(&m, 1.0, &cfg(100_000, 7)).unwrap();
    let rev = reverse_triplet(m, 1.0).unwrap();
    let v = simulate_v_sde(&rev, &McConfig { record_every: 1000, ..cfg(100_000, 8) }).unwrap();
    let ks = ks_two_sample(&direct.values, &v.terminal()).unwrap();
    assert!(ks.p_value > 0.01, "{ks:?}");
}

#[test]
fn reversed_sde_mean_matches_for_positive_jumps() {
    let m = ProcessModel::levy(
        0.0,
        0.0,
        JumpMeasure::CompoundPoisson {
            intensity: 1.0,
            distribution: JumpDistribution::Dirac { at: 1.0 },
        },
    );
    let direct = simulate_functional(&m, 1.0, &cfg(100_000, 9)).unwrap();
    let rev = reverse_triplet(m, 1.0).unwrap();
    let v = simulate_v_sde(&rev, &McConfig { record_every: 1000, ..cfg(100_000, 10) }).unwrap();
    let (a, sa) = mean_and_se(&direct.values);
    let (b, sb) = mean_and_se(&v.terminal());
    assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
}

#[test]
fn kde_recovers_inverse_gamma_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // 1/G with G ~ Gamma(3, rate 2) is inverse gamma with shape 3, scale 2.
    let g = Gamma::new(3.0, 0.5).unwrap();
    let xs: Vec<f64> = (0..1_000_000).map(|_| 1.0 / g.sample(&mut rng)).collect();
    let grid: Vec<f64> = (0..200).map(|i| 0.2 + 4.8 * i as f64 / 199.0).collect();
    let est = estimate_density(&xs, &grid, Bandwidth::Auto).unwrap();
    let p = est.values().unwrap();
    let law = InverseGamma::new(3.0, 2.0).unwrap();
    let err = grid.iter().zip(p).map(|(y, v)| (v - law.pdf(*y)).abs()).fold(0.0, f64::max);
    assert!(err < 0.02, "sup error {err}");
}

#[test]
fn disjoint_seed_batches_are_close() {
    let m = ProcessModel::levy(1.0, 1.0, JumpMeasure::ExponentialPositive { mu: 3.0 });
    let a = simulate_functional(&m, 1.0, &cfg(100_000, 12)).unwrap();
    let b = simulate_functional(&m, 1.0, &cfg(100_000, 13)).unwrap();
    let ks = ks_two_sample(&a.values, &b.values).unwrap();
    assert!(ks.statistic < 0.01, "{ks:?}");
}

#[test]
fn ks_calibration_on_uniform_draws() {
    let u = Uniform::new(0.0, 1.0).unwrap();
    let mut passes = 0;
    for rep in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(rep);
        let a: Vec<f64> = (0..10_000).map(|_| u.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| u.sample(&mut rng)).collect();
        if ks_two_sample(&a, &b).unwrap().p_value > 0.01 {
            passes += 1;
        }
    }
    assert!(passes >= 98, "{passes}/100");
}

#[test]
fn sample_batches_are_seed_reproducible() {
    let m = ProcessModel::levy(0.5, 0.5, JumpMeasure::DoubleExponential { mu_plus: 2.0, mu_minus: 3.0, w_plus: 0.5 });
    let rev = reverse_triplet(m, 1.0).unwrap();
    let c = McConfig { record_every: 100, ..cfg(5000, 14) };
    let a = simulate_v_pathwise(&rev, &c).unwrap();
    let b = simulate_v_pathwise(&rev, &c).unwrap();
    assert_eq!(a.values, b.values);
}
