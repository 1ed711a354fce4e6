//! Reference values and cross-checks: the first-moment identity, closed
//! forms evaluated independently, and a scenario runner comparing
//! simulation, the forward equations and the stationary solver.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, InverseGamma};

use crate::error::{Error, Result};
use crate::grid::SpaceGrid;
use crate::mc_engine::{ks_two_sample, mean_and_se, simulate_functional, simulate_v_pathwise, McConfig};
use crate::pide::{solve_density, PideConfig};
use crate::process_model::{compute_a, Characteristics, ProcessModel};
use crate::quadrature::QuadConfig;
use crate::reversal::reverse_triplet;
use crate::stationary::{check_finiteness, solve_stationary};

/// `E I_t = ∫_0^t E e^{-X_s} ds = (e^{a₀ t} - 1)/a₀`, or `t` when `a₀ = 0`.
pub fn mean_it(model: &ProcessModel, t: f64) -> Result<f64> {
    if !model.is_levy() {
        return Err(Error::Unsupported("the moment identity is stated for Lévy models".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be nonnegative, got {t}")));
    }
    let a = compute_a(model, 0.0, &QuadConfig::default())?;
    Ok(if a == 0.0 { t } else { (a * t).exp_m1() / a })
}

/// Inverse-gamma density evaluated through `statrs`, independent of the
/// closed-form code path used by the solvers.
pub fn inverse_gamma_density(shape: f64, scale: f64, y: f64) -> Result<f64> {
    let d = InverseGamma::new(shape, scale).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.pdf(y))
}

pub fn inverse_gamma_cdf(shape: f64, scale: f64, y: f64) -> Result<f64> {
    let d = InverseGamma::new(shape, scale).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.cdf(y))
}

/// Composite Simpson rule with `n` (rounded up to even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(2) + n % 2;
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    h / 3.0 * (f(a) + f(b) + inner)
}

/// Two-sample KS statistic above which `p < alpha` (asymptotic).
pub fn ks_critical(alpha: f64, n_a: usize, n_b: usize) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n_a + n_b) as f64 / (n_a as f64 * n_b as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub method: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, expected: f64, observed: f64, tolerance: f64, method: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            expected,
            observed,
            tolerance,
            pass: (expected - observed).abs() <= tolerance,
            method: method.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: 1e-4,
            max: 1e4,
            points: 801,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<SpaceGrid> {
        SpaceGrid::log_spaced(self.min, self.max, self.points)
    }
}

fn default_paths() -> usize {
    100_000
}
fn default_dt() -> f64 {
    1e-3
}
fn default_alpha() -> f64 {
    0.01
}
fn default_range() -> [f64; 2] {
    [0.2, 5.0]
}
fn default_distance_tol() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Monte Carlo mean of `I_t` against the moment identity.
    MeanMc {
        t: f64,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    /// Density from the forward equation against the Brownian closed form.
    PideClosedForm {
        t: f64,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "default_range")]
        range: [f64; 2],
        #[serde(default = "default_distance_tol")]
        tolerance: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Stationary solver against the Brownian closed form.
    StationaryClosedForm {
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "default_range")]
        range: [f64; 2],
        #[serde(default = "default_distance_tol")]
        tolerance: f64,
    },
    /// Direct `I_t` samples against reversed-construction `V_t` samples.
    ReversalLaw {
        t: f64,
        #[serde(default = "default_paths")]
        paths: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ProcessModel,
    #[serde(flatten)]
    pub check: Check,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioMatrix {
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub reports: Vec<OracleReport>,
    pub skipped: Vec<Skipped>,
}

impl SuiteResult {
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

/// Brownian parameters `(b₀, c₀)` when the model has a closed-form `I_∞`.
fn brownian_params(model: &ProcessModel) -> std::result::Result<(f64, f64), String> {
    if !model.is_levy() || !model.jumps(0.0).is_none() {
        return Err("closed form needs a Lévy model without jumps".into());
    }
    let (b, c) = (model.drift(0.0), model.variance(0.0));
    if !(b > 0.0 && c > 0.0) {
        return Err(format!("closed form needs b₀ > 0 and c₀ > 0, got ({b}, {c})"));
    }
    Ok((b, c))
}

fn sup_distance(grid: &SpaceGrid, p: &[f64], range: [f64; 2], exact: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let mut d: f64 = 0.0;
    for (y, v) in grid.y().iter().zip(p) {
        if *y >= range[0] && *y <= range[1] {
            d = d.max((v - exact(*y)?).abs());
        }
    }
    Ok(d)
}

/// Allowance for the trapezoid bias of a deterministic path `X_s = b s`.
pub fn trapezoid_bias_bound(b: f64, t: f64, dt: f64) -> f64 {
    t * dt * dt / 12.0 * b * b * (-b * t).exp().max(1.0)
}

fn run(s: &Scenario) -> Result<std::result::Result<OracleReport, String>> {
    let m = &s.model;
    m.check_structure()?;
    let report = match &s.check {
        Check::MeanMc { t, paths, seed, dt } => {
            if !m.is_levy() {
                return Ok(Err("moment identity needs a Lévy model".into()));
            }
            let expected = mean_it(m, *t)?;
            let cfg = McConfig {
                dt: *dt,
                n_paths: *paths,
                seed: *seed,
                ..McConfig::default()
            };
            let batch = simulate_functional(m, *t, &cfg)?;
            let (mean, se) = mean_and_se(&batch.values);
            let deterministic = m.variance(0.0) == 0.0 && m.jumps(0.0).is_none();
            let tol = if deterministic {
                trapezoid_bias_bound(m.drift(0.0), *t, *dt)
            } else {
                3.0 * se
            };
            OracleReport::new(&s.name, expected, mean, tol, "monte carlo mean vs (e^{a t} - 1)/a")
        }
        Check::PideClosedForm {
            t,
            grid,
            range,
            tolerance,
            seed,
        } => {
            let (b, c) = match brownian_params(m) {
                Ok(v) => v,
                Err(r) => return Ok(Err(r)),
            };
            let g = grid.build()?;
            let cfg = PideConfig {
                bootstrap: crate::pide::BootstrapSource::McKde {
                    n_paths: 100_000,
                    seed: *seed,
                    dt: 1e-3,
                    eps_cutoff: 1e-3,
                },
                ..PideConfig::default()
            };
            let field = solve_density(&reverse_triplet(m.clone(), *t)?, *t, &g, &cfg)?;
            let d = sup_distance(&g, field.final_slice(), *range, |y| inverse_gamma_density(2.0 * b / c, 2.0 / c, y))?;
            OracleReport::new(&s.name, 0.0, d, *tolerance, "sup |p_t - inverse-gamma density|")
        }
        Check::StationaryClosedForm { grid, range, tolerance } => {
            let (b, c) = match brownian_params(m) {
                Ok(v) => v,
                Err(r) => return Ok(Err(r)),
            };
            let g = grid.build()?;
            let sol = solve_stationary(m, &g, 1e-10)?;
            let d = sup_distance(&g, &sol.p_inf, *range, |y| inverse_gamma_density(2.0 * b / c, 2.0 / c, y))?;
            OracleReport::new(&s.name, 0.0, d, *tolerance, "sup |p_inf - inverse-gamma density|")
        }
        Check::ReversalLaw {
            t,
            paths,
            seed,
            dt,
            alpha,
        } => {
            let cfg = McConfig {
                dt: *dt,
                n_paths: *paths,
                seed: *seed,
                ..McConfig::default()
            };
            let direct = simulate_functional(m, *t, &cfg)?;
            let rev = reverse_triplet(m.clone(), *t)?;
            let other = McConfig {
                seed: seed.wrapping_add(1),
                record_every: cfg.steps_for(*t)?,
                ..cfg
            };
            let v = simulate_v_pathwise(&rev, &other)?;
            let ks = ks_two_sample(&direct.values, &v.terminal())?;
            OracleReport::new(
                &s.name,
                0.0,
                ks.statistic,
                ks_critical(*alpha, *paths, *paths),
                format!("two-sample KS of I_t vs V_t (p = {:.4})", ks.p_value),
            )
        }
    };
    Ok(Ok(report))
}

/// Runs every scenario; unsupported combinations are skipped with a reason.
pub fn crosscheck_suite(matrix: &ScenarioMatrix) -> Result<SuiteResult> {
    let mut out = SuiteResult::default();
    for s in &matrix.scenarios {
        if let Check::StationaryClosedForm { .. } = s.check {
            if s.model.is_levy() && !check_finiteness(&s.model)? {
                out.skipped.push(Skipped {
                    name: s.name.clone(),
                    reason: format!("I_∞ is infinite for b₀ = {}", s.model.drift(0.0)),
                });
                continue;
            }
        }
        match run(s) {
            Ok(Ok(r)) => out.reports.push(r),
            Ok(Err(reason)) => out.skipped.push(Skipped {
                name: s.name.clone(),
                reason,
            }),
            Err(Error::Unsupported(reason)) => out.skipped.push(Skipped {
                name: s.name.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
