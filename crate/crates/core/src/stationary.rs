//! Law of `I_∞` for Lévy models: the stationary distribution-function
//! equation with `F(0) = 0`, `F(∞) = 1`, and the Brownian closed form.

use serde::Serialize;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::grid::{isotonic, SpaceGrid};
use crate::pide::density_from_cdf;
use crate::pide::shared::{central_rhs, CdfOperator};
use crate::process_model::{Characteristics, ProcessModel};
use crate::quadrature::QuadConfig;

/// `I_∞ < ∞` a.s. when `X` drifts to `+∞`, i.e. when `E X_1 = b₀ > 0`.
pub fn check_finiteness(model: &ProcessModel) -> Result<bool> {
    if !model.is_levy() {
        return Err(Error::Unsupported("finiteness of I_∞ is decided for Lévy models only".into()));
    }
    Ok(model.drift(0.0) > 0.0)
}

fn check_brownian(b0: f64, c0: f64) -> Result<()> {
    if !(b0 > 0.0) || !(c0 > 0.0) {
        return Err(Error::Domain(format!("closed form needs b₀ > 0 and c₀ > 0, got {b0}, {c0}")));
    }
    Ok(())
}

/// Inverse-gamma density with shape `2b₀/c₀` and scale `2/c₀`.
pub fn brownian_closed_form(b0: f64, c0: f64, y: f64) -> Result<f64> {
    check_brownian(b0, c0)?;
    if !(y > 0.0) {
        return Err(Error::Domain(format!("density argument must be positive, got {y}")));
    }
    let alpha = 2.0 * b0 / c0;
    let beta = 2.0 / c0;
    Ok((alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * y.ln() - beta / y).exp())
}

/// Distribution function of the same law, `Γ(α, β/y) / Γ(α)`.
pub fn brownian_closed_form_cdf(b0: f64, c0: f64, y: f64) -> Result<f64> {
    check_brownian(b0, c0)?;
    if !(y > 0.0) {
        return Err(Error::Domain(format!("distribution argument must be positive, got {y}")));
    }
    Ok(gamma_ur(2.0 * b0 / c0, 2.0 / (c0 * y)))
}

#[derive(Debug, Clone, Serialize)]
pub struct StationarySolution {
    pub grid: SpaceGrid,
    pub p_inf: Vec<f64>,
    pub f_inf: Vec<f64>,
    /// Sup-norm of the last fixed-point update.
    pub residual_norm: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Sup-norm size of the isotonic projection.
    pub projection: f64,
}

pub const MAX_ITERATIONS: usize = 200;
const DAMPING: f64 = 0.5;

/// Solves `½c₀ F'' + (c₀/2 - a₀ - e^{-z} + m) F_z - λF + ∫ F(z + x) K(dx) = 0`
/// in `z = ln y` by damped fixed-point iteration on the jump integral; each
/// iterate is a tridiagonal two-point boundary value problem.
pub fn solve_stationary(model: &ProcessModel, grid: &SpaceGrid, tol: f64) -> Result<StationarySolution> {
    solve_stationary_with(model, grid, tol, &QuadConfig::default())
}

pub fn solve_stationary_with(
    model: &ProcessModel,
    grid: &SpaceGrid,
    tol: f64,
    quad: &QuadConfig,
) -> Result<StationarySolution> {
    model.check_structure()?;
    if !check_finiteness(model)? {
        return Err(Error::Unsupported(format!(
            "I_∞ is not finite for b₀ = {} ≤ 0",
            model.drift(0.0)
        )));
    }
    if !(model.variance(0.0) > 0.0) {
        return Err(Error::Unsupported("c₀ = 0 makes the stationary problem first order".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let op = CdfOperator::new(model, grid, quad)?;
    let lambda = op.lambda();
    // Start from the equation with the jump gain replaced by λF.
    let mut f = vec![0.0; grid.len()];
    let mut gain = vec![0.0; grid.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    if lambda == 0.0 {
        f = op.solve(&gain)?;
        residual = 0.0;
        iterations = 1;
        history.push(0.0);
    } else {
        let ramp: Vec<f64> = (0..grid.len()).map(|i| i as f64 / (grid.len() - 1) as f64).collect();
        gain = op.gain(&ramp);
        while iterations < MAX_ITERATIONS {
            let next = op.solve(&gain)?;
            residual = next.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            f = next;
            iterations += 1;
            history.push(residual);
            if residual < tol {
                break;
            }
            let fresh = op.gain(&f);
            for (g, n) in gain.iter_mut().zip(&fresh) {
                *g = DAMPING * *n + (1.0 - DAMPING) * *g;
            }
        }
        if residual >= tol {
            return Err(Error::Numerical(format!(
                "stationary iteration did not contract in {MAX_ITERATIONS} steps; residuals {:?}",
                &history[history.len().saturating_sub(10)..]
            )));
        }
    }
    let (f_inf, projection) = isotonic(&f);
    let p_inf = density_from_cdf(grid, &f_inf);
    Ok(StationarySolution {
        grid: grid.clone(),
        p_inf,
        f_inf,
        residual_norm: residual,
        iterations,
        residual_history: history,
        projection,
    })
}

/// Weighted sup-norm `max |𝒜* p(y)| / (1 + y²)` of the stationary density
/// equation over interior nodes, central differences throughout.
pub fn stationary_residual(model: &ProcessModel, grid: &SpaceGrid, p: &[f64]) -> Result<f64> {
    if p.len() != grid.len() {
        return Err(Error::Domain(format!("slice has {} values for {} nodes", p.len(), grid.len())));
    }
    let r = central_rhs(model, p, grid, &QuadConfig::default())?;
    Ok(r
        .iter()
        .zip(grid.y())
        .map(|(v, y)| v.abs() / (1.0 + y * y))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process_model::JumpMeasure;
    use approx::assert_relative_eq;

    #[test]
    fn finiteness_truth_table() {
        assert!(check_finiteness(&ProcessModel::brownian(1.5, 0.3)).unwrap());
        assert!(!check_finiteness(&ProcessModel::brownian(-1.0, 1.0)).unwrap());
        assert!(!check_finiteness(&ProcessModel::brownian(0.0, 1.0)).unwrap());
        let m = ProcessModel::new(crate::process_model::RateProfile::affine(1.0, 1.0), 1.0, JumpMeasure::None);
        assert!(matches!(check_finiteness(&m), Err(Error::Unsupported(_))));
    }

    #[test]
    fn closed_form_value_and_domain() {
        assert_relative_eq!(brownian_closed_form(1.0, 1.0, 1.0).unwrap(), 4.0 * (-2f64).exp(), max_relative = 1e-13);
        assert_relative_eq!(brownian_closed_form_cdf(1.0, 1.0, 1.0).unwrap(), 3.0 * (-2f64).exp(), max_relative = 1e-12);
        assert!(matches!(brownian_closed_form(1.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_slice_has_zero_residual() {
        let g = SpaceGrid::log_spaced(1e-3, 1e3, 101).unwrap();
        assert_eq!(stationary_residual(&ProcessModel::brownian(1.0, 1.0), &g, &vec![0.0; 101]).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs_are_unsupported() {
        let g = SpaceGrid::log_spaced(1e-3, 1e3, 101).unwrap();
        assert!(matches!(solve_stationary(&ProcessModel::brownian(1.0, 0.0), &g, 1e-8), Err(Error::Unsupported(_))));
        assert!(matches!(solve_stationary(&ProcessModel::brownian(-1.0, 1.0), &g, 1e-8), Err(Error::Unsupported(_))));
    }
}
