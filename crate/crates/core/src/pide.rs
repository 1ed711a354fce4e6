//! Forward equations for the density and distribution function of `V_s`.
//!
//! The density equation
//!
//! ```text
//! ∂_s p = ½ c̄ ∂²_y(y² p) - ∂_y((ā y + 1) p) + ∫ [e^x p(y e^x) - p + (e^{-x} - 1) ∂_y(y p)] K̄(dx)
//! ```
//!
//! is discretised for `q = y p` on a grid uniform in `z = ln y`, where it
//! becomes an advection–diffusion equation with velocity
//! `r + e^{-z} - c̄/2`, `r = ā - ∫(e^{-x} - 1) K̄`, plus the shift operator
//! `∫ q(z + x) K̄(dx) - λ q`. Fluxes are central where the cell Péclet
//! number is at most 2 and upwind elsewhere, so the implicit matrix is an
//! M-matrix. The jump operator is applied explicitly in sub-steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{isotonic, solve_tridiagonal, SpaceGrid};
use crate::mc_engine::{estimate_density, simulate_v_pathwise_from, Bandwidth, DensityEstimate, McConfig};
use crate::process_model::{compute_a, Characteristics, JumpMeasure, Side};
use crate::quadrature::{gauss_legendre_nodes, integrate_half_line, QuadConfig};
use crate::reversal::ReversedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BootstrapSource {
    /// Kernel estimate from `V` paths simulated up to `t_bootstrap`.
    McKde {
        n_paths: usize,
        seed: u64,
        dt: f64,
        eps_cutoff: f64,
    },
    /// Density values on the solver grid.
    UserSupplied { p: Vec<f64> },
}

impl Default for BootstrapSource {
    fn default() -> Self {
        BootstrapSource::McKde {
            n_paths: 100_000,
            seed: 0,
            dt: 1e-3,
            eps_cutoff: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PideConfig {
    pub dt_solver: f64,
    pub dt_min: f64,
    pub t_bootstrap: f64,
    pub bootstrap: BootstrapSource,
    /// 1 is fully implicit, ½ is Crank–Nicolson for the local part.
    pub theta: f64,
    pub tol_mass: f64,
    /// Jump sub-steps keep `λ · δ` at or below this value.
    pub max_jump_step: f64,
    pub quad: QuadConfig,
    /// Extra times at which slices are stored; the final time always is.
    #[serde(default)]
    pub record_times: Vec<f64>,
}

impl Default for PideConfig {
    fn default() -> Self {
        Self {
            dt_solver: 0.01,
            dt_min: 1e-6,
            t_bootstrap: 0.05,
            bootstrap: BootstrapSource::default(),
            theta: 1.0,
            tol_mass: 1e-3,
            max_jump_step: 0.5,
            quad: QuadConfig::default(),
            record_times: Vec::new(),
        }
    }
}

impl PideConfig {
    fn check(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.dt_solver > 0.0) || !(self.dt_min > 0.0) || self.dt_min > self.dt_solver {
            return Err(Error::Config("need 0 < dt_min <= dt_solver".into()));
        }
        if !(self.t_bootstrap > 0.0) || self.t_bootstrap >= t {
            return Err(Error::Config(format!(
                "t_bootstrap = {} must lie in (0, t = {t})",
                self.t_bootstrap
            )));
        }
        if !(self.tol_mass > 0.0) || !(self.max_jump_step > 0.0) {
            return Err(Error::Config("tol_mass and max_jump_step must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution `Σ_k w_k v[i + k]` approximating `∫ v(z + x) K(dx)` with
/// linear interpolation, plus `λ = K(ℝ)` and `m = ∫ (e^{-x} - 1) K(dx)`.
#[derive(Debug, Clone)]
struct Stencil {
    taps: Vec<(isize, f64)>,
    lambda: f64,
    m: f64,
}

impl Stencil {
    fn new(k: &JumpMeasure, h: f64, quad: &QuadConfig) -> Self {
        if k.is_none() {
            return Self {
                taps: Vec::new(),
                lambda: 0.0,
                m: 0.0,
            };
        }
        let mut taps: BTreeMap<isize, f64> = BTreeMap::new();
        let (mut lambda, mut m) = (0.0, 0.0);
        for (x, w) in k.quadrature_nodes(quad.eps, quad) {
            lambda += w;
            m += w * (-x).exp_m1();
            let s = x / h;
            let i = s.floor();
            let f = s - i;
            *taps.entry(i as isize).or_default() += w * (1.0 - f);
            *taps.entry(i as isize + 1).or_default() += w * f;
        }
        Self {
            taps: taps.into_iter().filter(|(_, w)| *w != 0.0).collect(),
            lambda,
            m,
        }
    }

    /// `(C v)_i` with `below`/`above` used for indices outside the grid.
    fn convolve(&self, v: &[f64], i: usize, below: f64, above: f64) -> f64 {
        let n = v.len() as isize;
        self.taps
            .iter()
            .map(|&(k, w)| {
                let j = i as isize + k;
                w * if j < 0 {
                    below
                } else if j >= n {
                    above
                } else {
                    v[j as usize]
                }
            })
            .sum()
    }
}

/// Coefficients of the equation at one time.
#[derive(Debug, Clone)]
struct Coefficients {
    a: f64,
    diffusion: f64,
    stencil: Stencil,
}

impl Coefficients {
    fn at<C: Characteristics + ?Sized>(chars: &C, s: f64, grid: &SpaceGrid, quad: &QuadConfig) -> Result<Self> {
        Ok(Self {
            a: compute_a(chars, s, quad)?,
            diffusion: 0.5 * chars.variance(s),
            stencil: Stencil::new(chars.jumps(s), grid.h(), quad),
        })
    }

    /// `r = ā - m`, the drift once jumps act as pure shifts.
    fn r(&self) -> f64 {
        self.a - self.stencil.m
    }
}

/// Face fluxes `Φ_{i+½} = α_i q_i + β_i q_{i+1}` of the local operator.
struct Faces {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    h: f64,
}

impl Faces {
    fn new(grid: &SpaceGrid, co: &Coefficients) -> Self {
        let h = grid.h();
        let d = co.diffusion;
        let r = co.r();
        let z = grid.z();
        let n = grid.len();
        let mut alpha = Vec::with_capacity(n - 1);
        let mut beta = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let zf = 0.5 * (z[i] + z[i + 1]);
            let v = r + (-zf).exp() - d;
            let (wl, wr) = if v.abs() * h <= 2.0 * d {
                (0.5, 0.5)
            } else if v > 0.0 {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            alpha.push(v * wl + d / h);
            beta.push(v * wr - d / h);
        }
        Self { alpha, beta, h }
    }

    fn flux(&self, q: &[f64], i: usize) -> f64 {
        self.alpha[i] * q[i] + self.beta[i] * q[i + 1]
    }

    /// `-(Φ_{i+½} - Φ_{i-½}) / h` at interior nodes, 0 at the ends.
    fn apply(&self, q: &[f64]) -> Vec<f64> {
        let n = q.len();
        let mut out = vec![0.0; n];
        for i in 1..n - 1 {
            out[i] = -(self.flux(q, i) - self.flux(q, i - 1)) / self.h;
        }
        out
    }

    /// Net flux leaving through both ends.
    fn outflow(&self, q: &[f64]) -> f64 {
        let n = q.len();
        self.flux(q, n - 2) - self.flux(q, 0)
    }

    /// Solves `(I - τ A) x = rhs` on interior nodes with zero boundary values.
    fn implicit(&self, tau: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        let m = n - 2;
        let (mut lo, mut di, mut up) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for k in 0..m {
            let i = k + 1;
            lo[k] = -tau * self.alpha[i - 1] / self.h;
            di[k] = 1.0 - tau * (self.beta[i - 1] - self.alpha[i]) / self.h;
            up[k] = tau * self.beta[i] / self.h;
        }
        let x = solve_tridiagonal(&lo, &di, &up, &rhs[1..n - 1])?;
        let mut out = vec![0.0; n];
        out[1..n - 1].copy_from_slice(&x);
        Ok(out)
    }
}

fn jump_part(st: &Stencil, q: &[f64]) -> Vec<f64> {
    let n = q.len();
    let mut out = vec![0.0; n];
    if st.taps.is_empty() {
        return out;
    }
    for i in 1..n - 1 {
        out[i] = st.convolve(q, i, 0.0, 0.0) - st.lambda * q[i];
    }
    out
}

/// Discretised right-hand side `∂_s p` on the grid for the reversed model at
/// time `s`; at `s = t_fix` the left limit of the triplet is used.
pub fn apply_rhs<M: Characteristics>(
    rev: &ReversedModel<M>,
    p: &[f64],
    grid: &SpaceGrid,
    s: f64,
    quad: &QuadConfig,
) -> Result<Vec<f64>> {
    if p.len() != grid.len() {
        return Err(Error::Domain(format!("slice has {} values for {} nodes", p.len(), grid.len())));
    }
    if !(0.0..=rev.t_fix()).contains(&s) {
        return Err(Error::Domain(format!("time {s} outside [0, {}]", rev.t_fix())));
    }
    let co = Coefficients::at(&rev.left_limit(s), 0.0, grid, quad)?;
    Ok(rhs_with(&co, p, grid))
}

fn rhs_with(co: &Coefficients, p: &[f64], grid: &SpaceGrid) -> Vec<f64> {
    let q: Vec<f64> = p.iter().zip(grid.y()).map(|(p, y)| p * y).collect();
    let faces = Faces::new(grid, co);
    let local = faces.apply(&q);
    let jump = jump_part(&co.stencil, &q);
    local
        .iter()
        .zip(&jump)
        .zip(grid.y())
        .map(|((l, j), y)| (l + j) / y)
        .collect()
}

/// Weights `(u, w)` with `Σ w g(u) ≈ ∫_0^∞ g(u) ν(u) du` for one tail.
fn tail_nodes(k: &JumpMeasure, side: Side, quad: &QuadConfig) -> Vec<(f64, f64)> {
    let tail = |u: f64| match side {
        Side::Positive => k.tail_plus(u).unwrap_or(0.0),
        Side::Negative => k.tail_minus(u).unwrap_or(0.0),
    };
    let support = k.upper_support(side);
    if support <= 0.0 {
        return Vec::new();
    }
    let start = tail(quad.eps);
    let mut radius = 1.0;
    while radius < support && radius < quad.max_radius && tail(radius) > 1e-14 * start {
        radius *= 2.0;
    }
    let radius = radius.min(support);
    let mut breaks = vec![quad.eps];
    let mut b = quad.eps;
    while b * 10.0 < radius.min(1.0) {
        b *= 10.0;
        breaks.push(b);
    }
    let mut b = 1.0;
    while b < radius {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.push(radius);
    let s = side.sign();
    breaks.extend(
        k.atoms()
            .into_iter()
            .map(|(x, _)| s * x)
            .filter(|u| *u > quad.eps && *u < radius),
    );
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup();
    let mut nodes = vec![(0.5 * quad.eps, quad.eps * start)];
    for w in breaks.windows(2) {
        for (u, wt) in gauss_legendre_nodes(16, w[0], w[1]) {
            nodes.push((u, wt * tail(u)));
        }
    }
    nodes
}

fn integrable(k: &JumpMeasure, quad: &QuadConfig) -> Result<()> {
    let r = k.integrate(|x| x.abs(), quad);
    if !r.finite {
        return Err(Error::Precondition("the tail form needs ∫|x| K(dx) < ∞".into()));
    }
    Ok(())
}

/// Jump operator in tail form on the grid:
/// `d/dy [∫_y^∞ p(z) ν⁺(ln(z/y)) dz - ∫_0^y p(z) ν⁻(ln(y/z)) dz]`,
/// evaluated as `∫ e^u (yp)'(y e^u) ν⁺(u) du - ∫ e^{-u} (yp)'(y e^{-u}) ν⁻(u) du`.
/// It replaces the direct jump operator when the drift `ā` is replaced by
/// `r₀ = ā - ∫ (e^{-x} - 1) K(dx)`.
pub fn apply_jump_tail_form(k: &JumpMeasure, p: &[f64], grid: &SpaceGrid, quad: &QuadConfig) -> Result<Vec<f64>> {
    if p.len() != grid.len() {
        return Err(Error::Domain(format!("slice has {} values for {} nodes", p.len(), grid.len())));
    }
    let n = grid.len();
    if k.is_none() {
        return Ok(vec![0.0; n]);
    }
    integrable(k, quad)?;
    let y = grid.y();
    let h = grid.h();
    let q: Vec<f64> = p.iter().zip(y).map(|(p, y)| p * y).collect();
    // (yp)' in y from the z-derivative.
    let dq: Vec<f64> = (0..n)
        .map(|i| {
            let dz = if i == 0 {
                (q[1] - q[0]) / h
            } else if i == n - 1 {
                (q[n - 1] - q[n - 2]) / h
            } else {
                (q[i + 1] - q[i - 1]) / (2.0 * h)
            };
            dz / y[i]
        })
        .collect();
    let plus = tail_nodes(k, Side::Positive, quad);
    let minus = tail_nodes(k, Side::Negative, quad);
    Ok((0..n)
        .map(|i| {
            let up: f64 = plus
                .iter()
                .map(|&(u, w)| w * u.exp() * grid.interpolate(&dq, y[i] * u.exp(), 0.0, 0.0))
                .sum();
            let down: f64 = minus
                .iter()
                .map(|&(u, w)| w * (-u).exp() * grid.interpolate(&dq, y[i] * (-u).exp(), 0.0, 0.0))
                .sum();
            up - down
        })
        .collect())
}

/// Analytic density slice with two derivatives, for pointwise operator checks.
pub struct SmoothSlice {
    pub p: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub dp: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d2p: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl SmoothSlice {
    /// Log-normal density: `ln y ~ N(mu, sigma²)`.
    pub fn lognormal(mu: f64, sigma: f64) -> Self {
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let s2 = sigma * sigma;
        let p = move |y: f64| {
            if y <= 0.0 {
                return 0.0;
            }
            let l = y.ln() - mu;
            norm * (-0.5 * l * l / s2).exp() / y
        };
        // p' = -p (1 + l/σ²) / y, p'' = p [(1 + l/σ²)(2 + l/σ²) - 1/σ²] / y².
        let dp = move |y: f64| {
            if y <= 0.0 {
                return 0.0;
            }
            let g = 1.0 + (y.ln() - mu) / s2;
            -p(y) * g / y
        };
        let d2p = move |y: f64| {
            if y <= 0.0 {
                return 0.0;
            }
            let g = 1.0 + (y.ln() - mu) / s2;
            p(y) * (g * (g + 1.0) - 1.0 / s2) / (y * y)
        };
        Self {
            p: Box::new(p),
            dp: Box::new(dp),
            d2p: Box::new(d2p),
        }
    }

    fn local(&self, drift: f64, c: f64, y: f64) -> f64 {
        let (p, dp, d2p) = ((self.p)(y), (self.dp)(y), (self.d2p)(y));
        0.5 * c * (2.0 * p + 4.0 * y * dp + y * y * d2p) - (drift * p + (drift * y + 1.0) * dp)
    }

    /// `(y p)'` at `y`.
    fn dq(&self, y: f64) -> f64 {
        (self.p)(y) + y * (self.dp)(y)
    }
}

fn checked(r: crate::process_model::MeasureIntegral, what: &str) -> Result<f64> {
    if !r.finite || !r.converged {
        return Err(Error::Numerical(format!("{what} did not converge")));
    }
    Ok(r.value)
}

/// Right-hand side of the density equation at `y` with the direct jump
/// operator and drift `ā`, by adaptive quadrature.
pub fn rhs_direct_pointwise<C: Characteristics + ?Sized>(
    chars: &C,
    s: f64,
    slice: &SmoothSlice,
    y: f64,
    quad: &QuadConfig,
) -> Result<f64> {
    let a = compute_a(chars, s, quad)?;
    let k = chars.jumps(s);
    let p = (slice.p)(y);
    let dq = slice.dq(y);
    let jump = if k.is_none() {
        0.0
    } else {
        checked(
            k.integrate(|x| x.exp() * (slice.p)(y * x.exp()) - p + (-x).exp_m1() * dq, quad),
            "direct jump integral",
        )?
    };
    Ok(slice.local(a, chars.variance(s), y) + jump)
}

/// Tail-form jump term `∫ e^u (yp)'(y e^u) ν⁺(u) du - ∫ e^{-u} (yp)'(y e^{-u}) ν⁻(u) du`.
pub fn jump_tail_pointwise(k: &JumpMeasure, slice: &SmoothSlice, y: f64, quad: &QuadConfig) -> Result<f64> {
    if k.is_none() {
        return Ok(0.0);
    }
    integrable(k, quad)?;
    let fine = QuadConfig { eps: 1e-14, ..*quad };
    let up = integrate_half_line(
        &|u: f64| u.exp() * slice.dq(y * u.exp()) * k.tail_plus(u).unwrap_or(0.0),
        4.0,
        &fine,
    );
    let down = integrate_half_line(
        &|u: f64| (-u).exp() * slice.dq(y * (-u).exp()) * k.tail_minus(u).unwrap_or(0.0),
        4.0,
        &fine,
    );
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::Numerical("tail-form integral did not converge".into()));
    }
    Ok(up.value - down.value)
}

/// Exponential-jump specialisation `d/dy [(y^μ/μ) ∫_y^∞ p(z) z^{-μ} dz]`
/// `= y^{μ-1} ∫_y^∞ p(z) z^{-μ} dz - p(y)/μ`.
pub fn exponential_tail_term(mu: f64, p: &dyn Fn(f64) -> f64, y: f64, quad: &QuadConfig) -> Result<f64> {
    // z = y e^u turns the integral into y^{1-μ} ∫_0^∞ p(y e^u) e^{(1-μ)u} du.
    let fine = QuadConfig { eps: 1e-14, ..*quad };
    let r = integrate_half_line(&|u: f64| p(y * u.exp()) * ((1.0 - mu) * u).exp(), 4.0, &fine);
    if !r.is_finite() {
        return Err(Error::Numerical("exponential tail integral did not converge".into()));
    }
    Ok(r.value - p(y) / mu)
}

/// Right-hand side with drift `r₀ = ā - ∫ (e^{-x} - 1) K(dx)` and the tail form.
pub fn rhs_tail_pointwise<C: Characteristics + ?Sized>(
    chars: &C,
    s: f64,
    slice: &SmoothSlice,
    y: f64,
    quad: &QuadConfig,
) -> Result<f64> {
    let k = chars.jumps(s);
    let m = if k.is_none() {
        0.0
    } else {
        checked(k.integrate(|x| (-x).exp_m1(), quad), "∫(e^-x - 1)K")?
    };
    let r0 = compute_a(chars, s, quad)? - m;
    Ok(slice.local(r0, chars.variance(s), y) + jump_tail_pointwise(k, slice, y, quad)?)
}

/// Step rejected by the mass or positivity checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub s: f64,
    pub dt: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassRecord {
    pub s: f64,
    pub mass: f64,
    /// Cumulative mass that left the grid.
    pub leakage: f64,
}

/// Density slices `p_s(y)` with mass accounting.
#[derive(Debug, Clone, Serialize)]
pub struct DensityField {
    pub grid: SpaceGrid,
    pub times: Vec<f64>,
    /// One slice per entry of `times`.
    pub values: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
    pub leakage: Vec<f64>,
    /// Mass of the bootstrap slice on the grid before renormalisation.
    pub bootstrap_mass: f64,
    pub clipped: usize,
    pub rejections: Vec<Rejection>,
    pub trace: Vec<MassRecord>,
    pub warnings: Vec<String>,
    pub method: SolveMethod,
}

/// How a field was computed. Without diffusion and jumps the equation is a
/// pure transport and is solved along characteristics, which keeps point
/// masses sharp instead of smearing them by upwind diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    FiniteVolume,
    Characteristics,
}

/// True when `c̄ = 0` and `K̄ = 0` on `[t_b, t]`, probed at the profile
/// breakpoints and on a fine uniform mesh.
fn pure_transport<C: Characteristics + ?Sized>(chars: &C, t_b: f64, t: f64) -> bool {
    let n = 1000;
    let probes = (0..=n)
        .map(|i| t_b + (t - t_b) * i as f64 / n as f64)
        .chain(chars.breakpoints(t).into_iter().filter(|s| *s >= t_b));
    probes
        .into_iter()
        .all(|s| chars.variance(s) == 0.0 && chars.jumps(s).is_none())
}

fn normalised_cdf(grid: &SpaceGrid, q: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = q.iter().zip(grid.y()).map(|(q, y)| q / y).collect();
    let mut f = grid.cumulative(&p);
    let total = f[f.len() - 1];
    for v in &mut f {
        *v /= total;
    }
    f
}

/// `F_t(y) = F_{t_b}(y₀)` where `y₀` is carried to `y` by `dy/ds = ā_s y + 1`;
/// the characteristic is traced backwards with RK4 in `y`.
fn transport_cdf<C: Characteristics + ?Sized>(chars: &C, grid: &SpaceGrid, f0: &[f64], t_b: f64, t: f64, dt: f64) -> Vec<f64> {
    let steps = (4.0 * (t - t_b) / dt).ceil().max(1.0) as usize;
    let tau = (t - t_b) / steps as f64;
    // c̄ = 0 and no jumps, so ā = -b̄.
    let v = |s: f64, y: f64| -chars.drift(s) * y + 1.0;
    grid.y()
        .iter()
        .map(|&y_end| {
            let mut y = y_end;
            let mut s = t;
            for _ in 0..steps {
                let k1 = v(s, y);
                let k2 = v(s - 0.5 * tau, y - 0.5 * tau * k1);
                let k3 = v(s - 0.5 * tau, y - 0.5 * tau * k2);
                let k4 = v(s - tau, y - tau * k3);
                y -= tau * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
                s -= tau;
                if y <= 0.0 {
                    return 0.0;
                }
            }
            grid.interpolate(f0, y, 0.0, 1.0)
        })
        .collect()
}

/// `p = F_z / y` by central differences, one-sided at the ends.
pub fn density_from_cdf(grid: &SpaceGrid, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let h = grid.h();
    (0..n)
        .map(|i| {
            let d = if i == 0 {
                (f[1] - f[0]) / h
            } else if i == n - 1 {
                (f[n - 1] - f[n - 2]) / h
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            };
            (d / grid.y()[i]).max(0.0)
        })
        .collect()
}

impl DensityField {
    pub fn final_slice(&self) -> &[f64] {
        self.values.last().expect("at least one slice")
    }

    /// Running integral of the final slice.
    pub fn final_cdf(&self) -> Vec<f64> {
        self.grid.cumulative(self.final_slice())
    }

    /// Largest `|mass(s) - mass(t_b)| / (s - t_b)` over the trace.
    pub fn mass_drift_rate(&self) -> f64 {
        let first = self.trace[0];
        self.trace[1..]
            .iter()
            .map(|r| (r.mass - first.mass).abs() / (r.s - first.s))
            .fold(0.0, f64::max)
    }
}

/// Density of `V_{t_b}` on the grid, normalised to unit mass.
fn bootstrap<M: Characteristics>(
    rev: &ReversedModel<M>,
    grid: &SpaceGrid,
    cfg: &PideConfig,
    warnings: &mut Vec<String>,
) -> Result<(Vec<f64>, f64)> {
    let n = grid.len();
    let mut q = match &cfg.bootstrap {
        BootstrapSource::UserSupplied { p } => {
            if p.len() != n {
                return Err(Error::Config(format!("bootstrap slice has {} values for {n} nodes", p.len())));
            }
            if p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("bootstrap slice must be nonnegative".into()));
            }
            p.iter().zip(grid.y()).map(|(p, y)| p * y).collect::<Vec<f64>>()
        }
        BootstrapSource::McKde {
            n_paths,
            seed,
            dt,
            eps_cutoff,
        } => {
            let mc = McConfig {
                dt: *dt,
                eps_cutoff: *eps_cutoff,
                variance_correction: true,
                n_paths: *n_paths,
                seed: *seed,
                record_every: 1,
            };
            let batch = simulate_v_pathwise_from(rev, cfg.t_bootstrap, 0.0, &McConfig {
                record_every: mc.steps_for(cfg.t_bootstrap)?,
                ..mc
            })?;
            warnings.extend(batch.warnings.iter().cloned());
            let samples = batch.terminal();
            match estimate_density(&samples, grid.y(), Bandwidth::Auto)? {
                DensityEstimate::Density { p, .. } => p.iter().zip(grid.y()).map(|(p, y)| p * y).collect(),
                DensityEstimate::Degenerate { at } => {
                    // Point mass split between the two neighbouring nodes.
                    let mut q = vec![0.0; n];
                    let s = ((at.ln() - grid.z()[0]) / grid.h()).clamp(1.0, (n - 2) as f64);
                    let i = (s.floor() as usize).min(n - 3);
                    let f = s - i as f64;
                    q[i] = (1.0 - f) / grid.h();
                    q[i + 1] = f / grid.h();
                    q
                }
            }
        }
    };
    q[0] = 0.0;
    q[n - 1] = 0.0;
    let mass = grid.h() * q.iter().sum::<f64>();
    if !(mass > 0.0) {
        return Err(Error::Numerical("bootstrap density has no mass on the grid".into()));
    }
    let edge = 5.min(n / 2);
    let near = grid.h() * (q[..edge].iter().sum::<f64>() + q[n - edge..].iter().sum::<f64>()) / mass;
    if near > 1e-4 {
        warnings.push(format!(
            "bootstrap puts {near:.2e} of its mass within 5 nodes of the grid boundary"
        ));
    }
    for v in &mut q {
        *v /= mass;
    }
    Ok((q, mass))
}

struct Marcher<'a, C: Characteristics + ?Sized> {
    chars: &'a C,
    grid: &'a SpaceGrid,
    cfg: &'a PideConfig,
    cache: Vec<(f64, f64, JumpMeasure, Coefficients)>,
    levy: Option<Coefficients>,
}

impl<'a, C: Characteristics + ?Sized> Marcher<'a, C> {
    fn new(chars: &'a C, grid: &'a SpaceGrid, cfg: &'a PideConfig) -> Result<Self> {
        let levy = if chars.is_levy() {
            Some(Coefficients::at(chars, 0.0, grid, &cfg.quad)?)
        } else {
            None
        };
        Ok(Self {
            chars,
            grid,
            cfg,
            cache: Vec::new(),
            levy,
        })
    }

    fn coefficients(&mut self, s: f64) -> Result<Coefficients> {
        if let Some(c) = &self.levy {
            return Ok(c.clone());
        }
        let (b, c, k) = (self.chars.drift(s), self.chars.variance(s), self.chars.jumps(s));
        if let Some(hit) = self.cache.iter().find(|e| e.0 == b && e.1 == c && &e.2 == k) {
            return Ok(hit.3.clone());
        }
        let co = Coefficients::at(self.chars, s, self.grid, &self.cfg.quad)?;
        if self.cache.len() > 64 {
            self.cache.remove(0);
        }
        self.cache.push((b, c, k.clone(), co.clone()));
        Ok(co)
    }
}

/// One density step from `s` to `s + dt`; returns the new slice, the mass
/// that left the grid, and the mass clipped from negative values.
fn density_step<C: Characteristics + ?Sized>(
    m: &mut Marcher<'_, C>,
    q: &[f64],
    s: f64,
    dt: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    let co = m.coefficients(s + 0.5 * dt)?;
    let h = m.grid.h();
    let n = q.len();
    let mut cur = q.to_vec();
    let mut leak = 0.0;
    let lam = co.stencil.lambda;
    if lam > 0.0 {
        let subs = ((lam * dt) / m.cfg.max_jump_step).ceil().max(1.0) as usize;
        let delta = dt / subs as f64;
        for _ in 0..subs {
            let j = jump_part(&co.stencil, &cur);
            let before: f64 = cur.iter().sum();
            for i in 1..n - 1 {
                cur[i] += delta * j[i];
            }
            leak += h * (before - cur.iter().sum::<f64>());
        }
    }
    let faces = Faces::new(m.grid, &co);
    let theta = m.cfg.theta;
    let mut rhs = cur.clone();
    if theta < 1.0 {
        let a = faces.apply(&cur);
        for i in 0..n {
            rhs[i] += (1.0 - theta) * dt * a[i];
        }
        leak += (1.0 - theta) * dt * faces.outflow(&cur);
    }
    let mut next = faces.implicit(theta * dt, &rhs)?;
    leak += theta * dt * faces.outflow(&next);
    let mut clipped = 0.0;
    for v in &mut next {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite density at s = {s}")));
        }
        if *v < 0.0 {
            clipped -= *v * h;
            *v = 0.0;
        }
    }
    Ok((next, leak, clipped))
}

/// Sorted record times strictly inside `(t_b, t)`, then `t`.
fn stops(cfg: &PideConfig, t: f64) -> Vec<f64> {
    let mut v: Vec<f64> = cfg
        .record_times
        .iter()
        .copied()
        .filter(|s| *s > cfg.t_bootstrap && *s < t)
        .collect();
    v.push(t);
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

fn degenerate_with_jumps<M: Characteristics>(rev: &ReversedModel<M>, from: f64, to: f64) -> bool {
    (0..=64).any(|i| {
        let s = from + (to - from) * i as f64 / 64.0;
        rev.variance(s) == 0.0 && !rev.jumps(s).is_none()
    })
}

/// Marches the density of `V_s` from the bootstrap time to `t ≤ t_fix`.
/// For Lévy models the final slice is the density of `I_t`; otherwise this
/// holds at `t = t_fix`, where `V_t` and `V_{t-}` share the same law.
pub fn solve_density<M: Characteristics>(
    rev: &ReversedModel<M>,
    t: f64,
    grid: &SpaceGrid,
    cfg: &PideConfig,
) -> Result<DensityField> {
    if !(t > 0.0) || t > rev.t_fix() * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("t = {t} must lie in (0, {}]", rev.t_fix())));
    }
    cfg.check(t)?;
    let mut warnings = Vec::new();
    let (mut q, bootstrap_mass) = bootstrap(rev, grid, cfg, &mut warnings)?;
    if degenerate_with_jumps(rev, cfg.t_bootstrap, t) {
        warnings.push("c = 0 with jumps: the density need not be smooth, output is heuristic".into());
    }
    let h = grid.h();
    let mut marcher = Marcher::new(rev, grid, cfg)?;
    let to_p = |q: &[f64]| q.iter().zip(grid.y()).map(|(q, y)| q / y).collect::<Vec<f64>>();
    let mass_of = |q: &[f64]| h * q.iter().sum::<f64>();
    let mut field = DensityField {
        grid: grid.clone(),
        times: vec![cfg.t_bootstrap],
        values: vec![to_p(&q)],
        mass: vec![mass_of(&q)],
        leakage: vec![0.0],
        bootstrap_mass,
        clipped: 0,
        rejections: Vec::new(),
        trace: vec![MassRecord {
            s: cfg.t_bootstrap,
            mass: mass_of(&q),
            leakage: 0.0,
        }],
        warnings,
        method: SolveMethod::FiniteVolume,
    };
    if pure_transport(rev, cfg.t_bootstrap, t) {
        let f0 = normalised_cdf(grid, &q);
        field.method = SolveMethod::Characteristics;
        for stop in stops(cfg, t) {
            let f = transport_cdf(rev, grid, &f0, cfg.t_bootstrap, stop, cfg.dt_solver);
            let p = density_from_cdf(grid, &f);
            let mass = grid.mass(&p);
            field.times.push(stop);
            field.values.push(p);
            field.mass.push(mass);
            field.leakage.push(1.0 - (f[grid.len() - 1] - f[0]));
            field.trace.push(MassRecord {
                s: stop,
                mass,
                leakage: 1.0 - (f[grid.len() - 1] - f[0]),
            });
        }
        return Ok(field);
    }
    let initial = mass_of(&q);
    let mut leakage = 0.0;
    let mut s = cfg.t_bootstrap;
    for stop in stops(cfg, t) {
        let n = ((stop - s) / cfg.dt_solver - 1e-9).ceil().max(1.0) as usize;
        let dt = (stop - s) / n as f64;
        for k in 0..n {
            let s0 = s + k as f64 * (stop - s) / n as f64;
            advance(&mut marcher, &mut q, s0, dt, initial, &mut leakage, &mut field)?;
        }
        s = stop;
        field.times.push(stop);
        field.values.push(to_p(&q));
        field.mass.push(mass_of(&q));
        field.leakage.push(leakage);
    }
    Ok(field)
}

fn advance<C: Characteristics + ?Sized>(
    m: &mut Marcher<'_, C>,
    q: &mut Vec<f64>,
    s: f64,
    dt: f64,
    initial: f64,
    leakage: &mut f64,
    field: &mut DensityField,
) -> Result<()> {
    let h = m.grid.h();
    let tol = m.cfg.tol_mass;
    let outcome = density_step(m, q, s, dt);
    let reason = match &outcome {
        Err(e) if e.is_numerical() => Some(e.to_string()),
        Err(_) => None,
        Ok((next, leak, clipped)) => {
            let mass = h * next.iter().sum::<f64>();
            let balance = mass + *leakage + leak - initial;
            if *clipped > 1e-3 * tol {
                Some(format!("clipped negative mass {clipped:.3e}"))
            } else if balance.abs() > tol {
                Some(format!("mass balance off by {balance:.3e}"))
            } else {
                None
            }
        }
    };
    match (outcome, reason) {
        (Ok((next, leak, clipped)), None) => {
            if clipped > 0.0 {
                field.clipped += 1;
            }
            *q = next;
            *leakage += leak;
            field.trace.push(MassRecord {
                s: s + dt,
                mass: h * q.iter().sum::<f64>(),
                leakage: *leakage,
            });
            Ok(())
        }
        (Err(e), None) => Err(e),
        (_, Some(reason)) => {
            field.rejections.push(Rejection {
                s,
                dt,
                reason: reason.clone(),
            });
            let half = 0.5 * dt;
            if half < m.cfg.dt_min {
                return Err(Error::Numerical(format!(
                    "step at s = {s} rejected below dt_min ({reason}); {} rejections",
                    field.rejections.len()
                )));
            }
            advance(m, q, s, half, initial, leakage, field)?;
            advance(m, q, s + half, half, initial, leakage, field)
        }
    }
}

/// Distribution function slices `F_s(y)`.
#[derive(Debug, Clone, Serialize)]
pub struct CdfField {
    pub grid: SpaceGrid,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Sup-norm size of the isotonic projection applied to each slice.
    pub projection: Vec<f64>,
    pub warnings: Vec<String>,
}

impl CdfField {
    pub fn final_slice(&self) -> &[f64] {
        self.values.last().expect("at least one slice")
    }
}

/// Node coefficients `(lower, diag, upper)` of `D F'' + w F'` for the CDF.
fn cdf_rows(grid: &SpaceGrid, co: &Coefficients) -> Vec<(f64, f64, f64)> {
    let h = grid.h();
    let d = co.diffusion;
    let r = co.r();
    grid.z()
        .iter()
        .map(|z| {
            let w = -(r + (-z).exp() - d);
            let (cl, cd, cu) = if w.abs() * h <= 2.0 * d {
                (-0.5 / h, 0.0, 0.5 / h)
            } else if w > 0.0 {
                (0.0, -1.0 / h, 1.0 / h)
            } else {
                (-1.0 / h, 1.0 / h, 0.0)
            };
            (d / (h * h) + w * cl, -2.0 * d / (h * h) + w * cd, d / (h * h) + w * cu)
        })
        .collect()
}

fn apply_rows(rows: &[(f64, f64, f64)], f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let (l, d, u) = rows[i];
        out[i] = l * f[i - 1] + d * f[i] + u * f[i + 1];
    }
    out
}

/// `(I - τ B) x = rhs` with `x_0 = 0`, `x_{n-1} = 1`.
fn cdf_implicit(rows: &[(f64, f64, f64)], tau: f64, rhs: &[f64], extra_diag: f64) -> Result<Vec<f64>> {
    let n = rhs.len();
    let m = n - 2;
    let (mut lo, mut di, mut up, mut b) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for k in 0..m {
        let (l, d, u) = rows[k + 1];
        lo[k] = -tau * l;
        di[k] = 1.0 - tau * d + extra_diag;
        up[k] = -tau * u;
        b[k] = rhs[k + 1];
    }
    b[m - 1] += tau * rows[n - 2].2;
    let x = solve_tridiagonal(&lo, &di, &up, &b)?;
    let mut out = vec![0.0; n];
    out[1..n - 1].copy_from_slice(&x);
    out[n - 1] = 1.0;
    Ok(out)
}

fn cdf_jump(st: &Stencil, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if st.taps.is_empty() {
        return out;
    }
    for i in 1..n - 1 {
        out[i] = st.convolve(f, i, 0.0, 1.0) - st.lambda * f[i];
    }
    out
}

/// Marches `F_s` with `F(y_min) = 0`, `F(y_max) = 1` from the bootstrap
/// distribution function to `t`. Slices are projected onto nondecreasing
/// functions; projections above `10⁻³` are reported as warnings.
pub fn solve_cdf<M: Characteristics>(rev: &ReversedModel<M>, t: f64, grid: &SpaceGrid, cfg: &PideConfig) -> Result<CdfField> {
    if !(t > 0.0) || t > rev.t_fix() * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("t = {t} must lie in (0, {}]", rev.t_fix())));
    }
    cfg.check(t)?;
    let mut warnings = Vec::new();
    let (q, _) = bootstrap(rev, grid, cfg, &mut warnings)?;
    let n = grid.len();
    let p: Vec<f64> = q.iter().zip(grid.y()).map(|(q, y)| q / y).collect();
    let mut f = grid.cumulative(&p);
    let total = f[n - 1];
    for v in &mut f {
        *v /= total;
    }
    if pure_transport(rev, cfg.t_bootstrap, t) {
        let mut out = CdfField {
            grid: grid.clone(),
            times: vec![cfg.t_bootstrap],
            values: vec![f.clone()],
            projection: vec![0.0],
            warnings,
        };
        for stop in stops(cfg, t) {
            let g = transport_cdf(rev, grid, &f, cfg.t_bootstrap, stop, cfg.dt_solver);
            out.times.push(stop);
            out.values.push(g);
            out.projection.push(0.0);
        }
        return Ok(out);
    }
    let mut marcher = Marcher::new(rev, grid, cfg)?;
    let mut out = CdfField {
        grid: grid.clone(),
        times: vec![cfg.t_bootstrap],
        values: vec![f.clone()],
        projection: vec![0.0],
        warnings,
    };
    let theta = cfg.theta;
    let mut s = cfg.t_bootstrap;
    for stop in stops(cfg, t) {
        let steps = ((stop - s) / cfg.dt_solver - 1e-9).ceil().max(1.0) as usize;
        let dt = (stop - s) / steps as f64;
        for k in 0..steps {
            let s0 = s + k as f64 * dt;
            let co = marcher.coefficients(s0 + 0.5 * dt)?;
            let lam = co.stencil.lambda;
            if lam > 0.0 {
                let subs = ((lam * dt) / cfg.max_jump_step).ceil().max(1.0) as usize;
                let delta = dt / subs as f64;
                for _ in 0..subs {
                    let j = cdf_jump(&co.stencil, &f);
                    for i in 1..n - 1 {
                        f[i] += delta * j[i];
                    }
                }
            }
            let rows = cdf_rows(grid, &co);
            let mut rhs = f.clone();
            if theta < 1.0 {
                let b = apply_rows(&rows, &f);
                for i in 0..n {
                    rhs[i] += (1.0 - theta) * dt * b[i];
                }
            }
            f = cdf_implicit(&rows, theta * dt, &rhs, 0.0)?;
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite distribution function at s = {s0}")));
            }
        }
        s = stop;
        let (proj, dist) = isotonic(&f);
        if dist > 1e-3 {
            out.warnings.push(format!("isotonic projection of size {dist:.2e} at s = {stop}"));
        }
        out.times.push(stop);
        out.values.push(proj);
        out.projection.push(dist);
    }
    Ok(out)
}

/// Pieces shared with the stationary solver.
pub(crate) mod shared {
    use super::*;

    pub(crate) struct CdfOperator {
        pub rows: Vec<(f64, f64, f64)>,
        stencil: Stencil,
    }

    impl CdfOperator {
        pub fn new<C: Characteristics + ?Sized>(chars: &C, grid: &SpaceGrid, quad: &QuadConfig) -> Result<Self> {
            let co = Coefficients::at(chars, 0.0, grid, quad)?;
            Ok(Self {
                rows: cdf_rows(grid, &co),
                stencil: co.stencil,
            })
        }

        pub fn lambda(&self) -> f64 {
            self.stencil.lambda
        }

        /// `∫ F(z + x) K(dx)` at every node, `F = 0` below and `1` above the grid.
        pub fn gain(&self, f: &[f64]) -> Vec<f64> {
            let n = f.len();
            let mut out = vec![0.0; n];
            if self.stencil.taps.is_empty() {
                return out;
            }
            for (i, o) in out.iter_mut().enumerate().take(n - 1).skip(1) {
                *o = self.stencil.convolve(f, i, 0.0, 1.0);
            }
            out
        }

        /// Solves `B F - λ F = -g` with the Dirichlet data.
        pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
            let n = g.len();
            let rows: Vec<(f64, f64, f64)> = self
                .rows
                .iter()
                .map(|&(l, d, u)| (l, d - self.stencil.lambda, u))
                .collect();
            // (I - τ B') F = rhs with τ → ∞ is B' F = -g; scale by τ = 1 and drop I.
            let rhs: Vec<f64> = g.to_vec();
            cdf_implicit(&rows, 1.0, &rhs, -1.0).map(|mut f| {
                f[0] = 0.0;
                f[n - 1] = 1.0;
                f
            })
        }
    }

    /// Density-form residual operator with central fluxes, applied to `p`.
    pub fn central_rhs<C: Characteristics + ?Sized>(chars: &C, p: &[f64], grid: &SpaceGrid, quad: &QuadConfig) -> Result<Vec<f64>> {
        let co = Coefficients::at(chars, 0.0, grid, quad)?;
        let q: Vec<f64> = p.iter().zip(grid.y()).map(|(p, y)| p * y).collect();
        let h = grid.h();
        let z = grid.z();
        let n = q.len();
        let d = co.diffusion;
        let r = co.r();
        let flux = |i: usize| {
            let zf = 0.5 * (z[i] + z[i + 1]);
            let v = r + (-zf).exp() - d;
            v * 0.5 * (q[i] + q[i + 1]) - d * (q[i + 1] - q[i]) / h
        };
        let jump = jump_part(&co.stencil, &q);
        let mut out = vec![0.0; n];
        for i in 1..n - 1 {
            out[i] = (-(flux(i) - flux(i - 1)) / h + jump[i]) / grid.y()[i];
        }
        Ok(out)
    }
}

impl McConfig {
    /// Step count reaching `horizon` with this configuration's `dt`.
    pub fn steps_for(&self, horizon: f64) -> Result<usize> {
        let n = (horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Config(format!("dt = {} does not divide {horizon}", self.dt)));
        }
        Ok(n as usize)
    }
}
