//! Gauss–Legendre panels, adaptive bisection and half-line integration with
//! a Cauchy-style divergence test.

use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

/// Settings shared by every quadrature over a Lévy measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Inner cutoff: `[-eps, eps]` is excluded from jump integrals.
    pub eps: f64,
    /// Relative increment below which radius growth stops.
    pub rel_tol: f64,
    /// Largest truncation radius tried before giving up.
    pub max_radius: f64,
    /// Relative growth per doubling that counts towards divergence.
    pub divergence_rel: f64,
    /// Consecutive growing doublings that declare divergence.
    pub divergence_run: u32,
    pub max_depth: u32,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            rel_tol: 1e-10,
            max_radius: 1024.0,
            divergence_rel: 1e-3,
            divergence_run: 3,
            max_depth: 30,
        }
    }
}

fn rule(n: usize) -> &'static [(f64, f64)] {
    static R15: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    static R16: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let build = |n: usize| {
        GaussLegendre::new(n)
            .expect("degree >= 2")
            .into_node_weight_pairs()
    };
    match n {
        15 => R15.get_or_init(|| build(15)),
        16 => R16.get_or_init(|| build(16)),
        _ => panic!("unsupported rule size {n}"),
    }
}

/// Nodes and weights of an `n`-point Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_nodes(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let pairs = match n {
        15 | 16 => rule(n).to_vec(),
        _ => GaussLegendre::new(n.max(2))
            .expect("degree >= 2")
            .into_node_weight_pairs(),
    };
    pairs
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .collect()
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    half * rule(15)
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    /// False when the bisection depth limit was hit somewhere.
    pub converged: bool,
}

/// Adaptive bisection with a 15-point rule on each panel.
///
/// A panel is accepted when its refinement changes by less than its share
/// (by width) of `rel_tol` times the whole-interval estimate, or by less
/// than rounding noise. At most `max_depth` levels and a fixed panel budget
/// are used; hitting either limit clears `converged`.
pub fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64, max_depth: u32) -> Estimate {
    let whole = panel(f, a, b);
    let mut out = Estimate {
        value: 0.0,
        error: 0.0,
        converged: true,
    };
    let mut state = Bisection {
        tol_per_width: rel_tol * whole.abs() / (b - a).abs().max(f64::MIN_POSITIVE),
        budget: PANEL_BUDGET,
    };
    recurse(f, a, b, whole, &mut state, max_depth, &mut out);
    out
}

const PANEL_BUDGET: usize = 50_000;

struct Bisection {
    tol_per_width: f64,
    budget: usize,
}

fn abs_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    half.abs() * rule(15).iter().map(|&(x, w)| w * f(mid + half * x).abs()).sum::<f64>()
}

fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, st: &mut Bisection, depth: u32, out: &mut Estimate) {
    let m = 0.5 * (a + b);
    let left = panel(f, a, m);
    let right = panel(f, m, b);
    let refined = left + right;
    let diff = (refined - whole).abs();
    let tol = (st.tol_per_width * (b - a).abs()).max(1e-300);
    if diff <= tol || !diff.is_finite() || diff <= 1e-14 * abs_panel(f, a, b) {
        out.value += refined;
        out.error += diff;
        return;
    }
    if depth == 0 || st.budget == 0 {
        out.value += refined;
        out.error += diff;
        out.converged = false;
        return;
    }
    st.budget -= 1;
    recurse(f, a, m, left, st, depth - 1, out);
    recurse(f, m, b, right, st, depth - 1, out);
}

/// Result of integrating over `[eps, ∞)` by radius doubling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailIntegral {
    pub value: f64,
    /// Final truncation radius.
    pub radius: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl TailIntegral {
    pub fn is_finite(&self) -> bool {
        !self.diverged && self.value.is_finite()
    }
}

/// Integrates `f` over `[cfg.eps, ∞)`.
///
/// `[eps, 1]` is covered by decade panels. Beyond `bulk` (at least 1) the
/// radius doubles until the relative increment falls below `cfg.rel_tol`.
/// Divergence is declared after `cfg.divergence_run` consecutive doublings
/// that each grow the partial integral by more than `cfg.divergence_rel`.
pub fn integrate_half_line<F: Fn(f64) -> f64>(f: &F, bulk: f64, cfg: &QuadConfig) -> TailIntegral {
    let mut total = 0.0;
    let mut lo = cfg.eps;
    while lo < 1.0 {
        let hi = (lo * 10.0).min(1.0);
        total += adaptive(f, lo, hi, cfg.rel_tol, cfg.max_depth).value;
        lo = hi;
    }
    let bulk = bulk.max(1.0).min(cfg.max_radius);
    let mut radius = 1.0;
    while radius < bulk {
        let next = (radius * 2.0).min(bulk);
        total += adaptive(f, radius, next, cfg.rel_tol, cfg.max_depth).value;
        radius = next;
    }
    let mut growth_run = 0;
    loop {
        if radius >= cfg.max_radius {
            return TailIntegral {
                value: total,
                radius,
                converged: false,
                diverged: false,
            };
        }
        let next = radius * 2.0;
        let inc = adaptive(f, radius, next, cfg.rel_tol, cfg.max_depth).value;
        let before = total;
        total += inc;
        radius = next;
        if !total.is_finite() {
            return TailIntegral {
                value: f64::INFINITY,
                radius,
                converged: false,
                diverged: true,
            };
        }
        if inc.abs() <= cfg.rel_tol * total.abs() || (inc == 0.0 && total == 0.0) {
            return TailIntegral {
                value: total,
                radius,
                converged: true,
                diverged: false,
            };
        }
        if inc.abs() > cfg.divergence_rel * before.abs() {
            growth_run += 1;
            if growth_run >= cfg.divergence_run {
                return TailIntegral {
                    value: f64::INFINITY,
                    radius,
                    converged: false,
                    diverged: true,
                };
            }
        } else {
            growth_run = 0;
        }
    }
}

/// `e^{-x} - 1 + x` without cancellation near zero.
pub fn exp_compensator(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        x2 * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0)
    } else {
        (-x).exp_m1() + x
    }
}
