//! Characteristic triplets `(b, c, K)` of processes with independent
//! increments, the integrability checks they must pass, and the derived
//! coefficient `a_s = -b_s + c_s/2 + ∫(e^{-x} - 1 + x) K_s(dx)`.
//!
//! The drift is untruncated: jumps are compensated by `x K(dx)` over the
//! whole real line, so `E X_t = ∫_0^t b_s ds`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::{adaptive, exp_compensator, gauss_legendre_nodes, integrate_half_line, QuadConfig};

/// Jump-size law of a compound Poisson measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JumpDistribution {
    Dirac { at: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl JumpDistribution {
    fn validate(&self) -> Result<()> {
        match *self {
            JumpDistribution::Dirac { at } if at == 0.0 || !at.is_finite() => {
                Err(Error::InvalidModel(format!("dirac jump at {at} must be finite and nonzero")))
            }
            JumpDistribution::Normal { mean, sd } if !(sd > 0.0) || !mean.is_finite() => {
                Err(Error::InvalidModel(format!("normal jumps need sd > 0, got {sd}")))
            }
            JumpDistribution::Uniform { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(Error::InvalidModel(format!("uniform jumps need lo < hi, got [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }

    fn pdf(&self, x: f64) -> f64 {
        match *self {
            JumpDistribution::Dirac { .. } => 0.0,
            JumpDistribution::Normal { mean, sd } => {
                let u = (x - mean) / sd;
                (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            JumpDistribution::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    /// P(J >= x).
    fn upper_tail(&self, x: f64) -> f64 {
        match *self {
            JumpDistribution::Dirac { at } => f64::from(at >= x),
            JumpDistribution::Normal { mean, sd } => 0.5 * erfc((x - mean) / (sd * std::f64::consts::SQRT_2)),
            JumpDistribution::Uniform { lo, hi } => ((hi - x) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    /// P(J <= x).
    fn lower_tail(&self, x: f64) -> f64 {
        match *self {
            JumpDistribution::Dirac { at } => f64::from(at <= x),
            JumpDistribution::Normal { mean, sd } => 0.5 * erfc((mean - x) / (sd * std::f64::consts::SQRT_2)),
            JumpDistribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpDistribution::Dirac { at } => at,
            JumpDistribution::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            JumpDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TabulatedRepr {
    x: Vec<f64>,
    density: Vec<f64>,
}

/// Piecewise-linear Lévy density through `(x_i, k_i)`.
///
/// Nodes of each sign are interpolated separately; the density is zero
/// outside the outermost node of each sign and never bridges 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabulatedRepr", into = "TabulatedRepr")]
pub struct TabulatedMeasure {
    x: Vec<f64>,
    density: Vec<f64>,
}

impl TryFrom<TabulatedRepr> for TabulatedMeasure {
    type Error = Error;
    fn try_from(r: TabulatedRepr) -> Result<Self> {
        TabulatedMeasure::new(r.x, r.density)
    }
}

impl From<TabulatedMeasure> for TabulatedRepr {
    fn from(t: TabulatedMeasure) -> Self {
        TabulatedRepr {
            x: t.x,
            density: t.density,
        }
    }
}

impl TabulatedMeasure {
    pub fn new(x: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if x.len() != density.len() {
            return Err(Error::InvalidModel(format!(
                "tabulated measure has {} nodes but {} density values",
                x.len(),
                density.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::InvalidModel("tabulated measure has no nodes".into()));
        }
        if x.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::InvalidModel("tabulated nodes must be finite and exclude 0".into()));
        }
        if x.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidModel("tabulated nodes must be strictly increasing".into()));
        }
        if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidModel("tabulated density values must be finite and nonnegative".into()));
        }
        Ok(Self { x, density })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.density
    }

    /// Segments `(x0, k0, x1, k1)` that do not cross zero.
    fn segments(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .filter(|(x, _)| x[0] * x[1] > 0.0)
            .map(|(x, k)| (x[0], k[0], x[1], k[1]))
    }

    fn pdf(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let i = self.x.partition_point(|&v| v <= x);
        if i == 0 || i == self.x.len() {
            // Exactly on the last node.
            if i == self.x.len() && self.x[i - 1] == x {
                return self.density[i - 1];
            }
            return 0.0;
        }
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        if x0 * x1 < 0.0 {
            return 0.0;
        }
        let w = (x - x0) / (x1 - x0);
        self.density[i - 1] * (1.0 - w) + self.density[i] * w
    }

    /// Mass of the linear piece on `[max(x0, lo), min(x1, hi)]`.
    fn segment_mass(seg: (f64, f64, f64, f64), lo: f64, hi: f64) -> f64 {
        let (x0, k0, x1, k1) = seg;
        let a = lo.max(x0);
        let b = hi.min(x1);
        if b <= a {
            return 0.0;
        }
        let at = |x: f64| k0 + (k1 - k0) * (x - x0) / (x1 - x0);
        0.5 * (at(a) + at(b)) * (b - a)
    }

    fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.segments().map(|s| Self::segment_mass(s, lo, hi)).sum()
    }

    fn sample_beyond<R: Rng + ?Sized>(&self, rng: &mut R, cutoff: f64) -> f64 {
        let pieces: Vec<((f64, f64, f64, f64), f64)> = self
            .segments()
            .map(|s| {
                let m = Self::segment_mass(s, f64::NEG_INFINITY, -cutoff) + Self::segment_mass(s, cutoff, f64::INFINITY);
                (s, m)
            })
            .collect();
        let total: f64 = pieces.iter().map(|p| p.1).sum();
        loop {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = pieces[pieces.len() - 1].0;
            for (s, m) in &pieces {
                if u < *m {
                    chosen = *s;
                    break;
                }
                u -= m;
            }
            let (x0, k0, x1, k1) = chosen;
            // Inverse CDF of a linear density on [x0, x1].
            let v = rng.random::<f64>();
            let w = if (k1 - k0).abs() < 1e-14 * (k0 + k1) {
                v
            } else {
                let a = k1 - k0;
                ((k0 * k0 + v * (k1 * k1 - k0 * k0)).sqrt() - k0) / a
            };
            let x = x0 + w * (x1 - x0);
            if x.abs() > cutoff {
                return x;
            }
        }
    }
}

/// Lévy measure `K(dx)` of a process with independent increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpMeasure {
    None,
    /// Density `e^{-μx}` on `x > 0`.
    ExponentialPositive { mu: f64 },
    /// Density `w₊e^{-μ₊x}` on `x > 0` and `(1-w₊)e^{-μ₋|x|}` on `x < 0`.
    DoubleExponential { mu_plus: f64, mu_minus: f64, w_plus: f64 },
    CompoundPoisson { intensity: f64, distribution: JumpDistribution },
    Tabulated(TabulatedMeasure),
}

/// Sign of the jumps a half-line integral runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Positive => 1.0,
            Side::Negative => -1.0,
        }
    }
}

/// Value of `∫ g dK` together with a finiteness verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureIntegral {
    pub value: f64,
    pub finite: bool,
    pub converged: bool,
}

impl JumpMeasure {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            JumpMeasure::None | JumpMeasure::Tabulated(_) => Ok(()),
            JumpMeasure::ExponentialPositive { mu } => positive("mu", *mu),
            JumpMeasure::DoubleExponential {
                mu_plus,
                mu_minus,
                w_plus,
            } => {
                positive("mu_plus", *mu_plus)?;
                positive("mu_minus", *mu_minus)?;
                if (0.0..=1.0).contains(w_plus) {
                    Ok(())
                } else {
                    Err(Error::InvalidModel(format!("w_plus must lie in [0, 1], got {w_plus}")))
                }
            }
            JumpMeasure::CompoundPoisson {
                intensity,
                distribution,
            } => {
                positive("intensity", *intensity)?;
                distribution.validate()
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, JumpMeasure::None)
    }

    /// Point masses `(location, weight)`.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            JumpMeasure::CompoundPoisson {
                intensity,
                distribution: JumpDistribution::Dirac { at },
            } => vec![(*at, *intensity)],
            _ => Vec::new(),
        }
    }

    /// Density of the absolutely continuous part at `x`.
    pub fn density(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        match self {
            JumpMeasure::None => 0.0,
            JumpMeasure::ExponentialPositive { mu } => {
                if x > 0.0 {
                    (-mu * x).exp()
                } else {
                    0.0
                }
            }
            JumpMeasure::DoubleExponential {
                mu_plus,
                mu_minus,
                w_plus,
            } => {
                if x > 0.0 {
                    w_plus * (-mu_plus * x).exp()
                } else {
                    (1.0 - w_plus) * (mu_minus * x).exp()
                }
            }
            JumpMeasure::CompoundPoisson {
                intensity,
                distribution,
            } => intensity * distribution.pdf(x),
            JumpMeasure::Tabulated(t) => t.pdf(x),
        }
    }

    /// Scale below which a half-line integral must not stop early.
    fn bulk_radius(&self, side: Side) -> f64 {
        let s = side.sign();
        match self {
            JumpMeasure::CompoundPoisson { distribution, .. } => match *distribution {
                JumpDistribution::Dirac { at } => (s * at).max(0.0) + 1.0,
                JumpDistribution::Normal { mean, sd } => (s * mean).max(0.0) + 10.0 * sd,
                JumpDistribution::Uniform { lo, hi } => (s * lo).max(s * hi).max(0.0),
            },
            JumpMeasure::Tabulated(t) => t.x.iter().map(|v| s * v).fold(0.0, f64::max),
            // Twenty decay lengths, so the Cauchy test only sees the far tail.
            JumpMeasure::ExponentialPositive { mu } => 20.0 / mu,
            JumpMeasure::DoubleExponential {
                mu_plus, mu_minus, ..
            } => match side {
                Side::Positive => 20.0 / mu_plus,
                Side::Negative => 20.0 / mu_minus,
            },
            JumpMeasure::None => 1.0,
        }
    }

    fn has_side(&self, side: Side) -> bool {
        self.upper_support(side) > 0.0
    }

    /// Largest `|x|` on `side` carrying mass: 0 if none, ∞ if unbounded.
    pub fn upper_support(&self, side: Side) -> f64 {
        let s = side.sign();
        match self {
            JumpMeasure::None => 0.0,
            JumpMeasure::ExponentialPositive { .. } => match side {
                Side::Positive => f64::INFINITY,
                Side::Negative => 0.0,
            },
            JumpMeasure::DoubleExponential { w_plus, .. } => {
                let w = match side {
                    Side::Positive => *w_plus,
                    Side::Negative => 1.0 - w_plus,
                };
                if w > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            JumpMeasure::CompoundPoisson { distribution, .. } => match *distribution {
                JumpDistribution::Dirac { at } => (s * at).max(0.0),
                JumpDistribution::Normal { .. } => f64::INFINITY,
                JumpDistribution::Uniform { lo, hi } => (s * lo).max(s * hi).max(0.0),
            },
            JumpMeasure::Tabulated(t) => {
                let mut best: f64 = 0.0;
                for (x0, k0, x1, k1) in t.segments() {
                    if x0 * s > 0.0 && (k0 > 0.0 || k1 > 0.0) {
                        best = best.max((s * x0).max(s * x1));
                    }
                }
                best
            }
        }
    }

    /// Finite upper end of the positive jump support, `None` when unbounded.
    pub fn positive_support_bound(&self) -> Option<f64> {
        let u = self.upper_support(Side::Positive);
        u.is_finite().then_some(u)
    }

    /// `∫_{|x| > cutoff} g(x) K(dx)`, radius growth and divergence per `cfg`.
    pub fn integrate_beyond<G: Fn(f64) -> f64>(&self, g: G, cutoff: f64, cfg: &QuadConfig) -> MeasureIntegral {
        let mut out = MeasureIntegral {
            value: 0.0,
            finite: true,
            converged: true,
        };
        for (at, w) in self.atoms() {
            if at.abs() > cutoff {
                out.value += w * g(at);
            }
        }
        if !self.atoms().is_empty() {
            return out;
        }
        let local = QuadConfig { eps: cutoff, ..*cfg };
        for side in [Side::Positive, Side::Negative] {
            if !self.has_side(side) {
                continue;
            }
            let s = side.sign();
            let f = |x: f64| {
                let k = self.density(s * x);
                if k == 0.0 {
                    0.0
                } else {
                    g(s * x) * k
                }
            };
            let r = integrate_half_line(&f, self.bulk_radius(side), &local);
            out.value += r.value;
            out.finite &= r.is_finite();
            out.converged &= r.converged;
        }
        out
    }

    /// `∫ g dK` over `|x| > cfg.eps`.
    pub fn integrate<G: Fn(f64) -> f64>(&self, g: G, cfg: &QuadConfig) -> MeasureIntegral {
        self.integrate_beyond(g, cfg.eps, cfg)
    }

    /// `∫_{cfg.eps < |x| <= cutoff} g(x) K(dx)`.
    pub fn integrate_within<G: Fn(f64) -> f64>(&self, g: G, cutoff: f64, cfg: &QuadConfig) -> f64 {
        let mut total = 0.0;
        for (at, w) in self.atoms() {
            if at.abs() <= cutoff {
                total += w * g(at);
            }
        }
        if !self.atoms().is_empty() || cutoff <= cfg.eps {
            return total;
        }
        for side in [Side::Positive, Side::Negative] {
            let s = side.sign();
            let f = |x: f64| g(s * x) * self.density(s * x);
            total += adaptive(&f, cfg.eps, cutoff, cfg.rel_tol, cfg.max_depth).value;
        }
        total
    }

    /// Upper tail `ν⁺(x) = K([x, ∞))` for `x > 0`.
    pub fn tail_plus(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("tail functions are defined for x > 0, got {x}")));
        }
        Ok(match self {
            JumpMeasure::None => 0.0,
            JumpMeasure::ExponentialPositive { mu } => (-mu * x).exp() / mu,
            JumpMeasure::DoubleExponential { mu_plus, w_plus, .. } => w_plus * (-mu_plus * x).exp() / mu_plus,
            JumpMeasure::CompoundPoisson {
                intensity,
                distribution,
            } => intensity * distribution.upper_tail(x),
            JumpMeasure::Tabulated(t) => t.mass_between(x, f64::INFINITY),
        })
    }

    /// Lower tail `ν⁻(x) = K((-∞, -x])` for `x > 0`.
    pub fn tail_minus(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("tail functions are defined for x > 0, got {x}")));
        }
        Ok(match self {
            JumpMeasure::None | JumpMeasure::ExponentialPositive { .. } => 0.0,
            JumpMeasure::DoubleExponential {
                mu_minus, w_plus, ..
            } => (1.0 - w_plus) * (-mu_minus * x).exp() / mu_minus,
            JumpMeasure::CompoundPoisson {
                intensity,
                distribution,
            } => intensity * distribution.lower_tail(-x),
            JumpMeasure::Tabulated(t) => t.mass_between(f64::NEG_INFINITY, -x),
        })
    }

    /// `K(|x| > cutoff)`.
    pub fn mass_beyond(&self, cutoff: f64) -> f64 {
        let c = cutoff.max(f64::MIN_POSITIVE);
        self.tail_plus(c).unwrap_or(0.0) + self.tail_minus(c).unwrap_or(0.0)
    }

    /// Draws a jump from `K` restricted to `|x| > cutoff`, normalised.
    pub fn sample_beyond<R: Rng + ?Sized>(&self, rng: &mut R, cutoff: f64) -> f64 {
        match self {
            JumpMeasure::None => 0.0,
            JumpMeasure::ExponentialPositive { mu } => cutoff + Exp::new(*mu).expect("mu > 0").sample(rng),
            JumpMeasure::DoubleExponential {
                mu_plus, mu_minus, ..
            } => {
                let up = self.tail_plus(cutoff.max(f64::MIN_POSITIVE)).unwrap_or(0.0);
                let down = self.tail_minus(cutoff.max(f64::MIN_POSITIVE)).unwrap_or(0.0);
                if rng.random::<f64>() * (up + down) < up {
                    cutoff + Exp::new(*mu_plus).expect("mu_plus > 0").sample(rng)
                } else {
                    -cutoff - Exp::new(*mu_minus).expect("mu_minus > 0").sample(rng)
                }
            }
            JumpMeasure::CompoundPoisson { distribution, .. } => loop {
                let x = distribution.sample(rng);
                if x.abs() > cutoff {
                    break x;
                }
            },
            JumpMeasure::Tabulated(t) => t.sample_beyond(rng, cutoff),
        }
    }

    /// Breakpoints on one side where the density has kinks or jumps.
    fn kinks(&self, side: Side) -> Vec<f64> {
        let s = side.sign();
        match self {
            JumpMeasure::CompoundPoisson { distribution, .. } => match *distribution {
                JumpDistribution::Normal { mean, .. } => vec![s * mean],
                JumpDistribution::Uniform { lo, hi } => vec![s * lo, s * hi],
                JumpDistribution::Dirac { .. } => Vec::new(),
            },
            JumpMeasure::Tabulated(t) => t.x.iter().map(|v| s * v).collect(),
            _ => Vec::new(),
        }
        .into_iter()
        .filter(|v| *v > 0.0)
        .collect()
    }

    /// Fixed node set `(x_j, w_j)` with `Σ w_j g(x_j) ≈ ∫_{|x|>cutoff} g dK`.
    ///
    /// Atoms are kept exactly. Each signed half of the density is covered by
    /// 16-point Gauss–Legendre panels on decades below 1, doublings above,
    /// and the density's kinks; the radius grows until the tail mass drops
    /// below `rel_tol` of the total.
    pub fn quadrature_nodes(&self, cutoff: f64, cfg: &QuadConfig) -> Vec<(f64, f64)> {
        let atoms = self.atoms();
        if !atoms.is_empty() {
            return atoms.into_iter().filter(|(x, _)| x.abs() > cutoff).collect();
        }
        let mut nodes = Vec::new();
        let total = self.mass_beyond(cutoff);
        for side in [Side::Positive, Side::Negative] {
            let support = self.upper_support(side);
            if support <= cutoff {
                continue;
            }
            let s = side.sign();
            let tail = |r: f64| match side {
                Side::Positive => self.tail_plus(r).unwrap_or(0.0),
                Side::Negative => self.tail_minus(r).unwrap_or(0.0),
            };
            let mut radius = self.bulk_radius(side).max(1.0);
            while radius < support && tail(radius) > cfg.rel_tol * total && radius < cfg.max_radius {
                radius *= 2.0;
            }
            let radius = radius.min(support);
            let mut breaks = vec![cutoff];
            let mut b = cutoff;
            while b * 10.0 < 1.0f64.min(radius) {
                b *= 10.0;
                breaks.push(b);
            }
            let mut b = 1.0;
            while b < radius {
                breaks.push(b);
                b *= 2.0;
            }
            breaks.push(radius);
            breaks.extend(self.kinks(side).into_iter().filter(|k| *k > cutoff && *k < radius));
            breaks.sort_by(|a, b| a.total_cmp(b));
            breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs());
            for w in breaks.windows(2) {
                if w[1] <= w[0] {
                    continue;
                }
                for (x, wt) in gauss_legendre_nodes(16, w[0], w[1]) {
                    let k = self.density(s * x);
                    if k > 0.0 {
                        nodes.push((s * x, wt * k));
                    }
                }
            }
        }
        nodes
    }
}

/// Callable time profile supplied in-process.
#[derive(Clone)]
pub struct Callable(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for Callable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Callable(..)")
    }
}

/// Right-continuous step function: `values[i]` on `[breaks[i], breaks[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piecewise<T> {
    pub breaks: Vec<f64>,
    pub values: Vec<T>,
}

impl<T> Piecewise<T> {
    fn validate(&self) -> Result<()> {
        if self.breaks.is_empty() || self.breaks.len() != self.values.len() {
            return Err(Error::InvalidModel(
                "piecewise profile needs equally many breaks and values".into(),
            ));
        }
        if self.breaks[0] != 0.0 {
            return Err(Error::InvalidModel("piecewise profile must start at time 0".into()));
        }
        if self.breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidModel("piecewise breaks must be strictly increasing".into()));
        }
        Ok(())
    }

    fn at(&self, s: f64) -> &T {
        let i = self.breaks.partition_point(|&b| b <= s).max(1);
        &self.values[i - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

/// Scalar time profile `s ↦ b_s` or `s ↦ c_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateProfile {
    Constant(f64),
    Piecewise { piecewise: Piecewise<f64> },
    Affine { affine: Affine },
    #[serde(skip)]
    Custom(Callable),
}

impl RateProfile {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        RateProfile::Custom(Callable(Arc::new(f)))
    }

    pub fn affine(intercept: f64, slope: f64) -> Self {
        RateProfile::Affine {
            affine: Affine { intercept, slope },
        }
    }

    pub fn at(&self, s: f64) -> f64 {
        match self {
            RateProfile::Constant(v) => *v,
            RateProfile::Piecewise { piecewise } => *piecewise.at(s),
            RateProfile::Affine { affine } => affine.intercept + affine.slope * s,
            RateProfile::Custom(f) => (f.0)(s),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            RateProfile::Constant(_) => true,
            RateProfile::Piecewise { piecewise } => piecewise.values.windows(2).all(|w| w[0] == w[1]),
            RateProfile::Affine { affine } => affine.slope == 0.0,
            RateProfile::Custom(_) => false,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |v: f64| !v.is_finite();
        match self {
            RateProfile::Constant(v) if bad(*v) => Err(Error::InvalidModel(format!("{name} must be finite"))),
            RateProfile::Piecewise { piecewise } => {
                piecewise.validate()?;
                if piecewise.values.iter().any(|v| bad(*v)) {
                    return Err(Error::InvalidModel(format!("{name} must be finite")));
                }
                Ok(())
            }
            RateProfile::Affine { affine } if bad(affine.intercept) || bad(affine.slope) => {
                Err(Error::InvalidModel(format!("{name} must be finite")))
            }
            _ => Ok(()),
        }
    }

    fn breaks(&self) -> Vec<f64> {
        match self {
            RateProfile::Piecewise { piecewise } => piecewise.breaks.clone(),
            _ => Vec::new(),
        }
    }
}

impl From<f64> for RateProfile {
    fn from(v: f64) -> Self {
        RateProfile::Constant(v)
    }
}

/// Time profile `s ↦ K_s` of Lévy measures. No interpolation between pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureProfile {
    Piecewise { piecewise: Piecewise<JumpMeasure> },
    Constant(JumpMeasure),
}

impl MeasureProfile {
    pub fn at(&self, s: f64) -> &JumpMeasure {
        match self {
            MeasureProfile::Constant(k) => k,
            MeasureProfile::Piecewise { piecewise } => piecewise.at(s),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            MeasureProfile::Constant(_) => true,
            MeasureProfile::Piecewise { piecewise } => piecewise.values.windows(2).all(|w| w[0] == w[1]),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MeasureProfile::Constant(k) => k.validate(),
            MeasureProfile::Piecewise { piecewise } => {
                piecewise.validate()?;
                piecewise.values.iter().try_for_each(JumpMeasure::validate)
            }
        }
    }

    fn breaks(&self) -> Vec<f64> {
        match self {
            MeasureProfile::Piecewise { piecewise } => piecewise.breaks.clone(),
            MeasureProfile::Constant(_) => Vec::new(),
        }
    }
}

impl From<JumpMeasure> for MeasureProfile {
    fn from(k: JumpMeasure) -> Self {
        MeasureProfile::Constant(k)
    }
}

/// Anything exposing a time-dependent triplet: forward models and their
/// time reversals.
pub trait Characteristics: Send + Sync {
    fn drift(&self, s: f64) -> f64;
    fn variance(&self, s: f64) -> f64;
    fn jumps(&self, s: f64) -> &JumpMeasure;
    fn is_levy(&self) -> bool;
    /// Times in `(0, horizon)` where a piecewise profile may change value.
    fn breakpoints(&self, horizon: f64) -> Vec<f64>;
}

/// Characteristic triplet `(b, c, K)` of a PII semimartingale with `X_0 = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessModel {
    pub b: RateProfile,
    pub c: RateProfile,
    #[serde(default = "no_jumps")]
    pub jumps: MeasureProfile,
}

fn no_jumps() -> MeasureProfile {
    MeasureProfile::Constant(JumpMeasure::None)
}

impl ProcessModel {
    pub fn new(b: impl Into<RateProfile>, c: impl Into<RateProfile>, jumps: impl Into<MeasureProfile>) -> Self {
        Self {
            b: b.into(),
            c: c.into(),
            jumps: jumps.into(),
        }
    }

    /// Lévy model with constant triplet.
    pub fn levy(b: f64, c: f64, jumps: JumpMeasure) -> Self {
        Self::new(b, c, jumps)
    }

    /// Brownian motion with drift `b` and variance rate `c`.
    pub fn brownian(b: f64, c: f64) -> Self {
        Self::levy(b, c, JumpMeasure::None)
    }

    /// Structural checks: finite parameters, well-formed measures and profiles.
    pub fn check_structure(&self) -> Result<()> {
        self.b.validate("b")?;
        self.c.validate("c")?;
        self.jumps.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ProcessModel =
            serde_json::from_str(text).map_err(|e| Error::InvalidModel(format!("model JSON: {e}")))?;
        m.check_structure()?;
        Ok(m)
    }
}

impl Characteristics for ProcessModel {
    fn drift(&self, s: f64) -> f64 {
        self.b.at(s)
    }
    fn variance(&self, s: f64) -> f64 {
        self.c.at(s)
    }
    fn jumps(&self, s: f64) -> &JumpMeasure {
        self.jumps.at(s)
    }
    fn is_levy(&self) -> bool {
        self.b.is_constant() && self.c.is_constant() && self.jumps.is_constant()
    }
    fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .b
            .breaks()
            .into_iter()
            .chain(self.c.breaks())
            .chain(self.jumps.breaks())
            .filter(|t| *t > 0.0 && *t < horizon)
            .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        v
    }
}

impl<T: Characteristics + ?Sized> Characteristics for &T {
    fn drift(&self, s: f64) -> f64 {
        (**self).drift(s)
    }
    fn variance(&self, s: f64) -> f64 {
        (**self).variance(s)
    }
    fn jumps(&self, s: f64) -> &JumpMeasure {
        (**self).jumps(s)
    }
    fn is_levy(&self) -> bool {
        (**self).is_levy()
    }
    fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        (**self).breakpoints(horizon)
    }
}

/// Outcome of the integrability checks on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rt1_ok: bool,
    pub rt11_ok: bool,
    /// `∫_0^T ∫ (x² ∧ 1) K_s(dx) ds`.
    pub rt1_value: f64,
    /// `∫_0^T ∫_{|x|>1} e^{|x|} K_s(dx) ds`; infinite when divergent.
    pub rt11_value: f64,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.rt1_ok && self.rt11_ok
    }
}

/// Pieces `(start, end)` of `[0, horizon]` on which the triplet is sampled.
fn pieces<C: Characteristics + ?Sized>(model: &C, horizon: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![0.0];
    cuts.extend(model.breakpoints(horizon));
    cuts.push(horizon);
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Checks `∫∫(x²∧1)K < ∞` and `∫∫_{|x|>1}e^{|x|}K < ∞` over `[0, horizon]`.
///
/// Malformed inputs (negative variance, bad measures) are errors; a failed
/// integrability condition is reported through the flags.
pub fn validate_model(model: &ProcessModel, horizon: f64, cfg: &QuadConfig) -> Result<ValidationReport> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    model.check_structure()?;
    check_variance(model, horizon)?;
    let mut report = ValidationReport {
        rt1_ok: true,
        rt11_ok: true,
        rt1_value: 0.0,
        rt11_value: 0.0,
        messages: Vec::new(),
    };
    for (lo, hi) in pieces(model, horizon) {
        let k = model.jumps(lo);
        if k.is_none() {
            continue;
        }
        let dur = hi - lo;
        let small = k.integrate(|x| (x * x).min(1.0), cfg);
        let big = k.integrate_beyond(|x| x.abs().exp(), 1.0, cfg);
        report.rt1_value += dur * small.value;
        report.rt11_value += dur * big.value;
        if !small.finite {
            report.rt1_ok = false;
            report.rt1_value = f64::INFINITY;
            report.messages.push(format!("∫(x²∧1)K diverges on [{lo}, {hi})"));
        }
        if !big.finite {
            report.rt11_ok = false;
            report.rt11_value = f64::INFINITY;
            report.messages.push(format!("∫_{{|x|>1}} e^|x| K diverges on [{lo}, {hi})"));
        } else if !big.converged {
            report
                .messages
                .push(format!("exponential moment not settled at radius {} on [{lo}, {hi})", cfg.max_radius));
        }
    }
    Ok(report)
}

fn check_variance(model: &ProcessModel, horizon: f64) -> Result<()> {
    let probes: Vec<f64> = match &model.c {
        RateProfile::Constant(v) => vec![*v],
        RateProfile::Piecewise { piecewise } => piecewise.values.clone(),
        RateProfile::Affine { affine } => vec![affine.intercept, affine.intercept + affine.slope * horizon],
        RateProfile::Custom(f) => (0..=1000).map(|i| (f.0)(horizon * i as f64 / 1000.0)).collect(),
    };
    if let Some(v) = probes.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidModel(format!("variance rate must be nonnegative, found {v}")));
    }
    Ok(())
}

/// `a_s = -b_s + c_s/2 + ∫ (e^{-x} - 1 + x) K_s(dx)`.
pub fn compute_a<C: Characteristics + ?Sized>(model: &C, s: f64, cfg: &QuadConfig) -> Result<f64> {
    let jump = jump_compensator_integral(model.jumps(s), cfg)?;
    Ok(-model.drift(s) + 0.5 * model.variance(s) + jump)
}

pub(crate) fn jump_compensator_integral(k: &JumpMeasure, cfg: &QuadConfig) -> Result<f64> {
    if k.is_none() {
        return Ok(0.0);
    }
    let r = k.integrate(exp_compensator, cfg);
    if !r.finite || !r.converged {
        return Err(Error::Numerical(format!(
            "∫(e^-x - 1 + x)K(dx) did not converge (partial value {})",
            r.value
        )));
    }
    Ok(r.value)
}

/// The pair `(ν⁺, ν⁻)` of tail functions of a measure.
#[derive(Debug, Clone, Copy)]
pub struct TailFunctions<'a> {
    measure: &'a JumpMeasure,
}

impl TailFunctions<'_> {
    pub fn plus(&self, x: f64) -> Result<f64> {
        self.measure.tail_plus(x)
    }
    pub fn minus(&self, x: f64) -> Result<f64> {
        self.measure.tail_minus(x)
    }
}

pub fn tail_functions(k: &JumpMeasure) -> TailFunctions<'_> {
    TailFunctions { measure: k }
}

/// Per-condition verdicts of the smooth-density criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub diffusion_positive: bool,
    pub negative_exp_moments_finite: bool,
    pub positive_jumps_bounded: bool,
    pub all: bool,
}

fn negative_moment_finite(k: &JumpMeasure, p: f64, cfg: &QuadConfig) -> bool {
    if k.upper_support(Side::Negative) <= 1.0 {
        return true;
    }
    let r = k.integrate_beyond(|z| if z < -1.0 { (-p * z).exp() } else { 0.0 }, 1.0, cfg);
    r.finite
}

fn smoothness_for(c: f64, k: &JumpMeasure, p_max: f64, cfg: &QuadConfig) -> SmoothnessReport {
    let diffusion_positive = c > 0.0;
    let negative_exp_moments_finite = negative_moment_finite(k, 2.0, cfg) && negative_moment_finite(k, p_max, cfg);
    let positive_jumps_bounded = k.positive_support_bound().is_some();
    SmoothnessReport {
        diffusion_positive,
        negative_exp_moments_finite,
        positive_jumps_bounded,
        all: diffusion_positive && negative_exp_moments_finite && positive_jumps_bounded,
    }
}

/// Sufficient conditions for a `C^∞` density of `V_s` (Lévy case):
/// `c₀ > 0`, `∫_{z<-1} e^{-pz} K(dz) < ∞` for `2 ≤ p ≤ p_max`, and positive
/// jumps bounded above. The moment is monotone in `p`, so both ends are probed.
pub fn check_smoothness_conditions(model: &ProcessModel, p_max: f64, cfg: &QuadConfig) -> Result<SmoothnessReport> {
    if !(p_max >= 2.0) {
        return Err(Error::Domain(format!("p_max must be at least 2, got {p_max}")));
    }
    model.check_structure()?;
    if !model.is_levy() {
        return Err(Error::Unsupported(
            "smoothness conditions need a Lévy model; use check_smoothness_conditions_at".into(),
        ));
    }
    Ok(smoothness_for(model.variance(0.0), model.jumps(0.0), p_max, cfg))
}

/// Non-homogeneous variant at a fixed time `s`: the averaged variance over
/// `[0, s]` must be positive and the jump conditions must hold at every time.
pub fn check_smoothness_conditions_at(
    model: &ProcessModel,
    p_max: f64,
    s: f64,
    cfg: &QuadConfig,
) -> Result<SmoothnessReport> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("time must be positive, got {s}")));
    }
    if !(p_max >= 2.0) {
        return Err(Error::Domain(format!("p_max must be at least 2, got {p_max}")));
    }
    model.check_structure()?;
    let n = 1000;
    let mean_c = (0..n)
        .map(|i| model.variance(s * (i as f64 + 0.5) / n as f64))
        .sum::<f64>()
        / n as f64;
    let mut out = SmoothnessReport {
        diffusion_positive: mean_c > 0.0,
        negative_exp_moments_finite: true,
        positive_jumps_bounded: true,
        all: false,
    };
    for (lo, _) in pieces(model, s) {
        let r = smoothness_for(1.0, model.jumps(lo), p_max, cfg);
        out.negative_exp_moments_finite &= r.negative_exp_moments_finite;
        out.positive_jumps_bounded &= r.positive_jumps_bounded;
    }
    out.all = out.diffusion_positive && out.negative_exp_moments_finite && out.positive_jumps_bounded;
    Ok(out)
}

/// Mean of the Gaussian replacing truncated small jumps is zero; this is
/// its variance rate `∫_{|x|<=cutoff} x² K(dx)`.
pub fn small_jump_variance(k: &JumpMeasure, cutoff: f64, cfg: &QuadConfig) -> f64 {
    if k.is_none() {
        return 0.0;
    }
    k.integrate_within(|x| x * x, cutoff, cfg)
}

/// Standard normal sampler re-exported for the engines.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}
