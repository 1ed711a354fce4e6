//! Time reversal `Y_s = X_t - X_{(t-s)-}` at a fixed horizon, the generator
//! of the Markov process `V_s = e^{-Y_s} ∫_0^s e^{Y_u} du`, and the Dynkin
//! identity `E f(V_s) = ∫_0^s E 𝒜_u f(V_u) du` as a statistical check.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mc_engine::{PathBatch, PathKind};
use crate::process_model::{compute_a, Characteristics, JumpMeasure, ProcessModel};
use crate::quadrature::QuadConfig;

/// Triplet of `Y`: `b̄(u) = b(t - u)` on `[0, t)` and `b̄(t) = b(t)`; the
/// same for `c̄` and `K̄`.
#[derive(Debug, Clone)]
pub struct ReversedModel<M = ProcessModel> {
    base: M,
    t_fix: f64,
}

impl<M: Characteristics> ReversedModel<M> {
    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn t_fix(&self) -> f64 {
        self.t_fix
    }

    /// Base time whose value the reversed profile takes at `u`.
    fn source_time(&self, u: f64) -> f64 {
        if u >= self.t_fix {
            self.t_fix
        } else {
            (self.t_fix - u).min(self.t_fix)
        }
    }

    /// Base time for the left limit at `u`; differs from [`Self::source_time`]
    /// only at `u = t_fix`, where it is `0`.
    fn left_limit_time(&self, u: f64) -> f64 {
        (self.t_fix - u).clamp(0.0, self.t_fix)
    }

    /// The triplet just before `u`, as used by the generator at `u = t_fix`.
    pub fn left_limit(&self, u: f64) -> LeftLimit<'_, M> {
        LeftLimit {
            rev: self,
            at: self.left_limit_time(u),
        }
    }
}

impl<M: Characteristics> Characteristics for ReversedModel<M> {
    fn drift(&self, u: f64) -> f64 {
        self.base.drift(self.source_time(u))
    }
    fn variance(&self, u: f64) -> f64 {
        self.base.variance(self.source_time(u))
    }
    fn jumps(&self, u: f64) -> &JumpMeasure {
        self.base.jumps(self.source_time(u))
    }
    fn is_levy(&self) -> bool {
        self.base.is_levy()
    }
    fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .base
            .breakpoints(self.t_fix)
            .into_iter()
            .map(|b| self.t_fix - b)
            .filter(|u| *u > 0.0 && *u < horizon)
            .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }
}

/// Constant triplet frozen at the left limit of a reversed model.
pub struct LeftLimit<'a, M> {
    rev: &'a ReversedModel<M>,
    at: f64,
}

impl<M: Characteristics> Characteristics for LeftLimit<'_, M> {
    fn drift(&self, _: f64) -> f64 {
        self.rev.base.drift(self.at)
    }
    fn variance(&self, _: f64) -> f64 {
        self.rev.base.variance(self.at)
    }
    fn jumps(&self, _: f64) -> &JumpMeasure {
        self.rev.base.jumps(self.at)
    }
    fn is_levy(&self) -> bool {
        true
    }
    fn breakpoints(&self, _: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Reverses `model` at `t_fix`.
pub fn reverse_triplet<M: Characteristics>(model: M, t_fix: f64) -> Result<ReversedModel<M>> {
    if !(t_fix > 0.0) || !t_fix.is_finite() {
        return Err(Error::Domain(format!("reversal horizon must be positive, got {t_fix}")));
    }
    Ok(ReversedModel { base: model, t_fix })
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Numerical proxy for membership in the class of `C²_b` functions with
/// `f(0) = f'(0) = 0` and bounded `f'(y)y`, `f''(y)y²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassCertificate {
    pub f_at_zero: f64,
    pub df_at_zero: f64,
    pub sup_f: f64,
    pub sup_df: f64,
    pub sup_df_y: f64,
    pub sup_d2f_y2: f64,
    pub valid: bool,
}

/// Test function with its first two derivatives.
#[derive(Clone)]
pub struct TestFunction {
    f: RealFn,
    df: RealFn,
    d2f: RealFn,
    certificate: ClassCertificate,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("certificate", &self.certificate)
            .finish_non_exhaustive()
    }
}

const SUP_BOUND: f64 = 1e12;

impl TestFunction {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::from_parts(Arc::new(f), Arc::new(df), Arc::new(d2f))
    }

    fn from_parts(f: RealFn, df: RealFn, d2f: RealFn) -> Self {
        let certificate = certify(&*f, &*df, &*d2f);
        Self {
            f,
            df,
            d2f,
            certificate,
        }
    }

    /// `f_λ(y) = 1 - e^{-λy} - λy e^{-λy}`.
    pub fn shipped(lambda: f64) -> Self {
        Self::new(
            move |y| 1.0 - (-lambda * y).exp() - lambda * y * (-lambda * y).exp(),
            move |y| lambda * lambda * y * (-lambda * y).exp(),
            move |y| lambda * lambda * (-lambda * y).exp() * (1.0 - lambda * y),
        )
    }

    /// The three default members, `λ ∈ {0.5, 1, 2}`.
    pub fn shipped_set() -> Vec<(f64, Self)> {
        [0.5, 1.0, 2.0].into_iter().map(|l| (l, Self::shipped(l))).collect()
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_| 0.0, |_| 0.0)
    }

    /// `α f + β g`.
    pub fn combine(alpha: f64, f: &TestFunction, beta: f64, g: &TestFunction) -> Self {
        let (f0, g0) = (f.f.clone(), g.f.clone());
        let (f1, g1) = (f.df.clone(), g.df.clone());
        let (f2, g2) = (f.d2f.clone(), g.d2f.clone());
        Self::new(
            move |y| alpha * f0(y) + beta * g0(y),
            move |y| alpha * f1(y) + beta * g1(y),
            move |y| alpha * f2(y) + beta * g2(y),
        )
    }

    pub fn value(&self, y: f64) -> f64 {
        (self.f)(y)
    }
    pub fn d1(&self, y: f64) -> f64 {
        (self.df)(y)
    }
    pub fn d2(&self, y: f64) -> f64 {
        (self.d2f)(y)
    }
    pub fn certificate(&self) -> &ClassCertificate {
        &self.certificate
    }
}

/// Probes the sup-norms on a geometric grid `y ∈ [10⁻⁶, 10⁶]`.
fn certify(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64, d2f: &dyn Fn(f64) -> f64) -> ClassCertificate {
    let mut c = ClassCertificate {
        f_at_zero: f(0.0),
        df_at_zero: df(0.0),
        sup_f: 0.0,
        sup_df: 0.0,
        sup_df_y: 0.0,
        sup_d2f_y2: 0.0,
        valid: false,
    };
    let n = 1200;
    for i in 0..=n {
        let y = 10f64.powf(-6.0 + 12.0 * i as f64 / n as f64);
        c.sup_f = c.sup_f.max(f(y).abs());
        c.sup_df = c.sup_df.max(df(y).abs());
        c.sup_df_y = c.sup_df_y.max((df(y) * y).abs());
        c.sup_d2f_y2 = c.sup_d2f_y2.max((d2f(y) * y * y).abs());
    }
    let bounded = [c.sup_f, c.sup_df, c.sup_df_y, c.sup_d2f_y2]
        .iter()
        .all(|v| v.is_finite() && *v < SUP_BOUND);
    c.valid = bounded && c.f_at_zero.abs() < 1e-12 && c.df_at_zero.abs() < 1e-12;
    c
}

/// `𝒜_s` frozen at one time: `ā_s`, `c̄_s` and a node set for `K̄_s`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub a: f64,
    pub c: f64,
    nodes: Vec<(f64, f64)>,
}

impl Generator {
    /// Generator of `V` for the triplet of `chars` at time `s`.
    pub fn new<C: Characteristics + ?Sized>(chars: &C, s: f64, cfg: &QuadConfig) -> Result<Self> {
        let a = compute_a(chars, s, cfg)?;
        let k = chars.jumps(s);
        let nodes = if k.is_none() {
            Vec::new()
        } else {
            k.quadrature_nodes(cfg.eps, cfg)
        };
        Ok(Self {
            a,
            c: chars.variance(s),
            nodes,
        })
    }

    /// Generator of a reversed model at `s ∈ [0, t_fix]`; at `s = t_fix` the
    /// left limit of the triplet is used.
    pub fn for_reversed<M: Characteristics>(rev: &ReversedModel<M>, s: f64, cfg: &QuadConfig) -> Result<Self> {
        if !(0.0..=rev.t_fix).contains(&s) {
            return Err(Error::Domain(format!("time {s} outside [0, {}]", rev.t_fix)));
        }
        Self::new(&rev.left_limit(s), 0.0, cfg)
    }

    /// `(1 + y ā) f'(y) + ½ c̄ f''(y) y² + ∫ [f(ye^{-x}) - f(y) - f'(y) y (e^{-x} - 1)] K̄(dx)`.
    pub fn apply(&self, f: &TestFunction, y: f64) -> f64 {
        let fy = f.value(y);
        let d1 = f.d1(y);
        let local = (1.0 + y * self.a) * d1 + 0.5 * self.c * f.d2(y) * y * y;
        let jump: f64 = self
            .nodes
            .iter()
            .map(|&(x, w)| {
                let em1 = (-x).exp_m1();
                w * (f.value(y * (-x).exp()) - fy - d1 * y * em1)
            })
            .sum();
        local + jump
    }
}

/// `𝒜_s f(y)` for a reversed model.
pub fn generator_apply<M: Characteristics>(
    rev: &ReversedModel<M>,
    f: &TestFunction,
    y: f64,
    s: f64,
    cfg: &QuadConfig,
) -> Result<f64> {
    if !f.certificate.valid {
        return Err(Error::Precondition(format!(
            "test function fails the class certificate: {:?}",
            f.certificate
        )));
    }
    if !(y > 0.0) {
        return Err(Error::Domain(format!("generator needs y > 0, got {y}")));
    }
    Ok(Generator::for_reversed(rev, s, cfg)?.apply(f, y))
}

/// Outcome of the Dynkin check at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DynkinResult {
    /// `Ê f(V_s)`.
    pub expectation: f64,
    /// `∫_0^s Ê 𝒜_u f(V_u) du`, trapezoid over the mesh.
    pub integrated_generator: f64,
    pub residual: f64,
    /// Standard error of the per-path difference.
    pub std_error: f64,
}

impl DynkinResult {
    pub fn within(&self, n_se: f64) -> bool {
        self.residual <= n_se * self.std_error
    }
}

/// Compares `Ê f(V_s)` with `∫_0^s Ê 𝒜_u f(V_u) du` on a batch of `V` paths.
pub fn dynkin_check<M: Characteristics>(
    rev: &ReversedModel<M>,
    f: &TestFunction,
    s: f64,
    batch: &PathBatch,
    cfg: &QuadConfig,
) -> Result<DynkinResult> {
    if batch.kind != PathKind::VPath {
        return Err(Error::Precondition("dynkin check needs a batch of V paths".into()));
    }
    let mesh = &batch.time_mesh;
    let tol = 1e-9 * s.abs().max(1.0);
    let end = mesh
        .iter()
        .position(|t| (t - s).abs() <= tol)
        .ok_or_else(|| Error::Domain(format!("time mesh does not contain s = {s}")))?;
    if mesh.first().copied() != Some(0.0) {
        return Err(Error::Domain("time mesh must start at 0".into()));
    }
    if s > rev.t_fix() + tol {
        return Err(Error::Domain(format!("s = {s} beyond the reversal horizon")));
    }
    let generators: Vec<Generator> = if rev.is_levy() {
        let g = Generator::for_reversed(rev, 0.0, cfg)?;
        vec![g; end + 1]
    } else {
        mesh[..=end]
            .iter()
            .map(|&u| Generator::for_reversed(rev, u.min(rev.t_fix()), cfg))
            .collect::<Result<_>>()?
    };
    let n = batch.n_paths;
    let (mut sum_f, mut sum_g, mut sum_d, mut sum_d2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let row = batch.row(i);
        let mut integral = 0.0;
        let mut prev = generators[0].apply(f, row[0].max(0.0));
        for k in 1..=end {
            let cur = generators[k].apply(f, row[k].max(0.0));
            integral += 0.5 * (mesh[k] - mesh[k - 1]) * (prev + cur);
            prev = cur;
        }
        let fv = f.value(row[end]);
        let d = fv - integral;
        sum_f += fv;
        sum_g += integral;
        sum_d += d;
        sum_d2 += d * d;
    }
    let nf = n as f64;
    let mean_d = sum_d / nf;
    let var = (sum_d2 / nf - mean_d * mean_d).max(0.0) * nf / (nf - 1.0).max(1.0);
    Ok(DynkinResult {
        expectation: sum_f / nf,
        integrated_generator: sum_g / nf,
        residual: mean_d.abs(),
        std_error: (var / nf).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process_model::RateProfile;
    use approx::assert_relative_eq;

    #[test]
    fn levy_reversal_is_constant() {
        let m = ProcessModel::levy(1.5, 0.7, JumpMeasure::ExponentialPositive { mu: 2.0 });
        let r = reverse_triplet(m, 1.0).unwrap();
        for u in [0.0, 0.3, 0.99] {
            assert_eq!(r.drift(u), 1.5);
            assert_eq!(r.variance(u), 0.7);
            assert_eq!(r.jumps(u), &JumpMeasure::ExponentialPositive { mu: 2.0 });
        }
    }

    #[test]
    fn linear_drift_reverses_with_endpoint_value() {
        let m = ProcessModel::new(RateProfile::affine(0.0, 1.0), 0.0, JumpMeasure::None);
        let r = reverse_triplet(m, 1.0).unwrap();
        assert_relative_eq!(r.drift(0.25), 0.75);
        assert_relative_eq!(r.drift(0.0), 1.0);
        assert_eq!(r.drift(1.0), 1.0);
        // Left limit at the endpoint is b(0+).
        assert_eq!(r.left_limit(1.0).drift(0.0), 0.0);
    }

    #[test]
    fn nonpositive_horizon_is_a_domain_error() {
        assert!(matches!(
            reverse_triplet(ProcessModel::brownian(1.0, 1.0), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn double_reversal_restores_profiles_off_the_endpoints() {
        let m = ProcessModel::new(
            RateProfile::affine(0.5, 2.0),
            RateProfile::Piecewise {
                piecewise: crate::process_model::Piecewise {
                    breaks: vec![0.0, 0.4],
                    values: vec![1.0, 3.0],
                },
            },
            JumpMeasure::None,
        );
        let t = 1.0;
        let twice = reverse_triplet(reverse_triplet(m.clone(), t).unwrap(), t).unwrap();
        for i in 1..100 {
            let u = t * i as f64 / 100.0;
            assert_relative_eq!(twice.drift(u), m.drift(u), epsilon = 1e-12);
            // The reversed step sits at 0.6 and is left-continuous there, so
            // the doubly reversed profile differs only at the break itself.
            if (u - 0.4).abs() > 1e-12 {
                assert_eq!(twice.variance(u), m.variance(u));
            }
        }
    }

    #[test]
    fn shipped_functions_are_certified() {
        for (_, f) in TestFunction::shipped_set() {
            assert!(f.certificate().valid, "{:?}", f.certificate());
        }
        let bad = TestFunction::new(|y| y, |_| 1.0, |_| 0.0);
        assert!(!bad.certificate().valid);
        let r = reverse_triplet(ProcessModel::brownian(1.0, 1.0), 1.0).unwrap();
        assert!(matches!(
            generator_apply(&r, &bad, 1.0, 0.0, &QuadConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pure_drift_generator_vanishes_at_stagnation_point() {
        let r = reverse_triplet(ProcessModel::brownian(1.0, 0.0), 1.0).unwrap();
        let v = generator_apply(&r, &TestFunction::shipped(1.0), 1.0, 0.2, &QuadConfig::default()).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn zero_function_gives_zero() {
        let m = ProcessModel::levy(0.3, 1.0, JumpMeasure::ExponentialPositive { mu: 2.0 });
        let r = reverse_triplet(m, 1.0).unwrap();
        let v = generator_apply(&r, &TestFunction::zero(), 0.7, 0.5, &QuadConfig::default());
        // The zero function has f(0) = f'(0) = 0 and bounded norms.
        assert_eq!(v.unwrap(), 0.0);
    }

    #[test]
    fn generator_is_linear() {
        let m = ProcessModel::levy(
            0.4,
            0.8,
            JumpMeasure::DoubleExponential {
                mu_plus: 3.0,
                mu_minus: 4.0,
                w_plus: 0.6,
            },
        );
        let r = reverse_triplet(m, 2.0).unwrap();
        let q = QuadConfig::default();
        let (f, g) = (TestFunction::shipped(0.5), TestFunction::shipped(2.0));
        let h = TestFunction::combine(2.0, &f, -3.0, &g);
        for y in [0.1, 1.0, 5.0] {
            let lhs = generator_apply(&r, &h, y, 0.5, &q).unwrap();
            let rhs = 2.0 * generator_apply(&r, &f, y, 0.5, &q).unwrap() - 3.0 * generator_apply(&r, &g, y, 0.5, &q).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn generator_vanishes_as_y_goes_to_zero() {
        let m = ProcessModel::levy(0.4, 0.8, JumpMeasure::ExponentialPositive { mu: 3.0 });
        let r = reverse_triplet(m, 1.0).unwrap();
        let f = TestFunction::shipped(1.0);
        let mut prev = f64::INFINITY;
        for k in 1..=8 {
            let y = 10f64.powi(-k);
            let v = generator_apply(&r, &f, y, 0.0, &QuadConfig::default()).unwrap().abs();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn jump_term_matches_adaptive_quadrature() {
        let k = JumpMeasure::ExponentialPositive { mu: 2.5 };
        let m = ProcessModel::levy(0.0, 0.0, k.clone());
        let r = reverse_triplet(m, 1.0).unwrap();
        let f = TestFunction::shipped(1.0);
        let q = QuadConfig::default();
        let y = 1.3;
        let direct = generator_apply(&r, &f, y, 0.0, &q).unwrap();
        let a = compute_a(&r, 0.0, &q).unwrap();
        let jump = k
            .integrate(
                |x| f.value(y * (-x).exp()) - f.value(y) - f.d1(y) * y * (-x).exp_m1(),
                &q,
            )
            .value;
        assert_relative_eq!(direct, (1.0 + y * a) * f.d1(y) + jump, max_relative = 1e-10);
    }
}
