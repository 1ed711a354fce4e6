//! Seeded Monte Carlo for `X`, the exponential functional `I_t` and the two
//! constructions of `V` (Euler scheme for `dV = V_- dŶ + ds` and the exact
//! pathwise recursion from reversed increments).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process_model::{compute_a, small_jump_variance, standard_normal, Characteristics, JumpMeasure};
use crate::quadrature::QuadConfig;
use crate::reversal::ReversedModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dt: f64,
    /// Jumps with `|x| <= eps_cutoff` are not simulated individually.
    pub eps_cutoff: f64,
    /// Replace the dropped small jumps by a Gaussian of matched variance.
    pub variance_correction: bool,
    pub n_paths: usize,
    pub seed: u64,
    /// Keep every `record_every`-th mesh point in path batches.
    #[serde(default = "one")]
    pub record_every: usize,
}

fn one() -> usize {
    1
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            eps_cutoff: 1e-3,
            variance_correction: true,
            n_paths: 100_000,
            seed: 0,
            record_every: 1,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.eps_cutoff > 0.0 && self.eps_cutoff <= 1.0) {
            return Err(Error::Config(format!("eps_cutoff must lie in (0, 1], got {}", self.eps_cutoff)));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps to reach `horizon`.
    fn steps_to(&self, horizon: f64) -> Result<usize> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let n = (horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::Config(format!("dt = {} does not divide the horizon {horizon}", self.dt)));
        }
        let n = n as usize;
        if n % self.record_every != 0 {
            return Err(Error::Config(format!(
                "record_every = {} does not divide the {n} steps",
                self.record_every
            )));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    XPath,
    VPath,
    FunctionalSamples,
}

/// Simulated values, row-major `n_paths × time_mesh.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub seed: u64,
    pub n_paths: usize,
    pub time_mesh: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: PathKind,
    /// Euler steps where `V` went negative and was clamped to 0.
    pub clamped: usize,
    pub warnings: Vec<String>,
}

impl PathBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.time_mesh.len();
        &self.values[i * m..(i + 1) * m]
    }

    /// Values at mesh index `k` across paths.
    pub fn column(&self, k: usize) -> Vec<f64> {
        let m = self.time_mesh.len();
        (0..self.n_paths).map(|i| self.values[i * m + k]).collect()
    }

    /// Values at the last mesh time.
    pub fn terminal(&self) -> Vec<f64> {
        self.column(self.time_mesh.len() - 1)
    }
}

/// How an increment of the simulated process is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    /// `ΔX`: jumps `ξ`, compensated by `∫_{|x|>ε} x K`.
    X,
    /// `ΔŶ`: jumps `e^{-ξ} - 1`, drift `a`, Brownian part negated.
    YHat,
}

#[derive(Debug, Clone, Copy)]
struct StepCoef {
    drift: f64,
    sd: f64,
    jump_mean: f64,
    measure: usize,
}

struct Plan {
    steps: Vec<StepCoef>,
    measures: Vec<JumpMeasure>,
    poisson: Vec<Option<Poisson<f64>>>,
    eps: f64,
    target: Target,
    dt: f64,
    warnings: Vec<String>,
}

fn measure_index(list: &mut Vec<JumpMeasure>, k: &JumpMeasure) -> usize {
    if let Some(i) = list.iter().position(|m| m == k) {
        return i;
    }
    list.push(k.clone());
    list.len() - 1
}

impl Plan {
    fn build<C: Characteristics + ?Sized>(chars: &C, n: usize, dt: f64, cfg: &McConfig, target: Target) -> Result<Self> {
        let q = QuadConfig::default();
        let eps = cfg.eps_cutoff;
        let mut measures = Vec::new();
        // Per measure: (rate beyond eps, compensator of simulated jumps, small-jump variance).
        let mut stats: Vec<(f64, f64, f64)> = Vec::new();
        let mut steps = Vec::with_capacity(n);
        let mut warnings = Vec::new();
        let levy = chars.is_levy();
        let mut cached: Option<StepCoef> = None;
        for k in 0..n {
            if let (true, Some(c)) = (levy, cached) {
                steps.push(c);
                continue;
            }
            let s = (k as f64 + 0.5) * dt;
            let km = chars.jumps(s);
            let idx = measure_index(&mut measures, km);
            if idx == stats.len() {
                stats.push(jump_stats(km, eps, target, &q)?);
            }
            let (rate, comp, small) = stats[idx];
            let c = chars.variance(s);
            let small = if cfg.variance_correction { small } else { 0.0 };
            let drift = match target {
                Target::X => chars.drift(s),
                Target::YHat => compute_a(chars, s, &q)?,
            };
            let coef = StepCoef {
                drift: (drift - comp) * dt,
                sd: ((c + small) * dt).max(0.0).sqrt(),
                jump_mean: rate * dt,
                measure: idx,
            };
            if coef.jump_mean > 0.1 && warnings.is_empty() {
                warnings.push(format!(
                    "jump intensity × dt = {:.3} exceeds 0.1; the step is coarse",
                    coef.jump_mean
                ));
            }
            cached = Some(coef);
            steps.push(coef);
        }
        let poisson = steps
            .iter()
            .map(|s| {
                if s.jump_mean > 50.0 {
                    Poisson::new(s.jump_mean).ok()
                } else {
                    None
                }
            })
            .collect();
        Ok(Self {
            steps,
            measures,
            poisson,
            eps,
            target,
            dt,
            warnings,
        })
    }

    fn jump_count<R: Rng>(&self, k: usize, rng: &mut R) -> u64 {
        let m = self.steps[k].jump_mean;
        if m == 0.0 {
            return 0;
        }
        if let Some(p) = &self.poisson[k] {
            return p.sample(rng) as u64;
        }
        let u: f64 = rng.random();
        let mut p = (-m).exp();
        let mut cdf = p;
        let mut count = 0u64;
        while u > cdf && count < 10_000 {
            count += 1;
            p *= m / count as f64;
            cdf += p;
        }
        count
    }

    fn increment<R: Rng>(&self, k: usize, rng: &mut R) -> f64 {
        let st = &self.steps[k];
        let mut inc = st.drift;
        if st.sd > 0.0 {
            let z = standard_normal(rng);
            inc += match self.target {
                Target::X => st.sd * z,
                Target::YHat => -st.sd * z,
            };
        }
        for _ in 0..self.jump_count(k, rng) {
            let xi = self.measures[st.measure].sample_beyond(rng, self.eps);
            inc += match self.target {
                Target::X => xi,
                Target::YHat => (-xi).exp_m1(),
            };
        }
        inc
    }
}

fn jump_stats(k: &JumpMeasure, eps: f64, target: Target, q: &QuadConfig) -> Result<(f64, f64, f64)> {
    if k.is_none() {
        return Ok((0.0, 0.0, 0.0));
    }
    let rate = k.mass_beyond(eps);
    let (comp, small) = match target {
        Target::X => (
            k.integrate_beyond(|x| x, eps, q),
            small_jump_variance(k, eps, q),
        ),
        Target::YHat => (
            k.integrate_beyond(|x| (-x).exp_m1(), eps, q),
            k.integrate_within(|x| (-x).exp_m1().powi(2), eps, q),
        ),
    };
    if !comp.finite {
        return Err(Error::Numerical(
            "compensator of the simulated jumps is not finite".into(),
        ));
    }
    Ok((rate, comp.value, small))
}

fn rng_for(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

fn mesh(horizon: f64, n: usize, stride: usize) -> Vec<f64> {
    let m = n / stride;
    (0..=m)
        .map(|k| if k == m { horizon } else { horizon * (k * stride) as f64 / n as f64 })
        .collect()
}

/// Simulates paths of `X` on `[0, horizon]`.
pub fn simulate_x<C: Characteristics + ?Sized>(model: &C, horizon: f64, cfg: &McConfig) -> Result<PathBatch> {
    cfg.validate()?;
    let n = cfg.steps_to(horizon)?;
    let dt = horizon / n as f64;
    let plan = Plan::build(model, n, dt, cfg, Target::X)?;
    let stride = cfg.record_every;
    let time_mesh = mesh(horizon, n, stride);
    let m = time_mesh.len();
    let mut values = vec![0.0; cfg.n_paths * m];
    values.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let mut rng = rng_for(cfg.seed, i);
        let mut x = 0.0;
        for k in 0..n {
            x += plan.increment(k, &mut rng);
            if (k + 1) % stride == 0 {
                row[(k + 1) / stride] = x;
            }
        }
    });
    Ok(PathBatch {
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        time_mesh,
        values,
        kind: PathKind::XPath,
        clamped: 0,
        warnings: plan.warnings,
    })
}

/// `I_t = ∫_0^t e^{-X_s} ds` per path, trapezoid over the recorded mesh.
pub fn exp_functional(batch: &PathBatch) -> Result<PathBatch> {
    if batch.kind != PathKind::XPath {
        return Err(Error::Precondition("exp_functional needs a batch of X paths".into()));
    }
    if batch.time_mesh.len() < 2 {
        return Err(Error::Domain("time mesh has no interval to integrate over".into()));
    }
    let t = &batch.time_mesh;
    let values = (0..batch.n_paths)
        .into_par_iter()
        .map(|i| {
            let row = batch.row(i);
            let mut acc = 0.0;
            let mut prev = (-row[0]).exp();
            for k in 1..row.len() {
                let cur = (-row[k]).exp();
                acc += 0.5 * (t[k] - t[k - 1]) * (prev + cur);
                prev = cur;
            }
            acc
        })
        .collect();
    Ok(PathBatch {
        seed: batch.seed,
        n_paths: batch.n_paths,
        time_mesh: vec![*t.last().expect("nonempty mesh")],
        values,
        kind: PathKind::FunctionalSamples,
        clamped: 0,
        warnings: batch.warnings.clone(),
    })
}

/// Samples of `I_horizon` without storing paths; for `record_every = 1`
/// the result equals `exp_functional(simulate_x(..))` bit for bit.
pub fn simulate_functional<C: Characteristics + ?Sized>(model: &C, horizon: f64, cfg: &McConfig) -> Result<PathBatch> {
    cfg.validate()?;
    let n = cfg.steps_to(horizon)?;
    let dt = horizon / n as f64;
    let plan = Plan::build(model, n, dt, cfg, Target::X)?;
    let grid = mesh(horizon, n, 1);
    let values = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(cfg.seed, i);
            let mut x = 0.0;
            let mut acc = 0.0;
            let mut prev = 1.0;
            for k in 0..n {
                x += plan.increment(k, &mut rng);
                let cur = (-x).exp();
                acc += 0.5 * (grid[k + 1] - grid[k]) * (prev + cur);
                prev = cur;
            }
            acc
        })
        .collect();
    Ok(PathBatch {
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        time_mesh: vec![horizon],
        values,
        kind: PathKind::FunctionalSamples,
        clamped: 0,
        warnings: plan.warnings,
    })
}

/// Euler scheme for `dV = V_{s-} dŶ_s + ds`, `V_0 = 0`, on `[0, t_fix]`.
pub fn simulate_v_sde<M: Characteristics>(rev: &ReversedModel<M>, cfg: &McConfig) -> Result<PathBatch> {
    simulate_v_sde_from(rev, rev.t_fix(), 0.0, cfg)
}

/// Euler scheme for `V` driven by the triplet of `chars`, started at `v0`.
pub fn simulate_v_sde_from<C: Characteristics + ?Sized>(
    chars: &C,
    horizon: f64,
    v0: f64,
    cfg: &McConfig,
) -> Result<PathBatch> {
    cfg.validate()?;
    let n = cfg.steps_to(horizon)?;
    let dt = horizon / n as f64;
    let plan = Plan::build(chars, n, dt, cfg, Target::YHat)?;
    run_v(plan, horizon, n, v0, cfg, |plan, k, v, rng| {
        let next = v * (1.0 + plan.increment(k, rng)) + plan.dt;
        if next < 0.0 {
            (0.0, true)
        } else {
            (next, false)
        }
    })
}

/// `V` from increments of the reversed process through the exact recursion
/// `V_{n+1} = e^{-ΔY} V_n + Δ/2 (e^{-ΔY} + 1)`; `V_t` has the law of `I_t`.
pub fn simulate_v_pathwise<M: Characteristics>(rev: &ReversedModel<M>, cfg: &McConfig) -> Result<PathBatch> {
    simulate_v_pathwise_from(rev, rev.t_fix(), 0.0, cfg)
}

pub fn simulate_v_pathwise_from<C: Characteristics + ?Sized>(
    chars: &C,
    horizon: f64,
    v0: f64,
    cfg: &McConfig,
) -> Result<PathBatch> {
    cfg.validate()?;
    let n = cfg.steps_to(horizon)?;
    let dt = horizon / n as f64;
    let plan = Plan::build(chars, n, dt, cfg, Target::X)?;
    run_v(plan, horizon, n, v0, cfg, |plan, k, v, rng| {
        let e = (-plan.increment(k, rng)).exp();
        (e * v + 0.5 * plan.dt * (e + 1.0), false)
    })
}

fn run_v<F>(plan: Plan, horizon: f64, n: usize, v0: f64, cfg: &McConfig, step: F) -> Result<PathBatch>
where
    F: Fn(&Plan, usize, f64, &mut ChaCha8Rng) -> (f64, bool) + Sync,
{
    if !(v0 >= 0.0) {
        return Err(Error::Domain(format!("V must start at a nonnegative value, got {v0}")));
    }
    let stride = cfg.record_every;
    let time_mesh = mesh(horizon, n, stride);
    let m = time_mesh.len();
    let mut values = vec![0.0; cfg.n_paths * m];
    let clamped: usize = values
        .par_chunks_mut(m)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = rng_for(cfg.seed, i);
            let mut v = v0;
            let mut clamps = 0;
            row[0] = v0;
            for k in 0..n {
                let (next, clamped) = step(&plan, k, v, &mut rng);
                clamps += clamped as usize;
                v = next;
                if (k + 1) % stride == 0 {
                    row[(k + 1) / stride] = v;
                }
            }
            clamps
        })
        .sum();
    Ok(PathBatch {
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        time_mesh,
        values,
        kind: PathKind::VPath,
        clamped,
        warnings: plan.warnings,
    })
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule on the log-samples.
    Auto,
    Fixed(f64),
}

/// Kernel estimate of the density of a positive sample.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityEstimate {
    Density {
        y: Vec<f64>,
        p: Vec<f64>,
        /// Bandwidth in log-space.
        bandwidth: f64,
    },
    /// Every sample equals `at`.
    Degenerate { at: f64 },
}

impl DensityEstimate {
    pub fn values(&self) -> Option<&[f64]> {
        match self {
            DensityEstimate::Density { p, .. } => Some(p),
            DensityEstimate::Degenerate { .. } => None,
        }
    }
}

/// Smallest sample count accepted by [`estimate_density`].
pub const MIN_KDE_SAMPLES: usize = 1000;

/// Gaussian kernel estimate of `log I`, mapped back: `p(y) = g(ln y) / y`.
pub fn estimate_density(samples: &[f64], grid: &[f64], bandwidth: Bandwidth) -> Result<DensityEstimate> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::Precondition(format!(
            "density estimation needs at least {MIN_KDE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("samples must be positive and finite, found {bad}")));
    }
    if let Some(bad) = grid.iter().find(|y| !(**y > 0.0)) {
        return Err(Error::Domain(format!("grid must be positive, found {bad}")));
    }
    let mut logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    logs.sort_by(|a, b| a.total_cmp(b));
    let (lo, hi) = (logs[0], logs[logs.len() - 1]);
    if hi - lo <= 1e-14 * lo.abs().max(1.0) {
        return Ok(DensityEstimate::Degenerate { at: samples[0] });
    }
    let n = logs.len() as f64;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(Error::Domain(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Auto => {
            let mean = logs.iter().sum::<f64>() / n;
            let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let q = |p: f64| logs[((n - 1.0) * p).round() as usize];
            let iqr = (q(0.75) - q(0.25)) / 1.34;
            let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
            0.9 * spread * n.powf(-0.2)
        }
    };
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 8.0 * h;
    let p = grid
        .par_iter()
        .map(|&y| {
            let l = y.ln();
            let a = logs.partition_point(|v| *v < l - reach);
            let b = logs.partition_point(|v| *v <= l + reach);
            let g: f64 = logs[a..b]
                .iter()
                .map(|v| {
                    let u = (l - v) / h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            g * norm / y
        })
        .collect();
    Ok(DensityEstimate::Density {
        y: grid.to_vec(),
        p,
        bandwidth: h,
    })
}

/// Kolmogorov–Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_survival((s + 0.12 + 0.11 / s) * d)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("KS test needs two nonempty samples".into()));
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, na * nb / (na + nb)),
    })
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::Precondition("KS test needs a nonempty sample".into()));
    }
    let s = sorted(samples);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
    })
}
