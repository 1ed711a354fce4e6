//! Log-spaced spatial grid, tridiagonal solves and isotonic projection.

use serde::Serialize;

use crate::error::{Error, Result};

/// Nodes `y_i = y_min · e^{i h}`, uniform in `z = ln y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceGrid {
    y: Vec<f64>,
    z: Vec<f64>,
    h: f64,
}

impl SpaceGrid {
    pub fn log_spaced(y_min: f64, y_max: f64, n: usize) -> Result<Self> {
        if !(y_min > 0.0) || !y_max.is_finite() {
            return Err(Error::Domain(format!("grid needs 0 < y_min and finite y_max, got {y_min}, {y_max}")));
        }
        if !(y_max / y_min >= 1e3) {
            return Err(Error::Config(format!(
                "grid must span at least three decades, got [{y_min}, {y_max}]"
            )));
        }
        if n < 8 {
            return Err(Error::Config(format!("grid needs at least 8 nodes, got {n}")));
        }
        let (z0, z1) = (y_min.ln(), y_max.ln());
        let h = (z1 - z0) / (n - 1) as f64;
        let z: Vec<f64> = (0..n).map(|i| if i == n - 1 { z1 } else { z0 + h * i as f64 }).collect();
        let y = z
            .iter()
            .enumerate()
            .map(|(i, z)| match i {
                0 => y_min,
                _ if i == n - 1 => y_max,
                _ => z.exp(),
            })
            .collect();
        Ok(Self { y, z, h })
    }

    /// Same span with the spacing halved.
    pub fn refined(&self) -> Self {
        Self::log_spaced(self.y_min(), self.y_max(), 2 * self.len() - 1).expect("refining a valid grid")
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn z(&self) -> &[f64] {
        &self.z
    }
    /// Spacing in `ln y`.
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn len(&self) -> usize {
        self.y.len()
    }
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
    pub fn y_min(&self) -> f64 {
        self.y[0]
    }
    pub fn y_max(&self) -> f64 {
        self.y[self.y.len() - 1]
    }

    /// Index of the node nearest to `y`.
    pub fn nearest(&self, y: f64) -> usize {
        let k = ((y.ln() - self.z[0]) / self.h).round();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    /// `∫ p dy` computed as the trapezoid rule in `z` on `y·p`.
    pub fn mass(&self, p: &[f64]) -> f64 {
        let q: Vec<f64> = p.iter().zip(&self.y).map(|(p, y)| p * y).collect();
        trapezoid(&q, self.h)
    }

    /// Running trapezoid integral `∫_{y_min}^{y_i} p dy`, again in `z`.
    pub fn cumulative(&self, p: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(p.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..p.len() {
            acc += 0.5 * self.h * (p[i - 1] * self.y[i - 1] + p[i] * self.y[i]);
            out.push(acc);
        }
        out
    }

    /// Linear interpolation in `z` of nodal `values`, with constants outside.
    pub fn interpolate(&self, values: &[f64], y: f64, below: f64, above: f64) -> f64 {
        let s = (y.ln() - self.z[0]) / self.h;
        if s < 0.0 {
            return below;
        }
        let n = self.len();
        if s > (n - 1) as f64 {
            return above;
        }
        let i = (s.floor() as usize).min(n - 2);
        let f = s - i as f64;
        (1.0 - f) * values[i] + f * values[i + 1]
    }
}

pub fn trapezoid(v: &[f64], h: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv == 0.0 || !piv.is_finite() {
        return Err(Error::Numerical("singular tridiagonal system".into()));
    }
    c[0] = upper[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::Numerical("singular tridiagonal system".into()));
        }
        c[i] = if i + 1 < n { upper[i] / piv } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Least-squares nondecreasing fit (pool adjacent violators). Returns the
/// projection and its sup-norm distance to the input.
pub fn isotonic(values: &[f64]) -> (Vec<f64>, f64) {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().expect("two blocks") = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    let out: Vec<f64> = blocks.iter().flat_map(|&(m, n)| std::iter::repeat_n(m, n)).collect();
    let dist = out.iter().zip(values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (out, dist)
}
