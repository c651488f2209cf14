//! Shared numerical plumbing: complex vector helpers, exact integer linear
//! algebra for weight lattices, quadrature wrappers and deterministic Monte
//! Carlo reduction.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use num_integer::Integer;
use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = Complex64;

/// A value together with a one-sigma error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    pub fn new(value: f64, stderr: f64) -> Self {
        Estimate { value, stderr }
    }

    /// Product of two independent estimates (first-order error propagation).
    pub fn mul(self, other: Estimate) -> Estimate {
        Estimate {
            value: self.value * other.value,
            stderr: ((self.stderr * other.value).powi(2) + (other.stderr * self.value).powi(2))
                .sqrt(),
        }
    }

    pub fn scale(self, s: f64) -> Estimate {
        Estimate {
            value: self.value * s,
            stderr: self.stderr * s.abs(),
        }
    }

    /// Sum of independent estimates.
    pub fn add(self, other: Estimate) -> Estimate {
        Estimate {
            value: self.value + other.value,
            stderr: self.stderr.hypot(other.stderr),
        }
    }

    /// Number of combined standard deviations separating two estimates.
    pub fn z_score(self, other: Estimate) -> f64 {
        let s = self.stderr.hypot(other.stderr);
        let d = (self.value - other.value).abs();
        if s == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / s
        }
    }
}

/// Monte Carlo budget: sample count, seed and the requested relative error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_stderr_target")]
    pub stderr_target: f64,
    /// Gauss nodes for 1-dimensional stratum slices (deterministic part of
    /// stratified integrals).
    #[serde(default = "default_slice_nodes")]
    pub slice_nodes: usize,
}

fn default_slice_nodes() -> usize {
    96
}

fn default_stderr_target() -> f64 {
    1e-2
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            samples: 200_000,
            seed: 7,
            stderr_target: 1e-2,
            slice_nodes: default_slice_nodes(),
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("quadrature: sample budget is zero".into()));
        }
        if self.slice_nodes < 2 {
            return Err(Error::Config("quadrature: slice_nodes must be at least 2".into()));
        }
        if !(self.stderr_target > 0.0) {
            return Err(Error::Config(
                "quadrature: stderr_target must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hermitian inner product `Σ u_i conj(v_i)`.
pub fn cdot(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a * b.conj()).sum()
}

pub fn cnorm_sqr(u: &[C64]) -> f64 {
    u.iter().map(|a| a.norm_sqr()).sum()
}

/// Mix a base seed with a stream label (splitmix64 finalizer).
pub fn derive_seed(base: u64, label: u64) -> u64 {
    let mut z = base ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a string label into a seed stream id.
pub fn label_seed(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
}

const MC_BLOCK: usize = 4096;

/// Running first and second moments of a vector-valued sample stream.
#[derive(Debug, Clone)]
pub struct Moments {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(width: usize) -> Self {
        Moments {
            n: 0,
            sum: vec![0.0; width],
            sum_sq: vec![0.0; width],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (i, v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum_sq[i] += other.sum_sq[i];
        }
    }

    /// Sample means with their standard errors.
    pub fn estimates(&self) -> Vec<Estimate> {
        let n = self.n.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let mean = s / n;
                let var = (q / n - mean * mean).max(0.0);
                let se = if self.n > 1 {
                    (var / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                Estimate::new(mean, se)
            })
            .collect()
    }
}

/// Deterministic parallel Monte Carlo: `samples` draws of a vector-valued
/// estimator, split into fixed blocks with per-block RNG streams and reduced
/// in block order, so results do not depend on the worker count.
pub fn monte_carlo<F>(samples: usize, seed: u64, width: usize, draw: F) -> Vec<Estimate>
where
    F: Fn(&mut ChaCha8Rng, &mut Vec<f64>) + Sync,
{
    let blocks = samples.div_ceil(MC_BLOCK);
    let partial: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b as u64));
            let count = MC_BLOCK.min(samples - b * MC_BLOCK);
            let mut m = Moments::new(width);
            let mut buf = vec![0.0; width];
            for _ in 0..count {
                buf.iter_mut().for_each(|x| *x = 0.0);
                draw(&mut rng, &mut buf);
                m.push(&buf);
            }
            m
        })
        .collect();
    let mut total = Moments::new(width);
    for m in &partial {
        total.merge(m);
    }
    total.estimates()
}

/// Adaptive tanh–sinh quadrature on a finite interval.
pub fn integrate_de<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Estimate {
    if a == b {
        return Estimate::exact(0.0);
    }
    let out = quadrature::integrate(f, a, b, tol);
    Estimate::new(out.integral, out.error_estimate)
}

/// Integral of `f` over `[0, ∞)` assuming `f` decays (eventually
/// exponentially) at the scale `scale`: geometric panels of tanh–sinh
/// quadrature until a panel contributes negligibly.
pub fn integrate_half_line<F: Fn(f64) -> f64>(
    f: F,
    scale: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<Estimate> {
    let mut total = Estimate::exact(0.0);
    let mut lo = 0.0;
    let mut width = scale;
    let mut small = 0;
    for _ in 0..max_panels {
        let hi = lo + width;
        let part = integrate_de(&f, lo, hi, 1e-13 * (1.0 + total.value.abs()));
        total = Estimate::new(total.value + part.value, total.stderr + part.stderr);
        if part.value.abs() <= rel_tol * total.value.abs() {
            small += 1;
            if small >= 2 {
                return Ok(total);
            }
        } else {
            small = 0;
        }
        lo = hi;
        width *= 2.0;
    }
    Err(Error::Numerical(format!(
        "half-line quadrature did not converge after {max_panels} panels"
    )))
}

/// Gauss–Legendre rule with nodes remapped by `t = a + (b−a)(1−cos πu)/2`,
/// which clusters nodes at the endpoints and removes square-root endpoint
/// singularities. Returns `(node, weight)` pairs on `[a, b]`.
pub fn cosine_mapped_rule(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).expect("n >= 1"));
    rule.as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| {
            let u = 0.5 * (x + 1.0);
            let t = a + (b - a) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
            let dt = (b - a) * 0.5 * std::f64::consts::PI * (std::f64::consts::PI * u).sin() * 0.5;
            (t, w * dt)
        })
        .collect()
}

/// Vector-valued integral over `[a, b]` with the cosine-mapped rule at `n`
/// and `n/2` nodes; the difference is the error estimate.
pub fn integrate_vec_segment<F>(f: F, a: f64, b: f64, n: usize, width: usize) -> Vec<Estimate>
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    let eval = |rule: Vec<(f64, f64)>| -> Vec<f64> {
        let vals: Vec<(Vec<f64>, f64)> = rule.par_iter().map(|&(t, w)| (f(t), w)).collect();
        let mut acc = vec![0.0; width];
        for (v, w) in vals {
            for i in 0..width {
                acc[i] += w * v[i];
            }
        }
        acc
    };
    let fine = eval(cosine_mapped_rule(a, b, n));
    let coarse = eval(cosine_mapped_rule(a, b, (n / 2).max(1)));
    fine.iter()
        .zip(&coarse)
        .map(|(f, c)| Estimate::new(*f, (f - c).abs()))
        .collect()
}

/// Real symmetric determinant via LU.
pub fn det(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    m.clone().lu().determinant()
}

/// Gram matrix `G_ab = inner(v_a, v_b)`.
pub fn gram<T, F: Fn(&T, &T) -> f64>(vs: &[T], inner: F) -> DMatrix<f64> {
    let n = vs.len();
    DMatrix::from_fn(n, n, |i, j| inner(&vs[i], &vs[j]))
}

/// Orthonormal basis (Euclidean) of the row space of `rows`, dropping
/// numerically dependent rows.
pub fn orthonormal_rows(rows: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for q in &out {
                let c: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > tol {
            out.push(v.iter().map(|a| a / n).collect());
        }
    }
    out
}

pub type Q = Ratio<i128>;

/// Reduced row echelon form over ℚ; returns the matrix and pivot columns.
pub fn rref(mat: &[Vec<i64>]) -> (Vec<Vec<Q>>, Vec<usize>) {
    let mut m: Vec<Vec<Q>> = mat
        .iter()
        .map(|r| r.iter().map(|&x| Q::from_integer(x as i128)).collect())
        .collect();
    let rows = m.len();
    let cols = if rows == 0 { 0 } else { m[0].len() };
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r >= rows {
            break;
        }
        let Some(p) = (r..rows).find(|&i| m[i][c] != Q::from_integer(0)) else {
            continue;
        };
        m.swap(r, p);
        let inv = Q::from_integer(1) / m[r][c];
        for x in m[r].iter_mut() {
            *x *= inv;
        }
        for i in 0..rows {
            if i != r && m[i][c] != Q::from_integer(0) {
                let f = m[i][c];
                for j in 0..cols {
                    let v = m[r][j];
                    m[i][j] -= f * v;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    (m, pivots)
}

pub fn rank(mat: &[Vec<i64>]) -> usize {
    rref(mat).1.len()
}

/// Integer basis of the rational kernel `{x : mat·x = 0}` in ℤ^cols.
pub fn integer_kernel(mat: &[Vec<i64>], cols: usize) -> Vec<Vec<i64>> {
    let (m, pivots) = rref(mat);
    let free: Vec<usize> = (0..cols).filter(|c| !pivots.contains(c)).collect();
    free.iter()
        .map(|&f| {
            let mut v = vec![Q::from_integer(0); cols];
            v[f] = Q::from_integer(1);
            for (row, &p) in pivots.iter().enumerate() {
                v[p] = -m[row][f];
            }
            let l = v.iter().fold(1i128, |acc, q| acc.lcm(q.denom()));
            let ints: Vec<i128> = v.iter().map(|q| (q * Q::from_integer(l)).to_integer()).collect();
            let g = ints.iter().fold(0i128, |acc, x| acc.gcd(x)).max(1);
            ints.iter().map(|x| (x / g) as i64).collect()
        })
        .collect()
}

/// Exact integer determinant by fraction-free (Bareiss) elimination.
pub fn det_i128(m: &[Vec<i128>]) -> i128 {
    let n = m.len();
    if n == 0 {
        return 1;
    }
    let mut a = m.to_vec();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k][k] == 0 {
            let Some(p) = (k + 1..n).find(|&i| a[i][k] != 0) else {
                return 0;
            };
            a.swap(k, p);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, r, &mut Vec::new(), &mut out);
    out
}

/// gcd of all `r×r` minors of an integer matrix (0 if all vanish).
pub fn gcd_of_minors(mat: &[Vec<i64>], r: usize) -> i128 {
    if r == 0 {
        return 1;
    }
    let rows = mat.len();
    let cols = if rows == 0 { 0 } else { mat[0].len() };
    let mut g = 0i128;
    for rs in combinations(rows, r) {
        for cs in combinations(cols, r) {
            let sub: Vec<Vec<i128>> = rs
                .iter()
                .map(|&i| cs.iter().map(|&j| mat[i][j] as i128).collect())
                .collect();
            g = g.gcd(&det_i128(&sub));
            if g == 1 {
                return 1;
            }
        }
    }
    g
}

/// Solve `a x = b` for a small dense real system.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

/// Least-squares fit `y ≈ α + β x`; returns `(α, β, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (alpha, beta, r2)
}
