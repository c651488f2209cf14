//! Compact Kähler models `M = ∏_j CP^{n_j}` with Fubini–Study data scaled by
//! the bundle multidegree `ℓ_j`.
//!
//! Points are stored as unit homogeneous vectors per factor. Tangent vectors
//! at a point are represented by their horizontal lifts at the stored
//! representative: flat complex vectors orthogonal (per factor) to `z^{(j)}`.
//! With this representation
//!
//! - `B(u, v) = Σ_j 2ℓ_j Re⟨u_j, v_j⟩`,
//! - `J u = i·u`,
//! - `ω(u, v) = B(Ju, v) = −Σ_j 2ℓ_j Im⟨u_j, v_j⟩`,
//!
//! so that `ω` is `ℓ_j` times the Fubini–Study form of class `2π·[H]` and the
//! curvature of `L = O(ℓ)` is `−iω` (checked by [`check_prequantum`]).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{cdot, cnorm_sqr, det, monte_carlo, Estimate, QuadConfig, C64};
use crate::{Error, Result};

/// Serialized form of a [`Model`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub factors: Vec<usize>,
    pub bundle_degrees: Vec<i64>,
}

/// A product of projective spaces with a line-bundle multidegree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub struct Model {
    /// Complex dimensions `n_j` of the factors.
    pub factors: Vec<usize>,
    /// Multidegree `ℓ_j ≥ 1` of the prequantum bundle.
    pub bundle_degrees: Vec<i64>,
    /// True iff every `n_j + 1` is even, so `√K` is an honest line bundle.
    pub metaplectic_allowed: bool,
}

impl TryFrom<ModelSpec> for Model {
    type Error = Error;
    fn try_from(s: ModelSpec) -> Result<Model> {
        make_model(&s.factors, &s.bundle_degrees)
    }
}

impl From<Model> for ModelSpec {
    fn from(m: Model) -> ModelSpec {
        ModelSpec {
            factors: m.factors,
            bundle_degrees: m.bundle_degrees,
        }
    }
}

/// Build a model from factor dimensions and bundle degrees.
pub fn make_model(factors: &[usize], bundle_degrees: &[i64]) -> Result<Model> {
    if factors.is_empty() {
        return Err(Error::Config("model: factor list is empty".into()));
    }
    if factors.len() != bundle_degrees.len() {
        return Err(Error::Config(format!(
            "model: {} factors but {} bundle degrees",
            factors.len(),
            bundle_degrees.len()
        )));
    }
    if let Some(j) = factors.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "model: factor {j} has dimension 0"
        )));
    }
    if let Some(j) = bundle_degrees.iter().position(|&l| l < 1) {
        return Err(Error::Config(format!(
            "model: bundle degree {} of factor {j} is not positive",
            bundle_degrees[j]
        )));
    }
    Ok(Model {
        factors: factors.to_vec(),
        bundle_degrees: bundle_degrees.to_vec(),
        metaplectic_allowed: factors.iter().all(|n| (n + 1) % 2 == 0),
    })
}

impl Model {
    /// Total complex dimension `n = Σ n_j`.
    pub fn dim(&self) -> usize {
        self.factors.iter().sum()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    /// Number of homogeneous coordinates `Σ (n_j + 1)`.
    pub fn num_coords(&self) -> usize {
        self.factors.iter().map(|n| n + 1).sum()
    }

    /// Offset of factor `j`'s block in flat coordinate vectors.
    pub fn offset(&self, j: usize) -> usize {
        self.factors[..j].iter().map(|n| n + 1).sum()
    }

    /// Range of flat indices belonging to factor `j`.
    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        let o = self.offset(j);
        o..o + self.factors[j] + 1
    }

    /// Factor owning flat coordinate `i`.
    pub fn factor_of(&self, i: usize) -> usize {
        let mut acc = 0;
        for (j, n) in self.factors.iter().enumerate() {
            acc += n + 1;
            if i < acc {
                return j;
            }
        }
        panic!("coordinate index {i} out of range")
    }

    pub fn degree(&self, j: usize) -> f64 {
        self.bundle_degrees[j] as f64
    }

    /// Degree of the section bundle per factor: `kℓ_j`, or `kℓ_j − (n_j+1)/2`
    /// for the half-form twist.
    pub fn section_degrees(&self, k: u32, halfform: bool) -> Result<Vec<i64>> {
        if halfform && !self.metaplectic_allowed {
            return Err(Error::Config(
                "metaplectic parity: half-form twist needs every n_j odd".into(),
            ));
        }
        self.factors
            .iter()
            .zip(&self.bundle_degrees)
            .map(|(&n, &l)| {
                let d = k as i64 * l - if halfform { (n as i64 + 1) / 2 } else { 0 };
                if d < 0 {
                    Err(Error::Config(format!(
                        "section degree {d} is negative at k={k}"
                    )))
                } else {
                    Ok(d)
                }
            })
            .collect()
    }
}

/// A point of `M` in homogeneous coordinates, unit-normalized per factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointM {
    pub coords: Vec<Vec<C64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chart_hint: Option<Vec<usize>>,
}

impl PointM {
    /// Normalize the given homogeneous coordinates (the representative's
    /// phase is kept).
    pub fn new(model: &Model, coords: Vec<Vec<C64>>) -> Result<PointM> {
        if coords.len() != model.num_factors() {
            return Err(Error::Invalid(format!(
                "point has {} factors, model has {}",
                coords.len(),
                model.num_factors()
            )));
        }
        let mut out = Vec::with_capacity(coords.len());
        for (j, z) in coords.into_iter().enumerate() {
            if z.len() != model.factors[j] + 1 {
                return Err(Error::Invalid(format!(
                    "factor {j} has {} coordinates, expected {}",
                    z.len(),
                    model.factors[j] + 1
                )));
            }
            let n = cnorm_sqr(&z).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Invalid(format!(
                    "degenerate coordinates in factor {j}"
                )));
            }
            out.push(z.into_iter().map(|c| c / n).collect());
        }
        Ok(PointM {
            coords: out,
            chart_hint: None,
        })
    }

    /// Build from real/imaginary parts of a flat coordinate vector.
    pub fn from_flat(model: &Model, flat: &[C64]) -> Result<PointM> {
        if flat.len() != model.num_coords() {
            return Err(Error::Invalid(format!(
                "expected {} homogeneous coordinates, got {}",
                model.num_coords(),
                flat.len()
            )));
        }
        let coords = (0..model.num_factors())
            .map(|j| flat[model.block(j)].to_vec())
            .collect();
        PointM::new(model, coords)
    }

    /// Real points with `|z_i|² = p_i` (toric representative).
    pub fn from_moduli(model: &Model, p: &[f64]) -> Result<PointM> {
        let flat: Vec<C64> = p.iter().map(|x| C64::new(x.max(0.0).sqrt(), 0.0)).collect();
        PointM::from_flat(model, &flat)
    }

    pub fn flat(&self) -> Vec<C64> {
        self.coords.iter().flatten().copied().collect()
    }

    /// `|z_i|²` for all homogeneous coordinates.
    pub fn moduli(&self) -> Vec<f64> {
        self.coords.iter().flatten().map(|c| c.norm_sqr()).collect()
    }

    /// Representative with the first nonzero coordinate of each factor real
    /// and positive.
    pub fn canonical(&self) -> PointM {
        let coords = self
            .coords
            .iter()
            .map(|z| {
                let lead = z.iter().find(|c| c.norm() > 1e-14).copied().unwrap_or(C64::new(1.0, 0.0));
                let ph = lead.conj() / lead.norm();
                z.iter().map(|c| c * ph).collect()
            })
            .collect();
        PointM {
            coords,
            chart_hint: self.chart_hint.clone(),
        }
    }

    /// Fubini–Study chordal distance `sqrt(Σ_j (1 − |⟨z_j, w_j⟩|²))`,
    /// evaluated as the norm of the projection residual `z_j − ⟨z_j,w_j⟩w_j`
    /// to avoid cancellation near 0.
    pub fn distance(&self, other: &PointM) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| {
                let c = cdot(a, b);
                a.iter().zip(b).map(|(x, y)| (x - c * y).norm_sqr()).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_point(&self, other: &PointM, tol: f64) -> bool {
        self.distance(other) < tol
    }

    /// Affine chart per factor: the hint if present, else the largest
    /// coordinate.
    pub fn charts(&self) -> Vec<usize> {
        if let Some(h) = &self.chart_hint {
            return h.clone();
        }
        self.coords
            .iter()
            .map(|z| {
                let mut best = 0;
                for (i, c) in z.iter().enumerate() {
                    if c.norm_sqr() > z[best].norm_sqr() {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// A random point from the unitarily invariant distribution.
    pub fn random<R: Rng + ?Sized>(model: &Model, rng: &mut R) -> PointM {
        let coords = model
            .factors
            .iter()
            .map(|&n| {
                (0..=n)
                    .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                    .collect()
            })
            .collect();
        PointM::new(model, coords).expect("gaussian coordinates are nondegenerate")
    }
}

/// Horizontal projection of a flat vector at `point`: per factor
/// `v − ⟨v, z⟩ z`.
pub fn horizontal(point: &PointM, v: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(v.len());
    let mut o = 0;
    for z in &point.coords {
        let vj = &v[o..o + z.len()];
        let c = cdot(vj, z);
        out.extend(vj.iter().zip(z).map(|(a, b)| a - c * b));
        o += z.len();
    }
    out
}

/// Riemannian metric on horizontal lifts.
pub fn metric_b(model: &Model, u: &[C64], v: &[C64]) -> f64 {
    (0..model.num_factors())
        .map(|j| {
            let r = model.block(j);
            2.0 * model.degree(j) * cdot(&u[r.clone()], &v[r]).re
        })
        .sum()
}

/// Kähler form on horizontal lifts.
pub fn omega(model: &Model, u: &[C64], v: &[C64]) -> f64 {
    (0..model.num_factors())
        .map(|j| {
            let r = model.block(j);
            -2.0 * model.degree(j) * cdot(&u[r.clone()], &v[r]).im
        })
        .sum()
}

/// Complex structure on horizontal lifts.
pub fn apply_j(u: &[C64]) -> Vec<C64> {
    u.iter().map(|c| c * C64::i()).collect()
}

/// Affine chart coordinates `w = (z_i / z_a)_{i≠a}` per factor, flattened.
pub fn chart_coords(point: &PointM, charts: &[usize]) -> Vec<C64> {
    let mut w = Vec::new();
    for (z, &a) in point.coords.iter().zip(charts) {
        for (i, c) in z.iter().enumerate() {
            if i != a {
                w.push(c / z[a]);
            }
        }
    }
    w
}

/// Unnormalized chart lift `Z̃(w)` with `Z̃_a = 1` in each factor.
pub fn chart_lift(model: &Model, charts: &[usize], w: &[C64]) -> Vec<Vec<C64>> {
    let mut it = w.iter();
    model
        .factors
        .iter()
        .zip(charts)
        .map(|(&n, &a)| {
            (0..=n)
                .map(|i| if i == a { C64::new(1.0, 0.0) } else { *it.next().expect("chart length") })
                .collect()
        })
        .collect()
}

/// The point with chart coordinates `w`.
pub fn point_from_chart(model: &Model, charts: &[usize], w: &[C64]) -> PointM {
    let mut p = PointM::new(model, chart_lift(model, charts, w)).expect("chart lift is nondegenerate");
    p.chart_hint = Some(charts.to_vec());
    p
}

/// Real tangent basis, metric, symplectic form and complex structure at a
/// point, expressed in the affine chart basis `∂x_b, ∂y_b`.
#[derive(Debug, Clone)]
pub struct ChartFrame {
    pub base: PointM,
    pub charts: Vec<usize>,
    /// Horizontal lifts of `∂x_1, ∂y_1, ∂x_2, …`.
    pub basis: Vec<Vec<C64>>,
    pub b: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    /// Matrix of `J` acting on coefficient vectors in `basis`.
    pub j: DMatrix<f64>,
}

/// Horizontal lifts of the chart basis vectors at `point` in the given
/// charts.
pub fn chart_basis(model: &Model, point: &PointM, charts: &[usize]) -> Vec<Vec<C64>> {
    let nc = model.num_coords();
    let mut basis = Vec::with_capacity(2 * model.dim());
    for (j, z) in point.coords.iter().enumerate() {
        let a = charts[j];
        let o = model.offset(j);
        for i in 0..z.len() {
            if i == a {
                continue;
            }
            for unit in [C64::new(1.0, 0.0), C64::i()] {
                let mut v = vec![C64::new(0.0, 0.0); nc];
                v[o + i] = z[a] * unit;
                basis.push(horizontal(point, &v));
            }
        }
    }
    basis
}

/// The frame at `point` in explicitly chosen charts.
pub fn frame_in_chart(model: &Model, point: &PointM, charts: &[usize]) -> Result<ChartFrame> {
    for (j, z) in point.coords.iter().enumerate() {
        if z[charts[j]].norm() < 1e-300 {
            return Err(Error::Invalid(format!(
                "chart {} of factor {j} does not contain the point",
                charts[j]
            )));
        }
    }
    let basis = chart_basis(model, point, charts);
    let b = crate::numerics::gram(&basis, |u, v| metric_b(model, u, v));
    let om = crate::numerics::gram(&basis, |u, v| omega(model, u, v));
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("metric is not positive definite".into()))?;
    let n2 = basis.len();
    let mut jm = DMatrix::zeros(n2, n2);
    for (c, e) in basis.iter().enumerate() {
        let je = apply_j(e);
        let rhs = DVector::from_fn(n2, |l, _| metric_b(model, &basis[l], &je));
        let col = chol.solve(&rhs);
        jm.set_column(c, &col);
    }
    Ok(ChartFrame {
        base: point.clone(),
        charts: charts.to_vec(),
        basis,
        b,
        omega: om,
        j: jm,
    })
}

/// The frame at `point` in its preferred charts.
pub fn frame_at(model: &Model, point: &PointM) -> Result<ChartFrame> {
    frame_in_chart(model, point, &point.charts())
}

impl ChartFrame {
    /// Largest deviation among the compatibility identities
    /// `J² = −I`, `B = Bᵀ`, `ω = −ωᵀ`, `ω(u,v) = B(Ju,v)`.
    pub fn compatibility_residual(&self) -> f64 {
        let n = self.b.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        let j2 = &self.j * &self.j + &id;
        let bsym = &self.b - self.b.transpose();
        let wanti = &self.omega + self.omega.transpose();
        // ω(e_a, e_b) = B(J e_a, e_b) = (Jᵀ B)_{ab}
        let compat = &self.omega - self.j.transpose() * &self.b;
        [j2.amax(), bsym.amax(), wanti.amax(), compat.amax()]
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// `log √det B` in the chart basis: log of the Liouville density.
    pub fn log_volume_density(&self) -> f64 {
        0.5 * det(&self.b).ln()
    }
}

/// Monte Carlo estimate of `∫_M ω^n/n!` in the product of the 0-th affine
/// charts, with a heavy-tailed radial proposal per complex coordinate.
pub fn liouville_volume(model: &Model, quad: &QuadConfig) -> Result<Estimate> {
    quad.validate()?;
    let charts = vec![0usize; model.num_factors()];
    let n = model.dim();
    let est = monte_carlo(quad.samples, quad.seed, 1, |rng, out| {
        let mut w = Vec::with_capacity(n);
        let mut log_q = 0.0;
        for _ in 0..n {
            let u: f64 = rng.random();
            let r = ((1.0 - u).powi(-2) - 1.0).max(0.0).sqrt();
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            w.push(C64::from_polar(r, th));
            log_q += -(std::f64::consts::TAU).ln() - 1.5 * (1.0 + r * r).ln();
        }
        let p = point_from_chart(model, &charts, &w);
        let f = frame_in_chart(model, &p, &charts).expect("0-th chart contains the sample");
        out[0] = (f.log_volume_density() - log_q).exp();
    });
    Ok(est[0])
}

/// `−log` of the pointwise norm of the chart frame of `L^{⊗k}`, i.e.
/// `Σ_j kℓ_j log ‖Z̃_j(w)‖²` with the frame `∏ z_{a_j}^{kℓ_j}`.
fn frame_potential(model: &Model, k: u32, charts: &[usize], w: &[C64]) -> f64 {
    let lift = chart_lift(model, charts, w);
    lift.iter()
        .enumerate()
        .map(|(j, z)| {
            let frame_val = z[charts[j]].norm_sqr().powf(k as f64 * model.degree(j));
            let norm = cnorm_sqr(z).powf(k as f64 * model.degree(j));
            -(frame_val / norm).ln()
        })
        .sum()
}

fn real_to_complex(x: &[f64]) -> Vec<C64> {
    x.chunks(2).map(|c| C64::new(c[0], c[1])).collect()
}

fn complex_to_real(w: &[C64]) -> Vec<f64> {
    w.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Central-difference Hessian of a real function of real variables.
fn fd_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hm = DMatrix::zeros(n, n);
    let mut y = x.to_vec();
    for p in 0..n {
        for q in p..n {
            let mut val = 0.0;
            for (sp, sq, sgn) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                y.copy_from_slice(x);
                y[p] += sp * h;
                y[q] += sq * h;
                val += sgn * f(&y);
            }
            hm[(p, q)] = val / (4.0 * h * h);
            hm[(q, p)] = hm[(p, q)];
        }
    }
    hm
}

/// Curvature 2-form `i∂∂̄ψ` of the Hermitian metric of `L^{⊗k}` at `point`
/// from a finite-difference Hessian with Richardson refinement, in the chart
/// basis `∂x_1, ∂y_1, …`.
pub fn curvature_form(model: &Model, k: u32, point: &PointM, charts: &[usize], h: f64) -> DMatrix<f64> {
    let w0 = chart_coords(point, charts);
    let x0 = complex_to_real(&w0);
    let psi = |x: &[f64]| frame_potential(model, k, charts, &real_to_complex(x));
    let h1 = fd_hessian(&psi, &x0, h);
    let h2 = fd_hessian(&psi, &x0, h / 2.0);
    let hr = (h2 * 4.0 - h1) / 3.0;
    let n = w0.len();
    // ψ_{ab̄} = ¼(ψ_{x_a x_b} + ψ_{y_a y_b} + i(ψ_{x_a y_b} − ψ_{y_a x_b}))
    let mut cm = DMatrix::<C64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let (xa, ya, xb, yb) = (2 * a, 2 * a + 1, 2 * b, 2 * b + 1);
            cm[(a, b)] = C64::new(
                0.25 * (hr[(xa, xb)] + hr[(ya, yb)]),
                0.25 * (hr[(xa, yb)] - hr[(ya, xb)]),
            );
        }
    }
    let units = |p: usize| -> (usize, C64) {
        (p / 2, if p % 2 == 0 { C64::new(1.0, 0.0) } else { C64::i() })
    };
    DMatrix::from_fn(2 * n, 2 * n, |p, q| {
        let (a, ua) = units(p);
        let (b, ub) = units(q);
        -2.0 * (cm[(a, b)] * ua * ub.conj()).im
    })
}

/// Max-norm deviation between the finite-difference curvature of the
/// Hermitian metric on `L^{⊗k}` and `k·ω`, with the given step.
pub fn check_prequantum_with_step(model: &Model, k: u32, point: &PointM, h: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("check_prequantum: k must be at least 1".into()));
    }
    let charts = point.charts();
    let frame = frame_in_chart(model, point, &charts)?;
    let curv = curvature_form(model, k, point, &charts, h);
    Ok((curv - frame.omega * k as f64).amax())
}

/// [`check_prequantum_with_step`] with the default step `1e−4`.
pub fn check_prequantum(model: &Model, k: u32, point: &PointM) -> Result<f64> {
    check_prequantum_with_step(model, k, point, 1e-4)
}

/// A flow on `M` (time-`t` map), used for volume-distortion derivatives.
pub trait Flow: Sync {
    fn flow(&self, t: f64, point: &PointM) -> PointM;
}

/// The flow of the zero vector field.
pub struct ZeroFlow;

impl Flow for ZeroFlow {
    fn flow(&self, _t: f64, point: &PointM) -> PointM {
        point.clone()
    }
}

/// `log` of the Liouville volume distortion of the time-`t` map at `point`:
/// `log |det d(chart ∘ F_t ∘ chart⁻¹)| + log ε(F_t x) − log ε(x)` with the
/// chart Jacobian from central differences.
pub fn log_volume_distortion(model: &Model, flow: &dyn Flow, t: f64, point: &PointM) -> Result<f64> {
    let cx = point.charts();
    let y = flow.flow(t, point);
    let cy = {
        let mut q = y.clone();
        q.chart_hint = None;
        q.charts()
    };
    let w0 = complex_to_real(&chart_coords(point, &cx));
    let m = w0.len();
    let g = |x: &[f64]| -> Vec<f64> {
        let p = point_from_chart(model, &cx, &real_to_complex(x));
        let mut q = flow.flow(t, &p);
        q.chart_hint = None;
        complex_to_real(&chart_coords(&q, &cy))
    };
    let delta = 1e-5;
    let mut jac = DMatrix::zeros(m, m);
    let mut x = w0.clone();
    for c in 0..m {
        x[c] = w0[c] + delta;
        let fp = g(&x);
        x[c] = w0[c] - delta;
        let fm = g(&x);
        x[c] = w0[c];
        for r in 0..m {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * delta);
        }
    }
    let dj = det(&jac).abs();
    if !(dj > 0.0) {
        return Err(Error::Numerical("flow Jacobian is degenerate".into()));
    }
    let fx = frame_in_chart(model, point, &cx)?;
    let fy = frame_in_chart(model, &y, &cy)?;
    Ok(dj.ln() + fy.log_volume_density() - fx.log_volume_density())
}

/// Divergence `(L_V ε_ω)/ε_ω` at `point` of the generator of `flow`, as the
/// five-point central difference in `t` of the log volume distortion.
pub fn divergence_liouville(model: &Model, flow: &dyn Flow, point: &PointM) -> Result<f64> {
    let h = 1e-3;
    let l = |t: f64| log_volume_distortion(model, flow, t, point);
    Ok((8.0 * (l(h)? - l(-h)?) - (l(2.0 * h)? - l(-2.0 * h)?)) / (12.0 * h))
}
