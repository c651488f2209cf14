//! Hamiltonian torus actions on [`Model`]s given by integer weight matrices.
//!
//! Conventions (all checked by tests rather than assumed):
//! - `G = ℝ^d/ℤ^d` acts by `exp(θ)·z_i = e^{2πi⟨W_i,θ⟩} z_i`, so the unit
//!   torus has Haar volume 1 and `X^ξ = hp(2πi⟨W_i,ξ⟩ z_i)`.
//! - The imaginary flow is `e^{itξ}·z_i = e^{−2πt⟨W_i,ξ⟩} z_i`, the flow of
//!   `JX^ξ`.
//! - `φ_ξ = −2π(Σ_j ℓ_j Σ_{i∈j} ⟨W_i,ξ⟩ |z_i|² − ⟨c,ξ⟩)` on unit
//!   representatives, which satisfies `dφ_ξ = ω(X^ξ, ·)` and
//!   `grad φ_ξ = JX^ξ`.

use nalgebra::DMatrix;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::kahler_models::{horizontal, metric_b, Flow, Model, PointM};
use crate::numerics::{
    cdot, cnorm_sqr, det, gcd_of_minors, integer_kernel, integrate_de, orthonormal_rows, rank, C64,
};
use crate::{Error, Result};

const TAU: f64 = std::f64::consts::TAU;

/// A rational number in JSON: integer, `"p/q"` string, or `[p, q]` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RationalSpec {
    Int(i64),
    Pair([i64; 2]),
    Text(String),
}

impl RationalSpec {
    pub fn to_ratio(&self) -> Result<Ratio<i64>> {
        match self {
            RationalSpec::Int(n) => Ok(Ratio::from_integer(*n)),
            RationalSpec::Pair([p, q]) => {
                if *q == 0 {
                    Err(Error::Config("shift: zero denominator".into()))
                } else {
                    Ok(Ratio::new(*p, *q))
                }
            }
            RationalSpec::Text(s) => {
                let (p, q) = match s.split_once('/') {
                    Some((p, q)) => (p.trim(), q.trim()),
                    None => (s.trim(), "1"),
                };
                let p: i64 = p.parse().map_err(|_| Error::Config(format!("shift: cannot parse {s:?}")))?;
                let q: i64 = q.parse().map_err(|_| Error::Config(format!("shift: cannot parse {s:?}")))?;
                RationalSpec::Pair([p, q]).to_ratio()
            }
        }
    }

    pub fn from_ratio(r: Ratio<i64>) -> RationalSpec {
        if *r.denom() == 1 {
            RationalSpec::Int(*r.numer())
        } else {
            RationalSpec::Text(format!("{}/{}", r.numer(), r.denom()))
        }
    }
}

/// Serialized form of a [`WeightAction`] (the model is given separately).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightActionSpec {
    pub rank: usize,
    /// One row per torus generator, one entry per homogeneous coordinate.
    pub weights: Vec<Vec<i64>>,
    pub shift: Vec<RationalSpec>,
}

/// A Hamiltonian torus action by weights `W` (d × Σ(n_j+1)) and moment
/// shift `c ∈ ℚ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAction {
    pub model: Model,
    pub rank: usize,
    pub weights: Vec<Vec<i64>>,
    pub shift: Vec<Ratio<i64>>,
}

impl WeightAction {
    pub fn new(model: Model, weights: Vec<Vec<i64>>, shift: Vec<Ratio<i64>>) -> Result<Self> {
        let d = weights.len();
        if d == 0 {
            return Err(Error::Config("action: torus rank must be at least 1".into()));
        }
        if let Some(r) = weights.iter().position(|row| row.len() != model.num_coords()) {
            return Err(Error::Config(format!(
                "action: weight row {r} has {} entries, expected {}",
                weights[r].len(),
                model.num_coords()
            )));
        }
        if shift.len() != d {
            return Err(Error::Config(format!(
                "action: shift has {} entries, expected {d}",
                shift.len()
            )));
        }
        Ok(WeightAction {
            model,
            rank: d,
            weights,
            shift,
        })
    }

    pub fn from_spec(model: Model, spec: &WeightActionSpec) -> Result<Self> {
        if spec.rank != spec.weights.len() {
            return Err(Error::Config(format!(
                "action: rank {} but {} weight rows",
                spec.rank,
                spec.weights.len()
            )));
        }
        let shift = spec.shift.iter().map(|s| s.to_ratio()).collect::<Result<Vec<_>>>()?;
        WeightAction::new(model, spec.weights.clone(), shift)
    }

    pub fn to_spec(&self) -> WeightActionSpec {
        WeightActionSpec {
            rank: self.rank,
            weights: self.weights.clone(),
            shift: self.shift.iter().map(|r| RationalSpec::from_ratio(*r)).collect(),
        }
    }

    /// Weight vector `W_i ∈ ℤ^d` of homogeneous coordinate `i`.
    pub fn weight(&self, i: usize) -> Vec<i64> {
        self.weights.iter().map(|row| row[i]).collect()
    }

    /// `⟨W_i, ξ⟩` for every homogeneous coordinate.
    pub fn pairing(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.model.num_coords())
            .map(|i| self.weights.iter().zip(xi).map(|(row, x)| row[i] as f64 * x).sum())
            .collect()
    }

    pub fn shift_f64(&self) -> Vec<f64> {
        self.shift.iter().map(|r| *r.numer() as f64 / *r.denom() as f64).collect()
    }

    /// Check `k·c ∈ ℤ^d` (the action lifts to `L^{⊗k}`).
    pub fn check_lift(&self, k: u32) -> Result<()> {
        for (a, c) in self.shift.iter().enumerate() {
            if !(c * Ratio::from_integer(k as i64)).is_integer() {
                return Err(Error::Config(format!(
                    "lift integrality: k·c_{a} = {k}·{c} is not an integer"
                )));
            }
        }
        Ok(())
    }

    /// Moment map value `φ(x) ∈ ℝ^d`.
    pub fn moment_map(&self, point: &PointM) -> Vec<f64> {
        moment_map(self, point)
    }
}

/// `Σ_j ℓ_j Σ_{i∈j} W_{a,i} p_i` for given moduli `p_i = |z_i|²/‖z_j‖²`.
pub fn weighted_mass(action: &WeightAction, p: &[f64]) -> Vec<f64> {
    let m = &action.model;
    (0..action.rank)
        .map(|a| {
            (0..m.num_factors())
                .map(|j| {
                    let r = m.block(j);
                    let tot: f64 = p[r.clone()].iter().sum();
                    m.degree(j) * r.map(|i| action.weights[a][i] as f64 * p[i]).sum::<f64>() / tot
                })
                .sum()
        })
        .collect()
}

/// Moment map `φ(x) = −2π(Σ_j ℓ_j Σ_i W_i |z_i|² − c)`.
pub fn moment_map(action: &WeightAction, point: &PointM) -> Vec<f64> {
    let mass = weighted_mass(action, &point.moduli());
    mass.iter()
        .zip(action.shift_f64())
        .map(|(m, c)| -TAU * (m - c))
        .collect()
}

/// `φ_ξ(x) = ⟨φ(x), ξ⟩`.
pub fn phi_xi(action: &WeightAction, xi: &[f64], point: &PointM) -> f64 {
    moment_map(action, point).iter().zip(xi).map(|(a, b)| a * b).sum()
}

/// Real torus action `exp(θ)·x`.
pub fn act(action: &WeightAction, theta: &[f64], point: &PointM) -> PointM {
    let w = action.pairing(theta);
    let flat: Vec<C64> = point
        .flat()
        .iter()
        .zip(&w)
        .map(|(z, wi)| z * C64::from_polar(1.0, TAU * wi))
        .collect();
    PointM::from_flat(&action.model, &flat).expect("torus action preserves nondegeneracy")
}

/// Per-coordinate scale factors `D_i ∝ e^{−2πt⟨W_i,ξ⟩}`, normalized per
/// factor so the largest supported factor is 1 (log domain, overflow-safe).
fn flow_scales(action: &WeightAction, xi: &[f64], t: f64, point: &PointM) -> Vec<f64> {
    let m = &action.model;
    let w = action.pairing(xi);
    let flat = point.flat();
    let mut out = vec![0.0; flat.len()];
    for j in 0..m.num_factors() {
        let r = m.block(j);
        let mx = r
            .clone()
            .filter(|&i| flat[i].norm_sqr() > 0.0)
            .map(|i| -TAU * t * w[i])
            .fold(f64::NEG_INFINITY, f64::max);
        for i in r {
            out[i] = (-TAU * t * w[i] - mx).exp();
        }
    }
    out
}

/// Imaginary flow `e^{itξ}·x` in closed form.
pub fn imaginary_flow(action: &WeightAction, xi: &[f64], t: f64, point: &PointM) -> PointM {
    let d = flow_scales(action, xi, t, point);
    let flat: Vec<C64> = point.flat().iter().zip(&d).map(|(z, s)| z * s).collect();
    PointM::from_flat(&action.model, &flat).expect("imaginary flow preserves nondegeneracy")
}

/// Fundamental fields `(X^ξ, JX^ξ)` at `point` as horizontal lifts.
pub fn fundamental_fields(action: &WeightAction, xi: &[f64], point: &PointM) -> (Vec<C64>, Vec<C64>) {
    let w = action.pairing(xi);
    let v: Vec<C64> = point
        .flat()
        .iter()
        .zip(&w)
        .map(|(z, wi)| z * C64::new(0.0, TAU * wi))
        .collect();
    let x = horizontal(point, &v);
    let jx = x.iter().map(|c| c * C64::i()).collect();
    (x, jx)
}

/// The flow of `X^ξ` (real) or `JX^ξ` (imaginary) as a [`Flow`].
pub struct ActionFlow<'a> {
    pub action: &'a WeightAction,
    pub xi: Vec<f64>,
    pub imaginary: bool,
}

impl Flow for ActionFlow<'_> {
    fn flow(&self, t: f64, point: &PointM) -> PointM {
        if self.imaginary {
            imaginary_flow(self.action, &self.xi, t, point)
        } else {
            let th: Vec<f64> = self.xi.iter().map(|x| x * t).collect();
            act(self.action, &th, point)
        }
    }
}

/// Stabilizer data of a point (or of a support pattern).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropyDescriptor {
    /// Integer basis of the isotropy subalgebra `𝔥 ⊂ ℝ^d`.
    pub algebra_basis: Vec<Vec<i64>>,
    /// Order of the finite component group of the stabilizer.
    pub finite_part: u64,
    /// True when `𝔥 = 𝔤` (the point is fixed by the whole torus).
    pub is_full: bool,
    /// Orthonormal basis of `𝔪 = 𝔥^⊥`.
    pub m_basis: Vec<Vec<f64>>,
    /// Covolume of the lattice `ℤ^d ∩ 𝔥` (1 when `𝔥` is 0 or all of `𝔤`).
    pub lattice_covolume: f64,
}

impl IsotropyDescriptor {
    pub fn dim_h(&self) -> usize {
        self.algebra_basis.len()
    }

    pub fn dim_m(&self) -> usize {
        self.m_basis.len()
    }

    /// Same subalgebra and finite part.
    pub fn same_type(&self, other: &IsotropyDescriptor) -> bool {
        if self.finite_part != other.finite_part || self.dim_h() != other.dim_h() {
            return false;
        }
        let mut stacked = self.algebra_basis.clone();
        stacked.extend(other.algebra_basis.iter().cloned());
        rank(&stacked) == self.dim_h()
    }
}

/// Support pattern of a point: `|z_i| > tol`.
pub fn support_of(point: &PointM, tol: f64) -> Vec<bool> {
    point.flat().iter().map(|c| c.norm() > tol).collect()
}

/// Effective weight differences on a support pattern: rows
/// `W_i − W_{i0(j)}` for supported `i ≠ i0(j)` in each factor.
pub fn support_differences(action: &WeightAction, support: &[bool]) -> Vec<Vec<i64>> {
    let m = &action.model;
    let mut rows = Vec::new();
    for j in 0..m.num_factors() {
        let idx: Vec<usize> = m.block(j).filter(|&i| support[i]).collect();
        if let Some((&i0, rest)) = idx.split_first() {
            let w0 = action.weight(i0);
            for &i in rest {
                rows.push(action.weight(i).iter().zip(&w0).map(|(a, b)| a - b).collect());
            }
        }
    }
    rows
}

/// Isotropy of any point with the given support pattern.
pub fn isotropy_of_support(action: &WeightAction, support: &[bool]) -> IsotropyDescriptor {
    let d = action.rank;
    let dm = support_differences(action, support);
    let rho = rank(&dm);
    let finite_part = if rho == 0 { 1 } else { gcd_of_minors(&dm, rho) as u64 };
    let kernel = integer_kernel(&dm, d);
    let h = kernel.len();
    let covol = if h == 0 || h == d {
        1.0
    } else {
        let bf = DMatrix::from_fn(h, d, |r, c| kernel[r][c] as f64);
        let g = det(&(&bf * bf.transpose())).sqrt();
        g / gcd_of_minors(&kernel, h) as f64
    };
    let rows_f: Vec<Vec<f64>> = dm.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
    IsotropyDescriptor {
        algebra_basis: kernel,
        finite_part: finite_part.max(1),
        is_full: h == d,
        m_basis: orthonormal_rows(&rows_f, 1e-9),
        lattice_covolume: covol,
    }
}

/// Isotropy of a point, treating coordinates with `|z_i| ≤ tol` as zero.
pub fn isotropy_with_tol(action: &WeightAction, point: &PointM, tol: f64) -> IsotropyDescriptor {
    isotropy_of_support(action, &support_of(point, tol))
}

/// Isotropy of a point (coordinates below `1e−9` count as zero).
pub fn isotropy(action: &WeightAction, point: &PointM) -> IsotropyDescriptor {
    isotropy_with_tol(action, point, 1e-9)
}

/// Gram matrix `B(X^{m_a}, X^{m_b})` over the given basis of `𝔤` directions.
pub fn orbit_gram(action: &WeightAction, basis: &[Vec<f64>], point: &PointM) -> DMatrix<f64> {
    let xs: Vec<Vec<C64>> = basis.iter().map(|m| fundamental_fields(action, m, point).0).collect();
    crate::numerics::gram(&xs, |u, v| metric_b(&action.model, u, v))
}

/// Orbit volume with the full-isotropy flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitVolume {
    /// Riemannian volume of `G·x` (1 by convention when `H = G`).
    pub value: f64,
    /// `√det B(X^{m_a}, X^{m_b})` over an orthonormal basis of `𝔪`.
    pub gram_root: f64,
    pub is_full: bool,
}

/// Volume of the orbit through `point`.
///
/// The orbit is `G/H` with `G = ℝ^d/ℤ^d`; its Riemannian volume is
/// `√det Gram_𝔪 / (finite_part · covol(ℤ^d ∩ 𝔥))`, which reduces to the
/// plain Gram root when the stabilizer is connected and `ℤ^d ∩ 𝔥` is
/// unimodular.
pub fn orbit_volume(action: &WeightAction, point: &PointM) -> OrbitVolume {
    let iso = isotropy(action, point);
    orbit_volume_with(action, &iso, point)
}

/// [`orbit_volume`] with a precomputed isotropy descriptor.
pub fn orbit_volume_with(action: &WeightAction, iso: &IsotropyDescriptor, point: &PointM) -> OrbitVolume {
    if iso.is_full {
        return OrbitVolume {
            value: 1.0,
            gram_root: 1.0,
            is_full: true,
        };
    }
    let g = det(&orbit_gram(action, &iso.m_basis, point)).max(0.0).sqrt();
    OrbitVolume {
        value: g / (iso.finite_part as f64 * iso.lattice_covolume),
        gram_root: g,
        is_full: false,
    }
}

/// Complex-linear pushforward of horizontal vectors under `e^{iξ}`:
/// `v ↦ hp_y(D v)/‖D z‖` per factor, at the stored representative.
pub struct ImaginaryPushforward {
    pub target: PointM,
    scales: Vec<f64>,
    norms: Vec<f64>,
    blocks: Vec<std::ops::Range<usize>>,
}

impl ImaginaryPushforward {
    pub fn new(action: &WeightAction, xi: &[f64], point: &PointM) -> Self {
        let m = &action.model;
        let d = flow_scales(action, xi, 1.0, point);
        let flat = point.flat();
        let blocks: Vec<_> = (0..m.num_factors()).map(|j| m.block(j)).collect();
        let norms: Vec<f64> = blocks
            .iter()
            .map(|r| r.clone().map(|i| (flat[i] * d[i]).norm_sqr()).sum::<f64>().sqrt())
            .collect();
        let target = imaginary_flow(action, xi, 1.0, point);
        ImaginaryPushforward {
            target,
            scales: d,
            norms,
            blocks,
        }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        let mut dv: Vec<C64> = v.iter().zip(&self.scales).map(|(c, s)| c * s).collect();
        for (r, n) in self.blocks.iter().zip(&self.norms) {
            for i in r.clone() {
                dv[i] /= *n;
            }
        }
        horizontal(&self.target, &dv)
    }
}

/// Unitary (Hermitian-orthonormal) basis of the horizontal space of factor
/// block `r` at `z`, embedded in flat coordinates.
fn unitary_horizontal_basis(z: &[C64], offset: usize, total: usize) -> Vec<Vec<C64>> {
    let n = z.len();
    let mut out: Vec<Vec<C64>> = vec![z.to_vec()];
    for e in 0..n {
        let mut v = vec![C64::new(0.0, 0.0); n];
        v[e] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for q in &out {
                let c = cdot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nn = cnorm_sqr(&v).sqrt();
        if nn > 1e-8 && out.len() < n {
            out.push(v.iter().map(|c| c / nn).collect());
        }
    }
    out.into_iter()
        .skip(1)
        .map(|v| {
            let mut f = vec![C64::new(0.0, 0.0); total];
            f[offset..offset + n].copy_from_slice(&v);
            f
        })
        .collect()
}

/// Log of the Liouville volume distortion of `x ↦ e^{iξ}·x` at `point`,
/// i.e. `∫₀¹ div(JX^ξ)(e^{itξ}x) dt`, from the exact complex-linear
/// pushforward (`|det_ℂ|²` in unitary frames).
pub fn log_jacobian_imaginary(action: &WeightAction, xi: &[f64], point: &PointM) -> f64 {
    let m = &action.model;
    let pf = ImaginaryPushforward::new(action, xi, point);
    let total = m.num_coords();
    let mut acc = 0.0;
    for j in 0..m.num_factors() {
        let off = m.offset(j);
        let src = unitary_horizontal_basis(&point.coords[j], off, total);
        let dst = unitary_horizontal_basis(&pf.target.coords[j], off, total);
        let n = src.len();
        let mat = DMatrix::from_fn(n, n, |a, b| cdot(&pf.apply(&src[b]), &dst[a]));
        acc += mat.lu().determinant().norm_sqr().ln();
    }
    acc
}

/// B-orthonormal basis of the real span of `vecs`, dropping dependent ones.
fn b_orthonormalize(model: &Model, vecs: &[Vec<C64>], tol: f64) -> Vec<Vec<C64>> {
    let mut out: Vec<Vec<C64>> = Vec::new();
    for v0 in vecs {
        let mut v = v0.clone();
        for _ in 0..2 {
            for q in &out {
                let c = metric_b(model, &v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= b * c);
            }
        }
        let n = metric_b(model, &v, &v).max(0.0).sqrt();
        if n > tol {
            out.push(v.iter().map(|c| c / n).collect());
        }
    }
    out
}

/// B-orthonormal basis of `T_u S`: horizontal vectors supported on the
/// support of `u` and B-orthogonal to `JX^{𝔪}`.
pub fn slice_tangent_basis(action: &WeightAction, iso: &IsotropyDescriptor, point: &PointM) -> Vec<Vec<C64>> {
    let m = &action.model;
    let sup = support_of(point, 1e-9);
    let jx: Vec<Vec<C64>> = iso
        .m_basis
        .iter()
        .map(|e| fundamental_fields(action, e, point).1)
        .collect();
    let mut cands = jx.clone();
    let total = m.num_coords();
    for (i, &s) in sup.iter().enumerate() {
        if !s {
            continue;
        }
        for unit in [C64::new(1.0, 0.0), C64::i()] {
            let mut v = vec![C64::new(0.0, 0.0); total];
            v[i] = unit;
            cands.push(horizontal(point, &v));
        }
    }
    let ortho = b_orthonormalize(m, &cands, 1e-7);
    ortho.into_iter().skip(jx.len()).collect()
}

/// Coarea Jacobian `τ(ξ, u)` of `Λ(ξ, u) = e^{iξ}·u` relative to
/// `dvol(𝔪) ∧ dvol(S)`, with `ξ ∈ 𝔪` given in `ℝ^d` coordinates.
///
/// At `ξ = 0` this is `√det B(X^{m_a}, X^{m_b})`, the orbit Gram root.
pub fn jacobian_tau(action: &WeightAction, xi: &[f64], point: &PointM) -> Result<f64> {
    let iso = isotropy(action, point);
    jacobian_tau_with(action, &iso, &slice_tangent_basis(action, &iso, point), xi, point)
}

/// [`jacobian_tau`] with precomputed isotropy and slice tangent basis.
pub fn jacobian_tau_with(
    action: &WeightAction,
    iso: &IsotropyDescriptor,
    slice_basis: &[Vec<C64>],
    xi: &[f64],
    point: &PointM,
) -> Result<f64> {
    let pf = ImaginaryPushforward::new(action, xi, point);
    let mut vecs: Vec<Vec<C64>> = iso
        .m_basis
        .iter()
        .map(|e| fundamental_fields(action, e, &pf.target).1)
        .collect();
    vecs.extend(slice_basis.iter().map(|v| pf.apply(v)));
    let g = crate::numerics::gram(&vecs, |u, v| metric_b(&action.model, u, v));
    let dg = det(&g);
    if !(dg > 0.0) {
        return Err(Error::Numerical(
            "degenerate coarea differential (point not on the claimed stratum?)".into(),
        ));
    }
    Ok(dg.sqrt())
}

/// Value, gradient over `𝔪` and Hessian at zero of `f(ξ, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPotentialReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian_at_zero: Vec<Vec<f64>>,
}

/// `f(ξ, x) = 2∫₀¹ φ_ξ(e^{itξ}·x) dt` by adaptive quadrature.
pub fn flow_potential_value(action: &WeightAction, xi: &[f64], point: &PointM) -> Result<f64> {
    if xi.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let est = integrate_de(
        |t| 2.0 * phi_xi(action, xi, &imaginary_flow(action, xi, t, point)),
        0.0,
        1.0,
        1e-13,
    );
    if !est.value.is_finite() || est.stderr > 1e-8 * (1.0 + est.value.abs()) {
        return Err(Error::Numerical(format!(
            "flow potential quadrature did not converge (error {:.3e})",
            est.stderr
        )));
    }
    Ok(est.value)
}

/// `f(ξ, x)` through the fundamental theorem of calculus along the ray:
/// `2φ_ξ(e^{itξ}x) = d/dt Σ_j ℓ_j log‖D_t z_j‖² + 4π⟨c, ξ⟩`, so
/// `f = Σ_j ℓ_j log‖D_1 z_j‖² + 4π⟨c,ξ⟩` with `D_t = diag(e^{−2πt⟨W_i,ξ⟩})`.
/// Used in hot loops; agreement with [`flow_potential_value`] is tested.
pub fn flow_potential_telescoped(action: &WeightAction, xi: &[f64], point: &PointM) -> f64 {
    let m = &action.model;
    let w = action.pairing(xi);
    let flat = point.flat();
    let mut f = 0.0;
    for j in 0..m.num_factors() {
        let r = m.block(j);
        let lz: f64 = r.clone().map(|i| flat[i].norm_sqr()).sum();
        let exps: Vec<(f64, f64)> = r
            .filter(|&i| flat[i].norm_sqr() > 0.0)
            .map(|i| (-2.0 * TAU * w[i], flat[i].norm_sqr() / lz))
            .collect();
        let mx = exps.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = exps.iter().map(|(e, p)| p * (e - mx).exp()).sum();
        f += m.degree(j) * (mx + s.ln());
    }
    let c = action.shift_f64();
    f + 2.0 * TAU * c.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()
}

/// Full [`FlowPotentialReport`] over the `𝔪` of `point`'s isotropy.
pub fn flow_potential(action: &WeightAction, xi: &[f64], point: &PointM) -> Result<FlowPotentialReport> {
    let iso = isotropy(action, point);
    let value = flow_potential_value(action, xi, point)?;
    let shifted = |base: &[f64], dirs: &[(&Vec<f64>, f64)]| -> Vec<f64> {
        let mut x = base.to_vec();
        for (d, s) in dirs {
            for (xa, da) in x.iter_mut().zip(d.iter()) {
                *xa += s * da;
            }
        }
        x
    };
    let h = 1e-5;
    let mut gradient = Vec::new();
    for e in &iso.m_basis {
        let fp = flow_potential_value(action, &shifted(xi, &[(e, h)]), point)?;
        let fm = flow_potential_value(action, &shifted(xi, &[(e, -h)]), point)?;
        gradient.push((fp - fm) / (2.0 * h));
    }
    let h = 1e-3;
    let zero = vec![0.0; action.rank];
    let mm = iso.m_basis.len();
    let mut hess = vec![vec![0.0; mm]; mm];
    for a in 0..mm {
        for b in a..mm {
            let (ea, eb) = (&iso.m_basis[a], &iso.m_basis[b]);
            let mut val = 0.0;
            for (sa, sb, sg) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                let x = shifted(&zero, &[(ea, sa * h), (eb, sb * h)]);
                val += sg * flow_potential_value(action, &x, point)?;
            }
            hess[a][b] = val / (4.0 * h * h);
            hess[b][a] = hess[a][b];
        }
    }
    Ok(FlowPotentialReport {
        value,
        gradient,
        hessian_at_zero: hess,
    })
}

/// Which section bundle a transported norm belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Twist {
    Plain,
    Halfform,
}

impl Twist {
    pub fn is_halfform(self) -> bool {
        self == Twist::Halfform
    }

    pub fn name(self) -> &'static str {
        match self {
            Twist::Plain => "plain",
            Twist::Halfform => "halfform",
        }
    }
}

/// `∫₀¹ div(JX^ξ)(e^{itξ}x) dt` by quadrature of finite-difference
/// divergences along the flow line.
pub fn divergence_integral(action: &WeightAction, xi: &[f64], point: &PointM) -> Result<f64> {
    let field = ActionFlow {
        action,
        xi: xi.to_vec(),
        imaginary: true,
    };
    let failure = std::cell::RefCell::new(None);
    let est = integrate_de(
        |t| {
            let y = imaginary_flow(action, xi, t, point);
            match crate::kahler_models::divergence_liouville(&action.model, &field, &y) {
                Ok(v) => v,
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    0.0
                }
            }
        },
        0.0,
        1.0,
        1e-9,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(est.value)
}

/// Transport of a pointwise norm along `e^{iξ}`: plain sections pick up
/// `exp(−k f)`, half-form sections additionally `exp(−½∫₀¹ div JX^ξ)`.
pub fn norm_transport(
    kind: Twist,
    action: &WeightAction,
    k: u32,
    xi: &[f64],
    point: &PointM,
    norm_at_point: f64,
) -> Result<f64> {
    if norm_at_point < 0.0 {
        return Err(Error::Invalid("pointwise norm must be nonnegative".into()));
    }
    if xi.iter().all(|x| *x == 0.0) {
        return Ok(norm_at_point);
    }
    let f = flow_potential_value(action, xi, point)?;
    let mut expo = -(k as f64) * f;
    if kind.is_halfform() {
        expo -= 0.5 * divergence_integral(action, xi, point)?;
    }
    Ok(norm_at_point * expo.exp())
}
