//! Quantum Hilbert spaces upstairs: monomial bases of `H(M, L^k)` and of the
//! half-form twist `H(M, L^k ⊗ √K)`, invariant subspaces, pointwise norms
//! and Gram matrices under both upstairs inner-product definitions.
//!
//! Sections are multi-homogeneous polynomials in the homogeneous
//! coordinates. A half-form section `r = P·μ` is stored through `P`, of
//! degree `kℓ_j − (n_j+1)/2` per factor; `μ² = Ω_j` is the homogeneous
//! holomorphic volume form `Ω(z)(v₁,…,v_n) = det[z, v₁, …, v_n]`, which
//! equals `dw₁∧…∧dw_n` in every affine chart after the `O(−n−1)` gluing.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::asymptotics_lab::{density_i_with, density_j_with, Fiber};
use crate::kahler_models::{horizontal, Model, PointM};
use crate::numerics::{cdot, derive_seed, label_seed, monte_carlo, Estimate, QuadConfig, C64};
use crate::reduction_maps::newnorm_factor;
use crate::strata_flow::{
    decompose_preimage, limit_support, pattern_dim, pattern_name, strata_combinatorial, ExtraPiece, MainPiece,
    Slice, SliceMeasure, StratumLabel,
};
use crate::torus_actions::{orbit_volume_with, Twist, WeightAction};
use crate::{Error, Result};

const TAU: f64 = std::f64::consts::TAU;

/// A multi-homogeneous polynomial section of `L^k` (or of `L^k ⊗ √K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionPoly {
    pub k: u32,
    pub twist: Twist,
    /// Required homogeneity per factor.
    pub degrees: Vec<i64>,
    /// Number of homogeneous coordinates per factor (`n_j + 1`).
    pub block_sizes: Vec<usize>,
    /// `(exponents over all homogeneous coordinates, coefficient)`.
    pub terms: Vec<(Vec<u32>, C64)>,
}

impl SectionPoly {
    /// The monomial `z^α` with coefficient 1.
    pub fn monomial(model: &Model, k: u32, twist: Twist, exponents: Vec<u32>) -> Result<SectionPoly> {
        let s = SectionPoly {
            k,
            twist,
            degrees: model.section_degrees(k, twist.is_halfform())?,
            block_sizes: model.factors.iter().map(|n| n + 1).collect(),
            terms: vec![(exponents, C64::new(1.0, 0.0))],
        };
        s.validate(model)?;
        Ok(s)
    }

    /// The zero section.
    pub fn zero(model: &Model, k: u32, twist: Twist) -> Result<SectionPoly> {
        Ok(SectionPoly {
            k,
            twist,
            degrees: model.section_degrees(k, twist.is_halfform())?,
            block_sizes: model.factors.iter().map(|n| n + 1).collect(),
            terms: Vec::new(),
        })
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|(_, c)| *c == C64::new(0.0, 0.0))
    }

    /// Check exponent lengths and per-factor homogeneity.
    pub fn validate(&self, model: &Model) -> Result<()> {
        let expected = model.section_degrees(self.k, self.twist.is_halfform())?;
        if expected != self.degrees {
            return Err(Error::Invalid("section degrees do not match the model".into()));
        }
        for (e, _) in &self.terms {
            if e.len() != model.num_coords() {
                return Err(Error::Invalid(format!(
                    "exponent tuple has length {}, expected {}",
                    e.len(),
                    model.num_coords()
                )));
            }
            for j in 0..model.num_factors() {
                let d: i64 = model.block(j).map(|i| e[i] as i64).sum();
                if d != self.degrees[j] {
                    return Err(Error::Invalid(format!(
                        "exponent tuple has degree {d} in factor {j}, expected {}",
                        self.degrees[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// `P(z)` at the stored homogeneous representative.
    pub fn eval(&self, point: &PointM) -> C64 {
        let flat = point.flat();
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter()
                    .zip(&flat)
                    .fold(*c, |acc, (&p, z)| if p == 0 { acc } else { acc * z.powu(p) })
            })
            .sum()
    }

    /// Exponents of a monomial section.
    pub fn exponents(&self) -> Option<&[u32]> {
        match self.terms.as_slice() {
            [(e, _)] => Some(e),
            _ => None,
        }
    }

    /// Stable identifier: exponents per factor, e.g. `1,1` or `1,0|1,0`.
    pub fn id(&self) -> String {
        match self.exponents() {
            Some(e) => {
                let mut off = 0;
                self.block_sizes
                    .iter()
                    .map(|&len| {
                        let part = e[off..off + len].iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                        off += len;
                        part
                    })
                    .collect::<Vec<_>>()
                    .join("|")
            }
            None => format!("poly[{}]", self.terms.len()),
        }
    }

    /// Torus weight `Σ_i α_i W_i` of a monomial.
    pub fn weight(&self, action: &WeightAction) -> Option<Vec<i64>> {
        let e = self.exponents()?;
        Some(
            (0..action.rank)
                .map(|a| e.iter().zip(&action.weights[a]).map(|(&p, &w)| p as i64 * w).sum())
                .collect(),
        )
    }
}

fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for rest in compositions(total - first, parts - 1) {
            let mut v = vec![first];
            v.extend(rest);
            out.push(v);
        }
    }
    out
}

/// All monomials of the required multi-degree.
pub fn basis_sections(model: &Model, k: u32, twist: Twist) -> Result<Vec<SectionPoly>> {
    if k == 0 {
        return Err(Error::Invalid("tensor power k must be at least 1".into()));
    }
    let degrees = model.section_degrees(k, twist.is_halfform())?;
    let mut exps: Vec<Vec<u32>> = vec![vec![]];
    for j in 0..model.num_factors() {
        if degrees[j] < 0 {
            return Ok(Vec::new());
        }
        let comps = compositions(degrees[j] as u32, model.factors[j] + 1);
        exps = exps
            .iter()
            .flat_map(|p| {
                comps.iter().map(move |c| {
                    let mut v = p.clone();
                    v.extend_from_slice(c);
                    v
                })
            })
            .collect();
    }
    Ok(exps
        .into_iter()
        .map(|e| SectionPoly {
            k,
            twist,
            degrees: degrees.clone(),
            block_sizes: model.factors.iter().map(|n| n + 1).collect(),
            terms: vec![(e, C64::new(1.0, 0.0))],
        })
        .collect())
}

/// Torus weight of the canonical bundle frame `Ω` (sum over factors of the
/// per-factor weights), measured numerically from `Ω(Dz)(Dv)/Ω(z)(v)` for
/// a small torus element `D`; `√K` carries half of it.
pub fn canonical_weight(action: &WeightAction) -> Vec<f64> {
    let m = &action.model;
    let mut rng = ChaCha8Rng::seed_from_u64(label_seed("canonical-weight"));
    let theta = 1e-3;
    (0..action.rank)
        .map(|a| {
            let mut total = 0.0;
            for j in 0..m.num_factors() {
                let n = m.factors[j] + 1;
                let mut cols: Vec<Vec<C64>> = (0..n)
                    .map(|_| (0..n).map(|_| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))).collect())
                    .collect();
                let base = complex_det(&cols);
                let phases: Vec<C64> = m
                    .block(j)
                    .map(|i| C64::from_polar(1.0, TAU * theta * action.weights[a][i] as f64))
                    .collect();
                for c in cols.iter_mut() {
                    c.iter_mut().zip(&phases).for_each(|(x, p)| *x *= p);
                }
                let moved = complex_det(&cols);
                total += (moved / base).arg() / (TAU * theta);
            }
            total
        })
        .collect()
}

fn complex_det(cols: &[Vec<C64>]) -> C64 {
    let n = cols.len();
    nalgebra::DMatrix::from_fn(n, n, |r, c| cols[c][r]).determinant()
}

/// Weight an invariant section must carry: `k·c` for plain sections and
/// `k·c − ½ Σ W` for half-form sections (the `√K` frame carries `½ΣW`).
pub fn invariance_target(action: &WeightAction, k: u32, twist: Twist) -> Result<Vec<i64>> {
    action.check_lift(k)?;
    let kc: Vec<i64> = action
        .shift
        .iter()
        .map(|c| (*c * k as i64).to_integer())
        .collect();
    if !twist.is_halfform() {
        return Ok(kc);
    }
    let measured = canonical_weight(action);
    let exact: Vec<i64> = (0..action.rank).map(|a| action.weights[a].iter().sum()).collect();
    for (m, e) in measured.iter().zip(&exact) {
        if (m - *e as f64).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "canonical-bundle weight {m} does not match the weight sum {e}"
            )));
        }
    }
    kc.iter()
        .zip(&exact)
        .map(|(a, s)| {
            let twice = 2 * a - s;
            if twice % 2 != 0 {
                Err(Error::Config(format!(
                    "lift integrality: k·c − ½ΣW = {}/2 is not integral for the half-form bundle",
                    twice
                )))
            } else {
                Ok(twice / 2)
            }
        })
        .collect()
}

/// Invariant monomials: weight equal to [`invariance_target`].
pub fn invariant_basis(action: &WeightAction, k: u32, twist: Twist) -> Result<Vec<SectionPoly>> {
    let target = invariance_target(action, k, twist)?;
    Ok(basis_sections(&action.model, k, twist)?
        .into_iter()
        .filter(|s| s.weight(action).as_deref() == Some(target.as_slice()))
        .collect())
}

/// Residual of the infinitesimal invariance `Q_ξ s = 0` in the homogeneous
/// trivialization: `|d/dt e^{−2πit⟨target,ξ⟩} P(e^{2πit⟨W,ξ⟩}z)|_{t=0}`,
/// by a central difference, relative to `max(|P(z)|, 1)`-scaled units.
pub fn q_operator_residual(action: &WeightAction, section: &SectionPoly, point: &PointM, xi: &[f64]) -> Result<f64> {
    let target = invariance_target(action, section.k, section.twist)?;
    let w = action.pairing(xi);
    let tw: f64 = target.iter().zip(xi).map(|(a, b)| *a as f64 * b).sum();
    let flat = point.flat();
    let at = |t: f64| -> C64 {
        let moved: Vec<C64> = flat
            .iter()
            .zip(&w)
            .map(|(z, wi)| z * C64::from_polar(1.0, TAU * t * wi))
            .collect();
        let p = PointM {
            coords: (0..action.model.num_factors())
                .map(|j| moved[action.model.block(j)].to_vec())
                .collect(),
            chart_hint: None,
        };
        section.eval(&p) * C64::from_polar(1.0, -TAU * t * tw)
    };
    let h = 1e-4;
    let d = (at(h) - at(-h)) / (2.0 * h);
    let scale = section.terms.iter().map(|(_, c)| c.norm()).sum::<f64>().max(1e-300);
    Ok(d.norm() / scale)
}

/// Closed-form `(μ, μ)` on the product: `∏_j ℓ_j^{−n_j/2} ‖z_j‖^{n_j+1}`.
pub fn halfform_frame_factor(model: &Model, point: &PointM) -> f64 {
    (0..model.num_factors())
        .map(|j| {
            let n = model.factors[j] as f64;
            let nz: f64 = point.coords[j].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            model.degree(j).powf(-n / 2.0) * nz.powf(n + 1.0)
        })
        .product()
}

/// `(μ_a, μ_a)` of the chart frame `μ_a² = dw₁∧…∧dw_n` computed numerically
/// from `μ²∧μ̄² = (μ,μ)² ε_ω`: `(μ,μ)² = |μ²(u)|² / det H(u_a, u_b)` for the
/// horizontal lifts `u` of `∂/∂w`, with `H = Σ_j ℓ_j ⟨·,·⟩` (so `Re H = B/2`).
/// Returned together with the chart coordinate `z_a` of every factor.
pub fn chart_frame_norm(model: &Model, point: &PointM) -> (f64, Vec<C64>) {
    let charts = point.charts();
    let flat = point.flat();
    let total = model.num_coords();
    let mut value = 1.0;
    let mut za = Vec::new();
    for j in 0..model.num_factors() {
        let off = model.offset(j);
        let a = off + charts[j];
        let zj = flat[a];
        za.push(zj);
        let us: Vec<Vec<C64>> = model
            .block(j)
            .filter(|&i| i != a)
            .map(|i| {
                let mut v = vec![C64::new(0.0, 0.0); total];
                v[i] = C64::new(zj.norm(), 0.0);
                horizontal(point, &v)
            })
            .collect();
        // dw_i(u_b) = (u_b,i z_a − z_i u_b,a)/z_a²
        let n = us.len();
        let ids: Vec<usize> = model.block(j).filter(|&i| i != a).collect();
        let dw = nalgebra::DMatrix::from_fn(n, n, |r, c| {
            let u = &us[c];
            (u[ids[r]] * zj - flat[ids[r]] * u[a]) / (zj * zj)
        });
        let h = nalgebra::DMatrix::from_fn(n, n, |r, c| cdot(&us[r], &us[c]) * model.degree(j));
        let num = dw.determinant().norm_sqr();
        let den = h.determinant().re;
        value *= (num / den).sqrt();
    }
    (value, za)
}

/// Pointwise norm `|s|²(x)`: `|P(z)|²/∏‖z_j‖^{2 deg_j}`, times `(μ,μ)`
/// for half-form sections.
pub fn pointwise_norm(model: &Model, section: &SectionPoly, point: &PointM) -> f64 {
    pointwise_inner(model, section, section, point).re.max(0.0)
}

/// Pointwise Hermitian product `(s₁, s₂)(x)`.
pub fn pointwise_inner(model: &Model, s1: &SectionPoly, s2: &SectionPoly, point: &PointM) -> C64 {
    s1.eval(point) * s2.eval(point).conj() * pointwise_scale(model, s1, point)
}

/// Half-form pointwise norm computed through the numerical chart frame
/// (`|P/z_a^{deg}|² · |e_L|^{2k} · (μ_a, μ_a)`), for cross-checking the
/// closed form used in [`pointwise_norm`].
pub fn pointwise_norm_via_frame(model: &Model, section: &SectionPoly, point: &PointM) -> f64 {
    let (mu, za) = chart_frame_norm(model, point);
    let mut v = section.eval(point).norm_sqr() * mu;
    for j in 0..model.num_factors() {
        let nz: f64 = point.coords[j].iter().map(|c| c.norm_sqr()).sum();
        let kl = section.k as f64 * model.degree(j);
        v *= za[j].norm_sqr().powf(kl - section.degrees[j] as f64) / nz.powf(kl);
    }
    v
}

/// A Gram matrix with per-entry error bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub basis_ids: Vec<String>,
    pub k: u32,
    pub twist: Twist,
    pub norm_def: u8,
    pub matrix: Vec<Vec<C64>>,
    pub mc_error: Vec<Vec<f64>>,
    /// Entries whose error exceeded 20% of their value in some piece.
    pub flagged: Vec<String>,
    pub breakdown: Vec<PieceContribution>,
}

impl GramMatrix {
    fn diagonal(basis: &[SectionPoly], k: u32, twist: Twist, norm_def: u8, parts: Vec<PieceContribution>) -> GramMatrix {
        let n = basis.len();
        let mut diag = vec![Estimate::exact(0.0); n];
        let mut flagged = Vec::new();
        for p in &parts {
            for (b, e) in p.diag.iter().enumerate() {
                diag[b] = diag[b].add(*e);
                if e.value != 0.0 && e.stderr > 0.2 * e.value.abs() {
                    flagged.push(format!("{}@{}/{}", basis[b].id(), p.stratum, p.piece));
                }
            }
        }
        let mut matrix = vec![vec![C64::new(0.0, 0.0); n]; n];
        let mut err = vec![vec![0.0; n]; n];
        for b in 0..n {
            matrix[b][b] = C64::new(diag[b].value, 0.0);
            err[b][b] = diag[b].stderr;
        }
        GramMatrix {
            basis_ids: basis.iter().map(|s| s.id()).collect(),
            k,
            twist,
            norm_def,
            matrix,
            mc_error: err,
            flagged,
            breakdown: parts,
        }
    }

    /// Largest deviation from Hermitian symmetry.
    pub fn hermitian_residual(&self) -> f64 {
        let n = self.matrix.len();
        let mut r: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                r = r.max((self.matrix[a][b] - self.matrix[b][a].conj()).norm());
            }
        }
        r
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.matrix.len();
        if n == 0 {
            return 0.0;
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |a, b| 0.5 * (self.matrix[a][b] + self.matrix[b][a].conj()));
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn diag(&self) -> Vec<Estimate> {
        (0..self.matrix.len())
            .map(|b| Estimate::new(self.matrix[b][b].re, self.mc_error[b][b]))
            .collect()
    }
}

/// Per-piece diagonal contributions to a Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceContribution {
    pub stratum: String,
    /// `main` or the face id of an extra-piece slice.
    pub piece: String,
    pub extra: bool,
    /// Complex dimension entering the `(k/2π)^{dim/2}` prefactor.
    pub dim: usize,
    pub diag: Vec<Estimate>,
}

/// Stratification of `φ⁻¹(0)` with the decomposition of every flow
/// preimage, reused across `k`.
#[derive(Debug, Clone)]
pub struct StratifiedPlan {
    pub strata: Vec<StratumLabel>,
    pub decomposition: Vec<(MainPiece, Vec<ExtraPiece>)>,
    /// Index of the open dense stratum `S^O`.
    pub open: usize,
}

fn capture<T: Default>(slot: &Mutex<Option<Error>>, r: Result<T>) -> T {
    match r {
        Ok(v) => v,
        Err(e) => {
            let mut g = slot.lock().expect("error slot");
            if g.is_none() {
                *g = Some(e);
            }
            T::default()
        }
    }
}

fn take(slot: Mutex<Option<Error>>) -> Result<()> {
    match slot.into_inner().expect("error slot") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Quadrature budget for a slice of the given dimension.
fn slice_budget(slice: &Slice, quad: &QuadConfig) -> usize {
    if slice.dim <= 1 {
        quad.slice_nodes
    } else {
        (quad.slice_nodes * quad.slice_nodes).min(quad.samples)
    }
}

impl StratifiedPlan {
    pub fn new(action: &WeightAction) -> Result<StratifiedPlan> {
        let strata = strata_combinatorial(action)?;
        StratifiedPlan::from_strata(action, strata)
    }

    pub fn from_strata(action: &WeightAction, strata: Vec<StratumLabel>) -> Result<StratifiedPlan> {
        let decomposition = strata
            .iter()
            .map(|s| decompose_preimage(action, s))
            .collect::<Result<Vec<_>>>()?;
        let full = vec![true; action.model.num_coords()];
        let lim = limit_support(action, &full)
            .ok_or_else(|| Error::Stratification("generic points are unsemistable".into()))?;
        let open = strata
            .iter()
            .position(|s| s.patterns.contains(&lim))
            .ok_or_else(|| Error::Stratification("open stratum not found".into()))?;
        Ok(StratifiedPlan { strata, decomposition, open })
    }

    fn seed(&self, quad: &QuadConfig, stratum: usize, piece: &str, k: u32) -> u64 {
        derive_seed(
            derive_seed(quad.seed, label_seed(&format!("{}/{piece}", self.strata[stratum].name))),
            k as u64,
        )
    }

    /// `(k/2π)^{d_S/2}∫_S |A′s|² I_k ε_S` (plain) or
    /// `(k/2π)^{d_S/2}∫_S |B′r|² J_k ε_S` (half-form) per basis section.
    pub fn main_contribution(&self, action: &WeightAction, idx: usize, k: u32, twist: Twist, basis: &[SectionPoly], quad: &QuadConfig) -> Result<PieceContribution> {
        let label = &self.strata[idx];
        let kf = k as f64;
        let pref = (kf / TAU).powf(label.dim_s as f64 / 2.0);
        let nb = basis.len();
        let mut acc = vec![Estimate::exact(0.0); nb];
        for (si, slice) in label.slices(action)?.iter().enumerate() {
            let slot = Mutex::new(None);
            let est = slice.integrate(
                action,
                SliceMeasure::Quotient,
                slice_budget(slice, quad),
                derive_seed(self.seed(quad, idx, "main", k), si as u64),
                nb,
                |x| {
                    let dens = if twist.is_halfform() {
                        capture(&slot, density_j_with(action, &slice.isotropy, x, kf).map(|d| d.value))
                            * newnorm_factor(&slice.isotropy, orbit_volume_with(action, &slice.isotropy, x).value)
                    } else {
                        capture(&slot, density_i_with(action, &slice.isotropy, x, kf).map(|d| d.value))
                    };
                    basis.iter().map(|s| pointwise_norm(&action.model, s, x) * dens).collect()
                },
            )?;
            take(slot)?;
            for (a, e) in acc.iter_mut().zip(est) {
                *a = a.add(e);
            }
        }
        Ok(PieceContribution {
            stratum: label.name.clone(),
            piece: "main".into(),
            extra: false,
            dim: label.dim_upstairs,
            diag: acc.into_iter().map(|e| e.scale(pref)).collect(),
        })
    }

    /// Extra-piece terms of `II_k` / `ĨI_k`: `(k/2π)^{n′/2} Σ_i ±∫_{S_i} |s|²
    /// dvol(S_i) ∫_{𝔪′} τ e^{−kf − [½ log Jac]}` per basis section.
    pub fn extra_contributions(&self, action: &WeightAction, idx: usize, k: u32, twist: Twist, basis: &[SectionPoly], quad: &QuadConfig) -> Result<Vec<PieceContribution>> {
        let kf = k as f64;
        let nb = basis.len();
        let mut out = Vec::new();
        for piece in &self.decomposition[idx].1 {
            let pref = (kf / TAU).powf(piece.dim_piece as f64 / 2.0);
            for (si, ps) in piece.slices.iter().enumerate() {
                let slice = Slice::new(action, &ps.pattern, &ps.level)?;
                let slot = Mutex::new(None);
                let est = slice.integrate(
                    action,
                    SliceMeasure::Riemannian,
                    slice_budget(&slice, quad),
                    derive_seed(self.seed(quad, idx, &ps.face_id, k), si as u64),
                    nb,
                    |u| {
                        let fib = Fiber::new(action, &slice.isotropy, u);
                        let w = capture(&slot, fib.integral(kf, twist, None).map(|e| e.value));
                        basis.iter().map(|s| pointwise_norm(&action.model, s, u) * w).collect()
                    },
                )?;
                take(slot)?;
                out.push(PieceContribution {
                    stratum: self.strata[idx].name.clone(),
                    piece: ps.face_id.clone(),
                    extra: true,
                    dim: piece.dim_piece,
                    diag: est.into_iter().map(|e| e.scale(pref * ps.sign as f64)).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Direct integrals `(k/2π)^{n/2}∫_{piece} |s|² dvol` over the main
    /// piece and all extra pieces of a stratum, by Monte Carlo on each
    /// top-dimensional support submanifold (a product of coordinate
    /// projective subspaces with its induced Fubini–Study measure).
    pub fn direct_piece_integrals(&self, action: &WeightAction, idx: usize, k: u32, twist: Twist, basis: &[SectionPoly], quad: &QuadConfig) -> Result<Vec<Estimate>> {
        let kf = k as f64;
        let m = &action.model;
        let mut pieces: Vec<(Vec<bool>, usize)> = self.strata[idx]
            .top_patterns
            .iter()
            .map(|p| (p.clone(), self.strata[idx].dim_upstairs))
            .collect();
        for piece in &self.decomposition[idx].1 {
            for ps in &piece.slices {
                pieces.push((ps.pattern.clone(), piece.dim_piece));
            }
        }
        let mut acc = vec![Estimate::exact(0.0); basis.len()];
        for (pattern, dim) in pieces {
            let pref = (kf / TAU).powf(dim as f64 / 2.0);
            let seed = derive_seed(self.seed(quad, idx, "direct", k), label_seed(&pattern_name(m, &pattern)));
            let est = pattern_integral(m, &pattern, basis, quad.samples, seed)?;
            for (a, e) in acc.iter_mut().zip(est) {
                *a = a.add(e.scale(pref));
            }
        }
        let _ = twist;
        Ok(acc)
    }

    /// Contributions entering the upstairs Gram matrix for `norm_def`.
    pub fn upstairs_contributions(&self, action: &WeightAction, k: u32, twist: Twist, norm_def: u8, basis: &[SectionPoly], quad: &QuadConfig) -> Result<Vec<PieceContribution>> {
        let strata: Vec<usize> = match norm_def {
            1 => vec![self.open],
            2 => (0..self.strata.len()).collect(),
            _ => return Err(Error::Config(format!("norm_def must be 1 or 2, got {norm_def}"))),
        };
        let mut parts = Vec::new();
        for idx in strata {
            parts.push(self.main_contribution(action, idx, k, twist, basis, quad)?);
            parts.extend(self.extra_contributions(action, idx, k, twist, basis, quad)?);
        }
        Ok(parts)
    }

    /// Upstairs Gram matrix assembled from the stratified decomposition
    /// (diagonal: distinct monomials are orthogonal on every torus-invariant
    /// piece).
    pub fn gram_upstairs(&self, action: &WeightAction, k: u32, twist: Twist, norm_def: u8, quad: &QuadConfig) -> Result<GramMatrix> {
        quad.validate()?;
        let basis = invariant_basis(action, k, twist)?;
        if basis.is_empty() {
            return Err(Error::Invalid(format!("no invariant {} sections at k={k}", twist.name())));
        }
        let parts = self.upstairs_contributions(action, k, twist, norm_def, &basis, quad)?;
        Ok(GramMatrix::diagonal(&basis, k, twist, norm_def, parts))
    }
}

pub(crate) fn gram_from_parts(basis: &[SectionPoly], k: u32, twist: Twist, norm_def: u8, parts: Vec<PieceContribution>) -> GramMatrix {
    GramMatrix::diagonal(basis, k, twist, norm_def, parts)
}

/// Liouville volume of the coordinate sub-product cut out by `pattern`.
pub fn pattern_volume(model: &Model, pattern: &[bool]) -> f64 {
    (0..model.num_factors())
        .map(|j| {
            let n = model.block(j).filter(|&i| pattern[i]).count() as i32 - 1;
            (TAU * model.degree(j)).powi(n) / (1..=n).map(|v| v as f64).product::<f64>()
        })
        .product()
}

/// `∫ |s|² dvol` over the support submanifold of `pattern` (point value
/// for a 0-dimensional pattern), per section.
pub fn pattern_integral(model: &Model, pattern: &[bool], basis: &[SectionPoly], samples: usize, seed: u64) -> Result<Vec<Estimate>> {
    if pattern_dim(model, pattern) == 0 {
        let p: Vec<f64> = pattern.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        let x = PointM::from_moduli(model, &p)?;
        return Ok(basis.iter().map(|s| Estimate::exact(pointwise_norm(model, s, &x))).collect());
    }
    if samples == 0 {
        return Err(Error::Config("quadrature: sample budget is zero".into()));
    }
    let vol = pattern_volume(model, pattern);
    let est = monte_carlo(samples, seed, basis.len(), |rng, out| {
        let flat: Vec<C64> = pattern
            .iter()
            .map(|&s| {
                if s {
                    C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect();
        let x = PointM::from_flat(model, &flat).expect("gaussian point");
        for (o, s) in out.iter_mut().zip(basis) {
            *o = vol * pointwise_norm(model, s, &x);
        }
    });
    Ok(est)
}

/// Upstairs Gram matrix under `norm_def` ∈ {1, 2}.
pub fn gram_upstairs(action: &WeightAction, k: u32, twist: Twist, norm_def: u8, quad: &QuadConfig) -> Result<GramMatrix> {
    StratifiedPlan::new(action)?.gram_upstairs(action, k, twist, norm_def, quad)
}

/// Full (not only diagonal) Gram matrix `(k/2π)^{n/2}∫_M (s_a, s_b) ε_ω` by
/// ambient Monte Carlo over `M` — the reference for `norm_def = 1`, since
/// the open piece has full measure.
pub fn gram_ambient(action: &WeightAction, k: u32, twist: Twist, quad: &QuadConfig) -> Result<GramMatrix> {
    quad.validate()?;
    let basis = invariant_basis(action, k, twist)?;
    if basis.is_empty() {
        return Err(Error::Invalid(format!("no invariant {} sections at k={k}", twist.name())));
    }
    let m = &action.model;
    let n = basis.len();
    let full = vec![true; m.num_coords()];
    let vol = pattern_volume(m, &full);
    let pref = (k as f64 / TAU).powf(m.dim() as f64 / 2.0) * vol;
    let est = monte_carlo(quad.samples, derive_seed(quad.seed, label_seed("ambient")), 2 * n * n, |rng, out| {
        let x = PointM::random(m, rng);
        let vals: Vec<C64> = basis.iter().map(|s| s.eval(&x)).collect();
        let scale = pointwise_scale(m, &basis[0], &x);
        for a in 0..n {
            for b in 0..n {
                let v = vals[a] * vals[b].conj() * scale * pref;
                out[2 * (a * n + b)] = v.re;
                out[2 * (a * n + b) + 1] = v.im;
            }
        }
    });
    let mut matrix = vec![vec![C64::new(0.0, 0.0); n]; n];
    let mut err = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let (re, im) = (est[2 * (a * n + b)], est[2 * (a * n + b) + 1]);
            matrix[a][b] = C64::new(re.value, im.value);
            err[a][b] = re.stderr.hypot(im.stderr);
        }
    }
    Ok(GramMatrix {
        basis_ids: basis.iter().map(|s| s.id()).collect(),
        k,
        twist,
        norm_def: 1,
        matrix,
        mc_error: err,
        flagged: Vec::new(),
        breakdown: Vec::new(),
    })
}

fn pointwise_scale(model: &Model, s: &SectionPoly, point: &PointM) -> f64 {
    let mut scale = 1.0;
    for j in 0..model.num_factors() {
        let nz: f64 = point.coords[j].iter().map(|c| c.norm_sqr()).sum();
        scale /= nz.powf(s.degrees[j] as f64);
    }
    if s.twist.is_halfform() {
        scale *= (0..model.num_factors())
            .map(|j| model.degree(j).powf(-(model.factors[j] as f64) / 2.0))
            .product::<f64>();
    }
    scale
}
