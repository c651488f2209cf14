//! Descent of invariant sections to the reduced space: the maps `A′_k`
//! (plain) and `B′_k` (half-form), the pointwise norm relation between
//! upstairs and downstairs half-form norms, reduced Gram matrices under
//! both downstairs inner-product definitions, and the matched-basis map
//! matrix with its boundedness probe.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::hilbert_spaces::{
    gram_from_parts, invariance_target, invariant_basis, pointwise_norm, GramMatrix, PieceContribution, SectionPoly,
    StratifiedPlan,
};
use crate::kahler_models::{horizontal, omega, metric_b, PointM};
use crate::numerics::{cdot, derive_seed, label_seed, Estimate, QuadConfig, C64};
use crate::strata_flow::SliceMeasure;
use crate::torus_actions::{
    fundamental_fields, imaginary_flow, isotropy_of_support, orbit_volume_with, support_of, IsotropyDescriptor, Twist,
    WeightAction,
};
use crate::{Error, Result};

/// An invariant section viewed on the reduced space, with its pointwise
/// data cached on stratum representatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSection {
    pub upstairs: SectionPoly,
    pub twist: Twist,
    /// `(stratum name, representative, downstairs |s′|²)`.
    pub stratum_values: Vec<(String, PointM, f64)>,
}

/// `A′_k s` / `B′_k r`: restrict an invariant section to `φ⁻¹(0)` and record
/// its downstairs pointwise norms on one representative per stratum.
pub fn descend(action: &WeightAction, section: &SectionPoly) -> Result<ReducedSection> {
    section.validate(&action.model)?;
    let target = invariance_target(action, section.k, section.twist)?;
    for (e, c) in &section.terms {
        if c.norm() == 0.0 {
            continue;
        }
        let w: Vec<i64> = (0..action.rank)
            .map(|a| e.iter().zip(&action.weights[a]).map(|(&p, &w)| p as i64 * w).sum())
            .collect();
        if w != target {
            return Err(Error::Invalid(format!(
                "section is not invariant: monomial weight {w:?} differs from {target:?}"
            )));
        }
    }
    let plan = StratifiedPlan::new(action)?;
    let stratum_values = plan
        .strata
        .iter()
        .map(|s| {
            let x = s.representative.clone();
            let v = pointwise_descended_norm(action, section, &s.isotropy, &x)?;
            Ok((s.name.clone(), x, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReducedSection {
        upstairs: section.clone(),
        twist: section.twist,
        stratum_values,
    })
}

/// The newnorm factor `|B′r|²([x₀]) / |r|²(x₀) = 2^{−dim(G/H)/2} vol(G·x₀)`
/// (and 1 when `H = G`), with `vol` the orbit volume including the finite
/// stabilizer correction.
pub fn newnorm_factor(iso: &IsotropyDescriptor, orbit_volume: f64) -> f64 {
    if iso.is_full || iso.dim_m() == 0 {
        1.0
    } else {
        2f64.powf(-(iso.dim_m() as f64) / 2.0) * orbit_volume
    }
}

/// Downstairs pointwise norm square of the descended section at `[x₀]`:
/// `|s|²(x₀)` for plain sections, the newnorm factor times `|r|²(x₀)` for
/// half-form sections.
pub fn pointwise_descended_norm(action: &WeightAction, section: &SectionPoly, iso: &IsotropyDescriptor, x0: &PointM) -> Result<f64> {
    let phi = action.moment_map(x0);
    if phi.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6 {
        return Err(Error::Invalid("descended norms are evaluated on the zero level set".into()));
    }
    let up = pointwise_norm(&action.model, section, x0);
    Ok(if section.twist.is_halfform() {
        up * newnorm_factor(iso, orbit_volume_with(action, iso, x0).value)
    } else {
        up
    })
}

/// `|Ω(w)|² / det H(w_a, w_b)` for a complex basis `w` of `T^{1,0}` (given
/// as horizontal lifts), with `Ω = ∧_j dw^{(j)}` in the charts of `point`
/// and `H = Σ_j ℓ_j⟨·,·⟩_j`. This is `(μ, μ)²` for `μ² = Ω`.
fn volume_form_ratio(action: &WeightAction, point: &PointM, w: &[Vec<C64>]) -> f64 {
    let m = &action.model;
    let flat = point.flat();
    let charts = point.charts();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for j in 0..m.num_factors() {
        let a = m.offset(j) + charts[j];
        rows.extend(m.block(j).filter(|&i| i != a).map(|i| (i, a)));
    }
    let n = w.len();
    let d = DMatrix::from_fn(rows.len(), n, |r, c| {
        let (i, a) = rows[r];
        (w[c][i] * flat[a] - flat[i] * w[c][a]) / (flat[a] * flat[a])
    });
    let h = DMatrix::from_fn(n, n, |r, c| hermitian_h(action, &w[r], &w[c]));
    let omega_val = if rows.len() == n { d.determinant().norm_sqr() } else { f64::NAN };
    omega_val / h.determinant().re
}

fn hermitian_h(action: &WeightAction, u: &[C64], v: &[C64]) -> C64 {
    let m = &action.model;
    (0..m.num_factors())
        .map(|j| {
            let r = m.block(j);
            cdot(&u[r.clone()], &v[r]) * m.degree(j)
        })
        .sum()
}

/// Complex `H`-orthonormal completion of `fixed` inside the span of
/// `candidates`, returning only the new vectors.
fn h_complement(action: &WeightAction, fixed: &[Vec<C64>], candidates: &[Vec<C64>]) -> Vec<Vec<C64>> {
    let mut basis: Vec<Vec<C64>> = Vec::new();
    for v in fixed.iter().chain(candidates) {
        let mut u = v.clone();
        for b in &basis {
            let c = hermitian_h(action, &u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let nrm = hermitian_h(action, &u, &u).re.sqrt();
        if nrm > 1e-8 {
            u.iter_mut().for_each(|x| *x /= nrm);
            basis.push(u);
        }
    }
    basis.split_off(fixed.len().min(basis.len()))
}

/// Independent evaluation of the newnorm factor from the push-down recipe:
/// contract `Ω` with the holomorphic fields `X^{m_a}`, restrict to the
/// `H`-complement inside the support submanifold, and compare the
/// downstairs frame norm `|ι_X Ω|²/det H(v)` with the upstairs one
/// `|Ω|²/det H(X, v)`. The `𝔪` basis is rescaled to a unit cell of the
/// orbit lattice (finite part and covolume).
pub fn contraction_factor(action: &WeightAction, iso: &IsotropyDescriptor, x0: &PointM) -> Result<f64> {
    if iso.is_full || iso.dim_m() == 0 {
        return Ok(1.0);
    }
    let m = &action.model;
    let xs: Vec<Vec<C64>> = iso.m_basis.iter().map(|e| fundamental_fields(action, e, x0).0).collect();
    let sup = support_of(x0, 1e-9);
    let cands: Vec<Vec<C64>> = (0..m.num_coords())
        .filter(|&i| sup[i])
        .map(|i| {
            let mut v = vec![C64::new(0.0, 0.0); m.num_coords()];
            v[i] = C64::new(1.0, 0.0);
            horizontal(x0, &v)
        })
        .collect();
    let v = h_complement(action, &xs, &cands);
    // complete to a basis of T^{1,0}M with directions off the support
    let others: Vec<Vec<C64>> = (0..m.num_coords())
        .filter(|&i| !sup[i])
        .map(|i| {
            let mut e = vec![C64::new(0.0, 0.0); m.num_coords()];
            e[i] = C64::new(1.0, 0.0);
            horizontal(x0, &e)
        })
        .collect();
    let mut fixed = xs.clone();
    fixed.extend(v.iter().cloned());
    let rest = h_complement(action, &fixed, &others);
    let mut up = fixed.clone();
    up.extend(rest.iter().cloned());
    if up.len() != m.dim() {
        return Err(Error::Numerical("could not complete a tangent frame".into()));
    }
    // downstairs frame: the same Ω contracted with X, so only the Gram
    // determinants of the remaining vectors change
    let mut down = v.clone();
    down.extend(rest);
    let upstairs = volume_form_ratio(action, x0, &up);
    let hv = DMatrix::from_fn(down.len(), down.len(), |r, c| hermitian_h(action, &down[r], &down[c]));
    let contracted = volume_form_ratio(action, x0, &up) * DMatrix::from_fn(up.len(), up.len(), |r, c| hermitian_h(action, &up[r], &up[c])).determinant().re
        / hv.determinant().re;
    if !(upstairs > 0.0 && contracted > 0.0) {
        return Err(Error::Numerical("degenerate frame in the contraction recipe".into()));
    }
    // (μ,μ)² ratio is det H(X_a, X_b); the norm ratio is its root
    let ratio = (contracted / upstairs).sqrt();
    Ok(ratio / (iso.finite_part as f64 * iso.lattice_covolume))
}

/// Pfaffian form of the contraction identity at a zero-level point: with
/// `w` an ω-symplectic basis of the B-orthogonal complement of
/// `span{X^{m_a}, JX^{m_a}}`, `|Pf ω[X₁, JX₁, …, w]| = det B(X_a, X_b)·|Pf ω[w]|`.
/// Returns `(lhs, rhs)`.
pub fn pfaffian_identity(action: &WeightAction, iso: &IsotropyDescriptor, x0: &PointM) -> Result<(f64, f64)> {
    let m = &action.model;
    let mut vecs: Vec<Vec<C64>> = Vec::new();
    for e in &iso.m_basis {
        let (x, jx) = fundamental_fields(action, e, x0);
        vecs.push(x);
        vecs.push(jx);
    }
    let head = vecs.len();
    for i in 0..m.num_coords() {
        for unit in [C64::new(1.0, 0.0), C64::i()] {
            let mut v = vec![C64::new(0.0, 0.0); m.num_coords()];
            v[i] = unit;
            vecs.push(horizontal(x0, &v));
        }
    }
    // B-orthogonalize the tail against the head and within itself
    let head_ortho = gram_schmidt_b(action, &vecs[..head]);
    let mut tail: Vec<Vec<C64>> = Vec::new();
    for v in vecs.iter().skip(head) {
        let mut u = v.clone();
        for b in head_ortho.iter().chain(&tail) {
            let c = metric_b(m, &u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= y * c);
        }
        let nrm = metric_b(m, &u, &u).sqrt();
        if nrm > 1e-7 {
            u.iter_mut().for_each(|x| *x /= nrm);
            tail.push(u);
        }
    }
    let mut all: Vec<Vec<C64>> = vecs[..head].to_vec();
    all.extend(tail.iter().cloned());
    if all.len() != 2 * m.dim() {
        return Err(Error::Numerical("tangent frame has the wrong rank".into()));
    }
    let pf = |v: &[Vec<C64>]| -> f64 {
        let n = v.len();
        DMatrix::from_fn(n, n, |r, c| omega(m, &v[r], &v[c])).determinant().abs().sqrt()
    };
    let gram = DMatrix::from_fn(iso.m_basis.len(), iso.m_basis.len(), |a, b| metric_b(m, &vecs[2 * a], &vecs[2 * b]));
    Ok((pf(&all), gram.determinant() * pf(&tail)))
}

fn gram_schmidt_b(action: &WeightAction, vecs: &[Vec<C64>]) -> Vec<Vec<C64>> {
    let m = &action.model;
    let mut out: Vec<Vec<C64>> = Vec::new();
    for v in vecs {
        let mut u = v.clone();
        for b in &out {
            let c = metric_b(m, &u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= y * c);
        }
        let nrm = metric_b(m, &u, &u).sqrt();
        if nrm > 1e-10 {
            u.iter_mut().for_each(|x| *x /= nrm);
            out.push(u);
        }
    }
    out
}

/// Reduced Gram matrix with its per-stratum breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedGram {
    pub gram: GramMatrix,
    pub strata: Vec<String>,
}

/// Reduced Gram matrix `⟨s′_a, s′_b⟩_(norm_def)`.
pub fn reduced_gram(action: &WeightAction, k: u32, twist: Twist, norm_def: u8, quad: &QuadConfig) -> Result<ReducedGram> {
    let plan = StratifiedPlan::new(action)?;
    reduced_gram_with(action, &plan, k, twist, norm_def, quad)
}

/// [`reduced_gram`] reusing a stratification plan. `norm_def = 1` integrates
/// over the open dense stratum only; `norm_def = 2` sums all strata, each
/// with the prefactor `(k/2π)^{d_S/2}`; 0-dimensional strata contribute
/// their point values.
pub fn reduced_gram_with(action: &WeightAction, plan: &StratifiedPlan, k: u32, twist: Twist, norm_def: u8, quad: &QuadConfig) -> Result<ReducedGram> {
    quad.validate()?;
    let basis = invariant_basis(action, k, twist)?;
    if basis.is_empty() {
        return Err(Error::Invalid(format!("no invariant {} sections at k={k}", twist.name())));
    }
    let idx: Vec<usize> = match norm_def {
        1 => vec![plan.open],
        2 => (0..plan.strata.len()).collect(),
        _ => return Err(Error::Config(format!("norm_def must be 1 or 2, got {norm_def}"))),
    };
    let mut parts = Vec::new();
    for i in &idx {
        let label = &plan.strata[*i];
        let pref = (k as f64 / TAU).powf(label.dim_s as f64 / 2.0);
        let mut acc = vec![Estimate::exact(0.0); basis.len()];
        for (si, slice) in label.slices(action)?.iter().enumerate() {
            let nodes = if slice.dim <= 1 { quad.slice_nodes } else { quad.samples };
            let seed = derive_seed(derive_seed(quad.seed, label_seed(&format!("down/{}", label.name))), k as u64 * 64 + si as u64);
            let est = slice.integrate(action, SliceMeasure::Quotient, nodes, seed, basis.len(), |x| {
                let f = if twist.is_halfform() {
                    newnorm_factor(&slice.isotropy, orbit_volume_with(action, &slice.isotropy, x).value)
                } else {
                    1.0
                };
                basis.iter().map(|s| pointwise_norm(&action.model, s, x) * f).collect()
            })?;
            for (a, e) in acc.iter_mut().zip(est) {
                *a = a.add(e);
            }
        }
        parts.push(PieceContribution {
            stratum: label.name.clone(),
            piece: "reduced".into(),
            extra: false,
            dim: label.dim_s,
            diag: acc.into_iter().map(|e| e.scale(pref)).collect(),
        });
    }
    Ok(ReducedGram {
        gram: gram_from_parts(&basis, k, twist, norm_def, parts),
        strata: idx.iter().map(|i| plan.strata[*i].name.clone()).collect(),
    })
}

/// Matrix of `A′_k` / `B′_k` in matched monomial bases, with the outcome of
/// the boundedness probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMatrix {
    pub k: u32,
    pub twist: Twist,
    pub basis_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Smallest `k₀ ≤ k_max` from which `d/dt |r|²(e^{itξ}x) ≤ 0` held on
    /// every sampled ray for `t ∈ [1, T]`; `None` if it never stabilized.
    pub k0: Option<u32>,
}

/// Largest sampled `d/dt |s|²(e^{itξ}x)` over rays starting at zero-level
/// representatives, unit directions `±ξ ∈ 𝔪` and `t ∈ [1, t_max]`.
pub fn ray_growth(action: &WeightAction, plan: &StratifiedPlan, basis: &[SectionPoly], t_max: f64) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    let m = &action.model;
    for label in &plan.strata {
        for slice in label.slices(action)? {
            let pts = slice.weighted_points(action, SliceMeasure::Quotient, 6, derive_seed(17, label_seed(&label.name)));
            let iso = isotropy_of_support(action, &slice.pattern);
            for wp in pts {
                for dir in &iso.m_basis {
                    for sign in [1.0, -1.0] {
                        let xi: Vec<f64> = dir.iter().map(|v| v * sign).collect();
                        let steps = 24;
                        for i in 0..=steps {
                            let t = 1.0 + (t_max - 1.0) * i as f64 / steps as f64;
                            let h = 1e-4;
                            let a = imaginary_flow(action, &xi, t + h, &wp.point);
                            let b = imaginary_flow(action, &xi, t - h, &wp.point);
                            for s in basis {
                                let d = (pointwise_norm(m, s, &a) - pointwise_norm(m, s, &b)) / (2.0 * h);
                                worst = worst.max(d);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Matrix of the descent map (the identity on matched invariant monomials)
/// plus the boundedness probe of pointwise norms along flow rays, scanning
/// `k = 1..=k_max`.
pub fn map_matrix(action: &WeightAction, k: u32, twist: Twist, k_max: u32) -> Result<MapMatrix> {
    let basis = invariant_basis(action, k, twist)?;
    if basis.is_empty() {
        return Err(Error::Invalid(format!("no invariant {} sections at k={k}", twist.name())));
    }
    let plan = StratifiedPlan::new(action)?;
    let n = basis.len();
    let matrix = (0..n).map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
    let mut k0 = None;
    for kk in (1..=k_max).rev() {
        let ok = match invariant_basis(action, kk, twist) {
            Ok(b) if !b.is_empty() => ray_growth(action, &plan, &b, 6.0)? <= 1e-9,
            Ok(_) => true,
            Err(_) => true,
        };
        if ok {
            k0 = Some(kk);
        } else {
            break;
        }
    }
    Ok(MapMatrix {
        k,
        twist,
        basis_ids: basis.iter().map(|s| s.id()).collect(),
        matrix,
        k0,
    })
}
