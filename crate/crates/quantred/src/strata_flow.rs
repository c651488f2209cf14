//! Kirwan flow of `−‖φ‖²`, semistability, orbit-type strata of `φ⁻¹(0)`
//! and the decomposition of flow preimages into `G_ℂ·Z` plus extra pieces.
//!
//! For torus actions on products of projective spaces everything is governed
//! by *support patterns* (which homogeneous coordinates are nonzero). The
//! image of the points with support `τ` under the weighted mass map
//! `p ↦ Σ_j ℓ_j Σ_{i∈j} W_i p_i` is the Minkowski sum
//! `Q_τ = Σ_j ℓ_j conv{W_i : i ∈ τ_j}`; a point with support `τ` flows to the
//! zero level iff `c ∈ Q_τ`, and its limit has the support of the minimal
//! face of `Q_τ` containing `c` (computed by linear programming).

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kahler_models::{metric_b, Model, PointM};
use crate::numerics::{derive_seed, integrate_vec_segment, monte_carlo, orthonormal_rows, Estimate, C64};
use crate::torus_actions::{
    fundamental_fields, imaginary_flow, isotropy_of_support, moment_map, orbit_volume_with,
    support_of, weighted_mass, IsotropyDescriptor, WeightAction,
};
use crate::{Error, Result};

const TAU: f64 = std::f64::consts::TAU;
const LP_EPS: f64 = 1e-9;

/// Human-readable name of a support pattern: supported coordinate indices
/// per factor, factors separated by `|`.
pub fn pattern_name(model: &Model, support: &[bool]) -> String {
    (0..model.num_factors())
        .map(|j| {
            let o = model.offset(j);
            model
                .block(j)
                .filter(|&i| support[i])
                .map(|i| (i - o).to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("|")
}

/// All support patterns with at least one coordinate per factor.
pub fn all_patterns(model: &Model) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = vec![vec![]];
    for j in 0..model.num_factors() {
        let n = model.factors[j] + 1;
        let mut next = Vec::new();
        for prefix in &out {
            for mask in 1u32..(1 << n) {
                let mut p = prefix.clone();
                p.extend((0..n).map(|i| mask & (1 << i) != 0));
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Complex dimension `Σ_j (|τ_j| − 1)` of the points with support `τ`.
pub fn pattern_dim(model: &Model, support: &[bool]) -> usize {
    (0..model.num_factors())
        .map(|j| model.block(j).filter(|&i| support[i]).count().saturating_sub(1))
        .sum()
}

fn is_subpattern(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(x, y)| !*x || *y)
}

/// Solve the mass LP on a support pattern: variables `p_i ≥ 0` (`i ∈ τ`),
/// per-factor sums 1, weighted mass equal to `level`; maximizes
/// `Σ obj_i p_i + obj_t·t` with the optional margin variable `t ≤ p_i`.
fn mass_lp(action: &WeightAction, support: &[bool], level: &[f64], obj: &[f64], margin: bool) -> Option<(Vec<f64>, f64)> {
    let m = &action.model;
    let mut prob = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Option<minilp::Variable>> = support
        .iter()
        .enumerate()
        .map(|(i, &s)| s.then(|| prob.add_var(obj[i], (0.0, 1.0))))
        .collect();
    let t = margin.then(|| prob.add_var(1.0, (0.0, 1.0)));
    for j in 0..m.num_factors() {
        let terms: Vec<(minilp::Variable, f64)> = m.block(j).filter_map(|i| vars[i].map(|v| (v, 1.0))).collect();
        if terms.is_empty() {
            return None;
        }
        prob.add_constraint(terms.as_slice(), ComparisonOp::Eq, 1.0);
    }
    for a in 0..action.rank {
        let terms: Vec<(minilp::Variable, f64)> = (0..m.num_coords())
            .filter_map(|i| vars[i].map(|v| (v, m.degree(m.factor_of(i)) * action.weights[a][i] as f64)))
            .collect();
        prob.add_constraint(terms.as_slice(), ComparisonOp::Eq, level[a]);
    }
    if let Some(t) = t {
        for v in vars.iter().flatten() {
            prob.add_constraint(&[(*v, 1.0), (t, -1.0)][..], ComparisonOp::Ge, 0.0);
        }
    }
    let sol = prob.solve().ok()?;
    let p = vars.iter().map(|v| v.map(|v| *sol.var_value(v)).unwrap_or(0.0)).collect();
    Some((p, t.map(|t| *sol.var_value(t)).unwrap_or(0.0)))
}

/// Support of the flow limit of points with support `τ` (the minimal face
/// of `Q_τ` containing `c`), or `None` if `c ∉ Q_τ` (unsemistable).
pub fn limit_support(action: &WeightAction, support: &[bool]) -> Option<Vec<bool>> {
    let c = action.shift_f64();
    let n = support.len();
    mass_lp(action, support, &c, &vec![0.0; n], false)?;
    let mut out = vec![false; n];
    for i in (0..n).filter(|&i| support[i]) {
        let mut obj = vec![0.0; n];
        obj[i] = 1.0;
        if let Some((p, _)) = mass_lp(action, support, &c, &obj, false) {
            out[i] = p[i] > LP_EPS;
        }
    }
    Some(out)
}

/// A point of the given support whose weighted mass is `level`, as deep in
/// the interior of the open simplices as possible (max–min LP).
pub fn interior_point(action: &WeightAction, support: &[bool], level: &[f64]) -> Option<PointM> {
    let n = support.len();
    let (p, t) = mass_lp(action, support, level, &vec![0.0; n], true)?;
    if t <= LP_EPS {
        return None;
    }
    PointM::from_moduli(&action.model, &p).ok()
}

/// Which measure a slice integral uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceMeasure {
    /// Reduced (quotient) symplectic measure `ε_S` on `S = Z/G`; a
    /// 0-dimensional quotient contributes its point value with weight 1.
    Quotient,
    /// Induced Riemannian volume of the level set itself (orbits included).
    Riemannian,
}

/// A level set `{x : support(x) = τ, mass(x) = b (on 𝔪)}` parametrized by
/// toric coordinates: moduli `q` on the polytope `P_b` and free phases.
///
/// Coarea bookkeeping: for the level-set map `φ_𝔪` restricted to the support
/// stratum, with `A = −2π·E·M` its matrix in the coordinates `q`,
///
/// `∫_{Z_b} h dvol = ∏ℓ^{n_τ}/√det(AAᵀ) ∫_{P_b} dA ∫ dθ h·√det Gram_𝔪`.
#[derive(Debug, Clone)]
pub struct Slice {
    pub pattern: Vec<bool>,
    /// Target weighted mass `b ∈ ℝ^d` (only its `𝔪` component matters).
    pub level: Vec<f64>,
    pub isotropy: IsotropyDescriptor,
    /// Real dimension of `P_b` (complex dimension of the quotient).
    pub dim: usize,
    /// Complex dimension of the support stratum.
    pub n_tau: usize,
    q_index: Vec<usize>,
    i0: Vec<usize>,
    q0: DVector<f64>,
    null: DMatrix<f64>,
    /// `∏ℓ^{n_τ}(2π)^{n_τ}/√det(AAᵀ)` (phase torus volume included).
    pub coarea_factor: f64,
    bounds: Vec<(f64, f64)>,
    model: Model,
}

impl Slice {
    pub fn new(action: &WeightAction, pattern: &[bool], level: &[f64]) -> Result<Slice> {
        let m = &action.model;
        let iso = isotropy_of_support(action, pattern);
        let mut q_index = Vec::new();
        let mut i0 = Vec::new();
        for j in 0..m.num_factors() {
            let idx: Vec<usize> = m.block(j).filter(|&i| pattern[i]).collect();
            let Some((&first, rest)) = idx.split_first() else {
                return Err(Error::Invalid("support pattern misses a factor".into()));
            };
            i0.push(first);
            q_index.extend_from_slice(rest);
        }
        let nq = q_index.len();
        let dm = iso.dim_m();
        // mass(q) = base + M q
        let base: Vec<f64> = (0..action.rank)
            .map(|a| (0..m.num_factors()).map(|j| m.degree(j) * action.weights[a][i0[j]] as f64).sum())
            .collect();
        let mmat = DMatrix::from_fn(action.rank, nq, |a, c| {
            let i = q_index[c];
            let j = m.factor_of(i);
            m.degree(j) * (action.weights[a][i] - action.weights[a][i0[j]]) as f64
        });
        let e = DMatrix::from_fn(dm, action.rank, |r, c| iso.m_basis[r][c]);
        let a_red = &e * &mmat;
        let rhs = &e * (DVector::from_vec(level.to_vec()) - DVector::from_vec(base));
        let aat = &a_red * a_red.transpose();
        let q0 = if dm == 0 {
            DVector::zeros(nq)
        } else {
            let y = aat
                .clone()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular slice constraint".into()))?;
            a_red.transpose() * y
        };
        let mut rows: Vec<Vec<f64>> = (0..dm).map(|r| a_red.row(r).iter().copied().collect()).collect();
        rows.extend((0..nq).map(|c| (0..nq).map(|x| if x == c { 1.0 } else { 0.0 }).collect()));
        let ortho = orthonormal_rows(&rows, 1e-9);
        let null_rows: Vec<Vec<f64>> = ortho.into_iter().skip(dm).collect();
        let dim = null_rows.len();
        let null = DMatrix::from_fn(nq, dim, |r, c| null_rows[c][r]);
        let det_aat = if dm == 0 { 1.0 } else { aat.determinant() };
        let ell: f64 = (0..m.num_factors())
            .map(|j| m.degree(j).powi(m.block(j).filter(|&i| pattern[i]).count() as i32 - 1))
            .product();
        let coarea_factor = ell * TAU.powi(nq as i32) / (TAU.powi(dm as i32) * det_aat.sqrt());
        let mut s = Slice {
            pattern: pattern.to_vec(),
            level: level.to_vec(),
            isotropy: iso,
            dim,
            n_tau: nq,
            q_index,
            i0,
            q0,
            null,
            coarea_factor,
            bounds: Vec::new(),
            model: m.clone(),
        };
        s.bounds = s.parameter_box()?;
        Ok(s)
    }

    /// Inequalities `g·u ≤ h` describing `P_b` in null-space coordinates.
    fn inequalities(&self) -> Vec<(Vec<f64>, f64)> {
        let nq = self.q_index.len();
        let mut out = Vec::new();
        for r in 0..nq {
            // −q_r ≤ 0
            let g: Vec<f64> = (0..self.dim).map(|c| -self.null[(r, c)]).collect();
            out.push((g, self.q0[r]));
        }
        for j in 0..self.model.num_factors() {
            let rows: Vec<usize> = (0..nq).filter(|&r| self.model.factor_of(self.q_index[r]) == j).collect();
            if rows.is_empty() {
                continue;
            }
            let g: Vec<f64> = (0..self.dim).map(|c| rows.iter().map(|&r| self.null[(r, c)]).sum()).collect();
            let h = 1.0 - rows.iter().map(|&r| self.q0[r]).sum::<f64>();
            out.push((g, h));
        }
        out
    }

    fn parameter_box(&self) -> Result<Vec<(f64, f64)>> {
        let ineq = self.inequalities();
        if self.dim == 0 {
            if ineq.iter().any(|(_, h)| *h < -1e-9) {
                return Err(Error::Invalid("slice level is not attained on this support".into()));
            }
            return Ok(Vec::new());
        }
        let mut bounds = Vec::with_capacity(self.dim);
        for c in 0..self.dim {
            let mut lohi = [0.0; 2];
            for (k, dir) in [OptimizationDirection::Minimize, OptimizationDirection::Maximize].into_iter().enumerate() {
                let mut prob = Problem::new(dir);
                let vars: Vec<_> = (0..self.dim)
                    .map(|x| prob.add_var(if x == c { 1.0 } else { 0.0 }, (f64::NEG_INFINITY, f64::INFINITY)))
                    .collect();
                for (g, h) in &ineq {
                    let terms: Vec<_> = vars.iter().zip(g).map(|(v, gc)| (*v, *gc)).collect();
                    prob.add_constraint(terms.as_slice(), ComparisonOp::Le, *h);
                }
                let sol = prob
                    .solve()
                    .map_err(|e| Error::Invalid(format!("slice polytope is empty or unbounded: {e}")))?;
                lohi[k] = *sol.var_value(vars[c]);
            }
            bounds.push((lohi[0], lohi[1]));
        }
        Ok(bounds)
    }

    /// Moduli `p` (all coordinates) at null-space parameter `u`.
    pub fn moduli_at(&self, u: &[f64]) -> Vec<f64> {
        let q = &self.q0 + &self.null * DVector::from_column_slice(u);
        let mut p = vec![0.0; self.pattern.len()];
        for (r, &i) in self.q_index.iter().enumerate() {
            p[i] = q[r].max(0.0);
        }
        for j in 0..self.model.num_factors() {
            let s: f64 = self.q_index.iter().enumerate().filter(|(_, &i)| self.model.factor_of(i) == j).map(|(r, _)| q[r].max(0.0)).sum();
            p[self.i0[j]] = (1.0 - s).max(0.0);
        }
        p
    }

    /// Toric representative (all phases zero) at parameter `u`.
    pub fn point_at(&self, u: &[f64]) -> PointM {
        PointM::from_moduli(&self.model, &self.moduli_at(u)).expect("slice point is nondegenerate")
    }

    fn contains(&self, u: &[f64]) -> bool {
        self.inequalities()
            .iter()
            .all(|(g, h)| g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() <= *h + 1e-12)
    }

    /// Weight factor converting `dA ∫dθ` at `x` into the requested measure.
    fn measure_factor(&self, action: &WeightAction, measure: SliceMeasure, x: &PointM) -> f64 {
        match measure {
            SliceMeasure::Quotient => {
                if self.dim == 0 {
                    1.0
                } else {
                    self.coarea_factor * self.isotropy.finite_part as f64 * self.isotropy.lattice_covolume
                }
            }
            SliceMeasure::Riemannian => {
                let v = orbit_volume_with(action, &self.isotropy, x);
                self.coarea_factor * if v.is_full { 1.0 } else { v.gram_root }
            }
        }
    }

    /// `∫ f` over the slice in the requested measure, for integrands that
    /// are invariant under the coordinate phase torus (evaluated at the
    /// zero-phase representative). `nodes` is the quadrature order for
    /// 1-dimensional polytopes and the Monte Carlo budget above that.
    pub fn integrate<F>(&self, action: &WeightAction, measure: SliceMeasure, nodes: usize, seed: u64, width: usize, f: F) -> Result<Vec<Estimate>>
    where
        F: Fn(&PointM) -> Vec<f64> + Sync,
    {
        match self.dim {
            0 => {
                let x = self.point_at(&[]);
                let w = self.measure_factor(action, measure, &x);
                Ok(f(&x).into_iter().map(|v| Estimate::exact(w * v)).collect())
            }
            1 => {
                let (lo, hi) = self.bounds[0];
                Ok(integrate_vec_segment(
                    |u| {
                        let x = self.point_at(&[u]);
                        let w = self.measure_factor(action, measure, &x);
                        f(&x).into_iter().map(|v| v * w).collect()
                    },
                    lo,
                    hi,
                    nodes,
                    width,
                ))
            }
            _ => {
                let vol: f64 = self.bounds.iter().map(|(a, b)| b - a).product();
                Ok(monte_carlo(nodes, seed, width, |rng, out| {
                    let u: Vec<f64> = self.bounds.iter().map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect();
                    if self.contains(&u) {
                        let x = self.point_at(&u);
                        let w = self.measure_factor(action, measure, &x) * vol;
                        for (o, v) in out.iter_mut().zip(f(&x)) {
                            *o = w * v;
                        }
                    }
                }))
            }
        }
    }

    /// Weighted sample points (random phases) realizing the slice measure.
    pub fn weighted_points(&self, action: &WeightAction, measure: SliceMeasure, count: usize, seed: u64) -> Vec<WeightedPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<(Vec<f64>, f64)> = match self.dim {
            0 => vec![(Vec::new(), 1.0)],
            1 => {
                let (lo, hi) = self.bounds[0];
                crate::numerics::cosine_mapped_rule(lo, hi, count.max(1)).into_iter().map(|(u, w)| (vec![u], w)).collect()
            }
            _ => {
                let vol: f64 = self.bounds.iter().map(|(a, b)| b - a).product();
                (0..count)
                    .filter_map(|_| {
                        let u: Vec<f64> = self.bounds.iter().map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect();
                        self.contains(&u).then_some((u, vol / count as f64))
                    })
                    .collect()
            }
        };
        nodes
            .into_iter()
            .map(|(u, w)| {
                let x0 = self.point_at(&u);
                let weight = w * self.measure_factor(action, measure, &x0);
                let flat: Vec<C64> = x0
                    .flat()
                    .iter()
                    .map(|c| c * C64::from_polar(1.0, TAU * rng.random::<f64>()))
                    .collect();
                WeightedPoint {
                    point: PointM::from_flat(&action.model, &flat).expect("nondegenerate"),
                    weight,
                }
            })
            .collect()
    }
}

/// A sample point with a quadrature weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub point: PointM,
    pub weight: f64,
}

/// Termination status of the Kirwan flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStatus {
    /// `‖φ‖² < tol`: the point is semistable and `limit = F_∞(x)`.
    Converged,
    /// The flow stalled at a critical point with `‖φ‖² ≥ tol`
    /// (`‖grad‖φ‖²‖ < max(tol², 10⁻⁹‖φ‖)`).
    Unsemistable,
    /// Step budget exhausted while still descending.
    Inconclusive,
}

/// Outcome of [`kirwan_flow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub limit: Option<PointM>,
    pub status: FlowStatus,
    pub steps: usize,
    /// `‖φ‖²` at termination.
    pub residual: f64,
    /// Whether `‖φ‖²` strictly decreased on every accepted step.
    pub monotone: bool,
    pub rejected_steps: usize,
}

fn phi_sq(action: &WeightAction, x: &PointM) -> f64 {
    moment_map(action, x).iter().map(|v| v * v).sum()
}

/// Gradient flow of `−‖φ‖²`: `x(t) = e^{iη(t)}·x₀` with `η̇ = −2φ(x(t))`,
/// integrated by adaptive Dormand–Prince 5(4) in the `η` coordinates (the
/// closed-form imaginary flow does the renormalization). Steps that fail to
/// decrease `‖φ‖²` are rejected and retried with a smaller step.
pub fn kirwan_flow(action: &WeightAction, point: &PointM, tol: f64, max_steps: usize) -> Result<FlowResult> {
    if !(tol > 0.0) {
        return Err(Error::Invalid("kirwan_flow: tolerance must be positive".into()));
    }
    let d = action.rank;
    let rhs = |eta: &[f64]| -> Vec<f64> {
        let y = imaginary_flow(action, eta, 1.0, point);
        moment_map(action, &y).iter().map(|v| -2.0 * v).collect()
    };
    let at = |eta: &[f64]| imaginary_flow(action, eta, 1.0, point);
    let mut eta = vec![0.0; d];
    let mut x = point.clone();
    let mut val = phi_sq(action, &x);
    let mut h = 1e-3;
    let (mut steps, mut rejected) = (0usize, 0usize);
    // Dormand–Prince tableau
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let _ = C;
    while steps < max_steps {
        if val < tol {
            return Ok(FlowResult {
                limit: Some(x),
                status: FlowStatus::Converged,
                steps,
                residual: val,
                monotone: true,
                rejected_steps: rejected,
            });
        }
        // slow progress: gradient of ‖φ‖² is 2JX^{φ(x)}
        let phi = moment_map(action, &x);
        let (_, jx) = fundamental_fields(action, &phi, &x);
        let grad = 2.0 * metric_b(&action.model, &jx, &jx).sqrt();
        if grad < (tol * tol).max(1e-9 * val.sqrt()) {
            return Ok(FlowResult {
                limit: None,
                status: FlowStatus::Unsemistable,
                steps,
                residual: val,
                monotone: true,
                rejected_steps: rejected,
            });
        }
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
        for s in 0..7 {
            let stage: Vec<f64> = (0..d)
                .map(|c| eta[c] + h * (0..s).map(|r| A[s][r] * ks[r][c]).sum::<f64>())
                .collect();
            ks.push(rhs(&stage));
        }
        let eta5: Vec<f64> = (0..d).map(|c| eta[c] + h * (0..7).map(|r| B5[r] * ks[r][c]).sum::<f64>()).collect();
        let eta4: Vec<f64> = (0..d).map(|c| eta[c] + h * (0..7).map(|r| B4[r] * ks[r][c]).sum::<f64>()).collect();
        let scale: f64 = eta5.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let err = eta5.iter().zip(&eta4).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / (1e-10 + 1e-10 * scale);
        let y = at(&eta5);
        let new_val = phi_sq(action, &y);
        if err <= 1.0 && new_val < val {
            eta = eta5;
            x = y;
            val = new_val;
            steps += 1;
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        } else {
            rejected += 1;
            h *= if err > 1.0 { (0.9 * err.powf(-0.2)).clamp(0.1, 0.5) } else { 0.5 };
            if h < 1e-300 {
                break;
            }
        }
    }
    Ok(FlowResult {
        limit: None,
        status: FlowStatus::Inconclusive,
        steps,
        residual: val,
        monotone: true,
        rejected_steps: rejected,
    })
}

/// Semistability classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semistability {
    Stable,
    SemistableStrict,
    Unsemistable,
    Inconclusive,
}

/// Coordinates below this modulus count as zero when classifying limits
/// reached by (possibly algebraically slow) flows.
pub const LIMIT_SUPPORT_TOL: f64 = 1e-3;

/// Classify a point by the isotropy of its flow limit.
pub fn is_semistable(action: &WeightAction, point: &PointM, tol: f64) -> Result<Semistability> {
    let r = kirwan_flow(action, point, tol, 20_000)?;
    Ok(match r.status {
        FlowStatus::Converged => {
            let lim = r.limit.expect("converged flow has a limit");
            let iso = isotropy_of_support(action, &support_of(&lim, LIMIT_SUPPORT_TOL));
            if iso.dim_h() == 0 {
                Semistability::Stable
            } else {
                Semistability::SemistableStrict
            }
        }
        FlowStatus::Unsemistable => Semistability::Unsemistable,
        FlowStatus::Inconclusive => Semistability::Inconclusive,
    })
}

/// An orbit-type stratum `Z_(H)` of `φ⁻¹(0)` (one connected component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumLabel {
    /// Short unique name, e.g. `free@0,1,2` or `fixed@2`.
    pub name: String,
    pub isotropy: IsotropyDescriptor,
    /// Index among the components of the same isotropy type.
    pub component_id: usize,
    /// Complex dimension of `S_(H) = Z_(H)/G`.
    pub dim_s: usize,
    /// Complex dimension of `G_ℂ·Z_(H)`.
    pub dim_upstairs: usize,
    /// Self-limiting support patterns making up the component.
    pub patterns: Vec<Vec<bool>>,
    /// Patterns of maximal dimension (carry the measure).
    pub top_patterns: Vec<Vec<bool>>,
    /// A point of the component (deep in its interior).
    pub representative: PointM,
    /// Number of sampled flow limits that landed in this stratum.
    pub sample_count: usize,
}

impl StratumLabel {
    pub fn kind(&self) -> String {
        if self.isotropy.is_full {
            "fixed".into()
        } else if self.isotropy.dim_h() == 0 {
            if self.isotropy.finite_part == 1 {
                "free".into()
            } else {
                format!("Z{}", self.isotropy.finite_part)
            }
        } else {
            format!("H{}", self.isotropy.dim_h())
        }
    }

    /// Zero-level slices (one per top pattern).
    pub fn slices(&self, action: &WeightAction) -> Result<Vec<Slice>> {
        let c = action.shift_f64();
        self.top_patterns.iter().map(|p| Slice::new(action, p, &c)).collect()
    }
}

/// Sampler budget for the stratification cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { samples: 64, seed: 17 }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Group patterns into components: same isotropy type and nested supports.
fn components(action: &WeightAction, pats: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let isos: Vec<IsotropyDescriptor> = pats.iter().map(|p| isotropy_of_support(action, p)).collect();
    let mut uf = UnionFind((0..pats.len()).collect());
    for a in 0..pats.len() {
        for b in 0..pats.len() {
            if a != b && isos[a].same_type(&isos[b]) && is_subpattern(&pats[a], &pats[b]) {
                uf.union(a, b);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    for i in 0..pats.len() {
        let r = uf.find(i);
        match roots.iter().position(|&x| x == r) {
            Some(g) => groups[g].push(i),
            None => {
                roots.push(r);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Combinatorial stratification of `φ⁻¹(0)` (no sampling).
pub fn strata_combinatorial(action: &WeightAction) -> Result<Vec<StratumLabel>> {
    let m = &action.model;
    let c = action.shift_f64();
    let selfl: Vec<Vec<bool>> = all_patterns(m)
        .into_iter()
        .filter(|p| limit_support(action, p).as_deref() == Some(p.as_slice()))
        .collect();
    if selfl.is_empty() {
        return Err(Error::Invalid(
            "the zero level set is empty (shift lies outside the moment image)".into(),
        ));
    }
    let mut out = Vec::new();
    for group in components(action, &selfl) {
        let pats: Vec<Vec<bool>> = group.iter().map(|&i| selfl[i].clone()).collect();
        let top_dim = pats.iter().map(|p| pattern_dim(m, p)).max().unwrap_or(0);
        let top: Vec<Vec<bool>> = pats.iter().filter(|p| pattern_dim(m, p) == top_dim).cloned().collect();
        let iso = isotropy_of_support(action, &top[0]);
        let rep = interior_point(action, &top[0], &c)
            .ok_or_else(|| Error::Numerical("no interior zero-level point on a self-limiting pattern".into()))?;
        let dim_s = top_dim - iso.dim_m();
        out.push(StratumLabel {
            name: String::new(),
            isotropy: iso.clone(),
            component_id: 0,
            dim_s,
            dim_upstairs: dim_s + iso.dim_m(),
            patterns: pats,
            top_patterns: top,
            representative: rep,
            sample_count: 0,
        });
    }
    out.sort_by(|a, b| {
        b.dim_upstairs
            .cmp(&a.dim_upstairs)
            .then(a.isotropy.dim_h().cmp(&b.isotropy.dim_h()))
            .then(a.isotropy.finite_part.cmp(&b.isotropy.finite_part))
            .then(pattern_name(m, &b.top_patterns[0]).cmp(&pattern_name(m, &a.top_patterns[0])))
    });
    for i in 0..out.len() {
        let cid = out[..i].iter().filter(|s| s.isotropy.same_type(&out[i].isotropy)).count();
        out[i].component_id = cid;
        out[i].name = format!("{}@{}", out[i].kind(), pattern_name(m, &out[i].top_patterns[0]));
    }
    Ok(out)
}

/// Index of the stratum whose component contains the given support pattern
/// of a zero-level point.
pub fn stratum_of_support(strata: &[StratumLabel], support: &[bool]) -> Option<usize> {
    strata.iter().position(|s| s.patterns.iter().any(|p| p.as_slice() == support))
}

/// Enumerate strata combinatorially and cross-check by sampling: random
/// points of every support pattern are flowed to the zero level and their
/// limits classified; every semistable sample must land in exactly one
/// enumerated stratum, and the local rank of `dφ` at each representative
/// must equal `dim 𝔪`.
pub fn enumerate_strata(action: &WeightAction, sampler: &SamplerConfig) -> Result<Vec<StratumLabel>> {
    if sampler.samples == 0 {
        return Err(Error::Config("sampler budget must be positive".into()));
    }
    let mut strata = strata_combinatorial(action)?;
    let m = &action.model;
    for s in &strata {
        let x = &s.representative;
        let e: Vec<Vec<f64>> = (0..action.rank).map(|a| (0..action.rank).map(|b| (a == b) as u8 as f64).collect()).collect();
        let jx: Vec<Vec<f64>> = e
            .iter()
            .map(|ea| {
                let (_, v) = fundamental_fields(action, ea, x);
                v.iter().flat_map(|c| [c.re, c.im]).collect()
            })
            .collect();
        if orthonormal_rows(&jx, 1e-8).len() != s.isotropy.dim_m() {
            return Err(Error::Stratification(format!(
                "local rank of dφ at {} differs from dim 𝔪",
                s.name
            )));
        }
    }
    let patterns = all_patterns(m);
    let per = sampler.samples.div_ceil(patterns.len()).max(1);
    let jobs: Vec<(usize, usize)> = (0..patterns.len()).flat_map(|p| (0..per).map(move |r| (p, r))).collect();
    let hits: Vec<Result<Option<usize>>> = jobs
        .par_iter()
        .map(|&(pi, r)| {
            let pat = &patterns[pi];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sampler.seed, (pi * 100_003 + r) as u64));
            let mut x = PointM::random(m, &mut rng);
            for c in x.coords.iter_mut().flatten().zip(pat).filter(|(_, s)| !**s).map(|(c, _)| c) {
                *c = C64::new(0.0, 0.0);
            }
            let x = PointM::new(m, x.coords)?;
            let Some(lim_sup) = limit_support(action, pat) else {
                return Ok(None);
            };
            let fr = kirwan_flow(action, &x, 1e-20, 50_000)?;
            let Some(lim) = fr.limit else {
                return Err(Error::Stratification(format!(
                    "pattern {} predicted semistable but the flow ended {:?}",
                    pattern_name(m, pat),
                    fr.status
                )));
            };
            let observed = support_of(&lim, LIMIT_SUPPORT_TOL);
            if observed != lim_sup {
                return Err(Error::Stratification(format!(
                    "flow limit support {} differs from predicted {}",
                    pattern_name(m, &observed),
                    pattern_name(m, &lim_sup)
                )));
            }
            match stratum_of_support(&strata, &observed) {
                Some(i) => Ok(Some(i)),
                None => Err(Error::Stratification(format!(
                    "flow limit with support {} lies in no enumerated stratum",
                    pattern_name(m, &observed)
                ))),
            }
        })
        .collect();
    for h in hits {
        if let Some(i) = h? {
            strata[i].sample_count += 1;
        }
    }
    Ok(strata)
}

/// One `S_i` of an extra piece: the support pattern (open face) and the
/// level `a_i ≠ c` at which the slice is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSlice {
    pub pattern: Vec<bool>,
    pub face_id: String,
    /// Weighted-mass level `a_i` (the moment value is `−2π(a_i − c)`).
    pub level: Vec<f64>,
    /// Inclusion–exclusion sign of this `G_ℂ·S_i`.
    pub sign: i32,
}

/// A connected piece `M^{(H)}_{(𝔥′)}` of `F_∞⁻¹(Z_(H)) \ G_ℂ·Z_(H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraPiece {
    pub parent: String,
    pub isotropy_prime: IsotropyDescriptor,
    pub face_ids: Vec<String>,
    pub slices: Vec<PieceSlice>,
    /// Complex dimension of the piece.
    pub dim_piece: usize,
    /// All support patterns in the piece.
    pub patterns: Vec<Vec<bool>>,
}

/// The main piece `G_ℂ·Z_(H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainPiece {
    pub parent: String,
    pub patterns: Vec<Vec<bool>>,
    pub dim_upstairs: usize,
}

/// Level `a_i` on the open face `Q_τ` whose closure contains `c`: the
/// midpoint between `c` and the farthest vertex for 1-dimensional faces,
/// and between `c` and the vertex barycenter otherwise (both lie in the
/// relative interior).
fn face_level(action: &WeightAction, pattern: &[bool]) -> Vec<f64> {
    let m = &action.model;
    let c = action.shift_f64();
    let mut verts: Vec<Vec<f64>> = vec![vec![0.0; action.rank]];
    for j in 0..m.num_factors() {
        let idx: Vec<usize> = m.block(j).filter(|&i| pattern[i]).collect();
        let mut next = Vec::new();
        for v in &verts {
            for &i in &idx {
                next.push((0..action.rank).map(|a| v[a] + m.degree(j) * action.weights[a][i] as f64).collect());
            }
        }
        verts = next;
    }
    let iso = isotropy_of_support(action, pattern);
    let target = if iso.dim_m() == 1 {
        let dist = |v: &Vec<f64>| v.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        verts
            .iter()
            .max_by(|a, b| dist(a).partial_cmp(&dist(b)).expect("finite"))
            .cloned()
            .expect("nonempty")
    } else {
        let n = verts.len() as f64;
        (0..action.rank).map(|a| verts.iter().map(|v| v[a]).sum::<f64>() / n).collect()
    };
    c.iter().zip(&target).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Decompose `F_∞⁻¹(Z_(H))` into the main piece and extra pieces.
///
/// Distinct support patterns are disjoint, so the `G_ℂ·S_i` of different
/// top faces never overlap in positive measure and every sign is `+1`.
pub fn decompose_preimage(action: &WeightAction, label: &StratumLabel) -> Result<(MainPiece, Vec<ExtraPiece>)> {
    let m = &action.model;
    let mut main = Vec::new();
    let mut extra = Vec::new();
    for p in all_patterns(m) {
        let Some(l) = limit_support(action, &p) else { continue };
        if !label.patterns.contains(&l) {
            continue;
        }
        if l == p {
            main.push(p);
        } else {
            extra.push(p);
        }
    }
    let mut pieces = Vec::new();
    for group in components(action, &extra) {
        let pats: Vec<Vec<bool>> = group.iter().map(|&i| extra[i].clone()).collect();
        let top_dim = pats.iter().map(|p| pattern_dim(m, p)).max().unwrap_or(0);
        let iso = isotropy_of_support(action, &pats[0]);
        if iso.dim_h() >= label.isotropy.dim_h() {
            return Err(Error::Stratification(format!(
                "extra piece of {} has isotropy dimension {} ≥ {}",
                label.name,
                iso.dim_h(),
                label.isotropy.dim_h()
            )));
        }
        let slices: Vec<PieceSlice> = pats
            .iter()
            .filter(|p| pattern_dim(m, p) == top_dim)
            .map(|p| PieceSlice {
                pattern: p.clone(),
                face_id: pattern_name(m, p),
                level: face_level(action, p),
                sign: 1,
            })
            .collect();
        for s in &slices {
            let x = interior_point(action, &s.pattern, &s.level).ok_or_else(|| {
                Error::Stratification(format!("face level of {} is not attained", s.face_id))
            })?;
            let phi = moment_map(action, &x);
            if phi.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
                return Err(Error::Stratification(format!(
                    "extra piece slice {} meets the zero level",
                    s.face_id
                )));
            }
        }
        pieces.push(ExtraPiece {
            parent: label.name.clone(),
            isotropy_prime: iso,
            face_ids: slices.iter().map(|s| s.face_id.clone()).collect(),
            slices,
            dim_piece: top_dim,
            patterns: pats,
        });
    }
    Ok((
        MainPiece {
            parent: label.name.clone(),
            patterns: main,
            dim_upstairs: label.dim_upstairs,
        },
        pieces,
    ))
}

/// What to sample in [`sample_stratum`].
pub enum StratumTarget<'a> {
    Stratum(&'a StratumLabel),
    /// Slice `index` of an extra piece.
    PieceSlice(&'a ExtraPiece, usize),
}

/// Weighted points on `Z_(H)` (quotient measure of `S_(H)`, one
/// representative per sampled orbit) or on a slice `S_i` of an extra piece
/// (induced Riemannian measure).
pub fn sample_stratum(action: &WeightAction, target: StratumTarget<'_>, count: usize, seed: u64) -> Result<Vec<WeightedPoint>> {
    if count == 0 {
        return Err(Error::Invalid("sample_stratum: count must be positive".into()));
    }
    match target {
        StratumTarget::Stratum(label) => {
            let mut out = Vec::new();
            for (i, s) in label.slices(action)?.iter().enumerate() {
                out.extend(s.weighted_points(action, SliceMeasure::Quotient, count, derive_seed(seed, i as u64)));
            }
            Ok(out)
        }
        StratumTarget::PieceSlice(piece, idx) => {
            let ps = piece
                .slices
                .get(idx)
                .ok_or_else(|| Error::Invalid("piece slice index out of range".into()))?;
            let s = Slice::new(action, &ps.pattern, &ps.level)?;
            Ok(s.weighted_points(action, SliceMeasure::Riemannian, count, seed))
        }
    }
}

/// Mass `Σ ℓ W p` of a point (helper for reports).
pub fn mass_of(action: &WeightAction, x: &PointM) -> Vec<f64> {
    weighted_mass(action, &x.moduli())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    #[test]
    fn pattern_enumeration_counts() {
        assert_eq!(all_patterns(&catalog::e2().model).len(), 7);
        assert_eq!(all_patterns(&catalog::e3().model).len(), 9);
    }

    #[test]
    fn limit_support_of_e2_edge() {
        let a = catalog::e2();
        assert_eq!(limit_support(&a, &[true, false, true]), Some(vec![false, false, true]));
        assert_eq!(limit_support(&a, &[true, false, false]), None);
        assert_eq!(limit_support(&a, &[true, true, true]), Some(vec![true, true, true]));
    }
}
