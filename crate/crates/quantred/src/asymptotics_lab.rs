//! Density functions `I_k`, `J_k` and their truncations, tail certificates,
//! residual terms `II_k`, unitarity defects of the descent maps and the
//! stratum-by-stratum norm decomposition check.
//!
//! All densities reduce to *fiber integrals* over `𝔪 = 𝔥^⊥`:
//!
//! `F_k(x) = ∫_𝔪 τ(ξ, x) exp(−k f(ξ, x) − [½ ∫₀¹ div JX^ξ]) dξ`,
//!
//! with `f(ξ, x) = 2∫₀¹ φ_ξ(e^{itξ}x) dt` evaluated in telescoped closed
//! form and the divergence integral as the exact log-Jacobian of the
//! imaginary flow (the bracketed term only for half-form sections).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hilbert_spaces::{invariant_basis, GramMatrix, StratifiedPlan};
use crate::kahler_models::{metric_b, PointM};
use crate::numerics::{integrate_de, integrate_half_line, linear_fit, Estimate, QuadConfig, C64};
use crate::reduction_maps::reduced_gram_with;
use crate::strata_flow::{pattern_dim, Slice, SliceMeasure, StratumLabel};
use crate::torus_actions::{
    flow_potential_telescoped, fundamental_fields, isotropy_of_support, jacobian_tau_with,
    log_jacobian_imaginary, moment_map, orbit_volume_with, slice_tangent_basis, support_of,
    IsotropyDescriptor, Twist, WeightAction,
};
use crate::{Error, Result};

const TAU: f64 = std::f64::consts::TAU;
/// Trapezoid nodes on the circle for 2-dimensional `𝔪`.
const ANGULAR_NODES: usize = 32;

/// Precomputed data for fiber integrals at one point.
pub struct Fiber<'a> {
    action: &'a WeightAction,
    iso: IsotropyDescriptor,
    slice_basis: Vec<Vec<C64>>,
    point: PointM,
}

impl<'a> Fiber<'a> {
    pub fn new(action: &'a WeightAction, iso: &IsotropyDescriptor, point: &PointM) -> Fiber<'a> {
        Fiber {
            action,
            iso: iso.clone(),
            slice_basis: slice_tangent_basis(action, iso, point),
            point: point.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.iso.dim_m()
    }

    /// `τ(ξ, x)`; far out along a ray a numerically degenerate Jacobian
    /// contributes zero.
    pub fn tau(&self, xi: &[f64]) -> Result<f64> {
        match jacobian_tau_with(self.action, &self.iso, &self.slice_basis, xi, &self.point) {
            Ok(t) => Ok(t),
            Err(e) if xi.iter().all(|v| *v == 0.0) => Err(e),
            Err(_) => Ok(0.0),
        }
    }

    /// `f(ξ, x)`.
    pub fn potential(&self, xi: &[f64]) -> f64 {
        flow_potential_telescoped(self.action, xi, &self.point)
    }

    /// Integrand `τ e^{−kf − [½ log Jac]}` at `ξ`.
    pub fn integrand(&self, xi: &[f64], k: f64, twist: Twist) -> f64 {
        let mut e = -k * self.potential(xi);
        if twist.is_halfform() {
            e -= 0.5 * log_jacobian_imaginary(self.action, xi, &self.point);
        }
        if !(e > -745.0) {
            return 0.0;
        }
        self.tau(xi).unwrap_or(0.0) * e.exp()
    }

    fn direction(&self, angle: f64) -> Vec<f64> {
        let b = &self.iso.m_basis;
        if b.len() == 1 {
            return if angle == 0.0 { b[0].clone() } else { b[0].iter().map(|v| -v).collect() };
        }
        let (s, c) = angle.sin_cos();
        b[0].iter().zip(&b[1]).map(|(x, y)| c * x + s * y).collect()
    }

    /// Natural length scale of the integrand along `dir`.
    fn scale(&self, dir: &[f64], k: f64) -> f64 {
        let (x, _) = fundamental_fields(self.action, dir, &self.point);
        let g = metric_b(&self.action.model, &x, &x).sqrt();
        let phi: f64 = moment_map(self.action, &self.point).iter().zip(dir).map(|(a, b)| a * b).sum();
        (1.0 / (k.sqrt() * g + 2.0 * k * phi.abs() + 1e-300)).clamp(1e-6, 1.0)
    }

    fn radial(&self, dir: &[f64], k: f64, twist: Twist, region: Region) -> Result<Estimate> {
        let m = self.dim();
        let g = |t: f64| {
            let xi: Vec<f64> = dir.iter().map(|v| v * t).collect();
            t.powi(m as i32 - 1) * self.integrand(&xi, k, twist)
        };
        match region {
            Region::All => integrate_half_line(g, self.scale(dir, k), 1e-11, 80),
            Region::Ball(r) => Ok(integrate_de(g, 0.0, r, 1e-12)),
            Region::Outside(r) => integrate_half_line(|t| g(r + t), self.scale(dir, k), 1e-11, 80),
        }
    }

    /// `∫_𝔪 τ e^{−kf − [½ log Jac]} dξ`, over the ball `|ξ| ≤ R` if a
    /// radius is given. Only `dim 𝔪 ≤ 2` is supported.
    pub fn integral(&self, k: f64, twist: Twist, radius: Option<f64>) -> Result<Estimate> {
        self.integral_over(k, twist, radius.map_or(Region::All, Region::Ball))
    }

    /// The same integral over the complement `|ξ| ≥ R` of the ball.
    pub fn tail(&self, k: f64, twist: Twist, radius: f64) -> Result<Estimate> {
        self.integral_over(k, twist, Region::Outside(radius))
    }

    fn integral_over(&self, k: f64, twist: Twist, region: Region) -> Result<Estimate> {
        match self.dim() {
            0 => Ok(Estimate::exact(match region {
                Region::Outside(_) => 0.0,
                _ => 1.0,
            })),
            1 => {
                let a = self.radial(&self.direction(0.0), k, twist, region)?;
                let b = self.radial(&self.direction(std::f64::consts::PI), k, twist, region)?;
                Ok(a.add(b))
            }
            2 => {
                let vals: Vec<Estimate> = (0..ANGULAR_NODES)
                    .map(|i| self.radial(&self.direction(TAU * i as f64 / ANGULAR_NODES as f64), k, twist, region))
                    .collect::<Result<_>>()?;
                let h = TAU / ANGULAR_NODES as f64;
                let fine: f64 = vals.iter().map(|v| v.value).sum::<f64>() * h;
                let coarse: f64 = vals.iter().step_by(2).map(|v| v.value).sum::<f64>() * 2.0 * h;
                let rad_err: f64 = vals.iter().map(|v| v.stderr).sum::<f64>() * h;
                Ok(Estimate::new(fine, (fine - coarse).abs() + rad_err))
            }
            d => Err(Error::Numerical(format!(
                "fiber quadrature is implemented for dim 𝔪 ≤ 2 (got {d})"
            ))),
        }
    }
}

#[derive(Clone, Copy)]
enum Region {
    All,
    Ball(f64),
    Outside(f64),
}

fn check_label(action: &WeightAction, label: &StratumLabel, x: &PointM) -> Result<IsotropyDescriptor> {
    let iso = isotropy_of_support(action, &support_of(x, 1e-9));
    if !iso.same_type(&label.isotropy) {
        return Err(Error::Invalid(format!(
            "point does not have the isotropy of stratum {}",
            label.name
        )));
    }
    Ok(iso)
}

/// `I_k(x) = vol(G·x)(k/2π)^{m/2} ∫_𝔪 τ e^{−kf}` (1 when `H = G`), for an
/// isotropy descriptor known to match `x`.
pub fn density_i_with(action: &WeightAction, iso: &IsotropyDescriptor, x: &PointM, k: f64) -> Result<Estimate> {
    if iso.is_full {
        return Ok(Estimate::exact(1.0));
    }
    let m = iso.dim_m() as f64;
    let vol = orbit_volume_with(action, iso, x).value;
    Ok(Fiber::new(action, iso, x)
        .integral(k, Twist::Plain, None)?
        .scale(vol * (k / TAU).powf(m / 2.0)))
}

/// `J_k(x) = (2k/2π)^{m/2} ∫_𝔪 τ e^{−kf − ½∫div JX^ξ}` (1 when `H = G`).
pub fn density_j_with(action: &WeightAction, iso: &IsotropyDescriptor, x: &PointM, k: f64) -> Result<Estimate> {
    if iso.is_full {
        return Ok(Estimate::exact(1.0));
    }
    let m = iso.dim_m() as f64;
    Ok(Fiber::new(action, iso, x)
        .integral(k, Twist::Halfform, None)?
        .scale((2.0 * k / TAU).powf(m / 2.0)))
}

/// Density `I_k^{S_(H)}([x])` of the plain norm decomposition.
pub fn density_i(action: &WeightAction, label: &StratumLabel, x: &PointM, k: f64) -> Result<Estimate> {
    let iso = check_label(action, label, x)?;
    density_i_with(action, &iso, x, k)
}

/// Density `J_k^{S_(H)}([x])` of the half-form norm decomposition.
pub fn density_j(action: &WeightAction, label: &StratumLabel, x: &PointM, k: f64) -> Result<Estimate> {
    let iso = check_label(action, label, x)?;
    density_j_with(action, &iso, x, k)
}

/// Truncated densities over `B_R(0) ⊂ 𝔪`: `I_{k,R} = (k/2π)^{m/2}∫_{B_R} τ
/// e^{−kf}` (limit `2^{−m/2}`, no orbit-volume factor) and `J_{k,R}` (limit 1).
pub fn truncated_density(action: &WeightAction, label: &StratumLabel, x: &PointM, k: f64, radius: f64) -> Result<(Estimate, Estimate)> {
    if !(radius > 0.0) {
        return Err(Error::Invalid("truncation radius must be positive".into()));
    }
    let iso = check_label(action, label, x)?;
    if iso.is_full {
        return Ok((Estimate::exact(1.0), Estimate::exact(1.0)));
    }
    let m = iso.dim_m() as f64;
    let fib = Fiber::new(action, &iso, x);
    let i = fib.integral(k, Twist::Plain, Some(radius))?.scale((k / TAU).powf(m / 2.0));
    let j = fib.integral(k, Twist::Halfform, Some(radius))?.scale((2.0 * k / TAU).powf(m / 2.0));
    Ok((i, j))
}

/// Largest radius on a geometric grid (up to 10) such that the quadratic
/// model `ξᵀ Gram ξ` of `f` stays within 25% relative error on `B_R`.
pub fn select_radius(action: &WeightAction, label: &StratumLabel, x: &PointM) -> Result<f64> {
    select_radius_with(action, label, x, 0.25)
}

/// [`select_radius`] with a custom relative tolerance for the quadratic model.
pub fn select_radius_with(action: &WeightAction, label: &StratumLabel, x: &PointM, rel_tol: f64) -> Result<f64> {
    if !(rel_tol > 0.0) {
        return Err(Error::Config("radius tolerance must be positive".into()));
    }
    let iso = check_label(action, label, x)?;
    if iso.is_full {
        return Ok(1.0);
    }
    let fib = Fiber::new(action, &iso, x);
    let dirs: Vec<Vec<f64>> = match iso.dim_m() {
        1 => vec![fib.direction(0.0), fib.direction(std::f64::consts::PI)],
        _ => (0..16).map(|i| fib.direction(TAU * i as f64 / 16.0)).collect(),
    };
    let quad: Vec<f64> = dirs
        .iter()
        .map(|d| {
            let (xv, _) = fundamental_fields(action, d, x);
            metric_b(&action.model, &xv, &xv)
        })
        .collect();
    let mut best = 0.0;
    let mut r = 1e-3;
    while r <= 10.0 {
        let ok = dirs.iter().zip(&quad).all(|(d, q)| {
            let xi: Vec<f64> = d.iter().map(|v| v * r).collect();
            let model = q * r * r;
            (fib.potential(&xi) - model).abs() <= rel_tol * model
        });
        if !ok {
            break;
        }
        best = r;
        r *= 1.25;
    }
    if best == 0.0 {
        return Err(Error::Numerical("no admissible truncation radius".into()));
    }
    Ok(best)
}

/// Empirical constants of an exponential tail bound `tail ≤ b·e^{−R D k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCertificate {
    pub radius: f64,
    /// `D = C/2` with `C = min_{|ξ̂|=1} f(Rξ̂, x)/R` (by convexity of `f`
    /// this is the minimum of `f(tξ̂)/t` over `t ≥ R`).
    pub d: f64,
    pub b: f64,
    pub k_min: f64,
    /// The exponential-growth constant `C`.
    pub c: f64,
    /// Growth rate `a` in `τ(tξ̂) ≤ T e^{a t}` for `t ≥ R`.
    pub tau_rate: f64,
    /// `(k, direct tail, bound)` at the validation grid.
    pub checks: Vec<(f64, f64, f64)>,
    pub validated: bool,
}

fn sphere_area(m: usize) -> f64 {
    match m {
        1 => 2.0,
        2 => TAU,
        _ => f64::NAN,
    }
}

/// Exponential tail bound for the fiber integral outside `B_R`, validated
/// against direct tail quadrature at `k_grid`.
pub fn tail_certificate(action: &WeightAction, label: &StratumLabel, x: &PointM, radius: f64, k_grid: &[f64]) -> Result<TailCertificate> {
    if !(radius > 0.0) {
        return Err(Error::Invalid("tail radius must be positive".into()));
    }
    let iso = check_label(action, label, x)?;
    if iso.is_full {
        return Err(Error::Invalid("no tail for a fixed-point stratum".into()));
    }
    lem_exp_certificate(action, &iso, x, radius, k_grid)
}

/// [`tail_certificate`] for any point and isotropy descriptor (used for
/// extra-piece points off the zero level).
pub fn lem_exp_certificate(action: &WeightAction, iso: &IsotropyDescriptor, x: &PointM, radius: f64, k_grid: &[f64]) -> Result<TailCertificate> {
    let m = iso.dim_m();
    let fib = Fiber::new(action, iso, x);
    let dirs: Vec<Vec<f64>> = match m {
        1 => vec![fib.direction(0.0), fib.direction(std::f64::consts::PI)],
        2 => (0..64).map(|i| fib.direction(TAU * i as f64 / 64.0)).collect(),
        d => return Err(Error::Numerical(format!("tail certificate for dim 𝔪 = {d}"))),
    };
    let scaled = |d: &Vec<f64>, t: f64| -> Vec<f64> { d.iter().map(|v| v * t).collect() };
    let c = dirs
        .iter()
        .map(|d| fib.potential(&scaled(d, radius)) / radius)
        .fold(f64::INFINITY, f64::min);
    if !(c > 0.0) {
        return Err(Error::Numerical(format!(
            "nonpositive exponential-growth constant C = {c:.4e} (the point does not lie on the claimed stratum, or f does not grow linearly)"
        )));
    }
    // τ(tξ̂) ≤ T e^{a t} on a grid t ∈ [R, 64R]
    let ts: Vec<f64> = (0..=24).map(|i| radius * 2f64.powf(i as f64 / 4.0)).collect();
    let logs: Vec<Vec<f64>> = dirs
        .iter()
        .map(|d| ts.iter().map(|&t| fib.tau(&scaled(d, t)).unwrap_or(0.0).max(1e-300).ln()).collect())
        .collect();
    let mut a: f64 = 0.0;
    for l in &logs {
        for w in 1..ts.len() {
            a = a.max((l[w] - l[0]) / (ts[w] - ts[0]));
        }
    }
    let log_t = logs
        .iter()
        .flat_map(|l| l.iter().zip(&ts).map(|(v, t)| v - a * t))
        .fold(f64::NEG_INFINITY, f64::max);
    let tmax = log_t.exp();
    let md = m as f64;
    let bound = |k: f64| -> f64 {
        let beta = k * c - a;
        let poly = if m == 1 { 1.0 / beta } else { radius / beta + 1.0 / (beta * beta) };
        (k / TAU).powf(md / 2.0) * sphere_area(m) * tmax * (-(beta) * radius).exp() * poly
    };
    let k_min = ((2.0 * a + 1.0) / c).max(1.0);
    let d = c / 2.0;
    let mut b: f64 = 0.0;
    let mut k = k_min;
    while k < 1e4 {
        b = b.max(bound(k) * (radius * d * k).exp());
        k *= 1.05;
    }
    let mut checks = Vec::new();
    let mut validated = true;
    for &k in k_grid {
        let tail = fib.tail(k, Twist::Plain, radius)?.value * (k / TAU).powf(md / 2.0);
        let cert = b * (-radius * d * k).exp();
        if k >= k_min && tail > cert {
            validated = false;
        }
        checks.push((k, tail, cert));
    }
    Ok(TailCertificate {
        radius,
        d,
        b,
        k_min,
        c,
        tau_rate: a,
        checks,
        validated,
    })
}

/// `II_k` contributions of the extra pieces of one stratum, per invariant
/// basis section (upstairs diagonal entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub stratum: String,
    pub k: u32,
    pub twist: Twist,
    pub basis_ids: Vec<String>,
    pub per_section: Vec<Estimate>,
    /// Sum over the invariant basis.
    pub total: Estimate,
}

/// Residual term `II_k` (or `ĨI_k`) of the stratum `label`.
pub fn residual_ii(action: &WeightAction, label: &StratumLabel, k: u32, twist: Twist, quad: &QuadConfig) -> Result<ResidualReport> {
    let plan = StratifiedPlan::new(action)?;
    residual_ii_with(action, &plan, label, k, twist, quad)
}

/// [`residual_ii`] with a precomputed stratification.
pub fn residual_ii_with(action: &WeightAction, plan: &StratifiedPlan, label: &StratumLabel, k: u32, twist: Twist, quad: &QuadConfig) -> Result<ResidualReport> {
    let idx = plan
        .strata
        .iter()
        .position(|s| s.name == label.name)
        .ok_or_else(|| Error::Invalid(format!("unknown stratum {}", label.name)))?;
    let basis = invariant_basis(action, k, twist)?;
    let contributions = plan.extra_contributions(action, idx, k, twist, &basis, quad)?;
    let mut per = vec![Estimate::exact(0.0); basis.len()];
    for c in &contributions {
        for (p, v) in per.iter_mut().zip(&c.diag) {
            *p = p.add(*v);
        }
    }
    let total = per.iter().fold(Estimate::exact(0.0), |a, b| a.add(*b));
    Ok(ResidualReport {
        stratum: label.name.clone(),
        k,
        twist,
        basis_ids: basis.iter().map(|s| s.id()).collect(),
        per_section: per,
        total,
    })
}

/// Unitarity defect of the descent map for one pairing of upstairs and
/// downstairs inner products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub k: u32,
    pub twist: Twist,
    pub norm_def_up: u8,
    pub norm_def_down: u8,
    /// `max |λ − 1|` over generalized eigenvalues of `(G_down, G_up)`.
    pub defect: Estimate,
    pub eigenvalues: Vec<Estimate>,
    /// Gram entries whose error exceeded the 20% budget rule.
    pub flagged: Vec<String>,
}

/// Generalized eigenvalues `λ` of `G_down v = λ G_up v` with first-order
/// error bars from the entry errors.
pub fn generalized_spectrum(up: &GramMatrix, down: &GramMatrix) -> Result<Vec<Estimate>> {
    let n = up.matrix.len();
    if n == 0 || down.matrix.len() != n {
        return Err(Error::Invalid("Gram matrices are empty or mismatched".into()));
    }
    // complex Cholesky does not reject negative pivots, so check definiteness first
    if !(up.min_eigenvalue() > 0.0) {
        return Err(Error::Numerical("upstairs Gram matrix is not positive definite (insufficient sampling?)".into()));
    }
    let gu = DMatrix::from_fn(n, n, |a, b| up.matrix[a][b]);
    let gd = DMatrix::from_fn(n, n, |a, b| down.matrix[a][b]);
    let chol = gu
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("upstairs Gram matrix is not positive definite (insufficient sampling?)".into()))?;
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = &linv * gd * linv.adjoint();
    let c = (&c + c.adjoint()).scale(0.5);
    let eig = c.symmetric_eigen();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        // generalized eigenvector v = L^{-H} w
        let w: DVector<C64> = eig.eigenvectors.column(i).into_owned();
        let v = linv.adjoint() * w;
        let mut var = 0.0;
        for a in 0..n {
            for b in 0..n {
                let wab = v[a].norm_sqr() * v[b].norm_sqr();
                var += wab * (down.mc_error[a][b].powi(2) + lam * lam * up.mc_error[a][b].powi(2));
            }
        }
        out.push(Estimate::new(lam, var.sqrt()));
    }
    out.sort_by(|a, b| a.value.partial_cmp(&b.value).expect("finite eigenvalues"));
    Ok(out)
}

/// Defect report from precomputed Gram matrices.
pub fn defect_from_grams(up: &GramMatrix, down: &GramMatrix) -> Result<DefectReport> {
    let eigs = generalized_spectrum(up, down)?;
    let worst = eigs
        .iter()
        .max_by(|a, b| (a.value - 1.0).abs().partial_cmp(&(b.value - 1.0).abs()).expect("finite"))
        .copied()
        .expect("nonempty spectrum");
    let mut flagged = up.flagged.clone();
    flagged.extend(down.flagged.iter().cloned());
    Ok(DefectReport {
        k: up.k,
        twist: up.twist,
        norm_def_up: up.norm_def,
        norm_def_down: down.norm_def,
        defect: Estimate::new((worst.value - 1.0).abs(), worst.stderr),
        eigenvalues: eigs,
        flagged,
    })
}

/// `‖B′*B′ − I‖` (half-form) or `‖A′*A′ − I‖` (plain) for the diagonal
/// pairing of the given norm definition.
pub fn unitarity_defect(action: &WeightAction, k: u32, twist: Twist, norm_def: u8, quad: &QuadConfig) -> Result<DefectReport> {
    let plan = StratifiedPlan::new(action)?;
    let up = plan.gram_upstairs(action, k, twist, norm_def, quad)?;
    let down = reduced_gram_with(action, &plan, k, twist, norm_def, quad)?.gram;
    defect_from_grams(&up, &down)
}

/// All four `(upstairs, downstairs)` norm-definition pairings.
pub fn defect_pairings(action: &WeightAction, plan: &StratifiedPlan, k: u32, twist: Twist, quad: &QuadConfig) -> Result<Vec<DefectReport>> {
    let ups = [plan.gram_upstairs(action, k, twist, 1, quad)?, plan.gram_upstairs(action, k, twist, 2, quad)?];
    let downs = [
        reduced_gram_with(action, plan, k, twist, 1, quad)?.gram,
        reduced_gram_with(action, plan, k, twist, 2, quad)?.gram,
    ];
    let mut out = Vec::new();
    for u in &ups {
        for d in &downs {
            out.push(defect_from_grams(u, d)?);
        }
    }
    Ok(out)
}

/// One stratum line of [`qnsr_consistency`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyLine {
    pub stratum: String,
    /// Direct integral of `Σ_basis |s|²` over `F_∞⁻¹(Z_(H))` (Monte Carlo on
    /// the piece submanifolds, with the per-piece `(k/2π)^{n/2}` factors).
    pub lhs: Estimate,
    /// `(k/2π)^{d_S/2}∫_S |A′s|² I_k ε + II_k` (or the half-form analogue).
    pub rhs: Estimate,
    pub main_part: Estimate,
    pub residual_part: Estimate,
    pub z_score: f64,
    pub relative: f64,
}

/// Report of [`qnsr_consistency`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub k: u32,
    pub twist: Twist,
    pub lines: Vec<ConsistencyLine>,
    pub max_z: f64,
}

/// Stratum-by-stratum check of the norm decomposition: the direct piece
/// integrals against the density-weighted stratum integrals plus residual
/// terms, summed over the invariant basis.
pub fn qnsr_consistency(action: &WeightAction, k: u32, twist: Twist, quad: &QuadConfig) -> Result<ConsistencyReport> {
    let plan = StratifiedPlan::new(action)?;
    qnsr_consistency_with(action, &plan, k, twist, quad)
}

/// [`qnsr_consistency`] with a precomputed stratification.
pub fn qnsr_consistency_with(action: &WeightAction, plan: &StratifiedPlan, k: u32, twist: Twist, quad: &QuadConfig) -> Result<ConsistencyReport> {
    quad.validate()?;
    let basis = invariant_basis(action, k, twist)?;
    let mut lines = Vec::new();
    for (idx, s) in plan.strata.iter().enumerate() {
        let sum = |v: &[Estimate]| v.iter().fold(Estimate::exact(0.0), |a, b| a.add(*b));
        let main = sum(&plan.main_contribution(action, idx, k, twist, &basis, quad)?.diag);
        let extra = plan
            .extra_contributions(action, idx, k, twist, &basis, quad)?
            .iter()
            .fold(Estimate::exact(0.0), |a, c| a.add(sum(&c.diag)));
        let lhs = sum(&plan.direct_piece_integrals(action, idx, k, twist, &basis, quad)?);
        let rhs = main.add(extra);
        lines.push(ConsistencyLine {
            stratum: s.name.clone(),
            z_score: lhs.z_score(rhs),
            relative: if lhs.value != 0.0 { (rhs.value - lhs.value).abs() / lhs.value.abs() } else { rhs.value.abs() },
            lhs,
            rhs,
            main_part: main,
            residual_part: extra,
        });
    }
    let max_z = lines.iter().map(|l| l.z_score).fold(0.0, f64::max);
    Ok(ConsistencyReport { k, twist, lines, max_z })
}

/// Which quantity a [`DensityCurve`] records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    I,
    J,
    II,
    IITilde,
    DefectA,
    DefectB,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::I => "I",
            Quantity::J => "J",
            Quantity::II => "II",
            Quantity::IITilde => "II_tilde",
            Quantity::DefectA => "defect_A",
            Quantity::DefectB => "defect_B",
        }
    }
}

/// One `(k, value, error)` sample of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: f64,
    pub value: f64,
    pub stderr: f64,
}

/// Power-law fit `|value − limit| ≈ C k^{−p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c: f64,
    pub p: f64,
    pub r2: f64,
    pub limit: f64,
}

/// A quantity as a function of `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub quantity: Quantity,
    /// Stratum, piece or pairing the curve refers to.
    pub reference: String,
    pub points: Vec<CurvePoint>,
    pub fitted_rate: Option<RateFit>,
}

impl DensityCurve {
    pub fn new(quantity: Quantity, reference: impl Into<String>, points: Vec<CurvePoint>) -> Result<DensityCurve> {
        if points.windows(2).any(|w| !(w[1].k > w[0].k)) {
            return Err(Error::Invalid("curve k values must be strictly increasing".into()));
        }
        if points.iter().any(|p| !(p.stderr >= 0.0)) {
            return Err(Error::Invalid("curve errors must be nonnegative".into()));
        }
        Ok(DensityCurve {
            quantity,
            reference: reference.into(),
            points,
            fitted_rate: None,
        })
    }

    /// Fit `|value − limit| ≈ C k^{−p}` and store it.
    pub fn fit_rate(&mut self, limit: f64) -> Option<RateFit> {
        let fit = power_law_fit(&self.points, limit);
        self.fitted_rate = fit;
        fit
    }
}

/// Least-squares fit of `log|v − limit|` against `log k`.
pub fn power_law_fit(points: &[CurvePoint], limit: f64) -> Option<RateFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| (p.value - limit).abs() > 0.0)
        .map(|p| (p.k.ln(), (p.value - limit).abs().ln()))
        .unzip();
    if x.len() < 2 {
        return None;
    }
    let (a, b, r2) = linear_fit(&x, &y);
    Some(RateFit {
        c: a.exp(),
        p: -b,
        r2,
        limit,
    })
}

/// Extrapolated `k → ∞` limit from a least-squares fit `v ≈ L + C/k`, with
/// the standard error of `L` (residual-based, floored by the point errors).
pub fn extrapolate_limit(points: &[CurvePoint]) -> Option<Estimate> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.k).collect();
    let y: Vec<f64> = points.iter().map(|p| p.value).collect();
    let (l, c, _) = linear_fit(&x, &y);
    let mx = x.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - l - c * a).powi(2)).sum();
    let s2 = rss / (n as f64 - 2.0);
    let se_res = (s2 * (1.0 / n as f64 + mx * mx / sxx)).sqrt();
    let se_pts = points.iter().map(|p| p.stderr).fold(0.0, f64::max);
    Some(Estimate::new(l, se_res.hypot(se_pts)))
}

/// Complex dimension of the extra-piece patterns (helper for reports).
pub fn piece_dimension(action: &WeightAction, pattern: &[bool]) -> usize {
    pattern_dim(&action.model, pattern)
}

/// Representative points of a slice for pointwise density reports.
pub fn slice_points(action: &WeightAction, slice: &Slice, count: usize, seed: u64) -> Vec<PointM> {
    slice
        .weighted_points(action, SliceMeasure::Quotient, count, seed)
        .into_iter()
        .map(|w| w.point)
        .collect()
}
