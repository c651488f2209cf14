mod common;

use common::{flow_potential_closed, TAU};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use quantred::asymptotics_lab::*;
use quantred::catalog;
use quantred::hilbert_spaces::{invariant_basis, SectionPoly, StratifiedPlan};
use quantred::kahler_models::PointM;
use quantred::numerics::{Estimate, QuadConfig};
use quantred::reduction_maps::reduced_gram_with;
use quantred::strata_flow::StratumLabel;
use quantred::torus_actions::{log_jacobian_imaginary, orbit_volume_with, Twist, WeightAction};

fn quad(samples: usize) -> QuadConfig {
    QuadConfig { samples, seed: 11, stderr_target: 1e-2, ..Default::default() }
}

/// Point of E2's free stratum with `|z₀|² = |z₁|² = p`.
fn e2_free_point(p: f64) -> PointM {
    let a = catalog::e2();
    let z = [C64::from_polar(p.sqrt(), 0.3), C64::from_polar(p.sqrt(), -1.1), C64::new((1.0 - 2.0 * p).sqrt(), 0.0)];
    PointM::from_flat(&a.model, &z).unwrap()
}

/// Point of E3's free stratum with `|z₀|² = |w₀|² = 1 − p`.
fn e3_free_point(p: f64) -> PointM {
    let a = catalog::e3();
    let q = (1.0 - p).sqrt();
    let z = [C64::new(q, 0.0), C64::from_polar(p.sqrt(), 0.4), C64::new(q, 0.0), C64::from_polar(p.sqrt(), 2.0)];
    PointM::from_flat(&a.model, &z).unwrap()
}

fn stratum(plan: &StratifiedPlan, kind: &str) -> StratumLabel {
    plan.strata.iter().find(|s| s.kind() == kind).unwrap().clone()
}

#[test]
fn fixed_point_densities_are_one() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let fixed = stratum(&plan, "fixed");
    for k in [1.0, 10.0, 100.0] {
        assert_eq!(density_i(&a, &fixed, &fixed.representative, k).unwrap().value, 1.0);
        assert_eq!(density_j(&a, &fixed, &fixed.representative, k).unwrap().value, 1.0);
    }
    // a point of another stratum is rejected
    assert!(density_i(&a, &fixed, &e2_free_point(0.2), 10.0).is_err());
}

#[test]
fn plain_density_approaches_the_orbit_volume_limit() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let free = stratum(&plan, "free");
    for p in [0.1, 0.25, 0.4] {
        let x = e2_free_point(p);
        let limit = orbit_volume_with(&a, &free.isotropy, &x).value / 2f64.sqrt();
        let ks = [10.0, 20.0, 40.0, 80.0, 160.0];
        let pts: Vec<CurvePoint> = ks
            .iter()
            .map(|&k| {
                let e = density_i(&a, &free, &x, k).unwrap();
                CurvePoint { k, value: e.value, stderr: e.stderr }
            })
            .collect();
        for w in pts.windows(2) {
            assert!((w[1].value - limit).abs() <= (w[0].value - limit).abs());
        }
        let fit = extrapolate_limit(&pts).unwrap();
        assert!((fit.value - limit).abs() < 0.02 * limit, "{} vs {limit}", fit.value);
    }
}

#[test]
fn gaussian_model_matches_the_density_at_large_k() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let free = stratum(&plan, "free");
    let x = e2_free_point(0.3);
    let xi_hat = &free.isotropy.m_basis[0];
    // curvature of f at ξ = 0 from the closed-form potential
    let h = 1e-4;
    let f = |t: f64| flow_potential_closed(&a, &xi_hat.iter().map(|v| v * t).collect::<Vec<_>>(), &x);
    let q = (f(h) - 2.0 * f(0.0) + f(-h)) / (2.0 * h * h);
    let ov = orbit_volume_with(&a, &free.isotropy, &x);
    let k = 200.0;
    // vol (k/2π)^{1/2} τ(0) ∫ e^{−k q ξ²} dξ
    let gauss = ov.value * (k / TAU).sqrt() * ov.gram_root * (std::f64::consts::PI / (k * q)).sqrt();
    let dens = density_i(&a, &free, &x, k).unwrap().value;
    assert!((dens - gauss).abs() < 0.01 * gauss, "{dens} vs {gauss}");
    assert!((gauss - ov.value / 2f64.sqrt()).abs() < 1e-4 * gauss);
}

#[test]
fn halfform_density_tends_to_one_on_e3() {
    let a = catalog::e3();
    let plan = StratifiedPlan::new(&a).unwrap();
    let free = stratum(&plan, "free");
    for p in [0.2, 0.5, 0.8] {
        let x = e3_free_point(p);
        let ks = [10.0, 20.0, 40.0, 100.0];
        let pts: Vec<CurvePoint> = ks
            .iter()
            .map(|&k| CurvePoint { k, value: density_j(&a, &free, &x, k).unwrap().value, stderr: 0.0 })
            .collect();
        for w in pts.windows(2) {
            assert!((w[1].value - 1.0).abs() <= (w[0].value - 1.0).abs());
        }
        assert!((pts[3].value - 1.0).abs() < 0.05);
        let lim = extrapolate_limit(&pts).unwrap();
        assert!((lim.value - 1.0).abs() < 0.02, "{}", lim.value);
    }
}

#[test]
fn divergence_term_vanishes_at_the_origin() {
    let a = catalog::e3();
    let x = e3_free_point(0.4);
    assert!(log_jacobian_imaginary(&a, &[0.0], &x).abs() < 1e-14);
    let plan = StratifiedPlan::new(&a).unwrap();
    let iso = stratum(&plan, "free").isotropy;
    let fib = Fiber::new(&a, &iso, &x);
    let plain = fib.integrand(&[0.0], 7.0, Twist::Plain);
    let half = fib.integrand(&[0.0], 7.0, Twist::Halfform);
    assert!((plain - half).abs() < 1e-13 * plain);
    assert!((plain - orbit_volume_with(&a, &iso, &x).gram_root).abs() < 1e-12 * plain);
}

#[test]
fn truncated_densities_and_the_tail_split() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let free = stratum(&plan, "free");
    let x = e2_free_point(0.3);
    let r = select_radius(&a, &free, &x).unwrap();
    assert!(r > 0.0);
    let vol = orbit_volume_with(&a, &free.isotropy, &x).value;
    let fib = Fiber::new(&a, &free.isotropy, &x);
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for k in [10.0, 20.0, 40.0, 80.0] {
        let (i, j) = truncated_density(&a, &free, &x, k, r).unwrap();
        let di = (i.value - 2f64.powf(-0.5)).abs();
        let dj = (j.value - 1.0).abs();
        assert!(di <= prev.0 && dj <= prev.1);
        prev = (di, dj);
        // I_k = vol·(I_{k,R} + (k/2π)^{1/2}·tail)
        let tail = fib.tail(k, Twist::Plain, r).unwrap().value * (k / TAU).sqrt();
        let full = density_i(&a, &free, &x, k).unwrap().value;
        assert!((full - vol * (i.value + tail)).abs() < 1e-9 * full);
    }
    assert!(truncated_density(&a, &free, &x, 10.0, 0.0).is_err());
}

#[test]
fn tail_certificate_bounds_the_direct_tail() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let free = stratum(&plan, "free");
    for p in [0.15, 0.3, 0.45] {
        let x = e2_free_point(p);
        let r = select_radius(&a, &free, &x).unwrap();
        let cert = tail_certificate(&a, &free, &x, r, &[20.0, 50.0, 80.0]).unwrap();
        assert!(cert.c > 0.0);
        assert!(cert.validated, "{:?}", cert.checks);
        for w in cert.checks.windows(2) {
            assert!(w[1].2 < w[0].2);
        }
        // R-stability: halving R moves I_{k,R} by less than the bound
        let k = 50.0;
        let (big, _) = truncated_density(&a, &free, &x, k, r).unwrap();
        let (small, _) = truncated_density(&a, &free, &x, k, 0.5 * r).unwrap();
        let half = tail_certificate(&a, &free, &x, 0.5 * r, &[k]).unwrap();
        let bound = half.b * (-0.5 * r * half.d * k).exp();
        assert!((big.value - small.value).abs() <= bound, "{} > {bound}", (big.value - small.value).abs());
    }
    let fixed = stratum(&plan, "fixed");
    assert!(tail_certificate(&a, &fixed, &fixed.representative, 0.1, &[10.0]).is_err());
}

#[test]
fn residual_terms() {
    // dφ surjective: no extra pieces
    let e1 = catalog::e1();
    let p1 = StratifiedPlan::new(&e1).unwrap();
    let r = residual_ii(&e1, &p1.strata[0], 4, Twist::Plain, &quad(1000)).unwrap();
    assert_eq!(r.total.value, 0.0);
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let fixed = stratum(&plan, "fixed");
    let mut prev = f64::INFINITY;
    for k in [10u32, 20, 30, 40] {
        let ii = residual_ii_with(&a, &plan, &fixed, k, Twist::Plain, &quad(1000)).unwrap().total.value;
        assert!(ii > 0.0 && ii < prev);
        prev = ii;
    }
}

#[test]
fn face_level_choice_is_immaterial() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let idx = plan.strata.iter().position(|s| s.kind() == "fixed").unwrap();
    let mut moved = plan.clone();
    for piece in moved.decomposition[idx].1.iter_mut() {
        for s in piece.slices.iter_mut() {
            s.level = s.level.iter().map(|v| 0.5 * v).collect();
        }
    }
    let k = 6u32;
    let basis = vec![SectionPoly::monomial(&a.model, k, Twist::Plain, vec![0, 0, k]).unwrap()];
    let q = quad(1000);
    let sum = |p: &StratifiedPlan| -> f64 {
        p.extra_contributions(&a, idx, k, Twist::Plain, &basis, &q)
            .unwrap()
            .iter()
            .map(|c| c.diag[0].value)
            .sum()
    };
    let (x, y) = (sum(&plan), sum(&moved));
    assert!((x - y).abs() < 1e-6 * x, "{x} vs {y}");
}

#[test]
fn scalar_defect_is_the_ratio_minus_one() {
    let a = catalog::e1();
    let plan = StratifiedPlan::new(&a).unwrap();
    let q = quad(1000);
    let up = plan.gram_upstairs(&a, 2, Twist::Plain, 1, &q).unwrap();
    let down = reduced_gram_with(&a, &plan, 2, Twist::Plain, 1, &q).unwrap().gram;
    let d = defect_from_grams(&up, &down).unwrap();
    let ratio = down.matrix[0][0].re / up.matrix[0][0].re;
    assert!((d.defect.value - (ratio - 1.0).abs()).abs() < 1e-12);
}

#[test]
fn halfform_defect_decreases_and_plain_defect_persists() {
    let a = catalog::e3();
    let q = quad(1000);
    let h10 = unitarity_defect(&a, 10, Twist::Halfform, 1, &q).unwrap();
    let h40 = unitarity_defect(&a, 40, Twist::Halfform, 1, &q).unwrap();
    assert!(h40.defect.value < h10.defect.value);
    for k in [10u32, 20, 40] {
        let p = unitarity_defect(&a, k, Twist::Plain, 1, &q).unwrap();
        assert!(p.defect.value - 2.0 * p.defect.stderr > 0.5);
    }
    let plan = StratifiedPlan::new(&a).unwrap();
    let all = defect_pairings(&a, &plan, 10, Twist::Halfform, &q).unwrap();
    assert_eq!(all.len(), 4);
    assert_eq!(all[0].defect, h10.defect);
}

#[test]
fn spectrum_rejects_bad_grams() {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a).unwrap();
    let q = quad(1000);
    let up = plan.gram_upstairs(&a, 2, Twist::Plain, 1, &q).unwrap();
    let other = plan.gram_upstairs(&a, 4, Twist::Plain, 1, &q).unwrap();
    assert!(generalized_spectrum(&up, &other).is_err());
    let mut neg = up.clone();
    neg.matrix[0][0] = C64::new(-1.0, 0.0);
    assert!(generalized_spectrum(&neg, &up).is_err());
}

#[test]
fn norm_decomposition_holds_per_stratum() {
    let q = quad(40_000);
    for (a, tw) in [(catalog::e1(), Twist::Plain), (catalog::e2(), Twist::Plain), (catalog::e3(), Twist::Halfform)] {
        let r = qnsr_consistency(&a, 4, tw, &q).unwrap();
        for l in &r.lines {
            assert!(l.z_score < 3.0, "{}: {:?} vs {:?}", l.stratum, l.lhs, l.rhs);
        }
    }
    // fixed point of E2 carries a residual part
    let r = qnsr_consistency(&catalog::e2(), 4, Twist::Plain, &q).unwrap();
    let fixed = r.lines.iter().find(|l| l.stratum.starts_with("fixed")).unwrap();
    assert!(fixed.residual_part.value > 0.0);
}

#[test]
fn decomposition_estimates_are_budget_consistent() {
    let a = catalog::e2();
    let small = qnsr_consistency(&a, 4, Twist::Plain, &quad(10_000)).unwrap();
    let large = qnsr_consistency(&a, 4, Twist::Plain, &quad(40_000)).unwrap();
    for (s, l) in small.lines.iter().zip(&large.lines) {
        assert!((s.rhs.value / l.rhs.value - 1.0).abs() < 1e-9);
        assert!(s.lhs.z_score(l.lhs) < 3.0);
    }
}

#[test]
fn curves_and_fits() {
    let pts = |f: &dyn Fn(f64) -> f64| -> Vec<CurvePoint> {
        [10.0, 20.0, 40.0, 80.0].iter().map(|&k| CurvePoint { k, value: f(k), stderr: 0.0 }).collect()
    };
    let fit = power_law_fit(&pts(&|k| 1.0 + 3.0 * k.powf(-1.5)), 1.0).unwrap();
    assert!((fit.p - 1.5).abs() < 1e-9 && (fit.c - 3.0).abs() < 1e-9);
    let lim = extrapolate_limit(&pts(&|k| 0.7 + 2.0 / k)).unwrap();
    assert!((lim.value - 0.7).abs() < 1e-9);
    let bad = vec![CurvePoint { k: 2.0, value: 1.0, stderr: 0.0 }, CurvePoint { k: 2.0, value: 1.0, stderr: 0.0 }];
    assert!(DensityCurve::new(Quantity::I, "x", bad).is_err());
    let neg = vec![CurvePoint { k: 2.0, value: 1.0, stderr: -1.0 }];
    assert!(DensityCurve::new(Quantity::J, "x", neg).is_err());
    let mut c = DensityCurve::new(Quantity::DefectB, "E3", pts(&|k| 2.0 / k)).unwrap();
    assert!((c.fit_rate(0.0).unwrap().p - 1.0).abs() < 1e-9);
    assert_eq!(Quantity::IITilde.name(), "II_tilde");
}

#[test]
fn invariant_basis_is_shared_by_both_sides() {
    let a: WeightAction = catalog::e3();
    let plan = StratifiedPlan::new(&a).unwrap();
    let q = quad(1000);
    let up = plan.gram_upstairs(&a, 6, Twist::Halfform, 2, &q).unwrap();
    let down = reduced_gram_with(&a, &plan, 6, Twist::Halfform, 2, &q).unwrap().gram;
    assert_eq!(up.basis_ids, down.basis_ids);
    assert_eq!(up.basis_ids.len(), invariant_basis(&a, 6, Twist::Halfform).unwrap().len());
    let eig = generalized_spectrum(&up, &down).unwrap();
    assert!(eig.iter().all(|e: &Estimate| e.value > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn density_deviation_shrinks_along_a_doubling_ladder(p in 0.05f64..0.45) {
        let a = catalog::e2();
        let plan = StratifiedPlan::new(&a).unwrap();
        let free = stratum(&plan, "free");
        let x = e2_free_point(p);
        let limit = orbit_volume_with(&a, &free.isotropy, &x).value / 2f64.sqrt();
        let mut prev = f64::INFINITY;
        for k in [5.0, 10.0, 20.0, 40.0] {
            let d = (density_i(&a, &free, &x, k).unwrap().value - limit).abs();
            prop_assert!(d <= prev);
            prev = d;
        }
    }
}
