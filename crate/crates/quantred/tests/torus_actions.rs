mod common;

use common::{brute_force_finite_part, flow_potential_closed, random_tangent, step_along, TAU};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use quantred::catalog;
use quantred::kahler_models::{metric_b, omega, PointM};
use quantred::torus_actions::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pt(a: &WeightAction, z: &[f64]) -> PointM {
    PointM::from_flat(&a.model, &z.iter().map(|&x| C64::new(x, 0.0)).collect::<Vec<_>>()).unwrap()
}

/// A random point of E2's zero level with full support (|z0| = |z1|).
fn e2_zero_level<R: Rng>(rng: &mut R) -> PointM {
    let a = catalog::e2();
    let p0: f64 = rng.random_range(0.05..0.45);
    let th: [f64; 3] = [rng.random::<f64>() * TAU, rng.random::<f64>() * TAU, 0.0];
    let mags = [p0.sqrt(), p0.sqrt(), (1.0 - 2.0 * p0).sqrt()];
    let z: Vec<C64> = mags.iter().zip(th).map(|(m, t)| C64::from_polar(*m, t)).collect();
    PointM::from_flat(&a.model, &z).unwrap()
}

#[test]
fn moment_map_examples() {
    let a = catalog::e1();
    let pole = pt(&a, &[1.0, 0.0]);
    assert!((moment_map(&a, &pole)[0] + TAU).abs() < 1e-14);
    assert!(moment_map(&a, &pt(&a, &[1.0, 1.0]))[0].abs() < 1e-14);
    // fixed point: moment value stationary under the imaginary flow
    let y = imaginary_flow(&a, &[1.0], 0.8, &pole);
    assert_eq!(moment_map(&a, &y), moment_map(&a, &pole));
}

#[test]
fn hamilton_equation_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for a in [catalog::e1(), catalog::e2(), catalog::e3()] {
        for _ in 0..10 {
            let x = PointM::random(&a.model, &mut rng);
            let xi = [rng.random_range(-1.0..1.0)];
            let v = random_tangent(&x, &mut rng);
            let (xf, _) = fundamental_fields(&a, &xi, &x);
            let h = 1e-5;
            let dphi = (phi_xi(&a, &xi, &step_along(&a.model, &x, &v, h))
                - phi_xi(&a, &xi, &step_along(&a.model, &x, &v, -h)))
                / (2.0 * h);
            let vn = metric_b(&a.model, &v, &v).sqrt();
            assert!((omega(&a.model, &xf, &v) - dphi).abs() < 1e-6 * (1.0 + vn));
        }
    }
}

#[test]
fn gradient_of_phi_is_jx_and_phi_increases_along_imaginary_flow() {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x = PointM::random(&a.model, &mut rng);
        let xi = [0.6];
        let mut last = f64::NEG_INFINITY;
        for s in 0..20 {
            let v = phi_xi(&a, &xi, &imaginary_flow(&a, &xi, s as f64 * 0.1 - 1.0, &x));
            assert!(v > last);
            last = v;
        }
    }
}

#[test]
fn fundamental_fields_vanish_for_zero_xi_and_fixed_points() {
    let a = catalog::e2();
    let fixed = pt(&a, &[0.0, 0.0, 1.0]);
    let (x, jx) = fundamental_fields(&a, &[1.3], &fixed);
    assert!(x.iter().chain(&jx).all(|c| c.norm() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = PointM::random(&a.model, &mut rng);
    let (x, _) = fundamental_fields(&a, &[0.0], &p);
    assert!(x.iter().all(|c| c.norm() == 0.0));
}

#[test]
fn isotropy_matches_brute_force() {
    let e2 = catalog::e2();
    let full = isotropy(&e2, &pt(&e2, &[0.0, 0.0, 1.0]));
    assert!(full.is_full);
    let generic = pt(&e2, &[1.0, 1.0, 1.0]);
    let iso = isotropy(&e2, &generic);
    assert_eq!((iso.finite_part, iso.dim_h()), (1, 0));
    assert_eq!(brute_force_finite_part(&e2, &generic, 360), 1);
    let z2 = pt(&e2, &[1.0, 1.0, 0.0]);
    assert_eq!(isotropy(&e2, &z2).finite_part as usize, brute_force_finite_part(&e2, &z2, 360));
    let e1 = catalog::e1();
    let x = pt(&e1, &[1.0, 1.0]);
    assert_eq!(isotropy(&e1, &x).finite_part, 2);
    assert_eq!(brute_force_finite_part(&e1, &x, 360), 2);
}

#[test]
fn rank_two_isotropy_covolume() {
    // CP² with a rank-2 action whose stabilizer on the edge z2 = 0 is the
    // circle spanned by (1, 1) in ℤ², covolume √2.
    let m = quantred::kahler_models::make_model(&[2], &[1]).unwrap();
    let a = WeightAction::new(m, vec![vec![1, 0, 0], vec![0, 1, 0]], vec![0.into(), 0.into()]).unwrap();
    let iso = isotropy_of_support(&a, &[true, false, true]);
    assert_eq!(iso.dim_h(), 1);
    assert!((iso.lattice_covolume - 1.0).abs() < 1e-12);
    let iso = isotropy_of_support(&a, &[true, true, false]);
    assert_eq!(iso.algebra_basis.len(), 1);
    assert!((iso.lattice_covolume - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn orbit_volume_matches_arclength_quadrature() {
    let a = catalog::e1();
    let x = pt(&a, &[1.0, 1.0]);
    let v = orbit_volume(&a, &x);
    // arclength of θ ↦ exp(θ)·x until the orbit first closes (θ = 1/2)
    let speed = |th: f64| {
        let y = act(&a, &[th], &x);
        let (xf, _) = fundamental_fields(&a, &[1.0], &y);
        metric_b(&a.model, &xf, &xf).sqrt()
    };
    let len = quantred::numerics::integrate_de(speed, 0.0, 0.5, 1e-12).value;
    assert!((v.value - len).abs() < 1e-9, "{} vs {len}", v.value);
    assert!((v.value - std::f64::consts::PI * 2f64.sqrt()).abs() < 1e-12);
    let fixed = orbit_volume(&catalog::e2(), &pt(&catalog::e2(), &[0.0, 0.0, 1.0]));
    assert!(fixed.is_full && fixed.value == 1.0);
}

#[test]
fn orbit_volume_constant_along_imaginary_flow_on_zero_level_orbit() {
    // vol(G·x) is constant along G-orbits and (on x ∈ φ⁻¹(0)) τ(0,x) equals the Gram root.
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x = e2_zero_level(&mut rng);
        let v0 = orbit_volume(&a, &x);
        let y = act(&a, &[0.37], &x);
        assert!((orbit_volume(&a, &y).value - v0.value).abs() < 1e-8);
        let tau0 = jacobian_tau(&a, &[0.0], &x).unwrap();
        assert!((tau0 - v0.gram_root).abs() < 1e-10 * v0.gram_root);
    }
}

#[test]
fn tau_is_g_invariant() {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = e2_zero_level(&mut rng);
    for xi in [-0.4, 0.2, 0.9] {
        let t1 = jacobian_tau(&a, &[xi], &x).unwrap();
        let t2 = jacobian_tau(&a, &[xi], &act(&a, &[0.23], &x)).unwrap();
        assert!((t1 - t2).abs() < 1e-8 * t1);
    }
}

#[test]
fn flow_group_law_and_identity() {
    let a = catalog::e3();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = PointM::random(&a.model, &mut rng);
    assert!(imaginary_flow(&a, &[0.4], 0.0, &x).distance(&x) < 1e-14);
    let lhs = imaginary_flow(&a, &[0.4], 0.3, &imaginary_flow(&a, &[0.4], 0.5, &x));
    let rhs = imaginary_flow(&a, &[0.4], 0.8, &x);
    assert!(lhs.distance(&rhs) < 1e-12);
    // CP¹ limit: t → ∞ pushes to [0:1]
    let e1 = catalog::e1();
    let y = imaginary_flow(&e1, &[1.0], 50.0, &pt(&e1, &[1.0, 0.3]));
    assert!(y.distance(&pt(&e1, &[0.0, 1.0])) < 1e-12);
}

#[test]
fn flow_potential_quadrature_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for a in [catalog::e1(), catalog::e2(), catalog::e3()] {
        for _ in 0..5 {
            let x = PointM::random(&a.model, &mut rng);
            let xi = [rng.random_range(-2.0..2.0)];
            let q = flow_potential_value(&a, &xi, &x).unwrap();
            let c = flow_potential_closed(&a, &xi, &x);
            assert!((q - c).abs() < 1e-10 * (1.0 + c.abs()), "{q} vs {c}");
            assert!((flow_potential_telescoped(&a, &xi, &x) - c).abs() < 1e-10 * (1.0 + c.abs()));
        }
        assert_eq!(flow_potential_value(&a, &[0.0], &PointM::random(&a.model, &mut rng)).unwrap(), 0.0);
    }
}

#[test]
fn flow_potential_hessian_is_twice_gram() {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let x = e2_zero_level(&mut rng);
        let rep = flow_potential(&a, &[0.0], &x).unwrap();
        let iso = isotropy(&a, &x);
        let g = orbit_gram(&a, &iso.m_basis, &x);
        let rel = (rep.hessian_at_zero[0][0] - 2.0 * g[(0, 0)]).abs() / (2.0 * g[(0, 0)]);
        assert!(rel < 1e-4, "relative deviation {rel}");
        assert!(rep.gradient[0].abs() < 1e-6, "zero level is critical: {:?}", rep.gradient);
    }
}

#[test]
fn flow_potential_grows_linearly_off_the_fixed_locus() {
    // lem-exp type growth on the free stratum: f(tξ̂,x) ≥ C t for large t
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = e2_zero_level(&mut rng);
    for dir in [1.0, -1.0] {
        let ratios: Vec<f64> = (2..8)
            .map(|t| flow_potential_value(&a, &[dir * t as f64], &x).unwrap() / t as f64)
            .collect();
        assert!(ratios.iter().all(|r| *r > 1.0), "{ratios:?}");
    }
}

#[test]
fn liouville_integral_of_divergence_matches_exact_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for a in [catalog::e1(), catalog::e2(), catalog::e3()] {
        let x = PointM::random(&a.model, &mut rng);
        let xi = [0.35];
        let quad = divergence_integral(&a, &xi, &x).unwrap();
        let exact = log_jacobian_imaginary(&a, &xi, &x);
        assert!((quad - exact).abs() < 1e-5 * (1.0 + exact.abs()), "{quad} vs {exact}");
    }
    // CP¹ closed form: Jacobian = |det D|²/‖Dz‖⁴ with det D = 1
    let a = catalog::e1();
    let x = PointM::random(&a.model, &mut rng);
    let xi = [0.8];
    let dz: f64 = x.moduli().iter().zip([1.0, -1.0]).map(|(p, w)| p * (-2.0 * TAU * w * xi[0]).exp()).sum();
    assert!((log_jacobian_imaginary(&a, &xi, &x) + 2.0 * dz.ln()).abs() < 1e-10);
}

#[test]
fn norm_transport_basic_properties() {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = PointM::random(&a.model, &mut rng);
    assert_eq!(norm_transport(Twist::Plain, &a, 3, &[0.0], &x, 0.7).unwrap(), 0.7);
    // ξ in the isotropy algebra of the fixed point: unchanged
    let fixed = pt(&a, &[0.0, 0.0, 1.0]);
    let v = norm_transport(Twist::Plain, &a, 3, &[0.9], &fixed, 0.7).unwrap();
    assert!((v - 0.7).abs() < 1e-12);
    assert!(norm_transport(Twist::Plain, &a, 3, &[0.9], &x, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn moment_map_is_torus_invariant(seed in 0u64..10_000, th in -1.0f64..1.0) {
        let a = catalog::e3();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = PointM::random(&a.model, &mut rng);
        let y = act(&a, &[th], &x);
        prop_assert!((moment_map(&a, &x)[0] - moment_map(&a, &y)[0]).abs() < 1e-10);
    }

    #[test]
    fn phi_monotone_along_imaginary_flow(seed in 0u64..10_000, xi in -2.0f64..2.0) {
        let a = catalog::e2();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = PointM::random(&a.model, &mut rng);
        let v0 = phi_xi(&a, &[xi], &x);
        let v1 = phi_xi(&a, &[xi], &imaginary_flow(&a, &[xi], 0.1, &x));
        prop_assert!(v1 >= v0 - 1e-12);
    }
}
