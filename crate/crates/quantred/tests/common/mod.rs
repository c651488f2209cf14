//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64 as C64;
use quantred::kahler_models::PointM;
use quantred::torus_actions::{imaginary_flow, phi_xi, WeightAction};
use rand::Rng;
use rand_distr::StandardNormal;

pub const TAU: f64 = std::f64::consts::TAU;

/// Exact Fubini–Study volume `(2πℓ)^n / n!` of `CP^n` with degree `ℓ`.
pub fn cpn_volume(n: usize, l: f64) -> f64 {
    (TAU * l).powi(n as i32) / (1..=n).map(|i| i as f64).product::<f64>()
}

/// Closed form `f(ξ,x) = Σ_j ℓ_j log‖D z_j‖² + 4π⟨c,ξ⟩` with
/// `D = diag(e^{−2π⟨W_i,ξ⟩})` on unit representatives.
pub fn flow_potential_closed(action: &WeightAction, xi: &[f64], x: &PointM) -> f64 {
    let m = &action.model;
    let w = action.pairing(xi);
    let flat = x.flat();
    let mut f = 0.0;
    for j in 0..m.num_factors() {
        let s: f64 = m.block(j).map(|i| flat[i].norm_sqr() * (-2.0 * TAU * w[i]).exp()).sum();
        f += m.degree(j) * s.ln();
    }
    let c = action.shift_f64();
    f + 2.0 * TAU * c.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>()
}

/// Brute-force order of the finite stabilizer: count `θ ∈ (ℤ/N)^d` (d = 1)
/// fixing the projective point.
pub fn brute_force_finite_part(action: &WeightAction, x: &PointM, big_n: usize) -> usize {
    assert_eq!(action.rank, 1);
    let mut count = 0;
    for s in 0..big_n {
        let th = [s as f64 / big_n as f64];
        let y = quantred::torus_actions::act(action, &th, x);
        if y.distance(x) < 1e-9 {
            count += 1;
        }
    }
    count
}

/// Root of `s ↦ φ_ξ(e^{isξ}x)` by bisection on the ray (rank-1 actions):
/// the closed-form single-ray limit of the Kirwan flow.
pub fn single_ray_limit(action: &WeightAction, x: &PointM) -> Option<PointM> {
    let xi = [1.0];
    let g = |s: f64| phi_xi(action, &xi, &imaginary_flow(action, &xi, s, x));
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut iters = 0;
    while g(lo) > 0.0 || g(hi) < 0.0 {
        lo *= 2.0;
        hi *= 2.0;
        iters += 1;
        if iters > 40 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(imaginary_flow(action, &xi, 0.5 * (lo + hi), x))
}

pub fn random_tangent<R: Rng>(x: &PointM, rng: &mut R) -> Vec<C64> {
    let v: Vec<C64> = x
        .flat()
        .iter()
        .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    quantred::kahler_models::horizontal(x, &v)
}

/// Move along a horizontal tangent vector: `z + s v`, renormalized.
pub fn step_along(model: &quantred::kahler_models::Model, x: &PointM, v: &[C64], s: f64) -> PointM {
    let flat: Vec<C64> = x.flat().iter().zip(v).map(|(z, d)| z + d * s).collect();
    PointM::from_flat(model, &flat).unwrap()
}
