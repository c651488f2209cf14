//! Acceptance harness: prints one `PASS`/`FAIL` line per criterion.
//!
//! Exits 0 regardless of the outcome so that the rest of the workspace test
//! suite keeps running; set `QUANTRED_ACCEPTANCE_STRICT=1` to exit 1 when
//! any criterion fails.

mod common;

use std::time::Instant;

use common::{flow_potential_closed, single_ray_limit, TAU};
use quantred::asymptotics_lab::{density_i, density_j, lem_exp_certificate, power_law_fit, qnsr_consistency_with, residual_ii_with, unitarity_defect, CurvePoint};
use quantred::catalog;
use quantred::hilbert_spaces::{gram_ambient, invariant_basis, StratifiedPlan};
use quantred::kahler_models::{check_prequantum, frame_at, metric_b, PointM};
use quantred::numerics::{linear_fit, Estimate, QuadConfig};
use quantred::reduction_maps::contraction_factor;
use quantred::strata_flow::{kirwan_flow, sample_stratum, FlowStatus, StratumLabel, StratumTarget};
use quantred::torus_actions::{flow_potential_value, fundamental_fields, Twist, WeightAction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), quantred::Error>;

const SEED: u64 = 17;

fn quad(samples: usize) -> QuadConfig {
    QuadConfig { samples, seed: SEED, stderr_target: 1e-2, ..Default::default() }
}

fn stratum(plan: &StratifiedPlan, kind: &str) -> StratumLabel {
    plan.strata.iter().find(|s| s.kind() == kind).expect("stratum kind present").clone()
}

/// Orbit length of a rank-1 action on a single `CP^n` factor of degree `ℓ`:
/// `|X|² = 2ℓ(2π)²(Σw²p − (Σwp)²)`, divided by the finite stabilizer order.
fn orbit_length_closed(action: &WeightAction, x: &PointM, finite_part: u64) -> f64 {
    let p = x.moduli();
    let w = &action.weights[0];
    let l = action.model.degree(0);
    let m1: f64 = p.iter().zip(w).map(|(p, w)| p * *w as f64).sum();
    let m2: f64 = p.iter().zip(w).map(|(p, w)| p * (*w as f64).powi(2)).sum();
    (2.0 * l * TAU * TAU * (m2 - m1 * m1)).sqrt() / finite_part as f64
}

/// Random zero-level points with trivial isotropy, uniform in the moment
/// coordinate `p` (the quotient measure on these one-dimensional strata):
/// `(p, p, 1 − 2p)` on E2 and `(1 − p, p; 1 − p, p)` on E3.
fn random_free_points(action: &WeightAction, count: usize, e3: bool) -> Result<Vec<PointM>, quantred::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    (0..count)
        .map(|_| {
            if e3 {
                let p: f64 = rng.random_range(0.0..1.0);
                PointM::from_moduli(&action.model, &[1.0 - p, p, 1.0 - p, p])
            } else {
                let p: f64 = rng.random_range(0.0..0.5);
                PointM::from_moduli(&action.model, &[p, p, 1.0 - 2.0 * p])
            }
        })
        .collect()
}

/// Hessian of `f(·, x)` at `ξ = 0` against `2B(JX^{ξ₁}, JX^{ξ₂})`.
fn criterion_1() -> Outcome {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut worst: f64 = 0.0;
    let mut worst_closed: f64 = 0.0;
    for x in random_free_points(&a, 10, false)? {
        let (s1, s2): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let f = |u: f64, v: f64| flow_potential_value(&a, &[u * s1 + v * s2], &x);
        let mixed = |h: f64| -> Result<f64, quantred::Error> { Ok((f(h, h)? - f(h, -h)? - f(-h, h)? + f(-h, -h)?) / (4.0 * h * h)) };
        let (h1, h2) = (mixed(2e-3)?, mixed(1e-3)?);
        let fd = (4.0 * h2 - h1) / 3.0;
        let jx1 = fundamental_fields(&a, &[s1], &x).1;
        let jx2 = fundamental_fields(&a, &[s2], &x).1;
        let target = 2.0 * metric_b(&a.model, &jx1, &jx2);
        worst = worst.max((fd - target).abs() / target.abs());
        // closed-form oracle for B(X, X) on CP²
        let closed = 2.0 * orbit_length_closed(&a, &x, 1).powi(2) * s1 * s2;
        worst_closed = worst_closed.max((target - closed).abs() / closed.abs());
    }
    Ok((
        worst < 1e-3 && worst_closed < 1e-10,
        format!("10 E2 free points; max relative error {worst:.2e} (tol 1e-3); 2B vs closed form {worst_closed:.1e}"),
    ))
}

/// Contraction oracle against `2^{−1/2}vol(G·x₀)`; exactly 1 at the fixed point.
fn criterion_2() -> Outcome {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a)?;
    let free = stratum(&plan, "free");
    let fixed = stratum(&plan, "fixed");
    let mut worst: f64 = 0.0;
    for x in random_free_points(&a, 10, false)? {
        let cf = contraction_factor(&a, &free.isotropy, &x)?;
        let target = orbit_length_closed(&a, &x, 1) / 2f64.sqrt();
        worst = worst.max((cf - target).abs() / target);
    }
    let at_fixed = contraction_factor(&a, &fixed.isotropy, &fixed.representative)?;
    Ok((
        worst < 1e-3 && at_fixed == 1.0,
        format!("10 E2 free points; max relative error {worst:.2e} (tol 1e-3); fixed-point factor {at_fixed}"),
    ))
}

/// `I_k` on E2's free stratum and `J_k` on E3's free stratum.
fn criterion_3() -> Outcome {
    let ks = [10.0, 20.0, 40.0, 100.0];
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a)?;
    let free = stratum(&plan, "free");
    let mut worst_i: f64 = 0.0;
    let mut monotone = true;
    for x in random_free_points(&a, 10, false)? {
        let vol = orbit_length_closed(&a, &x, 1);
        let errs: Vec<f64> = ks
            .iter()
            .map(|&k| density_i(&a, &free, &x, k).map(|e| (e.value - vol / 2f64.sqrt()).abs() / vol))
            .collect::<Result<_, _>>()?;
        monotone &= errs.windows(2).all(|w| w[1] < w[0]);
        worst_i = worst_i.max(errs[3]);
    }
    let b = catalog::e3();
    let plan3 = StratifiedPlan::new(&b)?;
    let free3 = stratum(&plan3, "free");
    let mut worst_j: f64 = 0.0;
    for x in random_free_points(&b, 10, true)? {
        worst_j = worst_j.max((density_j(&b, &free3, &x, 100.0)?.value - 1.0).abs());
    }
    Ok((
        worst_i < 0.05 && monotone && worst_j < 0.05,
        format!("E2 max |I_100 − vol/√2|/vol = {worst_i:.4} (tol 0.05), decreasing in k: {monotone}; E3 max |J_100 − 1| = {worst_j:.4} (tol 0.05)"),
    ))
}

/// Residual term on E2's fixed stratum: positivity, log-linear decay, and
/// the comparison with the growth constant of the dominant piece.
fn criterion_4() -> Outcome {
    let a = catalog::e2();
    let plan = StratifiedPlan::new(&a)?;
    let fixed = stratum(&plan, "fixed");
    let idx = plan.strata.iter().position(|s| s.name == fixed.name).expect("present");
    let q = quad(4000);
    let ks: Vec<u32> = (1..=6).map(|i| 10 * i).collect();
    let mut values = Vec::new();
    let mut per_piece: Vec<f64> = Vec::new();
    for &k in &ks {
        values.push(residual_ii_with(&a, &plan, &fixed, k, Twist::Plain, &q)?.total.value);
        if k == *ks.last().expect("nonempty") {
            let basis = invariant_basis(&a, k, Twist::Plain)?;
            per_piece = plan
                .extra_contributions(&a, idx, k, Twist::Plain, &basis, &q)?
                .iter()
                .map(|c| c.diag.iter().map(|e| e.value).sum())
                .collect();
        }
    }
    let positive = values.iter().all(|v| *v > 0.0);
    let x: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let y: Vec<f64> = values.iter().map(|v| v.max(1e-300).ln()).collect();
    let (_, slope, r2) = linear_fit(&x, &y);
    // dominant piece: largest contribution at the top k
    let extras = &plan.decomposition[idx].1;
    let dominant = per_piece
        .iter()
        .enumerate()
        .max_by(|p, q| p.1.total_cmp(q.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (piece, slot) = {
        let mut n = 0;
        let mut found = (0, 0);
        'outer: for (pi, p) in extras.iter().enumerate() {
            for si in 0..p.slices.len() {
                if n == dominant {
                    found = (pi, si);
                    break 'outer;
                }
                n += 1;
            }
        }
        found
    };
    let e = &extras[piece];
    let pts = sample_stratum(&a, StratumTarget::PieceSlice(e, slot), 10, SEED)?;
    let dir = e.isotropy_prime.m_basis[0].clone();
    // C = min over unit directions of f(Rξ̂)/R, minimized over sample points
    // and maximized over R (f convex, so f(tξ̂)/t is nondecreasing in t)
    let mut c = f64::NEG_INFINITY;
    for r in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let cr = pts
            .iter()
            .flat_map(|wp| [1.0, -1.0].map(|s| flow_potential_closed(&a, &[s * r * dir[0]], &wp.point) / r))
            .fold(f64::INFINITY, f64::min);
        c = c.max(cr);
    }
    let lib = lem_exp_certificate(&a, &e.isotropy_prime, &pts[0].point, 1.0, &[20.0]);
    let lib_note = match &lib {
        Ok(cert) => format!("library C = {:.4}", cert.c),
        Err(err) => format!("library certificate: {err}"),
    };
    let rate_ok = c > 0.0 && slope.abs() >= 0.5 * 2.0 * c;
    let ok = positive && slope < 0.0 && r2 > 0.95 && rate_ok;
    let list: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    Ok((
        ok,
        format!(
            "II_k (k=10..60) = [{}]; slope {slope:.4}, R² {r2:.4} (need > 0.95); dominant piece {} C = {c:.3e} ({lib_note}); \
             rate bound {}",
            list.join(", "),
            e.face_ids.join("+"),
            if c > 0.0 { format!("|slope| ≥ C: {rate_ok}") } else { "not established (C ≤ 0: f does not grow linearly on the piece, decay is algebraic)".into() }
        ),
    ))
}

/// Per-stratum norm decomposition for both inner products and twists.
fn criterion_5() -> Outcome {
    let q = quad(20_000);
    let mut worst: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    let mut cells = 0;
    let mut skipped = Vec::new();
    for (name, a) in [("E1", catalog::e1()), ("E2", catalog::e2()), ("E3", catalog::e3())] {
        let plan = StratifiedPlan::new(&a)?;
        for tw in [Twist::Plain, Twist::Halfform] {
            for k in [4u32, 8, 16] {
                match invariant_basis(&a, k, tw) {
                    Err(_) => {
                        skipped.push(format!("{name}/{} (undefined)", tw.name()));
                        break;
                    }
                    Ok(b) if b.is_empty() => {
                        skipped.push(format!("{name}/{}@{k} (empty)", tw.name()));
                        continue;
                    }
                    Ok(_) => {}
                }
                let r = qnsr_consistency_with(&a, &plan, k, tw, &q)?;
                // norm_def 1: open stratum only; norm_def 2: every stratum
                let open = &r.lines[plan.open];
                let sum = |f: &dyn Fn(&quantred::asymptotics_lab::ConsistencyLine) -> Estimate| {
                    r.lines.iter().fold(Estimate::exact(0.0), |acc, l| acc.add(f(l)))
                };
                let (lhs2, rhs2) = (sum(&|l| l.lhs), sum(&|l| l.rhs));
                worst = worst.max(open.z_score).max(r.max_z).max(lhs2.z_score(rhs2));
                // the open stratum has full measure: its right-hand side is
                // also the ambient integral over M
                let amb = gram_ambient(&a, k, tw, &q)?.diag().iter().fold(Estimate::exact(0.0), |acc, e| acc.add(*e));
                worst_total = worst_total.max(amb.z_score(open.rhs));
                cells += 1;
            }
        }
    }
    Ok((
        worst < 3.0 && worst_total < 3.0,
        format!(
            "{cells} (example, twist, k) cells; max per-stratum z {worst:.2}, max z against the ambient integral {worst_total:.2} (tol 3); skipped: {}",
            skipped.join(", ")
        ),
    ))
}

/// Half-form defect decay and plain-twist non-unitarity on E3.
fn criterion_6() -> Outcome {
    let a = catalog::e3();
    let q = quad(4000);
    let ks = [10u32, 20, 30, 40];
    let margin = 0.25;
    let mut half = Vec::new();
    let mut plain_low = f64::INFINITY;
    for &k in &ks {
        let h = unitarity_defect(&a, k, Twist::Halfform, 1, &q)?;
        half.push(CurvePoint { k: k as f64, value: h.defect.value, stderr: h.defect.stderr });
        let p = unitarity_defect(&a, k, Twist::Plain, 1, &q)?;
        plain_low = plain_low.min(p.defect.value - 1.96 * p.defect.stderr);
    }
    let ratio = half[0].value / half[3].value;
    let fit = power_law_fit(&half, 0.0);
    let p = fit.map(|f| f.p).unwrap_or(f64::NAN);
    let list: Vec<String> = half.iter().map(|c| format!("{:.4}", c.value)).collect();
    Ok((
        ratio >= 2.0 && p >= 0.75 && plain_low > margin,
        format!(
            "half-form defect (k=10,20,30,40) = [{}], ratio {ratio:.3} (need ≥ 2), fitted p {p:.3} (need ≥ 0.75); \
             plain defect lower 95% bound {plain_low:.3} (margin {margin})",
            list.join(", ")
        ),
    ))
}

/// Kirwan flow limits against the single-ray oracle.
fn criterion_7() -> Outcome {
    let a = catalog::e2();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst, mut compared, mut monotone) = (0.0f64, 0, true);
    for _ in 0..100 {
        let x = PointM::random(&a.model, &mut rng);
        let r = kirwan_flow(&a, &x, 1e-24, 50_000)?;
        monotone &= r.monotone;
        if let (FlowStatus::Converged, Some(lim), Some(oracle)) = (r.status, r.limit, single_ray_limit(&a, &x)) {
            worst = worst.max(lim.distance(&oracle));
            compared += 1;
        }
    }
    Ok((
        worst < 1e-6 && monotone && compared > 0,
        format!("100 random E2 points, {compared} compared; max distance {worst:.2e} (tol 1e-6); monotone on every step: {monotone}"),
    ))
}

/// Compatibility and prequantum residuals on all example models.
fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut compat, mut preq) = (0.0f64, 0.0f64);
    for a in [catalog::e1(), catalog::e2(), catalog::e3()] {
        for _ in 0..20 {
            let x = PointM::random(&a.model, &mut rng);
            compat = compat.max(frame_at(&a.model, &x)?.compatibility_residual());
        }
        for k in 1..=3 {
            let x = PointM::random(&a.model, &mut rng);
            preq = preq.max(check_prequantum(&a.model, k, &x)?);
        }
    }
    Ok((
        compat < 1e-10 && preq < 1e-6,
        format!("E1–E3: max compatibility residual {compat:.1e} (tol 1e-10), max prequantum residual {preq:.1e} (tol 1e-6)"),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("Hessian identity", criterion_1),
        ("pointwise descent", criterion_2),
        ("density limits", criterion_3),
        ("residual decay", criterion_4),
        ("norm decomposition", criterion_5),
        ("asymptotic unitarity", criterion_6),
        ("flow correctness", criterion_7),
        ("model residuals", criterion_8),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {}: {} — {name}: {detail} [{:.1}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{} criteria pass", criteria.len() - failures, criteria.len());
    if failures > 0 && std::env::var_os("QUANTRED_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
