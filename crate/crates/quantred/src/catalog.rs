//! The three desk-scale example scenarios.
//!
//! - `E1`: `CP¹`, `O(1)`, weights `(1, −1)`, shift 0 — the quotient is a
//!   point with a `ℤ₂` stabilizer.
//! - `E2`: `CP²`, `O(1)`, weights `(1, −1, 0)`, shift 0 — a free stratum, a
//!   `ℤ₂` stratum on `z₂ = 0` and a fixed point `[0:0:1]`.
//! - `E3`: `CP¹ × CP¹`, `O(1, 1)`, weights `(1, 0; −1, 0)`, shift 0 —
//!   metaplectic, with a free stratum and two fixed points.

use num_rational::Ratio;

use crate::kahler_models::make_model;
use crate::torus_actions::WeightAction;

pub fn e1() -> WeightAction {
    WeightAction::new(
        make_model(&[1], &[1]).expect("valid model"),
        vec![vec![1, -1]],
        vec![Ratio::from_integer(0)],
    )
    .expect("valid action")
}

pub fn e2() -> WeightAction {
    WeightAction::new(
        make_model(&[2], &[1]).expect("valid model"),
        vec![vec![1, -1, 0]],
        vec![Ratio::from_integer(0)],
    )
    .expect("valid action")
}

pub fn e3() -> WeightAction {
    WeightAction::new(
        make_model(&[1, 1], &[1, 1]).expect("valid model"),
        vec![vec![1, 0, -1, 0]],
        vec![Ratio::from_integer(0)],
    )
    .expect("valid action")
}

/// Look up an example by name (`"E1"`, `"E2"`, `"E3"`, case-insensitive).
pub fn by_name(name: &str) -> Option<WeightAction> {
    match name.to_ascii_uppercase().as_str() {
        "E1" => Some(e1()),
        "E2" => Some(e2()),
        "E3" => Some(e3()),
        _ => None,
    }
}
