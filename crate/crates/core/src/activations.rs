//! Reference activation functions.
//!
//! These are scalar double-precision implementations used to check the
//! nonlinearities fused into the network layers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Sigmoid,
    Tanh,
    Relu,
    /// Per-vector; see [`softmax`].
    Softmax,
}

impl Activation {
    /// Apply an elementwise activation. Softmax has no scalar form; a
    /// single-element vector always maps to 1.
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => relu(z),
            Activation::Softmax => 1.0,
        }
    }

    pub fn apply_vec(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Softmax => softmax(z),
            other => z.iter().map(|&v| other.apply(v)).collect(),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    // split on sign so exp never overflows
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        for z in [-2.0, 0.0, 2.0] {
            let lhs = Activation::Tanh.apply(z);
            let rhs = 2.0 * sigmoid(2.0 * z) - 1.0;
            assert!((lhs - rhs).abs() < 1e-12, "z={z}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }

    #[test]
    fn softmax_shifts_invariantly() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(Activation::Softmax.apply_vec(&[4.0]), vec![1.0]);
    }

    proptest! {
        // |z| > 19 rounds tanh to +-1 in double precision
        #[test]
        fn ranges(z in -18.0f64..18.0) {
            let s = sigmoid(z);
            prop_assert!(s > 0.0 && s < 1.0);
            let t = z.tanh();
            prop_assert!(t > -1.0 && t < 1.0);
            prop_assert_eq!(relu(relu(z)), relu(z));
        }

        #[test]
        fn softmax_sums_to_one(z in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
            let p = softmax(&z);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
