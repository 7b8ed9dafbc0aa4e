//! Per-example losses and their derivatives in the prediction.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½(ŷ − y)²`
    Square,
    /// `ln(1 + e^{−ŷy})`
    Logistic,
}

pub fn loss_value(kind: LossKind, yhat: f64, y: f64) -> f64 {
    match kind {
        LossKind::Square => 0.5 * (yhat - y).powi(2),
        LossKind::Logistic => {
            let m = -yhat * y;
            // ln(1 + e^m) without overflow for large m
            if m > 0.0 {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            }
        }
    }
}

pub fn loss_prime(kind: LossKind, yhat: f64, y: f64) -> f64 {
    match kind {
        LossKind::Square => yhat - y,
        LossKind::Logistic => {
            // −y·e^{−ŷy}/(1 + e^{−ŷy}) = −y / (1 + e^{ŷy})
            -y / (1.0 + (yhat * y).exp())
        }
    }
}

/// `−ℓ'(0, y)` elementwise: the weighting vector of the early-phase correlation.
pub fn ncf_target(kind: LossKind, y: ArrayView1<'_, f64>) -> Array1<f64> {
    y.mapv(|yi| -loss_prime(kind, 0.0, yi))
}

pub fn total_loss(kind: LossKind, yhat: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    yhat.iter().zip(y).map(|(&a, &b)| loss_value(kind, a, b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn values() {
        assert_eq!(loss_value(LossKind::Square, 3.0, 3.0), 0.0);
        assert_eq!(loss_value(LossKind::Square, 1.0, 0.0), 0.5);
        assert_relative_eq!(loss_value(LossKind::Logistic, 0.0, 1.0), 2f64.ln(), max_relative = 1e-15);
        assert!(loss_value(LossKind::Logistic, -800.0, 1.0).is_finite());
    }

    #[test]
    fn derivatives_at_zero() {
        for &y in &[-2.0, 0.5, 3.0] {
            assert_eq!(loss_prime(LossKind::Square, 0.0, y), -y);
            assert_relative_eq!(loss_prime(LossKind::Logistic, 0.0, y), -y / 2.0);
        }
        assert_eq!(loss_prime(LossKind::Square, 5.0, 5.0), 0.0);
    }

    #[test]
    fn targets() {
        let y = array![1.0, -2.0, 0.5];
        assert_eq!(ncf_target(LossKind::Square, y.view()), y);
        assert_eq!(ncf_target(LossKind::Logistic, y.view()), &y / 2.0);
        let zero = Array1::<f64>::zeros(4);
        assert_eq!(ncf_target(LossKind::Square, zero.view()), zero);
    }

    proptest! {
        #[test]
        fn derivative_matches_central_difference(yhat in -3.0f64..3.0, y in -3.0f64..3.0) {
            for kind in [LossKind::Square, LossKind::Logistic] {
                let h = 1e-5;
                let fd = (loss_value(kind, yhat + h, y) - loss_value(kind, yhat - h, y)) / (2.0 * h);
                let an = loss_prime(kind, yhat, y);
                prop_assert!((fd - an).abs() <= 1e-8 * (1.0 + an.abs()), "{kind:?}: fd={fd} an={an}");
            }
        }

        #[test]
        fn square_target_is_twice_logistic(y in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let y = Array1::from(y);
            let sq = ncf_target(LossKind::Square, y.view());
            let lg = ncf_target(LossKind::Logistic, y.view());
            prop_assert_eq!(sq, lg * 2.0);
        }
    }
}
