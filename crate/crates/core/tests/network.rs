use ndarray::{Array1, Array2};
use proptest::prelude::*;

use ncf_core::ncf::{kkt_report, NcfProblem};
use ncf_core::net::{self, Dataset, NetSpec, Weights};

fn spec_strategy() -> impl Strategy<Value = NetSpec> {
    (1usize..5, prop::collection::vec(1usize..5, 1..4), prop::sample::select(vec![0.0, 0.1, 1.0]), 1u32..4)
        .prop_map(|(d, hidden, alpha, p)| NetSpec::with_hidden(d, &hidden, alpha, p).unwrap())
}

fn instance() -> impl Strategy<Value = (NetSpec, Vec<f64>, Vec<f64>)> {
    spec_strategy().prop_flat_map(|spec| {
        let k = spec.param_count();
        let d = spec.input_dim();
        (Just(spec), prop::collection::vec(-2.0f64..2.0, k), prop::collection::vec(-2.0f64..2.0, d))
    })
}

proptest! {
    #[test]
    fn positive_scaling_is_homogeneous((spec, w, x) in instance(), c in 0.25f64..4.0) {
        let w = Weights::from_flat(&spec, w).unwrap();
        let x = Array1::from(x);
        let h = net::forward(&spec, &w, x.view()).unwrap().0;
        let hc = net::forward(&spec, &w.scaled(c), x.view()).unwrap().0;
        let expect = c.powi(spec.homogeneity_order() as i32) * h;
        prop_assert!((hc - expect).abs() <= 1e-10 * expect.abs().max(1e-300));
    }

    #[test]
    fn batch_outputs_match_single_passes((spec, w, x) in instance()) {
        let w = Weights::from_flat(&spec, w).unwrap();
        let d = spec.input_dim();
        let xs = Array2::from_shape_fn((d, 3), |(i, j)| x[i] * (j as f64 - 1.0));
        let batch = net::outputs(&spec, &w, xs.view()).unwrap();
        for j in 0..3 {
            let single = net::forward(&spec, &w, xs.column(j)).unwrap().0;
            prop_assert!((batch[j] - single).abs() <= 1e-12 * single.abs().max(1.0));
        }
    }
}

#[test]
fn correlation_is_weighted_sum_of_outputs() {
    let spec = NetSpec::with_hidden(2, &[3], 0.1, 2).unwrap();
    let w = Weights::from_flat(&spec, (0..spec.param_count()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + 2 * j) as f64 * 0.3 - 0.5);
    let y = Array1::from(vec![1.0, -2.0, 0.5, 3.0]);
    let data = Dataset::new(x.clone(), y.clone()).unwrap();
    let prob = NcfProblem::from_targets(spec.clone(), data).unwrap();
    let outs = net::outputs(&spec, &w, x.view()).unwrap();
    let expect: f64 = prob.z.iter().zip(&outs).map(|(z, o)| z * o).sum();
    assert!((prob.value(&w).unwrap() - expect).abs() <= 1e-12);
}

#[test]
fn kkt_report_on_linear_two_layer_optimum() {
    // For σ = identity and one hidden unit, N(w) = w2 w1ᵀXz peaks at
    // w1 = v/√2, w2 = 1/√2 with v the unit direction of Xz.
    let spec = NetSpec::with_hidden(3, &[1], 1.0, 1).unwrap();
    let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64).cos());
    let y = Array1::from(vec![0.3, -1.0, 2.0, 0.1, 0.7]);
    let data = Dataset::new(x.clone(), y.clone()).unwrap();
    let prob = NcfProblem::from_targets(spec.clone(), data).unwrap();
    let xz = x.dot(&prob.z);
    let v = &xz / xz.dot(&xz).sqrt();
    let s = 0.5f64.sqrt();
    let mut flat: Vec<f64> = v.iter().map(|a| a * s).collect();
    flat.push(s);
    let w = Weights::from_flat(&spec, flat).unwrap();
    let r = kkt_report(&prob, &w).unwrap();
    assert!(r.residual <= 1e-12, "{r:?}");
    assert!((r.alignment - 1.0).abs() <= 1e-12);
    assert!((r.lambda_estimate - 2.0 * r.ncf_value).abs() <= 1e-10);
}

#[test]
fn mismatched_input_is_rejected() {
    let spec = NetSpec::with_hidden(3, &[2], 0.0, 1).unwrap();
    let w = Weights::zeros(&spec);
    assert!(net::forward(&spec, &w, Array1::zeros(4).view()).is_err());
    assert!(Weights::from_flat(&spec, vec![0.0; 3]).is_err());
}
