use ncf_core::harness::{construct_kkt, verify_bundle, KktBundle, KktRecipe};
use ncf_core::kkt::{assemble_weights, check_balance, construct_rank_one, small_problem_radius};
use ncf_core::metrics;

fn recipe(depth: usize, p: u32, alpha: f64, seed: u64) -> KktRecipe {
    KktRecipe {
        depth,
        p,
        alpha,
        width: 6,
        n: 40,
        d: 5,
        seed,
    }
}

#[test]
fn bundle_survives_a_json_round_trip() {
    let (bundle, outcome) = construct_kkt(&recipe(3, 2, 0.1, 4)).unwrap();
    assert!(outcome.passed);
    let text = serde_json::to_string(&bundle).unwrap();
    let back: KktBundle = serde_json::from_str(&text).unwrap();
    let again = verify_bundle(&back, outcome.recipe.clone()).unwrap();
    assert!(again.passed);
    assert_eq!(again.residual, outcome.residual);
}

#[test]
fn perturbed_point_is_not_kkt() {
    let (mut bundle, _) = construct_kkt(&recipe(3, 1, 0.0, 2)).unwrap();
    let k = bundle.kkt.as_mut().unwrap();
    k.a[0][0] += 1e-3;
    bundle.weights = assemble_weights(k);
    let out = verify_bundle(&bundle, recipe(3, 1, 0.0, 2)).unwrap();
    assert!(!out.passed);
    assert!(out.residual > 1e-6, "{}", out.residual);
}

#[test]
fn hidden_layers_are_exactly_rank_one() {
    let (bundle, _) = construct_kkt(&recipe(4, 2, 0.0, 1)).unwrap();
    let layers = bundle.weights.layers();
    let views: Vec<_> = layers[..3].iter().map(|l| l.view()).collect();
    assert!(metrics::kappa(&views).unwrap() <= 1e-14);
    let total: f64 = layers.iter().map(|l| l.iter().map(|v| v * v).sum::<f64>()).sum();
    assert!((total - 1.0).abs() <= 1e-12);
}

#[test]
fn balance_holds_layer_by_layer() {
    for p in [1, 2] {
        let (bundle, _) = construct_kkt(&recipe(3, p, 1.0, 6)).unwrap();
        for dev in check_balance(&bundle.weights, 1.0, p) {
            assert!(dev <= 1e-12, "p={p}: {dev}");
        }
    }
}

#[test]
fn wrong_b1_norm_is_rejected() {
    let (bundle, _) = construct_kkt(&recipe(3, 2, 0.0, 0)).unwrap();
    let b1 = bundle.kkt.unwrap().b[0].clone() * 1.01;
    assert!(construct_rank_one(&bundle.spec, &b1, None, None).is_err());
    assert!((small_problem_radius(3, 2) - (4.0f64 / 7.0).sqrt()).abs() <= 1e-15);
}

#[test]
fn shallow_recipe_is_rejected() {
    assert!(construct_kkt(&recipe(1, 1, 0.0, 0)).is_err());
}
