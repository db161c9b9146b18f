mod common;

use filora::model::Method;

#[test]
fn filora_objective_matches_finite_differences_over_twenty_seeds() {
    for seed in 0..20 {
        let (net, data) = common::tiny_method(Method::Filora, seed);
        let err = common::full_loss_gradcheck(&net, &common::routed(&net, &data), 0.05);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn baseline_objectives_match_finite_differences() {
    for m in [Method::FullFineTune, Method::PlainLora, Method::PromptOnly] {
        for seed in 0..3 {
            let (net, data) = common::tiny_method(m, seed);
            let err = common::full_loss_gradcheck(&net, &common::routed(&net, &data), 0.05);
            assert!(err < 1e-4, "{m} seed {seed}: max relative error {err:e}");
        }
    }
}

#[test]
fn large_lambda_keeps_gradients_exact() {
    // The gate term dominates here; its gradient flows only through the encoder.
    let (net, data) = common::tiny_method(Method::Filora, 42);
    let err = common::full_loss_gradcheck(&net, &common::routed(&net, &data), 5.0);
    assert!(err < 1e-4, "{err:e}");
}
