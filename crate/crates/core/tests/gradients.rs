mod common;

use common::{flatten_grads, gradient_error, gradient_fixtures, max_relative_error, numeric_gradient_at, OracleNet};
use ldaprune::arch::{toy_input_shape, toy_specs};
use ldaprune::dataset::generate_synthetic;
use ldaprune::model::forward_pass;
use ldaprune::train::{backward_pass, init_model};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_kind_matches_finite_differences() {
    for (name, m, image, label) in gradient_fixtures(11) {
        let err = gradient_error(&m, &image, label, 1e-5, 1e-4);
        assert!(err < 1e-3, "{name}: max relative error {err:e}");
    }
}

#[test]
fn toy_net_sampled_parameters_match_finite_differences() {
    let m = init_model(toy_input_shape(), &toy_specs(), 3).unwrap();
    let data = generate_synthetic(2, 32, 3).unwrap();
    let s = &data.train[0];
    let rec = forward_pass(&m, &s.image).unwrap();
    let analytic = flatten_grads(&backward_pass(&m, &rec, s.label).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let positions = sample(&mut rng, analytic.len(), 120).into_vec();
    let x: Vec<f64> = s.image.data().iter().map(|&v| v as f64).collect();
    // 1e-3 steps cross ReLU and pooling kinks on a net this deep; the f64
    // oracle affords a much smaller step.
    let numeric = numeric_gradient_at(&OracleNet::from_model(&m), &x, s.label, 1e-5, &positions);
    let picked: Vec<f64> = positions.iter().map(|&p| analytic[p]).collect();
    let err = max_relative_error(&picked, &numeric, 1e-4);
    assert!(err < 1e-4, "max relative error {err:e}");
}
