//! Analytic gradients of every differentiable op against central finite
//! differences (eps = 1e-5) on random inputs in [-2, 2].

mod common;

use autr::numeric::{Graph, Tensor, Var};
use common::{gradcheck, op_cases, rng, uniform};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut r = rng(1000 + i as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut r, s, -2.0, 2.0)).collect();
        let err = gradcheck(&inputs, |g: &mut Graph, v: &[Var]| f(g, v));
        println!("{name:>22}: rel err {err:.2e}");
        if err >= TOL {
            failures.push((name, err));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn training_objective_matches_finite_differences() {
    let cfg = common::tiny_config();
    let mut model = autr::AutrModel::new(cfg.clone()).unwrap();
    common::open_zero_init(&mut model, 4);
    let sample = common::random_sample(&cfg, 2, 5);
    let opts = autr::objective::TrainOptions {
        negative_supervision: true,
        ..Default::default()
    };
    let grads = common::training_loss_gradients(&model, &sample, &opts);
    let (a, n): (Vec<f64>, Vec<f64>) = grads
        .iter()
        .flat_map(|(_, a, n)| a.iter().copied().zip(n.iter().copied()))
        .unzip();
    let total = common::rel_error(&a, &n);
    assert!(total < 1e-3, "relative error {total}");
    for (name, a, n) in &grads {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm(a) > 1e-8 {
            let rel = common::rel_error(a, n);
            assert!(rel < 1e-3, "{name}: relative error {rel}");
        } else {
            // Structurally zero (e.g. key biases under softmax): both sides vanish.
            assert!(norm(n) < 1e-8, "{name}: analytic 0, numeric {}", norm(n));
        }
    }
}
