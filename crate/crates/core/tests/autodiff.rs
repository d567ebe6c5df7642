mod common;

use chainfed::kernels::{self, gelu_scalar};
use chainfed::tensor::Tensor;
use common::{gradient_check, RandomGraph};

#[test]
fn random_graphs_match_central_differences() {
    let mut checked = 0;
    for seed in 100..130 {
        let g = RandomGraph::new(seed);
        if g.kink_margin() < 1e-3 {
            continue;
        }
        let err = gradient_check(&g, 1e-5, 1e-3);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn gelu_matches_wider_precision() {
    // f32 kernel against the same formula evaluated in f64
    for k in -400..=400 {
        let x = k as f64 / 50.0;
        let wide = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let narrow = gelu_scalar(x as f32) as f64;
        assert!((narrow - wide).abs() <= 4.0 * f32::EPSILON as f64 * wide.abs().max(1.0), "x={x}");
    }
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let logits = Tensor::<f64>::from_f64(vec![2, 3], &[1000.0, 1001.0, 999.0, -800.0, -800.0, -790.0]).unwrap();
    let (loss, probs) = kernels::softmax_cross_entropy(&logits, &[0, 2]).unwrap();
    // log-sum-exp with the maximum factored out by hand
    let lse = |v: [f64; 3]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let expect = ((lse([1000.0, 1001.0, 999.0]) - 1000.0) + (lse([-800.0, -800.0, -790.0]) + 790.0)) / 2.0;
    assert!((loss - expect).abs() < 1e-12);
    assert!(probs.data().iter().all(|p| p.is_finite()));
}

