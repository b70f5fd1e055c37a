mod common;

use a2i::nn::{grad_check, GradStore, ParamStore, Tensor};

fn assert_passes(name: &str, report: a2i::nn::GradCheckReport) {
    assert!(
        report.passed(),
        "{name}: worst {:?} at {:e}",
        report.worst().map(|w| &w.name),
        report.max_rel_error
    );
}

#[test]
fn affine_matches_finite_differences() {
    assert_passes("affine", common::check_affine(11));
}

#[test]
fn relu_matches_finite_differences() {
    assert_passes("relu", common::check_relu(12));
}

#[test]
fn cross_entropy_matches_finite_differences() {
    assert_passes("ce", common::check_cross_entropy(13, false));
    assert_passes("weighted ce", common::check_cross_entropy(13, true));
}

#[test]
fn affine_relu_cross_entropy_chain() {
    assert_passes("chain", common::check_chain(14));
}

#[test]
fn mean_over_rows_matches_finite_differences() {
    assert_passes("mean", common::check_mean_rows(15));
}

#[test]
fn layer_norm_and_feed_forward() {
    assert_passes("layer norm", common::check_layer_norm(16));
    assert_passes("ffn", common::check_feed_forward(16));
}

#[test]
fn attention_k3_d8_h2() {
    assert_passes("attention", common::check_attention(17));
}

#[test]
fn encoder_with_and_without_feed_forward() {
    assert_passes("encoder", common::check_encoder(18, true));
    assert_passes("encoder no ffn", common::check_encoder(18, false));
}

#[test]
fn acoustic_and_textual_branches() {
    assert_passes("acoustic", common::check_acoustic(19));
    assert_passes("textual", common::check_textual(19));
}

#[test]
fn end_to_end_full_model_loss() {
    for seed in 0..3 {
        assert_passes("full", common::check_full_model(seed));
    }
}

#[test]
fn constant_computation_reports_zero() {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let obj = |_: &ParamStore, _: Option<&mut GradStore>| 7.0;
    let r = grad_check(&mut s, &obj, 1e-4);
    assert!(r.passed());
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn doubled_backward_reports_unit_error() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let v = p.value(w).data();
        if let Some(g) = g {
            let grad: Vec<f64> = v.iter().map(|x| 2.0 * (2.0 * x)).collect();
            g.accumulate(w, &Tensor::new(vec![3], grad).unwrap());
        }
        v.iter().map(|x| x * x).sum()
    };
    let r = grad_check(&mut s, &obj, 1e-4);
    assert!(!r.passed());
    assert!((r.max_rel_error - 1.0).abs() < 1e-6, "{}", r.max_rel_error);
}
