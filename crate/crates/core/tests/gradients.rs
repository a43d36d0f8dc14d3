mod common;

use common::grad::{self, GradReport};

fn check(report: GradReport) {
    assert!(report.cases >= 20, "{report:?}");
    assert!(report.passed(), "{report:?}");
}

#[test]
fn conv_backward() {
    check(grad::conv(11));
}

#[test]
fn linear_backward() {
    check(grad::linear(12));
}

#[test]
fn relu_backward() {
    check(grad::relu(13));
}

#[test]
fn max_pool_backward() {
    check(grad::max_pool(14));
}

#[test]
fn softmax_layer_backward() {
    check(grad::softmax_layer(15));
}

#[test]
fn stacked_network_backward() {
    check(grad::sequential(16));
}

#[test]
fn superpixel_pool_mean_backward() {
    check(grad::superpixel_pool_mean(17));
}

#[test]
fn superpixel_pool_max_backward() {
    check(grad::superpixel_pool_max(18));
}

#[test]
fn roi_pool_backward() {
    check(grad::roi_pooling(19));
}

#[test]
fn upscale_backward() {
    check(grad::upscale(20));
}

#[test]
fn concat_backward() {
    check(grad::concat(21));
}

#[test]
fn spatial_softmax_loss_gradient() {
    check(grad::spatial_softmax(22));
}

#[test]
fn depth_regression_loss_gradient() {
    check(grad::depth_regression(23));
}

#[test]
fn detection_loss_gradient() {
    check(grad::detection(24));
}

#[test]
fn crf_likelihood_gradient() {
    check(grad::crf_nll(25));
}
