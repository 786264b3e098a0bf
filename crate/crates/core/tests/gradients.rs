//! Autodiff gradients of the combined objective against central finite
//! differences, on a toy two-layer student in f64.

mod common;

use common::gradcheck::max_relative_error;
use smokeseg::kt::{KtConfig, Level, Metric};

#[test]
fn global_cosine_gradients() {
    let (err, n) = max_relative_error(&KtConfig::default(), 1, 120);
    assert!(n >= 100);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn spatial_l2_gradients() {
    let cfg = KtConfig {
        level: Level::Spatial,
        metric: Metric::L2,
        lambda: 0.7,
        ..Default::default()
    };
    let (err, _) = max_relative_error(&cfg, 2, 120);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn gram_cosine_gradients() {
    let cfg = KtConfig {
        level: Level::Gram,
        lambda: 1.3,
        ..Default::default()
    };
    let (err, _) = max_relative_error(&cfg, 3, 120);
    assert!(err < 1e-4, "relative error {err}");
}
