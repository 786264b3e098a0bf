mod common;

use common::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use smokeseg::cam::{ActivationMap, PseudoMask};
use smokeseg::metrics::*;

#[test]
fn confusion_matches_pixel_loop() {
    let mut r = rng(1);
    for _ in 0..100 {
        let pred = random_mask(&mut r, 32, 32, 0.3);
        let gt = random_mask(&mut r, 32, 32, 0.4);
        let c = accumulate_confusion(&PseudoMask::new(pred.clone()).unwrap(), gt.view(), Default::default()).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), brute_confusion(&pred, &gt));
        assert_eq!(c.total(), 1024);
    }
}

#[test]
fn sweep_matches_exhaustive_evaluation() {
    let mut r = rng(2);
    let cams: Vec<Array2<f32>> = (0..2).map(|_| Array2::from_shape_fn((6, 5), |_| r.random::<f32>())).collect();
    let gts: Vec<Array2<u8>> = (0..2).map(|_| random_mask(&mut r, 6, 5, 0.4)).collect();
    let grid = default_grid();
    let maps: Vec<ActivationMap> = cams.iter().map(|c| ActivationMap::new(c.clone().insert_axis(Axis(0)), true)).collect();
    let views: Vec<_> = gts.iter().map(|g| g.view()).collect();
    let got = threshold_sweep(&maps, &views, &grid).unwrap();
    let (best, curve) = brute_sweep(&cams, &gts, &grid);
    assert_eq!(got.best_threshold, grid[best]);
    for (a, b) in got.curve.iter().zip(&curve) {
        assert!((a.unwrap() - b).abs() < 1e-12);
    }
    // global best dominates every fixed threshold
    assert!(got.curve.iter().all(|v| v.unwrap() <= got.best_iou.unwrap()));
    assert_eq!(got.histogram.iter().sum::<usize>(), 2);
}

proptest! {
    #[test]
    fn accumulation_is_order_independent(seed in 0u64..5000) {
        let mut r = rng(seed);
        let pairs: Vec<_> = (0..4).map(|_| (random_mask(&mut r, 4, 5, 0.5), random_mask(&mut r, 4, 5, 0.5))).collect();
        let fwd = pairs.iter().fold(ConfusionCounts::default(), |acc, (p, g)| {
            accumulate_confusion(&PseudoMask::new(p.clone()).unwrap(), g.view(), acc).unwrap()
        });
        let rev = pairs.iter().rev().fold(ConfusionCounts::default(), |acc, (p, g)| {
            accumulate_confusion(&PseudoMask::new(p.clone()).unwrap(), g.view(), acc).unwrap()
        });
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn iou_flip_invariant(seed in 0u64..5000) {
        let mut r = rng(seed);
        let p = random_mask(&mut r, 7, 9, 0.5);
        let g = random_mask(&mut r, 7, 9, 0.5);
        let flip = |m: &Array2<u8>| { let mut f = m.clone(); f.invert_axis(Axis(1)); f };
        let a = smoke_iou(&confusion(p.view(), g.view()).unwrap());
        let b = smoke_iou(&confusion(flip(&p).view(), flip(&g).view()).unwrap());
        prop_assert_eq!(a, b);
    }
}
