//! Accuracy measures and dilation against brute-force oracles.

mod common;

use cloudlift::metrics::{confusion, dilate_chebyshev, report, ConfusionMatrix, MaskImage};
use common::{chebyshev_oracle, oracle_metrics, random_mask, random_mask_sized};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reports_equal_the_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let pred = random_mask(&mut rng, 20);
        let reference = random_mask_sized(&mut rng, pred.height(), pred.width());
        let r = report(&confusion(&pred, &reference).unwrap()).unwrap();
        let o = oracle_metrics(pred.values(), reference.values());
        assert_eq!((r.oa, r.commission, r.omission, r.miou), (o.oa, o.commission, o.omission, o.miou));
    }
}

#[test]
fn worked_example() {
    let cm = ConfusionMatrix { tp: 1, fp: 1, fn_: 0, tn: 2 };
    let r = report(&cm).unwrap();
    assert_eq!(r.oa, 0.75);
    assert_eq!(r.commission, Some(0.5));
    assert_eq!(r.omission, Some(0.0));
    assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn identical_masks_score_one() {
    let m = MaskImage::from_fn(5, 7, |y, x| (y + x) % 3 == 0).unwrap();
    let r = report(&confusion(&m, &m).unwrap()).unwrap();
    assert_eq!((r.oa, r.commission, r.omission, r.miou), (1.0, Some(0.0), Some(0.0), Some(1.0)));
}

#[test]
fn dilation_matches_the_chebyshev_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let m = random_mask(&mut rng, 24);
        let r = rng.gen_range(0..5);
        assert_eq!(dilate_chebyshev(&m, r).values(), chebyshev_oracle(&m, r).as_slice());
    }
}

#[test]
fn dilation_is_extensive_monotone_and_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let m = random_mask(&mut rng, 24);
        let (a, b) = (rng.gen_range(0..4), rng.gen_range(0..4));
        let da = dilate_chebyshev(&m, a);
        let dab = dilate_chebyshev(&m, a + b);
        let subset = |x: &MaskImage, y: &MaskImage| x.values().iter().zip(y.values()).all(|(p, q)| p <= q);
        assert!(subset(&m, &da));
        assert!(subset(&da, &dab));
        assert_eq!(dilate_chebyshev(&da, b), dab);
    }
}

#[test]
fn dilating_the_prediction_never_raises_omission() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..60 {
        let pred = random_mask(&mut rng, 24);
        let reference = random_mask_sized(&mut rng, pred.height(), pred.width());
        let before = report(&confusion(&pred, &reference).unwrap()).unwrap();
        let after = report(&confusion(&dilate_chebyshev(&pred, 3), &reference).unwrap()).unwrap();
        if let (Some(b), Some(a)) = (before.omission, after.omission) {
            assert!(a <= b);
        }
    }
}

#[test]
fn commission_never_falls_when_the_prediction_covers_the_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..60 {
        let reference = random_mask(&mut rng, 24);
        let extra = random_mask_sized(&mut rng, reference.height(), reference.width());
        let pred = MaskImage::from_fn(reference.height(), reference.width(), |y, x| {
            reference.get(y, x) || extra.get(y, x)
        })
        .unwrap();
        let before = report(&confusion(&pred, &reference).unwrap()).unwrap();
        let after = report(&confusion(&dilate_chebyshev(&pred, 3), &reference).unwrap()).unwrap();
        match (before.commission, after.commission) {
            (Some(b), Some(a)) => assert!(a >= b),
            (None, _) => assert_eq!(pred.cloud_pixels(), 0),
            (Some(_), None) => unreachable!("dilation cannot remove predicted cloud"),
        }
    }
}

#[test]
fn commission_can_fall_when_dilation_reaches_missed_cloud() {
    // One false positive next to a block of missed reference cloud.
    let reference = MaskImage::from_fn(1, 5, |_, x| x >= 1).unwrap();
    let pred = MaskImage::from_fn(1, 5, |_, x| x == 0).unwrap();
    let before = report(&confusion(&pred, &reference).unwrap()).unwrap();
    let after = report(&confusion(&dilate_chebyshev(&pred, 3), &reference).unwrap()).unwrap();
    assert_eq!(before.commission, Some(1.0));
    assert_eq!(after.commission, Some(0.25));
}
