mod common;

use a4unet::metrics::{
    binary_iou, class_confusions, confusion, dice, hd95, miou, percentile, reduce_case, score_slice, MetricConfig,
    MetricReport, Reduction,
};
use a4unet::Error;
use common::{dice_oracle, hd_oracle, miou_oracle, random_mask, rng};
use ndarray::{array, Array2};
use proptest::prelude::*;

#[test]
fn crafted_pairs() {
    // TP=2, FP=1, FN=1
    let gt = array![[1u8, 1], [1, 0]];
    let pred = array![[1u8, 1], [0, 1]];
    assert!((dice(pred.view(), gt.view()).unwrap() - 4.0 / 6.0).abs() < 1e-15);

    let gt = array![[1u8, 1], [0, 0]];
    let pred = array![[1u8, 0], [0, 0]];
    let m = miou(pred.view(), gt.view(), 1).unwrap();
    assert!((m - 7.0 / 12.0).abs() < 1e-15);
    let c = class_confusions(pred.view(), gt.view(), 1).unwrap();
    assert_eq!((c[1].iou(), c[0].iou()), (0.5, 2.0 / 3.0));

    let zero = Array2::<u8>::zeros((4, 4));
    assert_eq!(miou(zero.view(), zero.view(), 1).unwrap(), 1.0);
    assert_eq!(dice(zero.view(), zero.view()).unwrap(), 1.0);
    assert_eq!(hd95(zero.view(), zero.view(), (1.0, 1.0), 95.0).unwrap(), None);
}

#[test]
fn perfect_and_disjoint() {
    let a = array![[0u8, 1, 1], [0, 1, 0], [0, 0, 0]];
    let b = array![[1u8, 0, 0], [0, 0, 0], [0, 0, 1]];
    assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
    assert_eq!(miou(a.view(), a.view(), 1).unwrap(), 1.0);
    assert_eq!(hd95(a.view(), a.view(), (1.0, 1.0), 95.0).unwrap(), Some(0.0));
    assert_eq!(dice(a.view(), b.view()).unwrap(), 0.0);
}

#[test]
fn single_point_distance() {
    let mut a = Array2::<u8>::zeros((6, 6));
    let mut b = Array2::<u8>::zeros((6, 6));
    a[[0, 0]] = 1;
    b[[3, 4]] = 1;
    for p in [0.0, 50.0, 95.0, 100.0] {
        assert_eq!(hd95(a.view(), b.view(), (1.0, 1.0), p).unwrap(), Some(5.0));
    }
    assert_eq!(hd95(a.view(), b.view(), (2.0, 0.5), 95.0).unwrap(), Some((36.0f64 + 4.0).sqrt()));
}

#[test]
fn hausdorff_at_100_matches_brute_force() {
    let mut r = rng(100);
    for _ in 0..200 {
        let p = random_mask(&mut r, 16, 16, 1);
        let g = random_mask(&mut r, 16, 16, 1);
        assert_eq!(hd95(p.view(), g.view(), (1.0, 1.0), 100.0).unwrap(), hd_oracle(&p, &g, (1.0, 1.0), 100.0));
    }
}

#[test]
fn anisotropic_spacing_matches_brute_force() {
    let mut r = rng(101);
    for _ in 0..200 {
        let p = random_mask(&mut r, 12, 16, 1);
        let g = random_mask(&mut r, 12, 16, 1);
        let s = (0.7, 1.3);
        match (hd95(p.view(), g.view(), s, 95.0).unwrap(), hd_oracle(&p, &g, s, 95.0)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let a = Array2::<u8>::zeros((3, 3));
    let b = Array2::<u8>::zeros((3, 4));
    assert!(matches!(dice(a.view(), b.view()), Err(Error::Shape(_))));
    assert!(hd95(a.view(), a.view(), (0.0, 1.0), 95.0).is_err());
    assert!(hd95(a.view(), a.view(), (1.0, 1.0), 101.0).is_err());
    let c = array![[0u8, 3]];
    assert!(miou(c.view(), c.view(), 1).is_err());
}

#[test]
fn numpy_linear_percentile() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(percentile(&v, 50.0), Some(2.5));
    assert!((percentile(&v, 95.0).unwrap() - 3.85).abs() < 1e-12);
    assert_eq!(percentile(&v, 0.0), Some(1.0));
    assert_eq!(percentile(&v, 100.0), Some(4.0));
    assert_eq!(percentile(&[], 50.0), None);
}

#[test]
fn all_background_predictions() {
    let cfg = MetricConfig::default();
    let mut gt = Array2::<u8>::zeros((8, 8));
    gt[[3, 3]] = 1;
    gt[[3, 4]] = 1;
    let empty = Array2::<u8>::zeros((8, 8));
    let cases: Vec<_> = ["a", "b"]
        .iter()
        .map(|id| {
            let slices = vec![
                score_slice(empty.view(), gt.view(), (1.0, 1.0), &cfg).unwrap(),
                score_slice(empty.view(), empty.view(), (1.0, 1.0), &cfg).unwrap(),
            ];
            reduce_case(id, &slices, Reduction::SliceMean)
        })
        .collect();
    let report = MetricReport::from_cases(cases);
    assert_eq!(report.per_case.len(), 2);
    assert!(report.per_case.iter().all(|c| c.dsc == 0.0 && c.hd95_mm.is_none()));
    assert_eq!(report.undefined_hd95_count, 2);
    assert_eq!(report.empty_slice_count, 2);
    assert!(report.aggregate.hd95_mm.is_none());
    let text = report.to_text();
    assert!(text.contains("undefined_hd95_count = 2"), "{text}");
}

#[test]
fn reductions_differ_only_in_dice() {
    let cfg = MetricConfig::default();
    let gt = array![[1u8, 1, 0, 0]];
    let p1 = array![[1u8, 0, 0, 0]];
    let p2 = array![[1u8, 1, 1, 1]];
    let s = [
        score_slice(p1.view(), gt.view(), (1.0, 1.0), &cfg).unwrap(),
        score_slice(p2.view(), gt.view(), (1.0, 1.0), &cfg).unwrap(),
    ];
    let mean = reduce_case("x", &s, Reduction::SliceMean);
    let pooled = reduce_case("x", &s, Reduction::Pooled);
    assert!((mean.dsc - (2.0 / 3.0 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
    assert!((pooled.dsc - 6.0 / 9.0).abs() < 1e-15);
    assert_eq!(mean.miou, pooled.miou);
}

#[test]
fn single_run_has_no_std() {
    let cfg = MetricConfig::default();
    let gt = array![[1u8, 0]];
    let case = reduce_case("x", &[score_slice(gt.view(), gt.view(), (1.0, 1.0), &cfg).unwrap()], Reduction::SliceMean);
    let r = MetricReport::from_cases(vec![case]);
    assert!(r.aggregate.dsc.unwrap().std.is_none());
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0u8..=1, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
}

proptest! {
    #[test]
    fn symmetric_and_bounded((p, g) in pair()) {
        let d = dice(p.view(), g.view()).unwrap();
        let m = miou(p.view(), g.view(), 1).unwrap();
        prop_assert_eq!(d, dice(g.view(), p.view()).unwrap());
        prop_assert_eq!(m, miou(g.view(), p.view(), 1).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&m));
        prop_assert_eq!(d, dice_oracle(&p, &g));
        prop_assert_eq!(m, miou_oracle(&p, &g, 1));
        let c = confusion(p.view(), g.view()).unwrap();
        prop_assert_eq!(c.total() as usize, p.len());
    }

    #[test]
    fn dice_iou_identity((p, g) in pair()) {
        let d = dice(p.view(), g.view()).unwrap();
        let j = binary_iou(p.view(), g.view()).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_percentile_monotone((p, g) in pair(), lo in 0.0f64..100.0) {
        let a = hd95(p.view(), g.view(), (1.0, 1.0), lo).unwrap();
        let b = hd95(p.view(), g.view(), (1.0, 1.0), 100.0).unwrap();
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!(a >= 0.0 && a <= b);
        }
        prop_assert_eq!(a, hd95(g.view(), p.view(), (1.0, 1.0), lo).unwrap());
    }
}
