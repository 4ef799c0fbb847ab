use parttrack::geometry::{estimate_bbox, giou, iou, part_centers, target_mask, BBox, ScaleFormula, TargetMask};
use parttrack::losses::attention_loss;
use parttrack::numerics::{softmax, Tensor};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(cx, cy, w, h)| BBox::pixels(cx, cy, w, h))
}

fn locations(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y]), n)
}

proptest! {
    #[test]
    fn giou_is_bounded_symmetric_and_below_iou(a in boxes(), b in boxes()) {
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
        prop_assert!(g <= iou(&a, &b) + 1e-12);
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_bbox_is_translation_and_scale_equivariant(
        locs in locations(9),
        bits in prop::collection::vec(any::<bool>(), 9),
        t in (-0.5..0.5f64, -0.5..0.5f64),
        k in 0.2..3.0f64,
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let mask = TargetMask::from_bits(&bits);
        for f in [ScaleFormula::Std, ScaleFormula::Literal] {
            let b = estimate_bbox(&locs, &mask, 3.0, f).unwrap();
            let moved: Vec<_> = locs.iter().map(|p| [p[0] + t.0, p[1] + t.1]).collect();
            let m = estimate_bbox(&moved, &mask, 3.0, f).unwrap();
            prop_assert!((m.cx - b.cx - t.0).abs() < 1e-9 && (m.cy - b.cy - t.1).abs() < 1e-9);
            prop_assert!((m.w - b.w).abs() < 1e-9 && (m.h - b.h).abs() < 1e-9);
            let scaled: Vec<_> = locs.iter().map(|p| [p[0] * k, p[1] * k]).collect();
            let s = estimate_bbox(&scaled, &mask, 3.0, f).unwrap();
            prop_assert!((s.cx - k * b.cx).abs() < 1e-9 && (s.w - k * b.w).abs() < 1e-9 && (s.h - k * b.h).abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_bbox_ignores_unmasked_locations(locs in locations(6), other in locations(6)) {
        let mask = TargetMask::from_bits(&[true, true, true, false, false, false]);
        let mixed: Vec<_> = locs[..3].iter().chain(&other[3..]).copied().collect();
        let a = estimate_bbox(&locs, &mask, 3.0, ScaleFormula::Std).unwrap();
        let b = estimate_bbox(&mixed, &mask, 3.0, ScaleFormula::Std).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in 1usize..5,
        data in prop::collection::vec(-30.0..30.0f64, 20),
        c in -100.0..100.0f64,
    ) {
        let cols = data.len() / rows;
        let t = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
        let s = softmax(&t, 1).unwrap();
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
        let shifted = softmax(&t.map(|v| v + c), 1).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_mask_shifts_with_the_box(
        cx in 8.0..40.0f64, cy in 8.0..40.0f64, w in 4.0..30.0f64, h in 4.0..30.0f64, k in 0usize..4,
    ) {
        let (gh, gw, stride) = (8, 8, 8.0);
        let grid = part_centers(gh, gw, stride).unwrap();
        let (a, _) = target_mask(&grid, &BBox::pixels(cx, cy, w, h)).unwrap();
        let (b, _) = target_mask(&grid, &BBox::pixels(cx + k as f64 * stride, cy, w, h)).unwrap();
        for r in 0..gh {
            for c in 0..gw - k {
                prop_assert_eq!(a.is_target(r * gw + c), b.is_target(r * gw + c + k));
            }
        }
    }

    #[test]
    fn attention_loss_is_invariant_to_part_permutation(
        seed_a in prop::collection::vec(0.0..1.0f64, 4 * 5),
        l in locations(4),
        bits in prop::collection::vec(any::<bool>(), 4),
        perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle(),
    ) {
        let coords: Vec<[f64; 2]> = (0..5).map(|j| [j as f64 / 4.0, 1.0 - j as f64 / 4.0]).collect();
        let a = Tensor::new(&[4, 5], seed_a.clone()).unwrap();
        let lt = Tensor::new(&[4, 2], l.iter().flatten().copied().collect()).unwrap();
        let mask = TargetMask::from_bits(&bits);
        let base = attention_loss(&a, &coords, &lt, &mask, false).unwrap();

        let pa: Vec<f64> = perm.iter().flat_map(|&i| seed_a[i * 5..i * 5 + 5].to_vec()).collect();
        let pl: Vec<f64> = perm.iter().flat_map(|&i| l[i].to_vec()).collect();
        let pb: Vec<bool> = perm.iter().map(|&i| bits[i]).collect();
        let permuted = attention_loss(
            &Tensor::new(&[4, 5], pa).unwrap(),
            &coords,
            &Tensor::new(&[4, 2], pl).unwrap(),
            &TargetMask::from_bits(&pb),
            false,
        )
        .unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }
}
