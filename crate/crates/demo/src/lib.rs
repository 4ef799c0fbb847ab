//! WebAssembly bindings for the browser demo: box estimation from clicked
//! points, a GIoU explorer and a Gumbel-softmax sampler histogram.

use parttrack::geometry::{estimate_bbox, giou, iou, BBox, ScaleFormula, TargetMask};
use parttrack::numerics::{gumbel_softmax, RngState, Tensor};
use wasm_bindgen::prelude::*;

/// Box `[cx, cy, w, h]` from flat `[x0, y0, x1, y1, ...]` points, all treated
/// as target parts. `formula` is `"std"` or `"literal"`.
#[wasm_bindgen(js_name = estimateBox)]
pub fn estimate_box(points: &[f64], sigma: f64, formula: &str) -> Result<Vec<f64>, JsError> {
    if points.len() % 2 != 0 {
        return Err(JsError::new("points must hold x,y pairs"));
    }
    let locs: Vec<[f64; 2]> = points.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
    let formula: ScaleFormula = formula.parse().map_err(|e: parttrack::Error| JsError::new(&e.to_string()))?;
    let b = estimate_bbox(&locs, &TargetMask::all(locs.len()), sigma, formula)
        .map_err(|e| JsError::new(&e.to_string()))?;
    Ok(vec![b.cx, b.cy, b.w, b.h])
}

/// `[iou, giou, hull_x, hull_y, hull_w, hull_h]` for two `[x, y, w, h]` boxes.
#[wasm_bindgen(js_name = compareBoxes)]
pub fn compare_boxes(a: &[f64], b: &[f64]) -> Result<Vec<f64>, JsError> {
    if a.len() != 4 || b.len() != 4 {
        return Err(JsError::new("boxes are [x, y, w, h]"));
    }
    let a = BBox::from_xywh(a[0], a[1], a[2], a[3]);
    let b = BBox::from_xywh(b[0], b[1], b[2], b[3]);
    let (x1, y1) = (a.x1().min(b.x1()), a.y1().min(b.y1()));
    let (x2, y2) = (a.x2().max(b.x2()), a.y2().max(b.y2()));
    Ok(vec![iou(&a, &b), giou(&a, &b), x1, y1, x2 - x1, y2 - y1])
}

/// Per-category counts of the argmax over `draws` Gumbel-softmax samples,
/// followed by the mean soft sample.
#[wasm_bindgen(js_name = gumbelHistogram)]
pub fn gumbel_histogram(logits: &[f64], tau: f64, draws: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    if logits.is_empty() {
        return Err(JsError::new("need at least one logit"));
    }
    let n = logits.len();
    let t = Tensor::vector(logits);
    let mut rng = RngState::new(seed);
    let mut out = vec![0.0; 2 * n];
    for _ in 0..draws {
        let s = gumbel_softmax(&t, tau, false, &mut rng).map_err(|e| JsError::new(&e.to_string()))?;
        let best = s
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out[best] += 1.0;
        for (m, v) in out[n..].iter_mut().zip(s.data()) {
            *m += v / draws as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_points_gives_centered_box() {
        let b = estimate_box(&[0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0], 2.0, "std").unwrap();
        assert_eq!(b, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn identical_boxes_overlap_fully() {
        let r = compare_boxes(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(&r[..2], &[1.0, 1.0]);
        assert_eq!(&r[2..], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn histogram_counts_every_draw_and_follows_the_logits() {
        let h = gumbel_histogram(&[0.0, 3.0, 0.0], 1.0, 500, 1).unwrap();
        assert_eq!(h[..3].iter().sum::<f64>(), 500.0);
        assert!(h[1] > h[0] && h[1] > h[2]);
        assert!((h[3..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
