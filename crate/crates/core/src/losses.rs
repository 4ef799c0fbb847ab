//! Box regression (L1 + GIoU), the hard-attention consistency loss and their
//! weighted total.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{giou, BBox, TargetMask};
use crate::numerics::{Graph, Tensor, Var};

/// Per-step loss breakdown. `l1` and `giou_loss` are unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub giou_loss: f64,
    pub attention: f64,
    pub total: f64,
    pub lambda: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl LossReport {
    pub fn bbox(&self) -> f64 {
        self.w_l1 * self.l1 + self.w_giou * self.giou_loss
    }

    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.giou_loss.is_finite() && self.attention.is_finite() && self.total.is_finite()
    }

    /// Component-wise mean of several reports sharing weights.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            l1: avg(|r| r.l1),
            giou_loss: avg(|r| r.giou_loss),
            attention: avg(|r| r.attention),
            total: avg(|r| r.total),
            ..*first
        })
    }
}

/// `w_l1 * |pred - gt|_1 + w_giou * (1 - giou(pred, gt))` over `(cx, cy, w, h)`.
pub fn bbox_loss(pred: &BBox, gt: &BBox, w_l1: f64, w_giou: f64) -> f64 {
    let l1 = (pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs();
    w_l1 * l1 + w_giou * (1.0 - giou(pred, gt))
}

/// Graph form of the two box-loss terms for a `[1, 4]` prediction node.
/// Returns `(l1, 1 - giou)`, both unweighted scalars.
pub fn bbox_loss_graph(g: &mut Graph, pred: Var, gt: &BBox) -> (Var, Var) {
    assert_eq!(g.shape(pred), &[1, 4], "bbox_loss_graph: prediction must be [1, 4]");
    let target = g.constant(Tensor::from_parts(vec![1, 4], vec![gt.cx, gt.cy, gt.w, gt.h]));
    let l1 = g.l1_distance(pred, target);

    let cx = g.slice_cols(pred, 0, 1);
    let cy = g.slice_cols(pred, 1, 2);
    let w = g.slice_cols(pred, 2, 3);
    let h = g.slice_cols(pred, 3, 4);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px1 = g.sub(cx, hw);
    let px2 = g.add(cx, hw);
    let py1 = g.sub(cy, hh);
    let py2 = g.add(cy, hh);
    let mut k = |v: f64| g.constant(Tensor::from_parts(vec![1, 1], vec![v]));
    let (gx1, gx2, gy1, gy2) = (k(gt.x1()), k(gt.x2()), k(gt.y1()), k(gt.y2()));
    let gt_area = k(gt.area());

    let ix2 = g.minimum(px2, gx2);
    let ix1 = g.maximum(px1, gx1);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let iy2 = g.minimum(py2, gy2);
    let iy1 = g.maximum(py1, gy1);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);

    let area = g.mul(w, h);
    let union = g.add(area, gt_area);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);

    let hx2 = g.maximum(px2, gx2);
    let hx1 = g.minimum(px1, gx1);
    let hw = g.sub(hx2, hx1);
    let hy2 = g.maximum(py2, gy2);
    let hy1 = g.minimum(py1, gy1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);
    let gap = g.sub(hull, union);
    let penalty = g.div(gap, hull);
    let giou = g.sub(iou, penalty);
    let neg = g.scale(giou, -1.0);
    let one = g.constant(Tensor::from_parts(vec![1, 1], vec![1.0]));
    let loss = g.add(one, neg);
    let loss = g.reshape(loss, &[]);
    (l1, loss)
}

/// `sum_i mask_i * |a_i P^T - l_i|_1`; with `unmasked` every part counts.
///
/// `a` is `N_z x N_x`, `coords` holds the `N_x` search-part coordinates and
/// `l` is `N_z x 2`.
pub fn attention_loss(a: &Tensor, coords: &[[f64; 2]], l: &Tensor, mask: &TargetMask, unmasked: bool) -> Result<f64> {
    check_attention_shapes(a.shape(), coords.len(), l.shape(), mask)?;
    let (nz, nx) = (a.rows(), a.cols());
    let mut total = 0.0;
    for i in 0..nz {
        if !unmasked && !mask.is_target(i) {
            continue;
        }
        let mut att = [0.0; 2];
        for (j, p) in coords.iter().enumerate().take(nx) {
            let w = a.at2(i, j);
            att[0] += w * p[0];
            att[1] += w * p[1];
        }
        total += (att[0] - l.at2(i, 0)).abs() + (att[1] - l.at2(i, 1)).abs();
    }
    Ok(total)
}

fn check_attention_shapes(a: &[usize], n_coords: usize, l: &[usize], mask: &TargetMask) -> Result<()> {
    if a.len() != 2 || l.len() != 2 || a[1] != n_coords || l[0] != a[0] || l[1] != 2 || mask.len() != a[0] {
        return Err(shape_err(
            "attention_loss",
            format!("a {a:?}, {n_coords} coordinates, l {l:?}, mask {}", mask.len()),
        ));
    }
    Ok(())
}

/// Graph form of [`attention_loss`].
pub fn attention_loss_graph(
    g: &mut Graph,
    a: Var,
    coords: &[[f64; 2]],
    l: Var,
    mask: &TargetMask,
    unmasked: bool,
) -> Result<Var> {
    check_attention_shapes(g.shape(a), coords.len(), g.shape(l), mask)?;
    let p = g.constant(Tensor::from_parts(
        vec![coords.len(), 2],
        coords.iter().flatten().copied().collect(),
    ));
    let attended = g.matmul(a, p);
    let d = g.sub(attended, l);
    let mut d = g.abs(d);
    if !unmasked {
        d = g.mul_rows(d, mask.values());
    }
    Ok(g.sum(d))
}

/// Combines the components as `w_l1 * l1 + w_giou * giou_loss + lambda * attention`.
pub fn total_loss(l1: f64, giou_loss: f64, attention: f64, lambda: f64, w_l1: f64, w_giou: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossReport {
        l1,
        giou_loss,
        attention,
        total: w_l1 * l1 + w_giou * giou_loss + lambda * attention,
        lambda,
        w_l1,
        w_giou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn unit(x: f64) -> BBox {
        BBox::new(x + 0.5, 0.5, 1.0, 1.0, crate::geometry::Frame::SearchNormalized)
    }

    #[test]
    fn bbox_loss_examples() {
        let a = unit(0.0);
        assert_eq!(bbox_loss(&a, &a, 1.0, 1.0), 0.0);
        let b = unit(0.5);
        assert!((bbox_loss(&a, &b, 1.0, 1.0) - 7.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn graph_bbox_loss_matches_plain() {
        let pred = BBox::normalized(0.42, 0.55, 0.3, 0.2);
        let gt = BBox::normalized(0.5, 0.5, 0.25, 0.3);
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_parts(vec![1, 4], vec![pred.cx, pred.cy, pred.w, pred.h]));
        let (l1, gl) = bbox_loss_graph(&mut g, p, &gt);
        let total = g.value(l1).item().unwrap() + g.value(gl).item().unwrap();
        assert!((total - bbox_loss(&pred, &gt, 1.0, 1.0)).abs() < 1e-14);
    }

    #[test]
    fn bbox_loss_gradient_matches_finite_differences() {
        let gt = BBox::normalized(0.5, 0.45, 0.25, 0.3);
        let x = Tensor::from_parts(vec![1, 4], vec![0.43, 0.52, 0.31, 0.22]);
        let r = grad_check(
            |g, p| {
                let (l1, gl) = bbox_loss_graph(g, p, &gt);
                g.add(l1, gl)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
    }

    #[test]
    fn attention_loss_examples() {
        let coords = [[0.25, 0.25], [0.75, 0.25]];
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let mask = TargetMask::all(1);
        let exact = Tensor::matrix(1, 2, vec![0.25, 0.25]).unwrap();
        assert_eq!(attention_loss(&a, &coords, &exact, &mask, false).unwrap(), 0.0);
        let centre = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(attention_loss(&a, &coords, &centre, &mask, false).unwrap(), 0.5);
        let none = TargetMask::from_bits(&[false]);
        assert_eq!(attention_loss(&a, &coords, &centre, &none, false).unwrap(), 0.0);
        assert_eq!(attention_loss(&a, &coords, &centre, &none, true).unwrap(), 0.5);
        assert!(attention_loss(&a, &coords[..1], &centre, &mask, false).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let r = total_loss(0.1, 0.5, 2.0, 0.1, 1.0, 1.0).unwrap();
        assert!((r.total - 0.8).abs() < 1e-15);
        let r = total_loss(0.1, 0.5, 2.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(r.total, r.bbox());
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1, 1.0, 1.0).unwrap().total, 0.0);
        assert!(total_loss(0.0, 0.0, 0.0, -0.1, 1.0, 1.0).is_err());
    }
}
