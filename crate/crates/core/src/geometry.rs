//! Boxes, part grids, target masks, part-distribution box estimation and
//! region cropping.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Coordinate frame of a [`BBox`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    ImagePixels,
    /// `[0, 1]^2` over a square search crop.
    SearchNormalized,
}

/// Axis-aligned box stored by center and extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame: Frame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, frame: Frame) -> Self {
        Self { cx, cy, w, h, frame }
    }

    pub fn pixels(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Frame::ImagePixels)
    }

    pub fn normalized(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Frame::SearchNormalized)
    }

    /// From the top-left `x, y, w, h` convention used on disk.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::pixels(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.w, self.h]
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Geometric-mean side, the scale used for square context crops.
    pub fn side(&self) -> f64 {
        (self.w.max(0.0) * self.h.max(0.0)).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x <= self.x2() && y >= self.y1() && y <= self.y2()
    }

    /// Intersection with `[0, width] x [0, height]`, keeping the frame.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1().clamp(0.0, width);
        let x2 = self.x2().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        let y2 = self.y2().clamp(0.0, height);
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, self.frame)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Centers of the cells of a feature grid, in input-patch pixels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PartGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: f64,
    pub centers: Vec<[f64; 2]>,
}

impl PartGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Centers scaled to `[0, 1]` over the grid extent, the `P` matrix columns
    /// used by the attention loss.
    pub fn normalized_centers(&self) -> Vec<[f64; 2]> {
        let (w, h) = (self.grid_w as f64, self.grid_h as f64);
        (0..self.len())
            .map(|i| {
                let (r, c) = (i / self.grid_w, i % self.grid_w);
                [(c as f64 + 0.5) / w, (r as f64 + 0.5) / h]
            })
            .collect()
    }
}

pub fn part_centers(grid_h: usize, grid_w: usize, stride: f64) -> Result<PartGrid> {
    if grid_h == 0 || grid_w == 0 || !(stride >= 1.0) {
        return Err(Error::Parameter(format!(
            "part grid needs positive extents and stride >= 1, got {grid_h}x{grid_w} stride {stride}"
        )));
    }
    let centers = (0..grid_h)
        .flat_map(|r| (0..grid_w).map(move |c| [(c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride]))
        .collect();
    Ok(PartGrid {
        grid_h,
        grid_w,
        stride,
        centers,
    })
}

/// Binary indicator of which template parts lie on the target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    values: Vec<f64>,
    n_target: usize,
}

impl TargetMask {
    pub fn from_bits(bits: &[bool]) -> Self {
        let values: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let n_target = bits.iter().filter(|&&b| b).count();
        Self { values, n_target }
    }

    pub fn all(n: usize) -> Self {
        Self::from_bits(&vec![true; n])
    }

    /// Mask values as 0.0 / 1.0.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_target(&self, i: usize) -> bool {
        self.values[i] != 0.0
    }
}

/// Why a mask came out empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskWarning {
    ZeroAreaBox,
    NoPartInside,
}

/// Marks parts whose centers fall inside `gt` (boundary included).
/// An empty result carries a warning instead of failing.
pub fn target_mask(grid: &PartGrid, gt: &BBox) -> Result<(TargetMask, Option<MaskWarning>)> {
    if gt.frame != Frame::ImagePixels {
        return Err(Error::Parameter("target mask needs a box in image pixels".into()));
    }
    if gt.area() <= 0.0 {
        return Ok((TargetMask::from_bits(&vec![false; grid.len()]), Some(MaskWarning::ZeroAreaBox)));
    }
    let bits: Vec<bool> = grid.centers.iter().map(|c| gt.contains(c[0], c[1])).collect();
    let mask = TargetMask::from_bits(&bits);
    let warn = (mask.n_target() == 0).then_some(MaskWarning::NoPartInside);
    Ok((mask, warn))
}

/// How the box extent is derived from the spread of part locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleFormula {
    /// `sigma * sqrt(mean squared deviation)` per axis.
    #[default]
    Std,
    /// `sigma / N * sqrt(sum of squared deviations)` per axis.
    Literal,
}

impl std::str::FromStr for ScaleFormula {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(Self::Std),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("bbox_scale_formula: unknown value `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScaleFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Std => "std",
            Self::Literal => "literal",
        })
    }
}

/// Box center and extent from the masked distribution of part locations
/// (normalized search coordinates).
pub fn estimate_bbox(
    locations: &[[f64; 2]],
    mask: &TargetMask,
    sigma: f64,
    formula: ScaleFormula,
) -> Result<BBox> {
    if locations.len() != mask.len() {
        return Err(crate::error::shape_err(
            "estimate_bbox",
            format!("{} locations for a mask of {}", locations.len(), mask.len()),
        ));
    }
    if mask.n_target() == 0 {
        return Err(Error::Estimation);
    }
    let n = mask.n_target() as f64;
    let mut o = [0.0; 2];
    for (l, &m) in locations.iter().zip(mask.values()) {
        o[0] += l[0] * m;
        o[1] += l[1] * m;
    }
    o[0] /= n;
    o[1] /= n;
    let mut ss = [0.0; 2];
    for (l, &m) in locations.iter().zip(mask.values()) {
        ss[0] += (l[0] - o[0]).powi(2) * m;
        ss[1] += (l[1] - o[1]).powi(2) * m;
    }
    let s = match formula {
        ScaleFormula::Std => [sigma * (ss[0] / n).sqrt(), sigma * (ss[1] / n).sqrt()],
        ScaleFormula::Literal => [sigma / n * ss[0].sqrt(), sigma / n * ss[1].sqrt()],
    };
    Ok(BBox::normalized(o[0], o[1], s[0], s[1]))
}

/// Differentiable [`estimate_bbox`]: `locations` is an `[N, 2]` node, the
/// result a `[1, 4]` node holding `(cx, cy, w, h)`.
pub fn estimate_bbox_graph(
    g: &mut Graph,
    locations: Var,
    mask: &TargetMask,
    sigma: f64,
    formula: ScaleFormula,
) -> Result<Var> {
    if mask.n_target() == 0 {
        return Err(Error::Estimation);
    }
    let n = mask.n_target() as f64;
    let m = mask.values();
    let masked = g.mul_rows(locations, m);
    let total = g.sum_rows(masked);
    let o = g.scale(total, 1.0 / n);
    let dev = g.sub_row(locations, o);
    let sq = g.mul(dev, dev);
    let sq = g.mul_rows(sq, m);
    let ss = g.sum_rows(sq);
    let s = match formula {
        ScaleFormula::Std => {
            let var = g.scale(ss, 1.0 / n);
            let sd = g.sqrt(var);
            g.scale(sd, sigma)
        }
        ScaleFormula::Literal => {
            let r = g.sqrt(ss);
            g.scale(r, sigma / n)
        }
    };
    let o = g.reshape(o, &[1, 2]);
    let s = g.reshape(s, &[1, 2]);
    Ok(g.concat_cols(&[o, s]))
}

/// Intersection over union. Both boxes must share a frame; two empty boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    assert_eq!(a.frame, b.frame, "iou: boxes in different frames");
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by
/// the union. In `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    assert_eq!(a.frame, b.frame, "giou: boxes in different frames");
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let hull_w = a.x2().max(b.x2()) - a.x1().min(b.x1());
    let hull_h = a.y2().max(b.y2()) - a.y1().min(b.y1());
    let hull = hull_w.max(0.0) * hull_h.max(0.0);
    let iou = inter / union;
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    iw * ih
}

/// Square window of an image: center, side length in image pixels and the
/// side of the resampled patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub context: f64,
    pub out_size: usize,
}

impl CropWindow {
    pub fn new(cx: f64, cy: f64, context: f64, out_size: usize) -> Self {
        Self {
            cx,
            cy,
            context,
            out_size,
        }
    }

    /// Window centered on `b` with side `factor * b.side()`.
    pub fn around(b: &BBox, factor: f64, out_size: usize) -> Self {
        Self::new(b.cx, b.cy, (factor * b.side()).max(1.0), out_size)
    }

    fn x0(&self) -> f64 {
        self.cx - self.context / 2.0
    }

    fn y0(&self) -> f64 {
        self.cy - self.context / 2.0
    }

    /// Image-pixel box to normalized window coordinates.
    pub fn to_normalized(&self, b: &BBox) -> BBox {
        BBox::normalized(
            (b.cx - self.x0()) / self.context,
            (b.cy - self.y0()) / self.context,
            b.w / self.context,
            b.h / self.context,
        )
    }

    /// Normalized window box back to image pixels.
    pub fn to_pixels(&self, b: &BBox) -> BBox {
        BBox::pixels(
            self.x0() + b.cx * self.context,
            self.y0() + b.cy * self.context,
            b.w * self.context,
            b.h * self.context,
        )
    }

    /// Image-pixel box in the pixel frame of the resampled patch.
    pub fn to_patch(&self, b: &BBox) -> BBox {
        let n = self.to_normalized(b);
        let s = self.out_size as f64;
        BBox::pixels(n.cx * s, n.cy * s, n.w * s, n.h * s)
    }

    pub fn point_to_pixels(&self, p: [f64; 2]) -> [f64; 2] {
        [self.x0() + p[0] * self.context, self.y0() + p[1] * self.context]
    }
}

/// Square RGB patch with values in `[0, 1]`, stored `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn channel_mean(img: &RgbImage) -> [f64; 3] {
    let mut m = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            m[c] += p[c] as f64;
        }
    }
    let n = (img.width() as f64 * img.height() as f64).max(1.0) * 255.0;
    m.map(|v| v / n)
}

/// Crops `window` out of `frame` and bilinearly resizes it to
/// `out_size x out_size`. Samples falling outside the frame take the
/// per-channel frame mean.
pub fn crop_region(frame: &RgbImage, window: &CropWindow) -> Result<Patch> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data("cannot crop an empty frame".into()));
    }
    if window.out_size == 0 || !(window.context > 0.0) || !window.cx.is_finite() || !window.cy.is_finite() {
        return Err(Error::Parameter(format!("invalid crop window {window:?}")));
    }
    let mean = channel_mean(frame);
    let raw = frame.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * w + x) * 3 + c] as f64 / 255.0;
    let n = window.out_size;
    let scale = window.context / n as f64;
    let mut data = vec![0.0; n * n * 3];
    for j in 0..n {
        let sy = window.y0() + (j as f64 + 0.5) * scale - 0.5;
        for i in 0..n {
            let sx = window.x0() + (i as f64 + 0.5) * scale - 0.5;
            let out = &mut data[(j * n + i) * 3..(j * n + i) * 3 + 3];
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                out.copy_from_slice(&mean);
                continue;
            }
            let fx = sx.floor();
            let fy = sy.floor();
            let (ax, ay) = (sx - fx, sy - fy);
            let clampx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
            let clampy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
            let (x0, x1) = (clampx(fx), clampx(fx + 1.0));
            let (y0, y1) = (clampy(fy), clampy(fy + 1.0));
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - ax) + px(x1, y0, c) * ax;
                let bot = px(x0, y1, c) * (1.0 - ax) + px(x1, y1, c) * ax;
                out[c] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    Ok(Patch { size: n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn part_center_examples() {
        assert_eq!(part_centers(1, 1, 16.0).unwrap().centers, vec![[8.0, 8.0]]);
        assert_eq!(
            part_centers(2, 2, 16.0).unwrap().centers,
            vec![[8.0, 8.0], [24.0, 8.0], [8.0, 24.0], [24.0, 24.0]]
        );
        let g = part_centers(8, 8, 16.0).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(*g.centers.last().unwrap(), [120.0, 120.0]);
        assert!(part_centers(0, 2, 16.0).is_err());
        assert!(part_centers(2, 2, 0.5).is_err());
    }

    #[test]
    fn target_mask_examples() {
        let grid = part_centers(2, 2, 16.0).unwrap();
        let (m, w) = target_mask(&grid, &BBox::pixels(16.0, 16.0, 32.0, 32.0)).unwrap();
        assert_eq!(m.values(), &[1.0; 4]);
        assert!(w.is_none());

        let (m, _) = target_mask(&grid, &BBox::pixels(8.0, 8.0, 4.0, 4.0)).unwrap();
        assert_eq!(m.values(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.n_target(), 1);

        let (m, w) = target_mask(&grid, &BBox::pixels(100.0, 100.0, 10.0, 10.0)).unwrap();
        assert_eq!(m.n_target(), 0);
        assert_eq!(w, Some(MaskWarning::NoPartInside));

        let (m, w) = target_mask(&grid, &BBox::pixels(8.0, 8.0, 0.0, 5.0)).unwrap();
        assert_eq!(m.n_target(), 0);
        assert_eq!(w, Some(MaskWarning::ZeroAreaBox));

        assert!(target_mask(&grid, &BBox::normalized(0.5, 0.5, 1.0, 1.0)).is_err());
    }

    #[test]
    fn mask_boundary_counts_as_inside() {
        let grid = part_centers(1, 1, 16.0).unwrap();
        // box edge passes exactly through the center (8, 8)
        let (m, _) = target_mask(&grid, &BBox::from_xywh(8.0, 0.0, 8.0, 16.0)).unwrap();
        assert_eq!(m.n_target(), 1);
    }

    #[test]
    fn estimate_bbox_examples() {
        let mask = TargetMask::all(3);
        let b = estimate_bbox(&[[0.5, 0.5]; 3], &mask, 3.0, ScaleFormula::Std).unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (0.5, 0.5, 0.0, 0.0));

        let corners = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];
        let sigma = 12f64.sqrt();
        let b = estimate_bbox(&corners, &TargetMask::all(4), sigma, ScaleFormula::Std).unwrap();
        assert!((b.cx - 0.5).abs() < 1e-15 && (b.cy - 0.5).abs() < 1e-15);
        assert!((b.w - sigma * 0.25).abs() < 1e-12);
        assert!((b.w - 0.866).abs() < 1e-3);

        let lit = estimate_bbox(&corners, &TargetMask::all(4), sigma, ScaleFormula::Literal).unwrap();
        // sqrt(4 * 0.0625) / 4 * sigma
        assert!((lit.w - sigma * 0.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_bbox_ignores_background_parts() {
        let mask = TargetMask::from_bits(&[true, true, false]);
        let b = estimate_bbox(&[[0.4, 0.5], [0.6, 0.5], [0.0, 0.0]], &mask, 2.0, ScaleFormula::Std).unwrap();
        assert!((b.cx - 0.5).abs() < 1e-15);
        assert!((b.w - 0.2).abs() < 1e-12);
        assert_eq!(b.h, 0.0);
    }

    #[test]
    fn estimate_bbox_needs_targets() {
        let mask = TargetMask::from_bits(&[false, false]);
        assert!(matches!(
            estimate_bbox(&[[0.0, 0.0]; 2], &mask, 3.0, ScaleFormula::Std),
            Err(Error::Estimation)
        ));
    }

    #[test]
    fn graph_estimate_matches_plain() {
        let locs = [[0.1, 0.7], [0.3, 0.2], [0.9, 0.4], [0.5, 0.5]];
        let mask = TargetMask::from_bits(&[true, true, true, false]);
        for formula in [ScaleFormula::Std, ScaleFormula::Literal] {
            let plain = estimate_bbox(&locs, &mask, 3.0, formula).unwrap();
            let mut g = Graph::new();
            let flat: Vec<f64> = locs.iter().flatten().copied().collect();
            let l = g.constant(crate::numerics::Tensor::matrix(4, 2, flat).unwrap());
            let b = estimate_bbox_graph(&mut g, l, &mask, 3.0, formula).unwrap();
            let v = g.value(b).data();
            for (x, y) in v.iter().zip([plain.cx, plain.cy, plain.w, plain.h]) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::from_xywh(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_xywh(0.5, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::from_xywh(5.0, 5.0, 1.0, 1.0)), 0.0);
        let z = BBox::pixels(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::from_xywh(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_xywh(0.5, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        for d in [3.0, 10.0, 1000.0] {
            let far = BBox::from_xywh(d, 0.0, 1.0, 1.0);
            let hull = d + 1.0;
            let expected = -(hull - 2.0) / hull;
            assert!((giou(&a, &far) - expected).abs() < 1e-12);
        }
        assert!(giou(&a, &BBox::from_xywh(1000.0, 0.0, 1.0, 1.0)) < -0.99);
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 100]))
    }

    #[test]
    fn crop_constant_image() {
        let img = RgbImage::from_pixel(40, 40, Rgb([51, 102, 204]));
        let p = crop_region(&img, &CropWindow::new(20.0, 20.0, 17.3, 9)).unwrap();
        for v in p.data.chunks(3) {
            assert!((v[0] - 0.2).abs() < 1e-12 && (v[1] - 0.4).abs() < 1e-12 && (v[2] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_identity_when_no_resampling() {
        let img = gradient_image(32, 32);
        let p = crop_region(&img, &CropWindow::new(16.0, 16.0, 16.0, 16)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let src = img.get_pixel(x as u32 + 8, y as u32 + 8);
                let got = p.pixel(x, y);
                for c in 0..3 {
                    assert!((got[c] - src[c] as f64 / 255.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crop_pads_with_channel_mean() {
        let img = gradient_image(32, 32);
        let mean = channel_mean(&img);
        // window spans x in [-16, 16): left half is outside
        let p = crop_region(&img, &CropWindow::new(0.0, 16.0, 32.0, 32)).unwrap();
        for y in 0..32 {
            for x in 0..16 {
                assert_eq!(p.pixel(x, y), mean);
            }
            assert_ne!(p.pixel(20, y), mean);
        }
    }

    #[test]
    fn crop_errors() {
        let empty = RgbImage::new(0, 0);
        assert!(crop_region(&empty, &CropWindow::new(0.0, 0.0, 4.0, 4)).is_err());
        let img = gradient_image(8, 8);
        assert!(crop_region(&img, &CropWindow::new(4.0, 4.0, 4.0, 0)).is_err());
    }

    #[test]
    fn crop_window_round_trip() {
        let win = CropWindow::new(50.0, 60.0, 80.0, 128);
        let b = BBox::pixels(55.0, 48.0, 20.0, 30.0);
        let back = win.to_pixels(&win.to_normalized(&b));
        assert!((back.cx - b.cx).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
        let n = win.to_normalized(&BBox::pixels(50.0, 60.0, 80.0, 80.0));
        assert_eq!((n.cx, n.cy, n.w, n.h), (0.5, 0.5, 1.0, 1.0));
    }
}
