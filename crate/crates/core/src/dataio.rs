//! Synthetic training/evaluation sequences and the on-disk sequence layout
//! (`00000001.png`, ... plus `groundtruth.txt` with top-left `x,y,w,h` lines).

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::config::{parse_value, KvConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::RngState;

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

/// Ordered frames with one ground-truth box (image pixels) per frame.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub gt: Vec<BBox>,
    pub metadata: String,
}

impl Sequence {
    pub fn new(name: impl Into<String>, frames: Vec<RgbImage>, gt: Vec<BBox>, metadata: impl Into<String>) -> Result<Self> {
        if frames.len() != gt.len() {
            return Err(Error::Data(format!("{} frames but {} boxes", frames.len(), gt.len())));
        }
        if let Some(i) = gt.iter().position(|b| !(b.area() > 0.0) || !b.is_finite()) {
            return Err(Error::Data(format!("box {i} has no positive area")));
        }
        Ok(Self {
            name: name.into(),
            frames,
            gt,
            metadata: metadata.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            Self::Ellipse => "ellipse",
            Self::Rectangle => "rectangle",
            Self::Blob => "blob",
        }
    }
}

/// Parameters of the synthetic sequence generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub shapes: Vec<ShapeKind>,
    pub size_min: f64,
    pub size_max: f64,
    /// Initial velocity in pixels per frame.
    pub velocity_x: f64,
    pub velocity_y: f64,
    /// Magnitude bound of a random velocity added at the start.
    pub random_speed: f64,
    /// Std of the per-frame heading change, radians.
    pub turn_rate: f64,
    /// Relative amplitude of the periodic shape deformation.
    pub deformation: f64,
    pub deformation_period: f64,
    /// Probability that an occluding bar crosses the sequence.
    pub occluder_prob: f64,
    pub distractors: usize,
    /// Std of per-pixel noise, in `[0, 1]` intensity units.
    pub texture_noise: f64,
    /// Per-frame random-walk std of the object colour.
    pub appearance_drift: f64,
    pub length: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_w: 160,
            canvas_h: 160,
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob],
            size_min: 22.0,
            size_max: 34.0,
            velocity_x: 0.0,
            velocity_y: 0.0,
            random_speed: 2.5,
            turn_rate: 0.15,
            deformation: 0.25,
            deformation_period: 24.0,
            occluder_prob: 0.2,
            distractors: 1,
            texture_noise: 0.03,
            appearance_drift: 0.01,
            length: 40,
            count: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A still, undeformed single object on a clean background.
    pub fn still() -> Self {
        Self {
            random_speed: 0.0,
            turn_rate: 0.0,
            deformation: 0.0,
            occluder_prob: 0.0,
            distractors: 0,
            texture_noise: 0.0,
            appearance_drift: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.canvas_w < 8 || self.canvas_h < 8 {
            return bad("canvas must be at least 8x8");
        }
        if self.shapes.is_empty() {
            return bad("shapes must name at least one shape");
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return bad("need 0 < size_min <= size_max");
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return bad("occluder_prob must be in [0, 1]");
        }
        if self.deformation < 0.0 || self.texture_noise < 0.0 || self.appearance_drift < 0.0 || self.turn_rate < 0.0 {
            return bad("amplitudes must be >= 0");
        }
        if self.deformation >= 0.9 {
            return bad("deformation must be < 0.9");
        }
        if !(self.deformation_period > 0.0) {
            return bad("deformation_period must be positive");
        }
        Ok(())
    }
}

impl KvConfig for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "canvas_w" => self.canvas_w = parse_value(key, value)?,
            "canvas_h" => self.canvas_h = parse_value(key, value)?,
            "shapes" => {
                self.shapes = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "ellipse" => Ok(ShapeKind::Ellipse),
                        "rectangle" => Ok(ShapeKind::Rectangle),
                        "blob" => Ok(ShapeKind::Blob),
                        other => Err(Error::Config(format!("shapes: unknown shape `{other}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "size_min" => self.size_min = parse_value(key, value)?,
            "size_max" => self.size_max = parse_value(key, value)?,
            "velocity_x" => self.velocity_x = parse_value(key, value)?,
            "velocity_y" => self.velocity_y = parse_value(key, value)?,
            "random_speed" => self.random_speed = parse_value(key, value)?,
            "turn_rate" => self.turn_rate = parse_value(key, value)?,
            "deformation" => self.deformation = parse_value(key, value)?,
            "deformation_period" => self.deformation_period = parse_value(key, value)?,
            "occluder_prob" => self.occluder_prob = parse_value(key, value)?,
            "distractors" => self.distractors = parse_value(key, value)?,
            "texture_noise" => self.texture_noise = parse_value(key, value)?,
            "appearance_drift" => self.appearance_drift = parse_value(key, value)?,
            "length" => self.length = parse_value(key, value)?,
            "count" => self.count = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let shapes: Vec<&str> = self.shapes.iter().map(|s| s.name()).collect();
        vec![
            ("canvas_w", self.canvas_w.to_string()),
            ("canvas_h", self.canvas_h.to_string()),
            ("shapes", shapes.join(",")),
            ("size_min", self.size_min.to_string()),
            ("size_max", self.size_max.to_string()),
            ("velocity_x", self.velocity_x.to_string()),
            ("velocity_y", self.velocity_y.to_string()),
            ("random_speed", self.random_speed.to_string()),
            ("turn_rate", self.turn_rate.to_string()),
            ("deformation", self.deformation.to_string()),
            ("deformation_period", self.deformation_period.to_string()),
            ("occluder_prob", self.occluder_prob.to_string()),
            ("distractors", self.distractors.to_string()),
            ("texture_noise", self.texture_noise.to_string()),
            ("appearance_drift", self.appearance_drift.to_string()),
            ("length", self.length.to_string()),
            ("count", self.count.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Placement of one rendered shape in one frame.
#[derive(Clone, Debug)]
struct ShapeState {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    angle: f64,
    /// Radial harmonics `(amplitude, phase)` for blobs.
    harmonics: Vec<(f64, f64)>,
    color: [f64; 3],
    accent: [f64; 3],
    stripe_freq: f64,
}

impl ShapeState {
    /// Local coordinates of a point, normalized by the half extents.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.half_w, v / self.half_h)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Blob => {
                let r = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                let bound: f64 = 1.0
                    + self
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, p))| a * ((k as f64 + 2.0) * phi + p).sin())
                        .sum::<f64>();
                r <= bound
            }
        }
    }

    /// Outer radius bound in pixels.
    fn reach(&self) -> f64 {
        let amp: f64 = self.harmonics.iter().map(|(a, _)| a.abs()).sum();
        self.half_w.max(self.half_h) * (1.0 + amp) * std::f64::consts::SQRT_2
    }

    /// Two-tone striped texture fixed to the object, so parts look different.
    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = self.local(x, y);
        let stripe = ((u + 0.5 * v) * self.stripe_freq).sin() > 0.0;
        let base = if u < 0.0 { self.color } else { self.accent };
        let k = if stripe { 1.0 } else { 0.7 };
        base.map(|c| c * k)
    }

    fn draw(&self, img: &mut [[f64; 3]], w: u32, h: u32, mut mask: Option<&mut [bool]>) {
        let r = self.reach();
        let x0 = ((self.cx - r).floor().max(0.0)) as u32;
        let y0 = ((self.cy - r).floor().max(0.0)) as u32;
        let x1 = ((self.cx + r).ceil().min(w as f64)) as u32;
        let y1 = ((self.cy + r).ceil().min(h as f64)) as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if self.contains(px, py) {
                    let i = (y * w + x) as usize;
                    img[i] = self.shade(px, py);
                    if let Some(m) = mask.as_deref_mut() {
                        m[i] = true;
                    }
                }
            }
        }
    }
}

/// Moving shape with its own dynamics.
struct Actor {
    base: ShapeState,
    base_w: f64,
    base_h: f64,
    vx: f64,
    vy: f64,
    phase: f64,
    spin: f64,
}

impl Actor {
    fn spawn(cfg: &SynthConfig, rng: &mut RngState, kind: ShapeKind, color: [f64; 3]) -> Self {
        let size = rng.range(cfg.size_min, cfg.size_max);
        let aspect = rng.range(0.7, 1.4);
        let half_w = size * aspect.sqrt() / 2.0;
        let half_h = size / aspect.sqrt() / 2.0;
        let margin = size;
        let (w, h) = (cfg.canvas_w as f64, cfg.canvas_h as f64);
        let cx = if w > 2.0 * margin { rng.range(margin, w - margin) } else { w / 2.0 };
        let cy = if h > 2.0 * margin { rng.range(margin, h - margin) } else { h / 2.0 };
        let heading = rng.range(0.0, TAU);
        let speed = rng.range(0.0, cfg.random_speed);
        let harmonics = match kind {
            ShapeKind::Blob => (0..3).map(|_| (rng.range(0.05, 0.18), rng.range(0.0, TAU))).collect(),
            _ => Vec::new(),
        };
        let accent = [1.0 - color[0], color[2], color[1]];
        Self {
            base: ShapeState {
                kind,
                cx: cx.round(),
                cy: cy.round(),
                half_w,
                half_h,
                angle: if cfg.deformation > 0.0 { rng.range(-0.3, 0.3) } else { 0.0 },
                harmonics,
                color,
                accent,
                stripe_freq: rng.range(3.0, 6.0),
            },
            base_w: half_w,
            base_h: half_h,
            vx: cfg.velocity_x + speed * heading.cos(),
            vy: cfg.velocity_y + speed * heading.sin(),
            phase: rng.range(0.0, TAU),
            spin: rng.range(-0.02, 0.02),
        }
    }

    fn step(&mut self, cfg: &SynthConfig, rng: &mut RngState, t: usize) {
        if cfg.turn_rate > 0.0 {
            let turn = cfg.turn_rate * rng.normal();
            let (s, c) = turn.sin_cos();
            let (vx, vy) = (self.vx * c - self.vy * s, self.vx * s + self.vy * c);
            self.vx = vx;
            self.vy = vy;
        }
        let s = &mut self.base;
        s.cx += self.vx;
        s.cy += self.vy;
        let r = s.half_w.max(s.half_h);
        let (w, h) = (cfg.canvas_w as f64, cfg.canvas_h as f64);
        if s.cx - r < 0.0 || s.cx + r > w {
            self.vx = -self.vx;
            s.cx = s.cx.clamp(r, (w - r).max(r));
        }
        if s.cy - r < 0.0 || s.cy + r > h {
            self.vy = -self.vy;
            s.cy = s.cy.clamp(r, (h - r).max(r));
        }
        if cfg.deformation > 0.0 {
            let ph = self.phase + TAU * t as f64 / cfg.deformation_period;
            s.half_w = self.base_w * (1.0 + cfg.deformation * ph.sin());
            s.half_h = self.base_h * (1.0 + cfg.deformation * (ph + PI / 2.0).sin());
            s.angle += self.spin;
            for (k, (_, p)) in s.harmonics.iter_mut().enumerate() {
                *p += 0.05 * (k as f64 + 1.0);
            }
        }
        if cfg.appearance_drift > 0.0 {
            for c in s.color.iter_mut().chain(s.accent.iter_mut()) {
                *c = (*c + cfg.appearance_drift * rng.normal()).clamp(0.05, 0.95);
            }
        }
    }
}

fn random_color(rng: &mut RngState) -> [f64; 3] {
    [rng.range(0.1, 0.9), rng.range(0.1, 0.9), rng.range(0.1, 0.9)]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tight box of a foreground mask, or `None` when empty.
pub fn mask_bbox(mask: &[bool], w: u32) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i as u32 % w, i as u32 / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        any = true;
    }
    any.then(|| BBox::from_xywh(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64))
}

/// One rendered frame plus the target's foreground mask.
pub struct RenderedFrame {
    pub image: RgbImage,
    pub mask: Vec<bool>,
}

/// Generates one sequence. Each frame's box is the tight box of the target's
/// rendered mask.
pub fn gen_synthetic(cfg: &SynthConfig, length: usize, rng: &mut RngState) -> Result<Sequence> {
    Ok(gen_synthetic_with_masks(cfg, length, rng)?.0)
}

/// [`gen_synthetic`] that also returns the per-frame target masks.
pub fn gen_synthetic_with_masks(
    cfg: &SynthConfig,
    length: usize,
    rng: &mut RngState,
) -> Result<(Sequence, Vec<Vec<bool>>)> {
    cfg.validate()?;
    if length < 2 {
        return Err(Error::Sampling(format!("sequence length must be >= 2, got {length}")));
    }
    let (w, h) = (cfg.canvas_w, cfg.canvas_h);
    let kind = cfg.shapes[rng.below(cfg.shapes.len())];
    let color = random_color(rng);
    let mut target = Actor::spawn(cfg, rng, kind, color);
    let mut distractors: Vec<Actor> = (0..cfg.distractors)
        .map(|_| {
            let k = cfg.shapes[rng.below(cfg.shapes.len())];
            let c = random_color(rng);
            let mut a = Actor::spawn(cfg, rng, k, c);
            if cfg.random_speed == 0.0 {
                a.vx = cfg.velocity_x;
                a.vy = cfg.velocity_y;
            }
            a
        })
        .collect();
    let bg0 = random_color(rng);
    let bg1 = random_color(rng);
    let occluder = rng.bernoulli(cfg.occluder_prob).then(|| {
        let bar_w = rng.range(0.08, 0.15) * w as f64;
        let speed = (w as f64 + bar_w) / length as f64 * rng.range(0.8, 1.2);
        let shade = rng.range(0.2, 0.8);
        (bar_w, speed, shade)
    });

    let mut background = vec![[0.0; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 / w as f64 + y as f64 / h as f64) / 2.0;
            for c in 0..3 {
                background[(y * w + x) as usize][c] = bg0[c] * (1.0 - t) + bg1[c] * t;
            }
        }
    }

    let mut frames = Vec::with_capacity(length);
    let mut gt = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            target.step(cfg, rng, t);
            for d in &mut distractors {
                d.step(cfg, rng, t);
            }
        }
        let mut px = background.clone();
        for d in &distractors {
            d.base.draw(&mut px, w, h, None);
        }
        let mut mask = vec![false; (w * h) as usize];
        target.base.draw(&mut px, w, h, Some(&mut mask));
        if let Some((bar_w, speed, shade)) = occluder {
            let x0 = -bar_w + speed * t as f64;
            for y in 0..h {
                for x in 0..w {
                    let xc = x as f64 + 0.5;
                    if xc >= x0 && xc < x0 + bar_w {
                        px[(y * w + x) as usize] = [shade; 3];
                    }
                }
            }
        }
        if cfg.texture_noise > 0.0 {
            for p in px.iter_mut() {
                for c in p.iter_mut() {
                    *c += cfg.texture_noise * rng.normal();
                }
            }
        }
        let Some(b) = mask_bbox(&mask, w) else {
            return Err(Error::Data(format!("target left the canvas at frame {t}")));
        };
        let mut img = RgbImage::new(w, h);
        for (dst, src) in img.pixels_mut().zip(&px) {
            *dst = Rgb([to_u8(src[0]), to_u8(src[1]), to_u8(src[2])]);
        }
        frames.push(img);
        gt.push(b);
        masks.push(mask);
    }
    let meta = format!("synthetic shape={} seed={} stream={}", kind.name(), rng.seed(), rng.stream());
    let name = format!("synth_{:04}_{:04}", rng.seed() % 10000, rng.stream());
    Ok((Sequence::new(name, frames, gt, meta)?, masks))
}

/// `count` sequences from `cfg`, each on its own RNG stream.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<Sequence>> {
    (0..cfg.count)
        .map(|i| {
            let mut rng = RngState::with_stream(cfg.seed, i as u64);
            let mut s = gen_synthetic(cfg, cfg.length, &mut rng)?;
            s.name = format!("seq_{i:04}");
            Ok(s)
        })
        .collect()
}

fn format_line(b: &BBox) -> String {
    let [x, y, w, h] = b.to_xywh();
    format!("{x},{y},{w},{h}")
}

/// Writes `dir/00000001.png ...` and `dir/groundtruth.txt`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(dir.join(format!("{:08}.png", i + 1)))?;
    }
    let mut text = String::new();
    for b in &seq.gt {
        text.push_str(&format_line(b));
        text.push('\n');
    }
    fs::write(dir.join(GROUNDTRUTH_FILE), text)?;
    Ok(())
}

/// Parses one `x,y,w,h` line (commas, tabs or spaces).
pub fn parse_box_line(line: &str) -> Option<BBox> {
    let vals: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    match vals[..] {
        [x, y, w, h] if [x, y, w, h].iter().all(|v| v.is_finite()) => Some(BBox::from_xywh(x, y, w, h)),
        _ => None,
    }
}

/// Reads a box file; every non-empty line must parse.
pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_box_line(line).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `x,y,w,h`, got `{line}`"),
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format_line(b));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            continue;
        }
        if let Some(n) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            files.push((n, path));
        }
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

/// Loads a sequence directory; frames are ordered by their numeric stem.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    if !gt_path.exists() {
        return Err(Error::Data(format!("{} has no {GROUNDTRUTH_FILE}", dir.display())));
    }
    let gt = read_boxes(&gt_path)?;
    let files = frame_files(dir)?;
    if files.len() != gt.len() {
        return Err(Error::Format {
            path: gt_path,
            line: gt.len(),
            msg: format!("{} frames but {} ground-truth lines", files.len(), gt.len()),
        });
    }
    if let Some(i) = gt.iter().position(|b| !(b.area() > 0.0)) {
        return Err(Error::Format {
            path: gt_path,
            line: i + 1,
            msg: "box has no positive area".into(),
        });
    }
    let frames = files
        .iter()
        .map(|p| Ok(image::open(p)?.to_rgb8()))
        .collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Sequence::new(name, frames, gt, dir.display().to_string())
}

/// Sequence directories listed one per line; relative entries resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Saves `seqs` under `root/<name>` and writes `root/manifest.txt`.
pub fn save_dataset(seqs: &[Sequence], root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    for s in seqs {
        save_sequence(s, &root.join(&s.name))?;
    }
    let manifest = root.join("manifest.txt");
    let names: Vec<String> = seqs.iter().map(|s| s.name.clone()).collect();
    write_manifest(&manifest, &names)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_object_has_constant_box() {
        let cfg = SynthConfig::still();
        let s = gen_synthetic(&cfg, 6, &mut RngState::new(1)).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.gt.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_velocity_shifts_center() {
        let cfg = SynthConfig {
            velocity_x: 2.0,
            canvas_w: 200,
            size_min: 20.0,
            size_max: 20.0,
            ..SynthConfig::still()
        };
        // keep the object away from the right wall for 8 frames
        for seed in 0..20 {
            let s = gen_synthetic(&cfg, 8, &mut RngState::new(seed)).unwrap();
            if s.gt[0].cx + 30.0 + 16.0 > 200.0 {
                continue;
            }
            for w in s.gt.windows(2) {
                assert_eq!(w[1].cx - w[0].cx, 2.0);
                assert_eq!(w[1].cy, w[0].cy);
            }
            return;
        }
        panic!("no seed kept the object clear of the wall");
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic(&cfg, 5, &mut RngState::new(4)).unwrap();
        let b = gen_synthetic(&cfg, 5, &mut RngState::new(4)).unwrap();
        assert_eq!(a.gt, b.gt);
        assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x == y));
    }

    #[test]
    fn gt_is_tight_box_of_mask() {
        let cfg = SynthConfig {
            distractors: 2,
            occluder_prob: 1.0,
            ..SynthConfig::default()
        };
        let (s, masks) = gen_synthetic_with_masks(&cfg, 12, &mut RngState::new(8)).unwrap();
        for (b, m) in s.gt.iter().zip(&masks) {
            let w = cfg.canvas_w;
            let xs: Vec<u32> = m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i as u32 % w).collect();
            let ys: Vec<u32> = m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i as u32 / w).collect();
            let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
            let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
            assert_eq!(b.to_xywh(), [x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64]);
        }
    }

    #[test]
    fn rejects_short_sequences_and_bad_configs() {
        assert!(gen_synthetic(&SynthConfig::default(), 1, &mut RngState::new(0)).is_err());
        let bad = SynthConfig {
            occluder_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(gen_synthetic(&bad, 4, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn box_line_convention() {
        let b = parse_box_line("10,20,30,40").unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (25.0, 40.0, 30.0, 40.0));
        assert!(parse_box_line("10,20,30").is_none());
        assert!(parse_box_line("a,b,c,d").is_none());
        assert!(parse_box_line("1\t2\t3\t4").is_some());
    }

    fn write_frames(dir: &Path, n: usize) {
        for i in 0..n {
            RgbImage::new(4, 4).save(dir.join(format!("{:08}.png", i + 1))).unwrap();
        }
    }

    #[test]
    fn load_checks_counts() {
        let tmp = tempfile::tempdir().unwrap();
        write_frames(tmp.path(), 3);
        fs::write(tmp.path().join(GROUNDTRUTH_FILE), "0,0,2,2\n1,1,2,2\n1,1,3,3\n").unwrap();
        assert_eq!(load_sequence(tmp.path()).unwrap().len(), 3);

        fs::write(tmp.path().join(GROUNDTRUTH_FILE), "0,0,2,2\n1,1,2,2\n").unwrap();
        assert!(matches!(load_sequence(tmp.path()), Err(Error::Format { .. })));

        fs::write(tmp.path().join(GROUNDTRUTH_FILE), "0,0,2,2\nnope\n1,1,3,3\n").unwrap();
        match load_sequence(tmp.path()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn frames_sorted_numerically() {
        let tmp = tempfile::tempdir().unwrap();
        for (i, name) in ["10.png", "9.png", "100.png"].iter().enumerate() {
            RgbImage::from_pixel(2, 2, Rgb([i as u8 * 50, 0, 0]))
                .save(tmp.path().join(name))
                .unwrap();
        }
        fs::write(tmp.path().join(GROUNDTRUTH_FILE), "0,0,1,1\n0,0,1,1\n0,0,1,1\n").unwrap();
        let s = load_sequence(tmp.path()).unwrap();
        let reds: Vec<u8> = s.frames.iter().map(|f| f.get_pixel(0, 0)[0]).collect();
        assert_eq!(reds, vec![50, 0, 100]);
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let s = gen_synthetic(&SynthConfig::default(), 4, &mut RngState::new(2)).unwrap();
        save_sequence(&s, tmp.path()).unwrap();
        let back = load_sequence(tmp.path()).unwrap();
        assert_eq!(back.gt, s.gt);
        assert!(back.frames.iter().zip(&s.frames).all(|(a, b)| a == b));
    }

    #[test]
    fn manifest_resolves_relative_entries() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("manifest.txt");
        write_manifest(&m, &["a".into(), "/abs/b".into()]).unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries, vec![tmp.path().join("a"), PathBuf::from("/abs/b")]);
    }
}
