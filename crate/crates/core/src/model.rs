//! Network: a small strided conv backbone, the attention-based part updater,
//! the transformer encoder over search and template parts, and the per-part
//! localization MLP.
//!
//! Everything here is expressed twice: graph-level functions on [`Bound`]
//! that training differentiates through, and tensor-level convenience
//! wrappers on [`ModelParams`] for inference and tests.

use crate::config::{parse_bool, parse_value, KvConfig};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{Patch, ScaleFormula, TargetMask};
use crate::numerics::{Graph, RngState, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED_KEY_BIAS: f64 = -1e9;
/// Constant subtracted from `[0, 1]` pixel values before the backbone.
pub const PIXEL_MEAN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub backbone_blocks: usize,
    pub backbone_width: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub exclude_masked_keys: bool,
    pub sigma: f64,
    pub bbox_scale_formula: ScaleFormula,
    /// Template crop side as a multiple of the box side.
    pub template_context: f64,
    /// Search crop side as a multiple of the box side.
    pub search_context: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            template_size: 128,
            search_size: 256,
            backbone_blocks: 4,
            backbone_width: 16,
            channels: 64,
            heads: 8,
            layers: 4,
            ffn_dim: 256,
            exclude_masked_keys: false,
            sigma: 3.0,
            bbox_scale_formula: ScaleFormula::Std,
            template_context: 2.0,
            search_context: 4.0,
        }
    }
}

impl ModelConfig {
    /// 2x2 template grid, 4x4 search grid, C = 8, one layer, two heads.
    pub fn toy() -> Self {
        Self {
            template_size: 32,
            search_size: 64,
            backbone_width: 4,
            channels: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone_blocks
    }

    pub fn template_grid(&self) -> (usize, usize) {
        let g = self.template_size / self.stride();
        (g, g)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        let g = self.search_size / self.stride();
        (g, g)
    }

    pub fn block_channels(&self) -> Vec<usize> {
        (0..self.backbone_blocks)
            .map(|i| {
                if i + 1 == self.backbone_blocks {
                    self.channels
                } else {
                    (self.backbone_width << i).min(self.channels)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_blocks == 0 {
            return bad("backbone_blocks must be >= 1".into());
        }
        let s = self.stride();
        for (name, v) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if v == 0 || v % s != 0 {
                return bad(format!("{name} = {v} is not a positive multiple of the stride {s}"));
            }
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return bad(format!("channels = {} must be a positive multiple of 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("heads = {} must divide channels = {}", self.heads, self.channels));
        }
        if self.backbone_width == 0 || self.ffn_dim == 0 {
            return bad("backbone_width and ffn_dim must be positive".into());
        }
        if !(self.sigma > 0.0) || !(self.template_context > 0.0) || !(self.search_context > 0.0) {
            return bad("sigma and context factors must be positive".into());
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "template_size" => self.template_size = parse_value(key, value)?,
            "search_size" => self.search_size = parse_value(key, value)?,
            "backbone_blocks" => self.backbone_blocks = parse_value(key, value)?,
            "backbone_width" => self.backbone_width = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "exclude_masked_keys" => self.exclude_masked_keys = parse_bool(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "bbox_scale_formula" => self.bbox_scale_formula = value.trim().parse()?,
            "template_context" => self.template_context = parse_value(key, value)?,
            "search_context" => self.search_context = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("template_size", self.template_size.to_string()),
            ("search_size", self.search_size.to_string()),
            ("backbone_blocks", self.backbone_blocks.to_string()),
            ("backbone_width", self.backbone_width.to_string()),
            ("channels", self.channels.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("exclude_masked_keys", self.exclude_masked_keys.to_string()),
            ("sigma", self.sigma.to_string()),
            ("bbox_scale_formula", self.bbox_scale_formula.to_string()),
            ("template_context", self.template_context.to_string()),
            ("search_context", self.search_context.to_string()),
        ]
    }
}

/// Which input a [`PartSet`] was extracted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartSource {
    Template,
    Pseudo,
    Search,
}

/// `N x C` part features of a feature grid, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PartSet {
    pub features: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub source: PartSource,
}

impl PartSet {
    pub fn new(features: Tensor, grid_h: usize, grid_w: usize, source: PartSource) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != grid_h * grid_w {
            return Err(shape_err(
                "PartSet::new",
                format!("{:?} does not hold a {grid_h}x{grid_w} grid", features.shape()),
            ));
        }
        Ok(Self {
            features,
            grid_h,
            grid_w,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// DETR-style 2-D sine/cosine table, `N x C`, row-major over the grid.
/// The first `C/2` columns encode the row index, the rest the column index,
/// each as interleaved `(sin, cos)` pairs over geometric frequencies.
pub fn sinusoidal_pos(grid_h: usize, grid_w: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Parameter(format!(
            "sinusoidal positions need channels divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 10000f64.powf(2.0 * k as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * channels);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                for f in &freqs {
                    data.push((pos / f).sin());
                    data.push((pos / f).cos());
                }
            }
        }
    }
    Tensor::new(&[grid_h * grid_w, channels], data)
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Debug)]
struct MhaIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct LayerIds {
    attn: MhaIds,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Vec<ConvIds>,
    pos_z: usize,
    updater: MhaIds,
    layers: Vec<LayerIds>,
    head_w1: usize,
    head_b1: usize,
    head_w2: usize,
    head_b2: usize,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct LayoutBuilder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'r mut RngState>,
}

impl LayoutBuilder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        match (init, self.rng.as_deref_mut()) {
            (Init::Ones, _) => t = Tensor::full(shape, 1.0),
            (Init::Normal(std), Some(rng)) => {
                for v in t.data_mut() {
                    *v = std * rng.normal();
                }
            }
            _ => {}
        }
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, &[fan_in, fan_out], Init::Normal(std))
    }

    fn mha(&mut self, prefix: &str, c: usize) -> MhaIds {
        MhaIds {
            wq: self.linear(format!("{prefix}.wq"), c, c),
            wk: self.linear(format!("{prefix}.wk"), c, c),
            wv: self.linear(format!("{prefix}.wv"), c, c),
            wo: self.linear(format!("{prefix}.wo"), c, c),
        }
    }
}

fn build_layout(cfg: &ModelConfig, rng: Option<&mut RngState>) -> (Vec<String>, Vec<Tensor>, Layout) {
    let mut b = LayoutBuilder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let c = cfg.channels;
    let mut cin = 3;
    let mut backbone = Vec::new();
    for (i, cout) in cfg.block_channels().into_iter().enumerate() {
        let fan_in = 9 * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        backbone.push(ConvIds {
            w: b.add(format!("backbone.{i}.w"), &[fan_in, cout], Init::Normal(std)),
            b: b.add(format!("backbone.{i}.b"), &[cout], Init::Zeros),
            ln_g: b.add(format!("backbone.{i}.ln_g"), &[cout], Init::Ones),
            ln_b: b.add(format!("backbone.{i}.ln_b"), &[cout], Init::Zeros),
        });
        cin = cout;
    }
    let (th, tw) = cfg.template_grid();
    let pos_z = b.add("pos_z".into(), &[th * tw, c], Init::Normal(0.1));
    let updater = b.mha("updater", c);
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("encoder.{l}");
        layers.push(LayerIds {
            attn: b.mha(&format!("{p}.attn"), c),
            ln1_g: b.add(format!("{p}.ln1_g"), &[c], Init::Ones),
            ln1_b: b.add(format!("{p}.ln1_b"), &[c], Init::Zeros),
            ff1_w: b.linear(format!("{p}.ff1_w"), c, cfg.ffn_dim),
            ff1_b: b.add(format!("{p}.ff1_b"), &[cfg.ffn_dim], Init::Zeros),
            ff2_w: b.linear(format!("{p}.ff2_w"), cfg.ffn_dim, c),
            ff2_b: b.add(format!("{p}.ff2_b"), &[c], Init::Zeros),
            ln2_g: b.add(format!("{p}.ln2_g"), &[c], Init::Ones),
            ln2_b: b.add(format!("{p}.ln2_b"), &[c], Init::Zeros),
        });
    }
    let head_w1 = b.linear("head.w1".into(), c, c);
    let head_b1 = b.add("head.b1".into(), &[c], Init::Zeros);
    let head_w2 = b.add("head.w2".into(), &[c, 2], Init::Normal(0.1 / (c as f64).sqrt()));
    let head_b2 = b.add("head.b2".into(), &[2], Init::Zeros);
    let layout = Layout {
        backbone,
        pos_z,
        updater,
        layers,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
    };
    (b.names, b.tensors, layout)
}

/// All trainable weights plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Fresh weights drawn from `rng`.
    pub fn init(cfg: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let (names, tensors, layout) = build_layout(cfg, Some(rng));
        Ok(Self {
            cfg: cfg.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Rebuilds parameters from named arrays. Every expected name must be
    /// present exactly once with the expected shape.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let (names, mut tensors, layout) = build_layout(cfg, None);
        if named.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut seen = vec![false; names.len()];
        for (name, t) in named {
            let Some(i) = names.iter().position(|n| *n == name) else {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
            };
            if seen[i] {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            if t.shape() != tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    tensors[i].shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            seen[i] = true;
            tensors[i] = t;
        }
        Ok(Self {
            cfg: cfg.clone(),
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Backbone block a parameter belongs to, if any.
    pub fn backbone_block(&self, index: usize) -> Option<usize> {
        self.names[index]
            .strip_prefix("backbone.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|b| b.parse().ok())
    }

    /// Places every parameter in `g`; those for which `trainable` is false
    /// become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }

    /// Binds every parameter as a constant except `index`, which is replaced
    /// by `var` (used to differentiate with respect to one tensor).
    pub fn bind_with(&self, g: &mut Graph, index: usize, var: Var) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == index { var } else { g.constant(t.clone()) })
            .collect();
        Bound { params: self, vars }
    }

    fn bind_frozen(&self, g: &mut Graph) -> Bound<'_> {
        self.bind(g, |_| false)
    }

    /// Backbone features of a square patch.
    pub fn extract_features(&self, patch: &Patch, source: PartSource) -> Result<PartSet> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let f = b.features(&mut g, patch)?;
        g.check()?;
        let grid = patch.size / self.cfg.stride();
        PartSet::new(g.value(f).clone(), grid, grid, source)
    }

    /// Dynamic template parts: `f_z + Pos_z + Atten(f_z, f_y, f_y)`.
    pub fn update_parts(&self, f_z: &PartSet, f_y: &PartSet) -> Result<PartSet> {
        self.check_template(f_z)?;
        if f_y.channels() != self.cfg.channels {
            return Err(shape_err("update_parts", "pseudo-template channel count"));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let z = g.constant(f_z.features.clone());
        let y = g.constant(f_y.features.clone());
        let out = b.update_parts(&mut g, z, y);
        g.check()?;
        PartSet::new(g.value(out).clone(), f_z.grid_h, f_z.grid_w, PartSource::Template)
    }

    /// Runs the encoder; returns `(h_x, h_z)`.
    pub fn encode(&self, search: &PartSet, dyn_template: &PartSet, mask: &TargetMask) -> Result<(Tensor, Tensor)> {
        self.check_template(dyn_template)?;
        if search.channels() != self.cfg.channels {
            return Err(shape_err("encode", "search channel count"));
        }
        if mask.len() != dyn_template.len() {
            return Err(shape_err("encode", "mask length differs from template parts"));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant(search.features.clone());
        let z = g.constant(dyn_template.features.clone());
        let (hx, hz) = b.encode(&mut g, x, search.grid_h, search.grid_w, z, mask)?;
        g.check()?;
        Ok((g.value(hx).clone(), g.value(hz).clone()))
    }

    /// Per-part locations in normalized search coordinates, `N x 2`.
    pub fn localize(&self, h_z: &Tensor) -> Result<Tensor> {
        if h_z.ndim() != 2 || h_z.cols() != self.cfg.channels {
            return Err(shape_err("localize", format!("h_z has shape {:?}", h_z.shape())));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let h = g.constant(h_z.clone());
        let l = b.localize(&mut g, h);
        g.check()?;
        Ok(g.value(l).clone())
    }

    fn check_template(&self, f_z: &PartSet) -> Result<()> {
        let (th, tw) = self.cfg.template_grid();
        if f_z.grid_h != th || f_z.grid_w != tw || f_z.channels() != self.cfg.channels {
            return Err(shape_err(
                "template parts",
                format!(
                    "{}x{}x{} does not match the configured {th}x{tw}x{}",
                    f_z.grid_h,
                    f_z.grid_w,
                    f_z.channels(),
                    self.cfg.channels
                ),
            ));
        }
        Ok(())
    }
}

/// Hard attention rows `Gumbel(h_z h_x^T)`, one-hot per template part.
pub fn hard_attention(h_z: &Tensor, h_x: &Tensor, tau: f64, rng: &mut RngState) -> Result<Tensor> {
    if h_z.ndim() != 2 || h_x.ndim() != 2 || h_z.cols() != h_x.cols() {
        return Err(shape_err("hard_attention", "h_z and h_x must be matrices with equal width"));
    }
    let mut g = Graph::new();
    let z = g.constant(h_z.clone());
    let x = g.constant(h_x.clone());
    let a = hard_attention_graph(&mut g, z, x, tau, rng)?;
    Ok(g.value(a).clone())
}

/// Graph form of [`hard_attention`]; unscaled dot-product logits, straight-through gradient.
pub fn hard_attention_graph(g: &mut Graph, h_z: Var, h_x: Var, tau: f64, rng: &mut RngState) -> Result<Var> {
    let logits = g.matmul_nt(h_z, h_x);
    g.gumbel_softmax(logits, tau, true, rng)
}

/// Parameters placed in a graph.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.cfg
    }

    fn v(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Backbone: per block a 3x3 stride-2 conv, relu and channel layer norm.
    /// Returns `[grid*grid, C]`.
    pub fn features(&self, g: &mut Graph, patch: &Patch) -> Result<Var> {
        let s = self.params.cfg.stride();
        if patch.size == 0 || patch.size % s != 0 || patch.data.len() != patch.size * patch.size * 3 {
            return Err(shape_err(
                "extract_features",
                format!("patch side {} is not a positive multiple of the stride {s}", patch.size),
            ));
        }
        let input = Tensor::new(
            &[patch.size, patch.size, 3],
            patch.data.iter().map(|v| v - PIXEL_MEAN).collect(),
        )?;
        let mut x = g.constant(input);
        for ids in &self.params.layout.backbone {
            let y = g.conv2d(x, self.v(ids.w), self.v(ids.b), 3, 2, 1);
            let y = g.relu(y);
            let shape = g.shape(y).to_vec();
            let flat = g.reshape(y, &[shape[0] * shape[1], shape[2]]);
            let n = g.layer_norm(flat, self.v(ids.ln_g), self.v(ids.ln_b), LN_EPS);
            x = g.reshape(n, &shape);
        }
        let shape = g.shape(x).to_vec();
        Ok(g.reshape(x, &[shape[0] * shape[1], shape[2]]))
    }

    fn mha(&self, g: &mut Graph, ids: &MhaIds, q_in: Var, kv_in: Var, key_bias: Option<Var>) -> Var {
        let heads = self.params.cfg.heads;
        let c = self.params.cfg.channels;
        let d = c / heads;
        let q = g.matmul(q_in, self.v(ids.wq));
        let k = g.matmul(kv_in, self.v(ids.wk));
        let v = g.matmul(kv_in, self.v(ids.wv));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * d, (h + 1) * d);
            let kh = g.slice_cols(k, h * d, (h + 1) * d);
            let vh = g.slice_cols(v, h * d, (h + 1) * d);
            outs.push(g.attention(qh, kh, vh, key_bias));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.matmul(cat, self.v(ids.wo))
    }

    /// `f_z + Pos_z + Atten(Q = f_z, K = V = f_y)`.
    pub fn update_parts(&self, g: &mut Graph, f_z: Var, f_y: Var) -> Var {
        let base = self.template_base(g, f_z);
        let att = self.mha(g, &self.params.layout.updater, f_z, f_y, None);
        g.add(base, att)
    }

    /// `f_z + Pos_z`, the dynamic parts with the updater bypassed.
    pub fn template_base(&self, g: &mut Graph, f_z: Var) -> Var {
        g.add(f_z, self.v(self.params.layout.pos_z))
    }

    /// Adds sinusoidal positions to the search parts, masks the template
    /// parts and runs the encoder stack. Returns `(h_x, h_z)`.
    pub fn encode(
        &self,
        g: &mut Graph,
        f_x: Var,
        grid_h: usize,
        grid_w: usize,
        dyn_template: Var,
        mask: &TargetMask,
    ) -> Result<(Var, Var)> {
        let pos = sinusoidal_pos(grid_h, grid_w, self.params.cfg.channels)?;
        let pos = g.constant(pos);
        let x = g.add(f_x, pos);
        let z = g.mul_rows(dyn_template, mask.values());
        let n_x = g.shape(x)[0];
        let key_bias = self.params.cfg.exclude_masked_keys.then(|| {
            let mut bias = vec![0.0; n_x];
            bias.extend(mask.values().iter().map(|&m| if m != 0.0 { 0.0 } else { MASKED_KEY_BIAS }));
            g.constant(Tensor::vector(&bias))
        });
        Ok(self.encode_tokens(g, x, z, key_bias))
    }

    /// Encoder stack over `[x_tokens; z_tokens]` exactly as given.
    pub fn encode_tokens(&self, g: &mut Graph, x_tokens: Var, z_tokens: Var, key_bias: Option<Var>) -> (Var, Var) {
        let n_x = g.shape(x_tokens)[0];
        let n_z = g.shape(z_tokens)[0];
        let mut seq = g.concat_rows(&[x_tokens, z_tokens]);
        for l in &self.params.layout.layers {
            let a = self.mha(g, &l.attn, seq, seq, key_bias);
            let r = g.add(seq, a);
            let r = g.layer_norm(r, self.v(l.ln1_g), self.v(l.ln1_b), LN_EPS);
            let h = g.matmul(r, self.v(l.ff1_w));
            let h = g.add_row(h, self.v(l.ff1_b));
            let h = g.relu(h);
            let h = g.matmul(h, self.v(l.ff2_w));
            let h = g.add_row(h, self.v(l.ff2_b));
            let r2 = g.add(r, h);
            seq = g.layer_norm(r2, self.v(l.ln2_g), self.v(l.ln2_b), LN_EPS);
        }
        let hx = g.slice_rows(seq, 0, n_x);
        let hz = g.slice_rows(seq, n_x, n_x + n_z);
        (hx, hz)
    }

    /// Two linear layers with relu between and a sigmoid on the output.
    pub fn localize(&self, g: &mut Graph, h_z: Var) -> Var {
        let lay = &self.params.layout;
        let h = g.matmul(h_z, self.v(lay.head_w1));
        let h = g.add_row(h, self.v(lay.head_b1));
        let h = g.relu(h);
        let o = g.matmul(h, self.v(lay.head_w2));
        let o = g.add_row(o, self.v(lay.head_b2));
        g.sigmoid(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelParams {
        ModelParams::init(&ModelConfig::toy(), &mut RngState::new(5)).unwrap()
    }

    fn random_parts(rng: &mut RngState, h: usize, w: usize, c: usize, src: PartSource) -> PartSet {
        let data = (0..h * w * c).map(|_| rng.normal()).collect();
        PartSet::new(Tensor::matrix(h * w, c, data).unwrap(), h, w, src).unwrap()
    }

    fn patch(size: usize, seed: u64) -> Patch {
        let mut r = RngState::new(seed);
        Patch {
            size,
            data: (0..size * size * 3).map(|_| r.uniform()).collect(),
        }
    }

    #[test]
    fn default_shape_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.stride(), 16);
        let (th, tw) = cfg.template_grid();
        let (sh, sw) = cfg.search_grid();
        assert_eq!(th * tw, 64);
        assert_eq!(sh * sw, 256);
        assert_eq!(th * tw + sh * sw, 320);
    }

    #[test]
    fn feature_shapes() {
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, &mut RngState::new(1)).unwrap();
        let f = p.extract_features(&patch(128, 2), PartSource::Template).unwrap();
        assert_eq!((f.grid_h, f.grid_w, f.channels()), (8, 8, 64));
        let f = p.extract_features(&patch(256, 2), PartSource::Search).unwrap();
        assert_eq!((f.grid_h, f.grid_w), (16, 16));
        let again = p.extract_features(&patch(256, 2), PartSource::Search).unwrap();
        assert_eq!(f, again);
        assert!(p.extract_features(&patch(100, 2), PartSource::Search).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.channels = 6;
        c.heads = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.search_size = 70;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sinusoid_examples() {
        let p = sinusoidal_pos(3, 4, 8).unwrap();
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // position (0, 0): sin terms 0, cos terms 1
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for i in 0..12 {
            for j in i + 1..12 {
                let d: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0, "rows {i} and {j} coincide");
            }
        }
        // row 1, col 0: first frequency is 1
        assert!((p.at2(4, 0) - 1f64.sin()).abs() < 1e-15);
        assert!(sinusoidal_pos(2, 2, 6).is_err());
    }

    #[test]
    fn update_with_zero_pseudo_is_identity_plus_position() {
        let p = toy();
        let mut rng = RngState::new(9);
        let fz = random_parts(&mut rng, 2, 2, 8, PartSource::Template);
        let fy = PartSet::new(Tensor::zeros(&[16, 8]), 4, 4, PartSource::Pseudo).unwrap();
        let out = p.update_parts(&fz, &fy).unwrap();
        let pos = p.get("pos_z").unwrap();
        for (i, v) in out.features.data().iter().enumerate() {
            assert_eq!(v.to_bits(), (fz.features.data()[i] + pos.data()[i]).to_bits());
        }
    }

    #[test]
    fn update_with_single_pseudo_part() {
        let p = toy();
        let mut rng = RngState::new(10);
        let fz = random_parts(&mut rng, 2, 2, 8, PartSource::Template);
        let fy = random_parts(&mut rng, 1, 1, 8, PartSource::Pseudo);
        let out = p.update_parts(&fz, &fy).unwrap();
        // softmax over one key is 1, so the attended value is proj(f_y) for every part
        let wv = p.get("updater.wv").unwrap();
        let wo = p.get("updater.wo").unwrap();
        let mut v = [0.0; 8];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = (0..8).map(|k| fy.features.data()[k] * wv.at2(k, c)).sum();
        }
        let proj: Vec<f64> = (0..8).map(|c| (0..8).map(|k| v[k] * wo.at2(k, c)).sum()).collect();
        let pos = p.get("pos_z").unwrap();
        for i in 0..4 {
            for c in 0..8 {
                let want = fz.features.at2(i, c) + pos.at2(i, c) + proj[c];
                assert!((out.features.at2(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_is_invariant_to_pseudo_order() {
        let p = toy();
        let mut rng = RngState::new(11);
        let fz = random_parts(&mut rng, 2, 2, 8, PartSource::Template);
        let fy = random_parts(&mut rng, 4, 4, 8, PartSource::Pseudo);
        let mut rows: Vec<Vec<f64>> = (0..16).map(|r| fy.features.row(r).to_vec()).collect();
        rows.reverse();
        rows.swap(3, 7);
        let perm = PartSet::new(
            Tensor::matrix(16, 8, rows.concat()).unwrap(),
            4,
            4,
            PartSource::Pseudo,
        )
        .unwrap();
        let a = p.update_parts(&fz, &fy).unwrap();
        let b = p.update_parts(&fz, &perm).unwrap();
        assert!(a.features.max_abs_diff(&b.features) < 1e-12);
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let cfg = ModelConfig {
            layers: 0,
            ..ModelConfig::toy()
        };
        let p = ModelParams::init(&cfg, &mut RngState::new(3)).unwrap();
        let mut rng = RngState::new(4);
        let fx = random_parts(&mut rng, 4, 4, 8, PartSource::Search);
        let fz = random_parts(&mut rng, 2, 2, 8, PartSource::Template);
        let mask = TargetMask::from_bits(&[true, false, true, true]);
        let (hx, hz) = p.encode(&fx, &fz, &mask).unwrap();
        let pos = sinusoidal_pos(4, 4, 8).unwrap();
        for i in 0..16 {
            for c in 0..8 {
                assert_eq!(hx.at2(i, c), fx.features.at2(i, c) + pos.at2(i, c));
            }
        }
        for i in 0..4 {
            let m = mask.values()[i];
            for c in 0..8 {
                assert_eq!(hz.at2(i, c), fz.features.at2(i, c) * m);
            }
        }
    }

    #[test]
    fn all_zero_mask_zeroes_template_tokens() {
        let cfg = ModelConfig {
            layers: 0,
            ..ModelConfig::toy()
        };
        let p = ModelParams::init(&cfg, &mut RngState::new(3)).unwrap();
        let mut rng = RngState::new(4);
        let fx = random_parts(&mut rng, 4, 4, 8, PartSource::Search);
        let fz = random_parts(&mut rng, 2, 2, 8, PartSource::Template);
        let (_, hz) = p.encode(&fx, &fz, &TargetMask::from_bits(&[false; 4])).unwrap();
        assert!(hz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_permutation_equivariant_without_positions() {
        let p = toy();
        let mut rng = RngState::new(12);
        let xs: Vec<f64> = (0..16 * 8).map(|_| rng.normal()).collect();
        let zs: Vec<f64> = (0..4 * 8).map(|_| rng.normal()).collect();
        let perm: Vec<usize> = vec![3, 0, 15, 7, 1, 2, 14, 4, 5, 6, 13, 8, 9, 12, 10, 11];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| xs[r * 8..(r + 1) * 8].to_vec()).collect();

        let run = |x: Vec<f64>| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, |_| false);
            let xv = g.constant(Tensor::matrix(16, 8, x).unwrap());
            let zv = g.constant(Tensor::matrix(4, 8, zs.clone()).unwrap());
            let (hx, hz) = b.encode_tokens(&mut g, xv, zv, None);
            (g.value(hx).clone(), g.value(hz).clone())
        };
        let (hx, hz) = run(xs.clone());
        let (hx_p, hz_p) = run(permuted);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((hx_p.at2(i, c) - hx.at2(src, c)).abs() < 1e-10);
            }
        }
        assert!(hz.max_abs_diff(&hz_p) < 1e-10);
    }

    #[test]
    fn localize_examples() {
        let mut p = toy();
        p.get_mut("head.w2").unwrap().data_mut().fill(0.0);
        p.get_mut("head.b2").unwrap().data_mut().fill(0.0);
        let mut rng = RngState::new(1);
        let h = Tensor::matrix(4, 8, (0..32).map(|_| rng.normal()).collect()).unwrap();
        let l = p.localize(&h).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.5));

        let q = toy();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let same = Tensor::matrix(3, 8, row.repeat(3)).unwrap();
        let l = q.localize(&same).unwrap();
        assert_eq!(l.row(0), l.row(1));
        assert_eq!(l.row(1), l.row(2));
        assert!(l.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn localize_gradient_matches_finite_differences() {
        let p = toy();
        let mut rng = RngState::new(21);
        let h = Tensor::matrix(4, 8, (0..32).map(|_| rng.normal()).collect()).unwrap();
        let r = crate::numerics::grad_check(
            |g, x| {
                let b = p.bind(g, |_| false);
                let l = b.localize(g, x);
                g.mean(l)
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
    }

    #[test]
    fn hard_attention_rows_are_one_hot() {
        let mut rng = RngState::new(2);
        let hz = Tensor::matrix(4, 8, (0..32).map(|_| rng.normal()).collect()).unwrap();
        let hx = Tensor::matrix(16, 8, (0..128).map(|_| rng.normal()).collect()).unwrap();
        let a = hard_attention(&hz, &hx, 1.0, &mut rng).unwrap();
        assert_eq!(a.shape(), &[4, 16]);
        for r in 0..4 {
            assert_eq!(a.row(r).iter().sum::<f64>(), 1.0);
            assert_eq!(a.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
        }
        assert!(hard_attention(&hz, &hx, 0.0, &mut rng).is_err());
    }

    #[test]
    fn from_named_rejects_mismatch() {
        let p = toy();
        let named: Vec<(String, Tensor)> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert!(ModelParams::from_named(&ModelConfig::toy(), named.clone()).is_ok());
        let mut other = ModelConfig::toy();
        other.channels = 16;
        other.ffn_dim = 32;
        assert!(ModelParams::from_named(&other, named.clone()).is_err());
        let mut short = named;
        short.pop();
        assert!(ModelParams::from_named(&ModelConfig::toy(), short).is_err());
    }

    #[test]
    fn backbone_block_lookup() {
        let p = toy();
        let i = p.names().iter().position(|n| n == "backbone.2.w").unwrap();
        assert_eq!(p.backbone_block(i), Some(2));
        let j = p.names().iter().position(|n| n == "pos_z").unwrap();
        assert_eq!(p.backbone_block(j), None);
    }
}
