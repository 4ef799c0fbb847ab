//! Triplet sampling, jitter, the learning-rate schedule and SGD training.

use std::io::Write;

use crate::config::{parse_bool, parse_value, KvConfig};
use crate::dataio::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{crop_region, estimate_bbox_graph, part_centers, target_mask, BBox, CropWindow, Patch, TargetMask};
use crate::losses::{attention_loss_graph, bbox_loss_graph, total_loss, LossReport};
use crate::model::{hard_attention_graph, ModelConfig, ModelParams};
use crate::numerics::{Graph, RngState, Tensor};

/// Consecutive aborted steps tolerated before training gives up.
pub const MAX_ABORT_STREAK: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub tau: f64,
    pub frame_range: usize,
    /// Pseudo-template center shift bound, as a fraction of the crop context.
    pub jitter_shift: f64,
    pub jitter_scale_min: f64,
    pub jitter_scale_max: f64,
    /// Same for the search-crop center, which stands in for the previous output.
    pub search_shift: f64,
    pub search_scale_min: f64,
    pub search_scale_max: f64,
    pub no_attention_loss: bool,
    pub no_updater: bool,
    pub atten_loss_unmasked: bool,
    pub w_l1: f64,
    pub w_giou: f64,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    /// Fraction of epochs during which the whole backbone stays frozen.
    pub freeze_backbone_frac: f64,
    /// Backbone blocks (counted from the top) trained after the frozen phase.
    pub trainable_backbone_blocks: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 5,
            lr_start: 0.001,
            lr_peak: 0.005,
            lr_end: 0.0005,
            momentum: 0.9,
            lambda: 0.1,
            tau: 1.0,
            frame_range: 100,
            jitter_shift: 0.08,
            jitter_scale_min: 0.8,
            jitter_scale_max: 1.25,
            search_shift: 0.06,
            search_scale_min: 0.85,
            search_scale_max: 1.18,
            no_attention_loss: false,
            no_updater: false,
            atten_loss_unmasked: false,
            w_l1: 1.0,
            w_giou: 1.0,
            batch_size: 8,
            samples_per_epoch: 800,
            freeze_backbone_frac: 0.25,
            trainable_backbone_blocks: 3,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("need 0 <= warmup_epochs < epochs");
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) || self.w_l1 < 0.0 || self.w_giou < 0.0 {
            return bad("lambda, w_l1, w_giou must be >= 0 and tau > 0");
        }
        if self.frame_range == 0 || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return bad("frame_range, batch_size and samples_per_epoch must be positive");
        }
        if !(self.jitter_shift >= 0.0 && self.search_shift >= 0.0) {
            return bad("shift bounds must be >= 0");
        }
        if !(0.0 < self.jitter_scale_min && self.jitter_scale_min <= self.jitter_scale_max)
            || !(0.0 < self.search_scale_min && self.search_scale_min <= self.search_scale_max)
        {
            return bad("scale bounds need 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.freeze_backbone_frac) || !(self.grad_clip >= 0.0) {
            return bad("freeze_backbone_frac must be in [0, 1] and grad_clip >= 0");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.samples_per_epoch / self.batch_size).max(1)
    }

    /// Weight of the attention term actually optimized.
    pub fn effective_lambda(&self) -> f64 {
        if self.no_attention_loss {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn pseudo_jitter(&self) -> Jitter {
        Jitter {
            shift: self.jitter_shift,
            scale_min: self.jitter_scale_min,
            scale_max: self.jitter_scale_max,
        }
    }

    pub fn search_jitter(&self) -> Jitter {
        Jitter {
            shift: self.search_shift,
            scale_min: self.search_scale_min,
            scale_max: self.search_scale_max,
        }
    }

    /// Applies `no_attention_loss` or `no_updater` by name.
    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no_attention_loss" => self.no_attention_loss = true,
            "no_updater" => self.no_updater = true,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "lr_start" => self.lr_start = parse_value(key, value)?,
            "lr_peak" => self.lr_peak = parse_value(key, value)?,
            "lr_end" => self.lr_end = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "frame_range" => self.frame_range = parse_value(key, value)?,
            "jitter_shift" => self.jitter_shift = parse_value(key, value)?,
            "jitter_scale_min" => self.jitter_scale_min = parse_value(key, value)?,
            "jitter_scale_max" => self.jitter_scale_max = parse_value(key, value)?,
            "search_shift" => self.search_shift = parse_value(key, value)?,
            "search_scale_min" => self.search_scale_min = parse_value(key, value)?,
            "search_scale_max" => self.search_scale_max = parse_value(key, value)?,
            "no_attention_loss" => self.no_attention_loss = parse_bool(key, value)?,
            "no_updater" => self.no_updater = parse_bool(key, value)?,
            "atten_loss_unmasked" => self.atten_loss_unmasked = parse_bool(key, value)?,
            "w_l1" => self.w_l1 = parse_value(key, value)?,
            "w_giou" => self.w_giou = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "samples_per_epoch" => self.samples_per_epoch = parse_value(key, value)?,
            "freeze_backbone_frac" => self.freeze_backbone_frac = parse_value(key, value)?,
            "trainable_backbone_blocks" => self.trainable_backbone_blocks = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.tau.to_string()),
            ("frame_range", self.frame_range.to_string()),
            ("jitter_shift", self.jitter_shift.to_string()),
            ("jitter_scale_min", self.jitter_scale_min.to_string()),
            ("jitter_scale_max", self.jitter_scale_max.to_string()),
            ("search_shift", self.search_shift.to_string()),
            ("search_scale_min", self.search_scale_min.to_string()),
            ("search_scale_max", self.search_scale_max.to_string()),
            ("no_attention_loss", self.no_attention_loss.to_string()),
            ("no_updater", self.no_updater.to_string()),
            ("atten_loss_unmasked", self.atten_loss_unmasked.to_string()),
            ("w_l1", self.w_l1.to_string()),
            ("w_giou", self.w_giou.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("samples_per_epoch", self.samples_per_epoch.to_string()),
            ("freeze_backbone_frac", self.freeze_backbone_frac.to_string()),
            ("trainable_backbone_blocks", self.trainable_backbone_blocks.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Linear warm-up from `lr_start` to `lr_peak`, then exponential decay to
/// `lr_end` at `epochs`. `epoch` is fractional and clamped to `[0, epochs]`.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let e = epoch.clamp(0.0, cfg.epochs as f64);
    let warm = cfg.warmup_epochs as f64;
    if e <= warm && warm > 0.0 {
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * e / warm
    } else {
        let frac = (e - warm) / (cfg.epochs as f64 - warm);
        cfg.lr_peak * (cfg.lr_end / cfg.lr_peak).powf(frac)
    }
}

/// Frame indices of one training triplet within a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletIndex {
    pub sequence: usize,
    pub template: usize,
    pub search: usize,
    pub pseudo: usize,
}

/// Draws `(template, search, pseudo)` indices for a sequence of `len` frames:
/// search in `1..len`, template within `frame_range` of it (never equal), and
/// the pseudo template on the frame just before the search frame.
pub fn sample_indices(len: usize, frame_range: usize, rng: &mut RngState) -> Result<(usize, usize, usize)> {
    if len < 2 {
        return Err(Error::Sampling(format!("sequence of {len} frames is too short")));
    }
    let search = 1 + rng.below(len - 1);
    let lo = search.saturating_sub(frame_range);
    let hi = (search + frame_range).min(len - 1);
    let mut template = lo + rng.below(hi - lo);
    if template >= search {
        template += 1;
    }
    Ok((template, search, search - 1))
}

/// Picks a sequence uniformly, then a triplet inside it.
pub fn sample_triplet(dataset: &[Sequence], frame_range: usize, rng: &mut RngState) -> Result<TripletIndex> {
    if dataset.is_empty() {
        return Err(Error::Sampling("empty dataset".into()));
    }
    let sequence = rng.below(dataset.len());
    let (template, search, pseudo) = sample_indices(dataset[sequence].len(), frame_range, rng)?;
    Ok(TripletIndex {
        sequence,
        template,
        search,
        pseudo,
    })
}

/// Random shift and scale of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Shift bound per axis as a fraction of the crop context.
    pub shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        shift: 0.0,
        scale_min: 1.0,
        scale_max: 1.0,
    };
}

/// Shifts the center of `gt` by `U(-d, d)` per axis with `d = shift * context`,
/// scales `w` and `h` independently and clamps the result to the frame.
/// Falls back to the clamped `gt` if clamping leaves no area.
pub fn jitter(gt: &BBox, rng: &mut RngState, j: &Jitter, context: f64, frame_w: f64, frame_h: f64) -> BBox {
    let d = j.shift * context;
    let mut u = |lo: f64, hi: f64| if hi > lo { rng.range(lo, hi) } else { lo };
    let dx = u(-d, d);
    let dy = u(-d, d);
    let sw = u(j.scale_min, j.scale_max);
    let sh = u(j.scale_min, j.scale_max);
    let b = BBox::new(gt.cx + dx, gt.cy + dy, gt.w * sw, gt.h * sh, gt.frame).clamp_to(frame_w, frame_h);
    if b.area() > 0.0 {
        b
    } else {
        gt.clamp_to(frame_w, frame_h)
    }
}

/// A triplet cropped and ready for the network.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub template: Patch,
    pub pseudo: Patch,
    pub search: Patch,
    pub mask: TargetMask,
    /// Search-frame ground truth in normalized search coordinates.
    pub gt: BBox,
}

/// Crops a triplet. Returns `Ok(None)` when the template box covers no part
/// center, so the sample has nothing to supervise.
pub fn prepare_sample(
    dataset: &[Sequence],
    idx: TripletIndex,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Option<TrainSample>> {
    let seq = &dataset[idx.sequence];
    let frame = |i: usize| &seq.frames[i];
    let dims = |i: usize| (seq.frames[i].width() as f64, seq.frames[i].height() as f64);

    let gt_t = seq.gt[idx.template];
    let tw = CropWindow::around(&gt_t, mcfg.template_context, mcfg.template_size);
    let template = crop_region(frame(idx.template), &tw)?;
    let (gh, gw) = mcfg.template_grid();
    let grid = part_centers(gh, gw, mcfg.stride() as f64)?;
    let (mask, warn) = target_mask(&grid, &tw.to_patch(&gt_t))?;
    if warn.is_some() {
        return Ok(None);
    }

    let gt_p = seq.gt[idx.pseudo];
    let (w, h) = dims(idx.pseudo);
    let jp = jitter(&gt_p, rng, &cfg.pseudo_jitter(), mcfg.template_context * gt_p.side(), w, h);
    let pseudo = crop_region(frame(idx.pseudo), &CropWindow::around(&jp, mcfg.template_context, mcfg.template_size))?;

    let gt_s = seq.gt[idx.search];
    let (w, h) = dims(idx.search);
    let js = jitter(&gt_s, rng, &cfg.search_jitter(), mcfg.search_context * gt_s.side(), w, h);
    let sw = CropWindow::around(&js, mcfg.search_context, mcfg.search_size);
    let search = crop_region(frame(idx.search), &sw)?;

    Ok(Some(TrainSample {
        template,
        pseudo,
        search,
        mask,
        gt: sw.to_normalized(&gt_s),
    }))
}

/// Samples until `n` usable triplets are collected.
pub fn sample_batch(
    dataset: &[Sequence],
    n: usize,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 20 * n + 20 {
            return Err(Error::Sampling("too many triplets without target parts".into()));
        }
        let idx = sample_triplet(dataset, cfg.frame_range, rng)?;
        if let Some(s) = prepare_sample(dataset, idx, mcfg, cfg, rng)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Parameters, optimizer velocity and bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub rng: RngState,
    /// Lowest epoch-mean total loss seen so far, with its epoch.
    pub best: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            params,
            velocity,
            step: 0,
            epoch: 0,
            rng: RngState::with_stream(seed, 1),
            best: None,
        }
    }

    /// Fresh weights from `seed` (stream 0); training randomness uses stream 1.
    pub fn init(mcfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(mcfg, &mut RngState::new(seed))?;
        Ok(Self::new(params, seed))
    }
}

/// Which parameters receive updates in `epoch`.
pub fn trainable_mask(params: &ModelParams, cfg: &TrainConfig, epoch: usize) -> Vec<bool> {
    let blocks = params.config().backbone_blocks;
    let frozen_epochs = (cfg.freeze_backbone_frac * cfg.epochs as f64).round() as usize;
    let first_open = blocks.saturating_sub(cfg.trainable_backbone_blocks);
    (0..params.len())
        .map(|i| match params.backbone_block(i) {
            None => true,
            Some(b) => epoch >= frozen_epochs && b >= first_open,
        })
        .collect()
}

/// Loss of one sample inside `g`. Returns the scalar total and its report.
pub fn sample_forward(
    g: &mut Graph,
    bound: &crate::model::Bound<'_>,
    sample: &TrainSample,
    cfg: &TrainConfig,
    hard: bool,
    rng: &mut RngState,
) -> Result<(crate::numerics::Var, LossReport)> {
    let mcfg = bound.config();
    let f_z = bound.features(g, &sample.template)?;
    let f_x = bound.features(g, &sample.search)?;
    let dyn_z = if cfg.no_updater {
        bound.template_base(g, f_z)
    } else {
        let f_y = bound.features(g, &sample.pseudo)?;
        bound.update_parts(g, f_z, f_y)
    };
    let (sh, sw) = mcfg.search_grid();
    let (hx, hz) = bound.encode(g, f_x, sh, sw, dyn_z, &sample.mask)?;
    let l = bound.localize(g, hz);
    let pred = estimate_bbox_graph(g, l, &sample.mask, mcfg.sigma, mcfg.bbox_scale_formula)?;
    let (l1, gl) = bbox_loss_graph(g, pred, &sample.gt);

    let coords = part_centers(sh, sw, 1.0)?.normalized_centers();
    let a = if hard {
        hard_attention_graph(g, hz, hx, cfg.tau, rng)?
    } else {
        let logits = g.matmul_nt(hz, hx);
        g.gumbel_softmax(logits, cfg.tau, false, rng)?
    };
    let att = attention_loss_graph(g, a, &coords, l, &sample.mask, cfg.atten_loss_unmasked)?;

    let lambda = cfg.effective_lambda();
    let t1 = g.scale(l1, cfg.w_l1);
    let t2 = g.scale(gl, cfg.w_giou);
    let bbox = g.add(t1, t2);
    let total = if lambda > 0.0 {
        let t3 = g.scale(att, lambda);
        g.add(bbox, t3)
    } else {
        bbox
    };
    let v = |g: &Graph, x| g.value(x).data()[0];
    let report = total_loss(v(g, l1), v(g, gl), v(g, att), lambda, cfg.w_l1, cfg.w_giou)?;
    Ok((total, report))
}

/// Largest relative gradient error of the total loss for every parameter
/// tensor, against central differences.
///
/// Every evaluation replays the same Gumbel noise (from `noise_seed`) and uses
/// the soft relaxation: the straight-through gradient is by design not the
/// derivative of the piecewise-constant hard forward pass.
pub fn check_total_loss_gradients(
    params: &ModelParams,
    sample: &TrainSample,
    cfg: &TrainConfig,
    eps: f64,
    noise_seed: u64,
) -> Result<Vec<(String, f64)>> {
    // Surface configuration or shape errors before the infallible closures below.
    {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        sample_forward(&mut g, &b, sample, cfg, false, &mut RngState::new(noise_seed))?;
        g.check()?;
    }
    let mut out = Vec::with_capacity(params.len());
    for (i, name) in params.names().iter().enumerate() {
        let r = crate::numerics::grad_check(
            |g, x| {
                let b = params.bind_with(g, i, x);
                let (total, _) = sample_forward(g, &b, sample, cfg, false, &mut RngState::new(noise_seed))
                    .expect("validated above");
                total
            },
            &params.tensors()[i],
            eps,
        )?;
        out.push((name.clone(), r.max_rel_err));
    }
    Ok(out)
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
    /// False when a non-finite value stopped the step; parameters are untouched.
    pub applied: bool,
}

/// Gradients of the batch-mean loss for every parameter (zeros for frozen ones).
/// `Ok(None)` signals a non-finite forward or backward pass.
fn batch_gradients(
    state: &mut TrainState,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<(Option<Vec<Tensor>>, LossReport)> {
    let mut sum: Vec<Tensor> = state.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut reports = Vec::with_capacity(batch.len());
    let inv = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut g = Graph::new();
        let bound = state.params.bind(&mut g, |i| trainable[i]);
        let (total, report) = match sample_forward(&mut g, &bound, sample, cfg, true, &mut state.rng) {
            Ok(r) => r,
            Err(Error::NumericInput { .. }) => return Ok((None, nan_report(cfg))),
            Err(e) => return Err(e),
        };
        reports.push(report);
        if !report.is_finite() {
            return Ok((None, report));
        }
        let grads = match g.backward(total) {
            Ok(gr) => gr,
            Err(Error::NumericInput { .. }) => return Ok((None, report)),
            Err(e) => return Err(e),
        };
        for (i, (acc, &v)) in sum.iter_mut().zip(bound.vars()).enumerate() {
            if !trainable[i] {
                continue;
            }
            if let Some(gr) = grads.get(v) {
                for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += b * inv;
                }
            }
        }
    }
    let report = LossReport::mean(&reports).expect("non-empty batch");
    if sum.iter().any(|t| !t.is_finite()) {
        return Ok((None, report));
    }
    Ok((Some(sum), report))
}

fn nan_report(cfg: &TrainConfig) -> LossReport {
    LossReport {
        l1: f64::NAN,
        giou_loss: f64::NAN,
        attention: f64::NAN,
        total: f64::NAN,
        lambda: cfg.effective_lambda(),
        w_l1: cfg.w_l1,
        w_giou: cfg.w_giou,
    }
}

/// One SGD-with-momentum update on the batch-mean total loss.
pub fn train_step(state: &mut TrainState, batch: &[TrainSample], cfg: &TrainConfig, lr: f64) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let trainable = trainable_mask(&state.params, cfg, state.epoch);
    let (grads, report) = batch_gradients(state, batch, cfg, &trainable)?;
    state.step += 1;
    let Some(mut grads) = grads else {
        return Ok(StepOutcome {
            report,
            lr,
            applied: false,
        });
    };
    if cfg.grad_clip > 0.0 {
        let norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    let mu = cfg.momentum;
    let params = state.params.tensors_mut();
    for (i, g) in grads.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let vel = state.velocity[i].data_mut();
        let p = params[i].data_mut();
        for ((p, v), g) in p.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(StepOutcome {
        report,
        lr,
        applied: true,
    })
}

/// One metrics-log line.
pub fn format_metrics(step: u64, epoch_pos: f64, o: &StepOutcome) -> String {
    let r = &o.report;
    format!(
        "step={step} epoch={epoch_pos:.4} lr={:.9} l1={:.9} giou={:.9} atten={:.9} total={:.9} status={}",
        o.lr,
        r.l1,
        r.giou_loss,
        r.attention,
        r.total,
        if o.applied { "ok" } else { "aborted" }
    )
}

/// Runs the remaining epochs of `state`, appending one metrics line per step
/// to `log`. `on_epoch` runs after each epoch (checkpointing, progress).
pub fn train(
    state: &mut TrainState,
    dataset: &[Sequence],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mcfg = state.params.config().clone();
    let steps = cfg.steps_per_epoch();
    let mut streak = 0;
    while state.epoch < cfg.epochs {
        let mut totals = Vec::with_capacity(steps);
        for k in 0..steps {
            let pos = state.epoch as f64 + k as f64 / steps as f64;
            let lr = lr_schedule(pos, cfg);
            let batch = sample_batch(dataset, cfg.batch_size, &mcfg, cfg, &mut state.rng)?;
            let out = train_step(state, &batch, cfg, lr)?;
            writeln!(log, "{}", format_metrics(state.step, pos, &out))?;
            if out.applied {
                streak = 0;
                totals.push(out.report.total);
            } else {
                streak += 1;
                if streak > MAX_ABORT_STREAK {
                    log.flush()?;
                    return Err(Error::NumericInput { op: "train_step" });
                }
            }
        }
        log.flush()?;
        if !totals.is_empty() {
            let mean = totals.iter().sum::<f64>() / totals.len() as f64;
            if state.best.map_or(true, |(_, b)| mean < b) {
                state.best = Some((state.epoch, mean));
            }
        }
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Total-loss gradient check on the toy model and a small synthetic clip.
pub fn toy_gradient_check(seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let scfg = crate::dataio::SynthConfig {
        canvas_w: 96,
        canvas_h: 96,
        size_min: 16.0,
        size_max: 20.0,
        ..Default::default()
    };
    let data = (0..2)
        .map(|i| crate::dataio::gen_synthetic(&scfg, 6, &mut RngState::with_stream(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    // Stride 8 so a 16-20 px object always covers template part centers.
    let mcfg = ModelConfig {
        backbone_blocks: 3,
        ..ModelConfig::toy()
    };
    let cfg = TrainConfig::default();
    let mut rng = RngState::with_stream(seed, 2);
    let sample = sample_batch(&data, 1, &mcfg, &cfg, &mut rng)?.remove(0);
    let params = ModelParams::init(&mcfg, &mut RngState::with_stream(seed, 3))?;
    check_total_loss_gradients(&params, &sample, &cfg, eps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthConfig};

    #[test]
    fn schedule_anchor_points() {
        let c = TrainConfig::default();
        assert!((lr_schedule(0.0, &c) - 0.001).abs() < 1e-12);
        assert!((lr_schedule(5.0, &c) - 0.005).abs() < 1e-12);
        assert!((lr_schedule(40.0, &c) - 0.0005).abs() < 1e-12);
        let left = lr_schedule(5.0 - 1e-9, &c);
        let right = lr_schedule(5.0 + 1e-9, &c);
        assert!((left - right).abs() < 1e-10);
    }

    #[test]
    fn two_frame_sequence_is_forced() {
        let mut rng = RngState::new(0);
        for _ in 0..20 {
            assert_eq!(sample_indices(2, 100, &mut rng).unwrap(), (0, 1, 0));
        }
        assert!(sample_indices(1, 100, &mut rng).is_err());
    }

    #[test]
    fn triplet_indices_respect_range() {
        let mut rng = RngState::new(3);
        for _ in 0..1000 {
            let (t, s, p) = sample_indices(200, 100, &mut rng).unwrap();
            assert!(t != s && t.abs_diff(s) <= 100 && t < 200);
            assert_eq!(p, s - 1);
        }
    }

    #[test]
    fn jitter_identity_and_clamp() {
        let mut rng = RngState::new(1);
        let gt = BBox::pixels(50.0, 40.0, 20.0, 10.0);
        assert_eq!(jitter(&gt, &mut rng, &Jitter::NONE, 40.0, 100.0, 100.0), gt);
        let edge = BBox::pixels(3.0, 3.0, 6.0, 6.0);
        let j = Jitter {
            shift: 0.5,
            scale_min: 0.8,
            scale_max: 1.25,
        };
        for _ in 0..200 {
            let b = jitter(&edge, &mut rng, &j, 12.0, 100.0, 100.0);
            assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.area() > 0.0);
        }
    }

    fn tiny_dataset() -> (Vec<Sequence>, ModelConfig) {
        let scfg = SynthConfig {
            canvas_w: 96,
            canvas_h: 96,
            size_min: 16.0,
            size_max: 20.0,
            ..SynthConfig::default()
        };
        let seqs = (0..2)
            .map(|i| gen_synthetic(&scfg, 6, &mut RngState::with_stream(9, i)).unwrap())
            .collect();
        (seqs, ModelConfig::toy())
    }

    #[test]
    fn zero_lr_leaves_params_unchanged_and_steps_are_deterministic() {
        let (data, mcfg) = tiny_dataset();
        let cfg = TrainConfig {
            freeze_backbone_frac: 0.0,
            ..TrainConfig::default()
        };
        let mut rng = RngState::new(2);
        let batch = sample_batch(&data, 2, &mcfg, &cfg, &mut rng).unwrap();

        let mut s = TrainState::init(&mcfg, 1).unwrap();
        let before = s.params.tensors().to_vec();
        let out = train_step(&mut s, &batch, &cfg, 0.0).unwrap();
        assert!(out.applied);
        assert_eq!(s.params.tensors(), &before[..]);

        let mut a = TrainState::init(&mcfg, 1).unwrap();
        let mut b = TrainState::init(&mcfg, 1).unwrap();
        let ra = train_step(&mut a, &batch, &cfg, 0.003).unwrap();
        let rb = train_step(&mut b, &batch, &cfg, 0.003).unwrap();
        assert_eq!(ra.report, rb.report);
        assert_eq!(a.params.tensors(), b.params.tensors());
        assert_ne!(a.params.tensors(), &before[..]);
    }

    #[test]
    fn frozen_backbone_is_not_updated() {
        let (data, mcfg) = tiny_dataset();
        let cfg = TrainConfig::default();
        let mut rng = RngState::new(2);
        let batch = sample_batch(&data, 1, &mcfg, &cfg, &mut rng).unwrap();
        let mut s = TrainState::init(&mcfg, 1).unwrap();
        let before = s.params.clone();
        train_step(&mut s, &batch, &cfg, 0.01).unwrap();
        for i in 0..s.params.len() {
            let same = s.params.tensors()[i] == before.tensors()[i];
            if s.params.backbone_block(i).is_some() {
                assert!(same, "{} moved", s.params.names()[i]);
            }
        }
        let mask = trainable_mask(&s.params, &cfg, 10);
        let open: Vec<usize> = (0..s.params.len())
            .filter(|&i| mask[i])
            .filter_map(|i| s.params.backbone_block(i))
            .collect();
        assert!(!open.contains(&0) && open.contains(&3));
    }

    #[test]
    fn no_attention_loss_zero_weights_attention() {
        let (data, mcfg) = tiny_dataset();
        let mut cfg = TrainConfig::default();
        cfg.set_ablation("no_attention_loss").unwrap();
        let mut rng = RngState::new(5);
        let batch = sample_batch(&data, 2, &mcfg, &cfg, &mut rng).unwrap();
        let mut s = TrainState::init(&mcfg, 1).unwrap();
        let out = train_step(&mut s, &batch, &cfg, 0.001).unwrap();
        assert_eq!(out.report.lambda, 0.0);
        assert!((out.report.total - out.report.bbox()).abs() < 1e-12);
        assert!(cfg.clone().set_ablation("bogus").is_err());
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let (data, mcfg) = tiny_dataset();
        let cfg = TrainConfig::default();
        let mut rng = RngState::new(7);
        let sample = sample_batch(&data, 1, &mcfg, &cfg, &mut rng).unwrap().remove(0);
        let params = ModelParams::init(&mcfg, &mut RngState::new(1)).unwrap();
        let errs = check_total_loss_gradients(&params, &sample, &cfg, 1e-6, 3).unwrap();
        let worst = errs.iter().cloned().fold(("".to_string(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!(worst.1 < 1e-4, "{worst:?}");
    }

    #[test]
    fn non_finite_params_abort_the_step() {
        let (data, mcfg) = tiny_dataset();
        let cfg = TrainConfig::default();
        let mut rng = RngState::new(5);
        let batch = sample_batch(&data, 1, &mcfg, &cfg, &mut rng).unwrap();
        let mut s = TrainState::init(&mcfg, 1).unwrap();
        s.params.get_mut("head.b2").unwrap().data_mut()[0] = f64::NAN;
        let before = s.params.tensors().to_vec();
        let out = train_step(&mut s, &batch, &cfg, 0.01).unwrap();
        assert!(!out.applied);
        let same = s.params.tensors().iter().zip(&before).all(|(a, b)| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        assert!(same);
    }
}
