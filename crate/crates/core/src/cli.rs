//! Command-line front end: train, track, eval, gradcheck, synth and overlay.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{apply_file, apply_pairs, parse_pairs, render, KvConfig};
use crate::dataio::{gen_dataset, load_sequence, read_boxes, read_manifest, save_dataset, write_boxes, Sequence, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dir, result_path};
use crate::geometry::BBox;
use crate::model::ModelConfig;
use crate::numerics::primitive_suite;
use crate::tracking::{Tracker, TrackOptions};
use crate::training::{toy_gradient_check, train, TrainConfig, TrainState};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PARTTRACK_OUT";

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const TOTAL_LOSS_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "parttrack", version, about = "Dynamic part-based visual tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Track sequences with a trained checkpoint.
    Track(TrackArgs),
    /// Score result files against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Draw boxes from a result file onto a sequence.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory (default: $PARTTRACK_OUT/<command> or runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat key = value file with model and training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest listing sequence directories.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = ["no_attention_loss", "no_updater"])]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Optional model config the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequence directory; may be repeated.
    #[arg(long = "seq", required_unless_present = "manifest")]
    pub seqs: Vec<PathBuf>,
    #[arg(long, conflicts_with = "seqs")]
    pub manifest: Option<PathBuf>,
    /// Bypass the part updater.
    #[arg(long)]
    pub no_updater: bool,
    /// Also write per-frame images with the box and part centers.
    #[arg(long)]
    pub overlay: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also check the total loss of the toy model.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Flat key = value file with synthesis keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub seq: PathBuf,
    /// Result file with one `x,y,w,h` line per frame.
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::Parameter(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Image(_) | Error::Sampling(_) | Error::Init(_) => 3,
        Error::NumericInput { .. } => 4,
        _ => 1,
    }
}

fn out_dir(arg: &OutArg, command: &str) -> PathBuf {
    arg.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn apply_sources(targets: &mut [&mut dyn KvConfig], file: Option<&Path>, overrides: &[String]) -> Result<()> {
    if let Some(f) = file {
        apply_file(targets, f)?;
    }
    apply_pairs(targets, &parse_pairs(&overrides.join("\n"))?)
}

fn load_manifest(path: &Path) -> Result<Vec<Sequence>> {
    let dirs = read_manifest(path)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no sequences", path.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Track(a) => run_track(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a),
        Command::Overlay(a) => run_overlay(a),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut mcfg = ModelConfig::default();
    let mut tcfg = TrainConfig::default();
    apply_sources(&mut [&mut mcfg, &mut tcfg], a.config.as_deref(), &a.overrides)?;
    if let Some(ab) = &a.ablation {
        tcfg.set_ablation(ab)?;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    mcfg.validate()?;
    tcfg.validate()?;
    let data = load_manifest(&a.manifest)?;

    let out = out_dir(&a.out, "train");
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), render(&[&mcfg, &tcfg]))?;

    let mut state = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load_matching(p, &mcfg)?;
            ck.into_state()
        }
        None => TrainState::init(&mcfg, tcfg.seed)?,
    };
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.log"))?;
    let mut log = BufWriter::new(log_file);
    train(&mut state, &data, &tcfg, &mut log, |s| {
        let ck = Checkpoint::from_state(s, &tcfg);
        checkpoint::save(&out.join(format!("epoch_{:03}.ckpt", s.epoch)), &ck)?;
        if s.best.map(|(e, _)| e + 1) == Some(s.epoch) {
            checkpoint::save(&out.join("best.ckpt"), &ck)?;
        }
        eprintln!("epoch {}/{} done", s.epoch, tcfg.epochs);
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&out.join("final.ckpt"), &Checkpoint::from_state(&state, &tcfg))?;
    if let Some((e, l)) = state.best {
        println!("best epoch {e} mean loss {l:.6}");
    }
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn run_track(a: TrackArgs) -> Result<()> {
    let ck = match &a.config {
        Some(c) => {
            let mut mcfg = ModelConfig::default();
            apply_file(&mut [&mut mcfg], c)?;
            checkpoint::load_matching(&a.ckpt, &mcfg)?
        }
        None => checkpoint::load(&a.ckpt)?,
    };
    let dirs = match &a.manifest {
        Some(m) => read_manifest(m)?,
        None => a.seqs.clone(),
    };
    let out = out_dir(&a.out, "track");
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), render(&[&ck.model]))?;
    let opts = TrackOptions { no_updater: a.no_updater };
    for d in &dirs {
        let seq = load_sequence(d)?;
        let (first, rest) = seq
            .frames
            .split_first()
            .ok_or_else(|| Error::Data(format!("sequence {} has no frames", seq.name)))?;
        let mut tracker = Tracker::init(first, &seq.gt[0], &ck.params, opts)?;
        let mut boxes = vec![seq.gt[0]];
        let mut parts = vec![Vec::new()];
        let mut coasted = 0;
        for f in rest {
            let r = tracker.track(f)?;
            coasted += r.coasted as usize;
            boxes.push(r.bbox);
            parts.push(r.parts);
        }
        write_boxes(&result_path(&out, &seq.name), &boxes)?;
        if a.overlay {
            let dir = out.join("overlay").join(&seq.name);
            fs::create_dir_all(&dir)?;
            for (i, f) in seq.frames.iter().enumerate() {
                let img = draw_overlay(f, &boxes[i], &parts[i]);
                img.save(dir.join(format!("{i:04}.png")))?;
            }
        }
        println!("{}: {} frames, {} coasted", seq.name, seq.len(), coasted);
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dir(&a.results, &a.manifest)?;
    let out = out_dir(&a.out, "eval");
    report.write(&out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut ok = true;
    for c in primitive_suite(a.trials, a.seed, a.eps)? {
        let pass = c.max_rel_err < PRIMITIVE_TOL;
        ok &= pass;
        println!("{:<16} trials={} max_rel_err={:.3e} {}", c.name, c.trials, c.max_rel_err, verdict(pass));
    }
    if a.toy {
        let errs = toy_gradient_check(a.seed, a.eps)?;
        let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        let pass = worst < TOTAL_LOSS_TOL;
        ok &= pass;
        println!("{:<16} params={} max_rel_err={:.3e} {}", "total_loss", errs.len(), worst, verdict(pass));
    }
    if ok {
        Ok(())
    } else {
        Err(Error::NumericInput { op: "gradcheck" })
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAIL"
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut scfg = SynthConfig::default();
    apply_sources(&mut [&mut scfg], a.config.as_deref(), &a.overrides)?;
    scfg.validate()?;
    let out = out_dir(&a.out, "synth");
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), render(&[&scfg]))?;
    let seqs = gen_dataset(&scfg)?;
    let manifest = save_dataset(&seqs, &out)?;
    println!("wrote {} sequences; manifest {}", seqs.len(), manifest.display());
    Ok(())
}

fn run_overlay(a: OverlayArgs) -> Result<()> {
    let seq = load_sequence(&a.seq)?;
    let boxes = read_boxes(&a.results)?;
    if boxes.len() != seq.len() {
        return Err(Error::Data(format!(
            "{} has {} boxes for {} frames",
            a.results.display(),
            boxes.len(),
            seq.len()
        )));
    }
    let out = out_dir(&a.out, "overlay").join(&seq.name);
    fs::create_dir_all(&out)?;
    for (i, (f, b)) in seq.frames.iter().zip(&boxes).enumerate() {
        draw_overlay(f, b, &[]).save(out.join(format!("{i:04}.png")))?;
    }
    println!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

const BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const DOT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Copy of `frame` with a 1px box outline and a 3x3 dot per part center.
pub fn draw_overlay(frame: &RgbImage, b: &BBox, parts: &[[f64; 2]]) -> RgbImage {
    let mut img = frame.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let put = |img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    if b.is_finite() {
        let (x1, y1) = (b.x1().round() as i64, b.y1().round() as i64);
        let (x2, y2) = ((b.x2().round() as i64 - 1).max(x1), (b.y2().round() as i64 - 1).max(y1));
        for x in x1..=x2 {
            put(&mut img, x, y1, BOX_COLOR);
            put(&mut img, x, y2, BOX_COLOR);
        }
        for y in y1..=y2 {
            put(&mut img, x1, y, BOX_COLOR);
            put(&mut img, x2, y, BOX_COLOR);
        }
    }
    for p in parts.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
        let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                put(&mut img, cx + dx, cy + dy, DOT_COLOR);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let cfg = exit_code(&Error::Config("x".into()));
        let data = exit_code(&Error::Data("x".into()));
        let num = exit_code(&Error::NumericInput { op: "x" });
        assert_eq!((cfg, data, num), (2, 3, 4));
        assert_eq!(exit_code(&Error::Estimation), 1);
    }

    #[test]
    fn overlay_draws_box_and_dots_inside_the_frame() {
        let f = RgbImage::new(20, 20);
        let img = draw_overlay(&f, &BBox::pixels(7.0, 7.0, 10.0, 8.0), &[[15.0, 15.0], [-5.0, 0.0]]);
        assert_eq!(*img.get_pixel(2, 3), BOX_COLOR);
        assert_eq!(*img.get_pixel(11, 10), BOX_COLOR);
        assert_eq!(*img.get_pixel(6, 6), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(16, 14), DOT_COLOR);
    }

    #[test]
    fn cli_parses_documented_flags() {
        let c = Cli::try_parse_from(["parttrack", "train", "--manifest", "m", "--ablation", "no_updater", "--seed", "3"]).unwrap();
        assert!(matches!(c.command, Command::Train(ref t) if t.seed == Some(3)));
        assert!(Cli::try_parse_from(["parttrack", "train", "--manifest", "m", "--ablation", "bogus"]).is_err());
        assert!(Cli::try_parse_from(["parttrack", "track", "--ckpt", "c"]).is_err());
        assert!(Cli::try_parse_from(["parttrack", "gradcheck", "--toy"]).is_ok());
    }
}
