//! Success/precision curves, AUC, AO and SR over tracking results.
//!
//! Success and SR use a strict `IoU > t`; precision counts center errors
//! `<= t` pixels. The initialization frame is never scored.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::{read_boxes, read_manifest, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const SUCCESS_STEPS: usize = 50;
pub const PRECISION_MAX_PX: usize = 50;
pub const PRECISION_REPORT_PX: usize = 20;

/// Frame-wise IoU of two box lists of equal length (all frames).
pub fn overlap_series(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted boxes for {} ground-truth boxes", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect())
}

/// Frame-wise center distances in pixels.
pub fn center_errors(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted boxes for {} ground-truth boxes", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect())
}

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect()
}

fn fraction(xs: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    xs.iter().filter(|&&x| pred(x)).count() as f64 / xs.len() as f64
}

/// Fraction of frames with `IoU > t` at each of the 51 thresholds, and the
/// mean of that curve.
pub fn success_auc(ious: &[f64]) -> Result<(Vec<f64>, f64)> {
    if ious.is_empty() {
        return Err(Error::Data("no scored frames".into()));
    }
    let curve: Vec<f64> = success_thresholds().iter().map(|&t| fraction(ious, |v| v > t)).collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

/// Fraction of frames with center error `<= t` px for `t = 0..=50`.
pub fn precision_curve(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Data("no scored frames".into()));
    }
    Ok((0..=PRECISION_MAX_PX).map(|t| fraction(errors, |e| e <= t as f64)).collect())
}

/// Average overlap, `SR@0.5` and `SR@0.75`.
pub fn ao_sr(ious: &[f64]) -> Result<(f64, f64, f64)> {
    if ious.is_empty() {
        return Err(Error::Data("no scored frames".into()));
    }
    let ao = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((ao, fraction(ious, |v| v > 0.5), fraction(ious, |v| v > 0.75)))
}

/// Metrics of one sequence or of a frame-pooled aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub frames: usize,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision: Vec<f64>,
    pub precision20: f64,
}

impl Metrics {
    pub fn from_scored(ious: &[f64], errors: &[f64]) -> Result<Self> {
        let (ao, sr50, sr75) = ao_sr(ious)?;
        let (success, auc) = success_auc(ious)?;
        let precision = precision_curve(errors)?;
        Ok(Self {
            frames: ious.len(),
            ao,
            sr50,
            sr75,
            auc,
            precision20: precision[PRECISION_REPORT_PX],
            success,
            precision,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    /// IoU of the scored frames (initialization frame dropped).
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub metrics: Metrics,
}

impl SequenceReport {
    pub fn new(name: impl Into<String>, pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let name = name.into();
        let ious = overlap_series(pred, gt)?;
        let errs = center_errors(pred, gt)?;
        if ious.len() < 2 {
            return Err(Error::Data(format!("sequence {name} has no frames after the first")));
        }
        let (ious, errs) = (ious[1..].to_vec(), errs[1..].to_vec());
        let metrics = Metrics::from_scored(&ious, &errs)?;
        Ok(Self {
            name,
            ious,
            center_errors: errs,
            metrics,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by name.
    pub sequences: Vec<SequenceReport>,
    /// Frame-pooled over all sequences.
    pub overall: Metrics,
}

impl EvalReport {
    pub fn new(mut sequences: Vec<SequenceReport>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        sequences.sort_by(|a, b| a.name.cmp(&b.name));
        let ious: Vec<f64> = sequences.iter().flat_map(|s| s.ious.iter().copied()).collect();
        let errs: Vec<f64> = sequences.iter().flat_map(|s| s.center_errors.iter().copied()).collect();
        let overall = Metrics::from_scored(&ious, &errs)?;
        Ok(Self { sequences, overall })
    }

    /// `key = value` lines: an `[overall]` section then one per sequence.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let section = |s: &mut String, title: &str, m: &Metrics| {
            let _ = writeln!(s, "[{title}]");
            let _ = writeln!(s, "frames = {}", m.frames);
            let _ = writeln!(s, "ao = {:.6}", m.ao);
            let _ = writeln!(s, "sr50 = {:.6}", m.sr50);
            let _ = writeln!(s, "sr75 = {:.6}", m.sr75);
            let _ = writeln!(s, "success_auc = {:.6}", m.auc);
            let _ = writeln!(s, "precision20 = {:.6}", m.precision20);
        };
        section(&mut s, "overall", &self.overall);
        for q in &self.sequences {
            section(&mut s, &format!("sequence {}", q.name), &q.metrics);
        }
        s
    }

    /// Per-sequence summary table.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("sequence,frames,ao,sr50,sr75,success_auc,precision20\n");
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.frames, m.ao, m.sr50, m.sr75, m.auc, m.precision20
            );
        };
        for q in &self.sequences {
            row(&q.name, &q.metrics);
        }
        row("overall", &self.overall);
        s
    }

    fn curve_csv(&self, head: &str, xs: &[f64], pick: fn(&Metrics) -> &[f64]) -> String {
        let mut s = String::from(head);
        for q in &self.sequences {
            s.push(',');
            s.push_str(&q.name);
        }
        s.push_str(",overall\n");
        for (i, x) in xs.iter().enumerate() {
            let _ = write!(s, "{x}");
            for q in &self.sequences {
                let _ = write!(s, ",{:.6}", pick(&q.metrics)[i]);
            }
            let _ = writeln!(s, ",{:.6}", pick(&self.overall)[i]);
        }
        s
    }

    pub fn success_csv(&self) -> String {
        self.curve_csv("threshold", &success_thresholds(), |m| &m.success)
    }

    pub fn precision_csv(&self) -> String {
        let xs: Vec<f64> = (0..=PRECISION_MAX_PX).map(|t| t as f64).collect();
        self.curve_csv("pixels", &xs, |m| &m.precision)
    }

    /// Writes `report.txt`, `summary.csv`, `success.csv` and `precision.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("success.csv"), self.success_csv())?;
        std::fs::write(dir.join("precision.csv"), self.precision_csv())?;
        Ok(())
    }
}

/// Result file of a sequence inside a results directory.
pub fn result_path(results: &Path, name: &str) -> std::path::PathBuf {
    results.join(format!("{name}.txt"))
}

/// Scores every manifest sequence against `results/<name>.txt`. All missing
/// result files are named in the error.
pub fn evaluate_dir(results: &Path, manifest: &Path) -> Result<EvalReport> {
    let dirs = read_manifest(manifest)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no sequences", manifest.display())));
    }
    let name_of = |d: &Path| d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let missing: Vec<String> = dirs
        .iter()
        .map(|d| name_of(d))
        .filter(|n| !result_path(results, n).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing result files for: {}", missing.join(", "))));
    }
    let reports = dirs
        .iter()
        .map(|d| {
            let name = name_of(d);
            let gt = read_boxes(&d.join(crate::dataio::GROUNDTRUTH_FILE))?;
            let pred = read_boxes(&result_path(results, &name))?;
            SequenceReport::new(name, &pred, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(reports)
}

/// Scores in-memory predictions against sequences.
pub fn evaluate(seqs: &[Sequence], preds: &[Vec<BBox>]) -> Result<EvalReport> {
    if seqs.len() != preds.len() {
        return Err(Error::Data("one prediction list per sequence required".into()));
    }
    let reports = seqs
        .iter()
        .zip(preds)
        .map(|(s, p)| SequenceReport::new(s.name.clone(), p, &s.gt))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(reports)
}
