//! FROC evaluation of lesion detections.
//!
//! Predictions are matched greedily to ground truth per key-slice image, then a
//! score threshold is swept over the distinct prediction scores. Sensitivity at
//! an operating point of `k` false positives per image is the sensitivity at the
//! most permissive threshold whose mean FP count per test image is still at or
//! below `k`.
//!
//! Counting rules:
//! - the FP denominator is the number of test key-slice images (images carrying
//!   at least one ground-truth lesion);
//! - every unmatched prediction counts as a false positive in every class and
//!   size slice; predictions matched to a lesion outside the slice are ignored;
//! - sensitivity tables use class-aware matching by default, the confusion
//!   matrix always uses localisation-only matching.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::geometry::{iou, BodyPartLabel, BoundingBox, SizeStratum};
use crate::ingestion::LesionAnnotation;

pub const FP_RULE: &str =
    "every unmatched prediction on a test image is a false positive for every class and size slice";
pub const FP_DENOMINATOR: &str = "number of test key-slice images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fp_per_image: Vec<f64>,
    pub class_aware_matching: bool,
    pub size_strata_enabled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            fp_per_image: vec![4.0],
            class_aware_matching: true,
            size_strata_enabled: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "evaluation IoU threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if self.fp_per_image.is_empty() {
            return Err(Error::Config("at least one FP operating point is required".into()));
        }
        if let Some(bad) = self.fp_per_image.iter().find(|k| !(**k > 0.0) || !k.is_finite()) {
            return Err(Error::Config(format!("FP operating point {bad} must be positive")));
        }
        Ok(())
    }
}

/// Ground-truth facts the evaluator needs about one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub label: Option<BodyPartLabel>,
    pub stratum: SizeStratum,
}

impl From<&LesionAnnotation> for GroundTruth {
    fn from(a: &LesionAnnotation) -> Self {
        Self {
            bbox: a.bbox,
            label: a.label,
            stratum: a.stratum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatch {
    pub prediction: Prediction,
    /// Index into [`MatchResult::gts`].
    pub gt: Option<usize>,
    pub iou: f64,
}

/// Greedy matching outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub gts: Vec<GroundTruth>,
    /// In matching order: descending score.
    pub matches: Vec<PredictionMatch>,
    pub unmatched_gts: Vec<usize>,
}

/// Descending score, then box, label and source for a total order.
fn match_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then(a.label.cmp(&b.label))
        .then_with(|| a.source_id.cmp(&b.source_id))
}

pub fn match_image(gts: &[LesionAnnotation], preds: &[Prediction], cfg: &EvalConfig) -> MatchResult {
    let gts: Vec<GroundTruth> = gts.iter().map(GroundTruth::from).collect();
    match_ground_truth(gts, preds, cfg.iou_threshold, cfg.class_aware_matching)
}

/// Each prediction, in descending score, takes the still-unmatched ground truth
/// it overlaps most (IoU >= threshold, equal labels when `class_aware`).
pub fn match_ground_truth(
    gts: Vec<GroundTruth>,
    preds: &[Prediction],
    iou_threshold: f64,
    class_aware: bool,
) -> MatchResult {
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| match_order(a, b));
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(order.len());
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gts.iter().enumerate() {
            if taken[i] || (class_aware && g.label != Some(p.label)) {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            taken[i] = true;
        }
        matches.push(PredictionMatch {
            prediction: p.clone(),
            gt: best.map(|(i, _)| i),
            iou: best.map_or(0.0, |(_, v)| v),
        });
    }
    let unmatched_gts = (0..gts.len()).filter(|i| !taken[*i]).collect();
    MatchResult {
        gts,
        matches,
        unmatched_gts,
    }
}

/// Which ground truth a sensitivity is computed over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GtFilter {
    pub label: Option<BodyPartLabel>,
    pub stratum: Option<SizeStratum>,
}

impl GtFilter {
    pub const ALL: GtFilter = GtFilter {
        label: None,
        stratum: None,
    };

    fn accepts(&self, g: &GroundTruth) -> bool {
        self.label.is_none_or(|l| g.label == Some(l)) && self.stratum.is_none_or(|s| g.stratum == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fp_per_image: f64,
    /// `None` when the slice has no ground truth.
    pub sensitivity: Option<f64>,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Score threshold realising this point; `None` when no threshold qualifies.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub num_images: usize,
    pub num_gt: usize,
    pub curve: Vec<FrocPoint>,
    pub operating_points: Vec<OperatingPoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Fp,
    Tp(GroundTruth),
}

/// All scored outcomes of one or more images, sorted by descending score.
struct Events {
    num_images: usize,
    gts: Vec<GroundTruth>,
    events: Vec<(f64, Outcome)>,
}

impl Events {
    fn new<'a>(images: impl IntoIterator<Item = &'a MatchResult>) -> Self {
        let mut num_images = 0;
        let mut gts = Vec::new();
        let mut events = Vec::new();
        for img in images {
            num_images += 1;
            gts.extend_from_slice(&img.gts);
            for m in &img.matches {
                let outcome = match m.gt {
                    Some(i) => Outcome::Tp(img.gts[i]),
                    None => Outcome::Fp,
                };
                events.push((m.prediction.score, outcome));
            }
        }
        events.sort_by(|a, b| b.0.total_cmp(&a.0));
        Self {
            num_images,
            gts,
            events,
        }
    }

    fn sweep(&self, filter: GtFilter, fp_points: &[f64]) -> Result<FrocResult> {
        if self.num_images == 0 {
            return Err(Error::EmptyEval);
        }
        let n_img = self.num_images as f64;
        let num_gt = self.gts.iter().filter(|g| filter.accepts(g)).count();
        let sens = |tp: usize| if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };

        // (threshold, cumulative fp, cumulative tp) per distinct score
        let mut steps: Vec<(f64, usize, usize)> = Vec::new();
        let (mut fp, mut tp) = (0usize, 0usize);
        let mut i = 0;
        while i < self.events.len() {
            let score = self.events[i].0;
            let mut touched = false;
            while i < self.events.len() && self.events[i].0 == score {
                match self.events[i].1 {
                    Outcome::Fp => {
                        fp += 1;
                        touched = true;
                    }
                    Outcome::Tp(g) if filter.accepts(&g) => {
                        tp += 1;
                        touched = true;
                    }
                    Outcome::Tp(_) => {}
                }
                i += 1;
            }
            if touched {
                steps.push((score, fp, tp));
            }
        }

        let curve = steps
            .iter()
            .map(|&(threshold, fp, tp)| FrocPoint {
                threshold,
                fp_per_image: fp as f64 / n_img,
                sensitivity: sens(tp),
            })
            .collect();

        let mut warnings = Vec::new();
        let operating_points = fp_points
            .iter()
            .map(|&k| {
                let chosen = steps.iter().take_while(|(_, fp, _)| *fp as f64 / n_img <= k).last();
                if chosen.is_none() && !steps.is_empty() {
                    warnings.push(format!(
                        "strictest threshold already exceeds {k} FP/image; sensitivity reported as 0"
                    ));
                }
                let tp = chosen.map_or(0, |s| s.2);
                OperatingPoint {
                    fp_per_image: k,
                    sensitivity: (num_gt > 0).then(|| sens(tp)),
                    tp,
                    fn_: num_gt - tp,
                    threshold: chosen.map(|s| s.0),
                }
            })
            .collect();

        Ok(FrocResult {
            num_images: self.num_images,
            num_gt,
            curve,
            operating_points,
            warnings,
        })
    }
}

/// FROC curve and operating-point sensitivities over a set of matched images.
pub fn froc(images: &[MatchResult], filter: GtFilter, fp_points: &[f64]) -> Result<FrocResult> {
    Events::new(images).sweep(filter, fp_points)
}

/// 8x8 counts, rows = ground-truth label, columns = predicted label.
pub type ConfusionMatrix = [[u64; 8]; 8];

/// Count localised pairs whose prediction scores at least `min_score`.
/// Matches should come from localisation-only matching.
pub fn confusion_matrix(images: &[MatchResult], min_score: Option<f64>) -> ConfusionMatrix {
    let mut cm = [[0u64; 8]; 8];
    let Some(min_score) = min_score else {
        return cm;
    };
    for img in images {
        for m in &img.matches {
            if let (Some(i), true) = (m.gt, m.prediction.score >= min_score) {
                if let Some(gl) = img.gts[i].label {
                    cm[gl.index()][m.prediction.label.index()] += 1;
                }
            }
        }
    }
    cm
}

/// Ground truth and predictions of one cross-validation fold.
#[derive(Debug, Clone, Copy)]
pub struct FoldInput<'a> {
    pub name: &'a str,
    pub gts: &'a [LesionAnnotation],
    pub preds: &'a [Prediction],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sensitivity: Option<f64>,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// class name -> stratum name -> FP point -> cell
pub type SensitivityTable = IndexMap<String, IndexMap<String, IndexMap<String, Cell>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub num_images: usize,
    pub num_gt: usize,
    pub dropped_predictions: usize,
    pub per_class: SensitivityTable,
    pub froc_curve: Vec<FrocPoint>,
    pub confusion: ConfusionMatrix,
    pub confusion_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    #[serde(flatten)]
    pub eval: EvalConfig,
    pub sensitivity_matching: String,
    pub confusion_matching: String,
    pub confusion_fp_point: f64,
    pub fp_rule: String,
    pub fp_denominator: String,
    pub fold_averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportHeader,
    /// Cross-fold mean sensitivities with TP/FN summed over folds.
    pub per_class: SensitivityTable,
    /// Curve over all folds' images pooled.
    pub froc_curve: Vec<FrocPoint>,
    /// Summed over folds.
    pub confusion: ConfusionMatrix,
    pub folds: Vec<FoldReport>,
    pub warnings: Vec<String>,
}

pub const ALL_KEY: &str = "All";

pub fn fp_key(k: f64) -> String {
    format!("{k}")
}

fn class_slices() -> Vec<(String, Option<BodyPartLabel>)> {
    BodyPartLabel::ALL
        .iter()
        .map(|l| (l.name().to_string(), Some(*l)))
        .chain(std::iter::once((ALL_KEY.to_string(), None)))
        .collect()
}

fn stratum_slices(cfg: &EvalConfig) -> Vec<(String, Option<SizeStratum>)> {
    let mut v = Vec::new();
    if cfg.size_strata_enabled {
        v.push((SizeStratum::Large.name().to_string(), Some(SizeStratum::Large)));
        v.push((SizeStratum::Small.name().to_string(), Some(SizeStratum::Small)));
    }
    v.push((ALL_KEY.to_string(), None));
    v
}

/// Match every test image of a fold. Predictions on images without ground truth
/// are not test images and are dropped; the count is returned.
fn match_fold(
    fold: &FoldInput<'_>,
    iou_threshold: f64,
    class_aware: bool,
) -> (Vec<MatchResult>, usize) {
    let mut images: BTreeMap<String, (Vec<GroundTruth>, Vec<Prediction>)> = BTreeMap::new();
    for a in fold.gts {
        images.entry(a.image_key()).or_default().0.push(GroundTruth::from(a));
    }
    let mut dropped = 0;
    for p in fold.preds {
        match images.get_mut(&p.image_key) {
            Some(entry) => entry.1.push(p.clone()),
            None => dropped += 1,
        }
    }
    let groups: Vec<_> = images.into_values().collect();
    let matched = groups
        .into_par_iter()
        .map(|(gts, preds)| match_ground_truth(gts, &preds, iou_threshold, class_aware))
        .collect();
    (matched, dropped)
}

struct FoldOutcome {
    report: FoldReport,
    aware: Vec<MatchResult>,
    warnings: Vec<String>,
}

fn evaluate_fold(fold: &FoldInput<'_>, cfg: &EvalConfig) -> Result<FoldOutcome> {
    let (aware, dropped) = match_fold(fold, cfg.iou_threshold, cfg.class_aware_matching);
    let events = Events::new(&aware);
    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(format!(
            "fold {}: {dropped} predictions on images without ground truth were ignored",
            fold.name
        ));
    }

    let mut per_class = SensitivityTable::new();
    for (cname, label) in class_slices() {
        let mut strata = IndexMap::new();
        for (sname, stratum) in stratum_slices(cfg) {
            let res = events.sweep(GtFilter { label, stratum }, &cfg.fp_per_image)?;
            if label.is_none() && stratum.is_none() {
                warnings.extend(res.warnings.iter().map(|w| format!("fold {}: {w}", fold.name)));
            }
            let cells = res
                .operating_points
                .iter()
                .map(|op| {
                    (
                        fp_key(op.fp_per_image),
                        Cell {
                            sensitivity: op.sensitivity,
                            tp: op.tp,
                            fn_: op.fn_,
                        },
                    )
                })
                .collect();
            strata.insert(sname, cells);
        }
        per_class.insert(cname, strata);
    }
    let overall = events.sweep(GtFilter::ALL, &cfg.fp_per_image)?;

    let (agnostic, _) = match_fold(fold, cfg.iou_threshold, false);
    let confusion_point = confusion_fp_point(cfg);
    let threshold = froc(&agnostic, GtFilter::ALL, &[confusion_point])?.operating_points[0].threshold;
    let confusion = confusion_matrix(&agnostic, threshold);

    Ok(FoldOutcome {
        report: FoldReport {
            name: fold.name.to_string(),
            num_images: overall.num_images,
            num_gt: overall.num_gt,
            dropped_predictions: dropped,
            per_class,
            froc_curve: overall.curve,
            confusion,
            confusion_threshold: threshold,
        },
        aware,
        warnings,
    })
}

/// The confusion matrix is read at the most permissive configured FP point.
fn confusion_fp_point(cfg: &EvalConfig) -> f64 {
    cfg.fp_per_image.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-fold and cross-fold sensitivities by class, size stratum and FP point.
pub fn stratified_report(folds: &[FoldInput<'_>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if folds.is_empty() {
        return Err(Error::EmptyEval);
    }
    let outcomes: Vec<FoldOutcome> = folds.iter().map(|f| evaluate_fold(f, cfg)).collect::<Result<_>>()?;

    let mut per_class = SensitivityTable::new();
    for (cname, strata) in &outcomes[0].report.per_class {
        let mut s_out = IndexMap::new();
        for (sname, points) in strata {
            let mut p_out = IndexMap::new();
            for fp in points.keys() {
                let cells: Vec<&Cell> = outcomes
                    .iter()
                    .map(|o| &o.report.per_class[cname][sname][fp])
                    .collect();
                let present: Vec<f64> = cells.iter().filter_map(|c| c.sensitivity).collect();
                p_out.insert(
                    fp.clone(),
                    Cell {
                        sensitivity: (!present.is_empty())
                            .then(|| present.iter().sum::<f64>() / present.len() as f64),
                        tp: cells.iter().map(|c| c.tp).sum(),
                        fn_: cells.iter().map(|c| c.fn_).sum(),
                    },
                );
            }
            s_out.insert(sname.clone(), p_out);
        }
        per_class.insert(cname.clone(), s_out);
    }

    let froc_curve = if outcomes.len() == 1 {
        outcomes[0].report.froc_curve.clone()
    } else {
        Events::new(outcomes.iter().flat_map(|o| o.aware.iter()))
            .sweep(GtFilter::ALL, &cfg.fp_per_image)?
            .curve
    };

    let mut confusion = [[0u64; 8]; 8];
    for o in &outcomes {
        for (row, src) in confusion.iter_mut().zip(&o.report.confusion) {
            for (c, s) in row.iter_mut().zip(src) {
                *c += s;
            }
        }
    }

    let warnings = outcomes.iter().flat_map(|o| o.warnings.iter().cloned()).collect();
    Ok(EvalReport {
        config: ReportHeader {
            eval: cfg.clone(),
            sensitivity_matching: if cfg.class_aware_matching {
                "class-aware".into()
            } else {
                "localization-only".into()
            },
            confusion_matching: "localization-only".into(),
            confusion_fp_point: confusion_fp_point(cfg),
            fp_rule: FP_RULE.into(),
            fp_denominator: FP_DENOMINATOR.into(),
            fold_averaging: "unweighted mean of per-fold sensitivities; tp/fn summed".into(),
        },
        per_class,
        froc_curve,
        confusion,
        folds: outcomes.into_iter().map(|o| o.report).collect(),
        warnings,
    })
}

/// Plain-text tables: one row per (stratum, FP point), one column per class,
/// followed by the confusion matrix.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let cfg = &report.config;
    let _ = writeln!(
        out,
        "Sensitivity (%) at IoU {} ({} matching), mean over {} fold(s)",
        cfg.eval.iou_threshold,
        cfg.sensitivity_matching,
        report.folds.len()
    );
    let _ = writeln!(out, "FP rule: {}", cfg.fp_rule);
    let classes: Vec<&String> = report.per_class.keys().collect();
    let widths: Vec<usize> = classes.iter().map(|c| c.len().max(6)).collect();
    let _ = write!(out, "{:<20}", "Stratum @ FP/img");
    for (c, w) in classes.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    let first = &report.per_class[0];
    for (sname, points) in first {
        for fp in points.keys() {
            let _ = write!(out, "{:<20}", format!("{sname} @ {fp}"));
            for (c, w) in classes.iter().zip(&widths) {
                let cell = &report.per_class[*c][sname][fp];
                let v = cell
                    .sensitivity
                    .map_or_else(|| "-".to_string(), |s| format!("{:.1}", s * 100.0));
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
    }
    let _ = writeln!(
        out,
        "\nConfusion matrix ({} matching, at {} FP/img; rows = ground truth, columns = prediction)",
        cfg.confusion_matching, cfg.confusion_fp_point
    );
    let _ = write!(out, "{:<14}", "");
    for l in BodyPartLabel::ALL {
        let _ = write!(out, " {:>6}", l.code());
    }
    out.push('\n');
    for (l, row) in BodyPartLabel::ALL.iter().zip(&report.confusion) {
        let _ = write!(out, "{:<14}", format!("{} {}", l.code(), l.name()));
        for v in row {
            let _ = write!(out, " {v:>6}");
        }
        out.push('\n');
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
