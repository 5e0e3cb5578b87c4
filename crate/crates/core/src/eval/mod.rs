//! Detection and identification metrics.
//!
//! Detection is scored against all 32 annotated boxes of every scene, present
//! or missing, since the cascade predicts every slot. Identification is
//! scored against present teeth only. Without confidence scores the AP is an
//! IoU-threshold sweep: TP/FP/FN are pooled over the dataset at thresholds
//! `0.00, 0.05, ..., 1.00`.

mod render;

pub use render::{render_confusion, render_overlay};

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::ToothAnnotation;
use crate::geometry::{iou, BBox, ToothId, TEETH};
use crate::pipeline::DetectionResult;

/// Number of points on the threshold grid.
pub const THRESHOLDS: usize = 21;

/// The IoU threshold at grid position `i`.
pub fn threshold(i: usize) -> f64 {
    i as f64 / (THRESHOLDS - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pair {
    pub gt: usize,
    pub det: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<Pair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_det: Vec<usize>,
}

impl MatchResult {
    pub fn detections(&self) -> usize {
        self.pairs.len() + self.unmatched_det.len()
    }

    pub fn ground_truths(&self) -> usize {
        self.pairs.len() + self.unmatched_gt.len()
    }
}

/// Each detection goes to the ground-truth box it overlaps most (lower index
/// on ties); each ground truth then keeps its best detection (lower index on
/// ties). Zero overlap never matches.
pub fn match_boxes(detections: &[BBox], ground_truth: &[BBox]) -> MatchResult {
    let mut best: Vec<Option<Pair>> = vec![None; ground_truth.len()];
    let mut unmatched_det = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        let mut target: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            let v = iou(det, gt);
            if v > 0.0 && target.is_none_or(|(_, t)| v > t) {
                target = Some((g, v));
            }
        }
        let Some((g, v)) = target else {
            unmatched_det.push(d);
            continue;
        };
        match best[g] {
            Some(p) if p.iou >= v => unmatched_det.push(d),
            Some(p) => {
                unmatched_det.push(p.det);
                best[g] = Some(Pair { gt: g, det: d, iou: v });
            }
            None => best[g] = Some(Pair { gt: g, det: d, iou: v }),
        }
    }
    unmatched_det.sort_unstable();
    let pairs: Vec<Pair> = best.iter().flatten().copied().collect();
    let unmatched_gt = best.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(g, _)| g).collect();
    MatchResult { pairs, unmatched_gt, unmatched_det }
}

/// Counts at one threshold. A ratio with an empty denominator is 1 and sets
/// `empty_denominator`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub empty_denominator: bool,
}

impl PrecisionRecall {
    fn from_counts(tp: usize, detections: usize, ground_truths: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            precision: ratio(tp, detections),
            recall: ratio(tp, ground_truths),
            tp,
            fp: detections - tp,
            fn_: ground_truths - tp,
            empty_denominator: detections == 0 || ground_truths == 0,
        }
    }

    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }
}

fn true_positives(m: &MatchResult, threshold: f64) -> usize {
    m.pairs.iter().filter(|p| p.iou >= threshold).count()
}

pub fn precision_recall_at(m: &MatchResult, threshold: f64) -> PrecisionRecall {
    PrecisionRecall::from_counts(true_positives(m, threshold), m.detections(), m.ground_truths())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApSummary {
    /// Trapezoidal area under precision against recall.
    pub ap: f64,
    /// F1 at IoU 0.5.
    pub ap50: f64,
    /// F1 at IoU 0.75.
    pub ap75: f64,
    pub curve: Vec<CurvePoint>,
    pub empty_denominator: bool,
}

/// Dataset-pooled sweep over per-scene matches.
pub fn average_precision(matches: &[MatchResult]) -> ApSummary {
    let detections: usize = matches.iter().map(MatchResult::detections).sum();
    let ground_truths: usize = matches.iter().map(MatchResult::ground_truths).sum();
    let at: Vec<PrecisionRecall> = (0..THRESHOLDS)
        .map(|i| {
            let tp = matches.iter().map(|m| true_positives(m, threshold(i))).sum();
            PrecisionRecall::from_counts(tp, detections, ground_truths)
        })
        .collect();
    ApSummary {
        ap: pr_area(&at),
        ap50: at[10].f1(),
        ap75: at[15].f1(),
        curve: at
            .iter()
            .enumerate()
            .map(|(i, pr)| CurvePoint { threshold: threshold(i), precision: pr.precision, recall: pr.recall })
            .collect(),
        empty_denominator: at.iter().any(|pr| pr.empty_denominator),
    }
}

/// Points taken from the strictest threshold down, so recall never
/// decreases; the first precision is carried back to recall 0.
fn pr_area(at: &[PrecisionRecall]) -> f64 {
    let mut prev = (0.0, at[at.len() - 1].precision);
    let mut area = 0.0;
    for pr in at.iter().rev() {
        area += 0.5 * (prev.1 + pr.precision) * (pr.recall - prev.0);
        prev = (pr.recall, pr.precision);
    }
    area
}

/// Mean IoU over every matched pair of every scene; `None` without pairs.
pub fn mean_iou(matches: &[MatchResult]) -> Option<f64> {
    let (sum, n) = matches.iter().flat_map(|m| &m.pairs).fold((0.0, 0usize), |(s, n), p| (s + p.iou, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub tooth: ToothId,
    pub bbox: BBox,
}

/// Detections of one image next to its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScene {
    pub detections: Vec<Detection>,
    pub truth: Vec<ToothAnnotation>,
}

impl EvalScene {
    pub fn new(result: &DetectionResult, truth: &[ToothAnnotation]) -> Self {
        Self {
            detections: result.teeth.iter().map(|t| Detection { tooth: t.tooth, bbox: t.bbox }).collect(),
            truth: truth.to_vec(),
        }
    }

    fn boxes(&self) -> Vec<BBox> {
        self.detections.iter().map(|d| d.bbox).collect()
    }

    /// Matching against every annotated box.
    pub fn detection_match(&self) -> MatchResult {
        match_boxes(&self.boxes(), &self.truth.iter().map(|t| t.bbox).collect::<Vec<_>>())
    }

    /// IoU of each detection with its matched annotation.
    pub fn detection_ious(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.detections.len()];
        for p in self.detection_match().pairs {
            out[p.det] = Some(p.iou);
        }
        out
    }

    /// Matching against present teeth, with their annotations.
    fn identification_match(&self) -> (Vec<&ToothAnnotation>, MatchResult) {
        let present: Vec<&ToothAnnotation> = self.truth.iter().filter(|t| t.present).collect();
        let m = match_boxes(&self.boxes(), &present.iter().map(|t| t.bbox).collect::<Vec<_>>());
        (present, m)
    }
}

/// IoU a detection needs to count as an identification attempt.
pub const IDENTIFICATION_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Identification {
    pub precision: f64,
    pub recall: f64,
    /// Present ground-truth teeth.
    pub n_gtb: usize,
    /// Detections matched to a present tooth at IoU >= 0.5.
    pub n_db: usize,
    /// Of those, the ones carrying the right tooth id.
    pub n_tpn: usize,
    pub empty_denominator: bool,
}

pub fn identification_metrics(scenes: &[EvalScene]) -> Identification {
    let (mut n_gtb, mut n_db, mut n_tpn) = (0, 0, 0);
    for s in scenes {
        let (present, m) = s.identification_match();
        n_gtb += present.len();
        for p in m.pairs.iter().filter(|p| p.iou >= IDENTIFICATION_IOU) {
            n_db += 1;
            if s.detections[p.det].tooth == present[p.gt].tooth {
                n_tpn += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Identification {
        precision: ratio(n_tpn, n_db),
        recall: ratio(n_tpn, n_gtb),
        n_gtb,
        n_db,
        n_tpn,
        empty_denominator: n_db == 0 || n_gtb == 0,
    }
}

/// Rows: true tooth of a matched present tooth; columns: predicted tooth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    /// Each non-empty row divided by its sum.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 }).collect()
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Over the same matches as [`identification_metrics`].
pub fn confusion_matrix(scenes: &[EvalScene]) -> Confusion {
    let mut counts = vec![vec![0u64; TEETH]; TEETH];
    for s in scenes {
        let (present, m) = s.identification_match();
        for p in m.pairs.iter().filter(|p| p.iou >= IDENTIFICATION_IOU) {
            let row = present[p.gt].tooth.index() as usize - 1;
            let col = s.detections[p.det].tooth.index() as usize - 1;
            counts[row][col] += 1;
        }
    }
    Confusion { counts }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMetrics {
    /// Which boxes served as ground truth.
    pub universe: &'static str,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when nothing matched.
    pub miou: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub empty_denominator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub universe: &'static str,
    #[serde(flatten)]
    pub metrics: Identification,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub detection: DetectionMetrics,
    pub identification: IdentificationReport,
    pub confusion: Confusion,
}

pub fn evaluate(scenes: &[EvalScene]) -> EvalReport {
    let matches: Vec<MatchResult> = scenes.iter().map(EvalScene::detection_match).collect();
    let ap = average_precision(&matches);
    EvalReport {
        scenes: scenes.len(),
        detection: DetectionMetrics {
            universe: "all 32 annotated boxes",
            ap: ap.ap,
            ap50: ap.ap50,
            ap75: ap.ap75,
            miou: mean_iou(&matches),
            curve: ap.curve,
            empty_denominator: ap.empty_denominator,
        },
        identification: IdentificationReport {
            universe: "present teeth",
            metrics: identification_metrics(scenes),
        },
        confusion: confusion_matrix(scenes),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `metric,value` rows followed by the threshold curve.
    pub fn to_csv(&self) -> String {
        let d = &self.detection;
        let id = &self.identification.metrics;
        let mut out = String::from("metric,value\n");
        let miou = d.miou.map_or("undefined".to_string(), |v| v.to_string());
        for (k, v) in [
            ("scenes", self.scenes.to_string()),
            ("ap", d.ap.to_string()),
            ("ap50", d.ap50.to_string()),
            ("ap75", d.ap75.to_string()),
            ("miou", miou),
            ("id_precision", id.precision.to_string()),
            ("id_recall", id.recall.to_string()),
            ("n_gtb", id.n_gtb.to_string()),
            ("n_db", id.n_db.to_string()),
            ("n_tpn", id.n_tpn.to_string()),
        ] {
            writeln!(out, "{k},{v}").expect("string write");
        }
        out.push_str("\nthreshold,precision,recall\n");
        for p in &d.curve {
            writeln!(out, "{:.2},{},{}", p.threshold, p.precision, p.recall).expect("string write");
        }
        out
    }
}
