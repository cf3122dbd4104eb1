//! Precision/recall and average precision with nested difficulty subsets.
//!
//! A ground truth belongs to a subset when it is valid (not flagged invalid)
//! and at least `min_height` pixels tall. Detections whose best overlap is a
//! ground truth outside the subset are ignored rather than counted as false
//! positives, so the subset APs stay comparable.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::ImageRecord;
use crate::error::{invalid, Result};
use crate::geometry::{iou, GroundTruth};
use crate::inference::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetRule {
    pub name: String,
    pub min_height: f64,
}

impl SubsetRule {
    pub fn new(name: &str, min_height: f64) -> Self {
        Self {
            name: name.to_owned(),
            min_height,
        }
    }

    pub fn contains(&self, gt: &GroundTruth) -> bool {
        !gt.ignored && gt.bbox.height() >= self.min_height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Reported in this order.
    pub subsets: Vec<SubsetRule>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            subsets: vec![
                SubsetRule::new("easy", 50.0),
                SubsetRule::new("medium", 25.0),
                SubsetRule::new("hard", 10.0),
            ],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return Err(invalid("iou_thresh must lie in [0, 1]"));
        }
        if self.subsets.is_empty() {
            return Err(invalid("at least one evaluation subset is required"));
        }
        Ok(())
    }

    pub fn subset(&self, name: &str) -> Option<&SubsetRule> {
        self.subsets.iter().find(|s| s.name == name)
    }

    /// The most inclusive subset (smallest height cutoff).
    pub fn widest(&self) -> &SubsetRule {
        self.subsets
            .iter()
            .min_by(|a, b| a.min_height.total_cmp(&b.min_height))
            .expect("validated: subsets non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignore,
}

/// Detection indices by descending score, ties by index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in score order. Returns the outcome of every detection
/// (indexed like `dets`) and whether each ground truth was matched.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    subset: &SubsetRule,
    iou_thresh: f64,
) -> (Vec<Outcome>, Vec<bool>) {
    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];
    let mut matched = vec![false; gts.len()];
    for i in score_order(dets) {
        let d = &dets[i].bbox;
        let mut best: Option<(usize, f64)> = None;
        let mut overlaps_outside = false;
        for (g, gt) in gts.iter().enumerate() {
            let o = iou(d, &gt.bbox);
            if o < iou_thresh {
                continue;
            }
            if !subset.contains(gt) {
                overlaps_outside = true;
            } else if !matched[g] && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        outcomes[i] = match best {
            Some((g, _)) => {
                matched[g] = true;
                Outcome::TruePositive
            }
            None if overlaps_outside => Outcome::Ignore,
            None => Outcome::FalsePositive,
        };
    }
    (outcomes, matched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub num_gt: usize,
}

/// Builds the curve from `(score, outcome)` pairs already in ranking order.
pub fn pr_curve(ranked: &[(f64, Outcome)], num_gt: usize) -> PrCurve {
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(score, o) in ranked {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignore => continue,
        }
        points.push(PrPoint {
            threshold: score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
        });
    }
    let ap = interpolated_ap(&points, num_gt);
    PrCurve { points, ap, num_gt }
}

fn interpolated_ap(points: &[PrPoint], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    // precision envelope: best precision at this rank or any later one
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for (e, p) in envelope.iter_mut().zip(points).rev() {
        best = best.max(p.precision);
        *e = best;
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, e) in points.iter().zip(&envelope) {
        ap += (p.recall - last_recall) * e;
        last_recall = p.recall;
    }
    ap
}

/// All-points interpolated AP: the sum over ranks of the recall increment
/// times the best precision at that rank or below. `NaN` when `num_gt` is 0.
pub fn average_precision(outcomes: &[Outcome], num_gt: usize) -> f64 {
    let ranked: Vec<(f64, Outcome)> = outcomes.iter().map(|&o| (0.0, o)).collect();
    pr_curve(&ranked, num_gt).ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetResult {
    pub name: String,
    pub ap: f64,
    pub num_gt: usize,
    pub curve: PrCurve,
}

/// Dataset-level evaluation. `images` pairs each image id with its ground
/// truth; images without an entry in `dets` have no detections. Detections
/// are pooled across images and ranked by score (ties by image order, then
/// index).
pub fn evaluate_dataset(
    images: &[(String, Vec<GroundTruth>)],
    dets: &BTreeMap<String, Vec<Detection>>,
    cfg: &EvalConfig,
) -> Result<Vec<SubsetResult>> {
    cfg.validate()?;
    let empty = Vec::new();
    let mut results = Vec::with_capacity(cfg.subsets.len());
    for subset in &cfg.subsets {
        let mut pooled: Vec<(f64, usize, usize, Outcome)> = Vec::new();
        let mut num_gt = 0;
        for (img_idx, (id, gts)) in images.iter().enumerate() {
            let d = dets.get(id).unwrap_or(&empty);
            let (outcomes, _) = match_detections(d, gts, subset, cfg.iou_thresh);
            num_gt += gts.iter().filter(|g| subset.contains(g)).count();
            pooled.extend(
                d.iter()
                    .zip(outcomes)
                    .enumerate()
                    .map(|(k, (det, o))| (det.score, img_idx, k, o)),
            );
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ranked: Vec<(f64, Outcome)> = pooled.iter().map(|p| (p.0, p.3)).collect();
        let curve = pr_curve(&ranked, num_gt);
        results.push(SubsetResult {
            name: subset.name.clone(),
            ap: curve.ap,
            num_gt,
            curve,
        });
    }
    Ok(results)
}

/// AP of one image against the widest subset. `NaN` when it has no ground truth.
pub fn per_image_ap(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> f64 {
    let subset = cfg.widest();
    let (outcomes, _) = match_detections(dets, gts, subset, cfg.iou_thresh);
    let num_gt = gts.iter().filter(|g| subset.contains(g)).count();
    let ranked: Vec<(f64, Outcome)> = score_order(dets)
        .into_iter()
        .map(|i| (dets[i].score, outcomes[i]))
        .collect();
    pr_curve(&ranked, num_gt).ap
}

fn fmt_ap(ap: f64) -> String {
    if ap.is_nan() {
        "nan".into()
    } else {
        format!("{ap:.6}")
    }
}

/// CSV `threshold,precision,recall`.
pub fn pr_curve_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall);
    }
    s
}

/// CSV `subset,ap,num_gt`.
pub fn summary_csv(results: &[SubsetResult]) -> String {
    let mut s = String::from("subset,ap,num_gt\n");
    for r in results {
        let _ = writeln!(s, "{},{},{}", r.name, fmt_ap(r.ap), r.num_gt);
    }
    s
}

/// CSV `image_id,ap`, sorted by ascending AP (images without ground truth last).
pub fn per_image_csv(rows: &[(String, f64)]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| match (a.1.is_nan(), b.1.is_nan()) {
        (false, false) => a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)),
        (x, y) => x.cmp(&y).then_with(|| a.0.cmp(&b.0)),
    });
    let mut s = String::from("image_id,ap\n");
    for (id, ap) in sorted {
        let _ = writeln!(s, "{id},{}", fmt_ap(ap));
    }
    s
}

/// Pairs every record's id with its ground truth, in record order.
pub fn ground_truth_set(records: &[ImageRecord]) -> Vec<(String, Vec<GroundTruth>)> {
    records.iter().map(|r| (r.id.clone(), r.ground_truth())).collect()
}
