//! Browser bindings for three pieces of the detector: anchor tiling and
//! labeling, NMS with box voting, and the hard-image sampler. Boxes cross the
//! boundary as flat `[x0, y0, x1, y1, ...]` arrays.

use facemine::geometry::generate_anchors;
use facemine::inference::{box_voting, nms, Detection};
use facemine::mining::{build_epoch_plan, DifficultyTable, HimConfig};
use facemine::targets::{assign_targets, AnchorLabel, MatchConfig};
use facemine::{AnchorConfig, BBox, GroundTruth};
use wasm_bindgen::prelude::*;

fn boxes(flat: &[f64]) -> Result<Vec<BBox>, JsError> {
    if !flat.len().is_multiple_of(4) {
        return Err(JsError::new("box array length must be a multiple of 4"));
    }
    Ok(flat
        .chunks_exact(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect())
}

fn err(e: facemine::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Every anchor for an image of the given size, anchor-size major.
#[wasm_bindgen]
pub fn anchor_boxes(width: usize, height: usize) -> Result<Vec<f64>, JsError> {
    let grid = generate_anchors(height, width, &AnchorConfig::default()).map_err(err)?;
    Ok(grid
        .boxes
        .iter()
        .flat_map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
        .collect())
}

/// Label of every anchor against the given faces: 1 face, 0 background,
/// -1 left out of the loss.
#[wasm_bindgen]
pub fn anchor_labels(width: usize, height: usize, faces: &[f64]) -> Result<Vec<i8>, JsError> {
    let gts: Vec<GroundTruth> = boxes(faces)?.into_iter().map(GroundTruth::new).collect();
    let grid = generate_anchors(height, width, &AnchorConfig::default()).map_err(err)?;
    let labeled = assign_targets(&grid, &gts, &MatchConfig::default()).map_err(err)?;
    Ok(labeled
        .labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Positive => 1,
            AnchorLabel::Negative => 0,
            AnchorLabel::Ignore => -1,
        })
        .collect())
}

/// Greedy NMS, optionally followed by box voting over the whole input.
/// Returns `[x0, y0, x1, y1, score]` per kept detection, best first.
#[wasm_bindgen]
pub fn suppress(
    flat_boxes: &[f64],
    scores: &[f64],
    nms_iou: f64,
    voting: bool,
    vote_iou: f64,
) -> Result<Vec<f64>, JsError> {
    let bxs = boxes(flat_boxes)?;
    if bxs.len() != scores.len() {
        return Err(JsError::new("one score per box is required"));
    }
    let dets: Vec<Detection> = bxs
        .into_iter()
        .zip(scores)
        .map(|(bbox, &score)| Detection { bbox, score })
        .collect();
    Ok(nms(&dets, nms_iou)
        .into_iter()
        .map(|i| {
            if voting {
                box_voting(&dets[i], &dets, vote_iou)
            } else {
                dets[i]
            }
        })
        .flat_map(|d| [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.score])
        .collect())
}

/// One epoch of the hard-image sampler over images with the given last
/// scores (negative means never scored). Returns the indices trained on, in
/// visiting order.
#[wasm_bindgen]
pub fn sample_epoch(
    scores: &[f64],
    drop_prob: f64,
    easy_threshold: f64,
    epoch: usize,
    seed: u64,
) -> Result<Vec<u32>, JsError> {
    let cfg = HimConfig {
        drop_prob,
        easy_threshold,
        enabled: true,
    };
    cfg.validate().map_err(err)?;
    let ids: Vec<String> = (0..scores.len()).map(|i| format!("{i:08}")).collect();
    let mut table = DifficultyTable::new(ids.iter().cloned());
    for (id, &s) in ids.iter().zip(scores) {
        if s >= 0.0 {
            table.record_score(id, s.min(1.0), &cfg).map_err(err)?;
        }
    }
    let plan = build_epoch_plan(&ids, &table, &cfg, epoch, 0, seed);
    Ok(plan.ids.iter().map(|id| id.parse().expect("ids are indices")).collect())
}
