//! Test-time detection: image pyramid, optional flip, score threshold, one
//! global NMS over every scale, then box voting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::scale_for;
use crate::datasets::read_ppm;
use crate::error::{invalid, Error, Result};
use crate::geometry::{clip_box, decode, flip_box, generate_anchors, iou, AnchorConfig, BBox};
use crate::image::Image;
use crate::net::{DetectorModel, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub pyramid_short_sides: Vec<usize>,
    pub long_side_cap: usize,
    pub flip: bool,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub box_voting: bool,
    pub vote_iou: f64,
    pub max_detections: usize,
}

impl InferConfig {
    pub fn paper() -> Self {
        Self {
            pyramid_short_sides: vec![100, 300, 600, 1000, 1400],
            long_side_cap: 2500,
            flip: true,
            score_thresh: 0.05,
            nms_iou: 0.3,
            box_voting: true,
            vote_iou: 0.5,
            max_detections: 750,
        }
    }

    /// Pyramid for 256-pixel synthetic canvases; 64 and 128 are the shrinking
    /// scales that bring the largest faces into anchor range.
    pub fn toy() -> Self {
        Self {
            pyramid_short_sides: vec![64, 128, 256, 384, 512],
            long_side_cap: 800,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_short_sides.is_empty() || self.pyramid_short_sides.contains(&0) || self.long_side_cap == 0 {
            return Err(invalid("the test pyramid must be non-empty with positive sizes"));
        }
        for t in [self.score_thresh, self.nms_iou, self.vote_iou] {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid("inference thresholds must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Runs the model on `image` resized so its short side is `short_side`
/// (long side capped), returning boxes in original-image coordinates.
pub fn detect_single_scale<T: Real>(
    model: &DetectorModel<T>,
    anchors: &AnchorConfig,
    image: &Image,
    short_side: usize,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    if image.is_empty() {
        return Ok(Vec::new());
    }
    let scale = scale_for(image.width, image.height, short_side, cfg.long_side_cap);
    let w = ((image.width as f64 * scale).round() as usize).max(1);
    let h = ((image.height as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (w as f64 / image.width as f64, h as f64 / image.height as f64);
    let input = DetectorModel::<T>::prepare_input(&image.resize(w, h));
    let out = model.predict(&input)?;
    let grid = generate_anchors(input.h(), input.w(), anchors)?;
    if grid.len() != out.num_anchors() {
        return Err(Error::Shape(format!(
            "model predicts {} anchors, grid has {}",
            out.num_anchors(),
            grid.len()
        )));
    }
    let probs = out.face_probs();
    let mut dets = Vec::new();
    for (a, &p) in probs.iter().enumerate() {
        if p < cfg.score_thresh {
            continue;
        }
        let b = decode(&grid.boxes[a], &out.delta(a)).scale(1.0 / sx, 1.0 / sy);
        let b = clip_box(&b, image.height, image.width);
        if b.has_positive_area() {
            dets.push(Detection { bbox: b, score: p });
        }
    }
    Ok(dets)
}

/// Indices ordered by descending score, ties by lower index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy NMS: keeps the best remaining detection and suppresses every other
/// with IoU above `iou_thresh`. Returns kept indices in keep order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Replaces the kept box by the score-weighted mean of every pool box with
/// IoU at least `vote_iou` against it (itself included). The score is kept.
pub fn box_voting(kept: &Detection, pool: &[Detection], vote_iou: f64) -> Detection {
    let mut acc = [0.0f64; 4];
    let mut total = 0.0;
    for d in pool.iter().filter(|d| iou(&kept.bbox, &d.bbox) >= vote_iou) {
        let b = d.bbox;
        for (a, v) in acc.iter_mut().zip([b.x_min, b.y_min, b.x_max, b.y_max]) {
            *a += d.score * v;
        }
        total += d.score;
    }
    if total <= 0.0 {
        return *kept;
    }
    Detection {
        bbox: BBox::new(acc[0] / total, acc[1] / total, acc[2] / total, acc[3] / total),
        score: kept.score,
    }
}

/// Detections from every pyramid level (and flipped copies), merged in
/// scale-then-flip order.
pub fn detection_pool<T: Real>(
    model: &DetectorModel<T>,
    anchors: &AnchorConfig,
    image: &Image,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let flipped = cfg.flip.then(|| image.flip_horizontal());
    let mut pool = Vec::new();
    for &s in &cfg.pyramid_short_sides {
        pool.extend(detect_single_scale(model, anchors, image, s, cfg)?);
        if let Some(f) = &flipped {
            pool.extend(
                detect_single_scale(model, anchors, f, s, cfg)?
                    .into_iter()
                    .map(|d| Detection {
                        bbox: flip_box(&d.bbox, image.width),
                        score: d.score,
                    }),
            );
        }
    }
    Ok(pool)
}

/// NMS and optional voting over a merged pool; output sorted by descending
/// score and truncated to `max_detections`.
pub fn postprocess(pool: &[Detection], cfg: &InferConfig) -> Vec<Detection> {
    let mut out: Vec<Detection> = nms(pool, cfg.nms_iou)
        .into_iter()
        .map(|i| {
            if cfg.box_voting {
                box_voting(&pool[i], pool, cfg.vote_iou)
            } else {
                pool[i]
            }
        })
        .collect();
    // keep order is already score order; the sort only makes it explicit
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    out
}

pub fn detect<T: Real>(
    model: &DetectorModel<T>,
    anchors: &AnchorConfig,
    image: &Image,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    Ok(postprocess(&detection_pool(model, anchors, image, cfg)?, cfg))
}

/// One block per image: id line, count line, then `x y w h score` lines.
pub fn write_detections(out: &mut String, image_id: &str, dets: &[Detection]) {
    let _ = writeln!(out, "{image_id}");
    let _ = writeln!(out, "{}", dets.len());
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(
            out,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x_min,
            b.y_min,
            b.width(),
            b.height(),
            d.score
        );
    }
}

pub fn parse_detections(text: &str, origin: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut out = BTreeMap::new();
    while let Some((id_line, id)) = lines.next() {
        let (ln, count) = lines
            .next()
            .ok_or_else(|| err(id_line, format!("no detection count for `{id}`")))?;
        let count: usize = count
            .parse()
            .map_err(|_| err(ln, format!("bad detection count `{count}`")))?;
        let mut dets = Vec::with_capacity(count);
        for k in 0..count {
            let (ln, text) = lines
                .next()
                .ok_or_else(|| err(ln, format!("`{id}` ends after {k} of {count} detections")))?;
            let v = text
                .split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|_| err(ln, format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 5 {
                return Err(err(ln, format!("expected `x y w h score`, found {} fields", v.len())));
            }
            dets.push(Detection {
                bbox: BBox::from_xywh(v[0], v[1], v[2], v[3]),
                score: v[4],
            });
        }
        if out.insert(id.to_owned(), dets).is_some() {
            return Err(err(id_line, format!("duplicate block for `{id}`")));
        }
    }
    Ok(out)
}

/// Runs [`detect`] on every listed image, keyed by image id.
pub fn detect_images<T: Real>(
    model: &DetectorModel<T>,
    anchors: &AnchorConfig,
    images: &[(String, PathBuf)],
    cfg: &InferConfig,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for (id, path) in images {
        let dets = detect(model, anchors, &read_ppm(path)?, cfg)?;
        out.insert(id.clone(), dets);
    }
    Ok(out)
}

/// The whole detection file for a set of images, in id order.
pub fn detections_text(dets: &BTreeMap<String, Vec<Detection>>) -> String {
    let mut s = String::new();
    for (id, d) in dets {
        write_detections(&mut s, id, d);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x0, y0, x1, y1),
            score,
        }
    }

    /// Reference NMS: a detection survives if no higher-ranked survivor
    /// overlaps it, evaluated by repeated full scans.
    fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<usize> {
        let ranks_before =
            |a: usize, b: usize| dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b);
        let mut alive = vec![true; dets.len()];
        let mut keep = Vec::new();
        loop {
            let best = (0..dets.len())
                .filter(|&i| alive[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if ranks_before(b, i) => Some(b),
                    _ => Some(i),
                });
            let Some(b) = best else { break };
            keep.push(b);
            alive[b] = false;
            for j in 0..dets.len() {
                if alive[j] && iou(&dets[b].bbox, &dets[j].bbox) > thresh {
                    alive[j] = false;
                }
            }
        }
        keep
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[det(0.0, 0.0, 1.0, 1.0, 0.3)], 0.3), vec![0]);
        let two = [det(0.0, 0.0, 10.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 10.0, 0.9)];
        assert_eq!(nms(&two, 0.3), vec![1]);
        let tie = [det(0.0, 0.0, 10.0, 10.0, 0.5), det(0.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(nms(&tie, 0.3), vec![0]);
        assert!(nms(&[], 0.3).is_empty());
    }

    proptest! {
        #[test]
        fn nms_matches_oracle(seed in any::<u64>(), n in 0usize..=20, thresh in 0.0f64..1.0) {
            let mut r = rng::stream(seed, &[]);
            let dets: Vec<Detection> = (0..n).map(|_| {
                let x = r.random_range(0.0..30.0);
                let y = r.random_range(0.0..30.0);
                // coarse scores force ties
                det(x, y, x + r.random_range(1.0..20.0), y + r.random_range(1.0..20.0), r.random_range(0..5) as f64 / 4.0)
            }).collect();
            prop_assert_eq!(nms(&dets, thresh), nms_oracle(&dets, thresh));
        }

        #[test]
        fn voting_stays_in_voter_hull(seed in any::<u64>(), n in 1usize..12) {
            let mut r = rng::stream(seed, &[]);
            let pool: Vec<Detection> = (0..n).map(|_| {
                let x = r.random_range(0.0..10.0);
                let y = r.random_range(0.0..10.0);
                det(x, y, x + r.random_range(5.0..15.0), y + r.random_range(5.0..15.0), r.random_range(0.01..1.0))
            }).collect();
            let kept = pool[0];
            let v = box_voting(&kept, &pool, 0.5);
            prop_assert_eq!(v.score, kept.score);
            let voters: Vec<&Detection> = pool.iter().filter(|d| iou(&kept.bbox, &d.bbox) >= 0.5).collect();
            let coords = |d: &Detection| [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max];
            let out = coords(&v);
            for (c, &o) in out.iter().enumerate() {
                let lo = voters.iter().map(|d| coords(d)[c]).fold(f64::INFINITY, f64::min);
                let hi = voters.iter().map(|d| coords(d)[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn voting_examples() {
        let a = det(0.0, 0.0, 10.0, 10.0, 1.0);
        assert_eq!(box_voting(&a, &[a], 0.5), a);
        let far = det(0.0, 0.0, 20.0, 20.0, 1.0);
        assert_eq!(box_voting(&a, &[a, far], 0.5), a);
        let a = det(0.0, 0.0, 10.0, 10.0, 3.0);
        let b = det(2.0, 0.0, 12.0, 10.0, 1.0);
        let v = box_voting(&a, &[a, b], 0.5);
        assert_eq!(v.bbox, BBox::new(0.5, 0.0, 10.5, 10.0));
        assert_eq!(v.score, 3.0);
    }

    #[test]
    fn detection_file_round_trip() {
        let dets = vec![det(1.5, 2.0, 11.5, 22.25, 0.987654), det(0.0, 0.0, 3.0, 4.0, 0.05)];
        let mut text = String::new();
        write_detections(&mut text, "images/000001", &dets);
        write_detections(&mut text, "empty", &[]);
        assert!(text.starts_with("images/000001\n2\n1.500000 2.000000 10.000000 20.250000 0.987654\n"));
        let parsed = parse_detections(&text, Path::new("d.txt")).unwrap();
        assert_eq!(parsed["images/000001"], dets);
        assert!(parsed["empty"].is_empty());
        assert!(parse_detections("a\n2\n1 2 3 4 0.5\n", Path::new("d.txt")).is_err());
        assert!(parse_detections("a\n1\n1 2 3 0.5\n", Path::new("d.txt")).is_err());
    }

    fn tiny_model() -> (DetectorModel<f32>, AnchorConfig) {
        let anchors = AnchorConfig::default();
        let mut m = DetectorModel::new(&NetConfig::default(), &anchors, 11).unwrap();
        m.jitter(0.3, 4);
        (m, anchors)
    }

    #[test]
    fn single_scale_maps_back_to_original_coordinates() {
        let (m, anchors) = tiny_model();
        let img = Image::filled(40, 30, [0.3, 0.5, 0.7]);
        let cfg = InferConfig {
            score_thresh: 0.0,
            ..InferConfig::toy()
        };
        for s in [15, 30, 60] {
            let dets = detect_single_scale(&m, &anchors, &img, s, &cfg).unwrap();
            assert!(!dets.is_empty());
            for d in dets {
                let b = d.bbox;
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 40.0 && b.y_max <= 30.0);
                assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn degenerate_pyramid_equals_single_scale_plus_nms() {
        let (m, anchors) = tiny_model();
        let mut r = rng::stream(8, &[]);
        let img = Image::from_planar(48, 32, (0..3 * 48 * 32).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let cfg = InferConfig {
            pyramid_short_sides: vec![32],
            flip: false,
            box_voting: false,
            score_thresh: 0.3,
            ..InferConfig::toy()
        };
        let single = detect_single_scale(&m, &anchors, &img, 32, &cfg).unwrap();
        let expected: Vec<Detection> = nms(&single, cfg.nms_iou).into_iter().map(|i| single[i]).collect();
        let got = detect(&m, &anchors, &img, &cfg).unwrap();
        assert_eq!(got, expected);
        assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        let capped = detect(
            &m,
            &anchors,
            &img,
            &InferConfig {
                max_detections: 2,
                ..cfg
            },
        )
        .unwrap();
        assert!(capped.len() <= 2);
    }

    #[test]
    fn flip_testing_is_invariant_under_mirroring_the_input() {
        // With flip on, the pool for a mirrored image is the mirrored pool of
        // the original, so the outputs agree for any input, symmetric or not.
        let (m, anchors) = tiny_model();
        let mut r = rng::stream(2, &[]);
        let img = Image::from_planar(64, 48, (0..3 * 64 * 48).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let cfg = InferConfig {
            pyramid_short_sides: vec![32, 48],
            score_thresh: 0.2,
            ..InferConfig::toy()
        };
        let plain = detect(&m, &anchors, &img, &cfg).unwrap();
        let mirrored: Vec<Detection> = detect(&m, &anchors, &img.flip_horizontal(), &cfg)
            .unwrap()
            .into_iter()
            .map(|d| Detection {
                bbox: flip_box(&d.bbox, 64),
                score: d.score,
            })
            .collect();
        assert!(!plain.is_empty());
        assert_eq!(plain.len(), mirrored.len());
        for (a, b) in plain.iter().zip(&mirrored) {
            assert!((a.score - b.score).abs() < 1e-6);
            assert!((a.bbox.x_min - b.bbox.x_min).abs() < 1.0 && (a.bbox.x_max - b.bbox.x_max).abs() < 1.0);
            assert!((a.bbox.y_min - b.bbox.y_min).abs() < 1.0 && (a.bbox.y_max - b.bbox.y_max).abs() < 1.0);
        }
    }
}
