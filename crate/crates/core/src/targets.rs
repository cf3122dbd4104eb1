//! Per-anchor training targets: classification labels, regression targets
//! and the online hard example selection for the classification loss.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{encode, AnchorGrid, Delta, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub reg_iou: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.3,
            reg_iou: 0.3,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0 && self.reg_iou <= self.pos_iou;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("inconsistent IoU thresholds {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    pub batch_anchors: usize,
    pub max_pos: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            batch_anchors: 256,
            max_pos: 64,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_pos == 0 || self.max_pos > self.batch_anchors {
            return Err(invalid("OHEM requires 0 < max_pos <= batch_anchors"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnchorLabel {
    /// +1: face.
    Positive,
    /// 0: background.
    Negative,
    /// -1: excluded from the classification loss.
    Ignore,
}

impl AnchorLabel {
    pub fn value(self) -> i8 {
        match self {
            AnchorLabel::Positive => 1,
            AnchorLabel::Negative => 0,
            AnchorLabel::Ignore => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledAnchorSet {
    pub labels: Vec<AnchorLabel>,
    pub reg_mask: Vec<bool>,
    /// Defined where `reg_mask` is true, zero elsewhere.
    pub reg_targets: Vec<Delta>,
    pub matched_gt: Vec<Option<usize>>,
}

impl LabeledAnchorSet {
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == AnchorLabel::Positive)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

/// Best overlap of one anchor against a set of boxes; ties go to the lower
/// ground-truth index.
#[derive(Clone, Copy)]
struct Best {
    iou: f64,
    gt: Option<usize>,
}

impl Best {
    const NONE: Best = Best { iou: 0.0, gt: None };

    fn offer(&mut self, iou: f64, gt: usize) {
        if self.gt.is_none() || iou > self.iou {
            *self = Best { iou, gt: Some(gt) };
        }
    }
}

/// Labels every anchor against the ground truth.
///
/// An anchor whose overall best match is an ignored face with IoU at or above
/// `neg_iou` is labeled `Ignore`. Otherwise the label follows the best IoU over
/// valid faces: `> pos_iou` positive, `< neg_iou` negative, else ignore. There
/// is no best-anchor fallback, so faces outside the anchor range produce no
/// positives. Ignored faces never provide regression targets.
pub fn assign_targets(grid: &AnchorGrid, gts: &[GroundTruth], cfg: &MatchConfig) -> Result<LabeledAnchorSet> {
    cfg.validate()?;
    if let Some(i) = gts.iter().position(|g| !g.bbox.has_positive_area()) {
        return Err(invalid(format!("ground truth {i} has non-positive area")));
    }
    let n = grid.len();
    let mut out = LabeledAnchorSet {
        labels: vec![AnchorLabel::Negative; n],
        reg_mask: vec![false; n],
        reg_targets: vec![Delta::default(); n],
        matched_gt: vec![None; n],
    };
    if gts.is_empty() {
        return Ok(out);
    }

    for (a, anchor) in grid.boxes.iter().enumerate() {
        let mut all = Best::NONE;
        let mut valid = Best::NONE;
        for (g, gt) in gts.iter().enumerate() {
            // cheap reject before the division
            if anchor.intersection_area(&gt.bbox) <= 0.0 {
                all.offer(0.0, g);
                if !gt.ignored {
                    valid.offer(0.0, g);
                }
                continue;
            }
            let v = anchor.iou(&gt.bbox);
            all.offer(v, g);
            if !gt.ignored {
                valid.offer(v, g);
            }
        }
        let best_is_ignored = all.gt.is_some_and(|g| gts[g].ignored);
        out.labels[a] = if best_is_ignored && all.iou >= cfg.neg_iou {
            AnchorLabel::Ignore
        } else if valid.gt.is_some() && valid.iou > cfg.pos_iou {
            AnchorLabel::Positive
        } else if all.iou < cfg.neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        if let Some(g) = valid.gt {
            if valid.iou > cfg.reg_iou {
                out.reg_mask[a] = true;
                out.reg_targets[a] = encode(anchor, &gts[g].bbox)?;
                out.matched_gt[a] = Some(g);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OhemSelection {
    pub selected_pos: Vec<usize>,
    pub selected_neg: Vec<usize>,
}

impl OhemSelection {
    pub fn len(&self) -> usize {
        self.selected_pos.len() + self.selected_neg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected_pos.iter().chain(&self.selected_neg).copied()
    }
}

/// Picks the least confident positives (up to `max_pos`) and fills the rest
/// of the `batch_anchors` budget with the most confident negatives. Ties break
/// toward the lower anchor index.
pub fn ohem_select(labels: &[AnchorLabel], face_prob: &[f64], cfg: &OhemConfig) -> Result<OhemSelection> {
    cfg.validate()?;
    if labels.len() != face_prob.len() {
        return Err(invalid(format!(
            "{} labels but {} probabilities",
            labels.len(),
            face_prob.len()
        )));
    }
    let by_prob = |a: &usize, b: &usize| face_prob[*a].partial_cmp(&face_prob[*b]).unwrap_or(Ordering::Equal);

    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Positive)
        .collect();
    pos.sort_by(|a, b| by_prob(a, b).then(a.cmp(b)));
    pos.truncate(cfg.max_pos);

    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let budget = cfg.batch_anchors - pos.len();
    if neg.len() > budget {
        neg.select_nth_unstable_by(budget, |a, b| by_prob(b, a).then(a.cmp(b)));
        neg.truncate(budget);
    }
    neg.sort_by(|a, b| by_prob(b, a).then(a.cmp(b)));

    Ok(OhemSelection {
        selected_pos: pos,
        selected_neg: neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, iou, AnchorConfig, BBox};
    use proptest::prelude::*;

    /// Straight transcription of the labeling rule over all (anchor, gt) pairs.
    fn brute_force(grid: &AnchorGrid, gts: &[GroundTruth], cfg: &MatchConfig) -> LabeledAnchorSet {
        let n = grid.len();
        let mut labels = Vec::with_capacity(n);
        let mut reg_mask = Vec::with_capacity(n);
        let mut reg_targets = Vec::with_capacity(n);
        let mut matched = Vec::with_capacity(n);
        for anchor in &grid.boxes {
            let ious: Vec<f64> = gts.iter().map(|g| iou(anchor, &g.bbox)).collect();
            let max_all = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first_all = ious.iter().position(|&v| v == max_all);
            let valid: Vec<usize> = (0..gts.len()).filter(|&g| !gts[g].ignored).collect();
            let max_valid = valid.iter().map(|&g| ious[g]).fold(f64::NEG_INFINITY, f64::max);
            let first_valid = valid.iter().copied().find(|&g| ious[g] == max_valid);
            let label = if gts.is_empty() {
                AnchorLabel::Negative
            } else if first_all.is_some_and(|g| gts[g].ignored) && max_all >= cfg.neg_iou {
                AnchorLabel::Ignore
            } else if max_valid > cfg.pos_iou {
                AnchorLabel::Positive
            } else if max_all < cfg.neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            labels.push(label);
            match first_valid {
                Some(g) if max_valid > cfg.reg_iou => {
                    reg_mask.push(true);
                    reg_targets.push(encode(anchor, &gts[g].bbox).unwrap());
                    matched.push(Some(g));
                }
                _ => {
                    reg_mask.push(false);
                    reg_targets.push(Delta::default());
                    matched.push(None);
                }
            }
        }
        LabeledAnchorSet {
            labels,
            reg_mask,
            reg_targets,
            matched_gt: matched,
        }
    }

    #[test]
    fn no_faces_means_all_background() {
        let grid = generate_anchors(32, 32, &AnchorConfig::default()).unwrap();
        let set = assign_targets(&grid, &[], &MatchConfig::default()).unwrap();
        assert!(set.labels.iter().all(|&l| l == AnchorLabel::Negative));
        assert!(set.reg_mask.iter().all(|&m| !m));
    }

    #[test]
    fn exact_anchor_match_is_positive_with_zero_target() {
        let grid = generate_anchors(64, 64, &AnchorConfig::default()).unwrap();
        let a = grid.index(1, 3, 4);
        let set = assign_targets(&grid, &[GroundTruth::new(grid.boxes[a])], &MatchConfig::default()).unwrap();
        assert_eq!(set.labels[a], AnchorLabel::Positive);
        assert!(set.reg_mask[a]);
        assert_eq!(set.reg_targets[a], Delta::default());
        assert_eq!(set.matched_gt[a], Some(0));
    }

    #[test]
    fn boundary_iou_is_ignored() {
        // anchor 16x16 centered (4,4): a 16x8 box sharing its top half has IoU exactly 0.5
        let grid = generate_anchors(8, 8, &AnchorConfig::default()).unwrap();
        let gt = BBox::new(-4.0, -4.0, 12.0, 4.0);
        assert_eq!(iou(&grid.boxes[0], &gt), 0.5);
        let set = assign_targets(&grid, &[GroundTruth::new(gt)], &MatchConfig::default()).unwrap();
        assert_eq!(set.labels[0], AnchorLabel::Ignore);
        assert!(set.reg_mask[0]);
    }

    #[test]
    fn no_best_anchor_fallback() {
        // a 200 px face overlaps no anchor above 0.5
        let grid = generate_anchors(256, 256, &AnchorConfig::default()).unwrap();
        let gt = GroundTruth::new(BBox::new(20.0, 20.0, 220.0, 220.0));
        let set = assign_targets(&grid, &[gt], &MatchConfig::default()).unwrap();
        assert_eq!(set.num_positive(), 0);
    }

    #[test]
    fn ignored_face_suppresses_to_ignore() {
        let grid = generate_anchors(64, 64, &AnchorConfig::default()).unwrap();
        let a = grid.index(0, 2, 2);
        let set = assign_targets(&grid, &[GroundTruth::ignored(grid.boxes[a])], &MatchConfig::default()).unwrap();
        assert_eq!(set.labels[a], AnchorLabel::Ignore);
        assert!(!set.reg_mask[a]);
        assert_eq!(set.num_positive(), 0);
    }

    #[test]
    fn rejects_zero_area_truth() {
        let grid = generate_anchors(32, 32, &AnchorConfig::default()).unwrap();
        let gt = GroundTruth::new(BBox::new(3.0, 3.0, 3.0, 9.0));
        assert!(assign_targets(&grid, &[gt], &MatchConfig::default()).is_err());
    }

    #[test]
    fn random_scene_matches_brute_force() {
        use rand::Rng;
        let grid = generate_anchors(32, 32, &AnchorConfig::default()).unwrap();
        let mut rng = crate::rng::stream(11, &[]);
        for _ in 0..50 {
            let gts: Vec<_> = (0..3)
                .map(|_| {
                    let (x, y) = (rng.random_range(0.0..24.0), rng.random_range(0.0..24.0));
                    let s = rng.random_range(6.0..40.0);
                    GroundTruth::new(BBox::from_xywh(x, y, s, s * rng.random_range(0.7..1.3)))
                })
                .collect();
            let cfg = MatchConfig::default();
            assert_eq!(
                assign_targets(&grid, &gts, &cfg).unwrap(),
                brute_force(&grid, &gts, &cfg)
            );
        }
    }

    #[test]
    fn ohem_examples() {
        // 10 positives with probabilities 0.1..1.0
        let labels = vec![AnchorLabel::Positive; 10];
        let probs: Vec<f64> = (1..=10).rev().map(|i| i as f64 / 10.0).collect();
        let cfg = OhemConfig {
            batch_anchors: 256,
            max_pos: 4,
        };
        let sel = ohem_select(&labels, &probs, &cfg).unwrap();
        // sort oracle
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap());
        assert_eq!(sel.selected_pos, order[..4].to_vec());
        assert!(sel.selected_neg.is_empty());

        let labels = vec![AnchorLabel::Negative; 500];
        let probs: Vec<f64> = (0..500).map(|i| ((i * 37) % 500) as f64 / 500.0).collect();
        let sel = ohem_select(&labels, &probs, &OhemConfig::default()).unwrap();
        assert_eq!(sel.selected_neg.len(), 256);
        let threshold = sel.selected_neg.iter().map(|&i| probs[i]).fold(1.0, f64::min);
        assert_eq!(probs.iter().filter(|&&p| p >= threshold).count(), 256);

        let labels = vec![AnchorLabel::Positive; 300];
        let sel = ohem_select(&labels, &[0.5; 300], &OhemConfig::default()).unwrap();
        assert_eq!(sel.selected_pos, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn ohem_rejects_length_mismatch() {
        assert!(ohem_select(&[AnchorLabel::Positive], &[0.1, 0.2], &OhemConfig::default()).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = (Vec<AnchorLabel>, Vec<f64>)> {
        prop::collection::vec(
            (
                prop_oneof![
                    Just(AnchorLabel::Positive),
                    Just(AnchorLabel::Negative),
                    Just(AnchorLabel::Ignore)
                ],
                0u8..20,
            ),
            0..400,
        )
        .prop_map(|v| v.into_iter().map(|(l, p)| (l, p as f64 / 19.0)).unzip())
    }

    proptest! {
        #[test]
        fn ohem_invariants((labels, probs) in arb_labels(), max_pos in 1usize..80) {
            let cfg = OhemConfig { batch_anchors: 128, max_pos };
            let sel = ohem_select(&labels, &probs, &cfg).unwrap();
            let n_pos = labels.iter().filter(|&&l| l == AnchorLabel::Positive).count();
            let n_neg = labels.iter().filter(|&&l| l == AnchorLabel::Negative).count();
            prop_assert_eq!(sel.selected_pos.len(), n_pos.min(max_pos));
            prop_assert_eq!(sel.selected_neg.len(), n_neg.min(128 - sel.selected_pos.len()));
            prop_assert!(sel.iter().all(|i| labels[i] != AnchorLabel::Ignore));
            // every unselected positive is at least as confident as every selected one
            let worst_sel = sel.selected_pos.iter().map(|&i| (probs[i], i)).fold((f64::MIN, 0), |a, b| if (b.0, b.1) > a { b } else { a });
            for i in 0..labels.len() {
                if labels[i] == AnchorLabel::Positive && !sel.selected_pos.contains(&i) {
                    prop_assert!((probs[i], i) > worst_sel);
                }
            }
        }

        #[test]
        fn ohem_ignores_scores_away_from_threshold((labels, probs) in arb_labels(), bump in 0.0..1.0f64) {
            let cfg = OhemConfig { batch_anchors: 64, max_pos: 16 };
            let sel = ohem_select(&labels, &probs, &cfg).unwrap();
            // push unselected positives further up and unselected negatives further down
            let mut moved = probs.clone();
            for i in 0..labels.len() {
                let picked = sel.selected_pos.contains(&i) || sel.selected_neg.contains(&i);
                if picked { continue; }
                match labels[i] {
                    AnchorLabel::Positive => moved[i] = probs[i] + bump * (1.0 - probs[i]),
                    AnchorLabel::Negative => moved[i] = probs[i] * (1.0 - bump),
                    AnchorLabel::Ignore => moved[i] = bump,
                }
            }
            let again = ohem_select(&labels, &moved, &cfg).unwrap();
            prop_assert_eq!(sel, again);
        }

        #[test]
        fn reg_mask_covers_positives(
            boxes in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 4.0..48.0f64, 0.6..1.4f64, any::<bool>()), 0..5)
        ) {
            let grid = generate_anchors(40, 40, &AnchorConfig::default()).unwrap();
            let gts: Vec<_> = boxes.iter().map(|&(x, y, s, r, ign)| GroundTruth {
                bbox: BBox::from_xywh(x, y, s, s * r),
                ignored: ign,
            }).collect();
            let cfg = MatchConfig::default();
            let set = assign_targets(&grid, &gts, &cfg).unwrap();
            prop_assert_eq!(&set, &brute_force(&grid, &gts, &cfg));
            for a in 0..grid.len() {
                if set.labels[a] == AnchorLabel::Positive {
                    prop_assert!(set.reg_mask[a]);
                }
            }
        }
    }
}
