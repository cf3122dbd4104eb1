//! Helpers shared by the integration tests: brute-force references,
//! finite-difference gradient checks and a toy training pipeline.
#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use facemine::config::RunConfig;
use facemine::datasets::{generate_synthetic, load_records, ImageRecord, ANNOTATION_FILE};
use facemine::evaluate::{evaluate_dataset, ground_truth_set, SubsetResult};
use facemine::inference::{detect_images, Detection, InferConfig};
use facemine::net::{DetectorModel, Tensor};
use facemine::targets::AnchorLabel;
use facemine::trainer::{train, TrainState};
use facemine::{BBox, GroundTruth};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- references

/// IoU from corner coordinates, written out independently of the crate.
pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// First index holding the maximum; `None` for an empty slice.
fn argmax_first(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// Anchor labels and regression mask from a full IoU matrix.
pub fn match_anchors_ref(
    anchors: &[BBox],
    gts: &[GroundTruth],
    pos: f64,
    neg: f64,
    reg: f64,
) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
    let mut labels = Vec::new();
    let mut matched = Vec::new();
    for a in anchors {
        let all: Vec<f64> = gts.iter().map(|g| iou_ref(a, &g.bbox)).collect();
        let valid: Vec<f64> = gts
            .iter()
            .zip(&all)
            .map(|(g, &v)| if g.ignored { -1.0 } else { v })
            .collect();
        let best_all = argmax_first(&all);
        let best_valid = argmax_first(&valid).filter(|&g| !gts[g].ignored);
        let top = best_all.map_or(0.0, |g| all[g]);
        let label = match (best_all, best_valid) {
            (Some(g), _) if gts[g].ignored && top >= neg => AnchorLabel::Ignore,
            (_, Some(v)) if all[v] > pos => AnchorLabel::Positive,
            _ if top < neg => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        };
        labels.push(label);
        matched.push(best_valid.filter(|&v| all[v] > reg));
    }
    (labels, matched)
}

/// NMS by repeated arg-max over the surviving set.
pub fn nms_ref(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..dets.len() {
            if alive[j] && iou_ref(&dets[b].bbox, &dets[j].bbox) > thresh {
                alive[j] = false;
            }
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefOutcome {
    Tp,
    Fp,
    Ignore,
}

/// Detection outcomes under greedy score-order matching; ground truth outside
/// `[min_height, inf)` or flagged ignored only absorbs detections.
pub fn match_dets_ref(dets: &[Detection], gts: &[GroundTruth], min_height: f64, thresh: f64) -> Vec<RefOutcome> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let in_subset: Vec<bool> = gts
        .iter()
        .map(|g| !g.ignored && g.bbox.y_max - g.bbox.y_min >= min_height)
        .collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![RefOutcome::Fp; dets.len()];
    for i in order {
        let ious: Vec<f64> = gts.iter().map(|g| iou_ref(&dets[i].bbox, &g.bbox)).collect();
        let free: Vec<f64> = (0..gts.len())
            .map(|g| {
                if in_subset[g] && !taken[g] && ious[g] >= thresh {
                    ious[g]
                } else {
                    -1.0
                }
            })
            .collect();
        match argmax_first(&free).filter(|&g| free[g] >= 0.0) {
            Some(g) => {
                taken[g] = true;
                out[i] = RefOutcome::Tp;
            }
            None if (0..gts.len()).any(|g| !in_subset[g] && ious[g] >= thresh) => out[i] = RefOutcome::Ignore,
            None => {}
        }
    }
    out
}

/// Box with integer corners inside `w x h`, at least one pixel each way.
pub fn int_box(r: &mut impl Rng, w: u32, h: u32) -> BBox {
    let x0 = r.random_range(0..w - 1);
    let y0 = r.random_range(0..h - 1);
    let x1 = r.random_range(x0 + 1..=w);
    let y1 = r.random_range(y0 + 1..=h);
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

/// Scores on a coarse grid so ties are common.
pub fn random_dets(r: &mut impl Rng, n: usize, w: u32, h: u32) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: int_box(r, w, h),
            score: r.random_range(0..8) as f64 / 8.0,
        })
        .collect()
}

// ---------------------------------------------------------- gradient checks

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub const FD_EPS: f64 = 1e-6;

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + FD_EPS;
            let up = f(x);
            x[i] = keep - FD_EPS;
            let down = f(x);
            x[i] = keep;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn random_tensor(r: &mut impl Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Random values kept at least `gap` away from zero, for ops with a kink there.
pub fn away_from_zero(r: &mut impl Rng, shape: [usize; 4], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.random_range(gap..1.0);
        if r.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(probe * t)`: turns a tensor-valued op into a scalar with gradient `probe`.
pub fn dot(t: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// A narrow network that keeps end-to-end checks fast.
pub fn tiny_net() -> facemine::net::NetConfig {
    facemine::net::NetConfig {
        stem_channels: 3,
        stage_a_channels: 4,
        stage_b_channels: 5,
        reduce_channels: 3,
        detect_channels: 4,
        head_channels: 3,
        output_init_std: 0.3,
    }
}

pub fn tiny_model(seed: u64) -> DetectorModel<f64> {
    let mut m = DetectorModel::new(&tiny_net(), &facemine::AnchorConfig::default(), seed).unwrap();
    // moves biases off zero so no unit sits exactly on a ReLU kink
    m.jitter(0.1, seed);
    m
}

// ------------------------------------------------------------ toy pipeline

pub struct ToyData {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

pub const TRAIN_IMAGES: usize = 200;
pub const VAL_IMAGES: usize = 50;
pub const TRAIN_DATA_SEED: u64 = 7;
pub const VAL_DATA_SEED: u64 = 1007;

/// The 200/50 synthetic split used by the end-to-end criteria.
pub fn toy_data() -> ToyData {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = RunConfig::toy();
    let mut synth = cfg.synth.clone();
    synth.seed = TRAIN_DATA_SEED;
    generate_synthetic(&synth, TRAIN_IMAGES, &root.join("train")).unwrap();
    synth.seed = VAL_DATA_SEED;
    generate_synthetic(&synth, VAL_IMAGES, &root.join("val")).unwrap();
    ToyData {
        train: load_records(&root.join("train").join(ANNOTATION_FILE)).unwrap(),
        val: load_records(&root.join("val").join(ANNOTATION_FILE)).unwrap(),
        root,
        _dir: dir,
    }
}

pub struct ToyRun {
    pub out: PathBuf,
    pub state: TrainState,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub results: Vec<SubsetResult>,
    pub dets: BTreeMap<String, Vec<Detection>>,
}

impl ToyRun {
    pub fn ap(&self, subset: &str) -> f64 {
        self.results.iter().find(|r| r.name == subset).expect("subset").ap
    }
}

pub fn val_images(data: &ToyData) -> Vec<(String, PathBuf)> {
    data.val.iter().map(|r| (r.id.clone(), r.path.clone())).collect()
}

pub fn eval_model(
    model: &DetectorModel<f32>,
    cfg: &RunConfig,
    infer: &InferConfig,
    data: &ToyData,
) -> (Vec<SubsetResult>, BTreeMap<String, Vec<Detection>>, f64) {
    let start = Instant::now();
    let dets = detect_images(model, &cfg.anchors, &val_images(data), infer).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let results = evaluate_dataset(&ground_truth_set(&data.val), &dets, &cfg.eval).unwrap();
    (results, dets, secs)
}

/// Default toy training with the given seed, then validation-set evaluation.
pub fn toy_run(data: &ToyData, seed: u64, him: bool, out: &Path) -> ToyRun {
    let mut cfg = RunConfig::toy();
    cfg.seed = seed;
    cfg.him.enabled = him;
    let start = Instant::now();
    let (state, _) = train(&cfg, data.train.clone(), out, None).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let (results, dets, eval_secs) = eval_model(&state.model, &cfg, &cfg.infer, data);
    let summary = facemine::evaluate::summary_csv(&results);
    std::fs::write(out.join("summary.csv"), summary).unwrap();
    ToyRun {
        out: out.to_path_buf(),
        state,
        train_secs,
        eval_secs,
        results,
        dets,
    }
}

// ------------------------------------------------------- shift equivariance

/// Runs the detector on a random image and on the same image shifted by
/// `shift` pixels both ways (by cropping), and returns the largest output
/// difference over cells at least `margin` cells from every border of both
/// maps, with the number of cells compared.
pub fn shift_equivariance(shift: usize, margin: usize, seed: u64) -> (f64, usize) {
    assert_eq!(shift % 16, 0, "crops must keep the input aligned");
    let mut r = rng(seed);
    let model = tiny_model(seed);
    let size = 320;
    let full = random_tensor(&mut r, [1, 3, size, size]);
    let cropped_size = size - shift;
    let cropped = Tensor::from_fn([1, 3, cropped_size, cropped_size], |i| {
        let (c, rest) = (i / (cropped_size * cropped_size), i % (cropped_size * cropped_size));
        let (y, x) = (rest / cropped_size, rest % cropped_size);
        full.get(0, c, y + shift, x + shift)
    });
    let a = model.predict(&full).unwrap();
    let b = model.predict(&cropped).unwrap();
    let cell_shift = shift / 8;
    let (bh, bw) = (b.cls.h(), b.cls.w());
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for i in margin..bh.saturating_sub(margin) {
        for j in margin..bw.saturating_sub(margin) {
            cells += 1;
            for (ta, tb) in [(&a.cls, &b.cls), (&a.reg, &b.reg)] {
                for c in 0..ta.c() {
                    worst = worst.max((ta.get(0, c, i + cell_shift, j + cell_shift) - tb.get(0, c, i, j)).abs());
                }
            }
        }
    }
    (worst, cells)
}
