//! The training loop.
//!
//! Each epoch every worker builds its own plan from its own difficulty table
//! (hard image mining), then the workers' passes are interleaved in
//! worker-index order. A pass augments one image, runs the detector, labels
//! anchors, records the image's WPAS, selects anchors for the classification
//! loss and backpropagates. Gradients are summed over passes and averaged at
//! each optimizer step, which happens after `itersize * workers` passes.
//!
//! Every random draw is keyed by `(seed, epoch, worker, position)`, so a run
//! resumed from an epoch checkpoint replays exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{augment, hflip};
use crate::config::RunConfig;
use crate::datasets::{decode_ppm, ImageRecord};
use crate::error::{invalid, Error, Result};
use crate::geometry::{generate_anchors, GroundTruth};
use crate::image::Image;
use crate::mining::{build_epoch_plan, ignored_ratio, ignored_ratio_csv, wpas, DifficultyTable};
use crate::net::checkpoint::Checkpoint;
use crate::net::loss::{smooth_l1_loss, softmax_ce_loss};
use crate::net::optim::{lr_at, sgd_momentum_step, validate_schedule, LrStage};
use crate::net::{DetectorModel, Real};
use crate::rng;
use crate::targets::{assign_targets, ohem_select};

/// Suffix marking the mirrored copy of a training image.
pub const FLIP_SUFFIX: &str = "|flip";

const AUG_STREAM: u64 = 0xa09;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Passes per worker accumulated into one optimizer step.
    pub itersize: usize,
    /// Logical data-parallel workers, simulated sequentially.
    pub workers: usize,
    pub momentum: f64,
    /// Weight of the regression loss against the classification loss.
    pub reg_weight: f64,
    pub lr_schedule: Vec<LrStage>,
    /// Learning-rate multipliers by parameter-name prefix (longest wins).
    pub lr_mults: BTreeMap<String, f64>,
    /// Train on mirrored copies as separate images.
    pub flip_double: bool,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 30,
            itersize: 2,
            workers: 4,
            momentum: 0.9,
            reg_weight: 1.0,
            lr_schedule: vec![
                LrStage {
                    iterations: 46_000,
                    lr: 0.004,
                },
                LrStage {
                    iterations: 14_000,
                    lr: 0.0004,
                },
            ],
            lr_mults: BTreeMap::from([
                ("conv1.".to_string(), 0.0),
                ("conv2.".to_string(), 0.0),
                ("conv3.".to_string(), 2.0),
                ("conv4.".to_string(), 2.0),
                ("conv5.".to_string(), 2.0),
            ]),
            flip_double: true,
            checkpoint_every: 1,
        }
    }

    pub fn toy() -> Self {
        Self {
            epochs: 20,
            workers: 1,
            lr_schedule: vec![
                LrStage {
                    iterations: 1_500,
                    lr: 0.01,
                },
                LrStage {
                    iterations: 2_500,
                    lr: 0.001,
                },
            ],
            lr_mults: BTreeMap::new(),
            checkpoint_every: 5,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.itersize == 0 || self.workers == 0 {
            return Err(invalid("itersize and workers must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.reg_weight < 0.0 {
            return Err(invalid("need momentum in [0, 1) and a non-negative reg_weight"));
        }
        if self.lr_mults.values().any(|&m| m.is_nan() || m < 0.0) {
            return Err(invalid("learning-rate multipliers must be non-negative"));
        }
        validate_schedule(&self.lr_schedule)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetric {
    pub iter: u64,
    pub epoch: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub mean_wpas: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetric {
    pub epoch: usize,
    pub ignored_ratio: f64,
    pub num_trained: usize,
}

/// Losses and score of one forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassStats {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub wpas: f64,
    pub num_positive: usize,
}

/// Sums over the passes since the last optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Pending {
    passes: usize,
    cls: f64,
    reg: f64,
    wpas: f64,
}

/// One training image as seen by the sampler.
#[derive(Debug, Clone)]
struct Sample {
    record: usize,
    flipped: bool,
}

/// Training images with their decoded pixels kept in memory as bytes.
pub struct TrainSet {
    records: Vec<ImageRecord>,
    pixels: Vec<Vec<u8>>,
    samples: BTreeMap<String, Sample>,
}

impl TrainSet {
    pub fn load(records: Vec<ImageRecord>, flip_double: bool) -> Result<Self> {
        let mut pixels = Vec::with_capacity(records.len());
        let mut samples = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let img = decode_ppm(&fs::read(&r.path)?)?;
            pixels.push(img.to_rgb8());
            let mut add = |id: String, flipped: bool| {
                if samples.insert(id.clone(), Sample { record: i, flipped }).is_some() {
                    return Err(invalid(format!("duplicate training image id `{id}`")));
                }
                Ok(())
            };
            add(r.id.clone(), false)?;
            if flip_double {
                add(format!("{}{FLIP_SUFFIX}", r.id), true)?;
            }
        }
        Ok(Self {
            records,
            pixels,
            samples,
        })
    }

    /// Every sample id in sorted order.
    pub fn ids(&self) -> Vec<String> {
        self.samples.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The image and ground truth behind a sample id, mirrored if needed.
    pub fn get(&self, id: &str) -> Result<(Image, Vec<GroundTruth>)> {
        let s = self.samples.get(id).ok_or_else(|| Error::UnknownImage(id.to_owned()))?;
        let r = &self.records[s.record];
        let img = Image::from_rgb8(r.width, r.height, &self.pixels[s.record])?;
        let gts = r.ground_truth();
        Ok(if s.flipped { hflip(&img, &gts) } else { (img, gts) })
    }
}

pub struct TrainState {
    pub model: DetectorModel<f32>,
    /// One difficulty table per worker, covering that worker's shard.
    pub tables: Vec<DifficultyTable>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// The next epoch to run.
    pub epoch: usize,
    pending: Pending,
    pub steps: Vec<StepMetric>,
    pub epochs: Vec<EpochMetric>,
}

/// Worker `w` of `workers` owns every `workers`-th id.
pub fn shard(ids: &[String], worker: usize, workers: usize) -> Vec<String> {
    ids.iter().skip(worker).step_by(workers).cloned().collect()
}

impl TrainState {
    pub fn new(cfg: &RunConfig, ids: &[String]) -> Result<Self> {
        cfg.validate()?;
        let mut model = DetectorModel::new(&cfg.net, &cfg.anchors, cfg.seed)?;
        model.set_lr_mults(&cfg.train.lr_mults);
        let workers = cfg.train.workers;
        Ok(Self {
            model,
            tables: (0..workers)
                .map(|w| DifficultyTable::new(shard(ids, w, workers)))
                .collect(),
            step: 0,
            epoch: 0,
            pending: Pending::default(),
            steps: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn total_visits(&self) -> usize {
        self.epochs.iter().map(|e| e.num_trained).sum()
    }
}

/// One forward/backward pass on an already augmented image. Gradients are
/// added to the model's accumulators; `table` receives the image's WPAS.
pub fn train_iteration<T: Real>(
    model: &mut DetectorModel<T>,
    table: &mut DifficultyTable,
    cfg: &RunConfig,
    id: &str,
    image: &Image,
    gts: &[GroundTruth],
) -> Result<PassStats> {
    let input = DetectorModel::<T>::prepare_input(image);
    let (out, cache) = model.forward(&input)?;
    let grid = generate_anchors(input.h(), input.w(), &cfg.anchors)?;
    let labeled = assign_targets(&grid, gts, &cfg.matching)?;
    let (face, bg) = out.face_bg_logits();
    let positives = labeled.positives();
    let score = wpas(&face, &bg, &positives);
    table.record_score(id, score, &cfg.him)?;

    let probs = out.face_probs();
    let selection = ohem_select(&labeled.labels, &probs, &cfg.ohem)?;
    let (cls_loss, grad_cls) = softmax_ce_loss(&out.cls, &labeled.labels, &selection)?;
    let (reg_loss, mut grad_reg) = smooth_l1_loss(&out.reg, &labeled.reg_targets, &labeled.reg_mask)?;
    let lambda = T::from_f64_lossy(cfg.train.reg_weight);
    grad_reg.data_mut().iter_mut().for_each(|g| *g *= lambda);
    model.backward(&cache, &grad_cls, &grad_reg, false)?;
    Ok(PassStats {
        cls_loss: cls_loss.to_f64().unwrap_or(f64::NAN),
        reg_loss: reg_loss.to_f64().unwrap_or(f64::NAN),
        wpas: score,
        num_positive: positives.len(),
    })
}

/// Averages the accumulated gradients over `passes` and takes one SGD step.
pub fn apply_step<T: Real>(model: &mut DetectorModel<T>, passes: usize, lr: f64, momentum: f64) {
    let inv = T::one() / T::from_usize(passes.max(1)).expect("count fits");
    let mut params = model.params_mut();
    for p in params.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= inv);
    }
    sgd_momentum_step(&mut params, lr, momentum);
    params.into_iter().for_each(|p| p.zero_grad());
}

/// Augments and trains on one sample, then steps the optimizer if enough
/// passes have accumulated.
fn visit(
    state: &mut TrainState,
    set: &TrainSet,
    cfg: &RunConfig,
    id: &str,
    worker: usize,
    position: usize,
) -> Result<()> {
    let (img, gts) = set.get(id)?;
    let mut r = rng::stream(
        cfg.seed,
        &[AUG_STREAM, state.epoch as u64, worker as u64, position as u64],
    );
    let (img, gts) = augment(&img, &gts, &cfg.augment, &mut r)?;
    let stats = train_iteration(&mut state.model, &mut state.tables[worker], cfg, id, &img, &gts)?;
    let p = &mut state.pending;
    p.passes += 1;
    p.cls += stats.cls_loss;
    p.reg += stats.reg_loss;
    p.wpas += stats.wpas;
    if p.passes == cfg.train.itersize * cfg.train.workers {
        let lr = lr_at(state.step, &cfg.train.lr_schedule)?;
        apply_step(&mut state.model, p.passes, lr, cfg.train.momentum);
        let n = p.passes as f64;
        state.steps.push(StepMetric {
            iter: state.step,
            epoch: state.epoch,
            cls_loss: p.cls / n,
            reg_loss: p.reg / n,
            mean_wpas: p.wpas / n,
        });
        state.step += 1;
        state.pending = Pending::default();
    }
    Ok(())
}

/// Runs one epoch: builds each worker's plan, then trains on the plans
/// interleaved position by position in worker order.
pub fn train_epoch(state: &mut TrainState, set: &TrainSet, cfg: &RunConfig) -> Result<EpochMetric> {
    let all = set.ids();
    let workers = cfg.train.workers;
    let plans: Vec<_> = (0..workers)
        .map(|w| {
            build_epoch_plan(
                &shard(&all, w, workers),
                &state.tables[w],
                &cfg.him,
                state.epoch,
                w,
                cfg.seed,
            )
        })
        .collect();
    let num_trained: usize = plans.iter().map(|p| p.len()).sum();
    let longest = plans.iter().map(|p| p.len()).max().unwrap_or(0);
    if num_trained == 0 {
        log::warn!("epoch {}: empty training list", state.epoch);
    }
    for position in 0..longest {
        for (w, plan) in plans.iter().enumerate() {
            if let Some(id) = plan.ids.get(position) {
                visit(state, set, cfg, id, w, position)?;
            }
        }
    }
    let dropped = plans
        .iter()
        .zip(0..)
        .map(|(p, w)| ignored_ratio(p, &shard(&all, w, workers)) * shard(&all, w, workers).len() as f64)
        .sum::<f64>();
    let metric = EpochMetric {
        epoch: state.epoch,
        ignored_ratio: if all.is_empty() {
            0.0
        } else {
            dropped.round() / all.len() as f64
        },
        num_trained,
    };
    state.epochs.push(metric);
    state.epoch += 1;
    Ok(metric)
}

pub fn steps_csv(steps: &[StepMetric]) -> String {
    let mut s = String::from("iter,epoch,cls_loss,reg_loss,mean_wpas\n");
    for m in steps {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            m.iter, m.epoch, m.cls_loss, m.reg_loss, m.mean_wpas
        );
    }
    s
}

pub fn epochs_csv(epochs: &[EpochMetric]) -> String {
    let mut s = String::from("epoch,ignored_ratio,num_trained\n");
    for e in epochs {
        let _ = writeln!(s, "{},{:.6},{}", e.epoch, e.ignored_ratio, e.num_trained);
    }
    s
}

fn exact_steps(steps: &[StepMetric]) -> String {
    steps
        .iter()
        .map(|m| {
            format!(
                "{} {} {:?} {:?} {:?}\n",
                m.iter, m.epoch, m.cls_loss, m.reg_loss, m.mean_wpas
            )
        })
        .collect()
}

fn exact_epochs(epochs: &[EpochMetric]) -> String {
    epochs
        .iter()
        .map(|e| format!("{} {:?} {}\n", e.epoch, e.ignored_ratio, e.num_trained))
        .collect()
}

fn parse_fields<'a>(line: &'a str, n: usize, what: &str) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != n {
        return Err(Error::Format(format!("bad {what} record `{line}` in checkpoint")));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad number `{s}` in checkpoint")))
}

impl TrainState {
    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint<f32>> {
        let mut ck = Checkpoint::new();
        ck.store_model(&self.model);
        let meta = BTreeMap::from([
            ("step".to_string(), self.step.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("pending_passes".to_string(), self.pending.passes.to_string()),
            ("pending_cls".to_string(), format!("{:?}", self.pending.cls)),
            ("pending_reg".to_string(), format!("{:?}", self.pending.reg)),
            ("pending_wpas".to_string(), format!("{:?}", self.pending.wpas)),
            ("workers".to_string(), self.tables.len().to_string()),
        ]);
        ck.set_meta(&meta);
        ck.insert_bytes("config.toml", cfg.to_toml()?.into_bytes());
        for (w, t) in self.tables.iter().enumerate() {
            ck.insert_bytes(format!("difficulty/{w}"), t.to_csv_string().into_bytes());
        }
        ck.insert_bytes("steps", exact_steps(&self.steps).into_bytes());
        ck.insert_bytes("epochs", exact_epochs(&self.epochs).into_bytes());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>, cfg: &RunConfig) -> Result<Self> {
        let meta = ck.meta()?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        let workers: usize = num(get("workers")?)?;
        if workers != cfg.train.workers {
            return Err(invalid(format!(
                "checkpoint has {workers} workers, config has {}",
                cfg.train.workers
            )));
        }
        let mut model = DetectorModel::new(&cfg.net, &cfg.anchors, cfg.seed)?;
        model.set_lr_mults(&cfg.train.lr_mults);
        ck.restore_model(&mut model)?;
        let tables = (0..workers)
            .map(|w| DifficultyTable::read_csv(ck.bytes(&format!("difficulty/{w}"))?))
            .collect::<Result<Vec<_>>>()?;
        let text = |name: &str| -> Result<String> {
            String::from_utf8(ck.bytes(name)?.to_vec()).map_err(|_| Error::Format(format!("`{name}` is not utf-8")))
        };
        let steps = text("steps")?
            .lines()
            .map(|l| {
                let f = parse_fields(l, 5, "step")?;
                Ok(StepMetric {
                    iter: num(f[0])?,
                    epoch: num(f[1])?,
                    cls_loss: num(f[2])?,
                    reg_loss: num(f[3])?,
                    mean_wpas: num(f[4])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let epochs = text("epochs")?
            .lines()
            .map(|l| {
                let f = parse_fields(l, 3, "epoch")?;
                Ok(EpochMetric {
                    epoch: num(f[0])?,
                    ignored_ratio: num(f[1])?,
                    num_trained: num(f[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            tables,
            step: num(get("step")?)?,
            epoch: num(get("epoch")?)?,
            pending: Pending {
                passes: num(get("pending_passes")?)?,
                cls: num(get("pending_cls")?)?,
                reg: num(get("pending_reg")?)?,
                wpas: num(get("pending_wpas")?)?,
            },
            steps,
            epochs,
        })
    }
}

/// Loads the model and the configuration it was trained with.
pub fn load_model(path: &Path) -> Result<(DetectorModel<f32>, RunConfig)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let text =
        std::str::from_utf8(ck.bytes("config.toml")?).map_err(|_| Error::Format("config is not utf-8".into()))?;
    let cfg = RunConfig::from_toml(text)?;
    let mut model = DetectorModel::new(&cfg.net, &cfg.anchors, cfg.seed)?;
    ck.restore_model(&mut model)?;
    Ok((model, cfg))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:03}.ckpt")
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub model: PathBuf,
    pub steps_csv: PathBuf,
    pub epochs_csv: PathBuf,
    pub ignored_ratio_csv: PathBuf,
}

/// Trains for `cfg.train.epochs` epochs, writing logs, per-epoch difficulty
/// tables and checkpoints into `out_dir`. With `resume`, continues from a
/// checkpoint written by an earlier call with the same configuration.
pub fn train(
    cfg: &RunConfig,
    records: Vec<ImageRecord>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(TrainState, TrainOutputs)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    cfg.echo(out_dir)?;
    let set = TrainSet::load(records, cfg.train.flip_double)?;
    let ids = set.ids();
    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?, cfg)?,
        None => TrainState::new(cfg, &ids)?,
    };
    let outputs = TrainOutputs {
        model: out_dir.join("model.ckpt"),
        steps_csv: out_dir.join("metrics.csv"),
        epochs_csv: out_dir.join("epochs.csv"),
        ignored_ratio_csv: out_dir.join("ignored_ratio.csv"),
    };
    while state.epoch < cfg.train.epochs {
        let start = std::time::Instant::now();
        let m = train_epoch(&mut state, &set, cfg)?;
        let recent = state
            .steps
            .iter()
            .rev()
            .take_while(|s| s.epoch == m.epoch)
            .collect::<Vec<_>>();
        let mean = |f: fn(&StepMetric) -> f64| recent.iter().map(|s| f(s)).sum::<f64>() / recent.len().max(1) as f64;
        log::info!(
            "epoch {:>3}: trained {:>4} ignored {:.3} cls {:.4} reg {:.4} wpas {:.3} ({:.1}s)",
            m.epoch,
            m.num_trained,
            m.ignored_ratio,
            mean(|s| s.cls_loss),
            mean(|s| s.reg_loss),
            mean(|s| s.mean_wpas),
            start.elapsed().as_secs_f64()
        );
        for (w, t) in state.tables.iter().enumerate() {
            let name = if state.tables.len() == 1 {
                format!("difficulty_epoch{:03}.csv", m.epoch)
            } else {
                format!("difficulty_epoch{:03}_worker{w}.csv", m.epoch)
            };
            fs::write(out_dir.join(name), t.to_csv_string())?;
        }
        fs::write(&outputs.steps_csv, steps_csv(&state.steps))?;
        fs::write(&outputs.epochs_csv, epochs_csv(&state.epochs))?;
        let history: Vec<(usize, f64)> = state.epochs.iter().map(|e| (e.epoch, e.ignored_ratio)).collect();
        fs::write(&outputs.ignored_ratio_csv, ignored_ratio_csv(&history))?;
        let last = state.epoch == cfg.train.epochs;
        if last || (cfg.train.checkpoint_every > 0 && state.epoch % cfg.train.checkpoint_every == 0) {
            let bytes = state.to_checkpoint(cfg)?.to_bytes();
            fs::write(out_dir.join(checkpoint_name(m.epoch)), &bytes)?;
            if last {
                fs::write(&outputs.model, &bytes)?;
            }
        }
    }
    Ok((state, outputs))
}
