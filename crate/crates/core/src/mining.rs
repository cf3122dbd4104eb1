//! Hard image mining.
//!
//! Each image is scored by its worst positive anchor score (WPAS): the lowest
//! face probability among the anchors labeled positive. Images scoring above
//! the easy threshold are dropped from the next epoch's list with probability
//! `drop_prob`; everything else is always trained on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HimConfig {
    pub drop_prob: f64,
    pub easy_threshold: f64,
    pub enabled: bool,
}

impl Default for HimConfig {
    fn default() -> Self {
        Self {
            drop_prob: 0.7,
            easy_threshold: 0.85,
            enabled: true,
        }
    }
}

impl HimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) || !(0.0..=1.0).contains(&self.easy_threshold) {
            return Err(invalid("drop_prob and easy_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Face-class softmax probability from a (face, background) logit pair.
pub fn face_probability(face_logit: f64, bg_logit: f64) -> f64 {
    let m = face_logit.max(bg_logit);
    let e1 = (face_logit - m).exp();
    let e0 = (bg_logit - m).exp();
    e1 / (e1 + e0)
}

/// Worst positive anchor score. An image without positive anchors scores 1.0.
pub fn wpas(face_logit: &[f64], bg_logit: &[f64], positive_set: &[usize]) -> f64 {
    positive_set
        .iter()
        .map(|&a| face_probability(face_logit[a], bg_logit[a]))
        .fold(1.0, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Difficulty {
    pub last_wpas: Option<f64>,
    pub is_easy: bool,
}

/// Per-image difficulty marks. Every image starts out hard.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DifficultyTable {
    entries: BTreeMap<String, Difficulty>,
}

impl DifficultyTable {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: ids.into_iter().map(|id| (id.into(), Difficulty::default())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Difficulty> {
        self.entries.get(id)
    }

    pub fn is_easy(&self, id: &str) -> bool {
        self.entries.get(id).is_some_and(|d| d.is_easy)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Difficulty)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_easy(&self) -> usize {
        self.entries.values().filter(|d| d.is_easy).count()
    }

    pub fn record_score(&mut self, id: &str, score: f64, cfg: &HimConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(invalid(format!("WPAS {score} outside [0, 1]")));
        }
        let entry = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::UnknownImage(id.to_owned()))?;
        entry.last_wpas = Some(score);
        entry.is_easy = score > cfg.easy_threshold;
        Ok(())
    }

    /// CSV `image_id,last_wpas,is_easy`; `last_wpas` is empty for images
    /// never scored. Scores are written with round-trip precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "image_id,last_wpas,is_easy")?;
        for (id, d) in &self.entries {
            let score = d.last_wpas.map(|s| format!("{s:?}")).unwrap_or_default();
            writeln!(w, "{id},{score},{}", d.is_easy as u8)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ids are utf-8")
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "image_id,last_wpas,is_easy" {
                    return Err(Error::Format(format!("unexpected difficulty header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("difficulty row {}: `{line}`", n + 1));
            let mut parts = line.rsplitn(3, ',');
            let easy = parts.next().ok_or_else(bad)?;
            let score = parts.next().ok_or_else(bad)?;
            let id = parts.next().ok_or_else(bad)?;
            let last_wpas = if score.is_empty() {
                None
            } else {
                Some(score.parse::<f64>().map_err(|_| bad())?)
            };
            let is_easy = match easy {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            };
            entries.insert(id.to_owned(), Difficulty { last_wpas, is_easy });
        }
        Ok(Self { entries })
    }
}

/// The training list for one epoch on one worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub ids: Vec<String>,
    pub epoch: usize,
    pub worker: usize,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Shuffles the full list, then drops each easy image independently with
/// probability `drop_prob`. Hard images are always kept. Randomness is keyed
/// by `(seed, epoch, worker)` so drops are re-drawn every epoch.
pub fn build_epoch_plan(
    all_ids: &[String],
    table: &DifficultyTable,
    cfg: &HimConfig,
    epoch: usize,
    worker: usize,
    seed: u64,
) -> EpochPlan {
    let mut rng = rng::stream(seed, &[0x48494d, epoch as u64, worker as u64]);
    let mut ids = all_ids.to_vec();
    ids.shuffle(&mut rng);
    if cfg.enabled {
        ids.retain(|id| !table.is_easy(id) || rng.random::<f64>() >= cfg.drop_prob);
    }
    EpochPlan { ids, epoch, worker }
}

pub fn ignored_ratio(plan: &EpochPlan, all_ids: &[String]) -> f64 {
    if all_ids.is_empty() {
        return 0.0;
    }
    let dropped = all_ids.len().saturating_sub(plan.ids.len());
    dropped as f64 / all_ids.len() as f64
}

/// CSV `epoch,ratio` for the ignored-ratio history.
pub fn ignored_ratio_csv(history: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,ratio\n");
    for (epoch, ratio) in history {
        let _ = writeln!(s, "{epoch},{ratio:.6}");
    }
    s
}
