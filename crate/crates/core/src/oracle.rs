//! Deterministic rubric scorer used as the ground-truth annotator.
//!
//! Each dimension has a metric in [0, 1] and two thresholds. The label is
//! Good at or above `good_min`, Normal at or above `normal_min`, else Bad.
//! The thresholds are our quantitative reading of a qualitative rubric.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::promptgen::CategoryLists;
use crate::types::{Annotation, Annotator, Dimension, Label, Prompt, StageTag, Symbol, Video};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub good_min: f64,
    pub normal_min: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.normal_min && self.normal_min < self.good_min && self.good_min <= 1.0) {
            return Err(CoreError::Config(format!(
                "rubric thresholds must satisfy 0 <= normal_min < good_min <= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Ties resolve upward.
    pub fn label(&self, metric: f64) -> Label {
        if metric >= self.good_min {
            Label::Good
        } else if metric >= self.normal_min {
            Label::Normal
        } else {
            Label::Bad
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { good_min: 0.9, normal_min: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct OracleRubric {
    pub semantic_consistency: Thresholds,
    pub motion_smoothness: Thresholds,
    pub video_fidelity: Thresholds,
}


impl OracleRubric {
    pub fn get(&self, d: Dimension) -> Thresholds {
        match d {
            Dimension::SemanticConsistency => self.semantic_consistency,
            Dimension::MotionSmoothness => self.motion_smoothness,
            Dimension::VideoFidelity => self.video_fidelity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Dimension::ALL.into_iter().try_for_each(|d| self.get(d).validate())
    }
}

/// Phrase describing which rubric level a metric falls in.
fn criterion(d: Dimension, label: Label) -> &'static str {
    match (d, label) {
        (Dimension::SemanticConsistency, Label::Good) => "all caption elements visible",
        (Dimension::SemanticConsistency, Label::Normal) => "some caption elements missing",
        (Dimension::SemanticConsistency, Label::Bad) => "most caption elements missing",
        (Dimension::MotionSmoothness, Label::Good) => "frames change gradually",
        (Dimension::MotionSmoothness, Label::Normal) => "noticeable frame to frame jitter",
        (Dimension::MotionSmoothness, Label::Bad) => "frames change abruptly",
        (Dimension::VideoFidelity, Label::Good) => "few artifact cells",
        (Dimension::VideoFidelity, Label::Normal) => "some artifact cells",
        (Dimension::VideoFidelity, Label::Bad) => "many artifact cells",
    }
}

/// The templated reason: dimension title, metric to two decimals, and the
/// rubric criterion the metric satisfies.
pub fn reason_text(d: Dimension, metric: f64, label: Label) -> String {
    format!("{} {:.2} : {}", d.title(), metric, criterion(d, label))
}

/// Every word any oracle reason can contain, metric numbers excluded.
pub fn reason_words() -> BTreeSet<&'static str> {
    let mut words = BTreeSet::new();
    for d in Dimension::ALL {
        words.extend(d.title().split(' '));
        for l in Label::ALL {
            words.extend(criterion(d, l).split(' '));
        }
    }
    words.insert(":");
    words
}

/// Symbol vocabulary layout and the category-item → symbol mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolConfig {
    pub vocab_size: usize,
    /// Symbol painted where nothing is depicted.
    pub background: Symbol,
    pub artifacts: Vec<Symbol>,
    pub item_symbols: BTreeMap<String, Symbol>,
}

impl SymbolConfig {
    /// Default layout: symbol 0 is background, the last two symbols are
    /// artifacts, and category items are assigned round-robin over the
    /// remaining "content" symbols in list order.
    pub fn round_robin(vocab_size: usize, lists: &CategoryLists) -> Result<Self> {
        if vocab_size < 4 {
            return Err(CoreError::Config(format!("vocab size {vocab_size} is too small, need at least 4")));
        }
        let artifacts: Vec<Symbol> = vec![(vocab_size - 2) as Symbol, (vocab_size - 1) as Symbol];
        let content = vocab_size - 3;
        let item_symbols = lists
            .all_items()
            .enumerate()
            .map(|(i, item)| (item.clone(), (1 + i % content) as Symbol))
            .collect();
        Ok(Self { vocab_size, background: 0, artifacts, item_symbols })
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        let in_range = |s: Symbol| usize::from(s) < v;
        if !in_range(self.background) || !self.artifacts.iter().all(|&s| in_range(s)) {
            return Err(CoreError::Config(format!("symbol outside vocabulary of size {v}")));
        }
        for (item, &s) in &self.item_symbols {
            if !in_range(s) || self.artifacts.contains(&s) || s == self.background {
                return Err(CoreError::Config(format!(
                    "item `{item}` maps to symbol {s}, which is out of range, background, or an artifact"
                )));
            }
        }
        Ok(())
    }

    /// Content symbols (neither background nor artifact) in ascending order.
    pub fn content_symbols(&self) -> Vec<Symbol> {
        (0..self.vocab_size as Symbol).filter(|s| *s != self.background && !self.artifacts.contains(s)).collect()
    }

    /// Distinct symbols a prompt requires, in first-seen item order.
    pub fn required(&self, prompt: &Prompt) -> Result<Vec<Symbol>> {
        let mut out = Vec::new();
        for item in prompt.items() {
            let s = *self
                .item_symbols
                .get(item)
                .ok_or_else(|| CoreError::Config(format!("category item `{item}` has no symbol mapping")))?;
            if !out.contains(&s) {
                out.push(s);
            }
        }
        Ok(out)
    }
}

/// Fraction of the prompt's required symbols present somewhere in the video.
pub fn metric_semantic(video: &Video, required: &[Symbol]) -> f64 {
    if required.is_empty() {
        return 1.0;
    }
    let present = required.iter().filter(|s| video.frames.cells().contains(s)).count();
    present as f64 / required.len() as f64
}

/// One minus the mean fraction of cells changed between consecutive frames.
pub fn metric_smoothness(video: &Video) -> Result<f64> {
    let shape = video.shape();
    if shape.frames < 2 {
        return Err(CoreError::Precondition(format!(
            "motion smoothness needs at least 2 frames, video `{}` has {}",
            video.id, shape.frames
        )));
    }
    let changed: usize = (1..shape.frames)
        .map(|t| video.frames.frame(t).iter().zip(video.frames.frame(t - 1)).filter(|(a, b)| a != b).count())
        .sum();
    Ok(1.0 - changed as f64 / ((shape.frames - 1) * shape.frame_cells()) as f64)
}

/// One minus the fraction of cells holding an artifact symbol.
pub fn metric_fidelity(video: &Video, artifacts: &[Symbol]) -> f64 {
    let cells = video.frames.cells();
    let bad = cells.iter().filter(|s| artifacts.contains(s)).count();
    1.0 - bad as f64 / cells.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub semantic: f64,
    pub smoothness: f64,
    pub fidelity: f64,
}

impl Metrics {
    pub fn get(&self, d: Dimension) -> f64 {
        match d {
            Dimension::SemanticConsistency => self.semantic,
            Dimension::MotionSmoothness => self.smoothness,
            Dimension::VideoFidelity => self.fidelity,
        }
    }
}

/// A label and reason for one dimension, before it becomes a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub dimension: Dimension,
    pub metric: f64,
    pub label: Label,
    pub reason: String,
}

/// Anything that can judge a video per dimension like the oracle does.
pub trait Judge: Send + Sync {
    fn judge(&self, video: &Video, prompt: &Prompt) -> Result<[Judgement; 3]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub rubric: OracleRubric,
    pub symbols: SymbolConfig,
}

impl Oracle {
    pub fn new(rubric: OracleRubric, symbols: SymbolConfig) -> Result<Self> {
        rubric.validate()?;
        symbols.validate()?;
        Ok(Self { rubric, symbols })
    }

    pub fn metrics(&self, video: &Video, prompt: &Prompt) -> Result<Metrics> {
        Ok(Metrics {
            semantic: metric_semantic(video, &self.symbols.required(prompt)?),
            smoothness: metric_smoothness(video)?,
            fidelity: metric_fidelity(video, &self.symbols.artifacts),
        })
    }

    pub fn labels(&self, video: &Video, prompt: &Prompt) -> Result<[Label; 3]> {
        let m = self.metrics(video, prompt)?;
        Ok(Dimension::ALL.map(|d| self.rubric.get(d).label(m.get(d))))
    }

    /// Mean mapped score of the oracle labels.
    pub fn reward(&self, video: &Video, prompt: &Prompt, map: &crate::types::ScoreMap) -> Result<f64> {
        Ok(map.reward(&self.labels(video, prompt)?))
    }

    /// One annotation per dimension, in `Dimension::ALL` order, with
    /// `stage_tag = raw`. Ids come from `ids`.
    pub fn annotate(&self, video: &Video, prompt: &Prompt, ids: &mut crate::types::IdGen) -> Result<Vec<Annotation>> {
        let judgements = self.judge(video, prompt)?;
        Ok(judgements
            .into_iter()
            .map(|j| Annotation {
                id: ids.next("ann"),
                video_id: video.id.clone(),
                dimension: j.dimension,
                label: j.label,
                reason: j.reason,
                annotator: Annotator::Oracle,
                stage_tag: StageTag::Raw,
                annotator_id: Some("oracle".into()),
                note: None,
            })
            .collect())
    }
}

impl Judge for Oracle {
    fn judge(&self, video: &Video, prompt: &Prompt) -> Result<[Judgement; 3]> {
        let m = self.metrics(video, prompt)?;
        Ok(Dimension::ALL.map(|d| {
            let metric = m.get(d);
            let label = self.rubric.get(d).label(metric);
            Judgement { dimension: d, metric, label, reason: reason_text(d, metric, label) }
        }))
    }
}

/// Oracle whose labels are replaced, with probability `flip`, by one of the
/// two other labels chosen uniformly. The draw is seeded per
/// (video, dimension), so the wrapper stays a pure function.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub inner: Oracle,
    pub flip: f64,
    pub seed: u64,
}

impl NoisyOracle {
    fn stream(&self, video_id: &str, d: Dimension) -> ChaCha8Rng {
        // FNV-1a over the id keeps the stream independent of call order.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in video_id.bytes().chain([d.index() as u8]) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed)
    }
}

impl Judge for NoisyOracle {
    fn judge(&self, video: &Video, prompt: &Prompt) -> Result<[Judgement; 3]> {
        let mut out = self.inner.judge(video, prompt)?;
        for j in &mut out {
            let mut rng = self.stream(&video.id, j.dimension);
            if rng.gen_bool(self.flip.clamp(0.0, 1.0)) {
                let others: Vec<Label> = Label::ALL.into_iter().filter(|l| *l != j.label).collect();
                j.label = others[rng.gen_range(0..2)];
                j.reason = reason_text(j.dimension, j.metric, j.label);
            }
        }
        Ok(out)
    }
}
