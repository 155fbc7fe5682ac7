//! Domain records shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CoreError, Result};

/// Symbol id of a single video cell.
pub type Symbol = u16;

/// The three axes along which a video is judged. The set is fixed and its
/// order (`ALL`) is the order used everywhere a per-dimension array appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    SemanticConsistency,
    MotionSmoothness,
    VideoFidelity,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::SemanticConsistency,
        Dimension::MotionSmoothness,
        Dimension::VideoFidelity,
    ];

    pub fn index(self) -> usize {
        match self {
            Dimension::SemanticConsistency => 0,
            Dimension::MotionSmoothness => 1,
            Dimension::VideoFidelity => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::SemanticConsistency => "semantic_consistency",
            Dimension::MotionSmoothness => "motion_smoothness",
            Dimension::VideoFidelity => "video_fidelity",
        }
    }

    /// Human-readable name, also the lead words of every oracle reason.
    pub fn title(self) -> &'static str {
        match self {
            Dimension::SemanticConsistency => "semantic consistency",
            Dimension::MotionSmoothness => "motion smoothness",
            Dimension::VideoFidelity => "video fidelity",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| CoreError::Validation(format!("unknown dimension `{s}`")))
    }
}

/// Qualitative rating. Declaration order gives `Bad < Normal < Good`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Bad,
    Normal,
    Good,
}

impl Label {
    /// Best first; this is also the order of the label tokens in the
    /// critic's answer vocabulary.
    pub const ALL: [Label; 3] = [Label::Good, Label::Normal, Label::Bad];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Good => "Good",
            Label::Normal => "Normal",
            Label::Bad => "Bad",
        }
    }

    /// The lowercase word used inside token sequences.
    pub fn word(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::Normal => "normal",
            Label::Bad => "bad",
        }
    }

    pub fn from_word(word: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.word() == word)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| CoreError::Validation(format!("unknown label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoSource {
    Synthesized,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotator {
    Human,
    Oracle,
    Critic,
}

/// Lifecycle of an annotation through the correction pipeline.
///
/// `raw` on arrival; coarse filtering moves it to `kept` or `removed`;
/// refinement may move `kept` to `corrected`; final integration may move
/// `removed` to `reintegrated`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Raw,
    Kept,
    Removed,
    Corrected,
    Reintegrated,
}

impl StageTag {
    pub const ALL: [StageTag; 5] = [
        StageTag::Raw,
        StageTag::Kept,
        StageTag::Removed,
        StageTag::Corrected,
        StageTag::Reintegrated,
    ];

    pub fn is_active(self) -> bool {
        self != StageTag::Removed
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Raw => "raw",
            StageTag::Kept => "kept",
            StageTag::Removed => "removed",
            StageTag::Corrected => "corrected",
            StageTag::Reintegrated => "reintegrated",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A composed (and possibly refined) text prompt.
///
/// Token ids are not stored; they are derived from `caption` with the
/// caption tokenizer, see [`crate::tokenizer::CaptionTokenizer`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub subjects: Vec<String>,
    pub scene: String,
    pub action: String,
    pub caption: String,
}

impl Prompt {
    /// All category items of the prompt: subjects, then scene, then action.
    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.subjects
            .iter()
            .map(String::as_str)
            .chain([self.scene.as_str(), self.action.as_str()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CoreError::Validation("prompt id is empty".into()));
        }
        if self.subjects.is_empty() || self.subjects.len() > 2 {
            return Err(CoreError::Validation(format!(
                "prompt `{}` has {} subjects, expected 1 or 2",
                self.id,
                self.subjects.len()
            )));
        }
        if self.scene.is_empty() || self.action.is_empty() {
            return Err(CoreError::Validation(format!(
                "prompt `{}` is missing its scene or action",
                self.id
            )));
        }
        Ok(())
    }
}

/// Shape of a video: frames × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoShape {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn frame_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cells(&self) -> usize {
        self.frames * self.height * self.width
    }
}

impl Default for VideoShape {
    fn default() -> Self {
        Self::new(8, 4, 4)
    }
}

/// A T×H×W grid of symbols stored flat in raster order (frame, row, column).
///
/// Serializes as nested arrays `[[[cell; W]; H]; T]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frames {
    shape: VideoShape,
    cells: Vec<Symbol>,
}

impl Frames {
    pub fn new(shape: VideoShape, cells: Vec<Symbol>) -> Result<Self> {
        if cells.len() != shape.cells() {
            return Err(CoreError::Validation(format!(
                "frames hold {} cells, shape {}x{}x{} needs {}",
                cells.len(),
                shape.frames,
                shape.height,
                shape.width,
                shape.cells()
            )));
        }
        Ok(Self { shape, cells })
    }

    pub fn filled(shape: VideoShape, symbol: Symbol) -> Self {
        Self { shape, cells: vec![symbol; shape.cells()] }
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn cells(&self) -> &[Symbol] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Symbol] {
        &mut self.cells
    }

    pub fn frame(&self, t: usize) -> &[Symbol] {
        let n = self.shape.frame_cells();
        &self.cells[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> Symbol {
        self.cells[(t * self.shape.height + y) * self.shape.width + x]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, symbol: Symbol) {
        self.cells[(t * self.shape.height + y) * self.shape.width + x] = symbol;
    }

    pub fn max_symbol(&self) -> Option<Symbol> {
        self.cells.iter().copied().max()
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<Symbol>>> {
        let VideoShape { frames, height, width } = self.shape;
        (0..frames)
            .map(|t| {
                (0..height)
                    .map(|y| (0..width).map(|x| self.get(t, y, x)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<Symbol>>]) -> Result<Self> {
        let frames = nested.len();
        let height = nested.first().map_or(0, Vec::len);
        let width = nested.first().and_then(|f| f.first()).map_or(0, Vec::len);
        if frames == 0 || height == 0 || width == 0 {
            return Err(CoreError::Validation("frames must be a non-empty T×H×W array".into()));
        }
        let mut cells = Vec::with_capacity(frames * height * width);
        for (t, frame) in nested.iter().enumerate() {
            if frame.len() != height {
                return Err(CoreError::Validation(format!("frame {t} has {} rows, expected {height}", frame.len())));
            }
            for (y, row) in frame.iter().enumerate() {
                if row.len() != width {
                    return Err(CoreError::Validation(format!(
                        "frame {t} row {y} has {} cells, expected {width}",
                        row.len()
                    )));
                }
                cells.extend_from_slice(row);
            }
        }
        Frames::new(VideoShape::new(frames, height, width), cells)
    }
}

impl Serialize for Frames {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_nested().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Frames {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<Symbol>>>::deserialize(deserializer)?;
        Frames::from_nested(&nested).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub prompt_id: String,
    pub source: VideoSource,
    pub frames: Frames,
}

impl Video {
    pub fn shape(&self) -> VideoShape {
        self.frames.shape()
    }

    /// Checks the video against a configured shape and vocabulary size.
    pub fn validate(&self, shape: VideoShape, vocab_size: usize) -> Result<()> {
        if self.shape() != shape {
            let s = self.shape();
            return Err(CoreError::Validation(format!(
                "video `{}` has shape {}x{}x{}, expected {}x{}x{}",
                self.id, s.frames, s.height, s.width, shape.frames, shape.height, shape.width
            )));
        }
        if let Some(max) = self.frames.max_symbol() {
            if usize::from(max) >= vocab_size {
                return Err(CoreError::Validation(format!(
                    "video `{}` holds symbol {max} outside vocabulary of size {vocab_size}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One per-dimension judgement of one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub video_id: String,
    pub dimension: Dimension,
    pub label: Label,
    pub reason: String,
    pub annotator: Annotator,
    pub stage_tag: StageTag,
    /// Identity of the person (or process) that produced the annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    /// Why the record sits in its current lifecycle state, e.g. the coarse
    /// filter rule that removed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.video_id.is_empty() {
            return Err(CoreError::Validation("annotation id and video_id must be non-empty".into()));
        }
        // Raw records may still carry an empty reason; coarse filtering
        // removes them before they can become active.
        let needs_reason = !matches!(self.stage_tag, StageTag::Removed | StageTag::Raw);
        if needs_reason && self.reason.trim().is_empty() {
            return Err(CoreError::Validation(format!(
                "annotation `{}` is {} but has an empty reason",
                self.id, self.stage_tag
            )));
        }
        Ok(())
    }
}

/// Maps qualitative labels to rewards in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    #[serde(rename = "Good")]
    pub good: f64,
    #[serde(rename = "Normal")]
    pub normal: f64,
    #[serde(rename = "Bad")]
    pub bad: f64,
}

impl ScoreMap {
    pub const DEFAULT: ScoreMap = ScoreMap { good: 0.9, normal: 0.2, bad: 0.05 };

    /// The hard filter: 1 for Good, 0 otherwise.
    pub const INDICATOR: ScoreMap = ScoreMap { good: 1.0, normal: 0.0, bad: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let in_range = [self.good, self.normal, self.bad]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !in_range || !(self.good > self.normal && self.normal > self.bad) {
            return Err(CoreError::Validation(format!(
                "score map must satisfy 1 >= Good > Normal > Bad >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn score(&self, label: Label) -> f64 {
        match label {
            Label::Good => self.good,
            Label::Normal => self.normal,
            Label::Bad => self.bad,
        }
    }

    /// Mean mapped score over the dimensions of one video.
    pub fn reward(&self, labels: &[Label]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        labels.iter().map(|&l| self.score(l)).sum::<f64>() / labels.len() as f64
    }
}

impl Default for ScoreMap {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Outcome of a human-vs-model disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    KeepHuman,
    KeepModel,
    Unresolved,
}

/// A disagreement between the stored annotation and a critic's proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationItem {
    pub id: String,
    pub annotation_id: String,
    pub video_id: String,
    pub dimension: Dimension,
    pub human: Annotation,
    /// `None` when the critic failed to produce a parseable answer.
    pub model: Option<Annotation>,
    pub resolution: Resolution,
}

impl AdjudicationItem {
    /// Sets the resolution. Fails if it was already set.
    pub fn resolve(&mut self, resolution: Resolution) -> Result<()> {
        if self.resolution != Resolution::Unresolved {
            return Err(CoreError::Conflict { kind: "adjudication resolution", id: self.id.clone() });
        }
        if resolution == Resolution::KeepModel && self.model.is_none() {
            return Err(CoreError::Validation(format!(
                "adjudication `{}` has no model annotation to keep",
                self.id
            )));
        }
        self.resolution = resolution;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Pending,
    Accept,
    Reject,
}

/// A critic re-annotation of a removed record awaiting review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub annotation_id: String,
    pub video_id: String,
    pub dimension: Dimension,
    pub proposed: Annotation,
    pub decision: ReviewDecision,
}

/// One lifecycle transition of an annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub annotation_id: String,
    pub from_stage: StageTag,
    pub to_stage: StageTag,
    pub rule_or_resolution: String,
    pub actor: String,
    pub timestamp: String,
}

/// Generates opaque ids. Seeded generators give reproducible ids.
#[derive(Debug, Clone)]
pub struct IdGen {
    rng: ChaCha8Rng,
}

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn from_entropy() -> Self {
        Self { rng: ChaCha8Rng::from_entropy() }
    }

    pub fn next(&mut self, prefix: &str) -> String {
        format!("{prefix}-{:016x}", self.rng.gen::<u64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_order() {
        assert!(Label::Good > Label::Normal && Label::Normal > Label::Bad);
        let mut v = vec![Label::Normal, Label::Good, Label::Bad];
        v.sort();
        assert_eq!(v, vec![Label::Bad, Label::Normal, Label::Good]);
    }

    #[test]
    fn exactly_three_dimensions() {
        assert_eq!(Dimension::ALL.len(), 3);
        for (i, d) in Dimension::ALL.iter().enumerate() {
            assert_eq!(d.index(), i);
            assert_eq!(d.as_str().parse::<Dimension>().unwrap(), *d);
        }
    }

    #[test]
    fn frames_serialize_as_nested_arrays() {
        let shape = VideoShape::new(2, 1, 2);
        let frames = Frames::new(shape, vec![1, 2, 3, 4]).unwrap();
        let json = serde_json::to_string(&frames).unwrap();
        assert_eq!(json, "[[[1,2]],[[3,4]]]");
        let back: Frames = serde_json::from_str(&json).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn ragged_frames_rejected() {
        let err = serde_json::from_str::<Frames>("[[[1,2]],[[3]]]").unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
    }

    #[test]
    fn score_map_reward_is_mean() {
        let s = ScoreMap::DEFAULT;
        assert_eq!(s.reward(&[Label::Good; 3]), 0.9);
        let r = s.reward(&[Label::Good, Label::Normal, Label::Bad]);
        assert!((r - 1.15 / 3.0).abs() < 1e-15);
        assert!(ScoreMap { good: 0.2, normal: 0.2, bad: 0.0 }.validate().is_err());
    }

    #[test]
    fn empty_reason_only_allowed_for_raw_or_removed() {
        let mut a = Annotation {
            id: "a".into(),
            video_id: "v".into(),
            dimension: Dimension::VideoFidelity,
            label: Label::Good,
            reason: String::new(),
            annotator: Annotator::Human,
            stage_tag: StageTag::Raw,
            annotator_id: None,
            note: None,
        };
        assert!(a.validate().is_ok());
        a.stage_tag = StageTag::Kept;
        assert!(a.validate().is_err());
        a.stage_tag = StageTag::Removed;
        assert!(a.validate().is_ok());
    }

    #[test]
    fn adjudication_resolves_once() {
        let human = Annotation {
            id: "a".into(),
            video_id: "v".into(),
            dimension: Dimension::VideoFidelity,
            label: Label::Good,
            reason: "fine".into(),
            annotator: Annotator::Human,
            stage_tag: StageTag::Kept,
            annotator_id: None,
            note: None,
        };
        let mut item = AdjudicationItem {
            id: "adj".into(),
            annotation_id: "a".into(),
            video_id: "v".into(),
            dimension: Dimension::VideoFidelity,
            human,
            model: None,
            resolution: Resolution::Unresolved,
        };
        assert!(item.resolve(Resolution::KeepModel).is_err());
        item.resolve(Resolution::KeepHuman).unwrap();
        assert!(item.resolve(Resolution::KeepHuman).is_err());
    }
}
