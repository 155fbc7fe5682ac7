//! The experiment configuration file.
//!
//! One JSON document. The sections `dims`, `vocab`, `categories_path`,
//! `rubric`, `score_map`, `align`, `service` and `seeds` are required and
//! every key inside them must be present; the remaining sections fall back
//! to built-in defaults when absent.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CoreError, Result};
use crate::oracle::{Oracle, OracleRubric, SymbolConfig};
use crate::promptgen::{CategoryLists, ComposeConfig};
use crate::types::{ScoreMap, Symbol, VideoShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl DimsConfig {
    pub fn shape(&self) -> VideoShape {
        VideoShape::new(self.frames, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub size: usize,
    pub background: Symbol,
    pub artifacts: Vec<Symbol>,
    /// Explicit item → symbol mapping. When absent, items are assigned
    /// round-robin over the content symbols in category-list order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_symbols: Option<std::collections::BTreeMap<String, Symbol>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball momentum for SGD; ignored by Adam.
    #[serde(default)]
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
    /// Decoupled weight decay on non-bias tensors; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, momentum, clip_norm: 0.0, weight_decay: 0.0 }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, momentum: 0.0, clip_norm: 0.0, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    Rwl,
    Rs,
}

impl AlignMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMethod::Rwl => "rwl",
            AlignMethod::Rs => "rs",
        }
    }
}

impl std::str::FromStr for AlignMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rwl" => Ok(AlignMethod::Rwl),
            "rs" => Ok(AlignMethod::Rs),
            _ => Err(CoreError::Config(format!("unknown align method `{s}`, expected rwl or rs"))),
        }
    }
}

/// What alignment does with a sample whose critic answer did not parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailurePolicy {
    /// Abort with the reward error.
    Error,
    /// Score the dimension as Bad and log a warning.
    TreatAsBad,
    /// Leave the sample out of the synthesized corpus.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub method: AlignMethod,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub real_batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// RS aborts when fewer than this fraction of samples survive.
    pub rs_survival_floor: f64,
    pub parse_failure: ParseFailurePolicy,
    /// Re-score the synthesized corpus with the critic every epoch.
    #[serde(default)]
    pub rescore_each_epoch: bool,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CoreError::Config(format!("align.lambda must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("align.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rs_survival_floor) {
            return Err(CoreError::Config("align.rs_survival_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub lease_minutes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub master: u64,
}

impl SeedsConfig {
    /// A seed for one named stream, derived from the master seed.
    pub fn derive(&self, stream: &str) -> u64 {
        derive_seed(self.master, stream)
    }
}

/// SplitMix64 finalizer over the master seed mixed with an FNV-1a hash of
/// the stream name.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub prompts: usize,
    /// Synthesized videos per prompt.
    pub videos_per_prompt: usize,
    /// Reference ("real") videos per prompt.
    pub real_per_prompt: usize,
    pub compose: ComposeConfig,
    /// External caption refiner. Absent means template captions only.
    pub refiner: Option<RefinerConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { prompts: 200, videos_per_prompt: 5, real_per_prompt: 1, compose: ComposeConfig::default(), refiner: None }
    }
}

/// Parameters of the procedural scene synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneStyle {
    /// Probability that a required item is drawn into the scene.
    pub coverage: f64,
    /// Per-cell probability of a spurious change between frames.
    pub jitter: f64,
    /// Per-cell probability of an artifact symbol.
    pub artifact_rate: f64,
}

impl SceneStyle {
    /// The reference style used for "real" videos.
    pub const REFERENCE: SceneStyle = SceneStyle { coverage: 1.0, jitter: 0.0, artifact_rate: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Style of the procedural data the base generator is fit to.
    pub biased_style: SceneStyle,
    pub reference_style: SceneStyle,
    /// Procedural training videos per prompt for the base generator.
    pub pretrain_videos_per_prompt: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 32,
            biased_style: SceneStyle { coverage: 0.6, jitter: 0.06, artifact_rate: 0.05 },
            reference_style: SceneStyle::REFERENCE,
            pretrain_videos_per_prompt: 2,
            pretrain_epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub embed_dim: usize,
    /// Recurrent state size of the small critic.
    pub hidden_dim: usize,
    /// Recurrent state size of the large critic (ablation).
    pub large_hidden_dim: usize,
    pub grounding_dim: usize,
    /// Scale of the label-free caption/video co-occurrence start for the
    /// grounding logits. Zero keeps the random start.
    pub grounding_warm_start: f64,
    pub with_reason: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_answer_len: usize,
    /// Share of labeled videos held out for accuracy measurement.
    pub holdout_fraction: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 32,
            large_hidden_dim: 64,
            grounding_dim: 16,
            grounding_warm_start: 3.0,
            with_reason: true,
            epochs: 12,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(0.01),
            max_answer_len: 16,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    /// Accept a re-annotation only when a fresh check agrees with its label.
    Check,
    /// Accept every re-annotation.
    AutoAccept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub min_reason_chars: usize,
    /// Full A→B→A refinement cycles.
    pub rounds: usize,
    pub review_mode: ReviewMode,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { min_reason_chars: 12, rounds: 1, review_mode: ReviewMode::Check }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh samples per prompt when measuring uplift.
    pub samples_per_prompt: usize,
    pub raters: usize,
    pub majority_threshold: usize,
    pub tie_epsilon: f64,
    /// Prompts used for pairwise comparisons.
    pub pairwise_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 5, raters: 6, majority_threshold: 3, tie_epsilon: 0.02, pairwise_prompts: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dims: DimsConfig,
    pub vocab: VocabConfig,
    /// Category lists file, relative to the config file's directory.
    pub categories_path: String,
    pub rubric: OracleRubric,
    pub score_map: ScoreMap,
    pub align: AlignConfig,
    pub service: ServiceConfig,
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub correction: CorrectionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// The loaded category lists.
    #[serde(skip)]
    pub categories: CategoryLists,
}

const REQUIRED: [&str; 8] = ["dims", "vocab", "categories_path", "rubric", "score_map", "align", "service", "seeds"];

const OPTIONAL: [&str; 5] = ["data", "gen", "critic", "correction", "eval"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dims: DimsConfig { frames: 8, height: 4, width: 4 },
            vocab: VocabConfig { size: 16, background: 0, artifacts: vec![14, 15], item_symbols: None },
            categories_path: "categories.json".into(),
            rubric: OracleRubric::default(),
            score_map: ScoreMap::DEFAULT,
            align: AlignConfig {
                method: AlignMethod::Rwl,
                lambda: 1.0,
                epochs: 30,
                batch_size: 32,
                real_batch_size: 32,
                optimizer: OptimizerConfig::adam(0.005),
                rs_survival_floor: 0.01,
                parse_failure: ParseFailurePolicy::TreatAsBad,
                rescore_each_epoch: false,
            },
            service: ServiceConfig { port: 8080, lease_minutes: 10 },
            seeds: SeedsConfig { master: 7 },
            data: DataConfig::default(),
            gen: GenConfig::default(),
            critic: CriticConfig::default(),
            correction: CorrectionConfig::default(),
            eval: EvalConfig::default(),
            categories: CategoryLists::builtin(),
        }
    }
}

fn section<T: DeserializeOwned>(map: &Map<String, Value>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| CoreError::Config(format!("config key `{key}`: {e}"))),
    }
}

fn required<T: DeserializeOwned>(map: &Map<String, Value>, key: &str) -> Result<T> {
    section(map, key)?.ok_or_else(|| CoreError::Config(format!("missing config key `{key}`")))
}

impl ExperimentConfig {
    /// Parses a config document. Category lists are not loaded; see
    /// [`ExperimentConfig::load`].
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CoreError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(CoreError::Config("config must be a JSON object".into()));
        };
        if let Some(unknown) = map.keys().find(|k| !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str())) {
            return Err(CoreError::Config(format!("unknown config key `{unknown}`")));
        }
        let cfg = ExperimentConfig {
            dims: required(&map, "dims")?,
            vocab: required(&map, "vocab")?,
            categories_path: required(&map, "categories_path")?,
            rubric: required(&map, "rubric")?,
            score_map: required(&map, "score_map")?,
            align: required(&map, "align")?,
            service: required(&map, "service")?,
            seeds: required(&map, "seeds")?,
            data: section(&map, "data")?.unwrap_or_default(),
            gen: section(&map, "gen")?.unwrap_or_default(),
            critic: section(&map, "critic")?.unwrap_or_default(),
            correction: section(&map, "correction")?.unwrap_or_default(),
            eval: section(&map, "eval")?.unwrap_or_default(),
            categories: CategoryLists::builtin(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the config file and the category lists it points to.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.categories = CategoryLists::load(cfg.categories_file(base))?;
        cfg.symbols()?;
        Ok(cfg)
    }

    pub fn categories_file(&self, base: &Path) -> PathBuf {
        base.join(&self.categories_path)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.frames < 2 || d.height == 0 || d.width == 0 {
            return Err(CoreError::Config(format!("dims must have frames >= 2 and non-zero height/width, got {d:?}")));
        }
        self.rubric.validate()?;
        self.score_map.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        self.align.validate()?;
        if self.eval.majority_threshold == 0 || self.eval.majority_threshold > self.eval.raters {
            return Err(CoreError::Config("eval.majority_threshold must lie in 1..=raters".into()));
        }
        let w = self.critic.grounding_warm_start;
        if !(w.is_finite() && w >= 0.0) {
            return Err(CoreError::Config(format!("critic.grounding_warm_start must be finite and >= 0, got {w}")));
        }
        Ok(())
    }

    pub fn shape(&self) -> VideoShape {
        self.dims.shape()
    }

    /// Symbol layout from `vocab`, falling back to the round-robin item map.
    pub fn symbols(&self) -> Result<SymbolConfig> {
        let item_symbols = match &self.vocab.item_symbols {
            Some(m) => m.clone(),
            None => {
                let mut rr = SymbolConfig::round_robin(self.vocab.size, &self.categories)?;
                rr.background = self.vocab.background;
                rr.artifacts = self.vocab.artifacts.clone();
                let content = rr.content_symbols();
                if content.is_empty() {
                    return Err(CoreError::Config("vocab leaves no content symbols".into()));
                }
                self.categories
                    .all_items()
                    .enumerate()
                    .map(|(i, item)| (item.clone(), content[i % content.len()]))
                    .collect()
            }
        };
        let symbols = SymbolConfig {
            vocab_size: self.vocab.size,
            background: self.vocab.background,
            artifacts: self.vocab.artifacts.clone(),
            item_symbols,
        };
        symbols.validate()?;
        if let Some(item) = self.categories.all_items().find(|i| !symbols.item_symbols.contains_key(*i)) {
            return Err(CoreError::Config(format!("vocab.item_symbols has no entry for `{item}`")));
        }
        Ok(symbols)
    }

    pub fn oracle(&self) -> Result<Oracle> {
        Oracle::new(self.rubric.clone(), self.symbols()?)
    }
}
