//! Three-stage correction of an annotated dataset.
//!
//! The orchestrator is a resumable state machine kept in the store's meta
//! table under [`STATE_KEY`]:
//!
//! ```text
//! coarse -> refine_a -> refine_b -> (refine_a ... for each round) -> final -> done
//! ```
//!
//! Coarse filtering partitions raw annotations by fixed rules plus manual
//! removals. Each refine step fits a critic on one half of the kept data,
//! labels the other half, and raises an [`AdjudicationItem`] for every
//! label disagreement. Final integration fits a critic on everything
//! active, re-labels each removed record and asks a reviewer to accept or
//! reject the proposal. Steps whose decisions are left to a human queue
//! fail with [`PipelineError::Blocked`] and pick up where they stopped when
//! run again.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hfalign_core::config::{derive_seed, CorrectionConfig, ReviewMode};
use hfalign_core::{
    AdjudicationItem, Annotation, Annotator, Dimension, ExperimentConfig, IdGen, Label, Oracle, Prompt, Resolution,
    ReviewDecision, ReviewItem, StageTag, Store, Video,
};

use crate::critic::{Labeler, Verdict};
use crate::error::{PipelineError, Result};
use crate::experiment::train_critic;

/// Meta key holding the serialized [`CorrectionState`].
pub const STATE_KEY: &str = "correction";

pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

/// UTC wall clock, RFC 3339 with seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

/// Always returns the same timestamp. Keeps audit logs reproducible.
#[derive(Debug, Clone)]
pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

// --- coarse filtering ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseRule {
    /// The annotation must refer to a stored video. Label strings are typed
    /// at the boundary, so unknown labels never reach the store.
    LabelValidity,
    NonEmptyReason,
    MinReasonLength,
    /// The reason must name its dimension (see [`dimension_keyword`]).
    DimensionKeyword,
    /// Requested by a person through the service.
    Manual,
}

impl CoarseRule {
    pub fn as_str(self) -> &'static str {
        match self {
            CoarseRule::LabelValidity => "label_validity",
            CoarseRule::NonEmptyReason => "non_empty_reason",
            CoarseRule::MinReasonLength => "min_reason_length",
            CoarseRule::DimensionKeyword => "dimension_keyword",
            CoarseRule::Manual => "manual",
        }
    }
}

/// The word a reason must contain to count as being about `d`.
pub fn dimension_keyword(d: Dimension) -> &'static str {
    match d {
        Dimension::SemanticConsistency => "semantic",
        Dimension::MotionSmoothness => "motion",
        Dimension::VideoFidelity => "fidelity",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseRules {
    /// Minimum reason length in characters, after trimming.
    pub min_reason_chars: usize,
}

impl CoarseRules {
    /// The first rule `a` breaks, if any. Manual removals are not checked
    /// here.
    pub fn check(&self, a: &Annotation, video_known: bool) -> Option<CoarseRule> {
        let reason = a.reason.trim();
        if !video_known {
            Some(CoarseRule::LabelValidity)
        } else if reason.is_empty() {
            Some(CoarseRule::NonEmptyReason)
        } else if reason.chars().count() < self.min_reason_chars {
            Some(CoarseRule::MinReasonLength)
        } else if !reason.to_lowercase().contains(dimension_keyword(a.dimension)) {
            Some(CoarseRule::DimensionKeyword)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoarseSplit {
    pub kept: Vec<String>,
    pub removed: Vec<(String, CoarseRule)>,
}

/// Partitions `annotations` by `rules`, then by `manual` removal ids.
/// Input order is preserved on both sides.
pub fn coarse_filter(
    annotations: &[Annotation],
    known_videos: &HashSet<&str>,
    manual: &HashSet<&str>,
    rules: CoarseRules,
) -> CoarseSplit {
    let mut out = CoarseSplit::default();
    for a in annotations {
        let rule = rules
            .check(a, known_videos.contains(a.video_id.as_str()))
            .or_else(|| manual.contains(a.id.as_str()).then_some(CoarseRule::Manual));
        match rule {
            Some(r) => out.removed.push((a.id.clone(), r)),
            None => out.kept.push(a.id.clone()),
        }
    }
    out
}

// --- roles -------------------------------------------------------------

/// Builds a labeler from a set of annotations.
pub trait CriticFactory {
    fn fit(
        &self,
        train: &[Annotation],
        videos: &HashMap<String, Video>,
        prompts: &HashMap<String, Prompt>,
        seed: u64,
    ) -> Result<Box<dyn Labeler>>;
}

/// Trains a [`crate::critic::Critic`] with the experiment's critic settings.
#[derive(Debug, Clone)]
pub struct TrainedCritics {
    pub cfg: ExperimentConfig,
    pub with_reason: bool,
}

impl CriticFactory for TrainedCritics {
    fn fit(
        &self,
        train: &[Annotation],
        videos: &HashMap<String, Video>,
        prompts: &HashMap<String, Prompt>,
        seed: u64,
    ) -> Result<Box<dyn Labeler>> {
        let t = train_critic(&self.cfg, train, videos, prompts, self.with_reason, false, 0.0, seed)?;
        Ok(Box::new(t.critic))
    }
}

/// Ignores the data and answers with the oracle.
#[derive(Debug, Clone)]
pub struct OracleCritics(pub Oracle);

impl CriticFactory for OracleCritics {
    fn fit(&self, _: &[Annotation], _: &HashMap<String, Video>, _: &HashMap<String, Prompt>, _: u64) -> Result<Box<dyn Labeler>> {
        Ok(Box::new(self.0.clone()))
    }
}

/// Settles a human-vs-model disagreement, or defers it (`None`).
pub trait Adjudicator {
    fn name(&self) -> &str;
    fn resolve(&self, item: &AdjudicationItem, video: &Video, prompt: &Prompt) -> Result<Option<Resolution>>;
}

/// Accepts or rejects a re-annotation, or defers it (`None`).
pub trait Reviewer {
    fn name(&self) -> &str;
    fn review(&self, item: &ReviewItem, video: &Video, prompt: &Prompt) -> Result<Option<ReviewDecision>>;
}

/// Defers everything to people working through the service.
#[derive(Debug, Clone, Copy, Default)]
pub struct HumanQueue;

impl Adjudicator for HumanQueue {
    fn name(&self) -> &str {
        "queue"
    }

    fn resolve(&self, _: &AdjudicationItem, _: &Video, _: &Prompt) -> Result<Option<Resolution>> {
        Ok(None)
    }
}

impl Reviewer for HumanQueue {
    fn name(&self) -> &str {
        "queue"
    }

    fn review(&self, _: &ReviewItem, _: &Video, _: &Prompt) -> Result<Option<ReviewDecision>> {
        Ok(None)
    }
}

/// Keeps whichever side matches the oracle, the human side on a tie.
#[derive(Debug, Clone)]
pub struct OracleAdjudicator(pub Oracle);

impl Adjudicator for OracleAdjudicator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn resolve(&self, item: &AdjudicationItem, video: &Video, prompt: &Prompt) -> Result<Option<Resolution>> {
        let truth = self.0.labels(video, prompt)?[item.dimension.index()];
        let model_right = item.model.as_ref().is_some_and(|m| m.label == truth);
        Ok(Some(if item.human.label != truth && model_right { Resolution::KeepModel } else { Resolution::KeepHuman }))
    }
}

/// `Check` accepts a proposal whose label matches the oracle; `AutoAccept`
/// accepts everything.
#[derive(Debug, Clone)]
pub struct OracleReviewer {
    pub oracle: Oracle,
    pub mode: ReviewMode,
}

impl Reviewer for OracleReviewer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn review(&self, item: &ReviewItem, video: &Video, prompt: &Prompt) -> Result<Option<ReviewDecision>> {
        let accept = match self.mode {
            ReviewMode::AutoAccept => true,
            ReviewMode::Check => self.oracle.labels(video, prompt)?[item.dimension.index()] == item.proposed.label,
        };
        Ok(Some(if accept { ReviewDecision::Accept } else { ReviewDecision::Reject }))
    }
}

// --- state -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    RefineA,
    RefineB,
    Final,
    Done,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::RefineA => "refine_a",
            Stage::RefineB => "refine_b",
            Stage::Final => "final",
            Stage::Done => "done",
        }
    }
}

/// Items raised by the current step and what was measured when raising them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issued {
    pub items: Vec<String>,
    pub compared: usize,
    pub agreed: usize,
    /// Mean word-set Jaccard similarity of reasons where labels agree.
    /// Logged only; agreement is decided on labels.
    pub reason_similarity: Option<f64>,
    pub superseded: usize,
    pub unparsed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionState {
    pub stage: Stage,
    pub round: usize,
    pub rounds: usize,
    pub half_a: Vec<String>,
    pub half_b: Vec<String>,
    pub issued: Option<Issued>,
    pub reports: Vec<StepReport>,
}

impl CorrectionState {
    pub fn new(rounds: usize) -> Self {
        Self { stage: Stage::Coarse, round: 0, rounds, half_a: Vec::new(), half_b: Vec::new(), issued: None, reports: Vec::new() }
    }

    pub fn load(store: &Store, rounds: usize) -> Result<Self> {
        match store.meta(STATE_KEY) {
            Some(v) => Ok(serde_json::from_value(v)?),
            None => Ok(Self::new(rounds)),
        }
    }

    fn save(&self, store: &Store) -> Result<()> {
        store.set_meta(STATE_KEY, serde_json::to_value(self)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StepReport {
    Coarse {
        kept: usize,
        removed: usize,
        by_rule: BTreeMap<String, usize>,
    },
    Refine {
        round: usize,
        step: String,
        train: usize,
        compared: usize,
        agreed: usize,
        adjudicated: usize,
        keep_human: usize,
        keep_model: usize,
        reason_similarity: Option<f64>,
    },
    Final {
        reviewed: usize,
        accepted: usize,
        rejected: usize,
        superseded: usize,
        unparsed: usize,
        final_size: usize,
    },
}

/// Progress summary for dashboards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub round: usize,
    pub rounds: usize,
    pub pending_adjudications: usize,
    pub pending_reviews: usize,
    pub by_stage_tag: BTreeMap<String, usize>,
}

pub fn progress(store: &Store, rounds: usize) -> Result<Progress> {
    let state = CorrectionState::load(store, rounds)?;
    let mut by_stage_tag: BTreeMap<String, usize> = StageTag::ALL.iter().map(|t| (t.as_str().to_string(), 0)).collect();
    for a in store.read().annotations.values() {
        *by_stage_tag.entry(a.stage_tag.as_str().to_string()).or_default() += 1;
    }
    Ok(Progress {
        stage: state.stage,
        round: state.round,
        rounds: state.rounds,
        pending_adjudications: store.pending_adjudications().len(),
        pending_reviews: store.pending_reviews().len(),
        by_stage_tag,
    })
}

// --- orchestrator --------------------------------------------------------

pub struct Correction<'a> {
    pub store: &'a Store,
    pub cfg: CorrectionConfig,
    pub clock: &'a dyn Clock,
    pub seed: u64,
}

impl<'a> Correction<'a> {
    pub fn new(store: &'a Store, cfg: CorrectionConfig, clock: &'a dyn Clock, seed: u64) -> Self {
        Self { store, cfg, clock, seed }
    }

    pub fn state(&self) -> Result<CorrectionState> {
        CorrectionState::load(self.store, self.cfg.rounds)
    }

    /// Runs every remaining stage. Stops with `Blocked` where a role defers.
    pub fn run_all(
        &self,
        critics: &dyn CriticFactory,
        adjudicator: &dyn Adjudicator,
        reviewer: &dyn Reviewer,
    ) -> Result<CorrectionState> {
        loop {
            let state = self.state()?;
            match state.stage {
                Stage::Coarse => self.coarse()?,
                Stage::RefineA | Stage::RefineB => self.refine_step(critics, adjudicator)?,
                Stage::Final => self.final_integration(critics, reviewer)?,
                Stage::Done => return Ok(state),
            };
        }
    }

    /// Runs the current stage if it is `stage`.
    pub fn run_stage(
        &self,
        stage: Stage,
        critics: &dyn CriticFactory,
        adjudicator: &dyn Adjudicator,
        reviewer: &dyn Reviewer,
    ) -> Result<CorrectionState> {
        let current = self.state()?.stage;
        let matches = current == stage || (stage == Stage::RefineA && current == Stage::RefineB);
        if !matches {
            return Err(PipelineError::Precondition(format!(
                "correction is at stage `{}`, not `{}`",
                current.as_str(),
                stage.as_str()
            )));
        }
        match current {
            Stage::Coarse => self.coarse(),
            Stage::RefineA | Stage::RefineB => {
                // `refine` covers every remaining refine step.
                while matches!(self.state()?.stage, Stage::RefineA | Stage::RefineB) {
                    self.refine_step(critics, adjudicator)?;
                }
                self.state()
            }
            Stage::Final => self.final_integration(critics, reviewer),
            Stage::Done => self.state(),
        }
    }

    pub fn coarse(&self) -> Result<CorrectionState> {
        let mut state = self.expect(Stage::Coarse)?;
        let (raw, known, manual) = {
            let t = self.store.read();
            let raw: Vec<Annotation> = t.annotations.values().filter(|a| a.stage_tag == StageTag::Raw).cloned().collect();
            let known: HashSet<String> = t.videos.keys().cloned().collect();
            (raw, known, t.removals.clone())
        };
        let known_ref: HashSet<&str> = known.iter().map(String::as_str).collect();
        let manual_ids: HashSet<&str> = manual.keys().map(String::as_str).collect();
        let split = coarse_filter(&raw, &known_ref, &manual_ids, CoarseRules { min_reason_chars: self.cfg.min_reason_chars });
        let now = self.clock.now();
        for id in &split.kept {
            self.store.transition(id, StageTag::Kept, "passed", "coarse_filter", &now)?;
        }
        let mut by_rule = BTreeMap::new();
        for (id, rule) in &split.removed {
            *by_rule.entry(rule.as_str().to_string()).or_insert(0) += 1;
            let actor = match rule {
                CoarseRule::Manual => manual[id].actor.as_str(),
                _ => "coarse_filter",
            };
            self.store.transition(id, StageTag::Removed, rule.as_str(), actor, &now)?;
        }
        state.reports.push(StepReport::Coarse { kept: split.kept.len(), removed: split.removed.len(), by_rule });
        state.stage = if state.rounds == 0 { Stage::Final } else { Stage::RefineA };
        if state.stage == Stage::RefineA {
            let (a, b) = self.split_halves()?;
            state.half_a = a;
            state.half_b = b;
        }
        state.save(self.store)?;
        Ok(state)
    }

    /// Seeded 50/50 split of the kept annotations, stratified by
    /// (dimension, label).
    fn split_halves(&self) -> Result<(Vec<String>, Vec<String>)> {
        let mut strata: BTreeMap<(usize, Label), Vec<String>> = BTreeMap::new();
        for a in self.store.read().annotations.values().filter(|a| a.stage_tag == StageTag::Kept) {
            strata.entry((a.dimension.index(), a.label)).or_default().push(a.id.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "correction/split"));
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (_, mut ids) in strata {
            ids.shuffle(&mut rng);
            let half = ids.len().div_ceil(2);
            b.extend(ids.split_off(half));
            a.extend(ids);
        }
        if a.is_empty() || b.is_empty() {
            return Err(PipelineError::Precondition(format!(
                "refinement needs at least two kept annotations, found {}",
                a.len() + b.len()
            )));
        }
        Ok((a, b))
    }

    pub fn refine_step(&self, critics: &dyn CriticFactory, adjudicator: &dyn Adjudicator) -> Result<CorrectionState> {
        let mut state = self.state()?;
        let step = state.stage;
        if !matches!(step, Stage::RefineA | Stage::RefineB) {
            return Err(PipelineError::Precondition(format!("correction is at stage `{}`, not refine", step.as_str())));
        }
        let (train_ids, target_ids) = match step {
            Stage::RefineA => (&state.half_a, &state.half_b),
            _ => (&state.half_b, &state.half_a),
        };
        let train_len = train_ids.len();
        if state.issued.is_none() {
            let (videos, prompts) = self.lookup_maps();
            let train = self.active_subset(train_ids);
            let seed = derive_seed(self.seed, &format!("correction/{}/{}", state.round, step.as_str()));
            let critic = critics.fit(&train, &videos, &prompts, seed)?;
            let targets = self.active_subset(target_ids);
            let mut ids = IdGen::seeded(derive_seed(seed, "ids"));
            let mut verdicts = VerdictCache::new(critic.as_ref(), &videos, &prompts);
            let (mut items, mut agreed, mut sims) = (Vec::new(), 0, Vec::new());
            for a in &targets {
                let model = verdicts.annotation(a)?;
                match &model {
                    Some(m) if m.label == a.label => {
                        agreed += 1;
                        sims.push(jaccard(&a.reason, &m.reason));
                    }
                    _ => items.push(AdjudicationItem {
                        id: ids.next("adj"),
                        annotation_id: a.id.clone(),
                        video_id: a.video_id.clone(),
                        dimension: a.dimension,
                        human: a.clone(),
                        model,
                        resolution: Resolution::Unresolved,
                    }),
                }
            }
            let reason_similarity = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);
            tracing::debug!(step = step.as_str(), compared = targets.len(), agreed, ?reason_similarity, "refine step labeled");
            state.issued = Some(Issued {
                items: items.iter().map(|i| i.id.clone()).collect(),
                compared: targets.len(),
                agreed,
                reason_similarity,
                superseded: 0,
                unparsed: 0,
            });
            self.store.insert_adjudications(items)?;
            state.save(self.store)?;
        }
        let issued = state.issued.clone().expect("issued above");
        let pending = self.settle_adjudications(&issued.items, adjudicator)?;
        if pending > 0 {
            return Err(PipelineError::Blocked { stage: step.as_str(), pending });
        }
        let (mut keep_human, mut keep_model) = (0, 0);
        for id in &issued.items {
            match self.store.get_adjudication(id)?.resolution {
                Resolution::KeepModel => keep_model += 1,
                _ => keep_human += 1,
            }
        }
        state.reports.push(StepReport::Refine {
            round: state.round,
            step: step.as_str().to_string(),
            train: train_len,
            compared: issued.compared,
            agreed: issued.agreed,
            adjudicated: issued.items.len(),
            keep_human,
            keep_model,
            reason_similarity: issued.reason_similarity,
        });
        state.issued = None;
        state.stage = match step {
            Stage::RefineA => Stage::RefineB,
            _ if state.round + 1 < state.rounds => {
                state.round += 1;
                Stage::RefineA
            }
            _ => Stage::Final,
        };
        state.save(self.store)?;
        Ok(state)
    }

    fn settle_adjudications(&self, ids: &[String], adjudicator: &dyn Adjudicator) -> Result<usize> {
        let mut pending = 0;
        for id in ids {
            let item = self.store.get_adjudication(id)?;
            if item.resolution != Resolution::Unresolved {
                continue;
            }
            let (video, prompt) = self.video_and_prompt(&item.video_id)?;
            match adjudicator.resolve(&item, &video, &prompt)? {
                Some(r) => {
                    self.store.resolve_adjudication(id, r, adjudicator.name(), &self.clock.now())?;
                }
                None => pending += 1,
            }
        }
        Ok(pending)
    }

    pub fn final_integration(&self, critics: &dyn CriticFactory, reviewer: &dyn Reviewer) -> Result<CorrectionState> {
        let mut state = self.expect(Stage::Final)?;
        if state.issued.is_none() {
            let active: Vec<Annotation> = self.store.read().annotations.values().filter(|a| is_active(a.stage_tag)).cloned().collect();
            if active.is_empty() {
                return Err(PipelineError::Precondition("final integration needs a non-empty corrected set".into()));
            }
            let removed: Vec<Annotation> =
                self.store.read().annotations.values().filter(|a| a.stage_tag == StageTag::Removed).cloned().collect();
            let (videos, prompts) = self.lookup_maps();
            let seed = derive_seed(self.seed, "correction/final");
            let mut taken: HashSet<(String, Dimension)> = active.iter().map(|a| (a.video_id.clone(), a.dimension)).collect();
            let mut ids = IdGen::seeded(derive_seed(seed, "ids"));
            let now = self.clock.now();
            let (mut items, mut superseded, mut unparsed) = (Vec::new(), 0, 0);
            let candidates: Vec<&Annotation> = removed
                .iter()
                .filter(|a| {
                    let fresh = videos.contains_key(&a.video_id) && taken.insert((a.video_id.clone(), a.dimension));
                    superseded += usize::from(!fresh);
                    fresh
                })
                .collect();
            for a in removed.iter().filter(|a| !candidates.iter().any(|c| c.id == a.id)) {
                self.store.transition(&a.id, StageTag::Removed, "superseded", "final_integration", &now)?;
            }
            if !candidates.is_empty() {
                let critic = critics.fit(&active, &videos, &prompts, seed)?;
                let mut verdicts = VerdictCache::new(critic.as_ref(), &videos, &prompts);
                for a in candidates {
                    match verdicts.annotation(a)? {
                        Some(proposed) => items.push(ReviewItem {
                            id: ids.next("rev"),
                            annotation_id: a.id.clone(),
                            video_id: a.video_id.clone(),
                            dimension: a.dimension,
                            proposed,
                            decision: ReviewDecision::Pending,
                        }),
                        None => {
                            unparsed += 1;
                            self.store.transition(&a.id, StageTag::Removed, "unparsed_reannotation", "final_integration", &now)?;
                        }
                    }
                }
            }
            state.issued = Some(Issued {
                items: items.iter().map(|i| i.id.clone()).collect(),
                compared: items.len(),
                agreed: 0,
                reason_similarity: None,
                superseded,
                unparsed,
            });
            self.store.insert_reviews(items)?;
            state.save(self.store)?;
        }
        let issued = state.issued.clone().expect("issued above");
        let mut pending = 0;
        for id in &issued.items {
            let item = self.store.get_review(id)?;
            if item.decision != ReviewDecision::Pending {
                continue;
            }
            let (video, prompt) = self.video_and_prompt(&item.video_id)?;
            match reviewer.review(&item, &video, &prompt)? {
                Some(d) => {
                    self.store.decide_review(id, d, reviewer.name(), &self.clock.now())?;
                }
                None => pending += 1,
            }
        }
        if pending > 0 {
            return Err(PipelineError::Blocked { stage: Stage::Final.as_str(), pending });
        }
        let accepted = issued
            .items
            .iter()
            .map(|id| self.store.get_review(id).map(|r| r.decision == ReviewDecision::Accept))
            .collect::<hfalign_core::Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&a| a)
            .count();
        let final_size = self.store.read().annotations.values().filter(|a| is_active(a.stage_tag)).count();
        state.reports.push(StepReport::Final {
            reviewed: issued.items.len(),
            accepted,
            rejected: issued.items.len() - accepted,
            superseded: issued.superseded,
            unparsed: issued.unparsed,
            final_size,
        });
        state.issued = None;
        state.stage = Stage::Done;
        state.save(self.store)?;
        Ok(state)
    }

    fn expect(&self, stage: Stage) -> Result<CorrectionState> {
        let state = self.state()?;
        if state.stage != stage {
            return Err(PipelineError::Precondition(format!(
                "correction is at stage `{}`, not `{}`",
                state.stage.as_str(),
                stage.as_str()
            )));
        }
        Ok(state)
    }

    fn lookup_maps(&self) -> (HashMap<String, Video>, HashMap<String, Prompt>) {
        let t = self.store.read();
        let videos = t.videos.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let prompts = t.prompts.iter().map(|(k, p)| (k.clone(), p.clone())).collect();
        (videos, prompts)
    }

    fn active_subset(&self, ids: &[String]) -> Vec<Annotation> {
        let t = self.store.read();
        ids.iter()
            .filter_map(|id| t.annotations.get(id))
            .filter(|a| is_active(a.stage_tag))
            .cloned()
            .collect()
    }

    fn video_and_prompt(&self, video_id: &str) -> Result<(Video, Prompt)> {
        let video = self.store.get_video(video_id)?;
        let prompt = self.store.get_prompt(&video.prompt_id)?;
        Ok((video, prompt))
    }
}

fn is_active(tag: StageTag) -> bool {
    matches!(tag, StageTag::Kept | StageTag::Corrected | StageTag::Reintegrated)
}

/// Labels each video once and hands out per-dimension annotations.
struct VerdictCache<'a> {
    critic: &'a dyn Labeler,
    videos: &'a HashMap<String, Video>,
    prompts: &'a HashMap<String, Prompt>,
    cache: HashMap<String, [Option<Verdict>; 3]>,
}

impl<'a> VerdictCache<'a> {
    fn new(critic: &'a dyn Labeler, videos: &'a HashMap<String, Video>, prompts: &'a HashMap<String, Prompt>) -> Self {
        Self { critic, videos, prompts, cache: HashMap::new() }
    }

    /// The critic's annotation for `a`'s video and dimension; `None` when
    /// the answer did not parse.
    fn annotation(&mut self, a: &Annotation) -> Result<Option<Annotation>> {
        if !self.cache.contains_key(&a.video_id) {
            let video = self
                .videos
                .get(&a.video_id)
                .ok_or_else(|| PipelineError::Precondition(format!("annotation `{}` names unknown video `{}`", a.id, a.video_id)))?;
            let prompt = self.prompts.get(&video.prompt_id).ok_or_else(|| {
                PipelineError::Precondition(format!("video `{}` names unknown prompt `{}`", video.id, video.prompt_id))
            })?;
            let verdicts = self.critic.label_video(video, prompt)?.map(|r| r.ok());
            self.cache.insert(a.video_id.clone(), verdicts);
        }
        let Some(v) = &self.cache[&a.video_id][a.dimension.index()] else { return Ok(None) };
        let reason = if v.reason.trim().is_empty() {
            format!("{} judged {} by the critic", a.dimension.title(), v.label.word())
        } else {
            v.reason.clone()
        };
        Ok(Some(Annotation {
            id: format!("{}/critic", a.id),
            video_id: a.video_id.clone(),
            dimension: a.dimension,
            label: v.label,
            reason,
            annotator: Annotator::Critic,
            stage_tag: a.stage_tag,
            annotator_id: Some("critic".into()),
            note: None,
        }))
    }
}

fn jaccard(a: &str, b: &str) -> f64 {
    let wa: HashSet<&str> = a.split_whitespace().collect();
    let wb: HashSet<&str> = b.split_whitespace().collect();
    let union = wa.union(&wb).count();
    if union == 0 {
        return 1.0;
    }
    wa.intersection(&wb).count() as f64 / union as f64
}

// --- audit ---------------------------------------------------------------

/// Result of checking the lifecycle bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationAudit {
    pub raw: usize,
    pub active: usize,
    pub rejected: usize,
    pub still_raw: usize,
    /// Annotations whose audit trail does not replay to their stage tag.
    pub replay_mismatches: Vec<String>,
    /// (video, dimension) pairs with more than one active annotation.
    pub duplicate_active: usize,
    pub ok: bool,
}

/// Replays the audit log from `raw` for every annotation and checks that
/// `|raw| = |active| + |rejected|` with nothing left raw.
pub fn conservation_audit(store: &Store) -> ConservationAudit {
    let t = store.read();
    let mut replay: HashMap<&str, StageTag> = t.annotations.keys().map(|k| (k.as_str(), StageTag::Raw)).collect();
    let mut bad: HashSet<String> = HashSet::new();
    for e in &t.audit {
        match replay.get_mut(e.annotation_id.as_str()) {
            Some(stage) if *stage == e.from_stage => *stage = e.to_stage,
            _ => {
                bad.insert(e.annotation_id.clone());
            }
        }
    }
    let mut counts: HashMap<(&str, Dimension), usize> = HashMap::new();
    let (mut active, mut rejected, mut still_raw) = (0, 0, 0);
    for a in t.annotations.values() {
        if replay.get(a.id.as_str()) != Some(&a.stage_tag) {
            bad.insert(a.id.clone());
        }
        match a.stage_tag {
            StageTag::Raw => still_raw += 1,
            StageTag::Removed => rejected += 1,
            _ => {
                active += 1;
                *counts.entry((a.video_id.as_str(), a.dimension)).or_default() += 1;
            }
        }
    }
    let mut replay_mismatches: Vec<String> = bad.into_iter().collect();
    replay_mismatches.sort();
    let duplicate_active = counts.values().filter(|&&n| n > 1).count();
    let raw = t.annotations.len();
    let ok = raw == active + rejected && still_raw == 0 && replay_mismatches.is_empty() && duplicate_active == 0;
    ConservationAudit { raw, active, rejected, still_raw, replay_mismatches, duplicate_active, ok }
}
