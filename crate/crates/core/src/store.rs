//! Embedded single-file dataset store.
//!
//! All tables live in memory behind a reader-writer lock: any number of
//! concurrent readers, one writer at a time. [`Store::flush`] persists the
//! whole store to one JSONL file (one tagged record per line); the same
//! file is read back by [`Store::open`].

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::{
    AdjudicationItem, Annotation, AuditEntry, Dimension, Label, Prompt, Resolution, ReviewDecision, ReviewItem,
    StageTag, Video, VideoShape, VideoSource,
};

/// Optional schema constraint applied to every stored video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoSchema {
    pub shape: VideoShape,
    pub vocab_size: usize,
}

/// A manual removal request for one annotation, consumed by coarse filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualRemoval {
    pub annotation_id: String,
    pub note: String,
    pub actor: String,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Tables {
    pub prompts: IndexMap<String, Prompt>,
    pub videos: IndexMap<String, Video>,
    pub annotations: IndexMap<String, Annotation>,
    pub adjudications: IndexMap<String, AdjudicationItem>,
    pub reviews: IndexMap<String, ReviewItem>,
    pub removals: IndexMap<String, ManualRemoval>,
    pub audit: Vec<AuditEntry>,
    /// Free-form keyed state, e.g. the correction orchestrator's progress.
    pub meta: IndexMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
enum StoredRecord {
    Prompt(Prompt),
    Video(Video),
    Annotation(Annotation),
    Adjudication(AdjudicationItem),
    Review(ReviewItem),
    Removal(ManualRemoval),
    Audit(AuditEntry),
    Meta { key: String, value: serde_json::Value },
}

/// Matches `stage_tag` by equality or inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagFilter {
    Is(StageTag),
    IsNot(StageTag),
}

impl TagFilter {
    fn matches(self, tag: StageTag) -> bool {
        match self {
            TagFilter::Is(t) => tag == t,
            TagFilter::IsNot(t) => tag != t,
        }
    }
}

/// Conjunction of optional predicates over annotations. `category` matches
/// any category item (subject, scene or action) of the annotated video's
/// prompt; `source` matches the annotated video's source.
#[derive(Debug, Clone, Default)]
pub struct AnnotationFilter {
    pub source: Option<VideoSource>,
    pub stage_tag: Option<TagFilter>,
    pub dimension: Option<Dimension>,
    pub label: Option<Label>,
    pub category: Option<String>,
    pub video_id: Option<String>,
}

impl AnnotationFilter {
    pub fn active() -> Self {
        Self { stage_tag: Some(TagFilter::IsNot(StageTag::Removed)), ..Self::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VideoFilter {
    pub source: Option<VideoSource>,
    pub prompt_id: Option<String>,
    pub category: Option<String>,
}

#[derive(Debug, Default)]
pub struct Store {
    tables: RwLock<Tables>,
    path: Option<PathBuf>,
    schema: Option<VideoSchema>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_schema(mut self, schema: VideoSchema) -> Self {
        self.schema = Some(schema);
        self
    }

    /// Opens (or creates on first flush) the store file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut tables = Tables::default();
        if path.exists() {
            let reader = BufReader::new(fs::File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: StoredRecord = serde_json::from_str(&line)
                    .map_err(|e| CoreError::Parse { line: i + 1, message: e.to_string() })?;
                match record {
                    StoredRecord::Prompt(p) => {
                        tables.prompts.insert(p.id.clone(), p);
                    }
                    StoredRecord::Video(v) => {
                        tables.videos.insert(v.id.clone(), v);
                    }
                    StoredRecord::Annotation(a) => {
                        tables.annotations.insert(a.id.clone(), a);
                    }
                    StoredRecord::Adjudication(a) => {
                        tables.adjudications.insert(a.id.clone(), a);
                    }
                    StoredRecord::Review(r) => {
                        tables.reviews.insert(r.id.clone(), r);
                    }
                    StoredRecord::Removal(r) => {
                        tables.removals.insert(r.annotation_id.clone(), r);
                    }
                    StoredRecord::Audit(a) => tables.audit.push(a),
                    StoredRecord::Meta { key, value } => {
                        tables.meta.insert(key, value);
                    }
                }
            }
        }
        Ok(Self { tables: RwLock::new(tables), path: Some(path), schema: None })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes the store to its file through a temporary sibling and rename.
    /// A no-op for in-memory stores.
    pub fn flush(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let tables = self.tables.read();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            let mut emit = |rec: StoredRecord| -> Result<()> {
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
                Ok(())
            };
            for p in tables.prompts.values() {
                emit(StoredRecord::Prompt(p.clone()))?;
            }
            for v in tables.videos.values() {
                emit(StoredRecord::Video(v.clone()))?;
            }
            for a in tables.annotations.values() {
                emit(StoredRecord::Annotation(a.clone()))?;
            }
            for a in tables.adjudications.values() {
                emit(StoredRecord::Adjudication(a.clone()))?;
            }
            for r in tables.reviews.values() {
                emit(StoredRecord::Review(r.clone()))?;
            }
            for r in tables.removals.values() {
                emit(StoredRecord::Removal(r.clone()))?;
            }
            for a in &tables.audit {
                emit(StoredRecord::Audit(a.clone()))?;
            }
            for (key, value) in &tables.meta {
                emit(StoredRecord::Meta { key: key.clone(), value: value.clone() })?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Shared read access to every table.
    pub fn read(&self) -> RwLockReadGuard<'_, Tables> {
        self.tables.read()
    }

    /// Exclusive write access. Callers that bypass the typed setters are
    /// responsible for keeping records valid.
    pub fn write(&self) -> RwLockWriteGuard<'_, Tables> {
        self.tables.write()
    }

    pub fn snapshot(&self) -> Tables {
        self.tables.read().clone()
    }

    fn check_video(&self, v: &Video) -> Result<()> {
        if v.id.is_empty() || v.prompt_id.is_empty() {
            return Err(CoreError::Validation("video id and prompt_id must be non-empty".into()));
        }
        if let Some(schema) = self.schema {
            v.validate(schema.shape, schema.vocab_size)?;
        }
        Ok(())
    }

    // --- puts (insert or replace) -------------------------------------

    pub fn put_prompt(&self, p: Prompt) -> Result<()> {
        p.validate()?;
        self.tables.write().prompts.insert(p.id.clone(), p);
        Ok(())
    }

    pub fn put_video(&self, v: Video) -> Result<()> {
        self.check_video(&v)?;
        self.tables.write().videos.insert(v.id.clone(), v);
        Ok(())
    }

    pub fn put_annotation(&self, a: Annotation) -> Result<()> {
        a.validate()?;
        self.tables.write().annotations.insert(a.id.clone(), a);
        Ok(())
    }

    // --- strict inserts ------------------------------------------------

    pub fn insert_prompts(&self, records: Vec<Prompt>) -> Result<usize> {
        for p in &records {
            p.validate()?;
        }
        let mut t = self.tables.write();
        insert_all(&mut t.prompts, records, "prompt", |p| &p.id)
    }

    pub fn insert_videos(&self, records: Vec<Video>) -> Result<usize> {
        for v in &records {
            self.check_video(v)?;
        }
        let mut t = self.tables.write();
        insert_all(&mut t.videos, records, "video", |v| &v.id)
    }

    pub fn insert_annotations(&self, records: Vec<Annotation>) -> Result<usize> {
        for a in &records {
            a.validate()?;
        }
        let mut t = self.tables.write();
        insert_all(&mut t.annotations, records, "annotation", |a| &a.id)
    }

    // --- gets ----------------------------------------------------------

    pub fn get_prompt(&self, id: &str) -> Result<Prompt> {
        self.tables.read().prompts.get(id).cloned().ok_or_else(|| not_found("prompt", id))
    }

    pub fn get_video(&self, id: &str) -> Result<Video> {
        self.tables.read().videos.get(id).cloned().ok_or_else(|| not_found("video", id))
    }

    pub fn get_annotation(&self, id: &str) -> Result<Annotation> {
        self.tables.read().annotations.get(id).cloned().ok_or_else(|| not_found("annotation", id))
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.tables.read().prompts.values().cloned().collect()
    }

    pub fn videos(&self) -> Vec<Video> {
        self.tables.read().videos.values().cloned().collect()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.tables.read().annotations.values().cloned().collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let t = self.tables.read();
        (t.prompts.len(), t.videos.len(), t.annotations.len())
    }

    // --- queries -------------------------------------------------------

    pub fn query_annotations(&self, filter: &AnnotationFilter) -> Vec<Annotation> {
        let t = self.tables.read();
        t.annotations
            .values()
            .filter(|a| annotation_matches(&t, a, filter))
            .cloned()
            .collect()
    }

    pub fn query_videos(&self, filter: &VideoFilter) -> Vec<Video> {
        let t = self.tables.read();
        t.videos
            .values()
            .filter(|v| {
                filter.source.is_none_or(|s| v.source == s)
                    && filter.prompt_id.as_ref().is_none_or(|p| &v.prompt_id == p)
                    && filter.category.as_ref().is_none_or(|c| {
                        t.prompts.get(&v.prompt_id).is_some_and(|p| p.items().any(|i| i == c))
                    })
            })
            .cloned()
            .collect()
    }

    // --- correction bookkeeping ---------------------------------------

    pub fn request_removal(&self, removal: ManualRemoval) -> Result<()> {
        let mut t = self.tables.write();
        if !t.annotations.contains_key(&removal.annotation_id) {
            return Err(not_found("annotation", &removal.annotation_id));
        }
        t.removals.insert(removal.annotation_id.clone(), removal);
        Ok(())
    }

    pub fn pending_adjudications(&self) -> Vec<AdjudicationItem> {
        self.tables
            .read()
            .adjudications
            .values()
            .filter(|a| a.resolution == Resolution::Unresolved)
            .cloned()
            .collect()
    }

    pub fn pending_reviews(&self) -> Vec<ReviewItem> {
        self.tables
            .read()
            .reviews
            .values()
            .filter(|r| r.decision == ReviewDecision::Pending)
            .cloned()
            .collect()
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.tables.read().audit.clone()
    }

    pub fn append_audit(&self, entry: AuditEntry) {
        self.tables.write().audit.push(entry);
    }

    pub fn get_adjudication(&self, id: &str) -> Result<AdjudicationItem> {
        self.tables.read().adjudications.get(id).cloned().ok_or_else(|| not_found("adjudication", id))
    }

    pub fn get_review(&self, id: &str) -> Result<ReviewItem> {
        self.tables.read().reviews.get(id).cloned().ok_or_else(|| not_found("review", id))
    }

    pub fn insert_adjudications(&self, records: Vec<AdjudicationItem>) -> Result<usize> {
        let mut t = self.tables.write();
        insert_all(&mut t.adjudications, records, "adjudication", |a| &a.id)
    }

    pub fn insert_reviews(&self, records: Vec<ReviewItem>) -> Result<usize> {
        let mut t = self.tables.write();
        insert_all(&mut t.reviews, records, "review", |r| &r.id)
    }

    /// Moves an annotation to `to` and logs the transition.
    pub fn transition(&self, annotation_id: &str, to: StageTag, rule: &str, actor: &str, timestamp: &str) -> Result<()> {
        let mut t = self.tables.write();
        let a = t.annotations.get_mut(annotation_id).ok_or_else(|| not_found("annotation", annotation_id))?;
        let from = a.stage_tag;
        a.stage_tag = to;
        a.note = Some(rule.to_string());
        t.audit.push(entry(annotation_id, from, to, rule, actor, timestamp));
        Ok(())
    }

    /// Sets the resolution of a pending adjudication and applies it:
    /// `keep_model` copies the model's label and reason onto the annotation
    /// and tags it `corrected`; `keep_human` leaves it `kept`. Both are
    /// logged.
    pub fn resolve_adjudication(
        &self,
        id: &str,
        resolution: Resolution,
        actor: &str,
        timestamp: &str,
    ) -> Result<AdjudicationItem> {
        if resolution == Resolution::Unresolved {
            return Err(CoreError::Validation("resolution must be keep_human or keep_model".into()));
        }
        let mut t = self.tables.write();
        let item = t.adjudications.get_mut(id).ok_or_else(|| not_found("adjudication", id))?;
        item.resolve(resolution)?;
        let item = item.clone();
        let a = t
            .annotations
            .get_mut(&item.annotation_id)
            .ok_or_else(|| not_found("annotation", &item.annotation_id))?;
        let from = a.stage_tag;
        let to = match (resolution, &item.model) {
            (Resolution::KeepModel, Some(model)) => {
                a.label = model.label;
                a.reason = model.reason.clone();
                a.annotator = model.annotator;
                a.annotator_id = model.annotator_id.clone();
                StageTag::Corrected
            }
            _ => from,
        };
        a.stage_tag = to;
        a.note = Some(format!("adjudication {id}"));
        let rule = match resolution {
            Resolution::KeepModel => "keep_model",
            _ => "keep_human",
        };
        t.audit.push(entry(&item.annotation_id, from, to, rule, actor, timestamp));
        Ok(item)
    }

    /// Records a decision on a pending review. Accepting copies the proposed
    /// label and reason onto the removed annotation and tags it
    /// `reintegrated`; rejecting leaves it `removed`. Both are logged.
    pub fn decide_review(&self, id: &str, decision: ReviewDecision, actor: &str, timestamp: &str) -> Result<ReviewItem> {
        if decision == ReviewDecision::Pending {
            return Err(CoreError::Validation("decision must be accept or reject".into()));
        }
        let mut t = self.tables.write();
        let item = t.reviews.get_mut(id).ok_or_else(|| not_found("review", id))?;
        if item.decision != ReviewDecision::Pending {
            return Err(CoreError::Conflict { kind: "review decision", id: id.to_string() });
        }
        item.decision = decision;
        let item = item.clone();
        let a = t
            .annotations
            .get_mut(&item.annotation_id)
            .ok_or_else(|| not_found("annotation", &item.annotation_id))?;
        let from = a.stage_tag;
        let (to, rule) = if decision == ReviewDecision::Accept {
            a.label = item.proposed.label;
            a.reason = item.proposed.reason.clone();
            a.annotator = item.proposed.annotator;
            a.annotator_id = item.proposed.annotator_id.clone();
            (StageTag::Reintegrated, "review_accept")
        } else {
            (from, "review_reject")
        };
        a.stage_tag = to;
        a.note = Some(format!("review {id}"));
        t.audit.push(entry(&item.annotation_id, from, to, rule, actor, timestamp));
        Ok(item)
    }

    pub fn set_meta(&self, key: &str, value: serde_json::Value) {
        self.tables.write().meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<serde_json::Value> {
        self.tables.read().meta.get(key).cloned()
    }
}

fn entry(annotation_id: &str, from: StageTag, to: StageTag, rule: &str, actor: &str, timestamp: &str) -> AuditEntry {
    AuditEntry {
        annotation_id: annotation_id.to_string(),
        from_stage: from,
        to_stage: to,
        rule_or_resolution: rule.to_string(),
        actor: actor.to_string(),
        timestamp: timestamp.to_string(),
    }
}

fn not_found(kind: &'static str, id: &str) -> CoreError {
    CoreError::NotFound { kind, id: id.to_string() }
}

fn insert_all<T>(
    table: &mut IndexMap<String, T>,
    records: Vec<T>,
    kind: &'static str,
    id: impl Fn(&T) -> &String,
) -> Result<usize> {
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        let rid = id(r);
        if table.contains_key(rid) || !seen.insert(rid.clone()) {
            return Err(CoreError::Conflict { kind, id: rid.clone() });
        }
    }
    let n = records.len();
    for r in records {
        table.insert(id(&r).clone(), r);
    }
    Ok(n)
}

fn annotation_matches(t: &Tables, a: &Annotation, f: &AnnotationFilter) -> bool {
    if f.stage_tag.is_some_and(|tf| !tf.matches(a.stage_tag))
        || f.dimension.is_some_and(|d| a.dimension != d)
        || f.label.is_some_and(|l| a.label != l)
        || f.video_id.as_ref().is_some_and(|v| &a.video_id != v)
    {
        return false;
    }
    if f.source.is_none() && f.category.is_none() {
        return true;
    }
    let Some(video) = t.videos.get(&a.video_id) else { return false };
    if f.source.is_some_and(|s| video.source != s) {
        return false;
    }
    match &f.category {
        None => true,
        Some(c) => t.prompts.get(&video.prompt_id).is_some_and(|p| p.items().any(|i| i == c)),
    }
}
