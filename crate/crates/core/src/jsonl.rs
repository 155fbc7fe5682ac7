//! JSONL interchange: one JSON object per line, UTF-8.
//!
//! Prompts: `{id, subjects[], scene, action, caption}`.
//! Videos: `{id, prompt_id, source, frames}` with frames as nested arrays.
//! Annotations: `{id, video_id, dimension, label, reason, annotator, stage_tag}`.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::store::Store;
use crate::types::{Annotation, Prompt, Video};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Prompts,
    Videos,
    Annotations,
}

impl RecordKind {
    pub const ALL: [RecordKind; 3] = [RecordKind::Prompts, RecordKind::Videos, RecordKind::Annotations];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Prompts => "prompts",
            RecordKind::Videos => "videos",
            RecordKind::Annotations => "annotations",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        RecordKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Validation(format!("unknown record kind `{s}`")))
    }
}

fn write_lines<T: Serialize>(records: &[T], mut out: impl Write) -> Result<usize> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

/// Writes every record of `kind` in insertion order. Returns the count.
pub fn export_jsonl(store: &Store, kind: RecordKind, out: impl Write) -> Result<usize> {
    match kind {
        RecordKind::Prompts => write_lines(&store.prompts(), out),
        RecordKind::Videos => write_lines(&store.videos(), out),
        RecordKind::Annotations => write_lines(&store.annotations(), out),
    }
}

/// Parses every line of `input`, then inserts all records at once.
///
/// Nothing is inserted if any line is malformed (error names the 1-based
/// line) or if any id repeats within the file or already exists in the
/// store (conflict error).
pub fn parse_jsonl<T: DeserializeOwned>(input: impl BufRead, id: impl Fn(&T) -> &str) -> Result<Vec<T>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T =
            serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: i + 1, message: e.to_string() })?;
        if !seen.insert(id(&rec).to_string()) {
            return Err(CoreError::Conflict { kind: "record", id: id(&rec).to_string() });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn import_jsonl(store: &Store, kind: RecordKind, input: impl BufRead) -> Result<usize> {
    match kind {
        RecordKind::Prompts => store.insert_prompts(parse_jsonl::<Prompt>(input, |p| &p.id)?),
        RecordKind::Videos => store.insert_videos(parse_jsonl::<Video>(input, |v| &v.id)?),
        RecordKind::Annotations => store.insert_annotations(parse_jsonl::<Annotation>(input, |a| &a.id)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Annotator, Dimension, Frames, Label, StageTag, VideoShape, VideoSource};
    use std::io::Cursor;

    fn ann(i: usize) -> Annotation {
        Annotation {
            id: format!("a{i}"),
            video_id: format!("v{}", i / 3),
            dimension: Dimension::ALL[i % 3],
            label: Label::ALL[i % 3],
            reason: format!("reason {i}"),
            annotator: Annotator::Human,
            stage_tag: StageTag::Raw,
            annotator_id: None,
            note: None,
        }
    }

    #[test]
    fn export_import_ten_annotations() {
        let src = Store::in_memory();
        for i in 0..10 {
            src.put_annotation(ann(i)).unwrap();
        }
        let mut buf = Vec::new();
        assert_eq!(export_jsonl(&src, RecordKind::Annotations, &mut buf).unwrap(), 10);
        let dst = Store::in_memory();
        assert_eq!(import_jsonl(&dst, RecordKind::Annotations, Cursor::new(buf)).unwrap(), 10);
        assert_eq!(dst.annotations(), src.annotations());
    }

    #[test]
    fn missing_label_names_the_line() {
        let good = serde_json::to_string(&ann(0)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&ann(1)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("label");
        let text = format!("{good}\n{v}\n");
        let err = import_jsonl(&Store::in_memory(), RecordKind::Annotations, Cursor::new(text)).unwrap_err();
        match err {
            CoreError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_video_id_conflicts() {
        let v = Video {
            id: "v1".into(),
            prompt_id: "p".into(),
            source: VideoSource::Synthesized,
            frames: Frames::filled(VideoShape::new(2, 1, 1), 0),
        };
        let line = serde_json::to_string(&v).unwrap();
        let store = Store::in_memory();
        let err = import_jsonl(&store, RecordKind::Videos, Cursor::new(format!("{line}\n{line}\n"))).unwrap_err();
        assert!(matches!(err, CoreError::Conflict { .. }));
        assert_eq!(store.counts().1, 0);
        // Also a conflict against records already in the store.
        store.put_video(v).unwrap();
        let err = import_jsonl(&store, RecordKind::Videos, Cursor::new(line)).unwrap_err();
        assert!(matches!(err, CoreError::Conflict { .. }));
    }

    #[test]
    fn schema_keys_are_exact() {
        let v: serde_json::Value = serde_json::to_value(ann(0)).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["annotator", "dimension", "id", "label", "reason", "stage_tag", "video_id"]);
    }
}
