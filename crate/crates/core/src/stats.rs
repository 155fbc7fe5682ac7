use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::Store;
use crate::types::{Dimension, Label, StageTag, VideoSource};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    #[serde(rename = "Good")]
    pub good: usize,
    #[serde(rename = "Normal")]
    pub normal: usize,
    #[serde(rename = "Bad")]
    pub bad: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: Label) {
        match label {
            Label::Good => self.good += 1,
            Label::Normal => self.normal += 1,
            Label::Bad => self.bad += 1,
        }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Good => self.good,
            Label::Normal => self.normal,
            Label::Bad => self.bad,
        }
    }

    pub fn total(&self) -> usize {
        self.good + self.normal + self.bad
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub videos: usize,
    pub labels: LabelCounts,
}

/// Dataset summary over active (not removed) annotations.
///
/// `per_category` is keyed by category item; an annotation counts once
/// under each item of its video's prompt, so categories overlap while
/// `labels` partitions the active annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub prompts: usize,
    pub videos: usize,
    pub synthesized_videos: usize,
    pub real_videos: usize,
    pub active_annotations: usize,
    pub labels: LabelCounts,
    pub per_dimension: BTreeMap<Dimension, LabelCounts>,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub stage_tags: BTreeMap<StageTag, usize>,
}

pub fn compute_stats(store: &Store) -> DatasetStats {
    let t = store.read();
    let mut stats = DatasetStats {
        prompts: t.prompts.len(),
        videos: t.videos.len(),
        ..DatasetStats::default()
    };
    for d in Dimension::ALL {
        stats.per_dimension.insert(d, LabelCounts::default());
    }
    for tag in StageTag::ALL {
        stats.stage_tags.insert(tag, 0);
    }
    for v in t.videos.values() {
        match v.source {
            VideoSource::Synthesized => stats.synthesized_videos += 1,
            VideoSource::Real => stats.real_videos += 1,
        }
        if let Some(p) = t.prompts.get(&v.prompt_id) {
            for item in p.items() {
                stats.per_category.entry(item.to_string()).or_default().videos += 1;
            }
        }
    }
    for a in t.annotations.values() {
        *stats.stage_tags.entry(a.stage_tag).or_default() += 1;
        if !a.stage_tag.is_active() {
            continue;
        }
        stats.active_annotations += 1;
        stats.labels.add(a.label);
        stats.per_dimension.entry(a.dimension).or_default().add(a.label);
        let prompt = t.videos.get(&a.video_id).and_then(|v| t.prompts.get(&v.prompt_id));
        if let Some(p) = prompt {
            for item in p.items() {
                stats.per_category.entry(item.to_string()).or_default().labels.add(a.label);
            }
        }
    }
    stats
}
