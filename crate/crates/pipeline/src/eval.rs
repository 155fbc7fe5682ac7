//! Critic accuracy, oracle-scored uplift and pairwise preference votes.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use hfalign_core::config::derive_seed;
use hfalign_core::{Dimension, Label, LabelCounts, Oracle, Prompt, ScoreMap, Video};

use crate::align::{fresh_samples, parallel_map};
use crate::critic::Labeler;
use crate::error::{PipelineError, Result};
use crate::toygen::GenModel;

/// One held-out judgement to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub video: Video,
    pub prompt: Prompt,
    pub dimension: Dimension,
    pub label: Label,
}

/// `counts[truth][predicted]`, indexed in `Label::ALL` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 3]; 3],
}

impl Confusion {
    fn index(l: Label) -> usize {
        Label::ALL.iter().position(|x| *x == l).expect("listed")
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        self.counts[Self::index(truth)][Self::index(predicted)] += 1;
    }

    pub fn get(&self, truth: Label, predicted: Label) -> usize {
        self.counts[Self::index(truth)][Self::index(predicted)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionAccuracy {
    pub dimension: Dimension,
    pub total: usize,
    pub correct: usize,
    pub parse_failures: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Exact-label-match rate over all items; parse failures count as misses.
    pub accuracy: f64,
    /// Unweighted mean of the per-dimension accuracies that have items.
    pub mean_dimension_accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub parse_failures: usize,
    pub per_dimension: Vec<DimensionAccuracy>,
}

/// Scores `labeler` against held-out labels. Each video is labeled once.
pub fn critic_accuracy(labeler: &dyn Labeler, items: &[TestItem]) -> Result<AccuracyReport> {
    if items.is_empty() {
        return Err(PipelineError::Precondition("accuracy needs a non-empty test set".into()));
    }
    let mut first: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<&TestItem> = Vec::new();
    for it in items {
        first.entry(it.video.id.as_str()).or_insert_with(|| {
            unique.push(it);
            unique.len() - 1
        });
    }
    let predictions = parallel_map(&unique, |it| {
        Ok(labeler.label_video(&it.video, &it.prompt)?.map(|v| v.ok().map(|v| v.label)))
    })?;
    let mut per: Vec<DimensionAccuracy> = Dimension::ALL
        .iter()
        .map(|&dimension| DimensionAccuracy {
            dimension,
            total: 0,
            correct: 0,
            parse_failures: 0,
            accuracy: 0.0,
            confusion: Confusion::default(),
        })
        .collect();
    for it in items {
        let d = &mut per[it.dimension.index()];
        d.total += 1;
        match predictions[first[it.video.id.as_str()]][it.dimension.index()] {
            Some(p) => {
                d.confusion.add(it.label, p);
                d.correct += usize::from(p == it.label);
            }
            None => d.parse_failures += 1,
        }
    }
    for d in &mut per {
        d.accuracy = if d.total == 0 { 0.0 } else { d.correct as f64 / d.total as f64 };
    }
    let with_items: Vec<f64> = per.iter().filter(|d| d.total > 0).map(|d| d.accuracy).collect();
    let correct: usize = per.iter().map(|d| d.correct).sum();
    Ok(AccuracyReport {
        accuracy: correct as f64 / items.len() as f64,
        mean_dimension_accuracy: with_items.iter().sum::<f64>() / with_items.len() as f64,
        total: items.len(),
        correct,
        parse_failures: per.iter().map(|d| d.parse_failures).sum(),
        per_dimension: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionUplift {
    pub dimension: Dimension,
    pub samples: usize,
    pub metric_before: f64,
    pub metric_after: f64,
    pub metric_uplift: f64,
    pub labels_before: LabelCounts,
    pub labels_after: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub per_dimension: Vec<DimensionUplift>,
    /// Mean oracle reward under the score map.
    pub reward_before: f64,
    pub reward_after: f64,
    pub reward_uplift: f64,
    /// `(after - before) / before`; zero when `before` is zero.
    pub relative_uplift: f64,
}

struct SampleStats {
    metrics: [f64; 3],
    labels: [Label; 3],
}

fn oracle_stats(gen: &GenModel, oracle: &Oracle, prompts: &[Prompt], k: usize, seed: u64) -> Result<Vec<SampleStats>> {
    let samples = fresh_samples(gen, prompts, k, seed);
    parallel_map(&samples, |(v, p)| {
        let m = oracle.metrics(v, p)?;
        Ok(SampleStats { metrics: Dimension::ALL.map(|d| m.get(d)), labels: oracle.labels(v, p)? })
    })
}

/// Oracle metrics and labels of `k` fresh samples per prompt from each
/// model. Both models are sampled with the same seeds.
pub fn uplift_report(
    before: &GenModel,
    after: &GenModel,
    prompts: &[Prompt],
    oracle: &Oracle,
    k: usize,
    map: &ScoreMap,
    seed: u64,
) -> Result<UpliftReport> {
    let a = oracle_stats(before, oracle, prompts, k, seed)?;
    let b = oracle_stats(after, oracle, prompts, k, seed)?;
    let n = a.len().max(1) as f64;
    let per_dimension = Dimension::ALL
        .iter()
        .map(|&d| {
            let i = d.index();
            let mut labels_before = LabelCounts::default();
            let mut labels_after = LabelCounts::default();
            a.iter().for_each(|s| labels_before.add(s.labels[i]));
            b.iter().for_each(|s| labels_after.add(s.labels[i]));
            let metric_before = a.iter().map(|s| s.metrics[i]).sum::<f64>() / n;
            let metric_after = b.iter().map(|s| s.metrics[i]).sum::<f64>() / n;
            DimensionUplift {
                dimension: d,
                samples: a.len(),
                metric_before,
                metric_after,
                metric_uplift: metric_after - metric_before,
                labels_before,
                labels_after,
            }
        })
        .collect();
    let reward_before = a.iter().map(|s| map.reward(&s.labels)).sum::<f64>() / n;
    let reward_after = b.iter().map(|s| map.reward(&s.labels)).sum::<f64>() / n;
    Ok(UpliftReport {
        prompts: prompts.len(),
        samples_per_prompt: k,
        per_dimension,
        reward_before,
        reward_after,
        reward_uplift: reward_after - reward_before,
        relative_uplift: if reward_before > 0.0 { (reward_after - reward_before) / reward_before } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseVote {
    pub prompt_id: String,
    pub method_a: String,
    pub method_b: String,
    pub votes: Vec<Vote>,
    /// True when at least the threshold number of votes favor one side.
    pub majority: bool,
    /// Side with more votes, or `Tie`.
    pub winner: Vote,
}

impl PairwiseVote {
    pub fn new(prompt_id: &str, method_a: &str, method_b: &str, votes: Vec<Vote>, threshold: usize) -> Self {
        let a = votes.iter().filter(|v| **v == Vote::A).count();
        let b = votes.iter().filter(|v| **v == Vote::B).count();
        let winner = match a.cmp(&b) {
            std::cmp::Ordering::Greater => Vote::A,
            std::cmp::Ordering::Less => Vote::B,
            std::cmp::Ordering::Equal => Vote::Tie,
        };
        Self {
            prompt_id: prompt_id.into(),
            method_a: method_a.into(),
            method_b: method_b.into(),
            votes,
            majority: a >= threshold || b >= threshold,
            winner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTable {
    pub method_a: String,
    pub method_b: String,
    pub raters: usize,
    pub threshold: usize,
    pub rows: Vec<PairwiseVote>,
    /// Share of prompts won by each side or tied, in percent.
    pub a_wins_pct: f64,
    pub b_wins_pct: f64,
    pub ties_pct: f64,
    /// Share of prompts where the threshold was reached, in percent.
    pub majority_pct: f64,
    /// Share of individual votes, in percent.
    pub a_votes_pct: f64,
    pub b_votes_pct: f64,
    pub tie_votes_pct: f64,
}

/// Aggregates per-prompt votes. Every row must carry exactly `raters` votes.
pub fn aggregate_votes(rows: Vec<PairwiseVote>, raters: usize, threshold: usize) -> Result<PairwiseTable> {
    if rows.is_empty() {
        return Err(PipelineError::Precondition("no pairwise votes to aggregate".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.votes.len() != raters) {
        return Err(PipelineError::Precondition(format!(
            "prompt `{}` has {} votes, expected {raters}",
            r.prompt_id,
            r.votes.len()
        )));
    }
    let n = rows.len() as f64;
    let pct = |count: usize, of: f64| 100.0 * count as f64 / of;
    let winners = |w: Vote| rows.iter().filter(|r| r.winner == w).count();
    let votes = |w: Vote| rows.iter().flat_map(|r| &r.votes).filter(|v| **v == w).count();
    let total_votes = (rows.len() * raters) as f64;
    Ok(PairwiseTable {
        method_a: rows[0].method_a.clone(),
        method_b: rows[0].method_b.clone(),
        raters,
        threshold,
        a_wins_pct: pct(winners(Vote::A), n),
        b_wins_pct: pct(winners(Vote::B), n),
        ties_pct: pct(winners(Vote::Tie), n),
        majority_pct: pct(rows.iter().filter(|r| r.majority).count(), n),
        a_votes_pct: pct(votes(Vote::A), total_votes),
        b_votes_pct: pct(votes(Vote::B), total_votes),
        tie_votes_pct: pct(votes(Vote::Tie), total_votes),
        rows,
    })
}

/// Settings for oracle raters.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseConfig {
    pub raters: usize,
    pub threshold: usize,
    /// Rewards closer than this are a tie.
    pub epsilon: f64,
    /// Samples each rater draws from each model per prompt.
    pub samples: usize,
    pub seed: u64,
}

/// Oracle raters: rater `j` draws its own samples from both models (the same
/// seeds for both) and votes for the higher mean oracle reward, or a tie
/// within `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_eval(
    (name_a, gen_a): (&str, &GenModel),
    (name_b, gen_b): (&str, &GenModel),
    prompts: &[Prompt],
    oracle: &Oracle,
    map: &ScoreMap,
    cfg: &PairwiseConfig,
) -> Result<PairwiseTable> {
    let rows = parallel_map(prompts, |p| {
        let votes = (0..cfg.raters)
            .map(|j| {
                let seed = derive_seed(cfg.seed, &format!("rater/{j}"));
                let one = std::slice::from_ref(p);
                let mean = |g: &GenModel| -> Result<f64> {
                    let s = fresh_samples(g, one, cfg.samples.max(1), seed);
                    let mut total = 0.0;
                    for (v, p) in &s {
                        total += oracle.reward(v, p, map)?;
                    }
                    Ok(total / s.len() as f64)
                };
                let diff = mean(gen_a)? - mean(gen_b)?;
                Ok(if diff > cfg.epsilon {
                    Vote::A
                } else if diff < -cfg.epsilon {
                    Vote::B
                } else {
                    Vote::Tie
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairwiseVote::new(&p.id, name_a, name_b, votes, cfg.threshold))
    })?;
    aggregate_votes(rows, cfg.raters, cfg.threshold)
}

/// Plain-text table with right-aligned columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
