//! Pipeline stages and the closed-loop experiment built from them.
//!
//! prompts → biased base generator → K samples per prompt → oracle labels →
//! critic (with a held-out split) → RWL or RS fine-tuning → oracle-scored
//! uplift on fresh samples.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use hfalign_core::config::{derive_seed, AlignMethod, ExperimentConfig};
use hfalign_core::promptgen::{compose_phrase, refine, RefinerClient};
use hfalign_core::{Annotation, Dimension, IdGen, Prompt, Video, VideoSource};

use crate::align::{align_run, AlignCorpus, AlignReport};
use crate::critic::{critic_fit, examples_for, Critic, CriticDims, CriticFitConfig, CriticFitReport};
use crate::error::{PipelineError, Result};
use crate::eval::{critic_accuracy, render_table, uplift_report, AccuracyReport, TestItem, UpliftReport};
use crate::synth::synth_video;
use crate::toygen::{mle_fit, FitConfig, FitReport, GenDims, GenModel};

/// Composes and refines `cfg.data.prompts` prompts. Returns the prompts and
/// how many captions fell back to the local template.
pub fn make_prompts(cfg: &ExperimentConfig, seed: u64, client: &RefinerClient) -> Result<(Vec<Prompt>, usize)> {
    let tokenizer = cfg.categories.tokenizer();
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(cfg.data.prompts);
    for i in 0..cfg.data.prompts {
        let p = compose_phrase(&cfg.categories, &cfg.data.compose, derive_seed(seed, &format!("prompt/{i}")))?;
        let r = refine(&p, client, &tokenizer, derive_seed(seed, &format!("refine/{i}")));
        fallbacks += usize::from(r.used_fallback);
        out.push(r.prompt);
    }
    Ok((out, fallbacks))
}

pub fn gen_dims(cfg: &ExperimentConfig) -> GenDims {
    GenDims { shape: cfg.shape(), vocab_size: cfg.vocab.size, embed_dim: cfg.gen.embed_dim, hidden_dim: cfg.gen.hidden_dim }
}

/// Procedural videos in the given style, `per_prompt` for each prompt.
pub fn procedural_corpus(
    cfg: &ExperimentConfig,
    prompts: &[Prompt],
    per_prompt: usize,
    style: &hfalign_core::config::SceneStyle,
    source: VideoSource,
    seed: u64,
) -> Result<Vec<Video>> {
    let symbols = cfg.symbols()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(prompts.len() * per_prompt);
    for p in prompts {
        for _ in 0..per_prompt {
            out.push(synth_video(p, &symbols, cfg.shape(), style, source, &mut rng)?);
        }
    }
    Ok(out)
}

/// Real-data stand-in: reference-style videos.
pub fn reference_corpus(cfg: &ExperimentConfig, prompts: &[Prompt], per_prompt: usize, seed: u64) -> Result<Vec<Video>> {
    procedural_corpus(cfg, prompts, per_prompt, &cfg.gen.reference_style, VideoSource::Real, seed)
}

/// Fits the base generator to biased procedural data.
pub fn pretrain_base(cfg: &ExperimentConfig, prompts: &[Prompt], seed: u64) -> Result<(GenModel, FitReport)> {
    let data_videos = procedural_corpus(
        cfg,
        prompts,
        cfg.gen.pretrain_videos_per_prompt,
        &cfg.gen.biased_style,
        VideoSource::Synthesized,
        derive_seed(seed, "pretrain/data"),
    )?;
    let model = GenModel::init(gen_dims(cfg), cfg.categories.tokenizer(), derive_seed(seed, "pretrain/init"));
    let by_id: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let data = data_videos
        .iter()
        .map(|v| model.example(v, by_id[v.prompt_id.as_str()]))
        .collect::<Result<Vec<_>>>()?;
    let fit = FitConfig {
        epochs: cfg.gen.pretrain_epochs,
        batch_size: cfg.gen.batch_size,
        optimizer: cfg.gen.optimizer,
        seed: derive_seed(seed, "pretrain/fit"),
    };
    mle_fit(&model, &data, &fit, |_| {})
}

/// `k` samples per prompt from `gen`.
pub fn sample_corpus(gen: &GenModel, prompts: &[Prompt], k: usize, seed: u64) -> Vec<Video> {
    let mut out = Vec::with_capacity(prompts.len() * k);
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..k {
            out.push(gen.sample(p, derive_seed(seed, &format!("sample/{i}/{j}"))));
        }
    }
    out
}

pub fn critic_dims(cfg: &ExperimentConfig, large: bool) -> CriticDims {
    CriticDims {
        shape: cfg.shape(),
        vocab_size: cfg.vocab.size,
        embed_dim: cfg.critic.embed_dim,
        hidden_dim: if large { cfg.critic.large_hidden_dim } else { cfg.critic.hidden_dim },
        grounding_dim: cfg.critic.grounding_dim,
    }
}

#[derive(Debug, Clone)]
pub struct CriticTraining {
    pub critic: Critic,
    pub fit: CriticFitReport,
    /// Accuracy on the held-out videos; `None` when nothing was held out.
    pub holdout: Option<AccuracyReport>,
    pub train_videos: usize,
    pub holdout_videos: usize,
}

/// Splits video ids into (train, held out) with a seeded shuffle.
pub fn holdout_split(mut ids: Vec<String>, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = if ids.len() < 2 { 0 } else { ((ids.len() as f64 * fraction).round() as usize).min(ids.len() - 1) };
    let train = ids.split_off(n);
    (train, ids)
}

/// Trains a critic on `annotations`, holding out a share of the videos.
#[allow(clippy::too_many_arguments)]
pub fn train_critic(
    cfg: &ExperimentConfig,
    annotations: &[Annotation],
    videos: &HashMap<String, Video>,
    prompts: &HashMap<String, Prompt>,
    with_reason: bool,
    large: bool,
    holdout_fraction: f64,
    seed: u64,
) -> Result<CriticTraining> {
    let lookup = |a: &Annotation| -> Result<(&Video, &Prompt)> {
        let v = videos
            .get(&a.video_id)
            .ok_or_else(|| PipelineError::Precondition(format!("annotation `{}` names unknown video `{}`", a.id, a.video_id)))?;
        let p = prompts
            .get(&v.prompt_id)
            .ok_or_else(|| PipelineError::Precondition(format!("video `{}` names unknown prompt `{}`", v.id, v.prompt_id)))?;
        Ok((v, p))
    };
    let ids: Vec<String> = annotations.iter().map(|a| a.video_id.clone()).collect();
    let (train_ids, held_ids) = holdout_split(ids, holdout_fraction, derive_seed(seed, "critic/split"));
    let held: std::collections::HashSet<&str> = held_ids.iter().map(String::as_str).collect();

    let mut critic = Critic::init(critic_dims(cfg, large), cfg.categories.tokenizer(), with_reason, derive_seed(seed, "critic/init"));
    critic.max_answer_len = cfg.critic.max_answer_len;
    let mut items = Vec::new();
    let mut tests = Vec::new();
    for a in annotations {
        let (v, p) = lookup(a)?;
        if held.contains(a.video_id.as_str()) {
            tests.push(TestItem { video: v.clone(), prompt: p.clone(), dimension: a.dimension, label: a.label });
        } else {
            items.push((v, p.caption.as_str(), a.dimension, a.label, a.reason.as_str()));
        }
    }
    if items.is_empty() {
        return Err(PipelineError::Precondition("no annotations to train the critic on".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let pairs: Vec<(&Video, &str)> = items.iter().filter(|i| seen.insert(i.0.id.as_str())).map(|i| (i.0, i.1)).collect();
    if cfg.critic.grounding_warm_start > 0.0 {
        critic.warm_start_grounding(&pairs, cfg.critic.grounding_warm_start);
    }
    let data = examples_for(&critic, &items)?;
    let fit_cfg = CriticFitConfig {
        epochs: cfg.critic.epochs,
        batch_size: cfg.critic.batch_size,
        optimizer: cfg.critic.optimizer,
        seed: derive_seed(seed, "critic/fit"),
    };
    let (critic, fit) = critic_fit(&critic, &data, &fit_cfg, |_| {})?;
    let holdout = if tests.is_empty() { None } else { Some(critic_accuracy(&critic, &tests)?) };
    Ok(CriticTraining { critic, fit, holdout, train_videos: train_ids.len(), holdout_videos: held_ids.len() })
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub with_reason: bool,
    pub method: AlignMethod,
    pub large_critic: bool,
}

impl Variant {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self { with_reason: cfg.critic.with_reason, method: cfg.align.method, large_critic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub seed: u64,
    pub variant: Variant,
    pub prompts: usize,
    pub syn_videos: usize,
    pub real_videos: usize,
    pub base_fit_loss: Vec<f64>,
    pub critic_holdout_accuracy: f64,
    pub critic_accuracy: Option<AccuracyReport>,
    pub align: AlignReport,
    pub uplift: UpliftReport,
    pub wall_time_s: f64,
}

/// Runs the whole loop with the oracle standing in for human annotators.
pub fn closed_loop(cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<LoopReport> {
    let start = Instant::now();
    let oracle = cfg.oracle()?;
    let (prompts, _) = make_prompts(cfg, derive_seed(seed, "prompts"), &RefinerClient::fallback_only())?;
    let (base, base_fit) = pretrain_base(cfg, &prompts, derive_seed(seed, "base"))?;
    info!(seconds = start.elapsed().as_secs_f64(), "base generator fitted");
    let syn = sample_corpus(&base, &prompts, cfg.data.videos_per_prompt, derive_seed(seed, "syn"));
    let real = reference_corpus(cfg, &prompts, cfg.data.real_per_prompt, derive_seed(seed, "real"))?;

    let mut ids = IdGen::seeded(derive_seed(seed, "ids"));
    let by_prompt: HashMap<String, Prompt> = prompts.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let mut annotations = Vec::with_capacity(syn.len() * 3);
    for v in &syn {
        annotations.extend(oracle.annotate(v, &by_prompt[&v.prompt_id], &mut ids)?);
    }
    let by_video: HashMap<String, Video> = syn.iter().map(|v| (v.id.clone(), v.clone())).collect();
    let trained = train_critic(
        cfg,
        &annotations,
        &by_video,
        &by_prompt,
        variant.with_reason,
        variant.large_critic,
        cfg.critic.holdout_fraction,
        derive_seed(seed, "critic"),
    )?;
    let holdout_accuracy = trained.holdout.as_ref().map_or(0.0, |h| h.accuracy);
    info!(accuracy = holdout_accuracy, seconds = start.elapsed().as_secs_f64(), "critic trained");

    let pair = |vs: &[Video]| -> Vec<(Video, Prompt)> { vs.iter().map(|v| (v.clone(), by_prompt[&v.prompt_id].clone())).collect() };
    let (syn_pairs, real_pairs) = (pair(&syn), pair(&real));
    let corpus = AlignCorpus { syn: &syn_pairs, real: &real_pairs, eval_prompts: &prompts, eval_per_prompt: 1 };
    let align_cfg = hfalign_core::config::AlignConfig { method: variant.method, ..cfg.align.clone() };
    let (aligned, align) =
        align_run(&base, &trained.critic, &corpus, &align_cfg, &cfg.score_map, derive_seed(seed, "align"), |_| {})?;
    info!(seconds = start.elapsed().as_secs_f64(), "alignment finished");

    let uplift = uplift_report(
        &base,
        &aligned,
        &prompts,
        &oracle,
        cfg.eval.samples_per_prompt,
        &cfg.score_map,
        derive_seed(seed, "uplift"),
    )?;
    Ok(LoopReport {
        seed,
        variant,
        prompts: prompts.len(),
        syn_videos: syn.len(),
        real_videos: real.len(),
        base_fit_loss: base_fit.epoch_loss,
        critic_holdout_accuracy: holdout_accuracy,
        critic_accuracy: trained.holdout,
        align,
        uplift,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub with_reason: bool,
    pub method: AlignMethod,
    pub critic: String,
    pub seed: u64,
    pub critic_accuracy: Option<f64>,
    pub relative_uplift: Option<f64>,
    pub rs_survival_rate: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Mean uplift of RWL minus RS cells, over cells that finished.
    pub rwl_minus_rs_uplift: Option<f64>,
    /// Mean critic accuracy with reasons minus without.
    pub reason_minus_no_reason_accuracy: Option<f64>,
}

/// The full 2×2×2 grid.
pub fn full_grid() -> Vec<Variant> {
    let mut out = Vec::new();
    for with_reason in [true, false] {
        for method in [AlignMethod::Rwl, AlignMethod::Rs] {
            for large_critic in [false, true] {
                out.push(Variant { with_reason, method, large_critic });
            }
        }
    }
    out
}

/// Runs every cell with the same seed. A failing cell is recorded and the
/// suite moves on.
pub fn ablation_suite(cfg: &ExperimentConfig, grid: &[Variant], seed: u64) -> AblationTable {
    let rows: Vec<AblationRow> = grid
        .iter()
        .map(|&v| {
            let start = Instant::now();
            let res = closed_loop(cfg, seed, v);
            let mut row = AblationRow {
                with_reason: v.with_reason,
                method: v.method,
                critic: if v.large_critic { "large" } else { "small" }.into(),
                seed,
                critic_accuracy: None,
                relative_uplift: None,
                rs_survival_rate: None,
                wall_time_s: 0.0,
                error: None,
            };
            match res {
                Ok(r) => {
                    row.critic_accuracy = Some(r.critic_holdout_accuracy);
                    row.relative_uplift = Some(r.uplift.relative_uplift);
                    row.rs_survival_rate = r.align.rs_survival_rate;
                }
                Err(e) => {
                    row.rs_survival_rate = match &e {
                        PipelineError::Aborted { report, .. } => report.get("rs_survival_rate").and_then(|x| x.as_f64()),
                        PipelineError::SurvivalBelowFloor { rate, .. } => Some(*rate),
                        PipelineError::NoSurvivors { .. } => Some(0.0),
                        _ => None,
                    };
                    row.error = Some(e.to_string());
                }
            }
            row.wall_time_s = start.elapsed().as_secs_f64();
            row
        })
        .collect();
    let mean = |f: &dyn Fn(&AblationRow) -> bool, g: &dyn Fn(&AblationRow) -> Option<f64>| -> Option<f64> {
        let xs: Vec<f64> = rows.iter().filter(|r| f(r)).filter_map(g).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let rwl = mean(&|r| r.method == AlignMethod::Rwl, &|r| r.relative_uplift);
    let rs = mean(&|r| r.method == AlignMethod::Rs, &|r| r.relative_uplift);
    let with = mean(&|r| r.with_reason, &|r| r.critic_accuracy);
    let without = mean(&|r| !r.with_reason, &|r| r.critic_accuracy);
    AblationTable {
        rwl_minus_rs_uplift: rwl.zip(rs).map(|(a, b)| a - b),
        reason_minus_no_reason_accuracy: with.zip(without).map(|(a, b)| a - b),
        rows,
    }
}

impl AblationTable {
    pub fn render(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    if r.with_reason { "on" } else { "off" }.to_string(),
                    r.method.as_str().to_string(),
                    r.critic.clone(),
                    r.seed.to_string(),
                    opt(r.critic_accuracy),
                    opt(r.relative_uplift),
                    opt(r.rs_survival_rate),
                    format!("{:.1}", r.wall_time_s),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        render_table(
            &["reason", "method", "critic", "seed", "accuracy", "uplift", "rs_survival", "seconds", "error"],
            &rows,
        )
    }
}

/// Held-out items straight from annotations, for callers that keep their
/// own split.
pub fn test_items(annotations: &[Annotation], videos: &HashMap<String, Video>, prompts: &HashMap<String, Prompt>) -> Vec<TestItem> {
    annotations
        .iter()
        .filter_map(|a| {
            let v = videos.get(&a.video_id)?;
            let p = prompts.get(&v.prompt_id)?;
            Some(TestItem { video: v.clone(), prompt: p.clone(), dimension: a.dimension, label: a.label })
        })
        .collect()
}

/// All three dimensions, for callers building per-dimension tables.
pub const DIMENSIONS: [Dimension; 3] = Dimension::ALL;
