//! Reward-weighted learning (RWL) and rejection-sampling (RS) fine-tuning.
//!
//! ```text
//! RWL:  mean_syn[ r · NLL ] + λ · mean_real[ NLL ]
//! RS:   mean_kept[ NLL ]    + λ · mean_real[ NLL ]     kept = Good in all three dimensions
//! ```
//!
//! Rewards come from a frozen labeler and are computed once before training.
//! Every optimizer step pairs one synthesized batch with one real batch; the
//! real batches cycle through their own shuffled order so the synthesized
//! visiting order is exactly the one `mle_fit` would use for the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use hfalign_core::config::{derive_seed, AlignConfig, AlignMethod, ParseFailurePolicy};
use hfalign_core::{Label, Prompt, ScoreMap, Video};

use crate::critic::Labeler;
use crate::error::{PipelineError, Result};
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::toygen::{epoch_order, weighted_batch, GenExample, GenModel, StepInfo};

/// Pure RWL arithmetic over precomputed NLLs.
pub fn rwl_value(syn_nll: &[f64], rewards: &[f64], real_nll: &[f64], lambda: f64) -> Result<f64> {
    check_batches(syn_nll.len(), real_nll.len(), lambda)?;
    if syn_nll.len() != rewards.len() {
        return Err(PipelineError::Precondition(format!("{} rewards for {} samples", rewards.len(), syn_nll.len())));
    }
    let syn = syn_nll.iter().zip(rewards).map(|(n, r)| r * n).sum::<f64>() / syn_nll.len() as f64;
    Ok(syn + real_term(real_nll, lambda))
}

/// Pure RS arithmetic: `filtered_nll` holds only the surviving samples.
pub fn rs_value(filtered_nll: &[f64], real_nll: &[f64], lambda: f64) -> Result<f64> {
    if filtered_nll.is_empty() {
        return Err(PipelineError::NoSurvivors { total: 0 });
    }
    check_batches(filtered_nll.len(), real_nll.len(), lambda)?;
    Ok(filtered_nll.iter().sum::<f64>() / filtered_nll.len() as f64 + real_term(real_nll, lambda))
}

fn real_term(real_nll: &[f64], lambda: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else {
        lambda * real_nll.iter().sum::<f64>() / real_nll.len() as f64
    }
}

fn check_batches(syn: usize, real: usize, lambda: f64) -> Result<()> {
    if syn == 0 {
        return Err(PipelineError::Precondition("synthesized batch is empty".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(PipelineError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda > 0.0 && real == 0 {
        return Err(PipelineError::Config(format!("lambda = {lambda} needs a non-empty real batch")));
    }
    Ok(())
}

/// RWL loss on one pair of batches; the gradient is added into `grad`.
pub fn rwl_loss(
    model: &GenModel,
    syn: &[&GenExample],
    rewards: &[f64],
    real: &[&GenExample],
    lambda: f64,
    grad: &mut ParamSet,
) -> Result<f64> {
    check_batches(syn.len(), real.len(), lambda)?;
    if syn.len() != rewards.len() {
        return Err(PipelineError::Precondition(format!("{} rewards for {} samples", rewards.len(), syn.len())));
    }
    let mut loss = weighted_batch(model, syn, rewards, grad);
    if lambda > 0.0 {
        loss += weighted_batch(model, real, &vec![lambda; real.len()], grad);
    }
    Ok(loss)
}

/// RS loss on a batch of surviving samples; the gradient is added into `grad`.
pub fn rs_loss(model: &GenModel, filtered: &[&GenExample], real: &[&GenExample], lambda: f64, grad: &mut ParamSet) -> Result<f64> {
    if filtered.is_empty() {
        return Err(PipelineError::NoSurvivors { total: 0 });
    }
    rwl_loss(model, filtered, &vec![1.0; filtered.len()], real, lambda, grad)
}

/// True when every dimension is Good.
pub fn rs_keep(labels: &[Label; 3]) -> bool {
    labels.iter().all(|l| *l == Label::Good)
}

/// Critic verdicts for one synthesized sample. `labels` is `None` when a
/// dimension could not be parsed and the policy dropped the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub labels: Option<[Label; 3]>,
    pub reward: Option<f64>,
}

impl Scored {
    pub fn keep(&self) -> bool {
        self.labels.as_ref().is_some_and(rs_keep)
    }
}

/// Labels `(video, prompt)` pairs with a frozen labeler, in parallel.
pub fn score_samples(
    labeler: &dyn Labeler,
    samples: &[(Video, Prompt)],
    map: &ScoreMap,
    policy: ParseFailurePolicy,
) -> Result<Vec<Scored>> {
    parallel_map(samples, |(video, prompt)| {
        let mut labels = [Label::Bad; 3];
        for (i, v) in labeler.label_video(video, prompt)?.into_iter().enumerate() {
            match (v, policy) {
                (Ok(v), _) => labels[i] = v.label,
                (Err(e), ParseFailurePolicy::Error) => return Err(e),
                (Err(e), ParseFailurePolicy::TreatAsBad) => warn!(video = %video.id, "{e}; scoring as Bad"),
                (Err(e), ParseFailurePolicy::Drop) => {
                    warn!(video = %video.id, "{e}; dropping the sample");
                    return Ok(Scored { labels: None, reward: None });
                }
            }
        }
        Ok(Scored { labels: Some(labels), reward: Some(map.reward(&labels)) })
    })
}

/// Order-preserving map over scoped worker threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean reward of fresh samples: `per_prompt` samples per prompt, drawn with
/// seeds that depend only on `seed` so two models see the same noise.
pub fn fresh_mean_reward(
    gen: &GenModel,
    labeler: &dyn Labeler,
    prompts: &[Prompt],
    per_prompt: usize,
    map: &ScoreMap,
    seed: u64,
) -> Result<f64> {
    let samples = fresh_samples(gen, prompts, per_prompt, seed);
    if samples.is_empty() {
        return Ok(0.0);
    }
    let scored = score_samples(labeler, &samples, map, ParseFailurePolicy::TreatAsBad)?;
    Ok(scored.iter().filter_map(|s| s.reward).sum::<f64>() / scored.len() as f64)
}

pub fn fresh_samples(gen: &GenModel, prompts: &[Prompt], per_prompt: usize, seed: u64) -> Vec<(Video, Prompt)> {
    let mut out = Vec::with_capacity(prompts.len() * per_prompt);
    for (i, p) in prompts.iter().enumerate() {
        for k in 0..per_prompt {
            let s = derive_seed(seed, &format!("fresh/{i}/{k}"));
            out.push((gen.sample(p, s), p.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub method: AlignMethod,
    pub lambda: f64,
    pub epochs: Vec<usize>,
    /// Mean per-step loss of each epoch.
    pub loss: Vec<f64>,
    pub mean_reward_before: f64,
    pub mean_reward_after: f64,
    /// Fraction of synthesized samples kept by the filter (RS only).
    pub rs_survival_rate: Option<f64>,
    pub seed: u64,
    pub syn_samples: usize,
    pub real_samples: usize,
    pub steps: usize,
}

/// Training data for one run.
pub struct AlignCorpus<'a> {
    pub syn: &'a [(Video, Prompt)],
    pub real: &'a [(Video, Prompt)],
    /// Prompts used for the before/after fresh-sample reward.
    pub eval_prompts: &'a [Prompt],
    pub eval_per_prompt: usize,
}

fn examples(gen: &GenModel, pairs: &[(Video, Prompt)]) -> Result<Vec<GenExample>> {
    pairs.iter().map(|(v, p)| gen.example(v, p)).collect()
}

/// Fine-tunes `gen` with the configured loss.
///
/// Errors after training started are wrapped in [`PipelineError::Aborted`]
/// carrying the partial report.
pub fn align_run(
    gen: &GenModel,
    labeler: &dyn Labeler,
    corpus: &AlignCorpus<'_>,
    cfg: &AlignConfig,
    map: &ScoreMap,
    seed: u64,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<(GenModel, AlignReport)> {
    cfg.validate()?;
    map.validate()?;
    if corpus.syn.is_empty() {
        return Err(PipelineError::Precondition("no synthesized samples to align on".into()));
    }
    if cfg.lambda > 0.0 && corpus.real.is_empty() {
        return Err(PipelineError::Config(format!("lambda = {} needs real samples", cfg.lambda)));
    }
    let eval_seed = derive_seed(seed, "align/eval");
    let before = fresh_mean_reward(gen, labeler, corpus.eval_prompts, corpus.eval_per_prompt, map, eval_seed)?;
    let mut report = AlignReport {
        method: cfg.method,
        lambda: cfg.lambda,
        epochs: Vec::new(),
        loss: Vec::new(),
        mean_reward_before: before,
        mean_reward_after: before,
        rs_survival_rate: None,
        seed,
        syn_samples: corpus.syn.len(),
        real_samples: corpus.real.len(),
        steps: 0,
    };

    let mut syn_pairs: Vec<(Video, Prompt)> = corpus.syn.to_vec();
    let real = examples(gen, corpus.real)?;
    let (mut syn, mut weights) = prepare(gen, labeler, &syn_pairs, cfg, map, &mut report)?;

    let mut m = gen.clone();
    let mut opt = Optimizer::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "align/real"));
    let mut real_order: Vec<usize> = Vec::new();
    let mut real_pos = 0;
    let abort = |e: PipelineError, r: &AlignReport| PipelineError::Aborted {
        source: Box::new(e),
        report: serde_json::to_value(r).unwrap_or_default(),
    };

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.rescore_each_epoch {
            // On-policy variant: resample the synthesized corpus from the
            // current model and score it again.
            let prompts: Vec<Prompt> = syn_pairs.iter().map(|(_, p)| p.clone()).collect();
            syn_pairs = prompts
                .into_iter()
                .enumerate()
                .map(|(i, p)| (m.sample(&p, derive_seed(seed, &format!("rescore/{epoch}/{i}"))), p))
                .collect();
            (syn, weights) = prepare(&m, labeler, &syn_pairs, cfg, map, &mut report).map_err(|e| abort(e, &report))?;
        }
        let order = epoch_order(syn.len(), &mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GenExample> = chunk.iter().map(|&i| &syn[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let mut real_batch: Vec<&GenExample> = Vec::new();
            if cfg.lambda > 0.0 {
                for _ in 0..cfg.real_batch_size.max(1) {
                    if real_pos == real_order.len() {
                        real_order = epoch_order(real.len(), &mut real_rng);
                        real_pos = 0;
                    }
                    real_batch.push(&real[real_order[real_pos]]);
                    real_pos += 1;
                }
            }
            let mut g = m.params.zeros_like();
            let loss = rwl_loss(&m, &batch, &w, &real_batch, cfg.lambda, &mut g).map_err(|e| abort(e, &report))?;
            if !loss.is_finite() {
                return Err(abort(PipelineError::Divergence { step: report.steps, loss }, &report));
            }
            g.check_finite(&format!("gradient at step {}", report.steps)).map_err(|e| abort(e, &report))?;
            opt.step(&mut m.params, &mut g);
            m.params
                .check_finite(&format!("parameters after step {}", report.steps))
                .map_err(|e| abort(e, &report))?;
            observer(&StepInfo { step: report.steps, epoch, loss, params: &m.params });
            sum += loss;
            steps += 1;
            report.steps += 1;
        }
        report.epochs.push(epoch);
        report.loss.push(if steps == 0 { 0.0 } else { sum / steps as f64 });
        info!(epoch, loss = report.loss[epoch], "align epoch");
    }
    if cfg.epochs > 0 {
        report.mean_reward_after = fresh_mean_reward(&m, labeler, corpus.eval_prompts, corpus.eval_per_prompt, map, eval_seed)
            .map_err(|e| abort(e, &report))?;
    }
    Ok((m, report))
}

/// Scores the corpus and returns the examples with their weights: rewards
/// for RWL, or the surviving samples with weight 1 for RS.
fn prepare(
    gen: &GenModel,
    labeler: &dyn Labeler,
    pairs: &[(Video, Prompt)],
    cfg: &AlignConfig,
    map: &ScoreMap,
    report: &mut AlignReport,
) -> Result<(Vec<GenExample>, Vec<f64>)> {
    let scored = score_samples(labeler, pairs, map, cfg.parse_failure)?;
    let mut syn = Vec::new();
    let mut weights = Vec::new();
    match cfg.method {
        AlignMethod::Rwl => {
            for ((v, p), s) in pairs.iter().zip(&scored) {
                if let Some(r) = s.reward {
                    syn.push(gen.example(v, p)?);
                    weights.push(r);
                }
            }
            if syn.is_empty() {
                return Err(PipelineError::Precondition("every synthesized sample was dropped while scoring".into()));
            }
        }
        AlignMethod::Rs => {
            for ((v, p), s) in pairs.iter().zip(&scored) {
                if s.keep() {
                    syn.push(gen.example(v, p)?);
                    weights.push(1.0);
                }
            }
            let total = pairs.len();
            let rate = syn.len() as f64 / total as f64;
            report.rs_survival_rate = Some(rate);
            if syn.is_empty() {
                return Err(PipelineError::NoSurvivors { total });
            }
            if rate < cfg.rs_survival_floor {
                return Err(PipelineError::SurvivalBelowFloor { kept: syn.len(), total, rate, floor: cfg.rs_survival_floor });
            }
        }
    }
    Ok((syn, weights))
}
