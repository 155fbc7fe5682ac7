//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Arguments filter criteria by substring.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use hfalign_core::config::{AlignConfig, AlignMethod, OptimizerConfig, ParseFailurePolicy, ReviewMode};
use hfalign_core::promptgen::RefinerClient;
use hfalign_core::store::ManualRemoval;
use hfalign_core::{
    CaptionTokenizer, Dimension, ExperimentConfig, Frames, IdGen, Label, Prompt, ScoreMap, StageTag, Store, Symbol, Video,
    VideoShape, VideoSource,
};
use hfalign_pipeline::align::{align_run, rs_keep, rs_loss, rwl_loss, score_samples, AlignCorpus};
use hfalign_pipeline::correction::{
    conservation_audit, CoarseRules, Correction, FixedClock, OracleAdjudicator, OracleCritics, OracleReviewer, Stage,
};
use hfalign_pipeline::critic::{critic_fit, Critic, CriticDims, CriticExample, CriticFitConfig, Labeler, Packed, Verdict};
use hfalign_pipeline::experiment::{
    ablation_suite, closed_loop, full_grid, make_prompts, pretrain_base, sample_corpus, Variant,
};
use hfalign_pipeline::gradcheck::check_gradient;
use hfalign_pipeline::toygen::{mle_fit, FitConfig, GenDims, GenExample, GenModel};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped_config() -> ExperimentConfig {
    ExperimentConfig::load(configs_dir().join("default.json")).expect("shipped config loads")
}

// --- random small instances ------------------------------------------------

const WORDS: [&str; 5] = ["waiter", "gerbil", "spacecraft", "nod", "owl"];

fn tokenizer() -> CaptionTokenizer {
    CaptionTokenizer::new(WORDS)
}

fn random_caption(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_prompt(rng: &mut impl Rng, i: usize) -> Prompt {
    Prompt {
        id: format!("p{i}"),
        subjects: vec!["waiter".into()],
        scene: "spacecraft".into(),
        action: "nod".into(),
        caption: random_caption(rng),
    }
}

fn random_video(rng: &mut impl Rng, shape: VideoShape, vocab: usize, id: String) -> Video {
    let cells = (0..shape.cells()).map(|_| rng.gen_range(0..vocab) as Symbol).collect();
    Video { id, prompt_id: "p".into(), source: VideoSource::Synthesized, frames: Frames::new(shape, cells).unwrap() }
}

fn random_shape(rng: &mut impl Rng) -> VideoShape {
    VideoShape::new(rng.gen_range(2..=3), rng.gen_range(1..=2), rng.gen_range(1..=2))
}

fn random_gen(rng: &mut impl Rng) -> GenModel {
    let dims = GenDims {
        shape: random_shape(rng),
        vocab_size: rng.gen_range(2..=4),
        embed_dim: rng.gen_range(2..=4),
        hidden_dim: rng.gen_range(2..=5),
    };
    let mut m = GenModel::init(dims, tokenizer(), rng.gen());
    m.params.init_uniform(0.8, rng);
    m
}

fn random_examples(m: &GenModel, rng: &mut impl Rng, n: usize) -> Vec<GenExample> {
    (0..n)
        .map(|i| {
            let v = random_video(rng, m.dims.shape, m.dims.vocab_size, format!("v{i}"));
            m.example(&v, &random_prompt(rng, i)).unwrap()
        })
        .collect()
}

fn random_critic(rng: &mut impl Rng) -> Critic {
    let dims = CriticDims {
        shape: random_shape(rng),
        vocab_size: rng.gen_range(3..=5),
        embed_dim: rng.gen_range(2..=4),
        hidden_dim: rng.gen_range(2..=5),
        grounding_dim: rng.gen_range(1..=3),
    };
    let mut c = Critic::init(dims, tokenizer(), rng.gen(), rng.gen());
    c.params.init_uniform(0.5, rng);
    c
}

fn random_critic_example(c: &Critic, rng: &mut impl Rng, i: usize) -> CriticExample {
    let v = random_video(rng, c.dims.shape, c.dims.vocab_size, format!("v{i}"));
    let d = Dimension::ALL[rng.gen_range(0..3)];
    let input = c.input(&v, &random_caption(rng), d).unwrap();
    let len = rng.gen_range(1..=5);
    let answer = (0..len).map(|_| rng.gen_range(0..c.answers.len()) as u32).collect();
    CriticExample { input, answer }
}

// --- criteria -----------------------------------------------------------------

fn masking() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut perturbations = 0;
    for i in 0..20 {
        let c = random_critic(&mut rng);
        let ex = random_critic_example(&c, &mut rng, i);
        let packed = Packed::new(&ex.input, &ex.answer);
        let base = c.packed_loss(&ex.input, &packed).map_err(|e| e.to_string())?;
        for _ in 0..25 {
            let mut p = packed.clone();
            for t in &mut p.targets[p.frames.start..p.question.end] {
                *t = rng.gen_range(0..10_000);
            }
            let l = c.packed_loss(&ex.input, &p).map_err(|e| e.to_string())?;
            ensure(l.to_bits() == base.to_bits(), || format!("instance {i}: loss moved from {base} to {l}"))?;
            perturbations += 1;
        }
        // d loss / d target row = -log p on answer rows and zero elsewhere.
        let log_p = c.answer_log_probs(&ex.input, &ex.answer);
        for (pos, row) in c.target_gradient(&ex.input, &packed).iter().enumerate() {
            if packed.answer.contains(&pos) {
                let want: Vec<f64> = log_p[pos - packed.answer.start].iter().map(|v| -v).collect();
                ensure(*row == want, || format!("instance {i}: answer row {pos} is not -log p"))?;
            } else {
                ensure(row.iter().all(|v| *v == 0.0), || format!("instance {i}: non-answer row {pos} is non-zero"))?;
            }
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(1), || format!("took {t:?}"))?;
    Ok(format!("{perturbations} M/Q target perturbations bit-identical, {t:.2?}"))
}

fn gradients() -> Outcome {
    const TOL: f64 = 1e-5;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 4];
    let mut track = |k: usize, name: &str, i: usize, e: f64| -> Result<(), String> {
        worst[k] = worst[k].max(e);
        ensure(e <= TOL, || format!("{name} instance {i}: relative error {e:e}"))
    };
    for i in 0..20 {
        // grad_log_likelihood against the plain log-likelihood.
        let m = random_gen(&mut rng);
        let v = random_video(&mut rng, m.dims.shape, m.dims.vocab_size, "v".into());
        let p = random_prompt(&mut rng, 0);
        let g = m.grad_log_likelihood(&v, &p).map_err(|e| e.to_string())?;
        let r = check_gradient(&m.params, &g, H, |ps| {
            GenModel { params: ps.clone(), ..m.clone() }.log_likelihood(&v, &p).unwrap()
        });
        track(0, "grad_log_likelihood", i, r.relative_error)?;

        // The step critic_fit takes: one full-batch SGD step with unit rate
        // moves the parameters by exactly minus its gradient.
        let c = random_critic(&mut rng);
        let data: Vec<CriticExample> = (0..3).map(|k| random_critic_example(&c, &mut rng, k)).collect();
        let cfg = CriticFitConfig { epochs: 1, batch_size: data.len(), optimizer: OptimizerConfig::sgd(1.0, 0.0), seed: 1 };
        let (after, _) = critic_fit(&c, &data, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let mut g = c.params.clone();
        g.add_scaled(-1.0, &after.params);
        let r = check_gradient(&c.params, &g, H, |ps| {
            let cc = Critic { params: ps.clone(), ..c.clone() };
            data.iter().map(|ex| cc.loss(&ex.input, &ex.answer).unwrap()).sum::<f64>() / data.len() as f64
        });
        track(1, "critic_fit", i, r.relative_error)?;

        // RWL and RS on random batches.
        let m = random_gen(&mut rng);
        let syn = random_examples(&m, &mut rng, 3);
        let real = random_examples(&m, &mut rng, 2);
        let (s, re): (Vec<&GenExample>, Vec<&GenExample>) = (syn.iter().collect(), real.iter().collect());
        let rewards: Vec<f64> = (0..3).map(|_| [0.9, 0.2, 0.05][rng.gen_range(0..3)]).collect();
        let lambda = rng.gen_range(0.0..2.0);
        let mut g = m.params.zeros_like();
        rwl_loss(&m, &s, &rewards, &re, lambda, &mut g).map_err(|e| e.to_string())?;
        let r = check_gradient(&m.params, &g, H, |ps| {
            let mm = GenModel { params: ps.clone(), ..m.clone() };
            rwl_loss(&mm, &s, &rewards, &re, lambda, &mut mm.params.zeros_like()).unwrap()
        });
        track(2, "rwl_loss", i, r.relative_error)?;

        let mut g = m.params.zeros_like();
        rs_loss(&m, &s[..2], &re, lambda, &mut g).map_err(|e| e.to_string())?;
        let r = check_gradient(&m.params, &g, H, |ps| {
            let mm = GenModel { params: ps.clone(), ..m.clone() };
            rs_loss(&mm, &s[..2], &re, lambda, &mut mm.params.zeros_like()).unwrap()
        });
        track(3, "rs_loss", i, r.relative_error)?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(30), || format!("took {t:?}"))?;
    Ok(format!(
        "20 instances each, worst relative error: grad_log_likelihood {:.1e}, critic_fit {:.1e}, rwl {:.1e}, rs {:.1e}, {t:.2?}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

/// Every sequence of length `n` over `v` symbols.
fn all_sequences(n: usize, v: usize) -> Vec<Vec<Symbol>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out.into_iter().flat_map(|s: Vec<Symbol>| (0..v as Symbol).map(move |x| [s.clone(), vec![x]].concat())).collect();
    }
    out
}

fn normalization() -> Outcome {
    let shapes = [(2, 2, 2), (1, 2, 4), (2, 1, 3), (4, 1, 2), (1, 1, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (t, h, w) = shapes[i % shapes.len()];
        let shape = VideoShape::new(t, h, w);
        let vocab = if i % 2 == 0 { 3 } else { 2 };
        let dims = GenDims { shape, vocab_size: vocab, embed_dim: 3, hidden_dim: 4 };
        let mut m = GenModel::init(dims, tokenizer(), i as u64);
        m.params.init_uniform(1.5, &mut rng);
        let p = random_prompt(&mut rng, i);
        let total: f64 = all_sequences(shape.cells(), vocab)
            .into_iter()
            .map(|cells| {
                let v = Video { id: "v".into(), prompt_id: p.id.clone(), source: VideoSource::Synthesized, frames: Frames::new(shape, cells).unwrap() };
                m.log_likelihood(&v, &p).unwrap().exp()
            })
            .sum();
        worst = worst.max((total - 1.0).abs());
        ensure((total - 1.0).abs() <= 1e-9, || format!("theta {i}: total probability {total}"))?;
    }
    Ok(format!("10 random parameter sets, max |sum - 1| = {worst:.1e}"))
}

/// Gives each video the label triple registered for its id, all Good for
/// any other video.
struct Scripted(HashMap<String, [Label; 3]>);

impl Labeler for Scripted {
    fn label_video(&self, video: &Video, _: &Prompt) -> hfalign_pipeline::Result<[hfalign_pipeline::Result<Verdict>; 3]> {
        let labels = self.0.get(&video.id).copied().unwrap_or([Label::Good; 3]);
        Ok(labels.map(|label| Ok(Verdict { label, reason: String::new() })))
    }
}

fn equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let m = random_gen(&mut rng);
        let syn = random_examples(&m, &mut rng, 6);
        let real = random_examples(&m, &mut rng, 2);
        let keep: Vec<bool> = (0..6).map(|k| k == 0 || rng.gen_bool(0.5)).collect();
        let filtered: Vec<&GenExample> = syn.iter().zip(&keep).filter(|(_, k)| **k).map(|(e, _)| e).collect();
        let all: Vec<&GenExample> = syn.iter().collect();
        let re: Vec<&GenExample> = real.iter().collect();
        let lambda = rng.gen_range(0.0..2.0);

        // Same batch: RS is RWL with unit rewards, to the bit.
        let (mut g_rs, mut g_rwl) = (m.params.zeros_like(), m.params.zeros_like());
        let a = rs_loss(&m, &filtered, &re, lambda, &mut g_rs).map_err(|e| e.to_string())?;
        let b = rwl_loss(&m, &filtered, &vec![1.0; filtered.len()], &re, lambda, &mut g_rwl).map_err(|e| e.to_string())?;
        ensure(a.to_bits() == b.to_bits() && g_rs == g_rwl, || format!("instance {i}: rs {a} vs rwl {b}"))?;

        // Unfiltered batch with 0/1 rewards: the same objective up to the
        // batch-size normalization n / kept.
        let indicator: Vec<f64> = keep.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect();
        let mut g_ind = m.params.zeros_like();
        let c = rwl_loss(&m, &all, &indicator, &[], 0.0, &mut g_ind).map_err(|e| e.to_string())?;
        let mut g_f = m.params.zeros_like();
        let d = rs_loss(&m, &filtered, &[], 0.0, &mut g_f).map_err(|e| e.to_string())?;
        let scale = all.len() as f64 / filtered.len() as f64;
        let rel = ((c * scale - d) / d).abs();
        g_ind.scale(scale);
        let gdiff = g_ind.flat().iter().zip(g_f.flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / g_f.norm().max(1e-300);
        worst = worst.max(rel).max(gdiff);
        ensure(rel < 1e-12 && gdiff < 1e-12, || format!("instance {i}: indicator rwl differs by {rel:e} / {gdiff:e}"))?;
    }

    // RWL with r = 1 and lambda = 0 against mle_fit, step by step.
    let mut steps = 0;
    for seed in 0..5u64 {
        let m = random_gen(&mut rng);
        let pairs: Vec<(Video, Prompt)> = (0..7)
            .map(|i| (random_video(&mut rng, m.dims.shape, m.dims.vocab_size, format!("v{i}")), random_prompt(&mut rng, i)))
            .collect();
        let labeler = Scripted(pairs.iter().map(|(v, _)| (v.id.clone(), [Label::Good; 3])).collect());
        let map = ScoreMap { good: 1.0, normal: 0.5, bad: 0.0 };
        let cfg = AlignConfig {
            method: AlignMethod::Rwl,
            lambda: 0.0,
            epochs: 3,
            batch_size: 3,
            real_batch_size: 2,
            optimizer: OptimizerConfig::adam(0.05),
            rs_survival_floor: 0.0,
            parse_failure: ParseFailurePolicy::Error,
            rescore_each_epoch: false,
        };
        let prompts: Vec<Prompt> = pairs.iter().map(|(_, p)| p.clone()).collect();
        let corpus = AlignCorpus { syn: &pairs, real: &[], eval_prompts: &prompts[..1], eval_per_prompt: 1 };
        let mut a_steps = Vec::new();
        let (aligned, _) = align_run(&m, &labeler, &corpus, &cfg, &map, seed, |s| a_steps.push(s.params.clone()))
            .map_err(|e| e.to_string())?;
        let data: Vec<GenExample> = pairs.iter().map(|(v, p)| m.example(v, p).unwrap()).collect();
        let fit = FitConfig { epochs: 3, batch_size: 3, optimizer: OptimizerConfig::adam(0.05), seed };
        let mut f_steps = Vec::new();
        let (fitted, _) = mle_fit(&m, &data, &fit, |s| f_steps.push(s.params.clone())).map_err(|e| e.to_string())?;
        ensure(!a_steps.is_empty() && a_steps == f_steps, || format!("seed {seed}: trajectories differ"))?;
        ensure(aligned.params == fitted.params, || format!("seed {seed}: final checkpoints differ"))?;
        steps += a_steps.len();
    }
    Ok(format!(
        "rs = rwl(1) bit-identical on 20 batches; indicator rwl within {worst:.1e}; {steps} RWL steps identical to mle_fit over 5 seeds"
    ))
}

fn score_arithmetic() -> Outcome {
    let shipped = shipped_config();
    let expected_map = ScoreMap { good: 0.9, normal: 0.2, bad: 0.05 };
    for (name, cfg) in [("configs/default.json", &shipped), ("built-in default", &ExperimentConfig::default())] {
        ensure(cfg.score_map == expected_map, || format!("{name}: score map is {:?}", cfg.score_map))?;
        ensure(cfg.align.lambda == 1.0, || format!("{name}: lambda is {}", cfg.align.lambda))?;
    }
    let got = shipped.score_map.reward(&[Label::Good, Label::Normal, Label::Bad]);
    let want = 23.0 / 60.0;
    ensure((got - want).abs() <= 1e-12, || format!("reward {got}, expected {want}"))?;
    Ok(format!("reward(Good, Normal, Bad) = {got:.15}, |err| = {:.1e}; map and lambda = 1 shipped", (got - want).abs()))
}

fn rs_filter() -> Outcome {
    let labels = [Label::Good, Label::Normal, Label::Bad];
    let mut triples = Vec::new();
    for a in labels {
        for b in labels {
            for c in labels {
                triples.push([a, b, c]);
            }
        }
    }
    ensure(triples.len() == 27, || "enumeration".into())?;
    let direct: Vec<[Label; 3]> = triples.iter().copied().filter(rs_keep).collect();
    // The path alignment uses: labeler verdicts scored into keep/drop.
    let samples: Vec<(Video, Prompt)> = triples
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            (random_video(&mut rng, VideoShape::new(2, 1, 1), 3, format!("t{i}")), random_prompt(&mut rng, i))
        })
        .collect();
    let labeler = Scripted(samples.iter().zip(&triples).map(|((v, _), t)| (v.id.clone(), *t)).collect());
    let scored = score_samples(&labeler, &samples, &ScoreMap::DEFAULT, ParseFailurePolicy::Error).map_err(|e| e.to_string())?;
    let via_scoring: Vec<[Label; 3]> = scored.iter().zip(&triples).filter(|(s, _)| s.keep()).map(|(_, t)| *t).collect();
    let only = vec![[Label::Good; 3]];
    ensure(direct == only, || format!("rs_keep kept {direct:?}"))?;
    ensure(via_scoring == only, || format!("scoring kept {via_scoring:?}"))?;
    Ok("27 triples, only (Good, Good, Good) survives".into())
}

fn closed_loop_uplift() -> Outcome {
    let cfg = shipped_config();
    let d = &cfg.dims;
    ensure(
        (d.frames, d.height, d.width, cfg.vocab.size, cfg.data.prompts, cfg.data.videos_per_prompt, cfg.align.epochs)
            == (8, 4, 4, 16, 200, 5, 30)
            && cfg.align.method == AlignMethod::Rwl,
        || "shipped config is not the reference setting".into(),
    )?;
    let start = Instant::now();
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let r = closed_loop(&cfg, seed, Variant::from_config(&cfg)).map_err(|e| format!("seed {seed}: {e}"))?;
        let ok = r.critic_holdout_accuracy >= 0.90 && r.uplift.relative_uplift >= 0.15;
        passing += usize::from(ok);
        lines.push(format!(
            "seed {seed}: critic {:.3}, reward {:.3} -> {:.3} ({:+.1}%)",
            r.critic_holdout_accuracy,
            r.uplift.reward_before,
            r.uplift.reward_after,
            100.0 * r.uplift.relative_uplift
        ));
        println!("    {}", lines.last().unwrap());
    }
    let t = start.elapsed();
    let summary = format!("{passing}/5 seeds with critic >= 0.90 and uplift >= 15%, {:.0}s", t.as_secs_f64());
    ensure(passing >= 4 && t < Duration::from_secs(600), || summary.clone())?;
    Ok(summary)
}

fn correction_fixed_point() -> Outcome {
    let mut cfg = shipped_config();
    cfg.data.prompts = 40;
    let oracle = cfg.oracle().map_err(|e| e.to_string())?;
    let (prompts, _) = make_prompts(&cfg, 61, &RefinerClient::fallback_only()).map_err(|e| e.to_string())?;
    let (base, _) = pretrain_base(&cfg, &prompts, 62).map_err(|e| e.to_string())?;
    let videos = sample_corpus(&base, &prompts, cfg.data.videos_per_prompt, 63);
    let store = Store::in_memory();
    store.insert_prompts(prompts.clone()).map_err(|e| e.to_string())?;
    store.insert_videos(videos.clone()).map_err(|e| e.to_string())?;
    let by_prompt: HashMap<&str, &Prompt> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut ids = IdGen::seeded(64);
    let mut truth = HashMap::new();
    for v in &videos {
        for a in oracle.annotate(v, by_prompt[v.prompt_id.as_str()], &mut ids).map_err(|e| e.to_string())? {
            truth.insert((a.video_id.clone(), a.dimension), a.label);
            store.put_annotation(a).map_err(|e| e.to_string())?;
        }
    }
    let originals = store.annotations();
    // Rule-clean items pulled by hand, plus malformed duplicates that the
    // rules catch.
    for a in originals.iter().step_by(9) {
        store
            .request_removal(ManualRemoval { annotation_id: a.id.clone(), note: "second look".into(), actor: "lead".into() })
            .map_err(|e| e.to_string())?;
    }
    for (k, a) in originals.iter().skip(4).step_by(23).enumerate() {
        let mut dup = a.clone();
        dup.id = format!("dup-{k}");
        dup.reason = ["", "ok", "looks right to me overall"][k % 3].into();
        store.put_annotation(dup).map_err(|e| e.to_string())?;
    }
    let rules = CoarseRules { min_reason_chars: cfg.correction.min_reason_chars };
    let clean_removed: Vec<String> = {
        let t = store.read();
        t.removals.keys().filter(|id| rules.check(&t.annotations[*id], true).is_none()).cloned().collect()
    };

    let clock = FixedClock("2026-01-01T00:00:00Z".into());
    let c = Correction::new(&store, cfg.correction.clone(), &clock, 65);
    let rev = OracleReviewer { oracle: oracle.clone(), mode: ReviewMode::Check };
    let state = c.run_all(&OracleCritics(oracle.clone()), &OracleAdjudicator(oracle), &rev).map_err(|e| e.to_string())?;
    ensure(state.stage == Stage::Done, || format!("stopped at {:?}", state.stage))?;

    let after: HashMap<String, _> = store.annotations().into_iter().map(|a| (a.id.clone(), a)).collect();
    let changed = originals.iter().filter(|a| after[&a.id].label != a.label).count();
    ensure(changed == 0, || format!("{changed} labels changed"))?;
    let mut active = HashSet::new();
    for a in after.values().filter(|a| a.stage_tag != StageTag::Removed) {
        ensure(active.insert((a.video_id.clone(), a.dimension)), || format!("two active annotations for {}", a.video_id))?;
        ensure(truth[&(a.video_id.clone(), a.dimension)] == a.label, || format!("{} carries a wrong label", a.id))?;
    }
    ensure(active.len() == truth.len(), || format!("{} of {} (video, dimension) pairs active", active.len(), truth.len()))?;
    let reintegrated = clean_removed.iter().filter(|id| after[*id].stage_tag == StageTag::Reintegrated).count();
    ensure(!clean_removed.is_empty() && reintegrated == clean_removed.len(), || {
        format!("{reintegrated} of {} rule-clean removals reintegrated", clean_removed.len())
    })?;
    let audit = conservation_audit(&store);
    ensure(audit.ok, || format!("audit failed: {audit:?}"))?;
    ensure(store.read().adjudications.is_empty(), || "oracle critic raised adjudications".into())?;
    Ok(format!(
        "{} annotations unchanged, {reintegrated}/{} rule-clean removals reintegrated, audit ok ({} raw, {} active)",
        originals.len(),
        clean_removed.len(),
        audit.raw,
        audit.active
    ))
}

fn ablation() -> Outcome {
    let mut cfg = shipped_config();
    // The biased base generator rarely draws a clip that is Good in all three
    // dimensions, so RS cells sit under the default 1% floor and abort.
    // Lowering the floor lets them train on the few survivors.
    cfg.align.rs_survival_floor = 0.002;
    let seed = 17;
    let grid = full_grid();
    let table = ablation_suite(&cfg, &grid, seed);
    for line in table.render().lines() {
        println!("    {line}");
    }
    ensure(table.rows.len() == 8, || format!("{} rows", table.rows.len()))?;
    ensure(table.rows.iter().all(|r| r.seed == seed), || "seed not recorded on every row".into())?;
    let cells: HashSet<String> = table.rows.iter().map(|r| format!("{}/{:?}/{}", r.with_reason, r.method, r.critic)).collect();
    ensure(cells.len() == 8, || "grid cells are not distinct".into())?;
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    ensure(failed == 0, || format!("{failed} cells failed"))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.3}"));
    Ok(format!(
        "8 rows, seed {seed}; RWL - RS uplift {}, reason - no reason accuracy {}",
        fmt(table.rwl_minus_rs_uplift),
        fmt(table.reason_minus_no_reason_accuracy)
    ))
}

fn cli_end_to_end() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let config = configs_dir().join("default.json");
    let steps: [&[&str]; 7] = [
        &["gen-prompts"],
        &["gen-videos"],
        &["annotate", "--by", "oracle"],
        &["correct", "--stage", "all"],
        &["train-critic"],
        &["align", "--method", "rwl", "--lambda", "1"],
        &["eval"],
    ];
    let start = Instant::now();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_hfalign"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .arg("--workdir")
            .arg(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run_report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    for key in ["gen_prompts", "gen_videos", "annotate", "correct", "train_critic", "align", "eval"] {
        ensure(report.get(key).is_some_and(|v| !v.is_null()), || format!("run report lacks `{key}`"))?;
    }
    ensure(report["correct"]["audit"]["ok"] == true, || "conservation audit in the report failed".into())?;
    Ok(format!(
        "7 commands exit 0, report complete, oracle uplift {:+.1}%, {:.0}s",
        100.0 * report["eval"]["uplift"]["relative_uplift"].as_f64().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("answer masking", masking),
        ("gradient correctness", gradients),
        ("normalization", normalization),
        ("equivalences", equivalences),
        ("score arithmetic", score_arithmetic),
        ("rs filter brute force", rs_filter),
        ("closed-loop uplift", closed_loop_uplift),
        ("correction fixed point", correction_fixed_point),
        ("ablation suite", ablation),
        ("cli end-to-end", cli_end_to_end),
    ];
    // Panic messages are reported on the FAIL line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
