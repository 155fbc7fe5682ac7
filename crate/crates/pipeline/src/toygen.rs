//! Conditional autoregressive categorical video model.
//!
//! Cells are generated in raster order (frame, row, column). The logits for
//! cell `n` are
//!
//! ```text
//! u = [E[x_{n-1}]; E[x_{n-HW}]; c]        (row V of E stands in for "none")
//! h = tanh(W_mix u + b_mix)
//! z = W_out h + b_out
//! ```
//!
//! where `c` is the mean caption-token embedding. Only earlier cells enter
//! `u`, so `log p(x|z) = Σ_n log softmax(z_n)[x_n]` is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hfalign_core::config::OptimizerConfig;
use hfalign_core::{CaptionTokenizer, Frames, Prompt, Symbol, Video, VideoShape, VideoSource};

use crate::error::{PipelineError, Result};
use crate::optim::Optimizer;
use crate::params::{axpy, log_sum_exp, ParamSet, Tensor};

const TOKEN: usize = 0;
const CAPTION: usize = 1;
const MIX_W: usize = 2;
const MIX_B: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenDims {
    pub shape: VideoShape,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenModel {
    pub dims: GenDims,
    pub tokenizer: CaptionTokenizer,
    pub params: ParamSet,
}

/// A training pair with the caption already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExample {
    pub cells: Vec<Symbol>,
    pub caption: Vec<u32>,
}

/// Reusable per-call buffers.
struct Scratch {
    u: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    dz: Vec<f64>,
    dh: Vec<f64>,
    du: Vec<f64>,
    dc: Vec<f64>,
}

impl GenModel {
    /// All-zero parameters: the uniform predictive distribution.
    pub fn zeros(dims: GenDims, tokenizer: CaptionTokenizer) -> Self {
        let (v, d, dh) = (dims.vocab_size, dims.embed_dim, dims.hidden_dim);
        let params = ParamSet::new(vec![
            Tensor::zeros("token_embedding", v + 1, d),
            Tensor::zeros("caption_embedding", tokenizer.len(), d),
            Tensor::zeros("mix_weight", dh, 3 * d),
            Tensor::zeros("mix_bias", dh, 1),
            Tensor::zeros("out_weight", v, dh),
            Tensor::zeros("out_bias", v, 1),
        ]);
        Self { dims, tokenizer, params }
    }

    /// Fan-in scaled weights and zero biases from a seeded generator.
    pub fn init(dims: GenDims, tokenizer: CaptionTokenizer, seed: u64) -> Self {
        let mut m = Self::zeros(dims, tokenizer);
        m.params.init_fan_in(&mut ChaCha8Rng::seed_from_u64(seed));
        m
    }

    pub fn example(&self, video: &Video, prompt: &Prompt) -> Result<GenExample> {
        self.check_shape(video)?;
        Ok(GenExample { cells: video.frames.cells().to_vec(), caption: self.caption_ids(prompt) })
    }

    pub fn caption_ids(&self, prompt: &Prompt) -> Vec<u32> {
        self.tokenizer.encode_lossy(&prompt.caption)
    }

    fn check_shape(&self, video: &Video) -> Result<()> {
        if video.shape() != self.dims.shape {
            return Err(PipelineError::Shape(format!(
                "video `{}` is {:?}, model expects {:?}",
                video.id,
                video.shape(),
                self.dims.shape
            )));
        }
        if let Some(max) = video.frames.max_symbol() {
            if usize::from(max) >= self.dims.vocab_size {
                return Err(PipelineError::Shape(format!(
                    "video `{}` holds symbol {max}, model vocabulary has {}",
                    video.id, self.dims.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn scratch(&self) -> Scratch {
        let (v, d, dh) = (self.dims.vocab_size, self.dims.embed_dim, self.dims.hidden_dim);
        Scratch {
            u: vec![0.0; 3 * d],
            h: vec![0.0; dh],
            z: vec![0.0; v],
            dz: vec![0.0; v],
            dh: vec![0.0; dh],
            du: vec![0.0; 3 * d],
            dc: vec![0.0; d],
        }
    }

    /// Mean caption embedding (zero for an empty caption).
    fn caption_context(&self, caption: &[u32]) -> Vec<f64> {
        let d = self.dims.embed_dim;
        let mut c = vec![0.0; d];
        if caption.is_empty() {
            return c;
        }
        let emb = self.params.get(CAPTION);
        for &t in caption {
            axpy(1.0, emb.row(t as usize), &mut c);
        }
        let inv = 1.0 / caption.len() as f64;
        c.iter_mut().for_each(|x| *x *= inv);
        c
    }

    /// Fills `s.u`, `s.h` and `s.z` for one position.
    fn forward_step(&self, prev: usize, above: usize, c: &[f64], s: &mut Scratch) {
        let d = self.dims.embed_dim;
        let p = &self.params;
        s.u[..d].copy_from_slice(p.get(TOKEN).row(prev));
        s.u[d..2 * d].copy_from_slice(p.get(TOKEN).row(above));
        s.u[2 * d..].copy_from_slice(c);
        s.h.copy_from_slice(&p.get(MIX_B).data);
        p.get(MIX_W).matvec_add(&s.u, &mut s.h);
        s.h.iter_mut().for_each(|x| *x = x.tanh());
        s.z.copy_from_slice(&p.get(OUT_B).data);
        p.get(OUT_W).matvec_add(&s.h, &mut s.z);
    }

    fn context_of(&self, cells: &[Symbol], n: usize) -> (usize, usize) {
        let none = self.dims.vocab_size;
        let hw = self.dims.shape.frame_cells();
        let prev = if n == 0 { none } else { usize::from(cells[n - 1]) };
        let above = if n >= hw { usize::from(cells[n - hw]) } else { none };
        (prev, above)
    }

    /// Negative log-likelihood of one example; when `grad` is given,
    /// `weight · ∇NLL` is added into it.
    pub fn nll_accumulate(&self, ex: &GenExample, grad: Option<(&mut ParamSet, f64)>) -> f64 {
        let mut s = self.scratch();
        let c = self.caption_context(&ex.caption);
        let d = self.dims.embed_dim;
        let mut nll = 0.0;
        let mut grad = grad;
        s.dc.iter_mut().for_each(|x| *x = 0.0);
        for n in 0..ex.cells.len() {
            let (prev, above) = self.context_of(&ex.cells, n);
            let x = usize::from(ex.cells[n]);
            self.forward_step(prev, above, &c, &mut s);
            let lse = log_sum_exp(&s.z);
            nll += lse - s.z[x];
            let Some((g, w)) = grad.as_mut() else { continue };
            let w = *w;
            for (dzi, zi) in s.dz.iter_mut().zip(&s.z) {
                *dzi = w * (zi - lse).exp();
            }
            s.dz[x] -= w;
            g.get_mut(OUT_W).outer_add(1.0, &s.dz, &s.h);
            axpy(1.0, &s.dz, &mut g.get_mut(OUT_B).data);
            s.dh.iter_mut().for_each(|v| *v = 0.0);
            self.params.get(OUT_W).matvec_t_add(&s.dz, &mut s.dh);
            for (dhi, hi) in s.dh.iter_mut().zip(&s.h) {
                *dhi *= 1.0 - hi * hi;
            }
            g.get_mut(MIX_W).outer_add(1.0, &s.dh, &s.u);
            axpy(1.0, &s.dh, &mut g.get_mut(MIX_B).data);
            s.du.iter_mut().for_each(|v| *v = 0.0);
            self.params.get(MIX_W).matvec_t_add(&s.dh, &mut s.du);
            let tok = g.get_mut(TOKEN);
            axpy(1.0, &s.du[..d], tok.row_mut(prev));
            axpy(1.0, &s.du[d..2 * d], tok.row_mut(above));
            axpy(1.0, &s.du[2 * d..], &mut s.dc);
        }
        if let Some((g, _)) = grad {
            if !ex.caption.is_empty() {
                let inv = 1.0 / ex.caption.len() as f64;
                let cap = g.get_mut(CAPTION);
                for &t in &ex.caption {
                    axpy(inv, &s.dc, cap.row_mut(t as usize));
                }
            }
        }
        nll
    }

    /// Exact `log p(video | prompt)`.
    pub fn log_likelihood(&self, video: &Video, prompt: &Prompt) -> Result<f64> {
        let ex = self.example(video, prompt)?;
        Ok(-self.nll_accumulate(&ex, None))
    }

    /// Gradient of `log p(video | prompt)` with respect to every parameter.
    pub fn grad_log_likelihood(&self, video: &Video, prompt: &Prompt) -> Result<ParamSet> {
        let ex = self.example(video, prompt)?;
        let mut g = self.params.zeros_like();
        self.nll_accumulate(&ex, Some((&mut g, -1.0)));
        g.check_finite("log-likelihood gradient")?;
        Ok(g)
    }

    /// Logits of the first cell, which depend on the caption only.
    pub fn first_step_logits(&self, caption: &[u32]) -> Vec<f64> {
        let mut s = self.scratch();
        let c = self.caption_context(caption);
        let none = self.dims.vocab_size;
        self.forward_step(none, none, &c, &mut s);
        s.z
    }

    /// Ancestral sampling by inverse CDF, one uniform draw per cell.
    pub fn sample_cells(&self, caption: &[u32], rng: &mut impl Rng) -> Vec<Symbol> {
        let mut s = self.scratch();
        let c = self.caption_context(caption);
        let total = self.dims.shape.cells();
        let mut cells: Vec<Symbol> = Vec::with_capacity(total);
        let mut probs = vec![0.0; self.dims.vocab_size];
        for n in 0..total {
            let (prev, above) = self.context_of(&cells, n);
            self.forward_step(prev, above, &c, &mut s);
            let lse = log_sum_exp(&s.z);
            for (p, z) in probs.iter_mut().zip(&s.z) {
                *p = (z - lse).exp();
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            cells.push(pick as Symbol);
        }
        cells
    }

    /// Draws one video for `prompt`. Deterministic in `seed`.
    pub fn sample(&self, prompt: &Prompt, seed: u64) -> Video {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = format!("vid-{:016x}", rng.gen::<u64>());
        let cells = self.sample_cells(&self.caption_ids(prompt), &mut rng);
        Video {
            id,
            prompt_id: prompt.id.clone(),
            source: VideoSource::Synthesized,
            frames: Frames::new(self.dims.shape, cells).expect("sampled cell count matches shape"),
        }
    }
}

/// Mean of `weight · NLL` over the batch, with the matching gradient added
/// into `grad`. Samples are visited in order, so the result does not depend
/// on anything but the batch contents and order.
pub fn weighted_batch(model: &GenModel, batch: &[&GenExample], weights: &[f64], grad: &mut ParamSet) -> f64 {
    debug_assert_eq!(batch.len(), weights.len());
    if batch.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (ex, &w) in batch.iter().zip(weights) {
        total += w * model.nll_accumulate(ex, Some((&mut *grad, w * inv)));
    }
    total * inv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// What an observer sees after each optimizer step.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub params: &'a ParamSet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training loss of each epoch, measured before each step.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// The per-epoch visiting order of `n` samples.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Maximum-likelihood fit by minibatch descent on mean NLL.
pub fn mle_fit(
    model: &GenModel,
    data: &[GenExample],
    cfg: &FitConfig,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<(GenModel, FitReport)> {
    if cfg.batch_size == 0 {
        return Err(PipelineError::Config("batch size must be positive".into()));
    }
    let mut m = model.clone();
    let mut opt = Optimizer::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport::default();
    let ones = vec![1.0; cfg.batch_size];
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GenExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = m.params.zeros_like();
            let loss = weighted_batch(&m, &batch, &ones[..batch.len()], &mut g);
            if !loss.is_finite() {
                return Err(PipelineError::Divergence { step: report.steps, loss });
            }
            g.check_finite(&format!("gradient at step {}", report.steps))?;
            opt.step(&mut m.params, &mut g);
            m.params.check_finite(&format!("parameters after step {}", report.steps))?;
            sum += loss * batch.len() as f64;
            observer(&StepInfo { step: report.steps, epoch, loss, params: &m.params });
            report.steps += 1;
        }
        if !data.is_empty() {
            report.epoch_loss.push(sum / data.len() as f64);
        }
    }
    Ok((m, report))
}

/// Mean NLL over a dataset.
pub fn mean_nll(model: &GenModel, data: &[GenExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|ex| model.nll_accumulate(ex, None)).sum::<f64>() / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    fn tok() -> CaptionTokenizer {
        CaptionTokenizer::new(["waiter", "gerbil", "spacecraft", "nod"])
    }

    fn prompt(caption: &str) -> Prompt {
        Prompt {
            id: "p".into(),
            subjects: vec!["waiter".into()],
            scene: "spacecraft".into(),
            action: "nod".into(),
            caption: caption.into(),
        }
    }

    fn dims(shape: VideoShape, v: usize) -> GenDims {
        GenDims { shape, vocab_size: v, embed_dim: 3, hidden_dim: 4 }
    }

    fn video(shape: VideoShape, cells: Vec<Symbol>) -> Video {
        Video { id: "v".into(), prompt_id: "p".into(), source: VideoSource::Synthesized, frames: Frames::new(shape, cells).unwrap() }
    }

    /// Every sequence over `v` symbols of length `n`, in lexicographic order.
    fn all_sequences(n: usize, v: usize) -> Vec<Vec<Symbol>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|s| (0..v).map(move |x| [s.clone(), vec![x as Symbol]].concat()))
                .collect();
        }
        out
    }

    #[test]
    fn zero_model_is_uniform() {
        let shape = VideoShape::new(8, 4, 4);
        let m = GenModel::zeros(dims(shape, 16), tok());
        let ll = m.log_likelihood(&video(shape, vec![3; 128]), &prompt("waiter nod spacecraft")).unwrap();
        assert!((ll + 128.0 * 16f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn one_by_one_by_two_sums_to_one() {
        let shape = VideoShape::new(1, 1, 2);
        let m = GenModel::init(dims(shape, 4), tok(), 5);
        let p = prompt("the gerbil nod");
        let total: f64 =
            all_sequences(2, 4).into_iter().map(|s| m.log_likelihood(&video(shape, s), &p).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn zeroed_conditioning_ignores_prompt() {
        let shape = VideoShape::new(2, 2, 2);
        let mut m = GenModel::init(dims(shape, 3), tok(), 2);
        m.params.by_name_mut("caption_embedding").unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        let v = video(shape, vec![0, 1, 2, 1, 0, 0, 2, 1]);
        let a = m.log_likelihood(&v, &prompt("waiter nod spacecraft")).unwrap();
        let b = m.log_likelihood(&v, &prompt("the gerbil")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences_on_zero_and_random_models() {
        let shape = VideoShape::new(2, 2, 2);
        let p = prompt("the waiter nod in the spacecraft");
        let v = video(shape, vec![0, 2, 1, 1, 2, 0, 0, 1]);
        for seed in [None, Some(1), Some(2)] {
            let m = match seed {
                None => GenModel::zeros(dims(shape, 3), tok()),
                Some(s) => GenModel::init(dims(shape, 3), tok(), s),
            };
            let g = m.grad_log_likelihood(&v, &p).unwrap();
            let ex = m.example(&v, &p).unwrap();
            let r = check_gradient(&m.params, &g, 1e-5, |ps| {
                let mm = GenModel { params: ps.clone(), ..m.clone() };
                -mm.nll_accumulate(&ex, None)
            });
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn unused_rows_have_zero_gradient() {
        let shape = VideoShape::new(2, 1, 2);
        let m = GenModel::init(dims(shape, 5), tok(), 3);
        let g = m.grad_log_likelihood(&video(shape, vec![0, 1, 0, 1]), &prompt("waiter")).unwrap();
        let emb = g.by_name("token_embedding").unwrap();
        assert!(emb.row(3).iter().chain(emb.row(4)).all(|x| *x == 0.0));
        let cap = g.by_name("caption_embedding").unwrap();
        let gerbil = m.tokenizer.id("gerbil").unwrap() as usize;
        assert!(cap.row(gerbil).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let shape = VideoShape::new(2, 1, 2);
        let m = GenModel::init(dims(shape, 3), tok(), 4);
        let p = prompt("waiter nod");
        let vids = [vec![0, 1, 2, 2], vec![1, 1, 1, 0], vec![2, 0, 1, 2]];
        let mut sum = m.params.zeros_like();
        for c in &vids {
            sum.add_scaled(1.0, &m.grad_log_likelihood(&video(shape, c.clone()), &p).unwrap());
        }
        let exs: Vec<GenExample> = vids.iter().map(|c| m.example(&video(shape, c.clone()), &p).unwrap()).collect();
        let mut batch = m.params.zeros_like();
        weighted_batch(&m, &exs.iter().collect::<Vec<_>>(), &[1.0; 3], &mut batch);
        // weighted_batch is the mean NLL gradient: −3 × it is Σ ∇log p.
        for (a, b) in sum.flat().iter().zip(batch.flat()) {
            assert!((a + 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = GenModel::zeros(dims(VideoShape::new(2, 2, 2), 3), tok());
        let v = video(VideoShape::new(2, 1, 2), vec![0; 4]);
        assert!(matches!(m.log_likelihood(&v, &prompt("waiter")), Err(PipelineError::Shape(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let shape = VideoShape::new(4, 2, 2);
        let m = GenModel::init(dims(shape, 6), tok(), 1);
        let p = prompt("waiter nod");
        assert_eq!(m.sample(&p, 9), m.sample(&p, 9));
        assert_ne!(m.sample(&p, 9).frames, m.sample(&p, 10).frames);
        assert_eq!(m.sample(&p, 9).source, VideoSource::Synthesized);
    }

    #[test]
    fn uniform_sampler_frequencies_within_three_sigma() {
        let shape = VideoShape::new(10, 10, 10);
        let m = GenModel::zeros(dims(shape, 16), tok());
        let mut counts = [0usize; 16];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            for c in m.sample_cells(&[], &mut rng) {
                counts[c as usize] += 1;
            }
        }
        let n: f64 = 100_000.0;
        let p: f64 = 1.0 / 16.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn fit_on_constant_data_learns_all_zero_frames() {
        let shape = VideoShape::new(2, 2, 2);
        let m = GenModel::init(dims(shape, 4), tok(), 1);
        let p = prompt("waiter");
        let ex = m.example(&video(shape, vec![0; 8]), &p).unwrap();
        let cfg = FitConfig { epochs: 150, batch_size: 4, optimizer: OptimizerConfig::adam(0.05), seed: 3 };
        let (fit, rep) = mle_fit(&m, &vec![ex.clone(); 8], &cfg, |_| {}).unwrap();
        assert!(mean_nll(&fit, &[ex]) < 0.01, "{:?}", rep.epoch_loss.last());
        for seed in 0..5 {
            assert!(fit.sample(&p, seed).frames.cells().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let shape = VideoShape::new(2, 1, 2);
        let m = GenModel::init(dims(shape, 3), tok(), 1);
        let ex = m.example(&video(shape, vec![0, 1, 2, 0]), &prompt("waiter")).unwrap();
        let cfg = FitConfig { epochs: 3, batch_size: 2, optimizer: OptimizerConfig::sgd(0.0, 0.0), seed: 3 };
        let (fit, _) = mle_fit(&m, &[ex.clone(), ex], &cfg, |_| {}).unwrap();
        assert_eq!(fit.params, m.params);
    }

    #[test]
    fn divergence_names_the_step() {
        let shape = VideoShape::new(2, 1, 2);
        let m = GenModel::init(dims(shape, 3), tok(), 1);
        let ex = m.example(&video(shape, vec![0, 1, 2, 0]), &prompt("waiter")).unwrap();
        let cfg = FitConfig { epochs: 50, batch_size: 1, optimizer: OptimizerConfig::sgd(1e200, 0.0), seed: 3 };
        let err = mle_fit(&m, &[ex], &cfg, |_| {}).unwrap_err();
        assert!(
            matches!(err, PipelineError::Divergence { .. } | PipelineError::NonFinite { .. }),
            "{err}"
        );
        assert!(err.to_string().contains("step"), "{err}");
    }
}
