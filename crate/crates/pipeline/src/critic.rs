//! Answer-generating critic.
//!
//! The multimodal input `M` is the video (one feature token per frame: the
//! normalized symbol histogram plus the fraction of cells that changed since
//! the previous frame) and the caption; `Q` is the fixed question for one
//! dimension. A context vector is computed from `M` and `Q`:
//!
//! ```text
//! u  = F · mean_t f_t                              frame summary
//! m_k = softmax(G[caption_k]) · presence            does token k's symbol appear?
//! g  = Σ_k (1 − m_k) H[caption_k],  n = Σ_k H[caption_k]
//! k  = W [u; g; n; mean_k T[caption_k]; mean_j T[question_j]] + b
//! ```
//!
//! `G` lets each caption token attend over the symbol vocabulary; tokens
//! that name nothing learn to point at symbols that are always present.
//!
//! and a recurrent decoder generates the answer `A = [label, reason..., <eos>]`:
//!
//! ```text
//! s_i = tanh(k + W_in · E[A_{i-1}] + W_rec · s_{i-1})     (A_{-1} = <bos>)
//! p(A_i | M, Q, A_<i) = softmax(W_out s_i + b_out)
//! ```
//!
//! The training loss is the answer-only negative log-likelihood. Position
//! `i` sees `M`, `Q` and `A_<i` only.

use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use hfalign_core::config::{OptimizerConfig, ParseFailurePolicy};
use hfalign_core::oracle::reason_words;
use hfalign_core::tokenizer::question_text;
use hfalign_core::{CaptionTokenizer, Dimension, Label, Oracle, Prompt, ScoreMap, Video, VideoShape};

use crate::checkpoint;
use crate::error::{PipelineError, Result};
use crate::optim::Optimizer;
use crate::params::{axpy, log_sum_exp, ParamSet, Tensor};
use crate::toygen::{epoch_order, StepInfo};

pub const EOS: u32 = 3;
pub const UNK: u32 = 4;

/// Answer vocabulary: the three label words first (best to worst), then
/// `<eos>`, `<unk>`, the reason words, and the numbers `0.00`..`1.00`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl AnswerVocab {
    pub fn standard() -> Self {
        let mut words: Vec<String> = Label::ALL.iter().map(|l| l.word().to_string()).collect();
        words.push("<eos>".into());
        words.push("<unk>".into());
        words.extend(reason_words().into_iter().map(String::from));
        words.extend((0..=100).map(|i| format!("{:.2}", f64::from(i) / 100.0)));
        Self::from_words(words).expect("standard vocabulary is well formed")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let head: Vec<&str> = words.iter().take(5).map(String::as_str).collect();
        if head != ["good", "normal", "bad", "<eos>", "<unk>"] {
            return Err(PipelineError::Checkpoint("answer vocabulary must start with the label tokens, <eos>, <unk>".into()));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(PipelineError::Checkpoint(format!("duplicate answer word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn label_token(label: Label) -> u32 {
        Label::ALL.iter().position(|l| *l == label).expect("label listed") as u32
    }

    pub fn token_label(token: u32) -> Option<Label> {
        Label::ALL.get(token as usize).copied()
    }

    /// `[label, reason words..., <eos>]`, or `[label, <eos>]` without reason.
    pub fn encode(&self, label: Label, reason: Option<&str>) -> Vec<u32> {
        let mut ids = vec![Self::label_token(label)];
        if let Some(r) = reason {
            ids.extend(r.split_whitespace().map(|w| self.index.get(w).copied().unwrap_or(UNK)));
        }
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticDims {
    pub shape: VideoShape,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub grounding_dim: usize,
}

const FRAME_PROJ: usize = 0;
const GROUND_LOGITS: usize = 1;
const GROUND_VALUE: usize = 2;
const TEXT: usize = 3;
const CTX_W: usize = 4;
const CTX_B: usize = 5;
const ANSWER_EMB: usize = 6;
const IN_W: usize = 7;
const REC_W: usize = 8;
const OUT_W: usize = 9;
const OUT_B: usize = 10;

/// Pooled video features, shared by the three questions about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    /// Mean over frames of `[histogram / HW; changed / HW]`.
    pub frame_mean: Vec<f64>,
    /// 1 for every symbol that appears in some frame.
    pub presence: Vec<f64>,
}

impl VideoFeatures {
    /// Per-frame feature tokens: the normalized histogram and the changed
    /// fraction. Histograms sum to H·W before normalization.
    pub fn frame_tokens(video: &Video, vocab_size: usize) -> Vec<Vec<f64>> {
        let shape = video.shape();
        let hw = shape.frame_cells() as f64;
        (0..shape.frames)
            .map(|t| {
                let mut f = vec![0.0; vocab_size + 1];
                for &s in video.frames.frame(t) {
                    f[usize::from(s)] += 1.0;
                }
                let changed = if t == 0 {
                    0
                } else {
                    video.frames.frame(t).iter().zip(video.frames.frame(t - 1)).filter(|(a, b)| a != b).count()
                };
                f[vocab_size] = changed as f64;
                f.iter_mut().for_each(|x| *x /= hw);
                f
            })
            .collect()
    }

    pub fn of(video: &Video, vocab_size: usize) -> Self {
        let tokens = Self::frame_tokens(video, vocab_size);
        let mut frame_mean = vec![0.0; vocab_size + 1];
        for f in &tokens {
            axpy(1.0 / tokens.len() as f64, f, &mut frame_mean);
        }
        let mut presence = vec![0.0; vocab_size];
        for &s in video.frames.cells() {
            presence[usize::from(s)] = 1.0;
        }
        Self { frame_mean, presence }
    }
}

/// Everything the critic conditions on for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticInput {
    pub features: VideoFeatures,
    /// Dominant symbol of each frame; only used as placeholder targets when
    /// the input is packed into one sequence.
    pub frame_symbols: Vec<u32>,
    pub caption: Vec<u32>,
    pub question: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticExample {
    pub input: CriticInput,
    pub answer: Vec<u32>,
}

/// `[M; Q; A]` as one target sequence with a loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub frames: Range<usize>,
    pub caption: Range<usize>,
    pub question: Range<usize>,
    pub answer: Range<usize>,
}

impl Packed {
    /// The standard packing: the mask is set exactly over the answer.
    pub fn new(input: &CriticInput, answer: &[u32]) -> Self {
        let mut targets = input.frame_symbols.clone();
        let frames = 0..targets.len();
        targets.extend(&input.caption);
        let caption = frames.end..targets.len();
        targets.extend(&input.question);
        let question = caption.end..targets.len();
        targets.extend(answer);
        let answer = question.end..targets.len();
        let mask = (0..targets.len()).map(|i| answer.contains(&i)).collect();
        Self { targets, mask, frames, caption, question, answer }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub dims: CriticDims,
    pub tokenizer: CaptionTokenizer,
    pub answers: AnswerVocab,
    /// Whether answers carry the reason after the label.
    pub with_reason: bool,
    pub max_answer_len: usize,
    pub params: ParamSet,
}

struct Trace {
    x: Vec<f64>,
    /// Per caption position: attention over symbols and the match score.
    attn: Vec<Vec<f64>>,
    matched: Vec<f64>,
    k: Vec<f64>,
    states: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

/// One decoded answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub label: Label,
    pub reason: String,
}

impl Critic {
    pub fn zeros(dims: CriticDims, tokenizer: CaptionTokenizer, with_reason: bool) -> Self {
        let answers = AnswerVocab::standard();
        let (v, e, h, r, vc, va) =
            (dims.vocab_size, dims.embed_dim, dims.hidden_dim, dims.grounding_dim, tokenizer.len(), answers.len());
        let params = ParamSet::new(vec![
            Tensor::zeros("frame_proj", e, v + 1),
            Tensor::zeros("grounding_embedding", vc, v),
            Tensor::zeros("grounding_value_embedding", vc, r),
            Tensor::zeros("text_embedding", vc, e),
            Tensor::zeros("ctx_weight", h, 3 * e + 2 * r),
            Tensor::zeros("ctx_bias", h, 1),
            Tensor::zeros("answer_embedding", va + 1, e),
            Tensor::zeros("in_weight", h, e),
            Tensor::zeros("rec_weight", h, h),
            Tensor::zeros("out_weight", va, h),
            Tensor::zeros("out_bias", va, 1),
        ]);
        Self { dims, tokenizer, answers, with_reason, max_answer_len: 16, params }
    }

    pub fn init(dims: CriticDims, tokenizer: CaptionTokenizer, with_reason: bool, seed: u64) -> Self {
        let mut c = Self::zeros(dims, tokenizer, with_reason);
        c.params.init_fan_in(&mut ChaCha8Rng::seed_from_u64(seed));
        c
    }

    /// Seeds the grounding logits from caption/video co-occurrence: row `w`
    /// gets `scale * ln(f(s | w) / f(s))`, with `f` the mean cell frequency of
    /// symbol `s` over videos whose caption holds word `w` (or all videos).
    /// `f(s)` starts from one video's worth of uniform mass and `f(s | w)`
    /// from one video's worth of `f(s)`. Uses no labels.
    pub fn warm_start_grounding(&mut self, pairs: &[(&Video, &str)], scale: f64) {
        let v = self.dims.vocab_size;
        let mut total = vec![1.0 / v as f64; v];
        let mut by_word: HashMap<u32, (Vec<f64>, f64)> = HashMap::new();
        for (video, caption) in pairs {
            let cells = video.frames.cells();
            let mut freq = vec![0.0; v];
            for &c in cells {
                if (c as usize) < v {
                    freq[c as usize] += 1.0 / cells.len() as f64;
                }
            }
            axpy(1.0, &freq, &mut total);
            let mut words = self.tokenizer.encode_lossy(caption);
            words.sort_unstable();
            words.dedup();
            for w in words {
                let (sum, n) = by_word.entry(w).or_insert_with(|| (vec![0.0; v], 0.0));
                axpy(1.0, &freq, sum);
                *n += 1.0;
            }
        }
        let z: f64 = total.iter().sum();
        total.iter_mut().for_each(|x| *x /= z);
        let g = self.params.get_mut(GROUND_LOGITS);
        for (w, (sum, n)) in by_word {
            if (w as usize) >= g.rows {
                continue;
            }
            for (s, x) in g.row_mut(w as usize).iter_mut().enumerate() {
                let cond = (sum[s] + total[s]) / (n + 1.0);
                *x = scale * (cond / total[s]).ln();
            }
        }
    }

    fn bos(&self) -> usize {
        self.answers.len()
    }

    pub fn question_ids(&self, d: Dimension) -> Vec<u32> {
        self.tokenizer.encode_lossy(question_text(d))
    }

    pub fn input(&self, video: &Video, caption: &str, d: Dimension) -> Result<CriticInput> {
        self.input_from(VideoFeatures::of(video, self.dims.vocab_size), video, caption, d)
    }

    fn input_from(&self, features: VideoFeatures, video: &Video, caption: &str, d: Dimension) -> Result<CriticInput> {
        if video.shape() != self.dims.shape {
            return Err(PipelineError::Shape(format!(
                "video `{}` is {:?}, critic expects {:?}",
                video.id,
                video.shape(),
                self.dims.shape
            )));
        }
        let frame_symbols = (0..video.shape().frames)
            .map(|t| dominant_symbol(video.frames.frame(t), self.dims.vocab_size))
            .collect();
        Ok(CriticInput {
            features,
            frame_symbols,
            caption: self.tokenizer.encode_lossy(caption),
            question: self.question_ids(d),
        })
    }

    /// The three inputs (one per dimension) for a video.
    pub fn inputs(&self, video: &Video, caption: &str) -> Result<[CriticInput; 3]> {
        if let Some(max) = video.frames.max_symbol() {
            if usize::from(max) >= self.dims.vocab_size {
                return Err(PipelineError::Shape(format!("video `{}` holds symbol {max} outside the vocabulary", video.id)));
            }
        }
        let f = VideoFeatures::of(video, self.dims.vocab_size);
        Ok([
            self.input_from(f.clone(), video, caption, Dimension::SemanticConsistency)?,
            self.input_from(f.clone(), video, caption, Dimension::MotionSmoothness)?,
            self.input_from(f, video, caption, Dimension::VideoFidelity)?,
        ])
    }

    pub fn answer_ids(&self, label: Label, reason: &str) -> Vec<u32> {
        self.answers.encode(label, self.with_reason.then_some(reason))
    }

    fn context(&self, input: &CriticInput) -> Trace {
        let p = &self.params;
        let (e, r) = (self.dims.embed_dim, self.dims.grounding_dim);
        let mut x = vec![0.0; 3 * e + 2 * r];
        p.get(FRAME_PROJ).matvec_add(&input.features.frame_mean, &mut x[..e]);
        let mut attn = Vec::with_capacity(input.caption.len());
        let mut matched = Vec::with_capacity(input.caption.len());
        for &t in &input.caption {
            let logits = p.get(GROUND_LOGITS).row(t as usize);
            let lse = log_sum_exp(logits);
            let a: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            let m = crate::params::dot(&a, &input.features.presence);
            let value = p.get(GROUND_VALUE).row(t as usize);
            axpy(1.0 - m, value, &mut x[e..e + r]);
            axpy(1.0, value, &mut x[e + r..e + 2 * r]);
            attn.push(a);
            matched.push(m);
        }
        mean_rows(p.get(TEXT), &input.caption, &mut x[e + 2 * r..2 * e + 2 * r]);
        mean_rows(p.get(TEXT), &input.question, &mut x[2 * e + 2 * r..]);
        let mut k = p.get(CTX_B).data.clone();
        p.get(CTX_W).matvec_add(&x, &mut k);
        Trace { x, attn, matched, k, states: Vec::new(), logits: Vec::new() }
    }

    /// Decoder state and logits for one step.
    fn step(&self, k: &[f64], prev_token: usize, prev_state: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mut a = k.to_vec();
        p.get(IN_W).matvec_add(p.get(ANSWER_EMB).row(prev_token), &mut a);
        if let Some(s) = prev_state {
            p.get(REC_W).matvec_add(s, &mut a);
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        let mut z = p.get(OUT_B).data.clone();
        p.get(OUT_W).matvec_add(&a, &mut z);
        (a, z)
    }

    /// Teacher-forced pass over the answer.
    fn run(&self, input: &CriticInput, answer: &[u32]) -> Trace {
        let mut tr = self.context(input);
        for i in 0..answer.len() {
            let prev = if i == 0 { self.bos() } else { answer[i - 1] as usize };
            let (s, z) = self.step(&tr.k, prev, tr.states.last().map(Vec::as_slice));
            tr.states.push(s);
            tr.logits.push(z);
        }
        tr
    }

    /// Answer-masked loss over a packed sequence: `−Σ_i mask_i log p(target_i)`.
    ///
    /// Only answer positions carry predictions, so the mask must be false
    /// elsewhere. The answer tokens in `packed` are also the decoder's
    /// teacher-forced inputs.
    pub fn packed_loss(&self, input: &CriticInput, packed: &Packed) -> Result<f64> {
        let answer = &packed.targets[packed.answer.clone()];
        if answer.is_empty() {
            return Err(PipelineError::Precondition("critic loss needs a non-empty answer".into()));
        }
        if let Some(i) = (0..packed.targets.len()).find(|i| packed.mask[*i] && !packed.answer.contains(i)) {
            return Err(PipelineError::Precondition(format!("loss mask set at non-answer position {i}")));
        }
        let tr = self.run(input, answer);
        let mut loss = 0.0;
        for (pos, &target) in packed.targets.iter().enumerate() {
            if !packed.mask[pos] {
                continue;
            }
            let z = &tr.logits[pos - packed.answer.start];
            loss += log_sum_exp(z) - z[target as usize];
        }
        Ok(loss)
    }

    /// Gradient of the packed loss with respect to soft (one-hot) targets:
    /// row `i` is `−mask_i · log p_i`, a zero row wherever the mask is off.
    pub fn target_gradient(&self, input: &CriticInput, packed: &Packed) -> Vec<Vec<f64>> {
        let answer = &packed.targets[packed.answer.clone()];
        let tr = self.run(input, answer);
        let va = self.answers.len();
        (0..packed.targets.len())
            .map(|pos| {
                if !packed.mask[pos] {
                    return vec![0.0; va];
                }
                let z = &tr.logits[pos - packed.answer.start];
                let lse = log_sum_exp(z);
                z.iter().map(|v| -(v - lse)).collect()
            })
            .collect()
    }

    /// `−Σ_i log p(A_i | Q, M, A_<i)`.
    pub fn loss(&self, input: &CriticInput, answer: &[u32]) -> Result<f64> {
        self.packed_loss(input, &Packed::new(input, answer))
    }

    /// Log-probabilities at every answer position under teacher forcing.
    pub fn answer_log_probs(&self, input: &CriticInput, answer: &[u32]) -> Vec<Vec<f64>> {
        self.run(input, answer)
            .logits
            .into_iter()
            .map(|z| {
                let lse = log_sum_exp(&z);
                z.into_iter().map(|v| v - lse).collect()
            })
            .collect()
    }

    /// Loss of one example with `weight · ∇loss` added into `grad`.
    pub fn loss_accumulate(&self, ex: &CriticExample, grad: &mut ParamSet, weight: f64) -> f64 {
        let p = &self.params;
        let (e, r) = (self.dims.embed_dim, self.dims.grounding_dim);
        let h = self.dims.hidden_dim;
        let tr = self.run(&ex.input, &ex.answer);
        let mut loss = 0.0;
        let mut dk = vec![0.0; h];
        let mut carry = vec![0.0; h];
        for i in (0..ex.answer.len()).rev() {
            let z = &tr.logits[i];
            let lse = log_sum_exp(z);
            let target = ex.answer[i] as usize;
            loss += lse - z[target];
            let mut dz: Vec<f64> = z.iter().map(|v| weight * (v - lse).exp()).collect();
            dz[target] -= weight;
            let s = &tr.states[i];
            grad.get_mut(OUT_W).outer_add(1.0, &dz, s);
            axpy(1.0, &dz, &mut grad.get_mut(OUT_B).data);
            let mut ds = carry.clone();
            p.get(OUT_W).matvec_t_add(&dz, &mut ds);
            let da: Vec<f64> = ds.iter().zip(s).map(|(d, sv)| d * (1.0 - sv * sv)).collect();
            axpy(1.0, &da, &mut dk);
            let prev = if i == 0 { self.bos() } else { ex.answer[i - 1] as usize };
            grad.get_mut(IN_W).outer_add(1.0, &da, p.get(ANSWER_EMB).row(prev));
            p.get(IN_W).matvec_t_add(&da, grad.get_mut(ANSWER_EMB).row_mut(prev));
            carry.iter_mut().for_each(|v| *v = 0.0);
            if i > 0 {
                grad.get_mut(REC_W).outer_add(1.0, &da, &tr.states[i - 1]);
                p.get(REC_W).matvec_t_add(&da, &mut carry);
            }
        }
        grad.get_mut(CTX_W).outer_add(1.0, &dk, &tr.x);
        axpy(1.0, &dk, &mut grad.get_mut(CTX_B).data);
        let mut dx = vec![0.0; 3 * e + 2 * r];
        p.get(CTX_W).matvec_t_add(&dk, &mut dx);
        grad.get_mut(FRAME_PROJ).outer_add(1.0, &dx[..e], &ex.input.features.frame_mean);
        let (dmiss, dcount) = (&dx[e..e + r], &dx[e + r..e + 2 * r]);
        let presence = &ex.input.features.presence;
        for (k, &t) in ex.input.caption.iter().enumerate() {
            let m = tr.matched[k];
            let row = grad.get_mut(GROUND_VALUE).row_mut(t as usize);
            axpy(1.0 - m, dmiss, row);
            axpy(1.0, dcount, row);
            // m = a · presence with a = softmax(logits):
            // ∂m/∂logit_j = a_j (presence_j − m).
            let dm = -crate::params::dot(p.get(GROUND_VALUE).row(t as usize), dmiss);
            let row = grad.get_mut(GROUND_LOGITS).row_mut(t as usize);
            for (j, a) in tr.attn[k].iter().enumerate() {
                row[j] += dm * a * (presence[j] - m);
            }
        }
        scatter_mean(grad.get_mut(TEXT), &ex.input.caption, &dx[e + 2 * r..2 * e + 2 * r]);
        scatter_mean(grad.get_mut(TEXT), &ex.input.question, &dx[2 * e + 2 * r..]);
        loss
    }

    /// Greedy decode. Stops at `<eos>` or `max_answer_len` tokens.
    pub fn greedy(&self, input: &CriticInput) -> Vec<u32> {
        let tr = self.context(input);
        let mut out = Vec::new();
        let mut state: Option<Vec<f64>> = None;
        let mut prev = self.bos();
        while out.len() < self.max_answer_len {
            let (s, z) = self.step(&tr.k, prev, state.as_deref());
            let next = argmax(&z) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            prev = next as usize;
            state = Some(s);
        }
        out
    }

    /// Parses a decoded answer: the first token must be a label token.
    pub fn parse(&self, d: Dimension, ids: &[u32]) -> Result<Verdict> {
        let label = ids.first().and_then(|&t| AnswerVocab::token_label(t)).ok_or_else(|| PipelineError::Parse {
            dimension: d,
            decoded: self.answers.decode(ids),
        })?;
        let body: Vec<u32> = ids[1..].iter().copied().take_while(|&t| t != EOS).collect();
        Ok(Verdict { label, reason: self.answers.decode(&body) })
    }

    /// Greedy label and reason for each dimension, in `Dimension::ALL` order.
    pub fn evaluate(&self, video: &Video, caption: &str) -> Result<[Result<Verdict>; 3]> {
        let inputs = self.inputs(video, caption)?;
        Ok(Dimension::ALL.map(|d| self.parse(d, &self.greedy(&inputs[d.index()]))))
    }

    /// Mean mapped score over the three decoded labels. Any parse failure
    /// is an error.
    pub fn reward(&self, video: &Video, caption: &str, map: &ScoreMap) -> Result<f64> {
        let labels = self
            .evaluate(video, caption)?
            .into_iter()
            .map(|v| v.map(|v| v.label))
            .collect::<Result<Vec<_>>>()?;
        Ok(map.reward(&labels))
    }

    /// Reward with a configured fallback for unparseable dimensions.
    /// Returns `None` when the policy drops the sample.
    pub fn reward_with_policy(&self, video: &Video, caption: &str, map: &ScoreMap, policy: ParseFailurePolicy) -> Result<Option<f64>> {
        let mut labels = Vec::with_capacity(3);
        for v in self.evaluate(video, caption)? {
            match (v, policy) {
                (Ok(v), _) => labels.push(v.label),
                (Err(e), ParseFailurePolicy::Error) => return Err(e),
                (Err(e), ParseFailurePolicy::TreatAsBad) => {
                    warn!(video = %video.id, "{e}; scoring the dimension as Bad");
                    labels.push(Label::Bad);
                }
                (Err(e), ParseFailurePolicy::Drop) => {
                    warn!(video = %video.id, "{e}; dropping the sample");
                    return Ok(None);
                }
            }
        }
        Ok(Some(map.reward(&labels)))
    }
}

fn mean_rows(table: &Tensor, ids: &[u32], out: &mut [f64]) {
    if ids.is_empty() {
        return;
    }
    let inv = 1.0 / ids.len() as f64;
    for &t in ids {
        axpy(inv, table.row(t as usize), out);
    }
}

fn scatter_mean(table: &mut Tensor, ids: &[u32], d: &[f64]) {
    if ids.is_empty() {
        return;
    }
    let inv = 1.0 / ids.len() as f64;
    for &t in ids {
        axpy(inv, d, table.row_mut(t as usize));
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

fn dominant_symbol(frame: &[hfalign_core::Symbol], vocab_size: usize) -> u32 {
    let mut counts = vec![0usize; vocab_size];
    for &s in frame {
        counts[usize::from(s)] += 1;
    }
    (0..vocab_size).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CriticFitReport {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Minibatch descent on the mean per-example answer loss.
pub fn critic_fit(
    critic: &Critic,
    data: &[CriticExample],
    cfg: &CriticFitConfig,
    mut observer: impl FnMut(&StepInfo<'_>),
) -> Result<(Critic, CriticFitReport)> {
    if cfg.batch_size == 0 {
        return Err(PipelineError::Config("critic batch size must be positive".into()));
    }
    if let Some(i) = data.iter().position(|ex| ex.answer.is_empty()) {
        return Err(PipelineError::Precondition(format!("training example {i} has an empty answer")));
    }
    let mut c = critic.clone();
    let mut opt = Optimizer::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = CriticFitReport::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = c.params.zeros_like();
            let inv = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += c.loss_accumulate(&data[i], &mut g, inv);
            }
            if !loss.is_finite() {
                return Err(PipelineError::Divergence { step: report.steps, loss });
            }
            g.check_finite(&format!("critic gradient at step {}", report.steps))?;
            opt.step(&mut c.params, &mut g);
            c.params.check_finite(&format!("critic parameters after step {}", report.steps))?;
            sum += loss;
            observer(&StepInfo { step: report.steps, epoch, loss: loss * inv, params: &c.params });
            report.steps += 1;
        }
        if !data.is_empty() {
            report.epoch_loss.push(sum / data.len() as f64);
        }
    }
    Ok((c, report))
}

/// Builds training examples from labeled (video, caption, dimension) triples.
pub fn examples_for(critic: &Critic, items: &[(&Video, &str, Dimension, Label, &str)]) -> Result<Vec<CriticExample>> {
    let mut cache: HashMap<&str, VideoFeatures> = HashMap::new();
    items
        .iter()
        .map(|&(video, caption, d, label, reason)| {
            let f = cache.entry(video.id.as_str()).or_insert_with(|| VideoFeatures::of(video, critic.dims.vocab_size)).clone();
            Ok(CriticExample { input: critic.input_from(f, video, caption, d)?, answer: critic.answer_ids(label, reason) })
        })
        .collect()
}

/// Labels oracle-style for a whole video; implemented by the critic and the
/// oracle so downstream code can use either.
pub trait Labeler: Send + Sync {
    fn label_video(&self, video: &Video, prompt: &Prompt) -> Result<[Result<Verdict>; 3]>;
}

impl Labeler for Critic {
    fn label_video(&self, video: &Video, prompt: &Prompt) -> Result<[Result<Verdict>; 3]> {
        self.evaluate(video, &prompt.caption)
    }
}

impl Labeler for Oracle {
    fn label_video(&self, video: &Video, prompt: &Prompt) -> Result<[Result<Verdict>; 3]> {
        use hfalign_core::Judge;
        let j = self.judge(video, prompt)?;
        Ok(j.map(|j| Ok(Verdict { label: j.label, reason: j.reason })))
    }
}

#[derive(Serialize, Deserialize)]
struct CriticBody {
    dims: CriticDims,
    caption_vocab: Vec<String>,
    answer_vocab: Vec<String>,
    with_reason: bool,
    max_answer_len: usize,
    params: ParamSet,
}

pub const CRITIC: &str = "critic";

impl Critic {
    pub fn to_checkpoint(&self) -> Result<String> {
        checkpoint::to_string(
            CRITIC,
            &CriticBody {
                dims: self.dims,
                caption_vocab: self.tokenizer.words().to_vec(),
                answer_vocab: self.answers.words().to_vec(),
                with_reason: self.with_reason,
                max_answer_len: self.max_answer_len,
                params: self.params.clone(),
            },
        )
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let body: CriticBody = checkpoint::from_str(CRITIC, text)?;
        let tokenizer = CaptionTokenizer::from_words(body.caption_vocab)?;
        let answers = AnswerVocab::from_words(body.answer_vocab)?;
        let probe = Critic::zeros_with_answers(body.dims, tokenizer, answers, body.with_reason);
        if !probe.params.same_layout(&body.params) {
            return Err(PipelineError::Checkpoint("critic parameter layout does not match the stored dimensions".into()));
        }
        Ok(Critic { max_answer_len: body.max_answer_len, params: body.params, ..probe })
    }

    fn zeros_with_answers(dims: CriticDims, tokenizer: CaptionTokenizer, answers: AnswerVocab, with_reason: bool) -> Self {
        let mut c = Critic::zeros(dims, tokenizer, with_reason);
        if c.answers != answers {
            let (h, e, va) = (dims.hidden_dim, dims.embed_dim, answers.len());
            *c.params.by_name_mut("answer_embedding").expect("exists") = Tensor::zeros("answer_embedding", va + 1, e);
            *c.params.by_name_mut("out_weight").expect("exists") = Tensor::zeros("out_weight", va, h);
            *c.params.by_name_mut("out_bias").expect("exists") = Tensor::zeros("out_bias", va, 1);
            c.answers = answers;
        }
        c
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_checkpoint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use hfalign_core::{Frames, VideoSource};
    use rand::Rng;

    fn tok() -> CaptionTokenizer {
        CaptionTokenizer::new(["waiter", "gerbil", "spacecraft", "nod"])
    }

    fn dims() -> CriticDims {
        CriticDims { shape: VideoShape::new(3, 2, 2), vocab_size: 5, embed_dim: 3, hidden_dim: 4, grounding_dim: 2 }
    }

    fn video(seed: u64) -> Video {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..12).map(|_| rng.gen_range(0..5)).collect();
        Video {
            id: format!("v{seed}"),
            prompt_id: "p".into(),
            source: VideoSource::Synthesized,
            frames: Frames::new(VideoShape::new(3, 2, 2), cells).unwrap(),
        }
    }

    #[test]
    fn answer_vocab_layout() {
        let v = AnswerVocab::standard();
        assert_eq!(&v.words()[..5], ["good", "normal", "bad", "<eos>", "<unk>"]);
        assert!(v.words().contains(&"0.95".to_string()) && v.words().contains(&"jitter".to_string()));
        let ids = v.encode(Label::Normal, Some("motion smoothness 0.87 : noticeable frame to frame jitter"));
        assert_eq!(ids[0], 1);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert!(!ids.contains(&UNK));
        assert_eq!(v.decode(&ids[1..ids.len() - 1]), "motion smoothness 0.87 : noticeable frame to frame jitter");
    }

    #[test]
    fn frame_histograms_sum_to_cell_count() {
        let v = video(3);
        for f in VideoFeatures::frame_tokens(&v, 5) {
            let total: f64 = f[..5].iter().sum::<f64>() * 4.0;
            assert!((total - 4.0).abs() < 1e-12);
        }
        assert_eq!(VideoFeatures::frame_tokens(&v, 5).len(), 3);
    }

    #[test]
    fn zero_critic_loss_is_length_times_log_vocab() {
        let c = Critic::zeros(dims(), tok(), true);
        let input = c.input(&video(1), "the waiter nod", Dimension::MotionSmoothness).unwrap();
        let answer = c.answer_ids(Label::Good, "motion smoothness 0.95 : frames change gradually");
        let n = answer.len() as f64;
        assert!((c.loss(&input, &answer).unwrap() - n * (c.answers.len() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn single_token_loss_matches_hand_softmax() {
        // Only the output bias is non-zero: the first-step distribution is
        // softmax(b_out) and the loss of the one-token answer [good] is
        // −log softmax(b)[0].
        let mut c = Critic::zeros(dims(), tok(), false);
        let b = &mut c.params.by_name_mut("out_bias").unwrap().data;
        b[0] = 1.0;
        b[1] = 2.0;
        b[2] = 0.5;
        for v in b.iter_mut().skip(3) {
            *v = f64::NEG_INFINITY.max(-1e300);
        }
        let input = c.input(&video(1), "waiter", Dimension::VideoFidelity).unwrap();
        let by_hand = -(1.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
        assert!((c.loss(&input, &[0]).unwrap() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn empty_answer_is_a_precondition_error() {
        let c = Critic::zeros(dims(), tok(), true);
        let input = c.input(&video(1), "waiter", Dimension::VideoFidelity).unwrap();
        assert!(matches!(c.loss(&input, &[]), Err(PipelineError::Precondition(_))));
    }

    #[test]
    fn mq_targets_do_not_change_the_loss() {
        let c = Critic::init(dims(), tok(), true, 4);
        let input = c.input(&video(2), "the gerbil nod in the spacecraft", Dimension::SemanticConsistency).unwrap();
        let answer = c.answer_ids(Label::Bad, "semantic consistency 0.33 : most caption elements missing");
        let packed = Packed::new(&input, &answer);
        let base = c.packed_loss(&input, &packed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut p = packed.clone();
            for i in p.frames.start..p.question.end {
                p.targets[i] = rng.gen_range(0..1000);
            }
            assert_eq!(c.packed_loss(&input, &p).unwrap().to_bits(), base.to_bits());
        }
        let tg = c.target_gradient(&input, &packed);
        for (i, row) in tg.iter().enumerate() {
            let zero = row.iter().all(|v| *v == 0.0);
            assert_eq!(zero, !packed.answer.contains(&i), "position {i}");
        }
    }

    #[test]
    fn prediction_at_i_ignores_later_answer_tokens() {
        let c = Critic::init(dims(), tok(), true, 5);
        let input = c.input(&video(3), "waiter", Dimension::VideoFidelity).unwrap();
        let a = vec![0, 6, 7, 8, EOS];
        let mut b = a.clone();
        b[3] = 9;
        b[4] = 10;
        let (la, lb) = (c.answer_log_probs(&input, &a), c.answer_log_probs(&input, &b));
        for i in 0..=3 {
            assert_eq!(la[i], lb[i], "position {i}");
        }
        assert_ne!(la[4], lb[4]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let c = Critic::init(dims(), tok(), true, seed);
            let input = c.input(&video(seed), "the waiter and the gerbil nod", Dimension::ALL[seed as usize % 3]).unwrap();
            let last = c.answers.len() as u32 - 1;
            let ex = CriticExample { input, answer: vec![1, 7, 30, last, EOS] };
            let mut g = c.params.zeros_like();
            c.loss_accumulate(&ex, &mut g, 1.0);
            let r = check_gradient(&c.params, &g, 1e-5, |ps| {
                let cc = Critic { params: ps.clone(), ..c.clone() };
                cc.loss(&ex.input, &ex.answer).unwrap()
            });
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn memorizes_one_triplet() {
        let c = Critic::init(CriticDims { hidden_dim: 16, embed_dim: 8, ..dims() }, tok(), true, 1);
        let v = video(7);
        let reason = "video fidelity 0.75 : some artifact cells";
        let items = [(&v, "the waiter nod", Dimension::VideoFidelity, Label::Normal, reason)];
        let data = examples_for(&c, &items).unwrap();
        let cfg = CriticFitConfig { epochs: 300, batch_size: 1, optimizer: OptimizerConfig::adam(0.02), seed: 1 };
        let (fit, rep) = critic_fit(&c, &data, &cfg, |_| {}).unwrap();
        assert!(*rep.epoch_loss.last().unwrap() < 0.05, "{:?}", rep.epoch_loss.last());
        let decoded = fit.greedy(&data[0].input);
        assert_eq!(decoded, data[0].answer);
        let out = fit.evaluate(&v, "the waiter nod").unwrap();
        let fid = out[2].as_ref().unwrap();
        assert_eq!((fid.label, fid.reason.as_str()), (Label::Normal, reason));
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn greedy_is_deterministic_and_parse_rejects_non_labels() {
        let c = Critic::init(dims(), tok(), true, 9);
        let input = c.input(&video(1), "waiter", Dimension::MotionSmoothness).unwrap();
        assert_eq!(c.greedy(&input), c.greedy(&input));
        let err = c.parse(Dimension::MotionSmoothness, &[EOS]).unwrap_err();
        assert!(matches!(err, PipelineError::Parse { dimension: Dimension::MotionSmoothness, .. }));
    }

    #[test]
    fn parse_failure_policies() {
        // Bias the first step towards <eos> so no label is ever produced.
        let mut c = Critic::zeros(dims(), tok(), true);
        c.params.by_name_mut("out_bias").unwrap().data[EOS as usize] = 10.0;
        let v = video(1);
        assert!(matches!(c.reward(&v, "waiter", &ScoreMap::DEFAULT), Err(PipelineError::Parse { .. })));
        let bad = c.reward_with_policy(&v, "waiter", &ScoreMap::DEFAULT, ParseFailurePolicy::TreatAsBad).unwrap();
        assert!((bad.unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(c.reward_with_policy(&v, "waiter", &ScoreMap::DEFAULT, ParseFailurePolicy::Drop).unwrap(), None);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let c = Critic::init(dims(), tok(), false, 1);
        let v = video(2);
        let data = examples_for(&c, &[(&v, "waiter", Dimension::VideoFidelity, Label::Good, "")]).unwrap();
        let cfg = CriticFitConfig { epochs: 2, batch_size: 1, optimizer: OptimizerConfig::adam(0.0), seed: 1 };
        assert_eq!(critic_fit(&c, &data, &cfg, |_| {}).unwrap().0.params, c.params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Critic::init(dims(), tok(), true, 3);
        assert_eq!(Critic::from_checkpoint(&c.to_checkpoint().unwrap()).unwrap(), c);
    }

    #[test]
    fn warm_start_points_words_at_their_symbols() {
        let with = |sym: u16, id: &str| {
            let mut v = video(0);
            v.id = id.into();
            v.frames = Frames::new(VideoShape::new(3, 2, 2), [0, 0, sym, sym].repeat(3)).unwrap();
            v
        };
        let a = with(1, "a");
        let b = with(2, "b");
        let mut c = Critic::init(dims(), tok(), false, 1);
        c.warm_start_grounding(&[(&a, "waiter"), (&b, "gerbil")], 2.0);
        let g = c.params.get(GROUND_LOGITS);
        let argmax = |w: &str| {
            let row = g.row(c.tokenizer.id(w).unwrap() as usize);
            (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap()
        };
        assert_eq!(argmax("waiter"), 1);
        assert_eq!(argmax("gerbil"), 2);
        // f(1) = (0.2 + 0.5) / 3, f(1|waiter) = (0.5 + f(1)) / 2
        let f1 = 0.7 / 3.0_f64;
        let expect = 2.0 * ((0.5 + f1) / 2.0 / f1).ln();
        let got = g.row(c.tokenizer.id("waiter").unwrap() as usize)[1];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}
