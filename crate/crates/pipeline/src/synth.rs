//! Procedural scene synthesizer.
//!
//! A scene is a background grid with one sprite per depicted category item.
//! Sprites occasionally drift to a neighbouring cell between frames. On top
//! of the clean render, each cell independently flickers to another symbol
//! of the scene's palette (`jitter`) or shows an artifact symbol
//! (`artifact_rate`) for that frame only. The reference style (full coverage, no noise) stands in
//! for real footage; noisier styles provide the data the base generator is
//! fit to.

use rand::seq::SliceRandom;
use rand::Rng;

use hfalign_core::config::SceneStyle;
use hfalign_core::{Frames, Prompt, Symbol, SymbolConfig, Video, VideoShape, VideoSource};

use crate::error::Result;

/// Per-sprite, per-frame probability of moving one cell.
pub const DRIFT: f64 = 0.05;

pub fn synthesize(
    prompt: &Prompt,
    symbols: &SymbolConfig,
    shape: VideoShape,
    style: &SceneStyle,
    rng: &mut impl Rng,
) -> Result<Frames> {
    let required = symbols.required(prompt)?;
    let (h, w) = (shape.height, shape.width);
    let mut free: Vec<usize> = (0..h * w).collect();
    free.shuffle(rng);
    let mut sprites: Vec<(Symbol, usize)> = Vec::new();
    for s in required {
        if rng.gen_bool(style.coverage.clamp(0.0, 1.0)) {
            if let Some(pos) = free.pop() {
                sprites.push((s, pos));
            }
        }
    }
    // Flicker only shows symbols already in the scene, so it hurts
    // smoothness without changing which items appear.
    let mut palette = vec![symbols.background];
    palette.extend(sprites.iter().map(|&(s, _)| s));
    let mut frames = Frames::filled(shape, symbols.background);
    for t in 0..shape.frames {
        if t > 0 {
            for i in 0..sprites.len() {
                if !rng.gen_bool(DRIFT) {
                    continue;
                }
                let (y, x) = (sprites[i].1 / w, sprites[i].1 % w);
                let target = match rng.gen_range(0..4) {
                    0 if y > 0 => (y - 1) * w + x,
                    1 if y + 1 < h => (y + 1) * w + x,
                    2 if x > 0 => y * w + x - 1,
                    3 if x + 1 < w => y * w + x + 1,
                    _ => continue,
                };
                if sprites.iter().all(|&(_, p)| p != target) {
                    sprites[i].1 = target;
                }
            }
        }
        for &(s, pos) in &sprites {
            frames.set(t, pos / w, pos % w, s);
        }
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(style.jitter.clamp(0.0, 1.0)) {
                    frames.set(t, y, x, *palette.choose(rng).expect("background is in the palette"));
                }
                if !symbols.artifacts.is_empty() && rng.gen_bool(style.artifact_rate.clamp(0.0, 1.0)) {
                    frames.set(t, y, x, *symbols.artifacts.choose(rng).expect("non-empty"));
                }
            }
        }
    }
    Ok(frames)
}

/// A synthesized video with a fresh id drawn from `rng`.
pub fn synth_video(
    prompt: &Prompt,
    symbols: &SymbolConfig,
    shape: VideoShape,
    style: &SceneStyle,
    source: VideoSource,
    rng: &mut impl Rng,
) -> Result<Video> {
    let id = format!("{}-{:016x}", if source == VideoSource::Real { "real" } else { "vid" }, rng.gen::<u64>());
    let frames = synthesize(prompt, symbols, shape, style, rng)?;
    Ok(Video { id, prompt_id: prompt.id.clone(), source, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hfalign_core::oracle::{metric_fidelity, metric_semantic, metric_smoothness};
    use hfalign_core::{CategoryLists, OracleRubric, Oracle, Label};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Oracle, Prompt) {
        let symbols = SymbolConfig::round_robin(16, &CategoryLists::builtin()).unwrap();
        let prompt = Prompt {
            id: "p".into(),
            subjects: vec!["waiter".into(), "gerbil".into()],
            scene: "desert".into(),
            action: "nod".into(),
            caption: "waiter and gerbil nod desert".into(),
        };
        (Oracle::new(OracleRubric::default(), symbols).unwrap(), prompt)
    }

    #[test]
    fn reference_style_is_good_everywhere() {
        let (oracle, prompt) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut good = 0;
        for _ in 0..50 {
            let v = synth_video(&prompt, &oracle.symbols, VideoShape::default(), &SceneStyle::REFERENCE, VideoSource::Real, &mut rng).unwrap();
            assert_eq!(metric_semantic(&v, &oracle.symbols.required(&prompt).unwrap()), 1.0);
            assert_eq!(metric_fidelity(&v, &oracle.symbols.artifacts), 1.0);
            good += usize::from(oracle.labels(&v, &prompt).unwrap() == [Label::Good; 3]);
        }
        assert!(good >= 45, "{good}");
    }

    #[test]
    fn noise_lowers_the_metrics() {
        let (oracle, prompt) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = SceneStyle { coverage: 0.5, jitter: 0.2, artifact_rate: 0.2 };
        let (mut sem, mut smooth, mut fid) = (0.0, 0.0, 0.0);
        for _ in 0..50 {
            let v = synth_video(&prompt, &oracle.symbols, VideoShape::default(), &noisy, VideoSource::Synthesized, &mut rng).unwrap();
            let m = oracle.metrics(&v, &prompt).unwrap();
            sem += m.semantic / 50.0;
            smooth += metric_smoothness(&v).unwrap() / 50.0;
            fid += m.fidelity / 50.0;
        }
        assert!(smooth < 0.8 && fid < 0.9, "{smooth} {fid}");
        assert!(sem < 1.0);
    }

    #[test]
    fn same_rng_same_video() {
        let (oracle, prompt) = setup();
        let style = SceneStyle { coverage: 0.7, jitter: 0.1, artifact_rate: 0.05 };
        let a = synth_video(&prompt, &oracle.symbols, VideoShape::default(), &style, VideoSource::Synthesized, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = synth_video(&prompt, &oracle.symbols, VideoShape::default(), &style, VideoSource::Synthesized, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
