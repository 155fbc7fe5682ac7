//! Prompt composition from category selection lists, and optional caption
//! refinement through an external text model.

use std::collections::HashSet;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{CoreError, Result};
use crate::tokenizer::CaptionTokenizer;
use crate::types::Prompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLists {
    pub humans: Vec<String>,
    pub animals: Vec<String>,
    pub places: Vec<String>,
    pub simple_actions: Vec<String>,
    pub complex_actions: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for CategoryLists {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CategoryLists {
    /// The lists shipped with the project (`configs/categories.json`).
    pub fn builtin() -> Self {
        Self {
            humans: strings(&["waiter", "farmer", "chef", "pilot", "dancer", "nurse", "painter", "sailor", "child", "astronaut"]),
            animals: strings(&["gerbil", "horse", "parrot", "tiger", "dolphin", "rabbit", "owl", "fox", "turtle", "penguin"]),
            places: strings(&["spacecraft", "desert", "kitchen", "forest", "library", "beach", "subway", "meadow", "harbor", "ice rink"]),
            simple_actions: strings(&["nod", "walk", "jump", "wave", "sit", "run", "turn", "smile"]),
            complex_actions: strings(&["juggle", "paint a mural", "play chess", "ride a bicycle", "cook soup", "climb a ladder"]),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read categories file {}: {e}", path.display())))?;
        let lists: CategoryLists = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("categories file {}: {e}", path.display())))?;
        lists.validate()?;
        Ok(lists)
    }

    fn named(&self) -> [(&'static str, &[String]); 5] {
        [
            ("humans", &self.humans),
            ("animals", &self.animals),
            ("places", &self.places),
            ("simple_actions", &self.simple_actions),
            ("complex_actions", &self.complex_actions),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in self.named() {
            if list.is_empty() {
                return Err(CoreError::Config(format!("category list `{name}` is empty")));
            }
            let mut seen = HashSet::new();
            for item in list {
                if !seen.insert(item) {
                    return Err(CoreError::Config(format!("category list `{name}` repeats `{item}`")));
                }
                if item.is_empty() || !crate::tokenizer::split_pieces(item).is_ok_and(|p| p.join(" ") == *item) {
                    return Err(CoreError::Config(format!(
                        "category item `{item}` in `{name}` must be lowercase words separated by single spaces"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every item in list order: humans, animals, places, simple, complex.
    pub fn all_items(&self) -> impl Iterator<Item = &String> {
        self.humans
            .iter()
            .chain(&self.animals)
            .chain(&self.places)
            .chain(&self.simple_actions)
            .chain(&self.complex_actions)
    }

    /// The caption tokenizer covering these lists plus the template words.
    pub fn tokenizer(&self) -> CaptionTokenizer {
        CaptionTokenizer::new(self.all_items())
    }

    /// Which list an item came from, if any.
    pub fn group_of(&self, item: &str) -> Option<&'static str> {
        self.named().into_iter().find(|(_, l)| l.iter().any(|i| i == item)).map(|(n, _)| n)
    }
}

/// Knobs the dataset-construction procedure leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    /// Probability of drawing two subjects instead of one.
    pub two_subject_prob: f64,
    /// Probability that the action comes from the complex list. `None`
    /// draws uniformly over the union of both action lists.
    #[serde(default)]
    pub complex_action_prob: Option<f64>,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self { two_subject_prob: 0.5, complex_action_prob: None }
    }
}

/// Joins the selected elements into the unrefined phrase,
/// `"<subject>[ and <subject>] <action> <scene>"`.
pub fn phrase(subjects: &[String], action: &str, scene: &str) -> String {
    format!("{} {action} {scene}", subjects.join(" and "))
}

/// Draws one prompt. A pure function of `(lists, config, seed)`; the
/// caption is the unrefined phrase.
pub fn compose_phrase(lists: &CategoryLists, config: &ComposeConfig, seed: u64) -> Result<Prompt> {
    lists.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("prompt-{:016x}", rng.gen::<u64>());

    let mut pool: Vec<&String> = lists.humans.iter().chain(&lists.animals).collect();
    let mut seen = HashSet::new();
    pool.retain(|s| seen.insert(*s));
    let wanted = if rng.gen_bool(config.two_subject_prob.clamp(0.0, 1.0)) { 2 } else { 1 };
    let subjects: Vec<String> = pool.choose_multiple(&mut rng, wanted.min(pool.len())).map(|s| (*s).clone()).collect();

    let scene = lists.places.choose(&mut rng).expect("validated non-empty").clone();
    let action = match config.complex_action_prob {
        Some(p) => {
            let list = if rng.gen_bool(p.clamp(0.0, 1.0)) { &lists.complex_actions } else { &lists.simple_actions };
            list.choose(&mut rng).expect("validated non-empty").clone()
        }
        None => {
            let n = lists.simple_actions.len() + lists.complex_actions.len();
            let i = rng.gen_range(0..n);
            lists.simple_actions.iter().chain(&lists.complex_actions).nth(i).expect("index in range").clone()
        }
    };
    let caption = phrase(&subjects, &action, &scene);
    Ok(Prompt { id, subjects, scene, action, caption })
}

/// A text-in/text-out model that turns a short phrase into a caption.
pub trait Refiner: Send + Sync {
    fn refine(&self, phrase: &str) -> std::result::Result<String, String>;
}

/// Refiner speaking a one-request/one-response HTTP contract: the phrase is
/// POSTed as `text/plain` to `endpoint`; the response body is the caption.
#[derive(Debug, Clone)]
pub struct HttpRefiner {
    pub endpoint: String,
    pub timeout: Duration,
}

impl Refiner for HttpRefiner {
    fn refine(&self, phrase: &str) -> std::result::Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut resp = agent
            .post(&self.endpoint)
            .header("content-type", "text/plain; charset=utf-8")
            .send(phrase)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

/// Refinement settings. With `deterministic_fallback` set (or no backend)
/// refinement never leaves the process.
#[derive(Default)]
pub struct RefinerClient {
    pub backend: Option<Box<dyn Refiner>>,
    pub deterministic_fallback: bool,
}

impl RefinerClient {
    pub fn fallback_only() -> Self {
        Self { backend: None, deterministic_fallback: true }
    }

    pub fn http(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            backend: Some(Box::new(HttpRefiner { endpoint: endpoint.into(), timeout })),
            deterministic_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub prompt: Prompt,
    pub used_fallback: bool,
    pub warning: Option<String>,
}

/// The deterministic caption used when no backend is available or its
/// output is rejected. Pure in `(prompt, seed)`.
pub fn fallback_caption(prompt: &Prompt, seed: u64) -> String {
    let subjects = prompt.subjects.join(" and the ");
    let (s, a, p) = (subjects.as_str(), prompt.action.as_str(), prompt.scene.as_str());
    match seed % 3 {
        0 => format!("the {s} {a} in the {p}, shown in one steady shot with clear detail."),
        1 => format!("a calm scene in the {p} where the {s} {a}, filmed with a steady camera."),
        _ => format!("inside the {p}, the {s} {a} while the camera is steady and clear."),
    }
}

fn normalize(text: &str) -> String {
    let lowered = text.trim().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Why a refined caption was not accepted, if it was not.
fn rejection(prompt: &Prompt, text: &str, tokenizer: &CaptionTokenizer) -> Option<String> {
    if let Some(missing) = prompt.items().find(|item| !text.contains(item)) {
        return Some(format!("refined caption omits `{missing}`"));
    }
    if !tokenizer.round_trips(text) {
        return Some("refined caption does not round-trip through the caption tokenizer".into());
    }
    None
}

/// Replaces the prompt's caption with a refined description that contains
/// every subject, the scene and the action.
pub fn refine(prompt: &Prompt, client: &RefinerClient, tokenizer: &CaptionTokenizer, seed: u64) -> RefineOutcome {
    let phrase = phrase(&prompt.subjects, &prompt.action, &prompt.scene);
    let mut warning = None;
    if let (Some(backend), false) = (&client.backend, client.deterministic_fallback) {
        match backend.refine(&phrase) {
            Ok(text) => {
                let text = normalize(&text);
                match rejection(prompt, &text, tokenizer) {
                    None => {
                        let mut refined = prompt.clone();
                        refined.caption = text;
                        return RefineOutcome { prompt: refined, used_fallback: false, warning: None };
                    }
                    Some(why) => warning = Some(why),
                }
            }
            Err(e) => warning = Some(format!("refiner request failed: {e}")),
        }
    }
    if let Some(w) = &warning {
        warn!(prompt = %prompt.id, "{w}; using template caption");
    }
    let mut refined = prompt.clone();
    refined.caption = fallback_caption(prompt, seed);
    RefineOutcome { prompt: refined, used_fallback: true, warning }
}
