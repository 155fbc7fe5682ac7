//! Word-level tokenizer for captions and critic questions.
//!
//! Canonical text is lowercase words (`[a-z0-9'-]+`) separated by single
//! spaces, with the punctuation marks `. , ; : ! ?` attached to the word
//! before them. Canonical text over the vocabulary round-trips exactly
//! through [`CaptionTokenizer::encode`] and [`CaptionTokenizer::decode`].

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::types::Dimension;

pub const UNK: &str = "<unk>";
const PUNCT: [char; 6] = ['.', ',', ';', ':', '!', '?'];

/// Words used by the phrase, refinement and question templates.
pub const TEMPLATE_WORDS: &[&str] = &[
    "a", "an", "and", "the", "in", "inside", "at", "of", "on", "with", "while", "where", "who", "one",
    "shown", "filmed", "captured", "steady", "shot", "clear", "detail", "scene", "video", "calm",
    "camera", "view", "wide", "close", "together", "does", "match", "its", "caption", "is", "motion",
    "smooth", "how", "clean", "visual", "fidelity", "this",
];

/// The fixed question asked for each dimension.
pub fn question_text(dimension: Dimension) -> &'static str {
    match dimension {
        Dimension::SemanticConsistency => "does the video match its caption?",
        Dimension::MotionSmoothness => "is the motion in the video smooth?",
        Dimension::VideoFidelity => "how clean is the visual fidelity of the video?",
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' || c == '-'
}

/// Splits text into word and punctuation pieces. Fails on characters
/// outside the canonical alphabet.
pub fn split_pieces(text: &str) -> Result<Vec<&str>> {
    let mut pieces = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            pieces.push(&text[s..i]);
        }
        if PUNCT.contains(&c) {
            pieces.push(&text[i..i + c.len_utf8()]);
        } else if c != ' ' {
            return Err(CoreError::Tokenize(format!("unsupported character {c:?} in {text:?}")));
        }
    }
    if let Some(s) = start {
        pieces.push(&text[s..]);
    }
    Ok(pieces)
}

/// A fixed word vocabulary. Id 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl CaptionTokenizer {
    /// Builds a vocabulary from `<unk>`, the punctuation marks, the
    /// template words and then `extra`, keeping first occurrences.
    pub fn new<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = CaptionTokenizer { words: Vec::new(), index: HashMap::new() };
        tok.push(UNK);
        for p in PUNCT {
            tok.push(&p.to_string());
        }
        for w in TEMPLATE_WORDS {
            tok.push(w);
        }
        for phrase in extra {
            // Items may be multi-word; every piece becomes a vocabulary word.
            for w in phrase.as_ref().split(' ').filter(|w| !w.is_empty()) {
                tok.push(w);
            }
        }
        tok
    }

    /// Rebuilds a tokenizer from a stored word list (as found in checkpoints).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(CoreError::Tokenize("vocabulary must start with <unk>".into()));
        }
        let mut tok = CaptionTokenizer { words: Vec::new(), index: HashMap::new() };
        for w in &words {
            if tok.index.contains_key(w) {
                return Err(CoreError::Tokenize(format!("duplicate vocabulary word `{w}`")));
            }
            tok.push(w);
        }
        Ok(tok)
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len() as u32);
            self.words.push(word.to_string());
        }
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

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_pieces(text)?
            .into_iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| CoreError::Tokenize(format!("word `{p}` is not in the caption vocabulary")))
            })
            .collect()
    }

    /// Encoding that maps unknown words and characters to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        let lowered = text.to_lowercase();
        let mut out = Vec::new();
        for raw in lowered.split_whitespace() {
            match split_pieces(raw) {
                Ok(pieces) => out.extend(pieces.into_iter().map(|p| self.id(p).unwrap_or(0))),
                Err(_) => out.push(0),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut text = String::new();
        for &id in ids {
            let word = self.words.get(id as usize).map_or(UNK, String::as_str);
            let is_punct = word.len() == 1 && word.chars().all(|c| PUNCT.contains(&c));
            if !text.is_empty() && !is_punct {
                text.push(' ');
            }
            text.push_str(word);
        }
        text
    }

    /// True if `text` is canonical and fully covered by the vocabulary.
    pub fn round_trips(&self, text: &str) -> bool {
        self.encode(text).map(|ids| self.decode(&ids) == text).unwrap_or(false)
    }
}
