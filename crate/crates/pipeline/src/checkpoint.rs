//! Versioned, self-describing JSON checkpoints.
//!
//! ```json
//! {"version": 1, "kind": "generator", "body": {...}}
//! ```
//!
//! The body carries the model dimensions, the caption vocabulary (and, for
//! critics, the answer vocabulary) and every parameter tensor by name.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hfalign_core::CaptionTokenizer;

use crate::error::{PipelineError, Result};
use crate::params::ParamSet;
use crate::toygen::{GenDims, GenModel};

pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    body: T,
}

pub fn to_string<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    Ok(serde_json::to_string(&Envelope { version: VERSION, kind: kind.to_string(), body })?)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PipelineError::Checkpoint("missing `version` field".into()))?;
    if version != u64::from(VERSION) {
        return Err(PipelineError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let env: Envelope<T> = serde_json::from_value(raw)?;
    if env.kind != kind {
        return Err(PipelineError::Checkpoint(format!("file holds a `{}` checkpoint, expected `{kind}`", env.kind)));
    }
    Ok(env.body)
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: &str, body: &T) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_string(kind, body)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_str(kind, &text)
}

#[derive(Serialize, Deserialize)]
struct GenBody {
    dims: GenDims,
    caption_vocab: Vec<String>,
    params: ParamSet,
}

pub const GENERATOR: &str = "generator";

impl GenModel {
    pub fn to_checkpoint(&self) -> Result<String> {
        to_string(
            GENERATOR,
            &GenBody { dims: self.dims, caption_vocab: self.tokenizer.words().to_vec(), params: self.params.clone() },
        )
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let body: GenBody = from_str(GENERATOR, text)?;
        let tokenizer = CaptionTokenizer::from_words(body.caption_vocab)?;
        let expected = GenModel::zeros(body.dims, tokenizer);
        if !expected.params.same_layout(&body.params) {
            return Err(PipelineError::Checkpoint("parameter layout does not match the stored dimensions".into()));
        }
        Ok(GenModel { params: body.params, ..expected })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_checkpoint(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hfalign_core::VideoShape;

    fn model() -> GenModel {
        let dims = GenDims { shape: VideoShape::new(2, 2, 2), vocab_size: 4, embed_dim: 3, hidden_dim: 5 };
        GenModel::init(dims, CaptionTokenizer::new(["waiter", "ice rink"]), 8)
    }

    #[test]
    fn generator_round_trips_exactly() {
        let m = model();
        let back = GenModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.json");
        model().save(&path).unwrap();
        assert_eq!(GenModel::load(&path).unwrap(), model());
    }

    #[test]
    fn wrong_version_and_kind_are_rejected() {
        let text = model().to_checkpoint().unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(GenModel::from_checkpoint(&bumped).unwrap_err().to_string().contains("version"));
        let other = text.replacen("\"generator\"", "\"critic\"", 1);
        assert!(GenModel::from_checkpoint(&other).unwrap_err().to_string().contains("critic"));
    }
}
