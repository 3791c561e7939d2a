//! Semantic embedding of the scene: caption, tokens, encoder and cache.

pub mod caption;
pub mod encoder;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use caption::{all_descriptors, caption_from_scene, caption_text, Caption, Vocab, MAX_TOKENS, PAD_ID};
pub use encoder::{
    attention, attention_with_weights, encode_image_features, encode_semantics, encode_semantics_with, lora_attention,
    softmax_rows, AttentionBlock, EncoderConfig, EncoderWeights, SemanticEmbedding,
};

/// Holds the last embedding and refreshes it every `k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCache {
    pub k: u64,
    pub last: Option<SemanticEmbedding>,
    pub recomputes: u64,
}

impl TokenCache {
    pub fn new(k: u64) -> Self {
        Self { k: k.max(1), last: None, recomputes: 0 }
    }

    /// Recomputes iff `step % k == 0`. An empty cache also forces a
    /// recompute so a value always exists.
    pub fn get(&mut self, step: u64, recompute: impl FnOnce() -> Result<SemanticEmbedding>) -> Result<SemanticEmbedding> {
        match &self.last {
            Some(e) if step % self.k != 0 => Ok(e.clone()),
            _ => {
                let e = recompute()?;
                self.recomputes += 1;
                self.last = Some(e.clone());
                Ok(e)
            }
        }
    }

    pub fn clear(&mut self) {
        self.last = None;
    }
}
