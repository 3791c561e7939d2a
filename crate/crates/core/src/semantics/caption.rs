//! Template captions over a closed grammar and their tokenizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{CurvatureClass, CurveDirection, DistanceClass, SceneDescriptor};

pub const MAX_TOKENS: usize = 16;
pub const PAD_ID: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";

/// Every word the grammar can emit, in id order. Id 0 is padding.
const WORDS: &[&str] = &[
    PAD_TOKEN, "straight", "gently", "sharp", "curved", "road", "to", "the", "left", "right", "with",
    "without", "lane", "markings", ",", "no", "obstacles", "obstacle", "near", "at", "mid",
    "distance", "far", "ahead", "not", "visible",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(WORDS.iter().map(|w| w.to_string()).collect())
            .expect("built-in vocabulary is well formed")
    }
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Config(format!("vocabulary id 0 must be {PAD_TOKEN}")));
        }
        let mut ids = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Word to id map as a JSON object.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.ids).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ids: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut words = vec![String::new(); ids.len()];
        for (w, &i) in &ids {
            let slot = words
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("vocabulary ids must be dense, got {i}")))?;
            *slot = w.clone();
        }
        Self::from_words(words)
    }

    /// Splits on whitespace with commas as separate tokens, then pads or
    /// truncates to `MAX_TOKENS`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(MAX_TOKENS);
        for raw in text.split_whitespace() {
            let (word, comma) = match raw.strip_suffix(',') {
                Some(w) => (w, true),
                None => (raw, false),
            };
            for w in std::iter::once(word).chain(comma.then_some(",")) {
                if w.is_empty() {
                    continue;
                }
                let id = self.id(w).ok_or_else(|| Error::InvalidArgument(format!("unknown word {w:?}")))?;
                out.push(id);
            }
        }
        out.truncate(MAX_TOKENS);
        out.resize(MAX_TOKENS, PAD_ID);
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut text = String::new();
        for &id in ids.iter().filter(|&&id| id != PAD_ID) {
            let w = self.word(id).ok_or_else(|| Error::InvalidArgument(format!("token id {id} out of range")))?;
            if !text.is_empty() && w != "," {
                text.push(' ');
            }
            text.push_str(w);
        }
        Ok(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    /// Length `MAX_TOKENS`, padded with `PAD_ID`.
    pub token_ids: Vec<usize>,
}

impl Caption {
    pub fn from_text(text: &str, vocab: &Vocab) -> Result<Self> {
        Ok(Self { text: text.to_string(), token_ids: vocab.tokenize(text)? })
    }

    /// Ids before the first pad.
    pub fn content_ids(&self) -> &[usize] {
        let n = self.token_ids.iter().position(|&t| t == PAD_ID).unwrap_or(self.token_ids.len());
        &self.token_ids[..n]
    }
}

fn road_phrase(desc: &SceneDescriptor) -> String {
    let side = match desc.curve_direction {
        CurveDirection::Left => " to the left",
        CurveDirection::Right => " to the right",
        CurveDirection::None => "",
    };
    match desc.curvature_class {
        CurvatureClass::Straight => "straight road".to_string(),
        CurvatureClass::GentleCurve => format!("gently curved road{side}"),
        CurvatureClass::SharpCurve => format!("sharp curved road{side}"),
    }
}

pub fn caption_text(desc: &SceneDescriptor) -> String {
    let road = road_phrase(desc);
    let distance = match desc.obstacle_distance_class {
        DistanceClass::Near => Some("near"),
        DistanceClass::Mid => Some("at mid distance"),
        DistanceClass::Far => Some("far ahead"),
        DistanceClass::None => None,
    };
    match (desc.obstacle_ahead, distance) {
        (true, Some(dist)) => {
            let mut s = format!("{road} with obstacle {dist}");
            if !desc.lane_marking_visible {
                s.push_str(", lane markings not visible");
            }
            s
        }
        _ if desc.lane_marking_visible => format!("{road} with lane markings, no obstacles"),
        _ => format!("{road} without lane markings, no obstacles"),
    }
}

pub fn caption_from_scene(desc: &SceneDescriptor, vocab: &Vocab) -> Caption {
    Caption::from_text(&caption_text(desc), vocab).expect("template words are in the vocabulary")
}

/// Every descriptor the grammar distinguishes.
pub fn all_descriptors() -> Vec<SceneDescriptor> {
    let mut out = Vec::new();
    for curvature_class in [CurvatureClass::Straight, CurvatureClass::GentleCurve, CurvatureClass::SharpCurve] {
        for curve_direction in [CurveDirection::Left, CurveDirection::Right, CurveDirection::None] {
            for obstacle_distance_class in [DistanceClass::Near, DistanceClass::Mid, DistanceClass::Far, DistanceClass::None] {
                for obstacle_ahead in [false, true] {
                    for lane_marking_visible in [false, true] {
                        out.push(SceneDescriptor {
                            curvature_class,
                            curve_direction,
                            obstacle_ahead,
                            obstacle_distance_class,
                            lane_marking_visible,
                        });
                    }
                }
            }
        }
    }
    out
}
