//! Training targets for the answer location module.
//!
//! Answer words are matched exactly (after light normalization) against the
//! scene-text words, word by word. Every matching token is tagged 1 and the
//! answer region is the smallest box enclosing all matched tokens, or the
//! zero box when nothing matches.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataworld::SceneTextToken;
use crate::geometry::{union_box, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmTargets {
    pub answer_box: BBox,
    pub tags: Vec<f64>,
    pub matched_indices: BTreeSet<usize>,
}

/// Lowercases and strips leading/trailing punctuation.
pub fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn build_targets(answer: &[String], tokens: &[SceneTextToken]) -> AlmTargets {
    let wanted: HashSet<String> = answer
        .iter()
        .flat_map(|a| a.split_whitespace())
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect();
    let matched_indices: BTreeSet<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| wanted.contains(&normalize_word(&t.word)))
        .map(|(i, _)| i)
        .collect();
    let tags = (0..tokens.len())
        .map(|i| if matched_indices.contains(&i) { 1.0 } else { 0.0 })
        .collect();
    let answer_box = matched_indices
        .iter()
        .map(|&i| tokens[i].bbox)
        .reduce(|a, b| union_box(&a, &b))
        .unwrap_or(BBox::ZERO);
    AlmTargets {
        answer_box,
        tags,
        matched_indices,
    }
}
