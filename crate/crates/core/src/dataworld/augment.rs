//! Answer-preserving training augmentation: word substitution within a
//! category, whole-layout translation and vertical flips.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SceneInstance, VisualGrid};
use crate::geometry::BBox;
use crate::vocab::{is_number, PHRASES, WORLD_WORDS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability that a scene is augmented at all.
    pub prob: f64,
    /// Per-word probability of replacing a non-phrase word or number with
    /// another of the same length.
    pub substitute_prob: f64,
    pub translate: bool,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            prob: 0.0,
            substitute_prob: 0.5,
            translate: true,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn enabled(prob: f64) -> Self {
        AugmentConfig {
            prob,
            ..AugmentConfig::default()
        }
    }
}

fn phrase_words() -> HashSet<&'static str> {
    PHRASES.iter().flat_map(|p| p.split(' ')).collect()
}

fn replacement(word: &str, taken: &HashSet<String>, phrase: &HashSet<&str>, rng: &mut impl Rng) -> Option<String> {
    let n = word.chars().count();
    if is_number(word) {
        let lo = 10u32.pow(n as u32 - 1);
        let hi = 10u32.pow(n as u32) - 1;
        for _ in 0..20 {
            let w = rng.gen_range(lo.max(1)..=hi).to_string();
            if !taken.contains(&w) {
                return Some(w);
            }
        }
        return None;
    }
    let pool: Vec<&str> = WORLD_WORDS
        .iter()
        .copied()
        .filter(|w| w.chars().count() == n && !phrase.contains(w) && !taken.contains(*w))
        .collect();
    pool.choose(rng).map(|w| w.to_string())
}

fn swap_question_word(question: &mut [String], a: &str, b: &str) {
    for w in question.iter_mut() {
        if w == a {
            *w = b.to_string();
        } else if w == b {
            *w = a.to_string();
        }
    }
}

/// Returns a transformed copy whose answer is still correct. Gold answer
/// strings are rewritten with the same word map. Grid cells are re-rendered
/// from the moved boxes.
pub fn augment(scene: &SceneInstance, cfg: &AugmentConfig, rng: &mut impl Rng) -> SceneInstance {
    let mut out = scene.clone();
    if cfg.prob <= 0.0 || !rng.gen_bool(cfg.prob.min(1.0)) {
        return out;
    }

    let phrase = phrase_words();
    let mut taken: HashSet<String> = scene.tokens.iter().map(|t| t.word.clone()).collect();
    let mut map: HashMap<String, String> = HashMap::new();
    for t in &scene.tokens {
        if phrase.contains(t.word.as_str()) || map.contains_key(&t.word) || !rng.gen_bool(cfg.substitute_prob) {
            continue;
        }
        if let Some(r) = replacement(&t.word, &taken, &phrase, rng) {
            taken.insert(r.clone());
            map.insert(t.word.clone(), r);
        }
    }
    let remap = |w: &str| map.get(w).cloned().unwrap_or_else(|| w.to_string());
    for t in &mut out.tokens {
        t.word = remap(&t.word);
    }
    out.answer_tokens = scene.answer_tokens.iter().map(|w| remap(w)).collect();
    out.answers = scene
        .answers
        .iter()
        .map(|a| a.split(' ').map(remap).collect::<Vec<_>>().join(" "))
        .collect();

    let mut moved = false;
    if rng.gen_bool(cfg.flip_prob) {
        for t in &mut out.tokens {
            let b = t.bbox;
            t.bbox = BBox::new(b.x1, 1.0 - b.y2, b.x2, 1.0 - b.y1);
        }
        swap_question_word(&mut out.question, "top", "bottom");
        moved = true;
    }
    if cfg.translate && !out.tokens.is_empty() {
        let (lo_x, lo_y, hi_x, hi_y) = out.tokens.iter().fold((1.0f64, 1.0f64, 0.0f64, 0.0f64), |a, t| {
            (a.0.min(t.bbox.x1), a.1.min(t.bbox.y1), a.2.max(t.bbox.x2), a.3.max(t.bbox.y2))
        });
        let dx = rng.gen_range(-lo_x..=(1.0 - hi_x).max(-lo_x));
        let dy = rng.gen_range(-lo_y..=(1.0 - hi_y).max(-lo_y));
        for t in &mut out.tokens {
            let b = t.bbox;
            t.bbox = BBox::new(
                (b.x1 + dx).clamp(0.0, 1.0),
                (b.y1 + dy).clamp(0.0, 1.0),
                (b.x2 + dx).clamp(0.0, 1.0),
                (b.y2 + dy).clamp(0.0, 1.0),
            );
        }
        moved = true;
    }
    if moved {
        out.visual_grid = VisualGrid::render(scene.visual_grid.size(), &out.tokens);
    }
    out
}
