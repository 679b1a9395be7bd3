use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneInstance;
use crate::error::{Error, Result};

/// OCR noise model: per-character substitution and whole-word drops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub char_sub_rate: f64,
    pub word_drop_rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(char_sub_rate: f64, word_drop_rate: f64, seed: u64) -> Result<Self> {
        let spec = CorruptionSpec {
            char_sub_rate,
            word_drop_rate,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("char_sub_rate", self.char_sub_rate),
            ("word_drop_rate", self.word_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.char_sub_rate == 0.0 && self.word_drop_rate == 0.0
    }
}

// FNV-1a; std's hasher is not stable across releases.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn replacement(c: char, rng: &mut impl Rng) -> char {
    if c.is_ascii_digit() {
        loop {
            let d = char::from(b'0' + rng.gen_range(0..10u8));
            if d != c {
                return d;
            }
        }
    }
    loop {
        let l = char::from(b'a' + rng.gen_range(0..26u8));
        if l != c {
            return l;
        }
    }
}

/// Replaces exactly one character of `word` with a different character of
/// the same class (digit for digit, letter otherwise).
pub fn substitute_one(word: &str, rng: &mut impl Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return String::new();
    }
    let pos = rng.gen_range(0..chars.len());
    chars
        .iter()
        .enumerate()
        .map(|(i, &c)| if i == pos { replacement(c, rng) } else { c })
        .collect()
}

fn substitute_chars(word: &str, rate: f64, rng: &mut impl Rng) -> String {
    word.chars()
        .map(|c| {
            if rate > 0.0 && rng.gen_bool(rate) {
                replacement(c, rng)
            } else {
                c
            }
        })
        .collect()
}

/// Applies OCR noise to the scene-text tokens. The visual grid and the gold
/// answers are left untouched. The result depends only on the scene id and
/// the spec.
pub fn corrupt_ocr(scene: &SceneInstance, spec: &CorruptionSpec) -> SceneInstance {
    let mut out = scene.clone();
    if spec.is_identity() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&scene.id));
    out.tokens = scene
        .tokens
        .iter()
        .filter_map(|t| {
            if spec.word_drop_rate > 0.0 && rng.gen_bool(spec.word_drop_rate) {
                return None;
            }
            let mut t = t.clone();
            t.word = substitute_chars(&t.word, spec.char_sub_rate, &mut rng);
            Some(t)
        })
        .collect();
    out
}
