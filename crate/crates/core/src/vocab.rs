//! Closed vocabularies of the synthetic world and the shared token vocabulary.
//!
//! One [`Vocab`] serves both models. The text encoder maps each scene word to
//! a single id (`[NUM]` for numbers, `[UNK]` for anything unknown). The
//! generator uses finer pieces: known words stay whole, numbers become three
//! zero-padded digit tokens, and anything else is spelled out character by
//! character after a `[W]` marker so corrupted words remain visible to it.

use std::collections::HashMap;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "black", "white", "orange", "purple",
];

/// Multi-word phrases that can appear as a single colored group in a scene.
pub const PHRASES: [&str; 30] = [
    "united states of america",
    "new york city",
    "stop sign",
    "coca cola",
    "fire station",
    "no parking",
    "one way",
    "exit only",
    "fresh bread",
    "hot coffee",
    "north street",
    "main street",
    "city hall",
    "open late",
    "free wifi",
    "police car",
    "bus stop",
    "post office",
    "ice cream",
    "pizza house",
    "book store",
    "super market",
    "grand hotel",
    "royal bank",
    "high school",
    "private road",
    "dead end",
    "sale today",
    "happy birthday",
    "welcome home",
];

/// The 200 scene-text words. Every phrase word is included.
pub const WORLD_WORDS: [&str; 200] = [
    "united", "states", "of", "america", "new", "york", "city", "stop", "sign", "coca", "cola",
    "fire", "station", "no", "parking", "one", "way", "exit", "only", "fresh", "bread", "hot",
    "coffee", "north", "street", "main", "hall", "open", "late", "free", "wifi", "police",
    "car", "bus", "post", "office", "ice", "cream", "pizza", "house", "book", "store", "super",
    "market", "grand", "hotel", "royal", "bank", "high", "school", "private", "road", "dead",
    "end", "sale", "today", "happy", "birthday", "welcome", "home", "apple", "bridge",
    "candle", "doctor", "engine", "forest", "garden", "harbor", "island", "jacket", "kitchen",
    "ladder", "needle", "pepper", "rocket", "silver", "tiger", "umbrella", "valley", "window",
    "zebra", "anchor", "basket", "castle", "dragon", "eagle", "falcon", "guitar", "hammer",
    "igloo", "jungle", "kettle", "lemon", "magnet", "nickel", "orchid", "parrot", "quartz",
    "rabbit", "saddle", "tomato", "violin", "walnut", "barrel", "cactus", "desert", "feather",
    "glacier", "helmet", "lantern", "meadow", "napkin", "oyster", "pillow", "ribbon", "shovel",
    "throne", "vessel", "wagon", "blanket", "cherry", "dolphin", "elbow", "fossil", "goblet",
    "hollow", "insect", "jigsaw", "koala", "lizard", "mitten", "nectar", "olive", "pebble",
    "quiver", "raisin", "salmon", "tunnel", "velvet", "willow", "acorn", "beacon", "cobalt",
    "denim", "ember", "fabric", "gravel", "hazel", "ivory", "jasmine", "kernel", "lotus",
    "marble", "nutmeg", "opal", "plaza", "quill", "radish", "spruce", "tulip", "utopia",
    "vapor", "wizard", "almond", "bistro", "canyon", "donut", "estate", "fiesta", "gadget",
    "hostel", "indigo", "jewel", "kiosk", "lagoon", "motel", "noodle", "oasis", "pastry",
    "quest", "resort", "studio", "tavern", "unicorn", "vista", "waffle", "arcade", "bakery",
    "cinema", "diner", "empire", "ferry", "gallery", "hangar", "inn", "jetty", "lodge",
    "museum", "palace", "quarry",
];

/// Words the question templates are built from.
pub const QUESTION_WORDS: [&str; 15] = [
    "what", "is", "the", "number", "word", "in", "large", "small", "at", "top", "bottom",
    "left", "right", "phrase", "?",
];

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const NUM: &str = "[NUM]";
pub const SPELL: &str = "[W]";

const SPECIALS: [&str; 8] = [PAD, CLS, SEP, UNK, BOS, EOS, NUM, SPELL];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut push = |t: String| {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        };
        SPECIALS.iter().for_each(|t| push(t.to_string()));
        QUESTION_WORDS.iter().for_each(|t| push(t.to_string()));
        COLORS.iter().for_each(|t| push(t.to_string()));
        WORLD_WORDS.iter().for_each(|t| push(t.to_string()));
        DIGITS.iter().for_each(|t| push(t.to_string()));
        ('a'..='z').chain('0'..='9').for_each(|c| push(char_token(c)));
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn special(&self, token: &str) -> usize {
        self.index[token]
    }

    /// Single id per word for the text encoder.
    pub fn encoder_id(&self, word: &str) -> usize {
        if is_number(word) {
            return self.special(NUM);
        }
        match self.id(word) {
            Some(id) if !is_piece_only(self.token(id)) => id,
            _ => self.special(UNK),
        }
    }

    /// Generator pieces for one word.
    pub fn pieces(&self, word: &str) -> Vec<usize> {
        if is_number(word) && word.len() <= 3 {
            let padded = format!("{word:0>3}");
            return padded.chars().map(|c| self.index[&c.to_string()]).collect();
        }
        if let Some(id) = self.id(word) {
            if !is_piece_only(word) {
                return vec![id];
            }
        }
        let mut out = vec![self.special(SPELL)];
        for c in word.chars() {
            out.push(self.id(&char_token(c)).unwrap_or_else(|| self.special(UNK)));
        }
        out
    }

    /// Turns generator pieces back into words. Digit runs are read in
    /// groups of three; `[W]` starts a spelled word that runs until the
    /// next non-character piece. Specials other than `[UNK]` are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        let mut words = Vec::new();
        let mut digits = String::new();
        let mut spelled: Option<String> = None;
        fn flush_digits(digits: &mut String, words: &mut Vec<String>) {
            while !digits.is_empty() {
                let take = digits.len().min(3);
                let group: String = digits.drain(..take).collect();
                let trimmed = group.trim_start_matches('0');
                words.push(if trimmed.is_empty() { "0".to_string() } else { trimmed.to_string() });
            }
        }
        for &id in ids {
            let tok = self.token(id);
            if let Some(c) = number_digit(tok) {
                if let Some(s) = spelled.take() {
                    if !s.is_empty() {
                        words.push(s);
                    }
                }
                digits.push(c);
                continue;
            }
            if let Some(c) = spelled_char(tok) {
                flush_digits(&mut digits, &mut words);
                // a stray character piece starts an implicit spelled word
                spelled.get_or_insert_with(String::new).push(c);
                continue;
            }
            if let Some(s) = spelled.take() {
                if !s.is_empty() {
                    words.push(s);
                }
            }
            flush_digits(&mut digits, &mut words);
            if tok == SPELL {
                spelled = Some(String::new());
            } else if tok == UNK || !SPECIALS.contains(&tok) {
                words.push(tok.to_string());
            }
        }
        if let Some(s) = spelled.take() {
            if !s.is_empty() {
                words.push(s);
            }
        }
        flush_digits(&mut digits, &mut words);
        words
    }
}

pub fn is_number(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_digit())
}

fn char_token(c: char) -> String {
    format!("#{c}")
}

fn is_piece_only(tok: &str) -> bool {
    number_digit(tok).is_some() || spelled_char(tok).is_some()
}

fn number_digit(tok: &str) -> Option<char> {
    let mut chars = tok.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_digit() => Some(c),
        _ => None,
    }
}

fn spelled_char(tok: &str) -> Option<char> {
    let mut chars = tok.chars();
    match (chars.next(), chars.next(), chars.next()) {
        (Some('#'), Some(c), None) => Some(c),
        _ => None,
    }
}
