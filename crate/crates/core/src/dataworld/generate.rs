use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corrupt::substitute_one;
use super::io::{Dataset, DatasetHeader, Split, DATASET_SCHEMA_VERSION};
use super::{
    Category, Color, FontSize, SceneInstance, SceneTextToken, Template, TokenAttributes, VisualGrid,
    WorldConfig,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::vocab::{PHRASES, WORLD_WORDS};

const SMALL_HEIGHT: f64 = 0.07;
const LARGE_HEIGHT: f64 = 0.11;
const SMALL_CHAR: f64 = 0.028;
const LARGE_CHAR: f64 = 0.042;
const MIN_WIDTH: f64 = 0.07;
const PHRASE_GAP: f64 = 0.015;
const PLACE_TRIES: usize = 300;
/// Minimum lead of the extreme token over the runner-up in position questions.
const POSITION_MARGIN: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct WorldSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates the train and test splits. Instance `i` of a split draws from
/// its own ChaCha stream, so the output depends only on `(config, seed)`.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<WorldSplits> {
    validate(config)?;
    let make = |split: Split, n: usize| -> Result<Dataset> {
        let instances = (0..n)
            .map(|i| generate_instance(config, seed, split, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            header: DatasetHeader {
                schema_version: DATASET_SCHEMA_VERSION,
                world_config: config.clone(),
                seed,
                split,
            },
            instances,
        })
    };
    Ok(WorldSplits {
        train: make(Split::Train, config.n_train)?,
        test: make(Split::Test, config.n_test)?,
    })
}

fn validate(config: &WorldConfig) -> Result<()> {
    if config.templates.is_empty() {
        return Err(Error::Config("world config lists no templates".into()));
    }
    if !(0.0..=1.0).contains(&config.ambiguity_fraction) {
        return Err(Error::Config("ambiguity_fraction must lie in [0, 1]".into()));
    }
    if config.min_tokens == 0 || config.min_tokens > config.max_tokens {
        return Err(Error::Config("need 0 < min_tokens <= max_tokens".into()));
    }
    if config.grid_size == 0 {
        return Err(Error::Config("grid_size must be positive".into()));
    }
    Ok(())
}

pub(crate) fn instance_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng
}

/// Token content before placement. A phrase occupies consecutive specs
/// that share `line`.
#[derive(Debug, Clone)]
struct Spec {
    word: String,
    attrs: TokenAttributes,
    line: Option<usize>,
}

struct Plan {
    question: Vec<String>,
    specs: Vec<Spec>,
    /// Indices into `specs` forming the answer, in reading order.
    answer: Vec<usize>,
    /// Position template constraint checked after placement.
    position: Option<(Side, Category, bool)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

impl Side {
    const ALL: [Side; 4] = [Side::Top, Side::Bottom, Side::Left, Side::Right];

    fn name(self) -> &'static str {
        match self {
            Side::Top => "top",
            Side::Bottom => "bottom",
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    /// Larger is more extreme.
    fn extremity(self, b: &BBox) -> f64 {
        let (cx, cy) = b.center();
        match self {
            Side::Top => -cy,
            Side::Bottom => cy,
            Side::Left => -cx,
            Side::Right => cx,
        }
    }
}

struct Words<'r> {
    rng: &'r mut ChaCha8Rng,
    used: HashSet<String>,
}

impl Words<'_> {
    fn word(&mut self) -> String {
        loop {
            let w = WORLD_WORDS.choose(self.rng).unwrap().to_string();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn number(&mut self) -> String {
        loop {
            let w = self.rng.gen_range(1..=999u32).to_string();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn of(&mut self, category: Category) -> String {
        match category {
            Category::Number => self.number(),
            Category::Word => self.word(),
        }
    }

    fn phrase(&mut self) -> Vec<String> {
        loop {
            let p = PHRASES.choose(self.rng).unwrap();
            let words: Vec<String> = p.split(' ').map(str::to_string).collect();
            if words.iter().all(|w| !self.used.contains(w)) {
                self.used.extend(words.iter().cloned());
                return words;
            }
        }
    }
}

fn random_attrs(rng: &mut ChaCha8Rng) -> TokenAttributes {
    TokenAttributes {
        color: *Color::ALL.choose(rng).unwrap(),
        category: if rng.gen_bool(0.5) { Category::Number } else { Category::Word },
        font_size: if rng.gen_bool(0.5) { FontSize::Small } else { FontSize::Large },
    }
}

fn other_color(rng: &mut ChaCha8Rng, c: Color) -> Color {
    loop {
        let o = *Color::ALL.choose(rng).unwrap();
        if o != c {
            return o;
        }
    }
}

fn q(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn plan(template: Template, ambiguous: bool, n_tokens: usize, rng: &mut ChaCha8Rng) -> Plan {
    let mut words = Words {
        rng,
        used: HashSet::new(),
    };
    let mut specs = Vec::new();
    let mut answer = vec![0];
    let mut position = None;
    let question;

    match template {
        Template::ColorCategory => {
            let target = random_attrs(words.rng);
            let (c, k) = (target.color, target.category);
            specs.push(Spec { word: words.of(k), attrs: target, line: None });
            if ambiguous {
                let mut a = random_attrs(words.rng);
                a.color = c;
                a.category = k.other();
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
                let mut b = random_attrs(words.rng);
                b.category = k;
                b.color = other_color(words.rng, c);
                specs.push(Spec { word: words.of(k), attrs: b, line: None });
            }
            while specs.len() < n_tokens {
                let mut a = random_attrs(words.rng);
                if a.color == c && a.category == k {
                    a.color = other_color(words.rng, c);
                }
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
            }
            question = q(&["what", "is", "the", k.name(), "in", c.name(), "?"]);
        }
        Template::SizeCategory => {
            let target = random_attrs(words.rng);
            let (s, k) = (target.font_size, target.category);
            specs.push(Spec { word: words.of(k), attrs: target, line: None });
            if ambiguous {
                let mut a = random_attrs(words.rng);
                a.font_size = s;
                a.category = k.other();
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
                let mut b = random_attrs(words.rng);
                b.category = k;
                b.font_size = s.other();
                specs.push(Spec { word: words.of(k), attrs: b, line: None });
            }
            while specs.len() < n_tokens {
                let mut a = random_attrs(words.rng);
                if a.font_size == s && a.category == k {
                    a.font_size = s.other();
                }
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
            }
            question = q(&["what", "is", "the", s.name(), k.name(), "?"]);
        }
        Template::Position => {
            let side = *Side::ALL.choose(words.rng).unwrap();
            let target = random_attrs(words.rng);
            let k = target.category;
            specs.push(Spec { word: words.of(k), attrs: target, line: None });
            // at least one competitor of the same category
            let mut b = random_attrs(words.rng);
            b.category = k;
            specs.push(Spec { word: words.of(k), attrs: b, line: None });
            while specs.len() < n_tokens {
                let a = random_attrs(words.rng);
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
            }
            position = Some((side, k, ambiguous));
            question = q(&["what", "is", "the", k.name(), "at", "the", side.name(), "?"]);
        }
        Template::ColorPhrase => {
            let mut target = random_attrs(words.rng);
            target.category = Category::Word;
            let c = target.color;
            let phrase = words.phrase();
            answer = (0..phrase.len()).collect();
            for w in phrase {
                specs.push(Spec { word: w, attrs: target, line: Some(0) });
            }
            if ambiguous {
                let mut a = random_attrs(words.rng);
                a.category = Category::Word;
                a.color = other_color(words.rng, c);
                for w in words.phrase() {
                    specs.push(Spec { word: w, attrs: a, line: Some(1) });
                }
                let mut b = random_attrs(words.rng);
                b.color = c;
                specs.push(Spec { word: words.of(b.category), attrs: b, line: None });
            }
            while specs.len() < n_tokens {
                let mut a = random_attrs(words.rng);
                a.color = other_color(words.rng, c);
                specs.push(Spec { word: words.of(a.category), attrs: a, line: None });
            }
            question = q(&["what", "is", "the", "phrase", "in", c.name(), "?"]);
        }
    }
    Plan {
        question,
        specs,
        answer,
        position,
    }
}

fn token_size(word: &str, size: FontSize) -> (f64, f64) {
    let n = word.chars().count() as f64;
    match size {
        FontSize::Small => ((n * SMALL_CHAR).max(MIN_WIDTH), SMALL_HEIGHT),
        FontSize::Large => ((n * LARGE_CHAR).max(MIN_WIDTH), LARGE_HEIGHT),
    }
}

fn overlaps_any(b: &BBox, placed: &[BBox]) -> bool {
    placed.iter().any(|p| p.intersection_area(b) > 0.0)
}

/// Places every spec without overlap. Phrase lines are laid out as a unit.
fn place(specs: &mut [Spec], rng: &mut ChaCha8Rng) -> Option<Vec<BBox>> {
    let mut boxes = vec![BBox::ZERO; specs.len()];
    let mut placed: Vec<BBox> = Vec::new();
    let mut i = 0;
    while i < specs.len() {
        let group: Vec<usize> = match specs[i].line {
            Some(line) => (i..specs.len()).take_while(|&j| specs[j].line == Some(line)).collect(),
            None => vec![i],
        };
        let mut sizes: Vec<(f64, f64)> = group
            .iter()
            .map(|&j| token_size(&specs[j].word, specs[j].attrs.font_size))
            .collect();
        let mut total: f64 =
            sizes.iter().map(|s| s.0).sum::<f64>() + PHRASE_GAP * (group.len() - 1) as f64;
        if total > 0.95 && specs[i].attrs.font_size == FontSize::Large {
            for &j in &group {
                specs[j].attrs.font_size = FontSize::Small;
            }
            sizes = group
                .iter()
                .map(|&j| token_size(&specs[j].word, FontSize::Small))
                .collect();
            total = sizes.iter().map(|s| s.0).sum::<f64>() + PHRASE_GAP * (group.len() - 1) as f64;
        }
        let height = sizes[0].1;
        let mut ok = false;
        for _ in 0..PLACE_TRIES {
            let x0 = rng.gen_range(0.0..=(1.0 - total).max(0.0));
            let y0 = rng.gen_range(0.0..=(1.0 - height));
            let mut x = x0;
            let mut cand = Vec::with_capacity(group.len());
            for s in &sizes {
                cand.push(BBox::new(x, y0, (x + s.0).min(1.0), y0 + s.1));
                x += s.0 + PHRASE_GAP;
            }
            if cand.iter().all(|b| !overlaps_any(b, &placed)) {
                for (&j, b) in group.iter().zip(&cand) {
                    boxes[j] = *b;
                }
                placed.extend(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
        i += group.len();
    }
    Some(boxes)
}

fn position_answer(side: Side, k: Category, ambiguous: bool, specs: &[Spec], boxes: &[BBox]) -> Option<usize> {
    let mut same: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].attrs.category == k).collect();
    same.sort_by(|&a, &b| side.extremity(&boxes[b]).total_cmp(&side.extremity(&boxes[a])));
    let best = same[0];
    if same.len() > 1
        && side.extremity(&boxes[best]) - side.extremity(&boxes[same[1]]) < POSITION_MARGIN
    {
        return None;
    }
    if ambiguous {
        let beaten = (0..specs.len()).any(|i| {
            specs[i].attrs.category != k
                && side.extremity(&boxes[i]) > side.extremity(&boxes[best])
        });
        if !beaten {
            return None;
        }
    }
    Some(best)
}

fn gold_answers(canonical: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let joined = canonical.join(" ");
    let mut answers = vec![joined.clone(); 8];
    let typo_pos = rng.gen_range(0..canonical.len());
    let mut typo = canonical.to_vec();
    typo[typo_pos] = substitute_one(&typo[typo_pos], rng);
    answers.push(typo.join(" "));
    answers.push(if canonical.len() > 1 {
        canonical[1..].join(" ")
    } else {
        format!("the {joined}")
    });
    answers
}

pub(crate) fn generate_instance(
    config: &WorldConfig,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<SceneInstance> {
    let mut rng = instance_rng(seed, split, index);
    let template = *config.templates.choose(&mut rng).unwrap();
    let ambiguous = rng.gen_bool(config.ambiguity_fraction);
    let n_tokens = rng.gen_range(config.min_tokens..=config.max_tokens);
    for _ in 0..config.max_restarts.max(1) {
        let mut p = plan(template, ambiguous, n_tokens, &mut rng);
        let Some(boxes) = place(&mut p.specs, &mut rng) else { continue };
        let mut answer = p.answer.clone();
        if let Some((side, k, amb)) = p.position {
            match position_answer(side, k, amb, &p.specs, &boxes) {
                Some(a) => answer = vec![a],
                None => continue,
            }
        }
        // Shuffle token order so the answer index carries no signal.
        let mut order: Vec<usize> = (0..p.specs.len()).collect();
        order.shuffle(&mut rng);
        let tokens: Vec<SceneTextToken> = order
            .iter()
            .map(|&i| SceneTextToken {
                word: p.specs[i].word.clone(),
                bbox: boxes[i],
                attributes: p.specs[i].attrs,
            })
            .collect();
        let answer_tokens: Vec<String> = answer.iter().map(|&i| p.specs[i].word.clone()).collect();
        let visual_grid = VisualGrid::render(config.grid_size, &tokens);
        let answers = gold_answers(&answer_tokens, &mut rng);
        return Ok(SceneInstance {
            id: format!("{}-{index:05}", split.name()),
            template,
            question: p.question,
            tokens,
            visual_grid,
            answers,
            answer_tokens,
        });
    }
    Err(Error::Generation(format!(
        "cannot place {n_tokens} tokens without overlap in {} restarts \
         (non-overlap constraint; lower max_tokens)",
        config.max_restarts
    )))
}
