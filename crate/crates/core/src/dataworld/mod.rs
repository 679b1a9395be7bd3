//! Synthetic scene-text world: instances, generation, OCR corruption and
//! the line-delimited dataset format.

mod augment;
pub(crate) mod corrupt;
mod generate;
mod io;

pub use augment::{augment, AugmentConfig};
pub use corrupt::{corrupt_ocr, substitute_one, CorruptionSpec};
pub use generate::{generate_dataset, WorldSplits};
pub use io::{load_dataset, save_dataset, Dataset, DatasetHeader, Split, DATASET_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Black,
    White,
    Orange,
    Purple,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Black,
        Color::White,
        Color::Orange,
        Color::Purple,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        crate::vocab::COLORS[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Number,
    Word,
}

impl Category {
    pub fn other(self) -> Category {
        match self {
            Category::Number => Category::Word,
            Category::Word => Category::Number,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Number => "number",
            Category::Word => "word",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FontSize {
    Small,
    Large,
}

impl FontSize {
    pub fn other(self) -> FontSize {
        match self {
            FontSize::Small => FontSize::Large,
            FontSize::Large => FontSize::Small,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FontSize::Small => "small",
            FontSize::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenAttributes {
    pub color: Color,
    pub category: Category,
    pub font_size: FontSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTextToken {
    pub word: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub attributes: TokenAttributes,
}

/// Question families of the synthetic world. All of them are answered by
/// copying scene-text tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "what is the <category> in <color> ?"
    ColorCategory,
    /// "what is the <size> <category> ?"
    SizeCategory,
    /// "what is the <category> at the <side> ?"
    Position,
    /// "what is the phrase in <color> ?"
    ColorPhrase,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ColorCategory,
        Template::SizeCategory,
        Template::Position,
        Template::ColorPhrase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::ColorCategory => "color_category",
            Template::SizeCategory => "size_category",
            Template::Position => "position",
            Template::ColorPhrase => "color_phrase",
        }
    }

    pub fn requires_copy(self) -> bool {
        true
    }
}

/// Attribute one-hot layout of a visual grid cell.
pub mod features {
    pub const COLOR: usize = 0;
    pub const CATEGORY: usize = 8;
    pub const SIZE: usize = 10;
    pub const OCCUPANCY: usize = 12;
    pub const COUNT: usize = 13;
}

/// `G x G` grid of per-cell feature vectors, row-major with row = y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SparseGrid", try_from = "SparseGrid")]
pub struct VisualGrid {
    size: usize,
    cells: Vec<f64>,
}

impl VisualGrid {
    pub fn empty(size: usize) -> Self {
        VisualGrid {
            size,
            cells: vec![0.0; size * size * features::COUNT],
        }
    }

    /// Paints each cell whose center lies inside a token box with that
    /// token's attribute one-hots.
    pub fn render(size: usize, tokens: &[SceneTextToken]) -> Self {
        let mut grid = VisualGrid::empty(size);
        for r in 0..size {
            for c in 0..size {
                let (x, y) = grid.cell_center(r, c);
                if let Some(t) = tokens.iter().find(|t| t.bbox.contains_point(x, y)) {
                    grid.paint(r, c, &t.attributes);
                }
            }
        }
        grid
    }

    fn paint(&mut self, r: usize, c: usize, a: &TokenAttributes) {
        let cell = self.cell_mut(r, c);
        cell.iter_mut().for_each(|v| *v = 0.0);
        cell[features::COLOR + a.color.index()] = 1.0;
        cell[features::CATEGORY + a.category as usize] = 1.0;
        cell[features::SIZE + a.font_size as usize] = 1.0;
        cell[features::OCCUPANCY] = 1.0;
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        let g = self.size as f64;
        ((c as f64 + 0.5) / g, (r as f64 + 0.5) / g)
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let k = (r * self.size + c) * features::COUNT;
        &self.cells[k..k + features::COUNT]
    }

    fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let k = (r * self.size + c) * features::COUNT;
        &mut self.cells[k..k + features::COUNT]
    }

    pub fn is_occupied(&self, r: usize, c: usize) -> bool {
        self.cell(r, c)[features::OCCUPANCY] > 0.5
    }

    /// Reads the attribute one-hots back out of a cell.
    pub fn decode(&self, r: usize, c: usize) -> Option<TokenAttributes> {
        if !self.is_occupied(r, c) {
            return None;
        }
        let cell = self.cell(r, c);
        let argmax = |range: std::ops::Range<usize>| {
            range
                .clone()
                .max_by(|&a, &b| cell[a].total_cmp(&cell[b]))
                .map(|i| i - range.start)
                .unwrap_or(0)
        };
        let color = Color::ALL[argmax(features::COLOR..features::CATEGORY)];
        let category = [Category::Number, Category::Word][argmax(features::CATEGORY..features::SIZE)];
        let font_size = [FontSize::Small, FontSize::Large][argmax(features::SIZE..features::OCCUPANCY)];
        Some(TokenAttributes {
            color,
            category,
            font_size,
        })
    }

    /// Row-major cell data, `size * size * features::COUNT` values.
    pub fn data(&self) -> &[f64] {
        &self.cells
    }
}

#[derive(Serialize, Deserialize)]
struct SparseGrid {
    size: usize,
    features: usize,
    /// `[row, col, feature indices with value 1...]`
    occupied: Vec<Vec<usize>>,
}

impl From<VisualGrid> for SparseGrid {
    fn from(g: VisualGrid) -> Self {
        let mut occupied = Vec::new();
        for r in 0..g.size {
            for c in 0..g.size {
                let cell = g.cell(r, c);
                if cell.iter().any(|&v| v != 0.0) {
                    let mut entry = vec![r, c];
                    entry.extend(cell.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i));
                    occupied.push(entry);
                }
            }
        }
        SparseGrid {
            size: g.size,
            features: features::COUNT,
            occupied,
        }
    }
}

impl TryFrom<SparseGrid> for VisualGrid {
    type Error = String;

    fn try_from(s: SparseGrid) -> Result<Self, Self::Error> {
        if s.features != features::COUNT {
            return Err(format!("grid has {} features, expected {}", s.features, features::COUNT));
        }
        let mut g = VisualGrid::empty(s.size);
        for entry in s.occupied {
            if entry.len() < 2 || entry[0] >= s.size || entry[1] >= s.size {
                return Err("grid cell out of range".into());
            }
            let cell = g.cell_mut(entry[0], entry[1]);
            for &f in &entry[2..] {
                if f >= features::COUNT {
                    return Err(format!("feature index {f} out of range"));
                }
                cell[f] = 1.0;
            }
        }
        Ok(g)
    }
}

/// One question-answer example over a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: String,
    pub template: Template,
    pub question: Vec<String>,
    pub tokens: Vec<SceneTextToken>,
    pub visual_grid: VisualGrid,
    /// Ten gold answers; the canonical answer appears among them.
    pub answers: Vec<String>,
    /// Canonical answer as a word sequence.
    pub answer_tokens: Vec<String>,
}

impl SceneInstance {
    pub fn canonical_answer(&self) -> String {
        self.answer_tokens.join(" ")
    }

    pub fn token_boxes(&self) -> Vec<BBox> {
        self.tokens.iter().map(|t| t.bbox).collect()
    }

    pub fn token_words(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.word.clone()).collect()
    }
}

/// Token indices sorted top-to-bottom then left-to-right.
pub fn reading_order(boxes: &[BBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| {
        boxes[a]
            .y1
            .total_cmp(&boxes[b].y1)
            .then(boxes[a].x1.total_cmp(&boxes[b].x1))
            .then(a.cmp(&b))
    });
    idx
}

/// Generator configuration for the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub grid_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Fraction of scenes that get both an attribute and a category distractor.
    pub ambiguity_fraction: f64,
    pub templates: Vec<Template>,
    /// Placement restarts before a scene is declared unsatisfiable.
    pub max_restarts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_train: 2000,
            n_test: 500,
            grid_size: 16,
            min_tokens: 6,
            max_tokens: 10,
            ambiguity_fraction: 0.5,
            templates: Template::ALL.to_vec(),
            max_restarts: 50,
        }
    }
}
