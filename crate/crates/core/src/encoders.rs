//! Trainable text/layout and visual encoders.
//!
//! The text/layout encoder runs two parallel self-attention stacks: one over
//! word embeddings and one over box embeddings. Both streams compute their
//! attention weights from the sum of the two normalized streams, so each
//! stream is conditioned on the other. The question is prefixed to both
//! streams after a `[CLS]` row; only the scene-token rows are reported.
//!
//! The visual encoder embeds every occupied grid cell (features plus a 2-D
//! sinusoidal position), prepends the question, runs a small encoder and
//! decodes a `[CLS]` query followed by `queries` learned queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, NodeId, Tensor};
use crate::dataworld::{features, SceneTextToken, VisualGrid};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{embedding, grid_position_embedding, DecoderBlock, Dims, EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::vocab::{Vocab, CLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub queries: usize,
    pub grid_size: usize,
    pub max_question_len: usize,
    pub max_scene_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            layers: 2,
            queries: 8,
            grid_size: 16,
            max_question_len: 16,
            max_scene_tokens: 48,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self) -> Dims {
        Dims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of heads".into()));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be divisible by 4".into()));
        }
        if self.queries == 0 || self.layers == 0 {
            return Err(Error::Config("queries and layers must be positive".into()));
        }
        Ok(())
    }
}

/// Graph handles of a text/layout encoding.
#[derive(Debug, Clone, Copy)]
pub struct TextLayoutNodes {
    /// `m x d`, one row per scene token.
    pub h_lang: NodeId,
    pub h_lay: NodeId,
    /// `1 x d`
    pub h_t_cls: NodeId,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLayoutEncoding {
    pub h_lang: Tensor,
    pub h_lay: Tensor,
    pub h_t_cls: Vec<f64>,
}

impl TextLayoutNodes {
    pub fn values(&self, g: &Graph) -> TextLayoutEncoding {
        TextLayoutEncoding {
            h_lang: g.value(self.h_lang).clone(),
            h_lay: g.value(self.h_lay).clone(),
            h_t_cls: g.value(self.h_t_cls).data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VisualNodes {
    /// `queries x d`
    pub h_v: NodeId,
    /// `1 x d`
    pub h_v_cls: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoding {
    pub h_v: Tensor,
    pub h_v_cls: Vec<f64>,
}

impl VisualNodes {
    pub fn values(&self, g: &Graph) -> VisualEncoding {
        VisualEncoding {
            h_v: g.value(self.h_v).clone(),
            h_v_cls: g.value(self.h_v_cls).data().to_vec(),
        }
    }
}

/// `(x1, y1, x2, y2, w, h)`
pub fn box_features(b: &BBox) -> [f64; 6] {
    [b.x1, b.y1, b.x2, b.y2, b.width(), b.height()]
}

#[derive(Debug, Clone, Copy)]
struct DualBlock {
    ln_lang: LayerNorm,
    ln_lay: LayerNorm,
    attn_lang: MultiHeadAttention,
    attn_lay: MultiHeadAttention,
    ln_lang2: LayerNorm,
    ln_lay2: LayerNorm,
    ff_lang: FeedForward,
    ff_lay: FeedForward,
}

impl DualBlock {
    fn new(store: &mut ParamStore, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        let d = dims.d_model;
        DualBlock {
            ln_lang: LayerNorm::new(store, &format!("{name}.ln_lang"), d),
            ln_lay: LayerNorm::new(store, &format!("{name}.ln_lay"), d),
            attn_lang: MultiHeadAttention::new(store, &format!("{name}.attn_lang"), dims, rng),
            attn_lay: MultiHeadAttention::new(store, &format!("{name}.attn_lay"), dims, rng),
            ln_lang2: LayerNorm::new(store, &format!("{name}.ln_lang2"), d),
            ln_lay2: LayerNorm::new(store, &format!("{name}.ln_lay2"), d),
            ff_lang: FeedForward::new(store, &format!("{name}.ff_lang"), d, dims.d_ff, d, rng),
            ff_lay: FeedForward::new(store, &format!("{name}.ff_lay"), d, dims.d_ff, d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, lang: NodeId, lay: NodeId) -> (NodeId, NodeId) {
        let a = self.ln_lang.forward(g, lang);
        let b = self.ln_lay.forward(g, lay);
        let u = g.add(a, b);
        let da = self.attn_lang.forward_split(g, u, u, a, &Mask::None);
        let db = self.attn_lay.forward_split(g, u, u, b, &Mask::None);
        let lang = g.add(lang, da);
        let lay = g.add(lay, db);
        let a = self.ln_lang2.forward(g, lang);
        let fa = self.ff_lang.forward(g, a);
        let b = self.ln_lay2.forward(g, lay);
        let fb = self.ff_lay.forward(g, b);
        (g.add(lang, fa), g.add(lay, fb))
    }
}

/// Projected mean of the question word embeddings, added to every scene row
/// so each row can match itself against the question without attention.
fn question_summary(g: &mut Graph, words: NodeId, proj: &Linear) -> NodeId {
    let n = g.value(words).rows();
    let sum = g.sum_rows(words);
    let mean = g.scale(sum, 1.0 / n as f64);
    proj.forward(g, mean)
}

#[derive(Debug, Clone)]
pub struct TextLayoutEncoder {
    cfg: EncoderConfig,
    word: crate::params::ParamId,
    position: crate::params::ParamId,
    segment: crate::params::ParamId,
    box_proj: Linear,
    question_proj: Linear,
    blocks: Vec<DualBlock>,
    ln_lang: LayerNorm,
    ln_lay: LayerNorm,
}

impl TextLayoutEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, vocab: &Vocab, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let dims = cfg.dims();
        TextLayoutEncoder {
            cfg: *cfg,
            word: embedding(store, "text.word", vocab.len(), d, rng),
            position: embedding(store, "text.position", cfg.max_question_len + 1, d, rng),
            segment: embedding(store, "text.segment", 3, d, rng),
            box_proj: Linear::new(store, "text.box", 6, d, rng),
            question_proj: Linear::new(store, "text.question", d, d, rng),
            blocks: (0..cfg.layers)
                .map(|l| DualBlock::new(store, &format!("text.block{l}"), dims, rng))
                .collect(),
            ln_lang: LayerNorm::new(store, "text.ln_lang", d),
            ln_lay: LayerNorm::new(store, "text.ln_lay", d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vocab: &Vocab,
        question: &[String],
        tokens: &[SceneTextToken],
    ) -> Result<TextLayoutNodes> {
        if question.len() > self.cfg.max_question_len {
            return Err(Error::SequenceTooLong {
                len: question.len(),
                max: self.cfg.max_question_len,
            });
        }
        if tokens.len() > self.cfg.max_scene_tokens {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_scene_tokens,
            });
        }
        let (nq, m) = (question.len(), tokens.len());
        let prefix = 1 + nq;
        let mut ids = vec![vocab.special(CLS)];
        ids.extend(question.iter().map(|w| vocab.encoder_id(w)));
        ids.extend(tokens.iter().map(|t| vocab.encoder_id(&t.word)));
        let mut segs = vec![0];
        segs.extend(std::iter::repeat(1).take(nq));
        segs.extend(std::iter::repeat(2).take(m));
        let mut pos = vec![0];
        pos.extend(1..=nq);
        pos.extend(std::iter::repeat(0).take(m));

        let w = g.embed(self.word, &ids);
        let s = g.embed(self.segment, &segs);
        let p = g.embed(self.position, &pos);
        let base = g.add(w, s);
        let lang = g.add(base, p);
        let lay = if m == 0 {
            lang
        } else {
            let head = g.slice_rows(lang, 0, prefix);
            let feats: Vec<f64> = tokens.iter().flat_map(|t| box_features(&t.bbox)).collect();
            let feats = g.input(Tensor::from_vec(m, 6, feats));
            let bx = self.box_proj.forward(g, feats);
            let seg = g.embed(self.segment, &vec![2; m]);
            let mut bx = g.add(bx, seg);
            if nq > 0 {
                let qw = g.slice_rows(w, 1, nq);
                let q = question_summary(g, qw, &self.question_proj);
                bx = g.add_row(bx, q);
            }
            g.concat_rows(&[head, bx])
        };
        let (mut lang, mut lay) = (lang, lay);
        for b in &self.blocks {
            (lang, lay) = b.forward(g, lang, lay);
        }
        let lang = self.ln_lang.forward(g, lang);
        let lay = self.ln_lay.forward(g, lay);
        Ok(TextLayoutNodes {
            h_lang: g.slice_rows(lang, prefix, m),
            h_lay: g.slice_rows(lay, prefix, m),
            h_t_cls: g.slice_rows(lang, 0, 1),
            m,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    cfg: EncoderConfig,
    cell_proj: Linear,
    cell_box_proj: Linear,
    question_proj: Linear,
    word: crate::params::ParamId,
    position: crate::params::ParamId,
    segment: crate::params::ParamId,
    encoder: Vec<EncoderBlock>,
    ln_memory: LayerNorm,
    queries: crate::params::ParamId,
    decoder: Vec<DecoderBlock>,
    ln_out: LayerNorm,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, vocab: &Vocab, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let dims = cfg.dims();
        VisualEncoder {
            cfg: *cfg,
            cell_proj: Linear::new(store, "visual.cell", features::COUNT, d, rng),
            cell_box_proj: Linear::new(store, "visual.cell_box", 6, d, rng),
            question_proj: Linear::new(store, "visual.question", d, d, rng),
            word: embedding(store, "visual.word", vocab.len(), d, rng),
            position: embedding(store, "visual.position", cfg.max_question_len, d, rng),
            segment: embedding(store, "visual.segment", 2, d, rng),
            encoder: (0..cfg.layers)
                .map(|l| EncoderBlock::new(store, &format!("visual.enc{l}"), dims, rng))
                .collect(),
            ln_memory: LayerNorm::new(store, "visual.ln_memory", d),
            queries: embedding(store, "visual.queries", cfg.queries + 1, d, rng),
            decoder: (0..cfg.layers)
                .map(|l| DecoderBlock::new(store, &format!("visual.dec{l}"), dims, rng))
                .collect(),
            ln_out: LayerNorm::new(store, "visual.ln_out", d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vocab: &Vocab,
        question: &[String],
        grid: &VisualGrid,
    ) -> Result<VisualNodes> {
        let gs = self.cfg.grid_size;
        if grid.size() != gs || grid.data().len() != gs * gs * features::COUNT {
            return Err(Error::Shape(format!(
                "visual grid is {0}x{0} with {1} values, expected {gs}x{gs}x{2}",
                grid.size(),
                grid.data().len(),
                features::COUNT
            )));
        }
        if question.len() > self.cfg.max_question_len {
            return Err(Error::SequenceTooLong {
                len: question.len(),
                max: self.cfg.max_question_len,
            });
        }
        let d = self.cfg.d_model;
        let ids: Vec<usize> = question.iter().map(|w| vocab.encoder_id(w)).collect();
        let mut rows = Vec::new();
        let mut summary = None;
        if !ids.is_empty() {
            let w = g.embed(self.word, &ids);
            summary = Some(question_summary(g, w, &self.question_proj));
            let p = g.embed(self.position, &(0..ids.len()).collect::<Vec<_>>());
            let s = g.embed(self.segment, &vec![0; ids.len()]);
            let q = g.add(w, p);
            rows.push(g.add(q, s));
        }
        let cells: Vec<(usize, usize)> = (0..gs)
            .flat_map(|r| (0..gs).map(move |c| (r, c)))
            .filter(|&(r, c)| grid.is_occupied(r, c))
            .collect();
        if !cells.is_empty() {
            let feats: Vec<f64> = cells.iter().flat_map(|&(r, c)| grid.cell(r, c).to_vec()).collect();
            let feats = g.input(Tensor::from_vec(cells.len(), features::COUNT, feats));
            let x = self.cell_proj.forward(g, feats);
            // Cell rectangles, in token box coordinates.
            let gsf = gs as f64;
            let rects: Vec<f64> = cells
                .iter()
                .flat_map(|&(r, c)| box_features(&BBox::new(c as f64 / gsf, r as f64 / gsf, (c + 1) as f64 / gsf, (r + 1) as f64 / gsf)))
                .collect();
            let rects = g.input(Tensor::from_vec(cells.len(), 6, rects));
            let geo = self.cell_box_proj.forward(g, rects);
            let x = g.add(x, geo);
            let pe = g.input(grid_position_embedding(&cells, d));
            let s = g.embed(self.segment, &vec![1; cells.len()]);
            let x = g.add(x, pe);
            let x = g.add(x, s);
            rows.push(match summary {
                Some(q) => g.add_row(x, q),
                None => x,
            });
        }
        let mut memory = if rows.is_empty() {
            g.embed(self.segment, &[0])
        } else {
            g.concat_rows(&rows)
        };
        for b in &self.encoder {
            memory = b.forward(g, memory, &Mask::None);
        }
        let memory = self.ln_memory.forward(g, memory);
        let mut x = g.param(self.queries);
        for b in &self.decoder {
            x = b.forward(g, x, memory, &Mask::None);
        }
        let x = self.ln_out.forward(g, x);
        Ok(VisualNodes {
            h_v_cls: g.slice_rows(x, 0, 1),
            h_v: g.slice_rows(x, 1, self.cfg.queries),
        })
    }
}
