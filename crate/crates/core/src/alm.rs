//! Answer location: a linguistic per-token probability, a region proposal
//! from gated visual states plus probability-weighted layout states, box to
//! token overlap, and a soft switch mixing the two token distributions.
//!
//! The formulas are listed in `docs/model-map.md#answer-location`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, Tensor};
use crate::dataworld::{reading_order, SceneInstance, SceneTextToken, VisualGrid};
use crate::encoders::{EncoderConfig, TextLayoutEncoder, TextLayoutEncoding, VisualEncoder};
use crate::error::{Error, Result};
use crate::geometry::{iou_hat, BBox};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{validate_shapes, Grads, ParamStore};
use crate::preprocess::AlmTargets;
use crate::vocab::Vocab;

const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlmLossConfig {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub selection_threshold: f64,
    /// Probability clamp inside the logs.
    pub eps: f64,
    /// Adds a binary cross-entropy term on `P_l` alone.
    pub aux_linguistic: bool,
}

impl Default for AlmLossConfig {
    fn default() -> Self {
        AlmLossConfig {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            selection_threshold: 0.5,
            eps: 1e-7,
            aux_linguistic: false,
        }
    }
}

impl AlmLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_giou >= 0.0) {
            return Err(Error::Config("box loss weights must be non-negative".into()));
        }
        if !(self.selection_threshold > 0.0 && self.selection_threshold < 1.0) {
            return Err(Error::Config("selection_threshold must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Which token distribution drives selection and `Loss_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlmVariant {
    /// Learned switch mixing both branches.
    Full,
    /// Switch pinned to 1: `P_w = P_v`.
    Visual,
    /// Switch pinned to 0: `P_w = P_l`.
    Linguistic,
}

impl AlmVariant {
    pub fn name(self) -> &'static str {
        match self {
            AlmVariant::Full => "full",
            AlmVariant::Visual => "visual",
            AlmVariant::Linguistic => "linguistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlmConfig {
    pub encoder: EncoderConfig,
    pub loss: AlmLossConfig,
    pub variant: AlmVariant,
}

impl Default for AlmConfig {
    fn default() -> Self {
        AlmConfig {
            encoder: EncoderConfig::default(),
            loss: AlmLossConfig::default(),
            variant: AlmVariant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmOutput {
    pub p_l: Vec<f64>,
    pub p_v: Vec<f64>,
    pub p_s: f64,
    pub p_w: Vec<f64>,
    pub b_p: BBox,
    pub h_a: Vec<f64>,
    pub selected: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Copy)]
pub struct AlmNodes {
    /// `m x 1` each
    pub p_l: NodeId,
    pub p_v: NodeId,
    pub p_w: NodeId,
    /// `1 x 1`
    pub p_s: NodeId,
    /// `1 x 4` corner form
    pub b_p: NodeId,
    /// `1 x 2d`
    pub h_a: NodeId,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmLossParts {
    pub bbox: f64,
    pub s: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
struct Heads {
    w_l: Linear,
    gate: Linear,
    ln_a: LayerNorm,
    ffn_bbox: FeedForward,
    w_t_cls: Linear,
    w_v_cls: Linear,
    ln_cls: LayerNorm,
    ffn_cls: FeedForward,
}

#[derive(Debug, Clone)]
pub struct AlmModel {
    pub config: AlmConfig,
    pub store: ParamStore,
    vocab: Vocab,
    text: TextLayoutEncoder,
    visual: VisualEncoder,
    heads: Heads,
}

impl AlmModel {
    pub fn new(config: AlmConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        config.loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new();
        let mut store = ParamStore::new();
        let cfg = &config.encoder;
        let d = cfg.d_model;
        let text = TextLayoutEncoder::new(&mut store, cfg, &vocab, &mut rng);
        let visual = VisualEncoder::new(&mut store, cfg, &vocab, &mut rng);
        let heads = Heads {
            w_l: Linear::new(&mut store, "alm.w_l", 2 * d, 1, &mut rng),
            gate: Linear::new(&mut store, "alm.w_v", d, d, &mut rng),
            ln_a: LayerNorm::new(&mut store, "alm.ln_a", 2 * d),
            ffn_bbox: FeedForward::new(&mut store, "alm.ffn_bbox", 2 * d, d, 4, &mut rng),
            w_t_cls: Linear::no_bias(&mut store, "alm.w_t_cls", d, d, &mut rng),
            w_v_cls: Linear::no_bias(&mut store, "alm.w_v_cls", d, d, &mut rng),
            ln_cls: LayerNorm::new(&mut store, "alm.ln_cls", d),
            ffn_cls: FeedForward::new(&mut store, "alm.ffn_cls", d, d, 1, &mut rng),
        };
        // Small output layers keep both sigmoids off their flat tails at the start.
        store.get_mut(heads.ffn_bbox.l2.w).scale_in_place(HEAD_INIT_SCALE);
        store.get_mut(heads.ffn_cls.l2.w).scale_in_place(HEAD_INIT_SCALE);
        Ok(AlmModel {
            config,
            store,
            vocab,
            text,
            visual,
            heads,
        })
    }

    /// Rebuilds the model layout for `config` and installs `store`.
    pub fn from_store(config: AlmConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        validate_shapes(&model.store, &store)?;
        model.store = store;
        Ok(model)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Records the full forward pass on `g`, whose store must share this
    /// model's layout.
    pub fn forward(
        &self,
        g: &mut Graph,
        question: &[String],
        tokens: &[SceneTextToken],
        grid: &VisualGrid,
    ) -> Result<AlmNodes> {
        let t = self.text.forward(g, &self.vocab, question, tokens)?;
        let v = self.visual.forward(g, &self.vocab, question, grid)?;
        let h = &self.heads;
        let d = self.config.encoder.d_model;
        let m = t.m;

        let (p_l, h_s_a) = if m == 0 {
            (g.input(Tensor::zeros(0, 1)), g.input(Tensor::zeros(1, d)))
        } else {
            let cat = g.concat_cols(&[t.h_lang, t.h_lay]);
            let logit = h.w_l.forward(g, cat);
            let p_l = g.sigmoid(logit);
            (p_l, g.matmul_at(p_l, t.h_lay))
        };

        let gate = h.gate.forward(g, v.h_v);
        let gate = g.sigmoid(gate);
        let gated = g.mul(gate, v.h_v);
        let h_v_a = g.sum_rows(gated);
        let h_a = g.concat_cols(&[h_v_a, h_s_a]);
        let a_norm = h.ln_a.forward(g, h_a);
        let raw = h.ffn_bbox.forward(g, a_norm);
        let raw = g.sigmoid(raw);
        let b_p = g.center_size_to_box(raw);

        let boxes: Vec<BBox> = tokens.iter().map(|t| t.bbox).collect();
        let p_v = g.overlap(b_p, &boxes);

        let p_s = match self.config.variant {
            AlmVariant::Full => {
                let a = h.w_t_cls.forward(g, t.h_t_cls);
                let b = h.w_v_cls.forward(g, v.h_v_cls);
                let pre = g.add(a, b);
                let pre = h.ln_cls.forward(g, pre);
                let logit = h.ffn_cls.forward(g, pre);
                g.sigmoid(logit)
            }
            AlmVariant::Visual => g.input(Tensor::scalar(1.0)),
            AlmVariant::Linguistic => g.input(Tensor::scalar(0.0)),
        };
        let p_w = g.mix(p_s, p_v, p_l);
        Ok(AlmNodes {
            p_l,
            p_v,
            p_w,
            p_s,
            b_p,
            h_a,
            m,
        })
    }

    pub fn output(&self, g: &Graph, nodes: &AlmNodes, tokens: &[SceneTextToken]) -> AlmOutput {
        let col = |id: NodeId| g.value(id).data().to_vec();
        let p_w = col(nodes.p_w);
        let selected = select_words(&p_w, tokens, self.config.loss.selection_threshold);
        let out = AlmOutput {
            p_l: col(nodes.p_l),
            p_v: col(nodes.p_v),
            p_s: g.value(nodes.p_s).item(),
            p_w,
            b_p: BBox::from_array(g.value(nodes.b_p).data().try_into().expect("box has 4 values")),
            h_a: col(nodes.h_a),
            selected,
        };
        debug_assert!(out.p_w.iter().chain(&out.p_l).chain(&out.h_a).all(|v| v.is_finite()));
        out
    }

    pub fn predict(&self, question: &[String], tokens: &[SceneTextToken], grid: &VisualGrid) -> Result<AlmOutput> {
        let mut g = Graph::new(&self.store);
        let nodes = self.forward(&mut g, question, tokens, grid)?;
        let out = self.output(&g, &nodes, tokens);
        if !out.h_a.iter().chain(&out.p_w).all(|v| v.is_finite()) {
            return Err(Error::Shape("non-finite answer location output".into()));
        }
        Ok(out)
    }

    /// Records `Loss_a` for one scene on `g` and returns its node.
    pub fn loss_node(&self, g: &mut Graph, scene: &SceneInstance, targets: &AlmTargets) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        let nodes = self.forward(g, &scene.question, &scene.tokens, &scene.visual_grid)?;
        alm_loss_nodes(g, &nodes, targets, &self.config.loss)
    }

    /// `Loss_a` for one scene; gradients are added into `grads`.
    pub fn loss_and_grads(&self, scene: &SceneInstance, targets: &AlmTargets, grads: &mut Grads) -> Result<AlmLossParts> {
        let mut g = Graph::new(&self.store);
        let (bbox, total, s) = self.loss_node(&mut g, scene, targets)?;
        g.backward(total, grads);
        let bbox = g.value(bbox).item();
        let total = g.value(total).item();
        Ok(AlmLossParts {
            bbox,
            s: s.map_or(0.0, |s| g.value(s).item()),
            total,
        })
    }
}

/// Adds `Loss_bbox`, `Loss_s` and their sum to the graph. Returns
/// `(loss_bbox, loss_a, loss_s)`; `loss_s` is absent for an empty scene.
pub fn alm_loss_nodes(
    g: &mut Graph,
    nodes: &AlmNodes,
    targets: &AlmTargets,
    cfg: &AlmLossConfig,
) -> Result<(NodeId, NodeId, Option<NodeId>)> {
    if targets.tags.len() != nodes.m {
        return Err(Error::LengthMismatch {
            left: targets.tags.len(),
            right: nodes.m,
        });
    }
    let bbox = g.box_loss(nodes.b_p, targets.answer_box, cfg.lambda_l1, cfg.lambda_giou);
    if nodes.m == 0 {
        return Ok((bbox, bbox, None));
    }
    let mut s = g.bce(nodes.p_w, &targets.tags, cfg.eps);
    if cfg.aux_linguistic {
        let aux = g.bce(nodes.p_l, &targets.tags, cfg.eps);
        s = g.add(s, aux);
    }
    let parts = g.concat_rows(&[bbox, s]);
    let total = g.sum_all(parts);
    Ok((bbox, total, Some(s)))
}

/// `sigmoid(w_l · [h_lang_i ; h_lay_i] + b_l)` per token.
pub fn linguistic_probs(enc: &TextLayoutEncoding, w_l: &[f64], b_l: f64) -> Vec<f64> {
    let d = enc.h_lang.cols();
    assert_eq!(w_l.len(), 2 * d, "w_l must have 2d entries");
    (0..enc.h_lang.rows())
        .map(|i| {
            let z: f64 = enc.h_lang.row(i).iter().zip(&w_l[..d]).map(|(a, b)| a * b).sum::<f64>()
                + enc.h_lay.row(i).iter().zip(&w_l[d..]).map(|(a, b)| a * b).sum::<f64>()
                + b_l;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// `Σ_q sigmoid(W_v h_q + b_v) ⊙ h_q` with `W_v` stored `d_in x d_out`.
pub fn gated_visual_aggregate(h_v: &Tensor, w_v: &Tensor, b_v: &[f64]) -> Vec<f64> {
    let d = h_v.cols();
    let mut out = vec![0.0; d];
    for q in 0..h_v.rows() {
        let row = h_v.row(q);
        for j in 0..d {
            let z: f64 = (0..d).map(|k| row[k] * w_v.get(k, j)).sum::<f64>() + b_v[j];
            out[j] += row[j] / (1.0 + (-z).exp());
        }
    }
    out
}

/// `Σ_i P_l[i] · h_lay[i]`
pub fn spatial_aggregate(p_l: &[f64], h_lay: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; h_lay.cols()];
    for (i, p) in p_l.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(h_lay.row(i)) {
            *o += p * v;
        }
    }
    out
}

pub fn visual_probs(b_p: &BBox, tokens: &[SceneTextToken]) -> Vec<f64> {
    tokens.iter().map(|t| iou_hat(b_p, &t.bbox)).collect()
}

/// `sigmoid(pre)` where `pre` is the switch head's scalar output.
pub fn soft_switch(pre: f64) -> f64 {
    1.0 / (1.0 + (-pre).exp())
}

/// `p_s · P_v + (1 − p_s) · P_l` per token.
pub fn mix_probs(p_s: f64, p_v: &[f64], p_l: &[f64]) -> Result<Vec<f64>> {
    if p_v.len() != p_l.len() {
        return Err(Error::LengthMismatch {
            left: p_v.len(),
            right: p_l.len(),
        });
    }
    Ok(p_v.iter().zip(p_l).map(|(&v, &l)| p_s * v + (1.0 - p_s) * l).collect())
}

/// Tokens with probability above `threshold`, or the first argmax when none
/// qualifies, in reading order.
pub fn select_words(probs: &[f64], tokens: &[SceneTextToken], threshold: f64) -> Vec<(usize, String)> {
    assert_eq!(probs.len(), tokens.len(), "one probability per token");
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut keep: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    if !keep.iter().any(|&k| k) {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        keep[best] = true;
    }
    let boxes: Vec<BBox> = tokens.iter().map(|t| t.bbox).collect();
    reading_order(&boxes)
        .into_iter()
        .filter(|&i| keep[i])
        .map(|i| (i, tokens[i].word.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataworld::{generate_dataset, Category, Color, FontSize, TokenAttributes, WorldConfig};
    use crate::preprocess::build_targets;

    fn tok(word: &str, b: BBox) -> SceneTextToken {
        SceneTextToken {
            word: word.into(),
            bbox: b,
            attributes: TokenAttributes {
                color: Color::Blue,
                category: Category::Word,
                font_size: FontSize::Small,
            },
        }
    }

    fn small_model(variant: AlmVariant) -> AlmModel {
        let config = AlmConfig {
            encoder: EncoderConfig {
                d_model: 16,
                heads: 2,
                d_ff: 32,
                layers: 1,
                queries: 4,
                ..EncoderConfig::default()
            },
            variant,
            ..AlmConfig::default()
        };
        AlmModel::new(config, 5).unwrap()
    }

    fn scenes(n: usize) -> Vec<SceneInstance> {
        let cfg = WorldConfig {
            n_train: n,
            n_test: 0,
            ..WorldConfig::default()
        };
        generate_dataset(&cfg, 8).unwrap().train.instances
    }

    #[test]
    fn linguistic_probs_examples() {
        let enc = TextLayoutEncoding {
            h_lang: Tensor::from_vec(1, 1, vec![2.0]),
            h_lay: Tensor::from_vec(1, 1, vec![2.0]),
            h_t_cls: vec![0.0],
        };
        let p = linguistic_probs(&enc, &[1.0, 1.0], 0.0);
        assert!((p[0] - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((p[0] - 0.9820).abs() < 1e-4);
        let zero = linguistic_probs(&enc, &[0.0, 0.0], 0.0);
        assert_eq!(zero, vec![0.5]);
    }

    #[test]
    fn region_aggregation_examples() {
        let h_v = Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let closed = gated_visual_aggregate(&h_v, &Tensor::zeros(2, 2), &[-1e3, -1e3]);
        assert!(closed.iter().all(|v| v.abs() < 1e-300));
        let r = Tensor::from_vec(2, 3, vec![0.2, -0.4, 0.9, 0.2, -0.4, 0.9]);
        assert_eq!(spatial_aggregate(&[0.5, 0.5], &r), vec![0.2, -0.4, 0.9]);
        let b = BBox::from_center_size(0.5, 0.5, 0.2, 0.2);
        for (a, e) in b.to_array().iter().zip([0.4, 0.4, 0.6, 0.6]) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn visual_probs_examples() {
        let toks = vec![tok("a", BBox::new(0.4, 0.4, 0.6, 0.6)), tok("b", BBox::new(0.0, 0.8, 0.2, 0.9))];
        assert_eq!(visual_probs(&BBox::FULL, &toks), vec![1.0, 1.0]);
        assert_eq!(visual_probs(&BBox::ZERO, &toks), vec![0.0, 0.0]);
        let p = visual_probs(&BBox::new(0.0, 0.0, 0.5, 0.5), &toks);
        assert!((p[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn switch_and_mixture_examples() {
        assert_eq!(soft_switch(0.0), 0.5);
        assert!(soft_switch(1.0) > soft_switch(0.5));
        assert_eq!(mix_probs(1.0, &[0.3, 0.9], &[0.1, 0.2]).unwrap(), vec![0.3, 0.9]);
        assert_eq!(mix_probs(0.0, &[0.3, 0.9], &[0.1, 0.2]).unwrap(), vec![0.1, 0.2]);
        assert_eq!(mix_probs(0.5, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(mix_probs(0.5, &[1.0], &[0.0, 1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn selection_rules() {
        let toks = vec![
            tok("c", BBox::new(0.5, 0.5, 0.6, 0.6)),
            tok("b", BBox::new(0.1, 0.5, 0.2, 0.6)),
            tok("a", BBox::new(0.1, 0.1, 0.2, 0.2)),
        ];
        let s = select_words(&[0.9, 0.1, 0.8], &toks, 0.5);
        assert_eq!(s, vec![(2, "a".to_string()), (0, "c".to_string())]);
        assert_eq!(select_words(&[0.2, 0.4, 0.1], &toks, 0.5), vec![(1, "b".to_string())]);
        assert_eq!(select_words(&[0.3, 0.3, 0.1], &toks, 0.5), vec![(0, "c".to_string())]);
        assert!(select_words(&[], &[], 0.5).is_empty());
    }

    #[test]
    fn forward_matches_value_level_formulas() {
        let model = small_model(AlmVariant::Full);
        let scene = &scenes(1)[0];
        let mut g = Graph::new(&model.store);
        let t = model.text.forward(&mut g, &model.vocab, &scene.question, &scene.tokens).unwrap();
        let enc = t.values(&g);
        let nodes = model.forward(&mut g, &scene.question, &scene.tokens, &scene.visual_grid).unwrap();
        let out = model.output(&g, &nodes, &scene.tokens);
        let w_l = model.store.get(model.heads.w_l.w).data().to_vec();
        let b_l = model.store.get(model.heads.w_l.b.unwrap()).item();
        let p_l = linguistic_probs(&enc, &w_l, b_l);
        for (a, b) in p_l.iter().zip(&out.p_l) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.p_v, visual_probs(&out.b_p, &scene.tokens));
        assert_eq!(out.p_w, mix_probs(out.p_s, &out.p_v, &out.p_l).unwrap());
        assert!(out.b_p.is_valid());
        assert!(out.p_s > 0.0 && out.p_s < 1.0);
        assert_eq!(out.h_a.len(), 32);
    }

    #[test]
    fn pinned_variants_reproduce_one_branch() {
        let scene = &scenes(1)[0];
        let v = small_model(AlmVariant::Visual).predict(&scene.question, &scene.tokens, &scene.visual_grid).unwrap();
        assert_eq!(v.p_w, v.p_v);
        let l = small_model(AlmVariant::Linguistic).predict(&scene.question, &scene.tokens, &scene.visual_grid).unwrap();
        assert_eq!(l.p_w, l.p_l);
    }

    #[test]
    fn loss_decomposes_and_zero_box_weights_leave_bce() {
        let mut model = small_model(AlmVariant::Full);
        let scene = &scenes(1)[0];
        let targets = build_targets(&scene.answer_tokens, &scene.tokens);
        let mut grads = Grads::new(&model.store);
        let parts = model.loss_and_grads(scene, &targets, &mut grads).unwrap();
        assert!((parts.total - parts.bbox - parts.s).abs() < 1e-12);
        model.config.loss.lambda_l1 = 0.0;
        model.config.loss.lambda_giou = 0.0;
        let mut grads = Grads::new(&model.store);
        let only_s = model.loss_and_grads(scene, &targets, &mut grads).unwrap();
        assert_eq!(only_s.total, only_s.s);
        assert_eq!(only_s.s, parts.s);
    }

    #[test]
    fn single_token_half_probability_costs_ln2() {
        let mut store = ParamStore::new();
        let b = store.add("b", Tensor::row_vector(vec![0.5, 0.5, 0.2, 0.2]));
        let mut g = Graph::new(&store);
        let raw = g.param(b);
        let b_p = g.center_size_to_box(raw);
        let p = g.input(Tensor::column(vec![0.5]));
        let s = g.input(Tensor::scalar(0.3));
        let p_w = g.mix(s, p, p);
        let nodes = AlmNodes { p_l: p, p_v: p, p_w, p_s: s, b_p, h_a: p, m: 1 };
        let targets = AlmTargets {
            answer_box: BBox::new(0.4, 0.4, 0.6, 0.6),
            tags: vec![1.0],
            matched_indices: [0].into_iter().collect(),
        };
        let (bbox, total, _) = alm_loss_nodes(&mut g, &nodes, &targets, &AlmLossConfig::default()).unwrap();
        assert!(g.value(bbox).item().abs() < 1e-12);
        assert!((g.value(total).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
