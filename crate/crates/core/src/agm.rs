//! Answer generation: an encoder-decoder over `[question; SEP; selected;
//! SEP; scene tokens]` that writes the answer piece by piece.
//!
//! Token embeddings are composed: every vocabulary entry has its own vector
//! plus the mean of the character vectors of its spelling, and the output
//! layer is tied to the same table. A misspelled word arrives as character
//! pieces whose vectors already point towards the intended word.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mask, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{embedding, DecoderBlock, Dims, EncoderBlock, LayerNorm};
use crate::params::{validate_shapes, Grads, ParamId, ParamStore};
use crate::vocab::{Vocab, BOS, EOS, SEP, SPELL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_input_len: usize,
    pub max_decode_len: usize,
}

impl Default for AgmConfig {
    fn default() -> Self {
        AgmConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_input_len: 96,
            max_decode_len: 16,
        }
    }
}

impl AgmConfig {
    fn dims(&self) -> Dims {
        Dims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("generator d_model must be a positive multiple of heads".into()));
        }
        if self.max_input_len < 2 || self.max_decode_len == 0 {
            return Err(Error::Config("generator lengths are too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// 1 is greedy.
    pub beam_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 1 }
    }
}

/// Generator input and (optionally) its teacher-forcing target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenBatch {
    pub input_ids: Vec<usize>,
    /// 0 question, 1 selection, 2 scene tokens.
    pub segments: Vec<usize>,
    /// Answer pieces followed by `[EOS]`; empty when only decoding.
    pub target_ids: Vec<usize>,
    /// Scene words cut from the tail to fit `max_input_len`.
    pub truncated_words: usize,
}

/// Builds `[question; SEP; selected; SEP; scene]` in generator pieces.
/// Scene words are dropped from the end when the sequence is too long.
pub fn build_gen_input(
    vocab: &Vocab,
    question: &[String],
    selected: &[String],
    scene_words: &[String],
    max_len: usize,
) -> Result<GenBatch> {
    let sep = vocab.special(SEP);
    let mut ids = Vec::new();
    let mut segments = Vec::new();
    for w in question {
        let p = vocab.pieces(w);
        segments.extend(std::iter::repeat(0).take(p.len()));
        ids.extend(p);
    }
    ids.push(sep);
    segments.push(1);
    for w in selected {
        let p = vocab.pieces(w);
        segments.extend(std::iter::repeat(1).take(p.len()));
        ids.extend(p);
    }
    ids.push(sep);
    segments.push(2);
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: max_len });
    }
    let mut truncated_words = 0;
    for (k, w) in scene_words.iter().enumerate() {
        let p = vocab.pieces(w);
        if ids.len() + p.len() > max_len {
            truncated_words = scene_words.len() - k;
            break;
        }
        segments.extend(std::iter::repeat(2).take(p.len()));
        ids.extend(p);
    }
    Ok(GenBatch {
        input_ids: ids,
        segments,
        target_ids: Vec::new(),
        truncated_words,
    })
}

/// Answer pieces followed by `[EOS]`.
pub fn target_pieces(vocab: &Vocab, answer: &[String]) -> Vec<usize> {
    let mut t: Vec<usize> = answer.iter().flat_map(|w| vocab.pieces(w)).collect();
    t.push(vocab.special(EOS));
    t
}

/// Row `v` holds the mean one-hot spelling of vocabulary entry `v` over the
/// 36 characters `a-z0-9`; entries without a spelling are zero.
fn spelling_matrix(vocab: &Vocab) -> Tensor {
    let alphabet: Vec<char> = ('a'..='z').chain('0'..='9').collect();
    let col: HashMap<char, usize> = alphabet.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut m = Tensor::zeros(vocab.len(), alphabet.len());
    for v in 0..vocab.len() {
        let tok = vocab.token(v);
        let spelling: Vec<usize> = match tok.strip_prefix('#') {
            Some(c) if c.chars().count() == 1 => c.chars().filter_map(|c| col.get(&c).copied()).collect(),
            _ if tok.starts_with('[') || tok.chars().all(|c| c.is_ascii_digit()) => Vec::new(),
            _ => tok.chars().filter_map(|c| col.get(&c).copied()).collect(),
        };
        let n = spelling.len() as f64;
        for c in spelling {
            let r = m.row_mut(v);
            r[c] += 1.0 / n;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct AgmModel {
    pub config: AgmConfig,
    pub store: ParamStore,
    vocab: Vocab,
    spelling: Tensor,
    own: ParamId,
    chars: ParamId,
    position: ParamId,
    segment: ParamId,
    dec_position: ParamId,
    out_bias: ParamId,
    encoder: Vec<EncoderBlock>,
    ln_memory: LayerNorm,
    decoder: Vec<DecoderBlock>,
    ln_out: LayerNorm,
}

impl AgmModel {
    pub fn new(config: AgmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new();
        let spelling = spelling_matrix(&vocab);
        let d = config.d_model;
        let dims = config.dims();
        let mut s = ParamStore::new();
        let own = embedding(&mut s, "gen.own", vocab.len(), d, &mut rng);
        let chars = s.add_uniform("gen.chars", spelling.cols(), d, 0.5, &mut rng);
        let position = embedding(&mut s, "gen.position", config.max_input_len, d, &mut rng);
        let segment = embedding(&mut s, "gen.segment", 3, d, &mut rng);
        let dec_position = embedding(&mut s, "gen.dec_position", config.max_decode_len + 1, d, &mut rng);
        let out_bias = s.add_zeros("gen.out_bias", 1, vocab.len());
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderBlock::new(&mut s, &format!("gen.enc{l}"), dims, &mut rng))
            .collect();
        let ln_memory = LayerNorm::new(&mut s, "gen.ln_memory", d);
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderBlock::new(&mut s, &format!("gen.dec{l}"), dims, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut s, "gen.ln_out", d);
        Ok(AgmModel {
            config,
            store: s,
            vocab,
            spelling,
            own,
            chars,
            position,
            segment,
            dec_position,
            out_bias,
            encoder,
            ln_memory,
            decoder,
            ln_out,
        })
    }

    pub fn from_store(config: AgmConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        validate_shapes(&model.store, &store)?;
        model.store = store;
        Ok(model)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn batch(&self, question: &[String], selected: &[String], scene_words: &[String]) -> Result<GenBatch> {
        build_gen_input(&self.vocab, question, selected, scene_words, self.config.max_input_len)
    }

    fn table(&self, g: &mut Graph) -> NodeId {
        let own = g.param(self.own);
        let m = g.input(self.spelling.clone());
        let c = g.param(self.chars);
        let spelled = g.matmul(m, c);
        g.add(own, spelled)
    }

    fn encode(&self, g: &mut Graph, table: NodeId, batch: &GenBatch) -> Result<NodeId> {
        let n = batch.input_ids.len();
        if n > self.config.max_input_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_input_len });
        }
        let x = g.gather_rows(table, &batch.input_ids);
        let p = g.embed(self.position, &(0..n).collect::<Vec<_>>());
        let s = g.embed(self.segment, &batch.segments);
        let x = g.add(x, p);
        let mut x = g.add(x, s);
        for b in &self.encoder {
            x = b.forward(g, x, &Mask::None);
        }
        Ok(self.ln_memory.forward(g, x))
    }

    /// Logits (`len(prefix) x V`) for the next piece after each prefix position.
    fn decode(&self, g: &mut Graph, table: NodeId, memory: NodeId, prefix: &[usize]) -> NodeId {
        let n = prefix.len();
        let y = g.gather_rows(table, prefix);
        let p = g.embed(self.dec_position, &(0..n).collect::<Vec<_>>());
        let mut y = g.add(y, p);
        for b in &self.decoder {
            y = b.forward(g, y, memory, &Mask::Causal);
        }
        let y = self.ln_out.forward(g, y);
        let logits = g.matmul_bt(y, table);
        let bias = g.param(self.out_bias);
        g.add_row(logits, bias)
    }

    /// Teacher-forced summed cross-entropy of `batch.target_ids`.
    pub fn loss_node(&self, g: &mut Graph, batch: &GenBatch) -> Result<NodeId> {
        let t = &batch.target_ids;
        if t.is_empty() || t.len() > self.config.max_decode_len + 1 {
            return Err(Error::SequenceTooLong { len: t.len(), max: self.config.max_decode_len + 1 });
        }
        let table = self.table(g);
        let memory = self.encode(g, table, batch)?;
        let mut prefix = vec![self.vocab.special(BOS)];
        prefix.extend_from_slice(&t[..t.len() - 1]);
        let logits = self.decode(g, table, memory, &prefix);
        Ok(g.cross_entropy(logits, t))
    }

    pub fn loss_and_grads(&self, batch: &GenBatch, grads: &mut Grads) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let loss = self.loss_node(&mut g, batch)?;
        g.backward(loss, grads);
        Ok(g.value(loss).item())
    }

    /// Decodes answer pieces (without `[EOS]`).
    pub fn generate_pieces(&self, batch: &GenBatch, cfg: &DecodeConfig) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.store);
        let table = self.table(&mut g);
        let memory = self.encode(&mut g, table, batch)?;
        let bos = self.vocab.special(BOS);
        let eos = self.vocab.special(EOS);
        let k = cfg.beam_size.max(1);
        let vocab_len = self.vocab.len();
        // (pieces after BOS, log prob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        for _ in 0..self.config.max_decode_len {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (bi, (pieces, score, done)) in beams.iter().enumerate() {
                if *done {
                    cands.push((*score, bi, usize::MAX));
                    continue;
                }
                let mut prefix = vec![bos];
                prefix.extend(pieces);
                let logits = self.decode(&mut g, table, memory, &prefix);
                let row = g.value(logits).row(prefix.len() - 1);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (tok, &v) in row.iter().enumerate().take(vocab_len) {
                    cands.push((score + v - log_z, bi, tok));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(k);
            beams = cands
                .into_iter()
                .map(|(score, bi, tok)| {
                    let (pieces, _, done) = &beams[bi];
                    if *done {
                        (pieces.clone(), score, true)
                    } else if tok == eos {
                        (pieces.clone(), score, true)
                    } else {
                        let mut p = pieces.clone();
                        p.push(tok);
                        (p, score, false)
                    }
                })
                .collect();
        }
        Ok(beams.swap_remove(0).0)
    }

    pub fn generate(
        &self,
        question: &[String],
        selected: &[String],
        scene_words: &[String],
        cfg: &DecodeConfig,
    ) -> Result<Vec<String>> {
        let batch = self.batch(question, selected, scene_words)?;
        let pieces = self.generate_pieces(&batch, cfg)?;
        Ok(self.vocab.detokenize(&pieces))
    }
}

/// Whether `ids` holds a spelled-out word.
pub fn has_spelled_word(vocab: &Vocab, ids: &[usize]) -> bool {
    ids.contains(&vocab.special(SPELL))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Optimizer, OptimizerConfig};

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tiny() -> AgmModel {
        AgmModel::new(
            AgmConfig {
                d_model: 16,
                heads: 2,
                d_ff: 32,
                encoder_layers: 1,
                decoder_layers: 1,
                max_input_len: 48,
                max_decode_len: 8,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn input_layout_keeps_both_separators() {
        let v = Vocab::new();
        let sep = v.special(SEP);
        let b = build_gen_input(&v, &words("what is the number ?"), &[], &words("exit 15"), 64).unwrap();
        assert_eq!(b.input_ids.iter().filter(|&&i| i == sep).count(), 2);
        let first = b.input_ids.iter().position(|&i| i == sep).unwrap();
        assert_eq!(b.input_ids[first + 1], sep);
        let again = build_gen_input(&v, &words("what is the number ?"), &[], &words("exit 15"), 64).unwrap();
        assert_eq!(b, again);
        let dup = build_gen_input(&v, &words("what ?"), &words("exit 15"), &words("exit 15"), 64).unwrap();
        assert_eq!(dup.input_ids.len(), 2 + 2 + 2 * 4);
    }

    #[test]
    fn overflow_truncates_scene_tail_only() {
        let v = Vocab::new();
        let scene = words("exit stop 15 201 unted");
        let b = build_gen_input(&v, &words("what is the word ?"), &words("exit"), &scene, 12).unwrap();
        assert_eq!(b.truncated_words, 3);
        assert_eq!(b.input_ids.len(), 5 + 1 + 1 + 1 + 2);
        assert!(build_gen_input(&v, &words("what is the word ?"), &scene, &[], 8).is_err());
    }

    #[test]
    fn targets_end_with_eos() {
        let v = Vocab::new();
        let t = target_pieces(&v, &words("united 15"));
        assert_eq!(*t.last().unwrap(), v.special(EOS));
        assert_eq!(t.len(), 1 + 3 + 1);
    }

    #[test]
    fn spelling_rows_are_means() {
        let v = Vocab::new();
        let m = spelling_matrix(&v);
        let united = v.id("united").unwrap();
        assert!((m.row(united).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.row(v.special(SEP)).iter().sum::<f64>(), 0.0);
        assert_eq!(m.row(v.id("5").unwrap()).iter().sum::<f64>(), 0.0);
        assert_eq!(m.row(v.id("#u").unwrap()).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn uniform_head_gives_length_times_log_vocab() {
        let mut model = tiny();
        let n = model.vocab.len() as f64;
        model.store.zero_all();
        let mut batch = model.batch(&words("what ?"), &words("exit"), &words("exit 15")).unwrap();
        batch.target_ids = target_pieces(&model.vocab, &words("exit 15"));
        let mut g = Graph::new(&model.store);
        let l = model.loss_node(&mut g, &batch).unwrap();
        let expected = batch.target_ids.len() as f64 * n.ln();
        assert!((g.value(l).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn overfits_a_small_batch_and_beam_one_is_greedy() {
        let mut model = tiny();
        let data: Vec<(Vec<String>, Vec<String>, Vec<String>)> = (0..10)
            .map(|i| {
                let w = crate::vocab::WORLD_WORDS[i * 7].to_string();
                let n = (i * 37 + 5).to_string();
                (words("what is the word ?"), vec![w.clone()], vec![n, w])
            })
            .collect();
        let batches: Vec<GenBatch> = data
            .iter()
            .map(|(q, l, o)| {
                let mut b = model.batch(q, l, o).unwrap();
                b.target_ids = target_pieces(&model.vocab, l);
                b
            })
            .collect();
        let mut opt = Optimizer::new(&OptimizerConfig::adam(0.01), &model.store);
        let total = |m: &AgmModel| -> f64 {
            batches.iter().map(|b| { let mut g = Graph::new(&m.store); let l = m.loss_node(&mut g, b).unwrap(); g.value(l).item() }).sum()
        };
        let start = total(&model);
        for step in 0..200 {
            let mut grads = Grads::new(&model.store);
            for b in &batches {
                model.loss_and_grads(b, &mut grads).unwrap();
            }
            opt.step(&mut model.store, &mut grads, step, 200);
        }
        assert!(total(&model) < start);
        for (q, l, o) in &data {
            let greedy = model.generate(q, l, o, &DecodeConfig { beam_size: 1 }).unwrap();
            assert_eq!(&greedy, l);
        }
        let (q, l, o) = &data[0];
        let beam = model.generate(q, l, o, &DecodeConfig { beam_size: 4 }).unwrap();
        assert_eq!(&beam, l);
        assert!(has_spelled_word(&model.vocab, &model.vocab.pieces("unted")));
    }
}
