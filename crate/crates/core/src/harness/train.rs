use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AgmTrainConfig, AlmTrainConfig};
use super::sub_seed;
use crate::agm::{target_pieces, AgmConfig, AgmModel, DecodeConfig, GenBatch};
use crate::alm::{AlmConfig, AlmModel};
use crate::dataworld::{augment, corrupt_ocr, reading_order, CorruptionSpec, SceneInstance};
use crate::error::{Error, Result};
use crate::evalsuite::normalize_answer;
use crate::geometry::{iou, BBox};
use crate::optim::Optimizer;
use crate::params::Grads;
use crate::preprocess::{build_targets, AlmTargets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlmEpochLog {
    pub epoch: usize,
    pub loss_bbox: f64,
    pub loss_s: f64,
    pub loss_a: f64,
    pub val_selection_f1: f64,
    pub val_mean_iou: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AlmRun {
    pub model: AlmModel,
    pub log: Vec<AlmEpochLog>,
    /// Set when training stopped on a non-finite loss; `model` then holds
    /// the parameters from before the failing step.
    pub diverged: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgmEpochLog {
    pub epoch: usize,
    pub loss_g: f64,
    /// `gold` or `predicted` selections.
    pub exposure: String,
    pub val_exact_match: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AgmRun {
    pub model: AgmModel,
    pub log: Vec<AgmEpochLog>,
    pub diverged: Option<(usize, usize)>,
}

/// Splits off the last `n` scenes for validation.
pub fn split_validation(data: &[SceneInstance], n: usize) -> (&[SceneInstance], &[SceneInstance]) {
    let n = n.min(data.len() / 2);
    data.split_at(data.len() - n)
}

/// `2|S∩G| / (|S|+|G|)`, 1 when both are empty.
pub fn selection_f1(selected: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> f64 {
    if selected.is_empty() && gold.is_empty() {
        return 1.0;
    }
    2.0 * selected.intersection(gold).count() as f64 / (selected.len() + gold.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmValidation {
    pub selection_f1: f64,
    pub mean_iou: f64,
}

pub fn validate_alm(model: &AlmModel, data: &[SceneInstance]) -> Result<AlmValidation> {
    if data.is_empty() {
        return Ok(AlmValidation { selection_f1: 0.0, mean_iou: 0.0 });
    }
    let (mut f1, mut miou) = (0.0, 0.0);
    for s in data {
        let t = build_targets(&s.answer_tokens, &s.tokens);
        let out = model.predict(&s.question, &s.tokens, &s.visual_grid)?;
        let sel: BTreeSet<usize> = out.selected.iter().map(|(i, _)| *i).collect();
        f1 += selection_f1(&sel, &t.matched_indices);
        miou += iou(&out.b_p, &t.answer_box);
    }
    let n = data.len() as f64;
    Ok(AlmValidation {
        selection_f1: f1 / n,
        mean_iou: miou / n,
    })
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Trains the answer locator on `data`, holding out the configured
/// validation tail. Deterministic in `(data, config, seed)`.
pub fn train_alm(data: &[SceneInstance], alm: &AlmConfig, cfg: &AlmTrainConfig, seed: u64) -> Result<AlmRun> {
    let (train, val) = split_validation(data, cfg.validation_size);
    if train.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut model = AlmModel::new(alm.clone(), sub_seed(seed, "alm.init"))?;
    let targets: Vec<AlmTargets> = train.iter().map(|s| build_targets(&s.answer_tokens, &s.tokens)).collect();
    let mut opt = Optimizer::new(&cfg.optimizer, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "alm.order"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "alm.augment"));
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_bbox, mut sum_s, mut sum_a) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Grads::new(&model.store);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let parts = if cfg.augment.prob > 0.0 {
                    let scene = augment(&train[i], &cfg.augment, &mut aug_rng);
                    let t = build_targets(&scene.answer_tokens, &scene.tokens);
                    model.loss_and_grads(&scene, &t, &mut grads)?
                } else {
                    model.loss_and_grads(&train[i], &targets[i], &mut grads)?
                };
                sum_bbox += parts.bbox;
                sum_s += parts.s;
                sum_a += parts.total;
                batch_loss += parts.total;
            }
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Ok(AlmRun {
                    model,
                    log,
                    diverged: Some((epoch, b)),
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            let before = model.store.clone();
            opt.step(&mut model.store, &mut grads, step, total_steps);
            if !model.store.all_finite() {
                model.store = before;
                return Ok(AlmRun {
                    model,
                    log,
                    diverged: Some((epoch, b)),
                });
            }
            step += 1;
        }
        let v = validate_alm(&model, val)?;
        let n = train.len() as f64;
        log.push(AlmEpochLog {
            epoch,
            loss_bbox: sum_bbox / n,
            loss_s: sum_s / n,
            loss_a: sum_a / n,
            val_selection_f1: v.selection_f1,
            val_mean_iou: v.mean_iou,
            lr: cfg.optimizer.lr_at(step.saturating_sub(1), total_steps),
        });
    }
    Ok(AlmRun {
        model,
        log,
        diverged: None,
    })
}

/// Scene words in reading order.
pub fn scene_words(scene: &SceneInstance) -> Vec<String> {
    let boxes: Vec<BBox> = scene.token_boxes();
    reading_order(&boxes).into_iter().map(|i| scene.tokens[i].word.clone()).collect()
}

/// Gold selection with random drops and distractor insertions, in reading order.
fn noisy_gold_selection(scene: &SceneInstance, cfg: &AgmTrainConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let gold = build_targets(&scene.answer_tokens, &scene.tokens).matched_indices;
    reading_order(&scene.token_boxes())
        .into_iter()
        .filter(|i| {
            if gold.contains(i) {
                !rng.gen_bool(cfg.gold_drop_prob)
            } else {
                rng.gen_bool(cfg.gold_insert_prob)
            }
        })
        .map(|i| scene.tokens[i].word.clone())
        .collect()
}

fn agm_example(model: &AgmModel, scene: &SceneInstance, selected: &[String]) -> Result<GenBatch> {
    let mut b = model.batch(&scene.question, selected, &scene_words(scene))?;
    b.target_ids = target_pieces(model.vocab(), &scene.answer_tokens);
    Ok(b)
}

/// Selections a trained locator makes on each scene.
pub fn locator_selections(alm: &AlmModel, scenes: &[SceneInstance]) -> Result<Vec<Vec<String>>> {
    scenes
        .iter()
        .map(|s| {
            let out = alm.predict(&s.question, &s.tokens, &s.visual_grid)?;
            Ok(out.selected.into_iter().map(|(_, w)| w).collect())
        })
        .collect()
}

/// Exact match of the normalized answer against the canonical gold answer.
pub fn exact_match(pred: &[String], scene: &SceneInstance) -> bool {
    normalize_answer(&pred.join(" ")) == normalize_answer(&scene.canonical_answer())
}

/// Trains the answer generator. Early epochs see the noised gold selection,
/// later epochs the selection of `alm` (when given). Scenes are OCR-corrupted
/// at random so the generator learns to repair misread words.
pub fn train_agm(
    data: &[SceneInstance],
    alm: Option<&AlmModel>,
    agm: &AgmConfig,
    cfg: &AgmTrainConfig,
    seed: u64,
) -> Result<AgmRun> {
    cfg.validate()?;
    let (train, val) = split_validation(data, cfg.validation_size);
    if train.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut model = AgmModel::new(*agm, sub_seed(seed, "agm.init"))?;
    let corruption = CorruptionSpec::new(cfg.corruption_char_rate, 0.0, sub_seed(seed, "agm.corrupt"))?;
    // One fixed corrupted copy per scene for the predicted-selection phase.
    let corrupted: Vec<SceneInstance> = train.iter().map(|s| corrupt_ocr(s, &corruption)).collect();
    let predicted = match alm {
        Some(a) => Some((locator_selections(a, train)?, locator_selections(a, &corrupted)?)),
        None => None,
    };
    let val_selected = match alm {
        Some(a) => locator_selections(a, val)?,
        None => val
            .iter()
            .map(|s| {
                let gold = build_targets(&s.answer_tokens, &s.tokens).matched_indices;
                reading_order(&s.token_boxes())
                    .into_iter()
                    .filter(|i| gold.contains(i))
                    .map(|i| s.tokens[i].word.clone())
                    .collect()
            })
            .collect(),
    };
    let gold_epochs = if predicted.is_some() {
        (cfg.epochs as f64 * cfg.gold_fraction).round() as usize
    } else {
        cfg.epochs
    };

    let mut opt = Optimizer::new(&cfg.optimizer, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "agm.order"));
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let gold_phase = epoch <= gold_epochs;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Grads::new(&model.store);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let use_corrupt = rng.gen_bool(cfg.corruption_prob);
                let empty = rng.gen_bool(cfg.empty_selection_prob);
                let example = if gold_phase {
                    let scene = if use_corrupt {
                        let fresh = CorruptionSpec {
                            seed: rng.gen(),
                            ..corruption
                        };
                        corrupt_ocr(&train[i], &fresh)
                    } else {
                        train[i].clone()
                    };
                    let sel = if empty { Vec::new() } else { noisy_gold_selection(&scene, cfg, &mut rng) };
                    agm_example(&model, &scene, &sel)?
                } else {
                    let (clean, noisy) = predicted.as_ref().expect("predicted phase needs a locator");
                    let (scene, sel) = if use_corrupt { (&corrupted[i], &noisy[i]) } else { (&train[i], &clean[i]) };
                    let sel = if empty { Vec::new() } else { sel.clone() };
                    agm_example(&model, scene, &sel)?
                };
                let l = model.loss_and_grads(&example, &mut grads)?;
                sum += l;
                batch_loss += l;
            }
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Ok(AgmRun {
                    model,
                    log,
                    diverged: Some((epoch, b)),
                });
            }
            grads.scale(1.0 / chunk.len() as f64);
            let before = model.store.clone();
            opt.step(&mut model.store, &mut grads, step, total_steps);
            if !model.store.all_finite() {
                model.store = before;
                return Ok(AgmRun {
                    model,
                    log,
                    diverged: Some((epoch, b)),
                });
            }
            step += 1;
        }
        let mut hits = 0usize;
        for (s, sel) in val.iter().zip(&val_selected) {
            let pred = model.generate(&s.question, sel, &scene_words(s), &DecodeConfig::default())?;
            hits += usize::from(exact_match(&pred, s));
        }
        log.push(AgmEpochLog {
            epoch,
            loss_g: sum / train.len() as f64,
            exposure: if gold_phase { "gold" } else { "predicted" }.to_string(),
            val_exact_match: if val.is_empty() { 0.0 } else { hits as f64 / val.len() as f64 },
            lr: cfg.optimizer.lr_at(step.saturating_sub(1), total_steps),
        });
    }
    Ok(AgmRun {
        model,
        log,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_edge_cases() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(selection_f1(&s(&[]), &s(&[])), 1.0);
        assert_eq!(selection_f1(&s(&[1]), &s(&[])), 0.0);
        assert_eq!(selection_f1(&s(&[1, 2]), &s(&[2])), 2.0 / 3.0);
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let cfg = crate::dataworld::WorldConfig {
            n_train: 10,
            n_test: 0,
            ..Default::default()
        };
        let d = crate::dataworld::generate_dataset(&cfg, 1).unwrap().train.instances;
        let (t, v) = split_validation(&d, 3);
        assert_eq!((t.len(), v.len()), (7, 3));
        assert_eq!(v[0].id, d[7].id);
        let (t, v) = split_validation(&d, 100);
        assert_eq!((t.len(), v.len()), (5, 5));
    }
}
