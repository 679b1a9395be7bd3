//! Training, prediction and the ablation runner.
//!
//! Training is staged: the answer locator first, then the generator on top
//! of the locator's selections. Every random choice draws from a ChaCha
//! stream derived from the run seed, so a `(data, config, seed)` triple fixes
//! all logs, checkpoints and reports.

mod config;
mod train;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{apply_override, AgmTrainConfig, AlmTrainConfig, PipelineConfig};
pub use train::{
    exact_match, locator_selections, scene_words, selection_f1, split_validation, train_agm, train_alm,
    validate_alm, AgmEpochLog, AgmRun, AlmEpochLog, AlmRun, AlmValidation,
};

use crate::agm::{AgmModel, DecodeConfig};
use crate::alm::{select_words, AlmModel};
use crate::dataworld::{corrupt_ocr, CorruptionSpec, SceneInstance};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate_run, PredictionRecord, Report};
use crate::geometry::BBox;

/// Derives an independent seed for one named random stream of a run.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ crate::dataworld::corrupt::stable_hash(tag)
}

/// Which locator probability picks the tokens handed to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// No locator; the selection segment is empty.
    None,
    /// Threshold `P_v`.
    Visual,
    /// Threshold `P_l`.
    Linguistic,
    /// Threshold `P_w`.
    Mixed,
}

impl Selection {
    pub const ALL: [Selection; 4] = [Selection::None, Selection::Visual, Selection::Linguistic, Selection::Mixed];

    pub fn label(self) -> &'static str {
        match self {
            Selection::None => "None",
            Selection::Visual => "V",
            Selection::Linguistic => "L",
            Selection::Mixed => "V+L",
        }
    }
}

/// Runs locator and generator over `scenes`.
pub fn predict(
    alm: Option<&AlmModel>,
    agm: &AgmModel,
    scenes: &[SceneInstance],
    selection: Selection,
    decode: &DecodeConfig,
) -> Result<Vec<PredictionRecord>> {
    scenes
        .iter()
        .map(|s| {
            let (sel, p_w, b_p, p_s) = match (selection, alm) {
                (Selection::None, _) => (Vec::new(), Vec::new(), BBox::ZERO, 0.0),
                (_, None) => return Err(Error::Config("this selection needs a trained locator".into())),
                (_, Some(alm)) => {
                    let out = alm.predict(&s.question, &s.tokens, &s.visual_grid)?;
                    let tau = alm.config.loss.selection_threshold;
                    let sel = match selection {
                        Selection::Visual => select_words(&out.p_v, &s.tokens, tau),
                        Selection::Linguistic => select_words(&out.p_l, &s.tokens, tau),
                        _ => out.selected.clone(),
                    };
                    (sel, out.p_w, out.b_p, out.p_s)
                }
            };
            let words: Vec<String> = sel.iter().map(|(_, w)| w.clone()).collect();
            let answer = agm.generate(&s.question, &words, &scene_words(s), decode)?;
            Ok(PredictionRecord {
                instance_id: s.id.clone(),
                predicted_answer: answer.join(" "),
                p_w,
                b_p,
                p_s,
                selected: sel,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub anls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<SeedResult>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6} {:>10} {:>8}  per-seed accuracy\n", "row", "accuracy", "sd");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|x| format!("{:.2}", 100.0 * x.accuracy)).collect();
            s.push_str(&format!(
                "{:<6} {:>10.2} {:>8.2}  {}\n",
                r.variant,
                100.0 * r.mean_accuracy,
                100.0 * r.sd_accuracy,
                per.join(" ")
            ));
        }
        s
    }
}

/// Sample mean and standard deviation (`n - 1` denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Models trained for one seed of the ablation. Every selection row reads
/// the same locator: `V` thresholds its `P_v`, `L` its `P_l`, `V+L` its `P_w`.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub seed: u64,
    pub alm: AlmRun,
    pub agm: AgmRun,
}

impl SeedModels {
    pub fn locator(&self, selection: Selection) -> Option<&AlmModel> {
        match selection {
            Selection::None => None,
            _ => Some(&self.alm.model),
        }
    }
}

fn check_diverged(what: &str, d: Option<(usize, usize)>) -> Result<()> {
    match d {
        Some((epoch, step)) => Err(Error::Diverged { epoch, step }).map_err(|e| {
            eprintln!("{what}: {e}");
            e
        }),
        None => Ok(()),
    }
}

/// Trains the locator and the generator for `seed`, exactly as the default
/// pipeline does with the same seed.
pub fn train_seed(train: &[SceneInstance], cfg: &PipelineConfig, seed: u64) -> Result<SeedModels> {
    let alm = train_alm(train, &cfg.alm, &cfg.alm_train, seed)?;
    check_diverged("locator", alm.diverged)?;
    let agm = train_agm(train, Some(&alm.model), &cfg.agm, &cfg.agm_train, seed)?;
    check_diverged("generator", agm.diverged)?;
    Ok(SeedModels { seed, alm, agm })
}

pub fn evaluate_seed(models: &SeedModels, test: &[SceneInstance], decode: &DecodeConfig) -> Result<Vec<(Selection, Report)>> {
    Selection::ALL
        .iter()
        .map(|&sel| {
            let preds = predict(models.locator(sel), &models.agm.model, test, sel, decode)?;
            Ok((sel, evaluate_run(&preds, test)?))
        })
        .collect()
}

pub fn summarize_ablation(per_seed: &[(u64, Vec<(Selection, Report)>)]) -> AblationReport {
    let rows = Selection::ALL
        .iter()
        .map(|&sel| {
            let per_seed: Vec<SeedResult> = per_seed
                .iter()
                .map(|(seed, reports)| {
                    let r = &reports.iter().find(|(s, _)| *s == sel).expect("every selection evaluated").1;
                    SeedResult {
                        seed: *seed,
                        accuracy: r.accuracy,
                        anls: r.anls,
                    }
                })
                .collect();
            let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
            let (mean, sd) = mean_sd(&accs);
            AblationRow {
                variant: sel.label().to_string(),
                per_seed,
                mean_accuracy: mean,
                sd_accuracy: sd,
            }
        })
        .collect();
    AblationReport { rows }
}

/// Trains and evaluates every variant for each seed.
pub fn run_ablation(
    train: &[SceneInstance],
    test: &[SceneInstance],
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let models = train_seed(train, cfg, seed)?;
        per_seed.push((seed, evaluate_seed(&models, test, &cfg.decode)?));
    }
    Ok(summarize_ablation(&per_seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoisingResult {
    pub generator_exact_match: f64,
    pub copy_exact_match: f64,
    pub n: usize,
}

/// Exact match on OCR-corrupted scenes for the generator and for a baseline
/// that answers with the selected tokens verbatim.
pub fn evaluate_denoising(
    alm: &AlmModel,
    agm: &AgmModel,
    test: &[SceneInstance],
    corruption: &CorruptionSpec,
    decode: &DecodeConfig,
) -> Result<DenoisingResult> {
    let (mut gen, mut copy) = (0usize, 0usize);
    for s in test {
        let c = corrupt_ocr(s, corruption);
        let out = alm.predict(&c.question, &c.tokens, &c.visual_grid)?;
        let words: Vec<String> = out.selected.into_iter().map(|(_, w)| w).collect();
        copy += usize::from(exact_match(&words, s));
        let pred = agm.generate(&c.question, &words, &scene_words(&c), decode)?;
        gen += usize::from(exact_match(&pred, s));
    }
    let n = test.len().max(1) as f64;
    Ok(DenoisingResult {
        generator_exact_match: gen as f64 / n,
        copy_exact_match: copy as f64 / n,
        n: test.len(),
    })
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".ltg.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn sub_seeds_differ_by_tag() {
        assert_ne!(sub_seed(1, "a"), sub_seed(1, "b"));
        assert_ne!(sub_seed(1, "a"), sub_seed(2, "a"));
    }
}
