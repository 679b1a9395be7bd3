//! Answer metrics: edit distance, ANLS and ten-annotator soft-vote accuracy,
//! plus aggregation of a prediction file into a report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataworld::SceneInstance;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ANLS_THRESHOLD: f64 = 0.5;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized Levenshtein similarity of two already normalized strings.
fn nls(pred: &str, gold: &str) -> f64 {
    let (lp, lg) = (pred.chars().count(), gold.chars().count());
    match (lp, lg) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 1.0 - levenshtein(pred, gold) as f64 / lp.max(lg) as f64,
    }
}

/// Best similarity over the golds, zeroed below `threshold`.
pub fn anls(pred: &str, golds: &[String], threshold: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Config("anls needs at least one gold answer".into()));
    }
    let p = normalize_answer(pred);
    let best = golds
        .iter()
        .map(|g| nls(&p, &normalize_answer(g)))
        .fold(0.0, f64::max);
    Ok(if best < threshold { 0.0 } else { best })
}

/// `min(#matching golds / 3, 1)` over exactly ten golds.
pub fn vqa_accuracy(pred: &str, golds: &[String]) -> Result<f64> {
    if golds.len() != 10 {
        return Err(Error::GoldCount(golds.len()));
    }
    let p = normalize_answer(pred);
    let hits = golds.iter().filter(|g| normalize_answer(g) == p).count();
    Ok((hits as f64 / 3.0).min(1.0))
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub predicted_answer: String,
    #[serde(rename = "P_w")]
    pub p_w: Vec<f64>,
    pub b_p: BBox,
    pub p_s: f64,
    /// `(token index, word)` in reading order.
    pub selected: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub n: usize,
    pub accuracy: f64,
    pub anls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub n: usize,
    pub accuracy: f64,
    pub anls: f64,
    pub per_template: BTreeMap<String, TemplateScore>,
}

impl Report {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>9} {:>7}", "template", "n", "accuracy", "anls");
        for (name, t) in &self.per_template {
            let _ = writeln!(s, "{:<16} {:>6} {:>9.4} {:>7.4}", name, t.n, t.accuracy, t.anls);
        }
        let _ = writeln!(s, "{:<16} {:>6} {:>9.4} {:>7.4}", "all", self.n, self.accuracy, self.anls);
        s
    }
}

/// Scores predictions against the dataset. Every dataset id needs exactly
/// one prediction; means are taken in dataset order.
pub fn evaluate_run(predictions: &[PredictionRecord], dataset: &[SceneInstance]) -> Result<Report> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.instance_id.as_str(), p).is_some() {
            return Err(Error::PredictionCoverage(format!("duplicate id {}", p.instance_id)));
        }
    }
    let mut total = (0.0, 0.0);
    let mut per: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for inst in dataset {
        let p = by_id
            .get(inst.id.as_str())
            .ok_or_else(|| Error::PredictionCoverage(format!("missing id {}", inst.id)))?;
        let acc = vqa_accuracy(&p.predicted_answer, &inst.answers)?;
        let an = anls(&p.predicted_answer, &inst.answers, DEFAULT_ANLS_THRESHOLD)?;
        total.0 += acc;
        total.1 += an;
        let e = per.entry(inst.template.name().to_string()).or_default();
        e.0 += 1;
        e.1 += acc;
        e.2 += an;
    }
    if predictions.len() != dataset.len() {
        return Err(Error::PredictionCoverage(format!(
            "{} predictions for {} instances",
            predictions.len(),
            dataset.len()
        )));
    }
    let n = dataset.len();
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        n,
        accuracy: mean(total.0, n),
        anls: mean(total.1, n),
        per_template: per
            .into_iter()
            .map(|(k, (c, a, l))| {
                (
                    k,
                    TemplateScore {
                        n: c,
                        accuracy: mean(a, c),
                        anls: mean(l, c),
                    },
                )
            })
            .collect(),
    })
}
