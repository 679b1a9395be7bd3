//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agm::{AgmModel, GenBatch};
use crate::alm::AlmModel;
use crate::autograd::Graph;
use crate::dataworld::SceneInstance;
use crate::error::Result;
use crate::params::{Grads, ParamStore};
use crate::preprocess::AlmTargets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub coords: usize,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged on absolute error.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            coords: 128,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub loss: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub passed: bool,
}

/// Compares `grads` with central differences of `loss` on `coords`
/// coordinates drawn from the parameters that received a gradient.
pub fn check_gradients(
    name: &str,
    store: &ParamStore,
    grads: &Grads,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut candidates: Vec<usize> = Vec::new();
    let mut flat = 0;
    for id in store.ids() {
        let n = store.get(id).len();
        if grads.get(id).is_some() {
            candidates.extend(flat..flat + n);
        }
        flat += n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked: Vec<usize> = candidates
        .choose_multiple(&mut rng, cfg.coords.min(candidates.len()))
        .copied()
        .collect();
    let base = loss(store)?;
    let mut work = store.clone();
    let mut worst: Option<CoordCheck> = None;
    for &flat in &picked {
        let (id, offset) = store.locate(flat);
        let orig = store.get(id).data()[offset];
        work.get_mut(id).data_mut()[offset] = orig + cfg.eps;
        let up = loss(&work)?;
        work.get_mut(id).data_mut()[offset] = orig - cfg.eps;
        let down = loss(&work)?;
        work.get_mut(id).data_mut()[offset] = orig;
        let numeric = (up - down) / (2.0 * cfg.eps);
        let analytic = grads.flat_value(store, flat);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.denominator_floor);
        let rel_error = (analytic - numeric).abs() / denom;
        if worst.as_ref().map_or(true, |w| rel_error > w.rel_error) {
            worst = Some(CoordCheck {
                param: store.name(id).to_string(),
                offset,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        name: name.to_string(),
        loss: base,
        checked: picked.len(),
        max_rel_error,
        passed: max_rel_error <= cfg.tolerance,
        worst,
    })
}

pub fn check_alm(model: &AlmModel, scene: &SceneInstance, targets: &AlmTargets, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut grads = Grads::new(&model.store);
    model.loss_and_grads(scene, targets, &mut grads)?;
    check_gradients(
        "Loss_a",
        &model.store,
        &grads,
        |s| {
            let mut g = Graph::new(s);
            let (_, total, _) = model.loss_node(&mut g, scene, targets)?;
            Ok(g.value(total).item())
        },
        cfg,
    )
}

pub fn check_agm(model: &AgmModel, batch: &GenBatch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut grads = Grads::new(&model.store);
    model.loss_and_grads(batch, &mut grads)?;
    check_gradients(
        "Loss_g",
        &model.store,
        &grads,
        |s| {
            let mut g = Graph::new(s);
            let l = model.loss_node(&mut g, batch)?;
            Ok(g.value(l).item())
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn catches_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(vec![0.3, -1.2, 2.0]));
        let loss = |s: &ParamStore| -> Result<f64> { Ok(s.get(x).data().iter().map(|v| v * v * v).sum()) };
        let mut good = Grads::new(&store);
        good.accumulate(x, &Tensor::row_vector(store.get(x).data().iter().map(|v| 3.0 * v * v).collect()));
        let cfg = GradCheckConfig::default();
        let r = check_gradients("cube", &store, &good, loss, &cfg).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed, "{r:?}");
        let mut bad = Grads::new(&store);
        bad.accumulate(x, &Tensor::row_vector(vec![0.27, 4.32, 12.5]));
        assert!(!check_gradients("cube", &store, &bad, loss, &cfg).unwrap().passed);
    }
}
