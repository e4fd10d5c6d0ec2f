//! Lottery-ticket pruning: rank weights by magnitude, rewind the survivors
//! to their initial values and retrain the sparse network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GammaSchedule, GateLayer};
use crate::mlp::{self, Examples, Mask, MlpModel, TrainConfig, TrainObserver};

/// Number of weights pruned at sparsity `s` out of `n`: `ceil(s * n)`.
///
/// The product is nudged down by a few ulps first, so `0.3 * 10` prunes 3
/// weights rather than 4.
pub fn prune_count(s: f64, n: usize) -> usize {
    let raw = s * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Keep-mask that removes exactly `ceil(s * n)` weights of smallest
/// magnitude, breaking ties toward the lower index.
pub fn magnitude_mask(weights: &[f64], s: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1), got {s}")));
    }
    let k = prune_count(s, weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
    let mut mask = vec![true; weights.len()];
    for &i in &order[..k] {
        mask[i] = false;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    /// Per-round sparsities, strictly increasing; the last is the target.
    pub steps: Vec<f64>,
}

impl SparsitySchedule {
    /// `rounds` steps whose kept fraction shrinks geometrically:
    /// `s_t = 1 - (1 - target)^(t / rounds)`.
    pub fn geometric(target: f64, rounds: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::Config("sparsity schedule needs at least one round".into()));
        }
        if !(0.0..1.0).contains(&target) {
            return Err(Error::Config(format!("target sparsity must lie in [0, 1), got {target}")));
        }
        let mut steps: Vec<f64> = (1..=rounds)
            .map(|t| 1.0 - (1.0 - target).powf(t as f64 / rounds as f64))
            .collect();
        *steps.last_mut().expect("rounds > 0") = target;
        let s = SparsitySchedule { steps };
        s.validate()?;
        Ok(s)
    }

    pub fn target(&self) -> f64 {
        self.steps.last().copied().unwrap_or(0.0)
    }

    pub fn rounds(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("sparsity schedule is empty".into()));
        }
        if self.steps.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(Error::Config("sparsities must lie in [0, 1)".into()));
        }
        if self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "sparsity schedule {:?} is not strictly increasing",
                self.steps
            )));
        }
        Ok(())
    }
}

impl Default for SparsitySchedule {
    fn default() -> Self {
        SparsitySchedule::geometric(0.5, 3).expect("valid default schedule")
    }
}

/// Hooks into a pruning run.
pub trait LtpObserver {
    fn on_round_start(&mut self, _round: usize, _model: &MlpModel) {}
    fn on_step(&mut self, _model: &MlpModel) {}
}

impl LtpObserver for () {}

struct StepForward<'a>(&'a mut dyn LtpObserver);

impl TrainObserver for StepForward<'_> {
    fn on_step(&mut self, model: &MlpModel, _layer: &GateLayer) {
        self.0.on_step(model);
    }
}

/// Rewinds to `init_snapshot * mask` and retrains for `epochs` epochs with the
/// gate layer frozen.
#[allow(clippy::too_many_arguments)]
pub fn ltp_round(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    train_set: &Examples,
    val_set: &Examples,
    mask: Mask,
    cfg: &TrainConfig,
    epochs: usize,
    observer: &mut dyn LtpObserver,
    round: usize,
) -> Result<mlp::TrainHistory> {
    if !layer.is_frozen() {
        return Err(Error::Usage("pruning-aware retraining needs a frozen gate layer".into()));
    }
    model.rewind(mask)?;
    observer.on_round_start(round, model);
    if epochs == 0 {
        return Ok(mlp::TrainHistory::default());
    }
    let mut fwd = StepForward(observer);
    let cfg = TrainConfig {
        patience: cfg.patience.min(epochs),
        ..cfg.clone()
    };
    mlp::train_observed(
        model,
        layer,
        train_set,
        val_set,
        &cfg,
        &GammaSchedule::default(),
        epochs,
        &mut fwd,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub target_sparsity: f64,
    pub sparsity: f64,
    pub pruned: usize,
    pub val_accuracy: Option<f64>,
}

/// Flattened weights for ranking. First-layer weights fed by a gated-off
/// input carry no signal and rank as zero.
fn ranking_weights(model: &MlpModel, layer: &GateLayer) -> Vec<f64> {
    let mut w = model.params().flat_weights();
    if let Some(keep) = &layer.frozen_mask {
        let h = model.arch().hidden;
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                w[i * h..(i + 1) * h].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    w
}

pub fn ltp_run(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    train_set: &Examples,
    val_set: &Examples,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
) -> Result<Vec<RoundMetrics>> {
    ltp_run_observed(model, layer, train_set, val_set, schedule, cfg, &mut ())
}

/// Iterative magnitude pruning with rewind, one round per schedule step.
/// Each round re-ranks the current (trained) weights globally across both
/// layers, so later masks need not contain earlier ones. The layer must be
/// frozen.
pub fn ltp_run_observed(
    model: &mut MlpModel,
    layer: &mut GateLayer,
    train_set: &Examples,
    val_set: &Examples,
    schedule: &SparsitySchedule,
    cfg: &TrainConfig,
    observer: &mut dyn LtpObserver,
) -> Result<Vec<RoundMetrics>> {
    schedule.validate()?;
    let mut metrics = Vec::with_capacity(schedule.rounds());
    for (round, &s) in schedule.steps.iter().enumerate() {
        let flat = magnitude_mask(&ranking_weights(model, layer), s)?;
        let mask = Mask::from_flat(model.arch(), &flat)?;
        ltp_round(
            model,
            layer,
            train_set,
            val_set,
            mask,
            cfg,
            cfg.retrain_epochs,
            observer,
            round,
        )?;
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(mlp::evaluate_examples(model, &layer.deterministic_gates(), val_set)?.accuracy)
        };
        let m = model.mask();
        metrics.push(RoundMetrics {
            round,
            target_sparsity: s,
            sparsity: m.sparsity(),
            pruned: m.len() - m.kept(),
            val_accuracy,
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_model;
    use proptest::prelude::*;

    #[test]
    fn magnitude_mask_examples() {
        assert_eq!(
            magnitude_mask(&[0.1, -0.5, 0.02, 0.9], 0.5).unwrap(),
            vec![false, true, false, true]
        );
        assert_eq!(magnitude_mask(&[0.1, -0.5], 0.0).unwrap(), vec![true, true]);
        assert_eq!(
            magnitude_mask(&[0.3, 0.3, 0.7], 1.0 / 3.0).unwrap(),
            vec![false, true, true]
        );
        assert!(magnitude_mask(&[1.0], 1.0).is_err());
    }

    #[test]
    fn prune_count_is_ceiling() {
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.2, 702), 141);
        assert_eq!(prune_count(0.25, 4), 1);
        assert_eq!(prune_count(0.26, 4), 2);
        assert_eq!(prune_count(0.0, 9), 0);
    }

    #[test]
    fn geometric_schedule() {
        let s = SparsitySchedule::geometric(0.5, 3).unwrap();
        assert_eq!(s.rounds(), 3);
        assert_eq!(s.target(), 0.5);
        let kept_1 = 1.0 - s.steps[0];
        assert!((kept_1.powi(3) - 0.5).abs() < 1e-12);
        assert!(SparsitySchedule { steps: vec![0.2, 0.2] }.validate().is_err());
        assert!(SparsitySchedule::geometric(1.0, 2).is_err());
    }

    fn toy() -> (Examples, Examples) {
        let make = |off: f64| {
            let mut e = Examples::default();
            for i in 0..60 {
                let a = ((i as f64 * 0.37 + off) % 1.0).abs();
                let b = ((i as f64 * 0.61 + off) % 1.0).abs();
                e.x.push(vec![a, b, 0.5]);
                e.y.push(usize::from(a > b));
            }
            e
        };
        (make(0.0), make(0.13))
    }

    fn frozen(d: usize) -> GateLayer {
        let mut l = GateLayer::new(vec![0.0; d], 1.0, 0.0, 0).unwrap();
        l.prune_gates(0.0).unwrap();
        l
    }

    #[test]
    fn rewind_identity_with_zero_epochs() {
        let (tr, va) = toy();
        let mut m = init_model(3, 6, 2, 1).unwrap();
        let mut l = frozen(3);
        mlp::train(&mut m, &mut l, &tr, &va, &TrainConfig::default(), &GammaSchedule::default(), 3).unwrap();
        assert_ne!(m.params(), m.init_snapshot());
        let ones = Mask::ones(m.arch());
        ltp_round(&mut m, &mut l, &tr, &va, ones, &TrainConfig::default(), 0, &mut (), 0).unwrap();
        assert_eq!(m.params(), m.init_snapshot());
    }

    #[test]
    fn all_ones_round_matches_plain_training() {
        let (tr, va) = toy();
        let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
        let mut a = init_model(3, 6, 2, 2).unwrap();
        let mut la = frozen(3);
        mlp::train(&mut a, &mut la, &tr, &va, &cfg, &GammaSchedule::default(), 5).unwrap();

        let mut b = init_model(3, 6, 2, 2).unwrap();
        let mut lb = frozen(3);
        mlp::train(&mut b, &mut lb, &tr, &va, &cfg, &GammaSchedule::default(), 2).unwrap();
        let ones = Mask::ones(b.arch());
        ltp_round(&mut b, &mut lb, &tr, &va, ones, &cfg, 5, &mut (), 0).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn unfrozen_layer_is_rejected() {
        let (tr, va) = toy();
        let mut m = init_model(3, 4, 2, 0).unwrap();
        let mut l = GateLayer::new(vec![0.0; 3], 1.0, 0.0, 0).unwrap();
        let ones = Mask::ones(m.arch());
        let e = ltp_round(&mut m, &mut l, &tr, &va, ones, &TrainConfig::default(), 1, &mut (), 0);
        assert!(matches!(e, Err(Error::Usage(_))));
    }

    struct Audit {
        violations: usize,
        rounds: usize,
    }

    impl LtpObserver for Audit {
        fn on_round_start(&mut self, _round: usize, m: &MlpModel) {
            self.rounds += 1;
            let init = m.init_snapshot().flat_weights();
            let mask = m.mask().flat();
            for ((w, w0), k) in m.params().flat_weights().iter().zip(&init).zip(&mask) {
                if (*k && w != w0) || (!*k && *w != 0.0) {
                    self.violations += 1;
                }
            }
            if m.params().b1 != m.init_snapshot().b1 || m.params().b2 != m.init_snapshot().b2 {
                self.violations += 1;
            }
        }

        fn on_step(&mut self, m: &MlpModel) {
            let mask = m.mask().flat();
            for (w, k) in m.params().flat_weights().iter().zip(&mask) {
                if !*k && *w != 0.0 {
                    self.violations += 1;
                }
            }
        }
    }

    #[test]
    fn run_reports_scheduled_sparsity() {
        let (tr, va) = toy();
        let mut m = init_model(3, 6, 2, 3).unwrap();
        let mut l = frozen(3);
        let cfg = TrainConfig { retrain_epochs: 2, ..TrainConfig::default() };
        mlp::train(&mut m, &mut l, &tr, &va, &cfg, &GammaSchedule::default(), 3).unwrap();
        let n = m.arch().num_weights();
        let sched = SparsitySchedule { steps: vec![0.2, 0.5, 0.8] };
        let mut audit = Audit { violations: 0, rounds: 0 };
        let metrics = ltp_run_observed(&mut m, &mut l, &tr, &va, &sched, &cfg, &mut audit).unwrap();
        assert_eq!(audit.rounds, 3);
        assert_eq!(audit.violations, 0);
        for (r, s) in metrics.iter().zip(&sched.steps) {
            assert_eq!(r.pruned, prune_count(*s, n));
        }
        assert_eq!(m.mask().len() - m.mask().kept(), prune_count(0.8, n));
    }

    proptest! {
        #[test]
        fn prunes_exact_count(w in prop::collection::vec(-2.0f64..2.0, 1..80), s in 0.0f64..0.99) {
            let m = magnitude_mask(&w, s).unwrap();
            let pruned = m.iter().filter(|k| !**k).count();
            prop_assert_eq!(pruned, prune_count(s, w.len()));
            let max_pruned = w.iter().zip(&m).filter(|(_, k)| !**k).map(|(x, _)| x.abs()).fold(0.0, f64::max);
            let min_kept = w.iter().zip(&m).filter(|(_, k)| **k).map(|(x, _)| x.abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(max_pruned <= min_kept);
        }

        #[test]
        fn ties_resolve_toward_lower_index(n in 2usize..30, s in 0.01f64..0.99) {
            let m = magnitude_mask(&vec![0.5; n], s).unwrap();
            let k = prune_count(s, n);
            prop_assert!(m[..k].iter().all(|b| !b));
            prop_assert!(m[k..].iter().all(|b| *b));
        }
    }
}
