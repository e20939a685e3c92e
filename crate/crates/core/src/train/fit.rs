//! The shared optimization loop: seeded epoch shuffling, mini-batches,
//! warm-up/decay schedule, clipping, AdamW and per-epoch selection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, TrainableMask};
use crate::backend::checkpoint::MetricRecord;
use crate::backend::params::ParameterStore;
use crate::error::{Error, Result};
use crate::train::config::TrainConfig;
use crate::train::optim::{AdamW, OptimizerState};
use crate::train::schedule::lr_at;

/// Mixes a base seed with a path of indices (SplitMix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Maximize,
    Minimize,
    /// Keep the parameters after the last epoch.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: MetricRecord,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub store: ParameterStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub best_epoch: usize,
    pub metric: MetricRecord,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Ids of every record that contributed to an optimizer update.
    pub seen_ids: BTreeSet<String>,
}

/// Task-specific pieces plugged into [`fit`].
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    /// Mean loss over `batch` and its gradient. `epoch` is available for
    /// objectives with per-epoch randomness.
    fn batch(
        &self,
        store: &ParameterStore<f32>,
        mask: &TrainableMask,
        batch: &[usize],
        epoch: usize,
    ) -> Result<(f64, Gradients<f32>)>;

    fn metric_name(&self) -> &str;

    /// Validation metric; `None` falls back to the epoch's training loss.
    fn validate(&self, store: &ParameterStore<f32>) -> Result<Option<f64>>;

    fn selection(&self) -> Selection;
}

fn better(selection: Selection, candidate: f64, best: f64) -> bool {
    match selection {
        Selection::Maximize => candidate > best,
        Selection::Minimize => candidate < best,
        Selection::Final => true,
    }
}

/// Epoch order: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    order
}

pub fn fit(
    mut store: ParameterStore<f32>,
    objective: &dyn Objective,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = objective.len();
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let prefixes = config.trainable_set.prefixes();
    let mask = TrainableMask::from_prefixes(&store, &prefixes);
    if mask.ids().next().is_none() {
        return Err(Error::Config(format!(
            "no parameters match the trainable prefixes {prefixes:?}"
        )));
    }
    let adamw = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let mut optimizer = OptimizerState::new(store.len());
    let (warmup, total) = config.schedule(n);
    let mut steps = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut seen_ids = BTreeSet::new();
    let mut best: Option<(usize, f64, ParameterStore<f32>, OptimizerState<f32>)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(n, config.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) = objective.batch(&store, &mask, batch, epoch)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch.iter().map(|&i| objective.id(i).to_string()).collect(),
                });
            }
            let grad_norm = if config.clip_norm > 0.0 {
                grads.clip_global_norm(config.clip_norm as f32)
            } else {
                grads.global_norm()
            };
            let lr = lr_at(step, warmup, total, config.base_lr);
            adamw.step(&mut store, &mut optimizer, &grads, lr);
            seen_ids.extend(batch.iter().map(|&i| objective.id(i).to_string()));
            steps.push(StepLog {
                step,
                epoch,
                loss,
                lr,
                grad_norm: grad_norm as f64,
            });
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let value = objective.validate(&store)?.unwrap_or(train_loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "validation {} is not finite after epoch {epoch}",
                objective.metric_name()
            )));
        }
        let log = EpochLog {
            epoch,
            train_loss,
            metric: MetricRecord {
                name: objective.metric_name().to_string(),
                value,
            },
        };
        on_epoch(&log);
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, {} {value:.5}",
            objective.metric_name()
        );
        epochs.push(log);
        let improved = match &best {
            None => true,
            Some((_, b, _, _)) => better(objective.selection(), value, *b),
        };
        if improved {
            best = Some((epoch, value, store.clone(), optimizer.clone()));
        }
    }
    let (best_epoch, value, store, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        store,
        optimizer,
        best_epoch,
        metric: MetricRecord {
            name: objective.metric_name().to_string(),
            value,
        },
        epochs,
        steps,
        seen_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Matrix;
    use crate::train::config::TrainableSet;

    /// Least squares on `head.w` against fixed targets; validation returns
    /// a scripted sequence so selection can be checked.
    struct Quadratic {
        targets: Vec<f32>,
        script: Vec<f64>,
        selection: Selection,
        calls: std::sync::Mutex<usize>,
    }

    impl Objective for Quadratic {
        fn len(&self) -> usize {
            self.targets.len()
        }

        fn id(&self, index: usize) -> &str {
            ["a", "b", "c", "d", "e"][index]
        }

        fn batch(
            &self,
            store: &ParameterStore<f32>,
            mask: &TrainableMask,
            batch: &[usize],
            _epoch: usize,
        ) -> Result<(f64, Gradients<f32>)> {
            let mut g = Graph::with_trainable(store, mask);
            let w = g.param(store.id("head.w").unwrap());
            let t = g.constant(Matrix::row_vector(batch.iter().map(|&i| self.targets[i]).collect()));
            let ones = g.constant(Matrix::filled(1, batch.len(), 1.0));
            let wb = g.matmul(w, ones);
            let neg = g.scale(t, -1.0);
            let d = g.add(wb, neg);
            let sq = g.mul(d, d);
            let s = g.sum(sq);
            let loss = g.scale(s, 1.0 / batch.len() as f32);
            Ok((g.scalar(loss) as f64, g.backward(loss)))
        }

        fn metric_name(&self) -> &str {
            "score"
        }

        fn validate(&self, _store: &ParameterStore<f32>) -> Result<Option<f64>> {
            let mut c = self.calls.lock().unwrap();
            *c += 1;
            Ok(Some(self.script[*c - 1]))
        }

        fn selection(&self) -> Selection {
            self.selection
        }
    }

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("head.w", Matrix::filled(1, 1, 0.0)).unwrap();
        s.insert("encoder.x", Matrix::filled(1, 1, 5.0)).unwrap();
        s
    }

    fn config() -> TrainConfig {
        TrainConfig {
            base_lr: 0.1,
            batch_size: 2,
            epochs: 4,
            warmup_steps: Some(0),
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 3,
            trainable_set: TrainableSet::PromptsOnly,
        }
    }

    fn objective(selection: Selection) -> Quadratic {
        Quadratic {
            targets: vec![1.0, 1.0, 1.0, 1.0, 1.0],
            script: vec![0.2, 0.9, 0.5, 0.9],
            selection,
            calls: std::sync::Mutex::new(0),
        }
    }

    #[test]
    fn selection_picks_first_best_epoch() {
        let out = fit(store(), &objective(Selection::Maximize), &config(), &mut |_| {}).unwrap();
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.metric.value, 0.9);
        let max = out.epochs.iter().map(|e| e.metric.value).fold(f64::MIN, f64::max);
        assert_eq!(out.metric.value, max);
        let out = fit(store(), &objective(Selection::Minimize), &config(), &mut |_| {}).unwrap();
        assert_eq!(out.best_epoch, 0);
        let out = fit(store(), &objective(Selection::Final), &config(), &mut |_| {}).unwrap();
        assert_eq!(out.best_epoch, 3);
    }

    #[test]
    fn steps_follow_the_schedule_and_frozen_params_stay() {
        let out = fit(store(), &objective(Selection::Final), &config(), &mut |_| {}).unwrap();
        assert_eq!(out.steps.len(), 12);
        assert!((out.steps[0].lr - 0.1).abs() < 1e-15);
        assert!((out.steps[11].lr - 0.1 / 12.0).abs() < 1e-15);
        assert_eq!(out.store.by_name("encoder.x").unwrap().get(0, 0), 5.0);
        assert!(out.steps.last().unwrap().loss < out.steps[0].loss);
        assert_eq!(out.seen_ids.len(), 5);
    }

    #[test]
    fn nan_loss_reports_step_and_batch() {
        let mut obj = objective(Selection::Final);
        obj.targets[2] = f32::NAN;
        match fit(store(), &obj, &config(), &mut |_| {}) {
            Err(Error::NonFiniteLoss { step, batch_ids }) => {
                assert!(batch_ids.contains(&"c".to_string()));
                assert!(step < 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn epoch_orders_are_seeded() {
        assert_eq!(epoch_order(50, 1, 0), epoch_order(50, 1, 0));
        assert_ne!(epoch_order(50, 1, 0), epoch_order(50, 1, 1));
        let mut sorted = epoch_order(50, 9, 2);
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: BTreeSet<u64> = (0..100).map(|i| derive_seed(7, &[i])).collect();
        assert_eq!(seeds.len(), 100);
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
    }
}
