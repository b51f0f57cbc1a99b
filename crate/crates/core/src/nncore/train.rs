use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierModel, NnError, RngState};

/// Minibatch SGD-with-momentum settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One training example: a flattened `input_side x input_side` image and its class.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub pixels: &'a [f32],
    pub label: usize,
}

/// Result of a training call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Shuffle/dropout generator state after the last update.
    pub rng_state: RngState,
}

/// Train a copy of `start`; see [`train_with_history`].
pub fn train(
    start: &ClassifierModel,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<ClassifierModel, NnError> {
    Ok(train_with_history(start, data, cfg)?.model)
}

/// SGD with momentum over shuffled minibatches.
///
/// A single ChaCha8 stream seeded with `cfg.seed` drives both the per-epoch
/// shuffle and each minibatch's dropout seed, so output is a pure function
/// of `(start, data, cfg)`.
pub fn train_with_history(
    start: &ClassifierModel,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::Training("training set is empty".into()));
    }
    let n_classes = start.n_classes();
    let mut seen = vec![0usize; n_classes];
    for s in data {
        if s.label >= n_classes {
            return Err(NnError::Training(format!(
                "label {} >= {n_classes}",
                s.label
            )));
        }
        seen[s.label] += 1;
    }
    if let Some(missing) = seen.iter().position(|&c| c == 0) {
        return Err(NnError::Training(format!(
            "class {missing} absent from training data"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = start.clone();
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&[f32]> = chunk.iter().map(|&i| data[i].pixels).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let mask_seed = rng.next_u64();
            let (loss, grads) = model.loss_and_gradients_slices(&images, &labels, mask_seed)?;
            for ((p, g), v) in model
                .params_mut()
                .into_iter()
                .zip(&grads.tensors)
                .zip(velocity.iter_mut())
            {
                for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vv = cfg.momentum * *vv - cfg.learning_rate * gv;
                    *w += *vv;
                }
            }
            loss_sum += f64::from(loss);
            batches += 1;
        }
        epoch_losses.push((loss_sum / batches as f64) as f32);
    }
    for (i, p) in model.params().iter().enumerate() {
        if !p.is_finite() {
            return Err(NnError::NonFinite {
                layer: model.param_name(i),
            });
        }
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        rng_state: RngState::capture(&rng),
    })
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &ClassifierModel, data: &[Sample<'_>]) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        let p = model.predict(s.pixels)?;
        if argmax(&p) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::init_model;

    /// Bright vs dark 16x16 images with per-pixel jitter.
    fn toy_set(n_per_class: usize) -> Vec<(Vec<f32>, usize)> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let label = i % 2;
            let base = if label == 1 { 0.8 } else { 0.2 };
            let px = (0..16 * 16)
                .map(|_| (base + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0))
                .collect();
            out.push((px, label));
        }
        out
    }

    fn samples(set: &[(Vec<f32>, usize)]) -> Vec<Sample<'_>> {
        set.iter()
            .map(|(p, l)| Sample {
                pixels: p,
                label: *l,
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = init_model(2, 16, 3).unwrap();
        let set = toy_set(4);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&m, &samples(&set), &cfg).unwrap();
        assert!(out.bit_eq(&m));
    }

    #[test]
    fn single_class_is_rejected() {
        let m = init_model(2, 16, 3).unwrap();
        let set: Vec<_> = toy_set(4).into_iter().filter(|(_, l)| *l == 0).collect();
        let err = train(&m, &samples(&set), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NnError::Training(_)));
        assert!(matches!(
            train(&m, &[], &TrainConfig::default()),
            Err(NnError::Training(_))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let m = init_model(2, 16, 3).unwrap();
        let set = toy_set(2);
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&m, &samples(&set), &cfg),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_leaves_input_alone() {
        let m = init_model(2, 16, 3).unwrap();
        let before = m.clone();
        let set = toy_set(10);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train_with_history(&m, &samples(&set), &cfg).unwrap();
        let b = train_with_history(&m, &samples(&set), &cfg).unwrap();
        assert!(a.model.bit_eq(&b.model));
        assert_eq!(a.rng_state, b.rng_state);
        assert!(m.bit_eq(&before));
        let c = train(&m, &samples(&set), &cfg.with_seed(6)).unwrap();
        assert!(!a.model.bit_eq(&c));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let m = init_model(2, 16, 3).unwrap();
        let set = toy_set(50);
        let out = train_with_history(&m, &samples(&set), &TrainConfig::default()).unwrap();
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
        assert!(accuracy(&out.model, &samples(&set)).unwrap() >= 0.99);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
    }
}
