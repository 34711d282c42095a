//! Trainable stub scorer: a two-way softmax head over the symmetric pair
//! features `[e_a * e_b, e_a . e_b, ||e_a - e_b||_1]`, where `e` are hashed
//! bag-of-words embeddings. The per-bucket products mark shared words; the
//! two aggregates give a class-agnostic similarity signal.
//! Trained with AdamW (decoupled weight decay), linear warmup followed by
//! linear decay, and validation-accuracy early stopping.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stub::HashEncoder;
use super::{
    BackendError, BackendResult, EpochRecord, PairScorer, SimilarityVector, StopReason, TrainConfig, TrainReport,
};
use crate::reframing::{loss_and_logit_grad, PairDataset};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INIT_SCALE: f64 = 0.01;
const FEATURE_BLOCKS: usize = 1;
const AGGREGATES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Head<T> {
    weights: [Vec<T>; 2],
    bias: [T; 2],
}

impl<T: Scalar> Head<T> {
    fn zeros(n_features: usize) -> Self {
        Head {
            weights: [vec![T::zero(); n_features], vec![T::zero(); n_features]],
            bias: [T::zero(); 2],
        }
    }

    fn logits(&self, features: &[T]) -> [T; 2] {
        let dot = |w: &[T]| w.iter().zip(features).map(|(&a, &b)| a * b).sum::<T>();
        [
            dot(&self.weights[0]) + self.bias[0],
            dot(&self.weights[1]) + self.bias[1],
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct SavedState<T> {
    dim: usize,
    head: Head<T>,
}

#[derive(Debug, Clone)]
pub struct LogisticPairScorer<T> {
    encoder: HashEncoder,
    dim: usize,
    head: Option<Head<T>>,
}

impl<T: Scalar> Default for LogisticPairScorer<T> {
    fn default() -> Self {
        Self::new(16)
    }
}

impl<T: Scalar> LogisticPairScorer<T> {
    pub fn new(dim: usize) -> Self {
        LogisticPairScorer {
            encoder: HashEncoder::new(dim),
            dim,
            head: None,
        }
    }

    fn n_features(&self) -> usize {
        n_features(self.dim)
    }

    fn features(&self, a: &[T], b: &[T]) -> Vec<T> {
        let mut f = Vec::with_capacity(self.n_features());
        f.extend(a.iter().zip(b).map(|(&x, &y)| x * y));
        let dot = f.iter().copied().sum::<T>();
        let l1 = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        f.push(dot);
        f.push(l1);
        f
    }

    fn pair_features(&self, data: &PairDataset<T>, cache: &mut HashMap<String, Vec<T>>) -> Vec<Vec<T>> {
        let mut embed = |text: &str| {
            cache
                .entry(text.to_string())
                .or_insert_with(|| self.encoder.embed_one::<T>(text).vector)
                .clone()
        };
        data.pairs
            .iter()
            .map(|p| {
                let a = embed(&p.text_a);
                let b = embed(&p.text_b);
                self.features(&a, &b)
            })
            .collect()
    }

    fn accuracy(head: &Head<T>, features: &[Vec<T>], data: &PairDataset<T>) -> Option<f64> {
        if features.is_empty() {
            return None;
        }
        let correct = features
            .iter()
            .zip(&data.pairs)
            .filter(|(f, p)| {
                let z = head.logits(f);
                SimilarityVector::from_logits(z[0], z[1]).predicts_match() == p.target.matched
            })
            .count();
        Some(correct as f64 / features.len() as f64)
    }
}

fn n_features(dim: usize) -> usize {
    FEATURE_BLOCKS * dim + AGGREGATES
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero
/// at `total`.
fn scheduled_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        base * (total - step) as f64 / (total - warmup) as f64
    } else {
        base
    }
}

struct AdamW<T> {
    m: Head<T>,
    v: Head<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    fn new(n_features: usize) -> Self {
        AdamW {
            m: Head::zeros(n_features),
            v: Head::zeros(n_features),
            t: 0,
        }
    }

    fn step(&mut self, head: &mut Head<T>, grad: &Head<T>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::lit(lr);
        let wd = T::lit(weight_decay);
        let eps = T::lit(ADAM_EPS);
        let update = |p: &mut T, g: T, m: &mut T, v: &mut T, decay: bool| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            if decay {
                *p = *p - lr * wd * *p;
            }
            *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for k in 0..2 {
            for i in 0..head.weights[k].len() {
                update(
                    &mut head.weights[k][i],
                    grad.weights[k][i],
                    &mut self.m.weights[k][i],
                    &mut self.v.weights[k][i],
                    true,
                );
            }
            update(
                &mut head.bias[k],
                grad.bias[k],
                &mut self.m.bias[k],
                &mut self.v.bias[k],
                false,
            );
        }
    }
}

impl<T: Scalar> PairScorer<T> for LogisticPairScorer<T> {
    fn name(&self) -> &str {
        "stub-logistic"
    }

    fn is_trained(&self) -> bool {
        self.head.is_some()
    }

    fn score(&self, text_a: &str, text_b: &str) -> BackendResult<SimilarityVector<T>> {
        let head = self.head.as_ref().ok_or(BackendError::NotTrained)?;
        let a = self.encoder.embed_one::<T>(text_a).vector;
        let b = self.encoder.embed_one::<T>(text_b).vector;
        let z = head.logits(&self.features(&a, &b));
        Ok(SimilarityVector::from_logits(z[0], z[1]))
    }

    fn train(
        &mut self,
        pairs: &PairDataset<T>,
        config: &TrainConfig,
        validation: &PairDataset<T>,
    ) -> BackendResult<TrainReport> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(BackendError::EmptyTrainingSet);
        }
        let mut rng = rng_from_seed(config.seed);
        let nf = self.n_features();
        let mut head = Head::zeros(nf);
        for k in 0..2 {
            for w in head.weights[k].iter_mut() {
                *w = T::lit(rng.gen_range(-INIT_SCALE..INIT_SCALE));
            }
        }

        let mut cache = HashMap::new();
        let train_x = self.pair_features(pairs, &mut cache);
        let val_x = self.pair_features(validation, &mut cache);

        let n = train_x.len();
        let n_batches = n.div_ceil(config.batch_size);
        let total_steps = config.max_epochs * n_batches;
        let warmup = (config.warmup_proportion * total_steps as f64).ceil() as usize;
        let mut opt = AdamW::new(nf);
        let mut step = 0usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut epochs = Vec::new();
        let mut streak = 0usize;
        let mut stop_reason = StopReason::MaxEpochs;

        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = T::zero();
            let mut last_lr = 0.0;
            for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
                let lr = scheduled_lr(config.learning_rate, step, warmup, total_steps);
                last_lr = lr;
                let mut grad = Head::zeros(nf);
                let mut batch_loss = T::zero();
                for &i in chunk {
                    let f = &train_x[i];
                    let (loss, g) = loss_and_logit_grad(head.logits(f), &pairs.pairs[i].target, config.loss);
                    batch_loss = batch_loss + loss;
                    for ((row, bias), &gk) in grad.weights.iter_mut().zip(grad.bias.iter_mut()).zip(&g) {
                        for (gw, &x) in row.iter_mut().zip(f) {
                            *gw = *gw + gk * x;
                        }
                        *bias = *bias + gk;
                    }
                }
                if !batch_loss.is_finite() {
                    return Err(BackendError::NonFiniteLoss {
                        epoch,
                        batch,
                        learning_rate: lr,
                    });
                }
                let scale = T::one() / T::from_usize_lossy(chunk.len());
                for k in 0..2 {
                    grad.weights[k].iter_mut().for_each(|g| *g = *g * scale);
                    grad.bias[k] = grad.bias[k] * scale;
                }
                opt.step(&mut head, &grad, lr, config.weight_decay);
                epoch_loss = epoch_loss + batch_loss;
                step += 1;
            }
            let val_accuracy = Self::accuracy(&head, &val_x, validation);
            epochs.push(EpochRecord {
                epoch,
                train_loss: (epoch_loss / T::from_usize_lossy(n)).as_f64(),
                val_accuracy,
                learning_rate: last_lr,
            });
            log::debug!(
                "epoch {epoch}: loss {:.6} val_acc {:?}",
                epochs[epoch - 1].train_loss,
                val_accuracy
            );
            if val_accuracy == Some(1.0) {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= config.early_stop_patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
        self.head = Some(head);
        Ok(TrainReport {
            scorer: "stub-logistic".into(),
            epochs,
            stop_reason,
            seed: config.seed,
            n_train: n,
            n_val: validation.len(),
        })
    }

    fn export_state(&self) -> BackendResult<serde_json::Value> {
        let head = self.head.clone().ok_or(BackendError::NotTrained)?;
        serde_json::to_value(SavedState { dim: self.dim, head }).map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }

    fn import_state(&mut self, state: &serde_json::Value) -> BackendResult<()> {
        let saved: SavedState<T> =
            serde_json::from_value(state.clone()).map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        if saved.head.weights.iter().any(|w| w.len() != n_features(saved.dim)) {
            return Err(BackendError::InvalidConfig(
                "saved head does not match its dimension".into(),
            ));
        }
        *self = LogisticPairScorer::new(saved.dim);
        self.head = Some(saved.head);
        Ok(())
    }
}
