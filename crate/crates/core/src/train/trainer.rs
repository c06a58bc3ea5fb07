use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{Augment, Dataset, NormStats};
use super::metrics::{argmax, macro_prf1, MetricsReport};
use super::optim::{cosine_warmup_lr, AdamState, AdamW, StepOutcome};
use crate::model::{Model, ModelConfig};
use crate::multipath::{mix_seed, ShuffleSeed};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Defaults to 5% of the total step count.
    pub warmup_steps: Option<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub augment: Augment,
    /// Worker threads for per-sample gradients; 1 runs everything on the caller.
    pub threads: usize,
    /// Stop once eval-mode training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    /// Evaluate the training set in eval mode after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 0.05,
            warmup_steps: None,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            eval_seed: 0,
            augment: Augment::default(),
            threads: 1,
            target_train_accuracy: None,
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, samples: usize) -> u64 {
        self.steps_per_epoch(samples) * self.epochs as u64
    }

    pub fn warmup_for(&self, samples: usize) -> u64 {
        self.warmup_steps
            .unwrap_or(self.total_steps(samples) / 20)
    }

    pub fn validate(&self, samples: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return bad("batch_size, epochs and threads must be positive".into());
        }
        let total = self.total_steps(samples);
        if self.warmup_for(samples) >= total {
            return bad(format!(
                "warmup of {} steps must be shorter than the {total} total steps",
                self.warmup_for(samples)
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub mean_loss: f64,
    pub skipped_steps: usize,
    pub train: Option<MetricsReport>,
    pub val: Option<MetricsReport>,
}

impl EpochLog {
    /// One line, suitable for a run log.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "epoch={} steps={} lr={:.6e} loss={:.6} skipped={}",
            self.epoch, self.steps, self.lr, self.mean_loss, self.skipped_steps
        );
        if let Some(t) = &self.train {
            s.push_str(&format!(" train_acc={:.4} train_f1={:.4}", t.accuracy, t.macro_f1));
        }
        if let Some(v) = &self.val {
            s.push_str(&format!(" val_acc={:.4} val_f1={:.4}", v.accuracy, v.macro_f1));
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged {
        epoch: usize,
        step: u64,
        /// Parameters that last produced a finite batch loss.
        last_good: Box<Model<f32>>,
        log: Vec<EpochLog>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub norm: NormStats,
    pub log: Vec<EpochLog>,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

fn pool(threads: usize) -> Option<rayon::ThreadPool> {
    (threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Maps `f` over `items`, in parallel when a pool is given; results keep input order.
fn ordered_map<I: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[I],
    f: impl Fn(&I) -> R + Sync + Send,
) -> Vec<R> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Eval-mode predictions for every sample.
pub fn predict<T: Element>(
    model: &Model<T>,
    ds: &dyn Dataset,
    norm: &NormStats,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<usize>, TensorError> {
    let pool = pool(threads);
    let idx: Vec<usize> = (0..ds.len()).collect();
    ordered_map(pool.as_ref(), &idx, |&i| {
        let (img, _) = ds.sample(i)?;
        let img: Tensor<T> = norm.apply(&img).cast();
        let logits = model.logits(&img, ShuffleSeed::Eval { seed: eval_seed })?;
        Ok(argmax(logits.data()))
    })
    .into_iter()
    .collect()
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    ds: &dyn Dataset,
    norm: &NormStats,
    eval_seed: u64,
    threads: usize,
) -> Result<MetricsReport, TensorError> {
    let preds = predict(model, ds, norm, eval_seed, threads)?;
    macro_prf1(&preds, &ds.labels()?, ds.num_classes())
}

fn check_geometry(cfg: &ModelConfig, ds: &dyn Dataset, which: &str) -> Result<(), TrainError> {
    if ds.image_size() != (cfg.image_height, cfg.image_width) || ds.num_classes() != cfg.num_classes {
        return Err(TrainError::Config(format!(
            "{which} set has {:?} images and {} classes; the model expects {:?} and {}",
            ds.image_size(),
            ds.num_classes(),
            (cfg.image_height, cfg.image_width),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Minibatch AdamW with linear warmup and cosine decay. Deterministic for a
/// given seed; the thread count does not change results.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &dyn Dataset,
    val_set: Option<&dyn Dataset>,
    init_seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::<f32>::init(model_cfg.clone(), init_seed)?;
    train_from(model, cfg, train_set, val_set)
}

/// As [`train`], starting from existing parameters.
pub fn train_from(
    model: Model<f32>,
    cfg: &TrainConfig,
    train_set: &dyn Dataset,
    val_set: Option<&dyn Dataset>,
) -> Result<TrainOutcome, TrainError> {
    train_with(model, cfg, train_set, val_set, &mut |_| {})
}

/// As [`train_from`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Model<f32>,
    cfg: &TrainConfig,
    train_set: &dyn Dataset,
    val_set: Option<&dyn Dataset>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let n = train_set.len();
    cfg.validate(n)?;
    check_geometry(model.config(), train_set, "training")?;
    if let Some(v) = val_set {
        check_geometry(model.config(), v, "validation")?;
    }
    let norm = NormStats::compute(train_set)?;
    let total = cfg.total_steps(n);
    let warmup = cfg.warmup_for(n);
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = AdamState::new(model.params());
    let pool = pool(cfg.threads);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut last_good = model.clone();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, 3])));
        let mut loss_sum = 0.0;
        let mut skipped = 0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_warmup_lr(step, warmup, total, cfg.lr0);
            let current = &model;
            let results = ordered_map(pool.as_ref(), batch, |&i| {
                let (img, label) = train_set.sample(i)?;
                let img = cfg.augment.apply(&img, mix_seed(&[cfg.seed, epoch as u64, i as u64, 4]));
                let shuffle = ShuffleSeed::Train {
                    run_seed: cfg.seed,
                    step,
                    sample: i as u64,
                };
                current.loss_and_grads(&norm.apply(&img), label, shuffle)
            });
            let mut sum: Option<Vec<Vec<f32>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let r = r?;
                batch_loss += r.loss;
                match &mut sum {
                    None => sum = Some(r.grads.into_iter().map(Tensor::into_vec).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, &y) in a.iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                    log,
                });
            }
            loss_sum += batch_loss;
            // tensors are shared, so this costs one reference per parameter
            last_good = model.clone();
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = sum
                .expect("non-empty batch")
                .into_iter()
                .zip(model.params().tensors())
                .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|v| v * scale).collect()))
                .collect::<Result<_, _>>()?;
            if opt.step(model.params_mut(), &grads, &mut state, lr)? == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            step += 1;
        }
        let train_metrics = if cfg.eval_train {
            Some(evaluate(&model, train_set, &norm, cfg.eval_seed, cfg.threads)?)
        } else {
            None
        };
        let val_metrics = match val_set {
            Some(v) => Some(evaluate(&model, v, &norm, cfg.eval_seed, cfg.threads)?),
            None => None,
        };
        let done = matches!(
            (&train_metrics, cfg.target_train_accuracy),
            (Some(m), Some(target)) if m.accuracy >= target
        );
        log.push(EpochLog {
            epoch,
            steps: step,
            lr,
            mean_loss: loss_sum / n as f64,
            skipped_steps: skipped,
            train: train_metrics,
            val: val_metrics,
        });
        on_epoch(log.last().expect("just pushed"));
        if done {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        norm,
        log,
        warmup_steps: warmup,
        total_steps: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::SyntheticSpec;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(1, 8, 2, 8, 4, 4, 4)
    }

    #[test]
    fn frozen_training_keeps_parameters() {
        let ds = SyntheticSpec::new(4, 2, 8, 0, 0.1);
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&tiny(), &cfg, &ds, None, 5).unwrap();
        let init = Model::<f32>::init(tiny(), 5).unwrap();
        assert_eq!(out.model.params(), init.params());
        let before = evaluate(&init, &ds, &out.norm, 0, 1).unwrap();
        assert_eq!(out.log[1].train.as_ref().unwrap(), &before);
    }

    #[test]
    fn warmup_must_fit() {
        let cfg = TrainConfig {
            warmup_steps: Some(10),
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(8), Err(TrainError::Config(_))));
        assert_eq!(TrainConfig::default().warmup_for(3200), 150);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let ds = SyntheticSpec::new(4, 2, 12, 0, 0.1);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&tiny(), &cfg, &ds, None, 0), Err(TrainError::Config(_))));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = SyntheticSpec::new(4, 3, 8, 0, 0.3);
        let run = |threads| {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 6,
                lr0: 1e-2,
                threads,
                ..Default::default()
            };
            train(&tiny(), &cfg, &ds, None, 1).unwrap()
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.log, b.log);
        assert!(a
            .model
            .params()
            .tensors()
            .iter()
            .zip(b.model.params().tensors())
            .all(|(x, y)| x.bitwise_eq(y)));
    }
}
