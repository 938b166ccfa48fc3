//! Single-threaded training loop with SGD and Adam.
//!
//! Determinism contract: with a fixed config (which includes the seed) and
//! identical samples, every step visits identical batches and produces
//! bit-identical parameters, so a saved checkpoint is byte-reproducible.
//! Nothing here spawns threads or iterates a hash map.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{batch_tensors, DatasetSample};
use crate::error::{Error, Result};
use crate::eval::{score_binary, PositiveClass};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::GradTape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Validation probes the first `VALIDATION_CAP` training samples rather
/// than a held-out split: small fixed corpora (overfit runs train on 16
/// samples total) leave nothing to hold out, and the probe still tracks
/// whether optimization is making the mask usable.
pub const VALIDATION_CAP: usize = 32;

const SHUFFLE_SALT: u64 = 0x73687566;

#[derive(Clone, Copy, Debug)]
pub enum TrainEvent {
    Step { step: usize, loss: f64 },
    Validation { step: usize, f1: f64, improved: bool },
}

#[derive(Debug)]
pub struct TrainResult {
    /// Parameters from the best-validation step.
    pub model: Model<f32>,
    pub best_f1: f64,
    pub best_step: usize,
    /// Loss of the very first step, before any update.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

fn apply_update(
    model: &mut Model<f32>,
    grads: &[Vec<f32>],
    config: &RunConfig,
    adam: &mut Option<Adam>,
) {
    let lr = config.optimizer.learning_rate as f32;
    match adam {
        None => {
            for (i, (_, tensor)) in model.params.iter_mut().enumerate() {
                for (p, &g) in tensor.data_mut().iter_mut().zip(&grads[i]) {
                    *p -= lr * g;
                }
            }
        }
        Some(state) => {
            state.t += 1;
            let b1 = ADAM_BETA1 as f32;
            let b2 = ADAM_BETA2 as f32;
            let eps = ADAM_EPS as f32;
            let bias1 = 1.0 - b1.powi(state.t);
            let bias2 = 1.0 - b2.powi(state.t);
            for (i, (_, tensor)) in model.params.iter_mut().enumerate() {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (k, (p, &g)) in tensor.data_mut().iter_mut().zip(&grads[i]).enumerate() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let mhat = m[k] / bias1;
                    let vhat = v[k] / bias2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Mean combined F1 over the probe slice.
pub fn validation_f1(model: &Model<f32>, samples: &[DatasetSample]) -> Result<f64> {
    let n = samples.len().min(VALIDATION_CAP);
    let mut total = 0.0;
    for s in &samples[..n] {
        let (images, _) = batch_tensors::<f32>(&[s])?;
        let mask = model.predict(&images)?;
        total += score_binary(&mask.labels, &s.truth, PositiveClass::Combined)?.f1;
    }
    Ok(total / n as f64)
}

fn check_inputs(config: &RunConfig, samples: &[DatasetSample]) -> Result<()> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if config.optimizer.steps == 0 {
        return Err(Error::Config("optimizer.steps must be >= 1".into()));
    }
    if config.optimizer.batch_size == 0 {
        return Err(Error::Config("optimizer.batch-size must be >= 1".into()));
    }
    let want = config.backbone.input_size;
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = s.image.dimensions();
        if w as usize != want || h as usize != want {
            return Err(Error::Dataset(format!(
                "sample {:05} is {}x{}, config expects {}x{}",
                i, w, h, want, want
            )));
        }
    }
    Ok(())
}

/// Train a fresh model; emits step and validation events through `sink`.
pub fn train(
    config: &RunConfig,
    samples: &[DatasetSample],
    mut sink: impl FnMut(TrainEvent),
) -> Result<TrainResult> {
    check_inputs(config, samples)?;
    let mut model = Model::<f32>::new(config.clone())?;
    let mut adam = match config.optimizer.kind {
        OptimizerKind::Adam => Some(Adam {
            m: model.params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
            v: model.params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
            t: 0,
        }),
        OptimizerKind::Sgd => None,
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut cursor = order.len();

    let steps = config.optimizer.steps;
    let batch = config.optimizer.batch_size.min(samples.len());
    let interval = (steps / 10).max(1);

    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut initial_loss = 0.0;
    let mut final_loss = 0.0;

    for step in 1..=steps {
        let mut picked = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (images, labels) = batch_tensors::<f32>(&picked)?;

        let mut tape = GradTape::new();
        let (fwd, loss) = model.loss_on_batch(&mut tape, &images, &labels)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "train step" });
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = fwd
            .param_ids
            .iter()
            .zip(model.params.iter())
            .map(|(&id, (name, _))| {
                tape.grad(id).map(|g| g.to_vec()).ok_or_else(|| {
                    Error::GradCheck(format!("parameter '{}' received no gradient", name))
                })
            })
            .collect::<Result<_>>()?;
        drop(tape);
        apply_update(&mut model, &grads, config, &mut adam);

        if step == 1 {
            initial_loss = loss_value;
        }
        final_loss = loss_value;
        sink(TrainEvent::Step {
            step,
            loss: loss_value,
        });

        if step % interval == 0 || step == steps {
            let f1 = validation_f1(&model, samples)?;
            let improved = best.as_ref().is_none_or(|(b, _, _)| f1 > *b);
            sink(TrainEvent::Validation { step, f1, improved });
            if improved {
                best = Some((f1, step, model.clone()));
            }
        }
    }

    let (best_f1, best_step, model) = best.expect("final step always validates");
    Ok(TrainResult {
        model,
        best_f1,
        best_step,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::synth::{forge, generate_base, AttackConfig};

    fn tiny_config(steps: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone.blocks = 1;
        cfg.backbone.channels_per_block = vec![4];
        cfg.backbone.input_size = 32;
        cfg.percentiles = 8;
        cfg.prototype.update_rounds = 2;
        cfg.optimizer.steps = steps;
        cfg.optimizer.batch_size = 2;
        cfg
    }

    fn tiny_samples(n: usize) -> Vec<DatasetSample> {
        let base = generate_base(50, 32).unwrap();
        (0..n as u64)
            .map(|s| {
                let f = forge(&base, &AttackConfig::none(), s).unwrap();
                DatasetSample {
                    image: f.image,
                    truth: f.truth,
                }
            })
            .collect()
    }

    #[test]
    fn two_steps_on_four_samples() {
        let cfg = tiny_config(2);
        let samples = tiny_samples(4);
        let mut steps = 0;
        let mut vals = 0;
        let result = train(&cfg, &samples, |e| match e {
            TrainEvent::Step { loss, .. } => {
                assert!(loss.is_finite());
                steps += 1;
            }
            TrainEvent::Validation { .. } => vals += 1,
        })
        .unwrap();
        assert_eq!(steps, 2);
        assert!(vals >= 1);
        assert!(result.final_loss.is_finite());
    }

    #[test]
    fn identical_runs_produce_identical_checkpoints() {
        let cfg = tiny_config(3);
        let samples = tiny_samples(4);
        let a = train(&cfg, &samples, |_| {}).unwrap();
        let b = train(&cfg, &samples, |_| {}).unwrap();
        assert_eq!(
            checkpoint::to_bytes(&a.model),
            checkpoint::to_bytes(&b.model)
        );
    }

    #[test]
    fn validates_before_training() {
        let cfg = tiny_config(2);
        assert!(train(&cfg, &[], |_| {}).is_err());
        let wrong = tiny_samples(1);
        let mut cfg64 = cfg.clone();
        cfg64.backbone.input_size = 64;
        assert!(train(&cfg64, &wrong, |_| {}).is_err());
    }

    #[test]
    fn sgd_also_steps() {
        let mut cfg = tiny_config(2);
        cfg.optimizer.kind = OptimizerKind::Sgd;
        let samples = tiny_samples(2);
        assert!(train(&cfg, &samples, |_| {}).is_ok());
    }
}
