//! Deterministic training loop: AdamW with decoupled weight decay, cosine or
//! constant learning-rate schedule, cross-entropy loss, per-epoch metrics.
//!
//! Only parameters flagged trainable are ever touched, and weight decay is
//! applied only where the parameter traversal marks it (weight matrices and
//! adapter `A`/LoRA factors; never biases, norms, zero-initialized `B`
//! factors, or const offsets). Identical config, seed, and data give
//! bit-identical trajectories.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::util::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e}): {detail}")]
    Aborted {
        step: usize,
        lr: f64,
        grad_norm: f64,
        detail: String,
        /// Parameters as of the last completed epoch.
        last_good: Vec<(String, Vec<f64>)>,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Evaluate every k epochs (the final epoch always evaluates).
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            seed: 0,
            grad_clip: None,
            eval_every: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<EpochRow>,
    pub trainable_params: usize,
    pub wall_seconds: f64,
    pub final_eval_loss: f64,
    pub final_eval_acc: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One AdamW update on a single parameter buffer. Decoupled decay first,
/// then the bias-corrected moment step.
#[allow(clippy::too_many_arguments)]
fn adamw_update(
    data: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: usize,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..data.len() {
        if weight_decay > 0.0 {
            data[i] *= 1.0 - lr * weight_decay;
        }
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Mean cross-entropy and top-1 accuracy over a dataset; no parameter
/// mutation and no tape growth outlives the call.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let chunk = 256usize;
    let mut index = 0usize;
    while index < data.len() {
        let end = (index + chunk).min(data.len());
        let indices: Vec<usize> = (index..end).collect();
        let (batch, labels) = data.batch(&indices);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch)?;
        let loss = tape.cross_entropy(pass.logits, &labels)?;
        total_loss += tape.value(loss).item() * labels.len() as f64;
        correct += count_correct(tape.value(pass.logits), &labels);
        index = end;
    }
    Ok((
        total_loss / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| {
            let chunk = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if chunk[j] > chunk[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Trains the model's trainable parameters on `train_data`. Evaluation runs
/// every `eval_every` epochs on `eval_data` when provided. Non-finite values
/// abort with diagnostics and the last completed epoch's parameters.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunMetrics, TrainError> {
    if train_data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let n = train_data.len();
    let batch_size = cfg.batch_size.max(1).min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut adam: HashMap<String, AdamState> = HashMap::new();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.snapshot();
    let mut step = 0usize;
    let mut last_grad_norm = 0.0f64;

    for epoch in 0..cfg.epochs {
        let epoch_started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::substream(cfg.seed, "shuffle", epoch as u64);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(batch_size) {
            let lr = match cfg.schedule {
                Schedule::Cosine => cosine_lr(cfg.lr, step, total_steps),
                Schedule::Constant => cfg.lr,
            };
            let (batch, labels) = train_data.batch(chunk);
            let grad_norm_slot = &mut last_grad_norm;
            let outcome: Result<(f64, usize), TensorError> = (|| {
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &batch).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Dimension {
                        op: "forward",
                        msg: other.to_string(),
                    },
                })?;
                let loss = tape.cross_entropy(pass.logits, &labels)?;
                tape.backward(loss)?;
                let loss_value = tape.value(loss).item();
                let correct = count_correct(tape.value(pass.logits), &labels);

                // Pull gradients out by parameter path.
                let mut grads: HashMap<String, Tensor> = HashMap::new();
                for (name, var) in &pass.bindings {
                    if let Some(g) = tape.grad(*var) {
                        grads.insert(name.clone(), g);
                    }
                }
                let mut grad_sq = 0.0;
                for g in grads.values() {
                    grad_sq += g.data().iter().map(|v| v * v).sum::<f64>();
                }
                let grad_norm = grad_sq.sqrt();
                *grad_norm_slot = grad_norm;
                let clip_scale = match cfg.grad_clip {
                    Some(max_norm) if grad_norm > max_norm && grad_norm > 0.0 => {
                        max_norm / grad_norm
                    }
                    _ => 1.0,
                };

                let adam_step = step + 1;
                model.for_each_param(&mut |name, data, _, trainable, decay| {
                    if !trainable {
                        return;
                    }
                    let Some(grad) = grads.get(name) else {
                        return;
                    };
                    let state = adam.entry(name.to_string()).or_insert_with(|| AdamState {
                        m: vec![0.0; data.len()],
                        v: vec![0.0; data.len()],
                    });
                    let mut g = grad.data().to_vec();
                    if clip_scale != 1.0 {
                        for v in &mut g {
                            *v *= clip_scale;
                        }
                    }
                    adamw_update(
                        data,
                        &g,
                        state,
                        lr,
                        if decay { cfg.weight_decay } else { 0.0 },
                        cfg.beta1,
                        cfg.beta2,
                        cfg.epsilon,
                        adam_step,
                    );
                });
                Ok((loss_value, correct))
            })();
            match outcome {
                Ok((loss_value, correct)) => {
                    epoch_loss += loss_value * chunk.len() as f64;
                    epoch_correct += correct;
                }
                Err(err) => {
                    model.restore(&last_good).ok();
                    return Err(TrainError::Aborted {
                        step,
                        lr,
                        grad_norm: last_grad_norm,
                        detail: err.to_string(),
                        last_good,
                    });
                }
            }
            step += 1;
        }

        let run_eval = eval_data.is_some()
            && (cfg.eval_every != 0 && (epoch + 1) % cfg.eval_every.max(1) == 0
                || epoch + 1 == cfg.epochs);
        let (eval_loss, eval_acc) = if run_eval {
            let (l, a) = evaluate(model, eval_data.unwrap())?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        rows.push(EpochRow {
            epoch,
            train_loss: epoch_loss / n as f64,
            train_acc: epoch_correct as f64 / n as f64,
            eval_loss,
            eval_acc,
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
        last_good = model.snapshot();
    }

    let (final_eval_loss, final_eval_acc) = match eval_data {
        Some(eval) => evaluate(model, eval)?,
        None => {
            let last = rows.last().expect("epochs >= 1");
            (last.train_loss, last.train_acc)
        }
    };
    Ok(RunMetrics {
        rows,
        trainable_params: model.count_trainable(true),
        wall_seconds: started.elapsed().as_secs_f64(),
        final_eval_loss,
        final_eval_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{piecewise, PiecewiseSpec};
    use crate::model::{apply_plan, ActivationCfg, AdaptationPlan, Arch, ModelConfig, PlanMode};

    fn tiny_mlp(seed: u64) -> ModelConfig {
        ModelConfig {
            arch: Arch::Mlp,
            depth: 2,
            hidden: 16,
            heads: 1,
            ffn_mult: 1,
            activation: ActivationCfg::FixedGelu,
            head_classes: 2,
            in_features: 8,
            tokens: 1,
            layer_norm_trainable: false,
            seed,
        }
    }

    #[test]
    fn adamw_single_step_reference() {
        // p = 1, grad = 1, lr = 0.1, wd = 0: bias-corrected first step moves
        // by lr / (1 + eps') with unit moments, so p ~ 0.9.
        let mut data = vec![1.0];
        let mut state = AdamState {
            m: vec![0.0],
            v: vec![0.0],
        };
        adamw_update(
            &mut data,
            &[1.0],
            &mut state,
            0.1,
            0.0,
            0.9,
            0.999,
            1e-8,
            1,
        );
        // Independent scalar trace of the same step.
        let m = 0.1_f64; // (1-beta1)*g
        let v = 0.001_f64; // (1-beta2)*g^2
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((data[0] - expected).abs() < 1e-15);
        assert!((data[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_midpoint_is_half() {
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100) < 1e-18);
    }

    #[test]
    fn frozen_params_bit_identical_after_training() {
        let data = piecewise(&PiecewiseSpec::default(), 1).unwrap();
        let mut model = crate::model::Model::build(&tiny_mlp(2)).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::HeadOnly,
                include_head: true,
                seed: 0,
            },
        )
        .unwrap();
        let before = model.snapshot();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        };
        train(&mut model, &data, None, &cfg).unwrap();
        let after = model.snapshot();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if name.starts_with("head.") {
                continue;
            }
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} changed");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = piecewise(&PiecewiseSpec::default(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = |_| {
            let mut model = crate::model::Model::build(&tiny_mlp(5)).unwrap();
            apply_plan(
                &mut model,
                &AdaptationPlan {
                    mode: PlanMode::Full,
                    include_head: true,
                    seed: 0,
                },
            )
            .unwrap();
            let metrics = train(&mut model, &data, Some(&data), &cfg).unwrap();
            (metrics.rows.clone(), model.snapshot())
        };
        let (rows_a, snap_a) = run(0);
        let (rows_b, snap_b) = run(1);
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.eval_loss.map(f64::to_bits), b.eval_loss.map(f64::to_bits));
        }
        assert_eq!(snap_a, snap_b);
    }

    #[test]
    fn evaluate_is_pure() {
        let data = piecewise(&PiecewiseSpec::default(), 7).unwrap();
        let model = crate::model::Model::build(&tiny_mlp(3)).unwrap();
        let snapshot = model.snapshot();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.snapshot(), snapshot);
    }

    #[test]
    fn evaluate_on_empty_dataset_is_contract_error() {
        let model = crate::model::Model::build(&tiny_mlp(3)).unwrap();
        let empty = Dataset {
            features: Tensor::zeros(vec![0, 8]),
            labels: vec![],
            classes: 2,
        };
        assert!(matches!(
            evaluate(&model, &empty),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn untrained_two_class_accuracy_within_binomial_band() {
        // 1000 random-labeled samples, untrained model: accuracy inside the
        // 5-sigma band around 0.5 (sigma = 0.0158).
        let mut spec = PiecewiseSpec::default();
        spec.samples = 1000;
        spec.label_noise = 0.5; // labels effectively random
        let data = piecewise(&spec, 13).unwrap();
        let model = crate::model::Model::build(&tiny_mlp(21)).unwrap();
        let (_, acc) = evaluate(&model, &data).unwrap();
        assert!((0.35..=0.65).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn memorizes_sixteen_points() {
        let mut spec = PiecewiseSpec::default();
        spec.samples = 16;
        let data = piecewise(&spec, 5).unwrap();
        let mut model = crate::model::Model::build(&tiny_mlp(6)).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Full,
                include_head: true,
                seed: 0,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            seed: 1,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let metrics = train(&mut model, &data, Some(&data), &cfg).unwrap();
        assert!(
            metrics.rows.last().unwrap().train_loss < 1e-3,
            "loss {}",
            metrics.rows.last().unwrap().train_loss
        );
        assert_eq!(metrics.final_eval_acc, 1.0);
    }

    #[test]
    fn abort_on_divergence_restores_last_good() {
        let data = piecewise(&PiecewiseSpec::default(), 2).unwrap();
        let mut model = crate::model::Model::build(&tiny_mlp(8)).unwrap();
        apply_plan(
            &mut model,
            &AdaptationPlan {
                mode: PlanMode::Full,
                include_head: true,
                seed: 0,
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 1e300, // one update overflows the next forward pass
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        match train(&mut model, &data, None, &cfg) {
            Err(TrainError::Aborted { step, detail, last_good, .. }) => {
                assert!(!detail.is_empty());
                assert!(!last_good.is_empty());
                let _ = step;
            }
            other => panic!("expected abort, got {:?}", other.map(|m| m.final_eval_acc)),
        }
    }
}
