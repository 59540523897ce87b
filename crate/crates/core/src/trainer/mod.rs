//! Desk-scale training: a toy encoder-decoder, synthetic tasks, AdamW with a
//! linear learning-rate decay, and greedy-decoding evaluation.

mod adamw;
mod model;
mod task;

use std::fmt::Write as _;

use thiserror::Error;

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use model::{cross_entropy, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, ModelConfig, ToyModel, FFN_MULT};
pub use task::{Example, TaskKind, ToyTask};

use crate::attention::AttentionError;
use crate::checkpoint::{BlockKind, CheckpointError};
use crate::numerics::{SeededRng, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            epochs: 3,
            steps_per_epoch: 100,
            batch_size: 16,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// `initial_lr·(1 − t/T)` for `t` in `0..=T`, clamped at zero beyond.
    pub fn lr_at(&self, t: usize) -> f64 {
        let total = self.total_steps();
        if total == 0 || t >= total {
            return 0.0;
        }
        self.initial_lr * (1.0 - t as f64 / total as f64)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(TrainError::Config(format!("initial_lr must be >= 0, got {}", self.initial_lr)));
        }
        if self.total_steps() == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs, steps_per_epoch and batch_size must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(TrainError::Config("invalid AdamW constants".into()));
        }
        Ok(())
    }
}

/// Mean aggregation weight of one group's key and value heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub agg_k_mean: f64,
    pub agg_v_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-token cross-entropy of the batch, before the update.
    pub loss: f64,
    /// Per group, averaged over every decoder block, after the update.
    pub groups: Vec<GroupSummary>,
}

/// Aggregation weights of every decoder block at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AggSnapshot {
    pub epoch: usize,
    pub blocks: Vec<(usize, BlockKind, crate::attention::AggregationWeights)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<AggSnapshot>,
}

impl TrainLog {
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// `step,epoch,lr,loss` plus `agg_k_g{i}_mean,agg_v_g{i}_mean` per group.
    pub fn to_csv(&self) -> String {
        let n_groups = self.steps.first().map_or(0, |s| s.groups.len());
        let mut out = String::from("step,epoch,lr,loss");
        for g in 0..n_groups {
            let _ = write!(out, ",agg_k_g{g}_mean,agg_v_g{g}_mean");
        }
        out.push('\n');
        for s in &self.steps {
            let _ = write!(out, "{},{},{:e},{:e}", s.step, s.epoch, s.lr, s.loss);
            for g in &s.groups {
                let _ = write!(out, ",{:e},{:e}", g.agg_k_mean, g.agg_v_mean);
            }
            out.push('\n');
        }
        out
    }
}

fn group_summaries(model: &ToyModel) -> Vec<GroupSummary> {
    let cfg = &model.decoder_attention;
    let Some(shape) = cfg.agg_shape() else {
        return Vec::new();
    };
    let per_head = shape[1..].iter().product::<usize>().max(1);
    let mut sums = vec![(0.0, 0.0, 0usize); cfg.n_kv_groups];
    for (_, _, block) in model.decoder_blocks() {
        let Some(agg) = &block.agg else { continue };
        for head in 0..cfg.n_heads {
            let g = head / cfg.group_size();
            let range = head * per_head..(head + 1) * per_head;
            sums[g].0 += agg.k.data()[range.clone()].iter().sum::<f64>();
            sums[g].1 += agg.v.data()[range].iter().sum::<f64>();
            sums[g].2 += per_head;
        }
    }
    sums.into_iter()
        .map(|(k, v, n)| GroupSummary {
            agg_k_mean: k / n as f64,
            agg_v_mean: v / n as f64,
        })
        .collect()
}

fn snapshot(model: &ToyModel, epoch: usize) -> Option<AggSnapshot> {
    let blocks: Vec<_> = model
        .decoder_blocks()
        .filter_map(|(l, kind, b)| b.agg.clone().map(|a| (l, kind, a)))
        .collect();
    (!blocks.is_empty()).then_some(AggSnapshot { epoch, blocks })
}

fn check_task(model: &ToyModel, task: &ToyTask) -> Result<(), TrainError> {
    if task.vocab_size != model.config.vocab_size {
        return Err(TrainError::Config(format!(
            "task vocab {} does not match model vocab {}",
            task.vocab_size, model.config.vocab_size
        )));
    }
    if task.max_len > model.config.max_len {
        return Err(TrainError::Config(format!(
            "task sequences up to {} exceed model max_len {}",
            task.max_len, model.config.max_len
        )));
    }
    Ok(())
}

/// Trains `model` in place. Batches are drawn from a stream derived from the
/// task seed and `cfg.seed`, disjoint from the evaluation stream.
pub fn train(model: &mut ToyModel, task: &ToyTask, cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    check_task(model, task)?;
    let mut rng = SeededRng::stream(task.seed, cfg.seed.wrapping_add(1));
    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps() {
        let epoch = step / cfg.steps_per_epoch;
        let lr = cfg.lr_at(step);
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for _ in 0..cfg.batch_size {
            let ex = task.sample(&mut rng);
            loss_sum += model.loss_and_grad(&ex.src, &ex.tgt, &mut grads)?;
            tokens += ex.tgt.len();
        }
        let loss = loss_sum / tokens as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: step + 1, loss });
        }
        grads.scale_in_place(1.0 / tokens as f64);
        {
            let g = grads.named_params();
            let mut p = model.named_params_mut();
            adamw_step(&mut p, &g, &mut state, step as u64 + 1, lr, &cfg.optimizer)?;
        }
        log.steps.push(StepRecord {
            step: step + 1,
            epoch,
            lr,
            loss,
            groups: group_summaries(model),
        });
        if (step + 1) % cfg.steps_per_epoch == 0 {
            log.snapshots.extend(snapshot(model, epoch));
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub n_examples: usize,
    pub n_tokens: usize,
}

/// Greedy decoding on the task's fixed evaluation set; each output is
/// decoded to the target's length.
pub fn evaluate(model: &ToyModel, task: &ToyTask, n_examples: usize) -> Result<EvalResult, TrainError> {
    if n_examples == 0 {
        return Err(TrainError::Config("n_examples must be positive".into()));
    }
    check_task(model, task)?;
    let mut exact = 0usize;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for ex in task.eval_set(n_examples) {
        let pred = model.greedy_decode(&ex.src, ex.tgt.len())?;
        let hits = pred.iter().zip(&ex.tgt).filter(|(a, b)| a == b).count();
        correct += hits;
        tokens += ex.tgt.len();
        exact += usize::from(hits == ex.tgt.len());
    }
    Ok(EvalResult {
        exact_match: exact as f64 / n_examples as f64,
        token_accuracy: correct as f64 / tokens as f64,
        n_examples,
        n_tokens: tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_linear_and_ends_at_zero() {
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 5,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(5) - 5e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(10), 0.0);
        assert!((0..=10).all(|t| cfg.lr_at(t) >= 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            initial_lr: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
