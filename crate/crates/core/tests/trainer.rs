use wgqa_core::checkpoint::convert;
use wgqa_core::trainer::{adamw_step, AdamState, AdamWConfig, ModelConfig, TaskKind, ToyModel, ToyTask, TrainConfig};
use wgqa_core::{evaluate, train, AttentionConfig, Tensor, Weighting};

fn model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        max_len: 8,
    }
}

fn wgqa(seed: u64) -> ToyModel {
    let mha = ToyModel::init_mha(model_config(), seed).unwrap();
    let target = AttentionConfig::new(32, 4, 2, Weighting::Scalar).unwrap();
    ToyModel::from_checkpoint(&convert(&mha.to_checkpoint(), &target, seed).unwrap()).unwrap()
}

fn copy_task() -> ToyTask {
    ToyTask::new(TaskKind::Copy, 16, 1, 8, 7).unwrap()
}

fn short(epochs: usize, steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        initial_lr: lr,
        epochs,
        steps_per_epoch: steps,
        batch_size: 4,
        seed: 1,
        ..Default::default()
    }
}

#[test]
fn adamw_single_scalar_step_matches_hand_computation() {
    let cfg = AdamWConfig::default();
    let (lr, w0, g) = (0.01, 0.5, 1.0);
    let mut w = Tensor::vector(vec![w0]).unwrap();
    let grad = Tensor::vector(vec![g]).unwrap();
    adamw_step(&mut [("w".into(), &mut w)], &[("w".into(), &grad)], &mut AdamState::default(), 1, lr, &cfg).unwrap();
    // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 after bias correction.
    let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
    let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
    let expected = w0 - lr * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * w0);
    assert!((w.data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_fixed_point() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut w = Tensor::from_rows(&[vec![1.0, -3.0], vec![0.25, 8.0]]).unwrap();
    let before = w.clone();
    let g = Tensor::zeros(&[2, 2]);
    let mut st = AdamState::default();
    for t in 1..=5 {
        adamw_step(&mut [("w".into(), &mut w)], &[("w".into(), &g)], &mut st, t, 0.1, &cfg).unwrap();
    }
    assert_eq!(w, before);
}

#[test]
fn adamw_rejects_step_zero_and_mismatch() {
    let mut w = Tensor::zeros(&[2]);
    let g = Tensor::zeros(&[3]);
    let cfg = AdamWConfig::default();
    assert!(adamw_step(&mut [("w".into(), &mut w)], &[("w".into(), &g)], &mut AdamState::default(), 1, 0.1, &cfg).is_err());
    let g = Tensor::zeros(&[2]);
    assert!(adamw_step(&mut [("w".into(), &mut w)], &[("w".into(), &g)], &mut AdamState::default(), 0, 0.1, &cfg).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = wgqa(1);
    let before = m.clone();
    let log = train(&mut m, &copy_task(), &short(1, 3, 0.0)).unwrap();
    assert_eq!(m, before);
    assert!(log.steps.iter().all(|s| s.lr == 0.0));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = wgqa(2);
        let log = train(&mut m, &copy_task(), &short(2, 4, 1e-3)).unwrap();
        (log.to_csv(), m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert!(a.starts_with("step,epoch,lr,loss,agg_k_g0_mean,agg_v_g0_mean,agg_k_g1_mean,agg_v_g1_mean\n"));
}

#[test]
fn one_step_moves_aggregation_weights() {
    let mut m = wgqa(3);
    let before = m.clone();
    train(&mut m, &copy_task(), &short(1, 2, 1e-3)).unwrap();
    let moved = m
        .decoder_blocks()
        .zip(before.decoder_blocks())
        .any(|((_, _, a), (_, _, b))| a.agg != b.agg);
    assert!(moved);
}

#[test]
fn loss_decreases_on_copy_task() {
    let mut m = wgqa(4);
    let cfg = TrainConfig {
        initial_lr: 1e-3,
        epochs: 3,
        steps_per_epoch: 60,
        batch_size: 8,
        seed: 5,
        ..Default::default()
    };
    let log = train(&mut m, &copy_task(), &cfg).unwrap();
    let first = log.epoch_mean_loss(0).unwrap();
    let last = log.epoch_mean_loss(2).unwrap();
    assert!(last < first, "{last} >= {first}");
    assert!(log.steps.iter().all(|s| s.loss.is_finite()));
    assert_eq!(log.snapshots.len(), 3);
    assert!((log.steps.last().unwrap().lr - 1e-3 / 180.0).abs() < 1e-18);
}

#[test]
fn untrained_models_score_at_chance() {
    // A single random model's greedy outputs are correlated across tokens, so
    // the chance-level check pools independent initialisations.
    let (mut correct, mut tokens) = (0.0, 0usize);
    for seed in 0..12 {
        let m = ToyModel::init_mha(model_config(), seed).unwrap();
        let r = evaluate(&m, &copy_task(), 200).unwrap();
        assert!((0.0..=1.0).contains(&r.exact_match));
        correct += r.token_accuracy * r.n_tokens as f64;
        tokens += r.n_tokens;
    }
    assert!(tokens >= 1000);
    let acc = correct / tokens as f64;
    let p = 1.0 / 16.0;
    let sigma = (p * (1.0 - p) / tokens as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}, sigma {sigma}");
}

#[test]
fn evaluate_rejects_empty_and_mismatched_tasks() {
    let m = ToyModel::init_mha(model_config(), 6).unwrap();
    assert!(evaluate(&m, &copy_task(), 0).is_err());
    let other = ToyTask::new(TaskKind::Reverse, 12, 1, 4, 0).unwrap();
    assert!(evaluate(&m, &other, 10).is_err());
    let mut m2 = m.clone();
    assert!(train(&mut m2, &other, &short(1, 1, 1e-3)).is_err());
}

#[test]
fn mean_equivalent_model_equals_pooled_gqa_model() {
    let mha = ToyModel::init_mha(model_config(), 8).unwrap().to_checkpoint();
    let gqa = ToyModel::from_checkpoint(&convert(&mha, &AttentionConfig::new(32, 4, 2, Weighting::None).unwrap(), 0).unwrap()).unwrap();
    for w in [Weighting::Scalar, Weighting::Row, Weighting::Col] {
        let wm = ToyModel::from_checkpoint(&convert(&mha, &AttentionConfig::new(32, 4, 2, w).unwrap(), 0).unwrap()).unwrap();
        for ex in copy_task().eval_set(10) {
            let dec_in = wm.teacher_input(&ex.tgt);
            let a = wm.forward(&ex.src, &dec_in).unwrap();
            let b = gqa.forward(&ex.src, &dec_in).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }
}
