use wgqa_core::checkpoint::{convert, keys, AttnParam, AttnTensorName, BlockKind, CheckpointError, Stack};
use wgqa_core::trainer::{ModelConfig, ToyModel};
use wgqa_core::{fold_weights, AttentionConfig, Checkpoint, InitScheme, SeededRng, Weighting};

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_heads: 4,
        n_layers: 2,
        max_len: 5,
    }
}

fn mha() -> Checkpoint {
    ToyModel::init_mha(config(), 21).unwrap().to_checkpoint()
}

fn target(g: usize, w: Weighting) -> AttentionConfig {
    AttentionConfig::new(8, 4, g, w).unwrap()
}

#[test]
fn identity_conversion_keeps_tensors() {
    let src = mha();
    let out = convert(&src, &target(4, Weighting::None), 0).unwrap();
    assert_eq!(out.tensors, src.tensors);
    assert_eq!(out.metadata, src.metadata);
}

#[test]
fn conversion_through_identity_is_idempotent() {
    let src = mha();
    let via = convert(&src, &target(4, Weighting::None), 0).unwrap();
    for t in [target(2, Weighting::None), target(1, Weighting::Col).with_init(InitScheme::Gaussian)] {
        assert_eq!(convert(&via, &t, 3).unwrap(), convert(&src, &t, 3).unwrap());
    }
}

#[test]
fn mqa_conversion_is_mean_over_all_heads() {
    let src = mha();
    let out = convert(&src, &target(1, Weighting::None), 0).unwrap();
    let hd = 2;
    for name in src.decoder_blocks() {
        for p in [AttnParam::Wk, AttnParam::Wv] {
            let full = src.get(&name.with_param(p).to_string()).unwrap();
            let pooled = out.get(&name.with_param(p).to_string()).unwrap();
            assert_eq!(pooled.shape(), &[8, hd]);
            for r in 0..8 {
                for c in 0..hd {
                    let mean = (0..4).map(|i| full.at(r, i * hd + c)).sum::<f64>() / 4.0;
                    assert!((pooled.at(r, c) - mean).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn encoder_tensors_survive_every_conversion() {
    let src = mha();
    for w in [Weighting::None, Weighting::Scalar, Weighting::Row, Weighting::Col] {
        let out = convert(&src, &target(2, w), 4).unwrap();
        for (name, t) in &src.tensors {
            let is_decoder_attn = AttnTensorName::parse(name).is_some_and(|p| p.stack == Stack::Decoder);
            if !is_decoder_attn {
                assert_eq!(out.get(name).unwrap(), t, "{name} changed");
            }
        }
        assert_eq!(out.meta(keys::WEIGHTING), Some(w.as_str()));
    }
}

#[test]
fn folded_mean_equivalent_matches_mean_pooled_conversion() {
    let src = mha();
    let gqa = ToyModel::from_checkpoint(&convert(&src, &target(2, Weighting::None), 0).unwrap()).unwrap();
    for w in [Weighting::Scalar, Weighting::Row, Weighting::Col] {
        let wgqa = ToyModel::from_checkpoint(&convert(&src, &target(2, w), 0).unwrap()).unwrap();
        for ((_, _, a), (_, _, b)) in wgqa.decoder_blocks().zip(gqa.decoder_blocks()) {
            let folded = fold_weights(a).unwrap();
            assert_eq!(folded.projections, b.projections);
        }
    }
}

#[test]
fn converted_checkpoints_load_and_run() {
    let src = mha();
    let mut rng = SeededRng::new(1);
    for g in [1, 2, 4] {
        for w in [Weighting::None, Weighting::Scalar, Weighting::Row, Weighting::Col] {
            for init in [InitScheme::MeanEquivalent, InitScheme::Gaussian] {
                let ckpt = convert(&src, &target(g, w).with_init(init), 7).unwrap();
                let bytes = ckpt.to_bytes().unwrap();
                let model = ToyModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
                let src_tokens: Vec<usize> = (0..4).map(|_| rng.below(7)).collect();
                let logits = model.forward(&src_tokens, &[7, 1, 2]).unwrap();
                assert_eq!(logits.shape(), &[3, 7]);
                assert!(logits.is_finite());
            }
        }
    }
}

#[test]
fn conversion_errors() {
    let src = mha();
    let grouped = convert(&src, &target(2, Weighting::None), 0).unwrap();
    let err = convert(&grouped, &target(1, Weighting::None), 0).unwrap_err();
    assert_eq!(err.code(), "E_NOT_MHA");

    let other = AttentionConfig::new(16, 4, 2, Weighting::None).unwrap();
    assert_eq!(convert(&src, &other, 0).unwrap_err().code(), "E_GEOMETRY");

    let mut unknown = src.clone();
    unknown.set_meta(keys::LAYOUT, "mystery");
    assert!(matches!(convert(&unknown, &target(2, Weighting::None), 0), Err(CheckpointError::UnknownLayout(_))));
}

#[test]
fn file_round_trip_and_corruption_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = convert(&mha(), &target(2, Weighting::Row), 1).unwrap();
    ckpt.save_file(&path).unwrap();
    assert_eq!(Checkpoint::load_file(&path).unwrap(), ckpt);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err().code(), "E_MAGIC");
    assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().code(), "E_TRUNCATED");
    assert_eq!(Checkpoint::load_file(dir.path().join("absent")).unwrap_err().code(), "E_IO");
}

#[test]
fn weighted_checkpoint_names_follow_convention() {
    let ckpt = convert(&mha(), &target(2, Weighting::Col), 1).unwrap();
    let name = AttnTensorName::new(Stack::Decoder, 1, BlockKind::CrossAttention, AttnParam::AggV);
    assert_eq!(name.to_string(), "decoder.1.cross.agg_v");
    assert_eq!(ckpt.get("decoder.1.cross.agg_v").unwrap().shape(), &[4, 2]);
    assert!(ckpt.get("encoder.0.self.agg_k").is_err());
}
