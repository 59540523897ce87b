//! Named-tensor checkpoints and MHA → grouped/weighted conversion.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic            8 bytes  "WGQACKPT"
//! offset 8   version          u32      currently 1
//! offset 12  header_len       u64      bytes of UTF-8 header that follow
//! offset 20  header           header_len bytes
//!            zero padding     up to the next multiple of 8
//!            payload          f64 values, tensors back to back
//! ```
//!
//! The header is a sequence of `\n`-terminated, tab-separated records:
//!
//! ```text
//! meta\t<key>\t<value>
//! tensor\t<name>\t<dim0>x<dim1>x...\t<byte offset into payload>
//! ```
//!
//! Metadata records are written in key order and tensor records in
//! checkpoint order. Each tensor occupies `8 · product(shape)` bytes, so every
//! tensor starts 8-byte aligned.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use crate::attention::{AttentionBlock, AttentionConfig, AttentionError, InitScheme, ProjectionSet, Weighting};
use crate::numerics::{SeededRng, Tensor};

pub const MAGIC: &[u8; 8] = b"WGQACKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Layout of the toy encoder-decoder model; the only layout `convert` accepts.
pub const TOY_SEQ2SEQ_LAYOUT: &str = "toy-seq2seq-v1";
pub const REGISTERED_LAYOUTS: &[&str] = &[TOY_SEQ2SEQ_LAYOUT];

pub mod keys {
    pub const FORMAT_VERSION: &str = "format_version";
    pub const LAYOUT: &str = "layout";
    pub const D_MODEL: &str = "d_model";
    pub const N_HEADS: &str = "n_heads";
    pub const N_KV_GROUPS: &str = "n_kv_groups";
    pub const WEIGHTING: &str = "weighting";
    pub const INIT: &str = "init";
    pub const VARIANT: &str = "variant";
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("checkpoint metadata inconsistent with tensors: {0}")]
    Inconsistent(String),
    #[error("invalid name or metadata entry: {0}")]
    InvalidEntry(String),
    #[error("unknown checkpoint layout {0:?}")]
    UnknownLayout(String),
    #[error("conversion requires an MHA source checkpoint, found {0}")]
    NotMha(String),
    #[error("incompatible target geometry: {0}")]
    IncompatibleGeometry(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Stable short code, also listed in the format documentation.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "E_MAGIC",
            CheckpointError::UnsupportedVersion(_) => "E_VERSION",
            CheckpointError::Truncated(_) => "E_TRUNCATED",
            CheckpointError::MalformedHeader(_) => "E_HEADER",
            CheckpointError::Inconsistent(_) => "E_INCONSISTENT",
            CheckpointError::InvalidEntry(_) => "E_ENTRY",
            CheckpointError::UnknownLayout(_) => "E_LAYOUT",
            CheckpointError::NotMha(_) => "E_NOT_MHA",
            CheckpointError::IncompatibleGeometry(_) => "E_GEOMETRY",
            CheckpointError::Attention(_) => "E_ATTENTION",
            CheckpointError::Io(_) => "E_IO",
        }
    }
}

/// Which stack an attention block lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    SelfAttention,
    CrossAttention,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::SelfAttention => "self",
            BlockKind::CrossAttention => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnParam {
    Wq,
    Wk,
    Wv,
    Wo,
    AggK,
    AggV,
}

impl AttnParam {
    pub const PROJECTIONS: [AttnParam; 4] = [AttnParam::Wq, AttnParam::Wk, AttnParam::Wv, AttnParam::Wo];

    pub fn as_str(self) -> &'static str {
        match self {
            AttnParam::Wq => "wq",
            AttnParam::Wk => "wk",
            AttnParam::Wv => "wv",
            AttnParam::Wo => "wo",
            AttnParam::AggK => "agg_k",
            AttnParam::AggV => "agg_v",
        }
    }
}

/// Parsed `{encoder|decoder}.{layer}.{self|cross}.{param}` tensor name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnTensorName {
    pub stack: Stack,
    pub layer: usize,
    pub kind: BlockKind,
    pub param: AttnParam,
}

impl AttnTensorName {
    pub fn new(stack: Stack, layer: usize, kind: BlockKind, param: AttnParam) -> Self {
        Self {
            stack,
            layer,
            kind,
            param,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let mut parts = name.split('.');
        let stack = match parts.next()? {
            "encoder" => Stack::Encoder,
            "decoder" => Stack::Decoder,
            _ => return None,
        };
        let layer = parts.next()?.parse().ok()?;
        let kind = match parts.next()? {
            "self" => BlockKind::SelfAttention,
            "cross" => BlockKind::CrossAttention,
            _ => return None,
        };
        let param = match parts.next()? {
            "wq" => AttnParam::Wq,
            "wk" => AttnParam::Wk,
            "wv" => AttnParam::Wv,
            "wo" => AttnParam::Wo,
            "agg_k" => AttnParam::AggK,
            "agg_v" => AttnParam::AggV,
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(Self::new(stack, layer, kind, param))
    }

    /// Same block, different parameter.
    pub fn with_param(self, param: AttnParam) -> Self {
        Self { param, ..self }
    }
}

impl fmt::Display for AttnTensorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        };
        write!(f, "{stack}.{}.{}.{}", self.layer, self.kind.as_str(), self.param.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut c = Self::default();
        c.set_meta(keys::FORMAT_VERSION, FORMAT_VERSION);
        c
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self
            .meta(key)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("missing metadata key {key:?}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Inconsistent(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("missing tensor {name:?}")))
    }

    /// Decoder attention config recorded in the metadata, if the geometry
    /// keys are present.
    pub fn decoder_config(&self) -> Result<Option<AttentionConfig>, CheckpointError> {
        if self.meta(keys::D_MODEL).is_none() {
            return Ok(None);
        }
        let d = self.meta_parse(keys::D_MODEL)?;
        let h = self.meta_parse(keys::N_HEADS)?;
        let g = self.meta_parse(keys::N_KV_GROUPS)?;
        let weighting = self.meta_parse::<Weighting>(keys::WEIGHTING)?;
        let init = match self.meta(keys::INIT) {
            Some(raw) => raw
                .parse::<InitScheme>()
                .map_err(|_| CheckpointError::Inconsistent(format!("bad init {raw:?}")))?,
            None => InitScheme::MeanEquivalent,
        };
        let cfg = AttentionConfig::new(d, h, g, weighting)
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?
            .with_init(init);
        Ok(Some(cfg))
    }

    /// Checks that every attention tensor matches the recorded geometry.
    /// Encoder blocks are always plain MHA.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        if let Some(v) = self.meta(keys::FORMAT_VERSION) {
            if v != FORMAT_VERSION.to_string() {
                return Err(CheckpointError::Inconsistent(format!(
                    "format_version metadata {v:?} does not match container version {FORMAT_VERSION}"
                )));
            }
        }
        let Some(dec) = self.decoder_config()? else {
            return Ok(());
        };
        let enc = AttentionConfig::mha(dec.d_model, dec.n_heads)?;
        let d = dec.d_model;
        for (name, t) in &self.tensors {
            let Some(parsed) = AttnTensorName::parse(name) else {
                continue;
            };
            let cfg = match parsed.stack {
                Stack::Encoder => &enc,
                Stack::Decoder => &dec,
            };
            let expected: Option<Vec<usize>> = match parsed.param {
                AttnParam::Wq | AttnParam::Wo => Some(vec![d, d]),
                AttnParam::Wk | AttnParam::Wv => Some(vec![d, cfg.stored_kv_width()]),
                AttnParam::AggK | AttnParam::AggV => cfg.agg_shape(),
            };
            match expected {
                Some(shape) if shape == t.shape() => {}
                Some(shape) => {
                    return Err(CheckpointError::Inconsistent(format!(
                        "{name} has shape {:?}, geometry implies {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(CheckpointError::Inconsistent(format!(
                        "{name} present but weighting is none"
                    )))
                }
            }
        }
        if dec.weighting != Weighting::None {
            for name in self.tensors.keys() {
                if let Some(p) = AttnTensorName::parse(name) {
                    if p.stack == Stack::Decoder && p.param == AttnParam::Wq {
                        for agg in [AttnParam::AggK, AttnParam::AggV] {
                            let agg_name = p.with_param(agg).to_string();
                            if !self.tensors.contains_key(&agg_name) {
                                return Err(CheckpointError::Inconsistent(format!(
                                    "weighted checkpoint lacks {agg_name}"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut header = String::new();
        for (k, v) in &self.metadata {
            if !valid_token(k) || v.contains(['\t', '\n', '\r']) {
                return Err(CheckpointError::InvalidEntry(format!("metadata {k:?}={v:?}")));
            }
            header.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !valid_token(name) {
                return Err(CheckpointError::InvalidEntry(format!("tensor name {name:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor\t{name}\t{}\t{offset}\n", dims.join("x")));
            offset += 8 * t.len();
        }
        let payload_start = (PREAMBLE + header.len()).next_multiple_of(8);
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.resize(payload_start, 0);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated("preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("header of {header_len} bytes")))?;
        let header = std::str::from_utf8(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        let payload_start = header_end.next_multiple_of(8);
        let payload = bytes.get(payload_start..).unwrap_or(&[]);

        let mut ckpt = Checkpoint::default();
        for (lineno, line) in header.lines().enumerate() {
            let bad = |what: &str| CheckpointError::MalformedHeader(format!("line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    if ckpt.metadata.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(bad("duplicate metadata key"));
                    }
                }
                ["tensor", name, dims, offset] => {
                    let shape = dims
                        .split('x')
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad shape"))?;
                    let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
                    if !offset.is_multiple_of(8) {
                        return Err(bad("unaligned offset"));
                    }
                    let count = shape
                        .iter()
                        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                        .filter(|&c| c > 0)
                        .ok_or_else(|| bad("bad shape"))?;
                    let end = count
                        .checked_mul(8)
                        .and_then(|b| b.checked_add(offset))
                        .ok_or_else(|| bad("bad extent"))?;
                    if end > payload.len() {
                        return Err(CheckpointError::Truncated(format!(
                            "tensor {name} needs payload bytes {offset}..{end}, have {}",
                            payload.len()
                        )));
                    }
                    let data = payload[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let tensor = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
                    if ckpt.tensors.insert(name.to_string(), tensor).is_some() {
                        return Err(bad("duplicate tensor name"));
                    }
                }
                _ => return Err(bad("unrecognised record")),
            }
        }
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, sink: &mut impl Write) -> Result<(), CheckpointError> {
        self.validate()?;
        sink.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(source: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.validate()?;
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Attention blocks of the decoder in checkpoint order, keyed by the name
    /// of their `wq` tensor.
    pub fn decoder_blocks(&self) -> Vec<AttnTensorName> {
        self.tensors
            .keys()
            .filter_map(|n| AttnTensorName::parse(n))
            .filter(|p| p.stack == Stack::Decoder && p.param == AttnParam::Wq)
            .collect()
    }
}

/// Rebuilds the attention block whose tensors share `name`'s prefix.
pub fn block_from_checkpoint(
    ckpt: &Checkpoint,
    name: AttnTensorName,
    config: AttentionConfig,
) -> Result<AttentionBlock, CheckpointError> {
    let get = |p: AttnParam| ckpt.get(&name.with_param(p).to_string()).cloned();
    let projections = ProjectionSet {
        w_q: get(AttnParam::Wq)?,
        w_k: get(AttnParam::Wk)?,
        w_v: get(AttnParam::Wv)?,
        w_o: get(AttnParam::Wo)?,
    };
    let agg = if config.weighting == Weighting::None {
        None
    } else {
        Some(crate::attention::AggregationWeights {
            k: get(AttnParam::AggK)?,
            v: get(AttnParam::AggV)?,
        })
    };
    Ok(AttentionBlock::new(config, projections, agg)?)
}

/// Converts an MHA checkpoint of a registered layout into the `target`
/// variant. Only decoder attention tensors change: with weighting none the
/// key/value projections are mean pooled into `G` groups, otherwise they stay
/// ungrouped and aggregation weights are added after each block's `wo`.
/// Encoder tensors are copied untouched. `seed` drives Gaussian init.
pub fn convert(ckpt: &Checkpoint, target: &AttentionConfig, seed: u64) -> Result<Checkpoint, CheckpointError> {
    let layout = ckpt.meta(keys::LAYOUT).unwrap_or("<none>");
    if !REGISTERED_LAYOUTS.contains(&layout) {
        return Err(CheckpointError::UnknownLayout(layout.to_string()));
    }
    let source = ckpt
        .decoder_config()?
        .ok_or_else(|| CheckpointError::Inconsistent("missing geometry metadata".into()))?;
    if !source.is_mha() {
        return Err(CheckpointError::NotMha(source.variant().label(source.init)));
    }
    target.validate()?;
    if target.d_model != source.d_model || target.n_heads != source.n_heads {
        return Err(CheckpointError::IncompatibleGeometry(format!(
            "source d={} h={}, target d={} h={}",
            source.d_model, source.n_heads, target.d_model, target.n_heads
        )));
    }
    ckpt.validate()?;

    let mut rng = SeededRng::new(seed);
    let mut out = Checkpoint {
        metadata: ckpt.metadata.clone(),
        tensors: IndexMap::with_capacity(ckpt.tensors.len()),
    };
    for (name, tensor) in &ckpt.tensors {
        let parsed = AttnTensorName::parse(name).filter(|p| p.stack == Stack::Decoder);
        let Some(parsed) = parsed else {
            out.tensors.insert(name.clone(), tensor.clone());
            continue;
        };
        if parsed.param != AttnParam::Wq {
            continue;
        }
        let mha = block_from_checkpoint(ckpt, parsed, source)?;
        let mut cfg = *target;
        cfg.causal = false;
        cfg.cross_attention = false;
        let block = AttentionBlock::from_mha(&mha.projections, cfg, &mut rng)?;
        let p = &block.projections;
        for (param, t) in AttnParam::PROJECTIONS.into_iter().zip([&p.w_q, &p.w_k, &p.w_v, &p.w_o]) {
            out.insert(parsed.with_param(param).to_string(), t.clone());
        }
        if let Some(agg) = &block.agg {
            out.insert(parsed.with_param(AttnParam::AggK).to_string(), agg.k.clone());
            out.insert(parsed.with_param(AttnParam::AggV).to_string(), agg.v.clone());
        }
    }
    out.set_meta(keys::N_KV_GROUPS, target.n_kv_groups);
    out.set_meta(keys::WEIGHTING, target.weighting);
    out.set_meta(keys::INIT, target.init);
    out.set_meta(keys::VARIANT, target.variant().label(target.init));
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_ckpt(n: usize, seed: u64) -> Checkpoint {
        let mut rng = SeededRng::new(seed);
        let mut c = Checkpoint::new();
        c.set_meta("note", "random tensors");
        for i in 0..n {
            let rank = 1 + rng.below(3);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5)).collect();
            c.insert(format!("t{i}"), rng.gaussian(&shape));
        }
        c
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::new();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(bytes.len() % 8, 0);
    }

    #[test]
    fn random_checkpoint_round_trips_bit_exactly() {
        let c = random_ckpt(50, 5);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (name, t) in &c.tensors {
            let u = &back.tensors[name];
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), c.tensors.keys().collect::<Vec<_>>());
    }

    #[test]
    fn golden_bytes_for_tiny_checkpoint() {
        let mut c = Checkpoint::default();
        c.set_meta("k", "v");
        c.insert("a", Tensor::vector(vec![1.0, -2.0]).unwrap());
        let bytes = c.to_bytes().unwrap();
        let header = "meta\tk\tv\ntensor\ta\t2\t0\n";
        let mut want = Vec::new();
        want.extend_from_slice(b"WGQACKPT");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&(header.len() as u64).to_le_bytes());
        want.extend_from_slice(header.as_bytes());
        while want.len() % 8 != 0 {
            want.push(0);
        }
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_corruption_with_distinct_errors() {
        let bytes = random_ckpt(3, 1).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(2))));

        let cut = &bytes[..bytes.len() - 8];
        let err = Checkpoint::from_bytes(cut).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated(_)), "{err}");
        assert_eq!(err.code(), "E_TRUNCATED");

        assert!(matches!(Checkpoint::from_bytes(&bytes[..15]), Err(CheckpointError::Truncated(_))));

        let mut bad = bytes.clone();
        bad[20] = b'?';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::MalformedHeader(_))));
    }

    #[test]
    fn rejects_shape_metadata_mismatch() {
        let mut c = Checkpoint::new();
        c.set_meta(keys::D_MODEL, 8);
        c.set_meta(keys::N_HEADS, 4);
        c.set_meta(keys::N_KV_GROUPS, 2);
        c.set_meta(keys::WEIGHTING, "none");
        c.insert("decoder.0.self.wk", Tensor::zeros(&[8, 8]));
        let err = c.to_bytes().map(|b| Checkpoint::from_bytes(&b)).unwrap().unwrap_err();
        assert!(matches!(err, CheckpointError::Inconsistent(_)), "{err}");
        assert!(c.save(&mut Vec::new()).is_err());
    }

    #[test]
    fn rejects_bad_names() {
        let mut c = Checkpoint::new();
        c.insert("has\ttab", Tensor::zeros(&[1]));
        assert!(matches!(c.to_bytes(), Err(CheckpointError::InvalidEntry(_))));
    }

    #[test]
    fn tensor_names_round_trip() {
        let n = AttnTensorName::new(Stack::Decoder, 3, BlockKind::CrossAttention, AttnParam::AggV);
        assert_eq!(n.to_string(), "decoder.3.cross.agg_v");
        assert_eq!(AttnTensorName::parse("decoder.3.cross.agg_v"), Some(n));
        assert_eq!(AttnTensorName::parse("decoder.final_ln.gamma"), None);
        assert_eq!(AttnTensorName::parse("decoder.0.ffn.w1"), None);
        assert_eq!(AttnTensorName::parse("decoder.0.self.wq.extra"), None);
    }
}
