//! Attention block geometry, the grouped/weighted head aggregation and the
//! forward pass shared by every variant (MHA, GQA, MQA and the weighted
//! WGQA family).
//!
//! Key and value projections are `d × (heads · head_dim)` matrices whose
//! column slice `[i·head_dim, (i+1)·head_dim)` belongs to head `i`. Grouping
//! merges the slices of `group_size` consecutive heads into one, either by a
//! plain mean or by a learned weighted sum. Aggregation always happens on the
//! projection matrices, never on activations, so a trained weighted block can
//! be folded into an ordinary grouped block.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::ForwardCache;
use crate::numerics::{SeededRng, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("query head {head} out of range for {n_heads} heads")]
    HeadIndex { head: usize, n_heads: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("block has no aggregation weights (weighting is none)")]
    NotWeighted,
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How grouped key/value heads are formed from their member heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weighting {
    /// Mean pooling (or no grouping at all when `G == h`).
    None,
    /// One learned scalar per head.
    Scalar,
    /// One learned length-`d` vector per head, scaling the rows of its slice.
    Row,
    /// One learned length-`head_dim` vector per head, scaling its columns.
    Col,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::None => "none",
            Weighting::Scalar => "scalar",
            Weighting::Row => "row",
            Weighting::Col => "col",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Weighting::None),
            "scalar" => Ok(Weighting::Scalar),
            "row" => Ok(Weighting::Row),
            "col" => Ok(Weighting::Col),
            other => Err(AttentionError::InvalidArgument(format!(
                "unknown weighting scheme {other:?}"
            ))),
        }
    }
}

/// Initialisation of freshly introduced aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    /// Every weight is `G/h`, which reproduces mean pooling exactly.
    MeanEquivalent,
    /// i.i.d. standard normal.
    Gaussian,
}

impl InitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::MeanEquivalent => "mean",
            InitScheme::Gaussian => "rand",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(InitScheme::MeanEquivalent),
            "rand" | "gaussian" => Ok(InitScheme::Gaussian),
            other => Err(AttentionError::InvalidArgument(format!(
                "unknown init scheme {other:?}"
            ))),
        }
    }
}

/// Named attention variants, following the usual result-table labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mha,
    Gqa,
    Mqa,
    Wgqa,
    Wmqa,
    RowWgqa,
    ColWgqa,
    RowWmqa,
    ColWmqa,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Mha,
        Variant::Gqa,
        Variant::Mqa,
        Variant::Wgqa,
        Variant::Wmqa,
        Variant::RowWgqa,
        Variant::ColWgqa,
        Variant::RowWmqa,
        Variant::ColWmqa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::Gqa => "gqa",
            Variant::Mqa => "mqa",
            Variant::Wgqa => "wgqa",
            Variant::Wmqa => "wmqa",
            Variant::RowWgqa => "rowwgqa",
            Variant::ColWgqa => "colwgqa",
            Variant::RowWmqa => "rowwmqa",
            Variant::ColWmqa => "colwmqa",
        }
    }

    pub fn weighting(self) -> Weighting {
        match self {
            Variant::Mha | Variant::Gqa | Variant::Mqa => Weighting::None,
            Variant::Wgqa | Variant::Wmqa => Weighting::Scalar,
            Variant::RowWgqa | Variant::RowWmqa => Weighting::Row,
            Variant::ColWgqa | Variant::ColWmqa => Weighting::Col,
        }
    }

    fn forces_single_group(self) -> bool {
        matches!(
            self,
            Variant::Mqa | Variant::Wmqa | Variant::RowWmqa | Variant::ColWmqa
        )
    }

    /// Group count for this variant given `n_heads` and an optional explicit
    /// request. MHA forces `G = h`, the MQA family forces `G = 1`, the rest
    /// default to `h/2` (or 1 when `h == 1`).
    pub fn resolve_groups(
        self,
        n_heads: usize,
        requested: Option<usize>,
    ) -> Result<usize, AttentionError> {
        let forced = if self == Variant::Mha {
            Some(n_heads)
        } else if self.forces_single_group() {
            Some(1)
        } else {
            None
        };
        match (forced, requested) {
            (Some(f), Some(r)) if f != r => Err(AttentionError::Config(format!(
                "variant {} requires {f} groups, got {r}",
                self.as_str()
            ))),
            (Some(f), _) => Ok(f),
            (None, Some(r)) => Ok(r),
            (None, None) => Ok((n_heads / 2).max(1)),
        }
    }

    /// Table-style label; Gaussian-initialised weighted variants carry a
    /// `rand` prefix.
    pub fn label(self, init: InitScheme) -> String {
        if self.weighting() != Weighting::None && init == InitScheme::Gaussian {
            format!("rand{}", self.as_str())
        } else {
            self.as_str().to_string()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| AttentionError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub weighting: Weighting,
    pub init: InitScheme,
    pub causal: bool,
    pub cross_attention: bool,
}

impl AttentionConfig {
    /// Plain multi-head self-attention geometry.
    pub fn mha(d_model: usize, n_heads: usize) -> Result<Self, AttentionError> {
        Self::new(d_model, n_heads, n_heads, Weighting::None)
    }

    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_kv_groups: usize,
        weighting: Weighting,
    ) -> Result<Self, AttentionError> {
        let cfg = Self {
            d_model,
            n_heads,
            n_kv_groups,
            weighting,
            init: InitScheme::MeanEquivalent,
            causal: false,
            cross_attention: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Result<Self, AttentionError> {
        self.causal = causal;
        self.validate()?;
        Ok(self)
    }

    pub fn with_cross(mut self, cross: bool) -> Result<Self, AttentionError> {
        self.cross_attention = cross;
        self.validate()?;
        Ok(self)
    }

    pub fn with_groups(mut self, groups: usize, weighting: Weighting) -> Result<Self, AttentionError> {
        self.n_kv_groups = groups;
        self.weighting = weighting;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let (d, h, g) = (self.d_model, self.n_heads, self.n_kv_groups);
        if d == 0 || h == 0 || g == 0 {
            return Err(AttentionError::Config(
                "d_model, n_heads and n_kv_groups must be positive".into(),
            ));
        }
        if d % h != 0 {
            return Err(AttentionError::Config(format!(
                "d_model {d} is not divisible by n_heads {h}"
            )));
        }
        if g > h || h % g != 0 {
            return Err(AttentionError::Config(format!(
                "n_kv_groups {g} must divide n_heads {h}"
            )));
        }
        if self.causal && self.cross_attention {
            return Err(AttentionError::Config(
                "cross-attention blocks cannot be causal".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }

    /// Column count of grouped key/value projections, `G · head_dim`.
    pub fn kv_width(&self) -> usize {
        self.n_kv_groups * self.head_dim()
    }

    /// Column count of ungrouped key/value projections, `h · head_dim`.
    pub fn full_width(&self) -> usize {
        self.n_heads * self.head_dim()
    }

    pub fn group_members(&self, group: usize) -> Range<usize> {
        let gs = self.group_size();
        group * gs..(group + 1) * gs
    }

    /// Mean-pooling coefficient `G/h`.
    pub fn mean_weight(&self) -> f64 {
        self.n_kv_groups as f64 / self.n_heads as f64
    }

    pub fn is_mha(&self) -> bool {
        self.n_kv_groups == self.n_heads && self.weighting == Weighting::None
    }

    /// Shape of one aggregation tensor (keys or values), if any.
    pub fn agg_shape(&self) -> Option<Vec<usize>> {
        match self.weighting {
            Weighting::None => None,
            Weighting::Scalar => Some(vec![self.n_heads]),
            Weighting::Row => Some(vec![self.n_heads, self.d_model]),
            Weighting::Col => Some(vec![self.n_heads, self.head_dim()]),
        }
    }

    /// Width of the stored key/value projections for a block with this config.
    pub fn stored_kv_width(&self) -> usize {
        if self.weighting == Weighting::None {
            self.kv_width()
        } else {
            self.full_width()
        }
    }

    /// Variant implied by the group count and weighting.
    pub fn variant(&self) -> Variant {
        let single = self.n_kv_groups == 1;
        match self.weighting {
            Weighting::None if self.n_kv_groups == self.n_heads => Variant::Mha,
            Weighting::None if single => Variant::Mqa,
            Weighting::None => Variant::Gqa,
            Weighting::Scalar if single => Variant::Wmqa,
            Weighting::Scalar => Variant::Wgqa,
            Weighting::Row if single => Variant::RowWmqa,
            Weighting::Row => Variant::RowWgqa,
            Weighting::Col if single => Variant::ColWmqa,
            Weighting::Col => Variant::ColWgqa,
        }
    }
}

/// Query, key, value and output projections of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl ProjectionSet {
    /// Random projections with `N(0, 1/d)` entries and the given key/value width.
    pub fn random(d_model: usize, kv_width: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        Self {
            w_q: rng.gaussian_scaled(&[d_model, d_model], std),
            w_k: rng.gaussian_scaled(&[d_model, kv_width], std),
            w_v: rng.gaussian_scaled(&[d_model, kv_width], std),
            w_o: rng.gaussian_scaled(&[d_model, d_model], std),
        }
    }
}

/// Learned per-head aggregation weights for keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    pub projections: ProjectionSet,
    pub agg: Option<AggregationWeights>,
}

fn expect_shape(what: &str, t: &Tensor, shape: &[usize]) -> Result<(), AttentionError> {
    if t.shape() != shape {
        return Err(AttentionError::Shape(format!(
            "{what} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl AttentionBlock {
    pub fn new(
        config: AttentionConfig,
        projections: ProjectionSet,
        agg: Option<AggregationWeights>,
    ) -> Result<Self, AttentionError> {
        let block = Self {
            config,
            projections,
            agg,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        let kv = cfg.stored_kv_width();
        let p = &self.projections;
        expect_shape("w_q", &p.w_q, &[d, d])?;
        expect_shape("w_k", &p.w_k, &[d, kv])?;
        expect_shape("w_v", &p.w_v, &[d, kv])?;
        expect_shape("w_o", &p.w_o, &[d, d])?;
        match (cfg.agg_shape(), &self.agg) {
            (None, None) => Ok(()),
            (Some(shape), Some(agg)) => {
                expect_shape("agg_k", &agg.k, &shape)?;
                expect_shape("agg_v", &agg.v, &shape)
            }
            (None, Some(_)) => Err(AttentionError::Shape(
                "aggregation weights present but weighting is none".into(),
            )),
            (Some(_), None) => Err(AttentionError::Shape(format!(
                "weighting {} requires aggregation weights",
                cfg.weighting
            ))),
        }
    }

    /// Random ungrouped (MHA) block for the given config's `d` and `h`.
    pub fn random_mha(config: AttentionConfig, rng: &mut SeededRng) -> Result<Self, AttentionError> {
        let cfg = config.with_groups(config.n_heads, Weighting::None)?;
        let projections = ProjectionSet::random(cfg.d_model, cfg.full_width(), rng);
        Self::new(cfg, projections, None)
    }

    /// Converts ungrouped MHA projections into a block of the `target`
    /// variant: mean pooled for `Weighting::None`, otherwise kept ungrouped
    /// with freshly initialised aggregation weights.
    pub fn from_mha(
        mha: &ProjectionSet,
        target: AttentionConfig,
        rng: &mut SeededRng,
    ) -> Result<Self, AttentionError> {
        target.validate()?;
        let d = target.d_model;
        expect_shape("source w_k", &mha.w_k, &[d, target.full_width()])?;
        expect_shape("source w_v", &mha.w_v, &[d, target.full_width()])?;
        if target.weighting == Weighting::None {
            let projections = ProjectionSet {
                w_q: mha.w_q.clone(),
                w_k: mean_pool_heads(&mha.w_k, &target)?,
                w_v: mean_pool_heads(&mha.w_v, &target)?,
                w_o: mha.w_o.clone(),
            };
            Self::new(target, projections, None)
        } else {
            let agg = init_aggregation(&target, rng)?;
            Self::new(target, mha.clone(), Some(agg))
        }
    }

    /// Key and value projections after grouping, `d × (G·head_dim)`.
    pub fn effective_kv(&self) -> Result<(Tensor, Tensor), AttentionError> {
        match &self.agg {
            Some(agg) => Ok((
                weighted_aggregate(&self.projections.w_k, &agg.k, &self.config)?,
                weighted_aggregate(&self.projections.w_v, &agg.v, &self.config)?,
            )),
            None => Ok((self.projections.w_k.clone(), self.projections.w_v.clone())),
        }
    }

    pub fn forward(&self, x_q: &Tensor, x_kv: &Tensor) -> Result<(Tensor, ForwardCache), AttentionError> {
        attention_forward(self, x_q, x_kv)
    }

    /// Number of trainable parameters in this block.
    pub fn param_count(&self) -> usize {
        let p = &self.projections;
        let agg = self.agg.as_ref().map_or(0, |a| a.k.len() + a.v.len());
        p.w_q.len() + p.w_k.len() + p.w_v.len() + p.w_o.len() + agg
    }
}

/// Key/value group used by `query_head`; consecutive query heads share one.
pub fn group_index(query_head: usize, config: &AttentionConfig) -> Result<usize, AttentionError> {
    if query_head >= config.n_heads {
        return Err(AttentionError::HeadIndex {
            head: query_head,
            n_heads: config.n_heads,
        });
    }
    Ok(query_head * config.n_kv_groups / config.n_heads)
}

fn check_ungrouped(w: &Tensor, config: &AttentionConfig) -> Result<(), AttentionError> {
    config.validate()?;
    expect_shape("ungrouped projection", w, &[config.d_model, config.full_width()])
}

/// Each group's slice is the element-wise mean of its member head slices.
pub fn mean_pool_heads(w: &Tensor, config: &AttentionConfig) -> Result<Tensor, AttentionError> {
    check_ungrouped(w, config)?;
    let d = config.d_model;
    let hd = config.head_dim();
    let full = config.full_width();
    let kv = config.kv_width();
    let coef = config.mean_weight();
    let mut out = Tensor::zeros(&[d, kv]);
    let src = w.data();
    let dst = out.data_mut();
    for r in 0..d {
        for g in 0..config.n_kv_groups {
            for i in config.group_members(g) {
                for c in 0..hd {
                    dst[r * kv + g * hd + c] += coef * src[r * full + i * hd + c];
                }
            }
        }
    }
    Ok(out)
}

/// Coefficient applied to element `(row, col)` of head `head`'s slice.
#[inline]
pub(crate) fn agg_coef(agg: &[f64], weighting: Weighting, head: usize, row: usize, col: usize, d: usize, hd: usize) -> f64 {
    match weighting {
        Weighting::Scalar => agg[head],
        Weighting::Row => agg[head * d + row],
        Weighting::Col => agg[head * hd + col],
        Weighting::None => unreachable!("no coefficients without weighting"),
    }
}

fn check_agg(agg: &Tensor, config: &AttentionConfig) -> Result<(), AttentionError> {
    let shape = config.agg_shape().ok_or(AttentionError::NotWeighted)?;
    expect_shape("aggregation weights", agg, &shape)
}

/// Each group's slice is `Σ_i agg_i ⊙ head_slice_i` over its member heads,
/// where `⊙` is a scalar, per-row or per-column scaling depending on the
/// config's weighting scheme.
pub fn weighted_aggregate(
    w: &Tensor,
    agg: &Tensor,
    config: &AttentionConfig,
) -> Result<Tensor, AttentionError> {
    check_ungrouped(w, config)?;
    check_agg(agg, config)?;
    let d = config.d_model;
    let hd = config.head_dim();
    let full = config.full_width();
    let kv = config.kv_width();
    let mut out = Tensor::zeros(&[d, kv]);
    let (src, a) = (w.data(), agg.data());
    let dst = out.data_mut();
    for r in 0..d {
        for g in 0..config.n_kv_groups {
            for i in config.group_members(g) {
                for c in 0..hd {
                    let coef = agg_coef(a, config.weighting, i, r, c, d, hd);
                    dst[r * kv + g * hd + c] += coef * src[r * full + i * hd + c];
                }
            }
        }
    }
    Ok(out)
}

/// Fresh aggregation weights for a weighted config.
pub fn init_aggregation(
    config: &AttentionConfig,
    rng: &mut SeededRng,
) -> Result<AggregationWeights, AttentionError> {
    let shape = config.agg_shape().ok_or(AttentionError::NotWeighted)?;
    Ok(match config.init {
        InitScheme::MeanEquivalent => {
            let v = config.mean_weight();
            AggregationWeights {
                k: Tensor::full(&shape, v),
                v: Tensor::full(&shape, v),
            }
        }
        InitScheme::Gaussian => AggregationWeights {
            k: rng.gaussian(&shape),
            v: rng.gaussian(&shape),
        },
    })
}

/// Runs the block on queries `x_q` (`n × d`) against keys/values from `x_kv`
/// (`m × d`). Scores are scaled by `1/√head_dim`; in causal blocks query `i`
/// only sees key positions `j ≤ i`.
pub fn attention_forward(
    block: &AttentionBlock,
    x_q: &Tensor,
    x_kv: &Tensor,
) -> Result<(Tensor, ForwardCache), AttentionError> {
    let cfg = &block.config;
    let d = cfg.d_model;
    let (n, dq) = x_q.dims2()?;
    let (m, dkv) = x_kv.dims2()?;
    if dq != d || dkv != d {
        return Err(AttentionError::Shape(format!(
            "inputs {:?} and {:?} must both have {d} columns",
            x_q.shape(),
            x_kv.shape()
        )));
    }
    x_q.ensure_finite("x_q")?;
    x_kv.ensure_finite("x_kv")?;

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let (wk_grouped, wv_grouped) = block.effective_kv()?;
    let q = x_q.matmul(&block.projections.w_q)?;
    let k = x_kv.matmul(&wk_grouped)?;
    let v = x_kv.matmul(&wv_grouped)?;

    let mut concat = Tensor::zeros(&[n, d]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let g = group_index(head, cfg)?;
        let q_h = q.col_slice(head * hd, (head + 1) * hd)?;
        let k_g = k.col_slice(g * hd, (g + 1) * hd)?;
        let v_g = v.col_slice(g * hd, (g + 1) * hd)?;
        let mut scores = q_h.matmul_nt(&k_g)?.scale(scale);
        if cfg.causal {
            for i in 0..n {
                for j in (i + 1)..m {
                    *scores.at_mut(i, j) = f64::NEG_INFINITY;
                }
            }
        }
        let p = scores.softmax_rows()?;
        let o = p.matmul(&v_g)?;
        concat.add_col_slice(head * hd, &o)?;
        probs.push(p);
    }
    let out = concat.matmul(&block.projections.w_o)?;
    let cache = ForwardCache {
        x_q: x_q.clone(),
        x_kv: x_kv.clone(),
        wk_grouped,
        wv_grouped,
        q,
        k,
        v,
        probs,
        concat,
    };
    Ok((out, cache))
}

/// Extra trainable parameters added by the weighting scheme across
/// `n_blocks` attention blocks (keys and values both counted).
pub fn param_count_extra(config: &AttentionConfig, n_blocks: usize) -> u64 {
    let h = config.n_heads as u64;
    let per_block = match config.weighting {
        Weighting::None => 0,
        Weighting::Scalar => 2 * h,
        Weighting::Row => 2 * h * config.d_model as u64,
        Weighting::Col => 2 * h * config.head_dim() as u64,
    };
    per_block * n_blocks as u64
}

/// Precomputes the weighted aggregation into grouped projections, giving a
/// plain grouped block with identical outputs.
pub fn fold_weights(block: &AttentionBlock) -> Result<AttentionBlock, AttentionError> {
    if block.agg.is_none() {
        return Err(AttentionError::NotWeighted);
    }
    let (w_k, w_v) = block.effective_kv()?;
    let mut config = block.config;
    config.weighting = Weighting::None;
    AttentionBlock::new(
        config,
        ProjectionSet {
            w_q: block.projections.w_q.clone(),
            w_k,
            w_v,
            w_o: block.projections.w_o.clone(),
        },
        None,
    )
}

/// Bytes of key/value cache for `seq_len` tokens:
/// `2 · seq_len · G · head_dim · n_layers · blocks_per_layer · bytes_per_elem`.
pub fn kv_cache_bytes(
    config: &AttentionConfig,
    seq_len: u64,
    n_layers: u64,
    blocks_per_layer: u64,
    bytes_per_elem: u64,
) -> Result<u64, AttentionError> {
    config.validate()?;
    if seq_len == 0 || n_layers == 0 || blocks_per_layer == 0 || bytes_per_elem == 0 {
        return Err(AttentionError::InvalidArgument(
            "seq_len, n_layers, blocks_per_layer and bytes_per_elem must be positive".into(),
        ));
    }
    Ok(2 * seq_len
        * config.n_kv_groups as u64
        * config.head_dim() as u64
        * n_layers
        * blocks_per_layer
        * bytes_per_elem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, h: usize, g: usize, w: Weighting) -> AttentionConfig {
        AttentionConfig::new(d, h, g, w).unwrap()
    }

    #[test]
    fn config_rejects_bad_geometry() {
        assert!(AttentionConfig::new(30, 4, 4, Weighting::None).is_err());
        assert!(AttentionConfig::new(32, 4, 3, Weighting::None).is_err());
        assert!(AttentionConfig::new(32, 4, 8, Weighting::None).is_err());
        assert!(AttentionConfig::new(32, 0, 1, Weighting::None).is_err());
        let c = cfg(32, 4, 2, Weighting::None).with_cross(true).unwrap();
        assert!(c.with_causal(true).is_err());
    }

    #[test]
    fn group_index_examples() {
        let c = cfg(768, 12, 6, Weighting::None);
        assert_eq!(group_index(0, &c).unwrap(), 0);
        assert_eq!(group_index(1, &c).unwrap(), 0);
        assert_eq!(group_index(2, &c).unwrap(), 1);
        let mqa = cfg(768, 12, 1, Weighting::None);
        assert!((0..12).all(|i| group_index(i, &mqa).unwrap() == 0));
        let mha = cfg(768, 12, 12, Weighting::None);
        assert!((0..12).all(|i| group_index(i, &mha).unwrap() == i));
        assert_eq!(
            group_index(12, &mha),
            Err(AttentionError::HeadIndex { head: 12, n_heads: 12 })
        );
    }

    #[test]
    fn mean_pool_two_scalars() {
        // head_dim 1: each row pools its two columns.
        let c = cfg(2, 2, 1, Weighting::None);
        let w = Tensor::from_rows(&[vec![2.0, 4.0], vec![1.0, 5.0]]).unwrap();
        let pooled = mean_pool_heads(&w, &c).unwrap();
        assert_eq!(pooled.data(), &[3.0, 3.0]);
    }

    #[test]
    fn mean_pool_identity_when_ungrouped() {
        let c = cfg(8, 4, 4, Weighting::None);
        let w = SeededRng::new(3).gaussian(&[8, 8]);
        assert_eq!(mean_pool_heads(&w, &c).unwrap(), w);
    }

    #[test]
    fn mean_pool_matches_per_element_loop() {
        let c = cfg(4, 4, 2, Weighting::None);
        let w = SeededRng::new(11).gaussian(&[4, 4]);
        let pooled = mean_pool_heads(&w, &c).unwrap();
        // head_dim = 1: group g averages columns 2g and 2g+1.
        for r in 0..4 {
            for g in 0..2 {
                let want = 0.5 * w.at(r, 2 * g) + 0.5 * w.at(r, 2 * g + 1);
                assert_eq!(pooled.at(r, g), want);
            }
        }
    }

    #[test]
    fn mean_pool_rejects_grouped_width() {
        let c = cfg(8, 4, 2, Weighting::None);
        assert!(matches!(
            mean_pool_heads(&Tensor::zeros(&[8, 4]), &c),
            Err(AttentionError::Shape(_))
        ));
    }

    #[test]
    fn weighted_aggregate_convex_combination() {
        let c = cfg(2, 2, 1, Weighting::Scalar);
        // Heads [[1,3],[2,4]] and [[5,7],[6,8]], one column at a time
        // (d=2, h=2 forces head_dim 1).
        let w = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 6.0]]).unwrap();
        let agg = Tensor::vector(vec![0.25, 0.75]).unwrap();
        let out = weighted_aggregate(&w, &agg, &c).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0]);
        let w = Tensor::from_rows(&[vec![3.0, 7.0], vec![4.0, 8.0]]).unwrap();
        let out = weighted_aggregate(&w, &agg, &c).unwrap();
        assert_eq!(out.data(), &[6.0, 7.0]);
    }

    #[test]
    fn weighted_aggregate_mean_weights_equal_mean_pool() {
        for (h, g) in [(4, 2), (4, 1), (4, 4)] {
            let c = cfg(8, h, g, Weighting::Scalar);
            let w = SeededRng::new(5).gaussian(&[8, 8]);
            let agg = Tensor::full(&[h], c.mean_weight());
            assert_eq!(
                weighted_aggregate(&w, &agg, &c).unwrap(),
                mean_pool_heads(&w, &c).unwrap()
            );
        }
    }

    #[test]
    fn weighted_aggregate_selector() {
        let c = cfg(4, 2, 1, Weighting::Scalar);
        let w = SeededRng::new(6).gaussian(&[4, 4]);
        let out = weighted_aggregate(&w, &Tensor::vector(vec![1.0, 0.0]).unwrap(), &c).unwrap();
        assert_eq!(out, w.col_slice(0, 2).unwrap());
    }

    #[test]
    fn weighted_aggregate_row_and_col_scaling() {
        let d = 4;
        let row = cfg(d, 2, 1, Weighting::Row);
        let col = cfg(d, 2, 1, Weighting::Col);
        let w = SeededRng::new(9).gaussian(&[4, 4]);
        let row_agg = SeededRng::new(10).gaussian(&[2, 4]);
        let col_agg = SeededRng::new(11).gaussian(&[2, 2]);
        let r_out = weighted_aggregate(&w, &row_agg, &row).unwrap();
        let c_out = weighted_aggregate(&w, &col_agg, &col).unwrap();
        for r in 0..d {
            for c in 0..2 {
                let want_r = row_agg.at(0, r) * w.at(r, c) + row_agg.at(1, r) * w.at(r, 2 + c);
                let want_c = col_agg.at(0, c) * w.at(r, c) + col_agg.at(1, c) * w.at(r, 2 + c);
                assert!((r_out.at(r, c) - want_r).abs() < 1e-15);
                assert!((c_out.at(r, c) - want_c).abs() < 1e-15);
            }
        }
        assert!(weighted_aggregate(&w, &col_agg, &row).is_err());
    }

    #[test]
    fn init_aggregation_values() {
        let mut rng = SeededRng::new(1);
        let c = cfg(768, 12, 6, Weighting::Scalar);
        let agg = init_aggregation(&c, &mut rng).unwrap();
        assert!(agg.k.data().iter().chain(agg.v.data()).all(|&v| v == 0.5));
        let c = cfg(768, 12, 1, Weighting::Row);
        let agg = init_aggregation(&c, &mut rng).unwrap();
        assert_eq!(agg.k.shape(), &[12, 768]);
        assert!(agg.k.data().iter().all(|&v| v == 1.0 / 12.0));
        let none = cfg(768, 12, 6, Weighting::None);
        assert_eq!(init_aggregation(&none, &mut rng), Err(AttentionError::NotWeighted));
    }

    #[test]
    fn init_aggregation_gaussian_replays() {
        let c = cfg(64, 8, 2, Weighting::Row).with_init(InitScheme::Gaussian);
        let a = init_aggregation(&c, &mut SeededRng::new(42)).unwrap();
        let b = init_aggregation(&c, &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
        let all: Vec<f64> = a.k.data().iter().chain(a.v.data()).copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // 1024 draws: 5 standard errors.
        assert!(mean.abs() < 5.0 / n.sqrt(), "{mean}");
        assert!((sd - 1.0).abs() < 0.12, "{sd}");
    }

    #[test]
    fn single_token_attention_is_identity_over_values() {
        let c = cfg(1, 1, 1, Weighting::None);
        let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let block = AttentionBlock::new(
            c,
            ProjectionSet {
                w_q: one.clone(),
                w_k: one.clone(),
                w_v: one.clone(),
                w_o: one,
            },
            None,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let (out, cache) = attention_forward(&block, &x, &x).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(cache.probs[0].data(), &[1.0]);
    }

    #[test]
    fn param_counts_match_reported_totals() {
        let base = cfg(768, 12, 6, Weighting::Scalar);
        assert_eq!(param_count_extra(&base, 24), 576);
        assert_eq!(param_count_extra(&base.with_groups(6, Weighting::Col).unwrap(), 24), 36_864);
        assert_eq!(param_count_extra(&base.with_groups(6, Weighting::Row).unwrap(), 24), 442_368);
        assert_eq!(param_count_extra(&base.with_groups(6, Weighting::None).unwrap(), 24), 0);
        assert_eq!(param_count_extra(&base, 0), 0);
    }

    #[test]
    fn fold_reduces_width_and_matches_mean_pool_at_init() {
        let mut rng = SeededRng::new(77);
        let mha = AttentionBlock::random_mha(cfg(8, 4, 4, Weighting::None), &mut rng).unwrap();
        let target = cfg(8, 4, 2, Weighting::Col);
        let block = AttentionBlock::from_mha(&mha.projections, target, &mut rng).unwrap();
        assert_eq!(block.projections.w_k.shape(), &[8, 8]);
        let folded = fold_weights(&block).unwrap();
        assert_eq!(folded.projections.w_k.shape(), &[8, 4]);
        assert_eq!(folded.config.weighting, Weighting::None);
        assert_eq!(
            folded.projections.w_k,
            mean_pool_heads(&mha.projections.w_k, &target).unwrap()
        );
        assert_eq!(fold_weights(&folded), Err(AttentionError::NotWeighted));
    }

    #[test]
    fn kv_cache_examples() {
        let mqa = cfg(768, 12, 1, Weighting::None);
        // 2 · 512 · 64 · 12 · 2 · 4
        assert_eq!(kv_cache_bytes(&mqa, 512, 12, 2, 4).unwrap(), 6_291_456);
        let mha = cfg(768, 12, 12, Weighting::None);
        let gqa = cfg(768, 12, 6, Weighting::None);
        assert_eq!(
            kv_cache_bytes(&gqa, 512, 12, 2, 4).unwrap() * 2,
            kv_cache_bytes(&mha, 512, 12, 2, 4).unwrap()
        );
        assert!(kv_cache_bytes(&mha, 0, 12, 2, 4).is_err());
    }

    #[test]
    fn variant_groups_and_names() {
        assert_eq!(Variant::Mha.resolve_groups(12, None).unwrap(), 12);
        assert_eq!(Variant::Gqa.resolve_groups(12, None).unwrap(), 6);
        assert_eq!(Variant::Gqa.resolve_groups(12, Some(12)).unwrap(), 12);
        assert!(Variant::Wmqa.resolve_groups(12, Some(2)).is_err());
        assert!(Variant::Mha.resolve_groups(12, Some(6)).is_err());
        assert_eq!("colwgqa".parse::<Variant>().unwrap(), Variant::ColWgqa);
        assert_eq!(Variant::Wgqa.label(InitScheme::Gaussian), "randwgqa");
        assert_eq!(Variant::Gqa.label(InitScheme::Gaussian), "gqa");
        for v in Variant::ALL {
            let g = v.resolve_groups(4, None).unwrap();
            let c = cfg(8, 4, g, v.weighting());
            assert_eq!(c.variant(), v, "G={g}");
        }
    }
}
