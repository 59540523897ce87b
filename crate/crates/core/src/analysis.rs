//! How far learned aggregation drifts from mean pooling: per-group mean
//! absolute difference (MAD) between the weighted and the mean-pooled
//! key/value projections, and a one-sample Student t-test on those values.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::attention::{mean_pool_heads, weighted_aggregate, AttentionBlock, AttentionError, Weighting};
use crate::checkpoint::{block_from_checkpoint, BlockKind, Checkpoint, CheckpointError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("checkpoint has no aggregation weights (weighting is none)")]
    NotWeighted,
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("malformed divergence csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOrValue {
    Key,
    Value,
}

impl KeyOrValue {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyOrValue::Key => "k",
            KeyOrValue::Value => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceRow {
    pub layer: usize,
    pub block: BlockKind,
    pub group: usize,
    pub k_or_v: KeyOrValue,
    pub mad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean: f64,
    pub std_dev: f64,
}

impl TTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub rows: Vec<DivergenceRow>,
    pub overall_mean: f64,
    pub n: usize,
    /// Test of the pooled MAD values against zero, two-sided; `Err` holds the
    /// reason when the sample is degenerate (e.g. all MADs zero).
    pub ttest: Result<TTest, String>,
}

impl DivergenceReport {
    pub fn from_rows(rows: Vec<DivergenceRow>) -> Self {
        let samples: Vec<f64> = rows.iter().map(|r| r.mad).collect();
        let n = samples.len();
        let overall_mean = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let ttest = one_sample_ttest(&samples, 0.0).map_err(|e| e.to_string());
        Self {
            rows,
            overall_mean,
            n,
            ttest,
        }
    }

    /// `layer,block,group,k_or_v,mad` with MAD written to 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,block,group,k_or_v,mad\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.16e}",
                r.layer,
                r.block.as_str(),
                r.group,
                r.k_or_v.as_str(),
                r.mad
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, AnalysisError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "layer,block,group,k_or_v,mad")) => {}
            _ => {
                return Err(AnalysisError::Csv {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| AnalysisError::Csv {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let block = match f[1] {
                "self" => BlockKind::SelfAttention,
                "cross" => BlockKind::CrossAttention,
                _ => return Err(bad("block must be self or cross")),
            };
            let k_or_v = match f[3] {
                "k" => KeyOrValue::Key,
                "v" => KeyOrValue::Value,
                _ => return Err(bad("k_or_v must be k or v")),
            };
            rows.push(DivergenceRow {
                layer: f[0].parse().map_err(|_| bad("bad layer"))?,
                block,
                group: f[2].parse().map_err(|_| bad("bad group"))?,
                k_or_v,
                mad: parse_float(f[4]).ok_or_else(|| bad("bad mad"))?,
            });
        }
        Ok(Self::from_rows(rows))
    }
}

fn parse_float(s: &str) -> Option<f64> {
    f64::from_str(s).ok().filter(|v| v.is_finite())
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "groups analysed: {}", self.n)?;
        writeln!(f, "overall mean absolute difference: {:.6e}", self.overall_mean)?;
        match &self.ttest {
            Ok(t) => {
                let verdict = if t.rejects(0.05) { "reject" } else { "accept" };
                write!(f, "t = {:.6}, df = {}, p = {:.6e} -> {verdict} H0 (mu0 = 0) at 0.05", t.t, t.df, t.p)
            }
            Err(reason) => write!(f, "t-test not applicable: {reason}"),
        }
    }
}

fn group_mads(weighted: &crate::Tensor, pooled: &crate::Tensor, groups: usize, hd: usize) -> Vec<f64> {
    let (d, kv) = (pooled.rows(), pooled.cols());
    (0..groups)
        .map(|g| {
            let mut sum = 0.0;
            for r in 0..d {
                for c in g * hd..(g + 1) * hd {
                    sum += (weighted.data()[r * kv + c] - pooled.data()[r * kv + c]).abs();
                }
            }
            sum / (d * hd) as f64
        })
        .collect()
}

/// Per-group MAD for the key and value projections of one weighted block.
pub fn block_divergence(
    block: &AttentionBlock,
    layer: usize,
    kind: BlockKind,
) -> Result<Vec<DivergenceRow>, AnalysisError> {
    let cfg = &block.config;
    let agg = block.agg.as_ref().ok_or(AnalysisError::NotWeighted)?;
    let mut rows = Vec::with_capacity(2 * cfg.n_kv_groups);
    for (k_or_v, w, a) in [
        (KeyOrValue::Key, &block.projections.w_k, &agg.k),
        (KeyOrValue::Value, &block.projections.w_v, &agg.v),
    ] {
        let weighted = weighted_aggregate(w, a, cfg)?;
        let pooled = mean_pool_heads(w, cfg)?;
        for (group, mad) in group_mads(&weighted, &pooled, cfg.n_kv_groups, cfg.head_dim())
            .into_iter()
            .enumerate()
        {
            rows.push(DivergenceRow {
                layer,
                block: kind,
                group,
                k_or_v,
                mad,
            });
        }
    }
    Ok(rows)
}

/// MAD for every decoder attention block of a weighted checkpoint, tested
/// against zero.
pub fn head_divergence(ckpt: &Checkpoint) -> Result<DivergenceReport, AnalysisError> {
    ckpt.validate()?;
    let cfg = ckpt
        .decoder_config()?
        .ok_or_else(|| CheckpointError::Inconsistent("missing geometry metadata".into()))?;
    if cfg.weighting == Weighting::None {
        return Err(AnalysisError::NotWeighted);
    }
    let mut rows = Vec::new();
    for name in ckpt.decoder_blocks() {
        let block = block_from_checkpoint(ckpt, name, cfg)?;
        rows.extend(block_divergence(&block, name.layer, name.kind)?);
    }
    Ok(DivergenceReport::from_rows(rows))
}

/// Two-sided one-sample t-test of `samples` against mean `mu0`.
pub fn one_sample_ttest(samples: &[f64], mu0: f64) -> Result<TTest, AnalysisError> {
    let n = samples.len();
    if n < 2 {
        return Err(AnalysisError::Degenerate(format!("need at least 2 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) || !mu0.is_finite() {
        return Err(AnalysisError::Degenerate("non-finite sample".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(AnalysisError::Degenerate("zero sample variance".into()));
    }
    let std_dev = var.sqrt();
    let t = (mean - mu0) / (std_dev / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, df as f64),
        df,
        mean,
        std_dev,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` via its continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + even * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + even / c;
        if c.abs() < TINY {
            c = TINY;
        }
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + odd * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = 1.0 + odd / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
