//! Hand-derived backward pass for [`AttentionBlock`], including the gradient
//! with respect to the aggregation weights, and a finite-difference checker.

use std::fmt;

pub mod reference;

use thiserror::Error;

use crate::attention::{
    agg_coef, attention_forward, group_index, AttentionBlock, AttentionConfig, AttentionError,
    Weighting,
};
use crate::numerics::{DoubleDouble, Real, SeededRng, Tensor, TensorError};

/// Intermediates saved by [`attention_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub x_q: Tensor,
    pub x_kv: Tensor,
    /// Key/value projections after grouping, `d × (G·head_dim)`.
    pub wk_grouped: Tensor,
    pub wv_grouped: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Softmax probabilities, one `n × m` matrix per query head.
    pub probs: Vec<Tensor>,
    /// Concatenated head outputs before the output projection.
    pub concat: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_w_q: Tensor,
    pub d_w_k: Tensor,
    pub d_w_v: Tensor,
    pub d_w_o: Tensor,
    pub d_agg_k: Option<Tensor>,
    pub d_agg_v: Option<Tensor>,
    pub d_x_q: Tensor,
    pub d_x_kv: Tensor,
}

fn check_cache(block: &AttentionBlock, cache: &ForwardCache, d_out: &Tensor) -> Result<(), AttentionError> {
    let cfg = &block.config;
    let n = cache.x_q.rows();
    let m = cache.x_kv.rows();
    let ok = cache.wk_grouped.shape() == [cfg.d_model, cfg.kv_width()]
        && cache.q.shape() == [n, cfg.d_model]
        && cache.k.shape() == [m, cfg.kv_width()]
        && cache.probs.len() == cfg.n_heads
        && cache.probs.iter().all(|p| p.shape() == [n, m]);
    if !ok {
        return Err(AttentionError::Shape(
            "forward cache does not belong to this block".into(),
        ));
    }
    if d_out.shape() != [n, cfg.d_model] {
        return Err(AttentionError::Shape(format!(
            "d_out has shape {:?}, expected [{n}, {}]",
            d_out.shape(),
            cfg.d_model
        )));
    }
    Ok(())
}

/// Gradients of a scalar loss with upstream gradient `d_out` (`n × d`).
pub fn attention_backward(
    block: &AttentionBlock,
    cache: &ForwardCache,
    d_out: &Tensor,
) -> Result<Gradients, AttentionError> {
    check_cache(block, cache, d_out)?;
    let cfg = &block.config;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let n = cache.x_q.rows();
    let m = cache.x_kv.rows();

    let d_w_o = cache.concat.matmul_tn(d_out)?;
    let d_concat = d_out.matmul_nt(&block.projections.w_o)?;

    let mut d_q = Tensor::zeros(&[n, cfg.d_model]);
    let mut d_k = Tensor::zeros(&[m, cfg.kv_width()]);
    let mut d_v = Tensor::zeros(&[m, cfg.kv_width()]);
    for head in 0..cfg.n_heads {
        let g = group_index(head, cfg)?;
        let p = &cache.probs[head];
        let d_o = d_concat.col_slice(head * hd, (head + 1) * hd)?;
        let q_h = cache.q.col_slice(head * hd, (head + 1) * hd)?;
        let k_g = cache.k.col_slice(g * hd, (g + 1) * hd)?;
        let v_g = cache.v.col_slice(g * hd, (g + 1) * hd)?;

        d_v.add_col_slice(g * hd, &p.matmul_tn(&d_o)?)?;
        let d_p = d_o.matmul_nt(&v_g)?;
        // Softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
        let mut d_s = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let (p_row, dp_row) = (p.row(i), d_p.row(i));
            let inner: f64 = p_row.iter().zip(dp_row).map(|(a, b)| a * b).sum();
            for (j, ds) in d_s.row_mut(i).iter_mut().enumerate() {
                *ds = p_row[j] * (dp_row[j] - inner) * scale;
            }
        }
        d_q.add_col_slice(head * hd, &d_s.matmul(&k_g)?)?;
        d_k.add_col_slice(g * hd, &d_s.matmul_tn(&q_h)?)?;
    }

    let d_w_q = cache.x_q.matmul_tn(&d_q)?;
    let d_x_q = d_q.matmul_nt(&block.projections.w_q)?;
    let d_wk_grouped = cache.x_kv.matmul_tn(&d_k)?;
    let d_wv_grouped = cache.x_kv.matmul_tn(&d_v)?;
    let mut d_x_kv = d_k.matmul_nt(&cache.wk_grouped)?;
    d_x_kv.add_assign(&d_v.matmul_nt(&cache.wv_grouped)?)?;

    let (d_w_k, d_w_v, d_agg_k, d_agg_v) = match &block.agg {
        Some(agg) => {
            let (dwk, dak) = aggregate_backward(&block.projections.w_k, &agg.k, &d_wk_grouped, cfg)?;
            let (dwv, dav) = aggregate_backward(&block.projections.w_v, &agg.v, &d_wv_grouped, cfg)?;
            (dwk, dwv, Some(dak), Some(dav))
        }
        None => (d_wk_grouped, d_wv_grouped, None, None),
    };

    Ok(Gradients {
        d_w_q,
        d_w_k,
        d_w_v,
        d_w_o,
        d_agg_k,
        d_agg_v,
        d_x_q,
        d_x_kv,
    })
}

/// Pulls a gradient on the grouped projection back through the weighted
/// aggregation. Returns `(d_w_ungrouped, d_agg)`.
pub fn aggregate_backward(
    w: &Tensor,
    agg: &Tensor,
    d_grouped: &Tensor,
    config: &AttentionConfig,
) -> Result<(Tensor, Tensor), AttentionError> {
    if config.weighting == Weighting::None {
        return Err(AttentionError::NotWeighted);
    }
    let d = config.d_model;
    let hd = config.head_dim();
    let full = config.full_width();
    let kv = config.kv_width();
    if w.shape() != [d, full] || d_grouped.shape() != [d, kv] {
        return Err(AttentionError::Shape(format!(
            "aggregate_backward: w {:?}, d_grouped {:?}",
            w.shape(),
            d_grouped.shape()
        )));
    }
    let mut d_w = Tensor::zeros(&[d, full]);
    let mut d_agg = Tensor::zeros(agg.shape());
    let (src, a, up) = (w.data(), agg.data(), d_grouped.data());
    for r in 0..d {
        for g in 0..config.n_kv_groups {
            for i in config.group_members(g) {
                for c in 0..hd {
                    let upstream = up[r * kv + g * hd + c];
                    let coef = agg_coef(a, config.weighting, i, r, c, d, hd);
                    d_w.data_mut()[r * full + i * hd + c] = coef * upstream;
                    let slot = match config.weighting {
                        Weighting::Scalar => i,
                        Weighting::Row => i * d + r,
                        Weighting::Col => i * hd + c,
                        Weighting::None => unreachable!(),
                    };
                    d_agg.data_mut()[slot] += src[r * full + i * hd + c] * upstream;
                }
            }
        }
    }
    Ok((d_w, d_agg))
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite value while checking {param}")]
    NonFinite { param: String },
    #[error("eps and tol must be positive")]
    BadTolerance,
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub variant: String,
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,param,elements,max_rel_error,tol,passed\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                self.variant, e.param, e.elements, e.max_rel_error, self.tol, e.passed
            ));
        }
        out
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check: {} (eps={:e}, tol={:e})", self.variant, self.eps, self.tol)?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<6} {:>5} elems  max rel err {:.3e}  {}",
                e.param,
                e.elements,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Wq,
    Wk,
    Wv,
    Wo,
    AggK,
    AggV,
}

impl Param {
    fn name(self) -> &'static str {
        match self {
            Param::Wq => "w_q",
            Param::Wk => "w_k",
            Param::Wv => "w_v",
            Param::Wo => "w_o",
            Param::AggK => "agg_k",
            Param::AggV => "agg_v",
        }
    }

    fn get(self, block: &AttentionBlock) -> &Tensor {
        let p = &block.projections;
        match self {
            Param::Wq => &p.w_q,
            Param::Wk => &p.w_k,
            Param::Wv => &p.w_v,
            Param::Wo => &p.w_o,
            Param::AggK => &block.agg.as_ref().expect("weighted block").k,
            Param::AggV => &block.agg.as_ref().expect("weighted block").v,
        }
    }

    fn get_mut(self, block: &mut AttentionBlock) -> &mut Tensor {
        let p = &mut block.projections;
        match self {
            Param::Wq => &mut p.w_q,
            Param::Wk => &mut p.w_k,
            Param::Wv => &mut p.w_v,
            Param::Wo => &mut p.w_o,
            Param::AggK => &mut block.agg.as_mut().expect("weighted block").k,
            Param::AggV => &mut block.agg.as_mut().expect("weighted block").v,
        }
    }
}

fn sum_sq_loss(block: &AttentionBlock, x_q: &Tensor, x_kv: &Tensor) -> DoubleDouble {
    reference::reference_sum_sq_loss(block, x_q, x_kv)
}

/// Central differences with both the loss difference and the realised step
/// `fl(x+eps) − fl(x−eps)` kept in double-double, so only the final quotient
/// is rounded.
fn central_diff<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, TensorError>
where
    F: FnMut(&Tensor) -> DoubleDouble,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let plus = f(&probe);
        probe.data_mut()[i] = lo;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.to_f64().is_finite() || !minus.to_f64().is_finite() {
            return Err(TensorError::NonFinite(format!("objective evaluated near component {i}")));
        }
        let step = DoubleDouble::new(hi) - DoubleDouble::new(lo);
        grad.data_mut()[i] = ((plus - minus) / step).to_f64();
    }
    Ok(grad)
}

/// Gradient check with the default sequence lengths: 3 query positions, and
/// 4 key positions for cross-attention blocks.
pub fn grad_check(
    block: &AttentionBlock,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let m = if block.config.cross_attention { 4 } else { 3 };
    grad_check_with(block, 3, m, seed, eps, tol, attention_backward)
}

/// Compares `backward` against central differences of the loss
/// `Σ out²` on seeded `N(0,1)` inputs. The differenced loss is evaluated by
/// the double-double reference forward pass, so the comparison is limited by
/// truncation error rather than `f64` cancellation. Self-attention blocks use one input
/// for queries and keys (so `m` is ignored) and check its combined gradient
/// under the name `x`.
pub fn grad_check_with<B>(
    block: &AttentionBlock,
    n: usize,
    m: usize,
    seed: u64,
    eps: f64,
    tol: f64,
    backward: B,
) -> Result<GradCheckReport, GradCheckError>
where
    B: Fn(&AttentionBlock, &ForwardCache, &Tensor) -> Result<Gradients, AttentionError>,
{
    if !(eps > 0.0 && tol > 0.0) {
        return Err(GradCheckError::BadTolerance);
    }
    let cfg = block.config;
    let d = cfg.d_model;
    let mut rng = SeededRng::new(seed);
    let x_q = rng.gaussian(&[n, d]);
    let x_kv = if cfg.cross_attention {
        rng.gaussian(&[m, d])
    } else {
        x_q.clone()
    };

    let (out, cache) = attention_forward(block, &x_q, &x_kv)?;
    if !out.is_finite() {
        return Err(GradCheckError::NonFinite { param: "output".into() });
    }
    let grads = backward(block, &cache, &out.scale(2.0))?;

    let mut params = vec![Param::Wq, Param::Wk, Param::Wv, Param::Wo];
    if block.agg.is_some() {
        params.extend([Param::AggK, Param::AggV]);
    }
    let mut entries = Vec::new();
    let mut push = |param: &str, analytic: &Tensor, numeric: Result<Tensor, TensorError>| {
        let numeric = numeric.map_err(|_| GradCheckError::NonFinite { param: param.to_string() })?;
        if !analytic.is_finite() {
            return Err(GradCheckError::NonFinite { param: param.to_string() });
        }
        let err = max_relative_error(analytic, &numeric);
        entries.push(GradCheckEntry {
            param: param.to_string(),
            elements: analytic.len(),
            max_rel_error: err,
            passed: err < tol,
        });
        Ok(())
    };

    for param in params {
        let analytic = match param {
            Param::Wq => &grads.d_w_q,
            Param::Wk => &grads.d_w_k,
            Param::Wv => &grads.d_w_v,
            Param::Wo => &grads.d_w_o,
            Param::AggK => grads.d_agg_k.as_ref().expect("weighted gradients"),
            Param::AggV => grads.d_agg_v.as_ref().expect("weighted gradients"),
        };
        let mut probe = block.clone();
        let numeric = central_diff(
            |t| {
                *param.get_mut(&mut probe) = t.clone();
                sum_sq_loss(&probe, &x_q, &x_kv)
            },
            param.get(block),
            eps,
        );
        push(param.name(), analytic, numeric)?;
    }

    if cfg.cross_attention {
        let numeric = central_diff(|t| sum_sq_loss(block, t, &x_kv), &x_q, eps);
        push("x_q", &grads.d_x_q, numeric)?;
        let numeric = central_diff(|t| sum_sq_loss(block, &x_q, t), &x_kv, eps);
        push("x_kv", &grads.d_x_kv, numeric)?;
    } else {
        let combined = grads.d_x_q.add(&grads.d_x_kv).map_err(AttentionError::from)?;
        let numeric = central_diff(|t| sum_sq_loss(block, t, t), &x_q, eps);
        push("x", &combined, numeric)?;
    }

    let variant = cfg.variant().label(cfg.init);
    let kind = if cfg.cross_attention {
        "cross"
    } else if cfg.causal {
        "causal-self"
    } else {
        "self"
    };
    Ok(GradCheckReport {
        variant: format!("{variant} d={} h={} G={} {kind}", cfg.d_model, cfg.n_heads, cfg.n_kv_groups),
        eps,
        tol,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{fold_weights, AttentionConfig, InitScheme};

    fn weighted_block(weighting: Weighting, seed: u64) -> AttentionBlock {
        let mut rng = SeededRng::new(seed);
        let cfg = AttentionConfig::new(8, 4, 2, weighting)
            .unwrap()
            .with_init(InitScheme::Gaussian)
            .with_causal(true)
            .unwrap();
        let mha = AttentionBlock::random_mha(cfg, &mut rng).unwrap();
        AttentionBlock::from_mha(&mha.projections, cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let block = weighted_block(Weighting::Row, 1);
        let x = SeededRng::new(2).gaussian(&[3, 8]);
        let (_, cache) = attention_forward(&block, &x, &x).unwrap();
        let g = attention_backward(&block, &cache, &Tensor::zeros(&[3, 8])).unwrap();
        for t in [&g.d_w_q, &g.d_w_k, &g.d_w_v, &g.d_w_o, &g.d_x_q, &g.d_x_kv] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(g.d_agg_k.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_shapes_follow_parameters() {
        for w in [Weighting::Scalar, Weighting::Row, Weighting::Col] {
            let block = weighted_block(w, 3);
            let x = SeededRng::new(4).gaussian(&[2, 8]);
            let (out, cache) = attention_forward(&block, &x, &x).unwrap();
            let g = attention_backward(&block, &cache, &out).unwrap();
            assert_eq!(g.d_w_k.shape(), block.projections.w_k.shape());
            assert_eq!(g.d_agg_v.unwrap().shape(), block.agg.as_ref().unwrap().v.shape());
        }
    }

    #[test]
    fn rejects_foreign_cache() {
        let a = weighted_block(Weighting::Scalar, 5);
        let x = SeededRng::new(6).gaussian(&[2, 8]);
        let (out, cache) = attention_forward(&a, &x, &x).unwrap();
        let folded = fold_weights(&a).unwrap();
        let mut other = folded.clone();
        other.config.n_kv_groups = 4;
        other.projections.w_k = Tensor::zeros(&[8, 8]);
        other.projections.w_v = Tensor::zeros(&[8, 8]);
        assert!(attention_backward(&other, &cache, &out).is_err());
        assert!(attention_backward(&a, &cache, &Tensor::zeros(&[3, 8])).is_err());
    }

    #[test]
    fn one_hot_selector_gradient_on_zeroed_head() {
        let mut block = weighted_block(Weighting::Scalar, 7);
        let agg = block.agg.as_mut().unwrap();
        agg.k = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let report = grad_check(&block, 8, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report}");

        // d agg_k[1] = <K_1 slice, d grouped K of group 0>.
        let x = SeededRng::new(9).gaussian(&[3, 8]);
        let (out, cache) = attention_forward(&block, &x, &x).unwrap();
        let g = attention_backward(&block, &cache, &out.scale(2.0)).unwrap();
        let cfg = block.config;
        let folded = fold_weights(&block).unwrap();
        let (_, fcache) = attention_forward(&folded, &x, &x).unwrap();
        let fg = attention_backward(&folded, &fcache, &out.scale(2.0)).unwrap();
        let hd = cfg.head_dim();
        let k1 = block.projections.w_k.col_slice(hd, 2 * hd).unwrap();
        let up = fg.d_w_k.col_slice(0, hd).unwrap();
        let want = k1.dot(&up).unwrap();
        let got = g.d_agg_k.unwrap().data()[1];
        assert!(relative_error(got, want) < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn grad_check_passes_for_every_scheme() {
        for (i, w) in [Weighting::Scalar, Weighting::Row, Weighting::Col].into_iter().enumerate() {
            let block = weighted_block(w, 20 + i as u64);
            let report = grad_check(&block, 99, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "{report}");
        }
        let mut rng = SeededRng::new(30);
        let cfg = AttentionConfig::new(8, 4, 4, Weighting::None).unwrap().with_cross(true).unwrap();
        let mha = AttentionBlock::random_mha(cfg, &mut rng).unwrap();
        let report = grad_check(&mha, 31, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.entries.iter().any(|e| e.param == "x_kv"));
    }

    #[test]
    fn grad_check_catches_sign_flip() {
        let block = weighted_block(Weighting::Scalar, 40);
        let corrupted = |b: &AttentionBlock, c: &ForwardCache, d: &Tensor| {
            let mut g = attention_backward(b, c, d)?;
            g.d_agg_k = g.d_agg_k.map(|t| t.scale(-1.0));
            Ok(g)
        };
        let report = grad_check_with(&block, 3, 3, 41, 1e-5, 1e-6, corrupted).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.entries.iter().filter(|e| !e.passed).map(|e| e.param.as_str()).collect();
        assert_eq!(bad, ["agg_k"]);
        assert!(report.to_csv().contains("agg_k"));
    }

    #[test]
    fn grad_check_rejects_bad_tolerances() {
        let block = weighted_block(Weighting::Scalar, 50);
        assert_eq!(grad_check(&block, 1, 0.0, 1e-6), Err(GradCheckError::BadTolerance));
        assert_eq!(grad_check(&block, 1, 1e-5, -1.0), Err(GradCheckError::BadTolerance));
    }

    #[test]
    fn relative_error_metric() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
