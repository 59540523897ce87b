//! Loop-by-loop attention forward pass, generic over the scalar type.
//!
//! Shares no code with [`crate::attention::attention_forward`]: projections,
//! grouping and softmax are spelled out element by element. Evaluated in
//! [`DoubleDouble`] it gives finite differences free of `f64` cancellation
//! noise.

use crate::attention::{AttentionBlock, Weighting};
use crate::numerics::{DoubleDouble, Real, Tensor};

fn lift<R: Real>(t: &Tensor) -> Vec<R> {
    t.data().iter().map(|&v| R::from_f64(v)).collect()
}

/// Output of `block` on `x_q` against `x_kv`, row-major `n × d`.
pub fn reference_forward<R: Real>(block: &AttentionBlock, x_q: &Tensor, x_kv: &Tensor) -> Vec<R> {
    let cfg = &block.config;
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let hd = cfg.head_dim();
    let kv = cfg.kv_width();
    let full = cfg.full_width();
    let n = x_q.rows();
    let m = x_kv.rows();
    let p = &block.projections;

    let xq: Vec<R> = lift(x_q);
    let xkv: Vec<R> = lift(x_kv);
    let wq: Vec<R> = lift(&p.w_q);
    let wo: Vec<R> = lift(&p.w_o);

    let group_of = |head: usize| head / cfg.group_size();
    let grouped = |w: &Tensor, agg: Option<&Tensor>| -> Vec<R> {
        let src: Vec<R> = lift(w);
        let Some(agg) = agg else { return src };
        let a: Vec<R> = lift(agg);
        let mut out = vec![R::zero(); d * kv];
        for r in 0..d {
            for head in 0..h {
                let g = group_of(head);
                for c in 0..hd {
                    let coef = match cfg.weighting {
                        Weighting::Scalar => a[head],
                        Weighting::Row => a[head * d + r],
                        Weighting::Col => a[head * hd + c],
                        Weighting::None => unreachable!(),
                    };
                    let slot = r * kv + g * hd + c;
                    out[slot] = out[slot] + coef * src[r * full + head * hd + c];
                }
            }
        }
        out
    };
    let wk = grouped(&p.w_k, block.agg.as_ref().map(|a| &a.k));
    let wv = grouped(&p.w_v, block.agg.as_ref().map(|a| &a.v));

    let project = |x: &[R], rows: usize, w: &[R], cols: usize| -> Vec<R> {
        let mut out = vec![R::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = R::zero();
                for r in 0..d {
                    acc = acc + x[i * d + r] * w[r * cols + j];
                }
                out[i * cols + j] = acc;
            }
        }
        out
    };
    let q = project(&xq, n, &wq, d);
    let k = project(&xkv, m, &wk, kv);
    let v = project(&xkv, m, &wv, kv);

    let scale = R::from_f64(1.0) / R::from_f64(hd as f64).sqrt();
    let mut concat = vec![R::zero(); n * d];
    for head in 0..h {
        let g = group_of(head);
        for i in 0..n {
            let visible = if cfg.causal { (i + 1).min(m) } else { m };
            let mut scores = Vec::with_capacity(visible);
            for j in 0..visible {
                let mut s = R::zero();
                for c in 0..hd {
                    s = s + q[i * d + head * hd + c] * k[j * kv + g * hd + c];
                }
                scores.push(s * scale);
            }
            let max = scores.iter().copied().fold(scores[0], R::max);
            let weights: Vec<R> = scores.iter().map(|&s| (s - max).exp()).collect();
            let total = weights.iter().copied().fold(R::zero(), |a, b| a + b);
            for c in 0..hd {
                let mut acc = R::zero();
                for j in 0..visible {
                    acc = acc + weights[j] / total * v[j * kv + g * hd + c];
                }
                concat[i * d + head * hd + c] = acc;
            }
        }
    }
    project(&concat, n, &wo, d)
}

/// `Σ out²` evaluated in double-double precision.
pub fn reference_sum_sq_loss(block: &AttentionBlock, x_q: &Tensor, x_kv: &Tensor) -> DoubleDouble {
    reference_forward::<DoubleDouble>(block, x_q, x_kv)
        .into_iter()
        .fold(DoubleDouble::new(0.0), |acc, v| acc + v * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_forward, AttentionConfig, InitScheme};
    use crate::numerics::SeededRng;

    #[test]
    fn agrees_with_production_forward() {
        for weighting in [Weighting::None, Weighting::Scalar, Weighting::Row, Weighting::Col] {
            let mut rng = SeededRng::new(3);
            let cfg = AttentionConfig::new(8, 4, 2, weighting)
                .unwrap()
                .with_init(InitScheme::Gaussian)
                .with_causal(true)
                .unwrap();
            let mha = AttentionBlock::random_mha(cfg, &mut rng).unwrap();
            let block = AttentionBlock::from_mha(&mha.projections, cfg, &mut rng).unwrap();
            let x = rng.gaussian(&[4, 8]);
            let (out, _) = attention_forward(&block, &x, &x).unwrap();
            let r64 = reference_forward::<f64>(&block, &x, &x);
            let rdd = reference_forward::<DoubleDouble>(&block, &x, &x);
            for ((a, b), c) in out.data().iter().zip(&r64).zip(&rdd) {
                assert!((a - b).abs() < 1e-12);
                assert!((a - c.to_f64()).abs() < 1e-12);
            }
        }
    }
}
