//! Bidirectional multi-head self-attention and the pre-norm encoder block.

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Scalar;
use crate::Rng;

/// Graph handles for one attention sublayer's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Graph handles for one full encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub attn: AttentionWeights,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ff_in: NodeId,
    pub ff_in_bias: NodeId,
    pub ff_out: NodeId,
    pub ff_out_bias: NodeId,
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Output of [`multi_head_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[batch*seq, dim]`, after the output projection.
    pub output: NodeId,
    /// `[batch*heads, seq, seq]` softmax weights.
    pub weights: NodeId,
    /// `[batch*seq, dim]` value projection, before mixing.
    pub values: NodeId,
}

fn linear<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_tiled(y, b)
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head over `x: [batch*seq, dim]`. No mask:
/// every position attends to every other.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: NodeId,
    w: &AttentionWeights,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<AttentionOutput> {
    let q = linear(g, x, w.wq, w.bq)?;
    let k = linear(g, x, w.wk, w.bk)?;
    let v = linear(g, x, w.wv, w.bv)?;
    let qh = g.split_heads(q, batch, seq, heads)?;
    let kh = g.split_heads(k, batch, seq, heads)?;
    let vh = g.split_heads(v, batch, seq, heads)?;
    let head_dim = g.shape(qh)[2];
    let scores = g.matmul_nt(qh, kh)?;
    let scores = g.scale(scores, S::from_f64(1.0 / (head_dim as f64).sqrt()));
    let weights = g.softmax_rows(scores)?;
    let ctx = g.matmul(weights, vh)?;
    let merged = g.merge_heads(ctx, batch, heads)?;
    let output = linear(g, merged, w.wo, w.bo)?;
    Ok(AttentionOutput {
        output,
        weights,
        values: v,
    })
}

fn dropout<S: Scalar>(g: &mut Graph<'_, S>, x: NodeId, rate: f64, rng: Option<&mut Rng>) -> Result<NodeId> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = S::from_f64(1.0 / (1.0 - rate));
            let mask = (0..g.value(x).len())
                .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
                .collect();
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

/// Pre-norm encoder block over `x: [batch*seq, dim]`:
/// `x + Attn(LN(x))`, then `+ FF(LN(.))` with a GELU feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: NodeId,
    w: &BlockWeights,
    batch: usize,
    seq: usize,
    heads: usize,
    dropout_rate: f64,
    mut rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let eps = S::from_f64(LN_EPS);
    let h = g.layer_norm(x, w.ln1_gain, w.ln1_bias, eps)?;
    let attn = multi_head_attention(g, h, &w.attn, batch, seq, heads)?;
    let attn_out = dropout(g, attn.output, dropout_rate, rng.as_deref_mut())?;
    let x = g.add(x, attn_out)?;

    let h = g.layer_norm(x, w.ln2_gain, w.ln2_bias, eps)?;
    let f = linear(g, h, w.ff_in, w.ff_in_bias)?;
    let f = g.gelu(f);
    let f = linear(g, f, w.ff_out, w.ff_out_bias)?;
    let f = dropout(g, f, dropout_rate, rng)?;
    g.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weights(g: &mut Graph<'_, f64>, rng: &mut Rng, d: usize) -> AttentionWeights {
        let mut m = |s: &[usize]| g.input(random(rng, s));
        AttentionWeights {
            wq: m(&[d, d]),
            bq: m(&[d]),
            wk: m(&[d, d]),
            bk: m(&[d]),
            wv: m(&[d, d]),
            bv: m(&[d]),
            wo: m(&[d, d]),
            bo: m(&[d]),
        }
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let mut rng = Rng::seed_from_u64(5);
        let (seq, d) = (5, 8);
        let row: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 0.3).collect();
        let x = t(&[seq, d], row.iter().copied().cycle().take(seq * d).collect());
        let mut g = Graph::new();
        let w = weights(&mut g, &mut rng, d);
        let xi = g.input(x);
        let out = multi_head_attention(&mut g, xi, &w, 1, seq, 2).unwrap();
        for v in g.value(out.weights) {
            assert!((v - 1.0 / seq as f64).abs() < 1e-12);
        }
        let o = g.value(out.output);
        for r in 1..seq {
            assert_eq!(&o[r * d..(r + 1) * d], &o[..d]);
        }
    }

    #[test]
    fn single_position_returns_value_projection() {
        let mut rng = Rng::seed_from_u64(6);
        let d = 4;
        let mut g = Graph::new();
        let mut w = weights(&mut g, &mut rng, d);
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        w.wo = g.input(t(&[d, d], eye));
        w.bo = g.input(t(&[d], vec![0.0; d]));
        let xi = g.input(random(&mut rng, &[1, d]));
        let out = multi_head_attention(&mut g, xi, &w, 1, 1, 2).unwrap();
        assert_eq!(g.value(out.weights), &[1.0, 1.0]);
        assert_eq!(g.value(out.output), g.value(out.values));
    }

    /// One head, T=3, d_k=2, checked against a direct scalar evaluation.
    #[test]
    fn matches_scalar_loop_oracle() {
        let x = vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0];
        let wq = vec![0.3, -0.2, 0.8, 0.5];
        let wk = vec![-0.6, 0.4, 0.1, 0.9];
        let wv = vec![1.2, 0.0, -0.4, 0.7];
        let bq = vec![0.1, -0.1];
        let bk = vec![0.0, 0.2];
        let bv = vec![-0.3, 0.05];
        let proj = |w: &[f64], b: &[f64], r: usize, c: usize| {
            b[c] + x[r * 2] * w[c] + x[r * 2 + 1] * w[2 + c]
        };
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| {
                    (0..2)
                        .map(|c| proj(&wq, &bq, i, c) * proj(&wk, &bk, j, c))
                        .sum::<f64>()
                        / 2f64.sqrt()
                })
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (j, sj) in s.iter().enumerate() {
                let a = sj.exp() / z;
                for c in 0..2 {
                    expect[i * 2 + c] += a * proj(&wv, &bv, j, c);
                }
            }
        }

        let mut g = Graph::new();
        let w = AttentionWeights {
            wq: g.input(t(&[2, 2], wq.clone())),
            bq: g.input(t(&[2], bq.clone())),
            wk: g.input(t(&[2, 2], wk.clone())),
            bk: g.input(t(&[2], bk.clone())),
            wv: g.input(t(&[2, 2], wv.clone())),
            bv: g.input(t(&[2], bv.clone())),
            wo: g.input(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])),
            bo: g.input(t(&[2], vec![0.0, 0.0])),
        };
        let xi = g.input(t(&[3, 2], x.clone()));
        let out = multi_head_attention(&mut g, xi, &w, 1, 3, 1).unwrap();
        for (a, b) in g.value(out.output).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
