//! Fused multi-head scaled-dot-product attention over a batch of
//! equal-length sequences stored as `[batch·seq × dim]` row blocks.

use rand::{Rng, RngCore};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};

/// Value added to attention scores of blocked key positions.
pub const MASK_VALUE: f64 = -1e9;

/// Key-padding plus optional causal restriction. Blocked pairs receive
/// [`MASK_VALUE`] before the softmax; a query whose keys are all blocked
/// gets all-zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    seq: usize,
    key_padding: Vec<bool>,
    causal: bool,
}

impl AttentionMask {
    /// `key_padding[b·seq + j]` is true when key `j` of sequence `b` is padding.
    pub fn new(batch: usize, seq: usize, key_padding: Vec<bool>, causal: bool) -> Result<Self> {
        if key_padding.len() != batch * seq {
            return Err(TensorError::Shape {
                op: "attention_mask",
                lhs: vec![batch, seq],
                rhs: vec![key_padding.len()],
            });
        }
        Ok(Self {
            batch,
            seq,
            key_padding,
            causal,
        })
    }

    pub fn unmasked(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            key_padding: vec![false; batch * seq],
            causal: false,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    #[inline]
    pub fn additive(&self, b: usize, query: usize, key: usize) -> f64 {
        if self.key_padding[b * self.seq + key] || (self.causal && key > query) {
            MASK_VALUE
        } else {
            0.0
        }
    }
}

#[derive(Debug)]
pub(crate) struct AttentionCache {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
    /// Post-softmax weights, `[batch, heads, seq, seq]`.
    pub probs: Vec<f64>,
    /// Scaled keep mask applied to `probs`, same layout.
    pub drop: Option<Vec<f64>>,
}

impl Graph {
    /// `softmax(Q Kᵀ / √d_h + mask) V` per head, heads concatenated along
    /// the feature axis. Optional dropout acts on the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: shape,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (rows, dim) = match shape[..] {
            [r, d] => (r, d),
            _ => {
                return Err(TensorError::Param {
                    op: "attention",
                    detail: format!("expected [batch·seq × dim], got {shape:?}"),
                })
            }
        };
        let (batch, seq) = (mask.batch, mask.seq);
        if rows != batch * seq {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![batch, seq],
            });
        }
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Param {
                op: "attention",
                detail: format!("dim {dim} not divisible by {heads} heads"),
            });
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));

        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * dim + off..][..dh];
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    let mut open = false;
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * dim + off..][..dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum();
                        let add = mask.additive(b, i, j);
                        open |= add == 0.0;
                        *p = s * scale + add;
                        max = max.max(*p);
                    }
                    // a query with every key blocked attends to nothing
                    if !open {
                        prow.iter_mut().for_each(|p| *p = 0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for p in prow.iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    prow.iter_mut().for_each(|p| *p /= sum);
                }
            }
        }

        let drop = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                if rate >= 1.0 {
                    return Err(TensorError::Param {
                        op: "attention",
                        detail: format!("dropout rate must be in [0, 1), got {rate}"),
                    });
                }
                let keep = 1.0 / (1.0 - rate);
                Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };

        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let base = ((b * heads + h) * seq + i) * seq;
                    let orow = &mut out[(b * seq + i) * dim + off..][..dh];
                    for j in 0..seq {
                        let mut p = probs[base + j];
                        if let Some(d) = &drop {
                            p *= d[base + j];
                        }
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vv[(b * seq + j) * dim + off..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }

        let cache = AttentionCache {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            dim,
            probs,
            drop,
        };
        Ok(self.push(out, shape, Op::Attention(Box::new(cache))))
    }
}

pub(crate) fn attention_backward(
    graph: &Graph,
    c: &AttentionCache,
    upstream: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (batch, seq, heads, dim) = (c.batch, c.seq, c.heads, c.dim);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (graph.value(c.q), graph.value(c.k), graph.value(c.v));
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut dp = vec![0.0; seq];

    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let base = ((b * heads + h) * seq + i) * seq;
                let go = &upstream[(b * seq + i) * dim + off..][..dh];
                // d(weights) through the value product, then back through dropout
                for j in 0..seq {
                    let vj = &vv[(b * seq + j) * dim + off..][..dh];
                    let mut g: f64 = go.iter().zip(vj).map(|(a, x)| a * x).sum();
                    let mut p = c.probs[base + j];
                    if let Some(d) = &c.drop {
                        g *= d[base + j];
                        p *= d[base + j];
                    }
                    dp[j] = g;
                    if p != 0.0 {
                        let dvj = &mut dv[(b * seq + j) * dim + off..][..dh];
                        dvj.iter_mut().zip(go).for_each(|(o, a)| *o += p * a);
                    }
                }
                let prow = &c.probs[base..base + seq];
                let dot: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                let qi = &qv[(b * seq + i) * dim + off..][..dh];
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[(b * seq + j) * dim + off..][..dh];
                    let dqi = &mut dq[(b * seq + i) * dim + off..][..dh];
                    dqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                    let dkj = &mut dk[(b * seq + j) * dim + off..][..dh];
                    dkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                }
            }
        }
    }

    for (var, g) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
        graph.accumulate(grads, var, |buf| {
            buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
        });
    }
}
