//! Transformer sequence encoder, its embedding layer and the two
//! classifier heads, plus the ensemble constructor.

use std::collections::HashSet;

use emkd_tape::{AttentionMask, Graph, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::config::{Activation, Mode, ModelConfig, NormPlacement};
use crate::error::{EmkdError, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2",
    "b2", "ln2_gain", "ln2_bias",
];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }
}

/// Learnable state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `(|V| + 2) × d`; row `|V|` is `[mask]`, row `|V| + 1` is `[pad]`.
    pub item_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub item_w: Tensor,
    pub item_b: Tensor,
    pub attr_w: Tensor,
    pub attr_b: Tensor,
}

fn truncated_normal(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        };
    }
    t
}

impl EncoderParams {
    /// Fresh weights drawn from a stream keyed by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        let (v, a, t, d, f) = (
            config.vocab_size,
            config.attr_columns(),
            config.max_len,
            config.hidden_dim,
            config.ffn_width(),
        );
        let std = config.init_std;
        let mut w = |shape: &[usize]| truncated_normal(shape, std, &mut rng);
        let item_emb = w(&[v + 2, d]);
        let pos_emb = w(&[t, d]);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                wq: w(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: w(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: w(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: w(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w1: w(&[d, f]),
                b1: Tensor::zeros(&[f]),
                w2: w(&[f, d]),
                b2: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            item_emb,
            pos_emb,
            blocks,
            item_w: w(&[d, v]),
            item_b: Tensor::zeros(&[v]),
            attr_w: w(&[d, a]),
            attr_b: Tensor::zeros(&[a]),
        })
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.item_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.item_w, &self.item_b, &self.attr_w, &self.attr_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.item_w,
            &mut self.item_b,
            &mut self.attr_w,
            &mut self.attr_b,
        ]);
        out
    }

    /// Names aligned with [`EncoderParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["item_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_FIELDS.iter().map(|f| format!("block{i}.{f}")));
        }
        out.extend(["item_w", "item_b", "attr_w", "attr_b"].map(String::from));
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a graph leaf. Trainable leaves collect
    /// gradients, frozen ones do not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        EncoderVars::from_flat(vars, self.blocks.len())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Graph handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub item_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub item_w: Var,
    pub item_b: Var,
    pub attr_w: Var,
    pub attr_b: Var,
    flat: Vec<Var>,
}

impl EncoderVars {
    /// Rebuilds the structure from handles in canonical tensor order.
    pub fn from_flat(flat: Vec<Var>, blocks: usize) -> Self {
        assert_eq!(flat.len(), 2 + 16 * blocks + 4, "parameter count mismatch");
        let b = (0..blocks)
            .map(|i| {
                let s = &flat[2 + 16 * i..2 + 16 * (i + 1)];
                BlockVars {
                    wq: s[0],
                    bq: s[1],
                    wk: s[2],
                    bk: s[3],
                    wv: s[4],
                    bv: s[5],
                    wo: s[6],
                    bo: s[7],
                    ln1_gain: s[8],
                    ln1_bias: s[9],
                    w1: s[10],
                    b1: s[11],
                    w2: s[12],
                    b2: s[13],
                    ln2_gain: s[14],
                    ln2_bias: s[15],
                }
            })
            .collect();
        let tail = &flat[2 + 16 * blocks..];
        Self {
            item_emb: flat[0],
            pos_emb: flat[1],
            blocks: b,
            item_w: tail[0],
            item_b: tail[1],
            attr_w: tail[2],
            attr_b: tail[3],
            flat: flat.clone(),
        }
    }

    /// Handles in canonical tensor order.
    pub fn all(&self) -> &[Var] {
        &self.flat
    }
}

/// A batch of equal-length, left-padded id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl SeqBatch {
    pub fn new(rows: &[Vec<usize>], seq_len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != seq_len {
                return Err(EmkdError::Contract(format!(
                    "sequence {i} has length {}, expected {seq_len}",
                    r.len()
                )));
            }
            ids.extend_from_slice(r);
        }
        if rows.is_empty() {
            return Err(EmkdError::Contract("empty batch".into()));
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            seq_len,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut StreamRng>) -> Result<Var> {
    Ok(match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r)?,
        _ => x,
    })
}

/// `E[t] = item_emb[id_t] + pos_emb[t]` for every sequence in the batch,
/// stacked to `[B·T × d]`.
pub fn embed(g: &mut Graph, config: &ModelConfig, vars: &EncoderVars, batch: &SeqBatch) -> Result<Var> {
    let limit = config.vocab_size + 2;
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= limit) {
        return Err(EmkdError::Vocabulary(format!(
            "token id {bad} outside the {limit}-row embedding table"
        )));
    }
    if batch.seq_len != config.max_len {
        return Err(EmkdError::Contract(format!(
            "sequence length {} differs from max_len {}",
            batch.seq_len, config.max_len
        )));
    }
    let items = g.gather_rows(vars.item_emb, &batch.ids)?;
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
    let pos = g.gather_rows(vars.pos_emb, &positions)?;
    Ok(g.add(items, pos)?)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Runs the Transformer stack; returns hidden states `[B·T × d]`.
/// Dropout is active only when `rng` is given.
pub fn encode(
    g: &mut Graph,
    config: &ModelConfig,
    vars: &EncoderVars,
    batch: &SeqBatch,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let rate = config.dropout_rate;
    let pad = config.pad_id();
    let e = embed(g, config, vars, batch)?;
    let mut x = dropout(g, e, rate, rng.as_deref_mut())?;
    let key_padding = batch.ids.iter().map(|&id| id == pad).collect();
    let causal = config.mode == Mode::AutoregressiveNip;
    let mask = AttentionMask::new(batch.batch, batch.seq_len, key_padding, causal)?;
    let eps = config.layer_norm_eps;

    for blk in &vars.blocks {
        let h = match config.norm {
            NormPlacement::Post => x,
            NormPlacement::Pre => g.layer_norm(x, blk.ln1_gain, blk.ln1_bias, eps)?,
        };
        let q = linear(g, h, blk.wq, blk.bq)?;
        let k = linear(g, h, blk.wk, blk.bk)?;
        let v = linear(g, h, blk.wv, blk.bv)?;
        let attn_drop = match rng.as_deref_mut() {
            Some(r) if rate > 0.0 => Some((rate, r as &mut dyn rand::RngCore)),
            _ => None,
        };
        let a = g.attention(q, k, v, config.heads, &mask, attn_drop)?;
        let o = linear(g, a, blk.wo, blk.bo)?;
        let o = dropout(g, o, rate, rng.as_deref_mut())?;
        let r = g.add(x, o)?;
        x = match config.norm {
            NormPlacement::Post => g.layer_norm(r, blk.ln1_gain, blk.ln1_bias, eps)?,
            NormPlacement::Pre => r,
        };

        let h = match config.norm {
            NormPlacement::Post => x,
            NormPlacement::Pre => g.layer_norm(x, blk.ln2_gain, blk.ln2_bias, eps)?,
        };
        let f = linear(g, h, blk.w1, blk.b1)?;
        let f = match config.activation {
            Activation::Gelu => g.gelu(f),
            Activation::Relu => g.relu(f),
        };
        let f = linear(g, f, blk.w2, blk.b2)?;
        let f = dropout(g, f, rate, rng.as_deref_mut())?;
        let r = g.add(x, f)?;
        x = match config.norm {
            NormPlacement::Post => g.layer_norm(r, blk.ln2_gain, blk.ln2_bias, eps)?,
            NormPlacement::Pre => r,
        };
    }
    Ok(x)
}

/// `h · W + b` for each row of `hidden` (`[P × d]` to `[P × |V|]`).
pub fn item_logits(g: &mut Graph, vars: &EncoderVars, hidden: Var) -> Result<Var> {
    linear(g, hidden, vars.item_w, vars.item_b)
}

/// `σ(h · W′ + b′)` for each row of `hidden`.
pub fn attr_probs(g: &mut Graph, vars: &EncoderVars, hidden: Var) -> Result<Var> {
    let z = linear(g, hidden, vars.attr_w, vars.attr_b)?;
    Ok(g.sigmoid(z))
}

/// N independently initialized networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub networks: Vec<EncoderParams>,
    pub seeds: Vec<u64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.networks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.networks.is_empty()
    }
}

pub fn init_ensemble(config: &ModelConfig, seeds: &[u64]) -> Result<Ensemble> {
    config.validate()?;
    if seeds.len() != config.n_networks {
        return Err(EmkdError::Param(format!(
            "{} seeds given for {} networks",
            seeds.len(),
            config.n_networks
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(EmkdError::Param(format!("duplicate network seed {dup}")));
    }
    let networks = seeds
        .iter()
        .map(|&s| EncoderParams::init(config, s))
        .collect::<Result<_>>()?;
    Ok(Ensemble {
        networks,
        seeds: seeds.to_vec(),
    })
}

/// Left-pads `items` to `len` with `pad`, keeping the most recent items.
pub fn left_pad(items: &[usize], len: usize, pad: usize) -> Vec<usize> {
    let tail = &items[items.len().saturating_sub(len)..];
    let mut out = vec![pad; len - tail.len()];
    out.extend_from_slice(tail);
    out
}
