//! Batch assembly and the joint forward pass over every network.

use emkd_tape::{Graph, Tensor, Var};
use rand::SeedableRng;

use crate::config::{Ablation, Mode, ModelConfig, Pooling};
use crate::data::SplitDataset;
use crate::encoder::{attr_probs, encode, item_logits, left_pad, EncoderVars, SeqBatch};
use crate::error::{EmkdError, Result};
use crate::losses::{self, ContrastiveOptions, LossReport, LossTerms, Teacher};
use crate::masking::make_views;
use crate::rng::StreamRng;

/// Token sequences and supervision for one batch of users.
///
/// `tokens` stacks `parts` groups of `batch` sequences: the original
/// sequences first, then one group per masked view.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub users: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub parts: usize,
    pub tokens: SeqBatch,
    /// `pad[b·T + t]` for the original sequences; views share the layout.
    pub pad: Vec<bool>,
    /// Prediction blocks: one per view (cloze) or a single next-item block.
    pub pred_rows: Vec<Vec<usize>>,
    pub pred_targets: Vec<Vec<usize>>,
    /// Rows of the original sequences supervised by attribute prediction.
    pub ap_rows: Vec<usize>,
    pub ap_targets: Tensor,
}

impl BatchInputs {
    /// `view_rng(user)` supplies the masking stream for that user.
    pub fn build(
        config: &ModelConfig,
        split: &SplitDataset,
        users: &[usize],
        mut view_rng: impl FnMut(usize) -> StreamRng,
    ) -> Result<Self> {
        let t = config.max_len;
        let (mask, pad) = (config.mask_id(), config.pad_id());
        let b = users.len();
        let mut anchors = Vec::with_capacity(b);
        let mut next_targets = Vec::new();
        let mut next_rows = Vec::new();
        for (bi, &u) in users.iter().enumerate() {
            let us = split
                .users
                .get(u)
                .ok_or_else(|| EmkdError::Contract(format!("user {u} not in split")))?;
            let window = &us.train[us.train.len().saturating_sub(t)..];
            let seq = match config.mode {
                Mode::BidirectionalMlm => left_pad(window, t, pad),
                Mode::AutoregressiveNip => {
                    let input = left_pad(&window[..window.len() - 1], t, pad);
                    let offset = t - (window.len() - 1);
                    for (k, &target) in window[1..].iter().enumerate() {
                        next_rows.push(bi * t + offset + k);
                        next_targets.push(target);
                    }
                    input
                }
            };
            anchors.push(seq);
        }

        let mut view_rows = vec![Vec::new(); config.n_views];
        let mut view_targets = vec![Vec::new(); config.n_views];
        let mut view_seqs = vec![Vec::with_capacity(b); config.n_views];
        for (bi, (&u, seq)) in users.iter().zip(&anchors).enumerate() {
            let mut rng = view_rng(u);
            let views = make_views(seq, config.n_views, config.mask_prop, mask, pad, &mut rng)?;
            for (m, v) in views.into_iter().enumerate() {
                let base = (1 + m) * b * t + bi * t;
                view_rows[m].extend(v.masked_indices.iter().map(|&i| base + i));
                view_targets[m].extend_from_slice(&v.originals);
                view_seqs[m].push(v.ids);
            }
        }

        let pad_flags: Vec<bool> = anchors.iter().flatten().map(|&id| id == pad).collect();
        let ap_rows: Vec<usize> = (0..b * t).filter(|&r| !pad_flags[r]).collect();
        let flat: Vec<usize> = anchors.iter().flatten().copied().collect();
        let sets: Vec<&[usize]> = ap_rows
            .iter()
            .map(|&r| split.item_attributes[flat[r]].as_slice())
            .collect();
        let ap_targets = losses::attribute_targets(&sets, config.attr_size)?;

        let mut all = anchors;
        for vs in view_seqs {
            all.extend(vs);
        }
        let (pred_rows, pred_targets) = match config.mode {
            Mode::BidirectionalMlm => (view_rows, view_targets),
            Mode::AutoregressiveNip => (vec![next_rows], vec![next_targets]),
        };
        Ok(Self {
            users: users.to_vec(),
            batch: b,
            seq_len: t,
            parts: 1 + config.n_views,
            tokens: SeqBatch::new(&all, t)?,
            pad: pad_flags,
            pred_rows,
            pred_targets,
            ap_rows,
            ap_targets,
        })
    }
}

/// Test hooks that restrict or freeze parts of the cross-network terms.
#[derive(Debug, Clone, Default)]
pub struct ForwardHooks {
    pub ccl_pairs: Option<Vec<(usize, usize)>>,
    pub kd_pairs: Option<Vec<(usize, usize)>>,
    /// Teacher logits to use instead of the live (detached) ones, indexed
    /// `[network][block]`.
    pub frozen_teacher: Option<Vec<Vec<Tensor>>>,
}

/// Graph values of one joint forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub total: Var,
    pub report: LossReport,
    pub terms: LossTerms,
    /// `[network][block]` prediction logits.
    pub logits: Vec<Vec<Var>>,
}

fn pooled(
    g: &mut Graph,
    config: &ModelConfig,
    hidden: Var,
    part: usize,
    inputs: &BatchInputs,
) -> Result<Var> {
    let (b, t, d) = (inputs.batch, inputs.seq_len, config.hidden_dim);
    let rows: Vec<usize> = (part * b * t..(part + 1) * b * t).collect();
    let h = g.gather_rows(hidden, &rows)?;
    Ok(match config.pooling {
        Pooling::Flatten => {
            let mut keep = Tensor::zeros(&[b * t, d]);
            for (r, &is_pad) in inputs.pad.iter().enumerate() {
                if !is_pad {
                    keep.row_mut(r).fill(1.0);
                }
            }
            let keep = g.constant(&keep);
            let h = g.mul(h, keep)?;
            g.reshape(h, &[b, t * d])?
        }
        Pooling::Mean => {
            let mut avg = Tensor::zeros(&[b, b * t]);
            for bi in 0..b {
                let span = &inputs.pad[bi * t..(bi + 1) * t];
                let n = span.iter().filter(|p| !**p).count().max(1) as f64;
                for (k, &is_pad) in span.iter().enumerate() {
                    if !is_pad {
                        avg.row_mut(bi)[bi * t + k] = 1.0 / n;
                    }
                }
            }
            let avg = g.constant(&avg);
            g.matmul(avg, h)?
        }
    })
}

/// Encodes the batch with every network and assembles the active terms.
/// `dropout_seeds[n]` enables dropout for network `n`.
pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    ablation: &Ablation,
    nets: &[EncoderVars],
    inputs: &BatchInputs,
    dropout_seeds: Option<&[u64]>,
    hooks: &ForwardHooks,
) -> Result<Forward> {
    let n_nets = nets.len();
    let use_ap = ablation.ap() && config.attr_size > 0;
    let contrastive = ablation.icl() || (ablation.ccl() && n_nets > 1);

    let mut logits = Vec::with_capacity(n_nets);
    let mut probs = Vec::new();
    let mut anchors = Vec::new();
    let mut views = Vec::new();
    for (n, vars) in nets.iter().enumerate() {
        let mut rng = dropout_seeds.map(|s| StreamRng::seed_from_u64(s[n]));
        let hidden = encode(g, config, vars, &inputs.tokens, rng.as_mut())?;
        let mut per_block = Vec::with_capacity(inputs.pred_rows.len());
        for rows in &inputs.pred_rows {
            let h = g.gather_rows(hidden, rows)?;
            per_block.push(item_logits(g, vars, h)?);
        }
        logits.push(per_block);
        if use_ap {
            let h = g.gather_rows(hidden, &inputs.ap_rows)?;
            probs.push(attr_probs(g, vars, h)?);
        }
        if contrastive {
            anchors.push(pooled(g, config, hidden, 0, inputs)?);
            views.push(
                (1..inputs.parts)
                    .map(|p| pooled(g, config, hidden, p, inputs))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }

    let b = inputs.batch;
    let opts = ContrastiveOptions {
        tau: config.tau,
        include_positive: config.include_positive_in_denominator,
    };
    let mip = losses::mip_loss(g, &logits, &inputs.pred_targets, b)?;
    let ap = if use_ap {
        Some(losses::ap_loss(g, &probs, &inputs.ap_targets, b)?)
    } else {
        None
    };
    let icl = if ablation.icl() {
        Some(losses::icl_loss(g, &anchors, &views, opts)?)
    } else {
        None
    };
    let ccl = if ablation.ccl() && n_nets > 1 {
        Some(losses::ccl_loss(g, &anchors, &views, opts, hooks.ccl_pairs.as_deref())?)
    } else {
        None
    };
    let kd = if ablation.kd() && n_nets > 1 {
        let teacher = match &hooks.frozen_teacher {
            Some(t) => Teacher::Frozen(t),
            None => Teacher::Live,
        };
        Some(losses::kd_loss(g, &logits, config.tau, b, hooks.kd_pairs.as_deref(), teacher)?)
    } else {
        None
    };
    let terms = LossTerms { mip, ap, icl, ccl, kd };
    let (total, report) = losses::total_loss(g, &terms, config.lambda, config.mu)?;
    Ok(Forward {
        total,
        report,
        terms,
        logits,
    })
}
