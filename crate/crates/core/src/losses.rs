//! Training objectives over graph values. Every term is reduced as a sum
//! over its support per user, then averaged over the users of the batch.

use emkd_tape::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{EmkdError, Result};

/// Floor applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy of the true items at masked positions.
///
/// `logits[n][m]` is `[P_m × |V|]` for network `n`, view `m`; rows align with
/// `targets[m]`.
pub fn mip_loss(
    g: &mut Graph,
    logits: &[Vec<Var>],
    targets: &[Vec<usize>],
    batch: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    for per_view in logits {
        if per_view.len() != targets.len() {
            return Err(EmkdError::Contract(format!(
                "{} logit blocks for {} target lists",
                per_view.len(),
                targets.len()
            )));
        }
        for (&z, t) in per_view.iter().zip(targets) {
            if t.is_empty() {
                return Err(EmkdError::Contract("no masked positions".into()));
            }
            let v = g.shape(z)[1];
            if let Some(&bad) = t.iter().find(|&&id| id >= v) {
                return Err(EmkdError::Vocabulary(format!(
                    "target item {bad} outside vocabulary of {v}"
                )));
            }
            let lp = g.log_softmax_with_temperature(z, 1.0)?;
            let picked = g.pick(lp, t)?;
            terms.push(g.sum(picked));
        }
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, -1.0 / batch as f64))
}

/// Multi-hot target matrix `[P × |A|]` from per-position attribute sets.
pub fn attribute_targets(sets: &[&[usize]], attr_size: usize) -> Result<Tensor> {
    let cols = attr_size.max(1);
    let mut t = Tensor::zeros(&[sets.len().max(1), cols]);
    for (r, set) in sets.iter().enumerate() {
        for &a in *set {
            if a >= attr_size {
                return Err(EmkdError::Vocabulary(format!(
                    "attribute {a} outside vocabulary of {attr_size}"
                )));
            }
            t.row_mut(r)[a] = 1.0;
        }
    }
    Ok(t)
}

/// Binary cross-entropy of attribute probabilities (`[P × |A|]` per
/// network) against a shared multi-hot target.
pub fn ap_loss(g: &mut Graph, probs: &[Var], targets: &Tensor, batch: usize) -> Result<Var> {
    let mut terms = Vec::new();
    let y = g.constant(targets);
    let mut not_y = targets.clone();
    not_y.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    let not_y = g.constant(&not_y);
    for &p in probs {
        let lp = g.log_clamped(p, PROB_FLOOR);
        let q = g.affine(p, -1.0, 1.0);
        let lq = g.log_clamped(q, PROB_FLOOR);
        let a = g.mul(y, lp)?;
        let b = g.mul(not_y, lq)?;
        let s = g.add(a, b)?;
        terms.push(g.sum(s));
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, -1.0 / batch as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveOptions {
    pub tau: f64,
    /// Adds the positive pair to the normalizer (standard InfoNCE).
    pub include_positive: bool,
}

impl ContrastiveOptions {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            include_positive: false,
        }
    }
}

/// Mean over users of `-Σ_m log(exp(g(a_u, view^m_u)/τ) / Σ_{k≠u} exp(g(a_u, neg_k)/τ))`.
/// `anchors` and `negatives` are `[B × F]`, each view is `[B × F]`.
pub fn contrast(
    g: &mut Graph,
    anchors: Var,
    negatives: Var,
    views: &[Var],
    opts: ContrastiveOptions,
) -> Result<Var> {
    let b = g.shape(anchors)[0];
    if b < 2 {
        return Err(EmkdError::Contract(format!(
            "contrastive loss needs at least 2 users per batch, got {b}"
        )));
    }
    if views.is_empty() {
        return Err(EmkdError::Contract("contrastive loss needs a view".into()));
    }
    let inv_tau = 1.0 / opts.tau;
    let sims = g.cosine_matrix(anchors, negatives)?;
    let sims = g.scale(sims, inv_tau);
    let mut diag = Tensor::zeros(&[b, b]);
    for i in 0..b {
        diag.row_mut(i)[i] = emkd_tape::MASK_VALUE;
    }
    let diag = g.constant(&diag);
    let neg = g.add(sims, diag)?;
    let lse_neg = g.logsumexp(neg);

    let mut per_user = Vec::with_capacity(views.len());
    for &view in views {
        let pos = g.cosine_rows(anchors, view)?;
        let pos = g.scale(pos, inv_tau);
        let denom = if opts.include_positive {
            // append the positive as an extra column, then reduce each row
            let cols = g.transpose(neg)?;
            let pos_row = g.reshape(pos, &[1, b])?;
            let stacked = g.concat_rows(&[cols, pos_row])?;
            let rows = g.transpose(stacked)?;
            g.logsumexp(rows)
        } else {
            lse_neg
        };
        per_user.push(g.sub(denom, pos)?);
    }
    let total = sum_all(g, &per_user)?;
    let s = g.sum(total);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Intra-network term: anchors, positives and negatives from one network,
/// summed over networks. `views[n]` lists network `n`'s view representations.
pub fn icl_loss(
    g: &mut Graph,
    anchors: &[Var],
    views: &[Vec<Var>],
    opts: ContrastiveOptions,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (n, &a) in anchors.iter().enumerate() {
        terms.push(contrast(g, a, a, &views[n], opts)?);
    }
    sum_all(g, &terms)
}

/// All ordered pairs `(x, y)` with `x ≠ y`.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|x| (0..n).filter(move |&y| y != x).map(move |y| (x, y)))
        .collect()
}

/// Cross-network term over ordered pairs: anchor from `x`, positives and
/// negatives from `y`. `pairs` defaults to every ordered pair.
pub fn ccl_loss(
    g: &mut Graph,
    anchors: &[Var],
    views: &[Vec<Var>],
    opts: ContrastiveOptions,
    pairs: Option<&[(usize, usize)]>,
) -> Result<Var> {
    if anchors.len() < 2 {
        log::info!("cross-network contrast skipped: fewer than two networks");
        return Ok(g.scalar(0.0));
    }
    let all = ordered_pairs(anchors.len());
    let mut terms = Vec::new();
    for &(x, y) in pairs.unwrap_or(&all) {
        terms.push(contrast(g, anchors[x], anchors[y], &views[y], opts)?);
    }
    sum_all(g, &terms)
}

/// Teacher side of a distillation pair: either the live logits of network
/// `x` (gradient-stopped here) or frozen values supplied by the caller.
pub enum Teacher<'a> {
    Live,
    Frozen(&'a [Vec<Tensor>]),
}

/// `Σ_(x,y) Σ_m Σ_t KL(softmax(z^x/τ) ‖ softmax(z^y/τ))` at masked positions,
/// averaged over users; the teacher `x` never receives gradient.
pub fn kd_loss(
    g: &mut Graph,
    logits: &[Vec<Var>],
    tau: f64,
    batch: usize,
    pairs: Option<&[(usize, usize)]>,
    teacher: Teacher<'_>,
) -> Result<Var> {
    if logits.len() < 2 {
        log::info!("distillation skipped: fewer than two networks");
        return Ok(g.scalar(0.0));
    }
    let all = ordered_pairs(logits.len());
    let mut terms = Vec::new();
    for &(x, y) in pairs.unwrap_or(&all) {
        for (m, &student) in logits[y].iter().enumerate() {
            let t = match &teacher {
                Teacher::Live => g.detach(logits[x][m]),
                Teacher::Frozen(v) => g.constant(&v[x][m]),
            };
            terms.push(kl_divergence(g, t, student, tau)?);
        }
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Summed row-wise `KL(softmax(t/τ) ‖ softmax(s/τ))`; gradient flows to `s` only
/// if `t` is a constant.
pub fn kl_divergence(g: &mut Graph, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let pt = g.softmax_with_temperature(teacher, tau)?;
    let lt = g.log_softmax_with_temperature(teacher, tau)?;
    let ls = g.log_softmax_with_temperature(student, tau)?;
    let diff = g.sub(lt, ls)?;
    let w = g.mul(pt, diff)?;
    Ok(g.sum(w))
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut iter = terms.iter();
    let first = *iter
        .next()
        .ok_or_else(|| EmkdError::Contract("nothing to sum".into()))?;
    iter.try_fold(first, |acc, &t| Ok(g.add(acc, t)?))
}

/// Scalar values of each objective term and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mip: f64,
    pub ap: f64,
    pub icl: f64,
    pub ccl: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossReport {
    /// `mip + ap + λ(icl + ccl) + μ·kd`.
    pub fn combine(mip: f64, ap: f64, icl: f64, ccl: f64, kd: f64, lambda: f64, mu: f64) -> Self {
        Self {
            mip,
            ap,
            icl,
            ccl,
            kd,
            total: mip + ap + lambda * (icl + ccl) + mu * kd,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mip, self.ap, self.icl, self.ccl, self.kd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Field-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.mip += r.mip;
            out.ap += r.ap;
            out.icl += r.icl;
            out.ccl += r.ccl;
            out.kd += r.kd;
            out.total += r.total;
        }
        out.mip /= n;
        out.ap /= n;
        out.icl /= n;
        out.ccl /= n;
        out.kd /= n;
        out.total /= n;
        out
    }
}

/// The active loss terms of one batch; absent terms are ablated.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mip: Var,
    pub ap: Option<Var>,
    pub icl: Option<Var>,
    pub ccl: Option<Var>,
    pub kd: Option<Var>,
}

/// Weighted objective as a graph value plus its scalar breakdown.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, lambda: f64, mu: f64) -> Result<(Var, LossReport)> {
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.item(v));
    let mut total = terms.mip;
    if let Some(ap) = terms.ap {
        total = g.add(total, ap)?;
    }
    let contrastive: Vec<Var> = [terms.icl, terms.ccl].into_iter().flatten().collect();
    if !contrastive.is_empty() {
        let c = sum_all(g, &contrastive)?;
        let c = g.scale(c, lambda);
        total = g.add(total, c)?;
    }
    if let Some(kd) = terms.kd {
        let k = g.scale(kd, mu);
        total = g.add(total, k)?;
    }
    let mut report = LossReport::combine(
        g.item(terms.mip),
        value(g, terms.ap),
        value(g, terms.icl),
        value(g, terms.ccl),
        value(g, terms.kd),
        lambda,
        mu,
    );
    report.total = g.item(total);
    Ok((total, report))
}
