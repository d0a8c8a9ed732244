//! Random item masking for the cloze objective.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::error::{EmkdError, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedView {
    /// 1-based view number.
    pub view_index: usize,
    pub ids: Vec<usize>,
    /// Sorted masked positions.
    pub masked_indices: Vec<usize>,
    /// Original ids at `masked_indices`.
    pub originals: Vec<usize>,
}

/// Number of positions to mask among `n_items` real items: `⌈ρ·n⌉`, at least one.
pub fn mask_count(n_items: usize, rho: f64) -> usize {
    // the epsilon keeps 0.15 · 20 = 3.0000000000000004 from rounding up to 4
    let l = (rho * n_items as f64 - 1e-9).ceil() as usize;
    l.clamp(1, n_items.max(1))
}

/// Replaces `⌈ρ·n⌉` distinct non-pad positions of `seq` with `mask_id`.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &[usize],
    rho: f64,
    mask_id: usize,
    pad_id: usize,
    rng: &mut R,
) -> Result<MaskedView> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] != pad_id).collect();
    if candidates.is_empty() {
        return Err(EmkdError::Contract("cannot mask a sequence with no items".into()));
    }
    let l = mask_count(candidates.len(), rho);
    let mut masked_indices: Vec<usize> = sample(rng, candidates.len(), l)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    masked_indices.sort_unstable();
    let mut ids = seq.to_vec();
    let originals = masked_indices
        .iter()
        .map(|&i| std::mem::replace(&mut ids[i], mask_id))
        .collect();
    Ok(MaskedView {
        view_index: 1,
        ids,
        masked_indices,
        originals,
    })
}

/// `m` views, each drawn from its own substream split off `rng`.
pub fn make_views<R: Rng + ?Sized>(
    seq: &[usize],
    m: usize,
    rho: f64,
    mask_id: usize,
    pad_id: usize,
    rng: &mut R,
) -> Result<Vec<MaskedView>> {
    if m == 0 {
        return Err(EmkdError::Contract("at least one view is required".into()));
    }
    (0..m)
        .map(|i| {
            let mut sub = StreamRng::seed_from_u64(rng.next_u64());
            let mut v = mask_sequence(seq, rho, mask_id, pad_id, &mut sub)?;
            v.view_index = i + 1;
            Ok(v)
        })
        .collect()
}

impl MaskedView {
    /// Puts the original ids back.
    pub fn restore(&self) -> Vec<usize> {
        let mut out = self.ids.clone();
        for (&i, &orig) in self.masked_indices.iter().zip(&self.originals) {
            out[i] = orig;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MASK: usize = 100;
    const PAD: usize = 101;

    #[test]
    fn mask_count_uses_item_count() {
        assert_eq!(mask_count(10, 0.15), 2);
        assert_eq!(mask_count(1, 0.15), 1);
        assert_eq!(mask_count(20, 0.15), 3);
        assert_eq!(mask_count(21, 0.15), 4);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut rng = StreamRng::seed_from_u64(0);
        assert!(mask_sequence(&[PAD, PAD], 0.15, MASK, PAD, &mut rng).is_err());
    }

    #[test]
    fn single_item_is_masked() {
        let mut rng = StreamRng::seed_from_u64(0);
        let v = mask_sequence(&[PAD, PAD, 7], 0.15, MASK, PAD, &mut rng).unwrap();
        assert_eq!(v.masked_indices, vec![2]);
        assert_eq!(v.originals, vec![7]);
        assert_eq!(v.ids, vec![PAD, PAD, MASK]);
    }
}
