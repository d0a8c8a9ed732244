use rand::seq::SliceRandom;
use rand::Rng;

use super::SplitDataset;
use crate::error::{EmkdError, Result};

/// Shuffled user batches of `batch_size`; a trailing batch with a single
/// user is folded into the one before it.
pub fn batch_iter<R: Rng + ?Sized>(
    split: &SplitDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    shuffled_batches(split.users.len(), batch_size, rng)
}

pub(crate) fn shuffled_batches<R: Rng + ?Sized>(
    n_users: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(EmkdError::Param(format!("batch size {batch_size} is below 2")));
    }
    if n_users < 2 {
        return Err(EmkdError::Contract(format!(
            "{n_users} users cannot form a batch of at least 2"
        )));
    }
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        batches.last_mut().expect("at least two users").extend(tail);
    }
    Ok(batches)
}
