use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{EmkdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    /// Everything before the validation item.
    pub prefix: Vec<usize>,
    /// The most recent `max_len` items of `prefix`, used for training.
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

impl UserSplit {
    /// Items preceding the test target.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.prefix.clone();
        h.push(self.validation);
        h
    }

    pub fn reconstruct(&self) -> Vec<usize> {
        let mut s = self.test_history();
        s.push(self.test);
        s
    }
}

/// Leave-one-out split plus the per-item attribute table the trainer needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub n_items: usize,
    pub n_attributes: usize,
    pub item_attributes: Vec<Vec<usize>>,
    pub max_len: usize,
}

/// Last item for test, second-to-last for validation, the rest for training.
pub fn split_leave_one_out(dataset: &Dataset, max_len: usize) -> Result<SplitDataset> {
    if max_len == 0 {
        return Err(EmkdError::Param("max_len must be positive".into()));
    }
    let users = dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            if seq.len() < 3 {
                return Err(EmkdError::Contract(format!(
                    "user {u} has {} items; leave-one-out needs 3",
                    seq.len()
                )));
            }
            let n = seq.len();
            let prefix = seq[..n - 2].to_vec();
            let train = prefix[prefix.len().saturating_sub(max_len)..].to_vec();
            Ok(UserSplit {
                prefix,
                train,
                validation: seq[n - 2],
                test: seq[n - 1],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitDataset {
        users,
        n_items: dataset.n_items(),
        n_attributes: dataset.n_attributes(),
        item_attributes: dataset.item_attributes.clone(),
        max_len,
    })
}
