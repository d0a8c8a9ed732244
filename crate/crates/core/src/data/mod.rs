//! Datasets: ingestion, filtering, splitting, synthetic corpora, batching.

mod batch;
mod ingest;
mod preprocess;
mod split;
mod synth;

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EmkdError, Result};

pub use batch::batch_iter;
pub use ingest::{
    ingest_attributes, ingest_ml1m, ingest_ml1m_movies, ingest_tsv, parse_attributes, parse_ml1m,
    parse_ml1m_movies, parse_tsv, Interaction, ItemAttributes,
};
pub use preprocess::{preprocess, MIN_DEGREE};
pub use split::{split_leave_one_out, SplitDataset, UserSplit};
pub use synth::{synth_corpus, synth_generate, SynthConfig, SynthCorpus};

/// Filtered, densely indexed interaction data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Raw id of each dense user.
    pub user_ids: Vec<String>,
    /// Dense item ids in time order, one list per dense user.
    pub sequences: Vec<Vec<usize>>,
    /// Raw id of each dense item.
    pub item_ids: Vec<String>,
    /// Raw id of each dense attribute.
    pub attribute_ids: Vec<String>,
    /// Sorted dense attribute ids of each dense item.
    pub item_attributes: Vec<Vec<usize>>,
    pub stats: DatasetStats,
    /// Input format the data came from (`tsv`, `ml1m`, `synth`), if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub attributes: usize,
    pub avg_actions_per_user: f64,
    pub avg_actions_per_item: f64,
    pub sparsity: f64,
    pub avg_attributes_per_item: f64,
}

impl DatasetStats {
    pub fn compute(sequences: &[Vec<usize>], n_items: usize, item_attributes: &[Vec<usize>], n_attrs: usize) -> Self {
        let users = sequences.len();
        let actions: usize = sequences.iter().map(Vec::len).sum();
        let attr_links: usize = item_attributes.iter().map(Vec::len).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            users,
            items: n_items,
            actions,
            attributes: n_attrs,
            avg_actions_per_user: ratio(actions, users),
            avg_actions_per_item: ratio(actions, n_items),
            sparsity: 1.0 - ratio(actions, users * n_items),
            avg_attributes_per_item: ratio(attr_links, n_items),
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22}{:>12}", "#users", self.users)?;
        writeln!(f, "{:<22}{:>12}", "#items", self.items)?;
        writeln!(f, "{:<22}{:>12}", "#actions", self.actions)?;
        writeln!(f, "{:<22}{:>12.1}", "avg. actions / user", self.avg_actions_per_user)?;
        writeln!(f, "{:<22}{:>12.1}", "avg. actions / item", self.avg_actions_per_item)?;
        writeln!(f, "{:<22}{:>11.2}%", "sparsity", 100.0 * self.sparsity)?;
        writeln!(f, "{:<22}{:>12}", "#attributes", self.attributes)?;
        write!(f, "{:<22}{:>12.1}", "avg. attributes / item", self.avg_attributes_per_item)
    }
}

/// Sort key for raw identifiers: numeric ids first in numeric order, then
/// everything else lexicographically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u128>(), b.parse::<u128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

const CACHE_FORMAT: &str = "emkd-dataset";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: String,
    version: u32,
    dataset: Dataset,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attribute_ids.len()
    }

    /// Rebuilds raw interactions (timestamps are positions) so the data can
    /// be fed back through [`preprocess`].
    pub fn to_interactions(&self) -> (Vec<Interaction>, Vec<ItemAttributes>) {
        let rows = self
            .sequences
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| {
                seq.iter().enumerate().map(move |(t, &i)| Interaction {
                    user: self.user_ids[u].clone(),
                    item: self.item_ids[i].clone(),
                    timestamp: t as i64,
                })
            })
            .collect();
        let attrs = self
            .item_attributes
            .iter()
            .enumerate()
            .map(|(i, set)| ItemAttributes {
                item: self.item_ids[i].clone(),
                attributes: set.iter().map(|&a| self.attribute_ids[a].clone()).collect(),
            })
            .collect();
        (rows, attrs)
    }

    /// Canonical serialized form inside the versioned envelope.
    pub fn to_cache_bytes(&self) -> Result<Vec<u8>> {
        let file = CacheFile {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            dataset: self.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let file: CacheFile = serde_json::from_slice(bytes)?;
        if file.format != CACHE_FORMAT {
            return Err(EmkdError::Dataset(format!("not a dataset cache: {:?}", file.format)));
        }
        if file.version != CACHE_VERSION {
            return Err(EmkdError::Dataset(format!(
                "cache version {} is not supported (expected {CACHE_VERSION})",
                file.version
            )));
        }
        file.dataset.check()?;
        Ok(file.dataset)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cache_bytes()?).map_err(|e| EmkdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EmkdError::io(path, e))?;
        Self::from_cache_bytes(&bytes)
    }

    /// SHA-256 of the canonical cache bytes, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_cache_bytes()?)))
    }

    /// Structural invariants: id ranges, core thresholds, no repeats.
    pub fn check(&self) -> Result<()> {
        let (nu, ni, na) = (self.n_users(), self.n_items(), self.n_attributes());
        let bad = |m: String| Err(EmkdError::Dataset(m));
        if self.user_ids.len() != nu || self.item_attributes.len() != ni {
            return bad("index tables disagree with sequence/item counts".into());
        }
        let mut degree = vec![0usize; ni];
        for (u, seq) in self.sequences.iter().enumerate() {
            if seq.len() < MIN_DEGREE {
                return bad(format!("user {u} has {} interactions", seq.len()));
            }
            let mut seen = std::collections::HashSet::new();
            for &i in seq {
                if i >= ni {
                    return bad(format!("user {u} references item {i} of {ni}"));
                }
                if !seen.insert(i) {
                    return bad(format!("user {u} repeats item {i}"));
                }
                degree[i] += 1;
            }
        }
        if let Some(i) = degree.iter().position(|&d| d < MIN_DEGREE) {
            return bad(format!("item {i} has {} users", degree[i]));
        }
        for (i, set) in self.item_attributes.iter().enumerate() {
            if set.iter().any(|&a| a >= na) {
                return bad(format!("item {i} has an attribute outside 0..{na}"));
            }
        }
        if self.stats != DatasetStats::compute(&self.sequences, ni, &self.item_attributes, na) {
            return bad("stats block does not match the data".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn natural_order_is_numeric_then_lexicographic() {
        let mut ids = vec!["10", "9", "b", "2", "a10", "1a"];
        ids.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(ids, vec!["2", "9", "10", "1a", "a10", "b"]);
    }
}
