use std::collections::{BTreeSet, HashMap};

use super::{natural_cmp, Dataset, DatasetStats, Interaction, ItemAttributes};
use crate::error::{EmkdError, Result};

/// Minimum interactions per user and per item.
pub const MIN_DEGREE: usize = 5;

/// Deduplicates (earliest event wins), orders each user's events by time
/// with raw item id breaking ties, applies the 5-core filter until nothing
/// changes, and assigns dense ids in natural raw-id order.
pub fn preprocess(raw: &[Interaction], attributes: &[ItemAttributes]) -> Result<Dataset> {
    if raw.is_empty() {
        return Err(EmkdError::Dataset("no interactions to preprocess".into()));
    }
    let mut earliest: HashMap<&str, HashMap<&str, i64>> = HashMap::new();
    for r in raw {
        let slot = earliest
            .entry(r.user.as_str())
            .or_default()
            .entry(r.item.as_str())
            .or_insert(r.timestamp);
        *slot = (*slot).min(r.timestamp);
    }
    let mut users: Vec<(&str, Vec<(i64, &str)>)> = earliest
        .into_iter()
        .map(|(u, items)| {
            let mut seq: Vec<(i64, &str)> = items.into_iter().map(|(i, t)| (t, i)).collect();
            seq.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| natural_cmp(a.1, b.1)));
            (u, seq)
        })
        .collect();

    loop {
        let mut degree: HashMap<&str, usize> = HashMap::new();
        for (_, seq) in &users {
            for &(_, i) in seq {
                *degree.entry(i).or_default() += 1;
            }
        }
        let mut changed = false;
        for (_, seq) in users.iter_mut() {
            let before = seq.len();
            seq.retain(|&(_, i)| degree[i] >= MIN_DEGREE);
            changed |= seq.len() != before;
        }
        let before = users.len();
        users.retain(|(_, seq)| seq.len() >= MIN_DEGREE);
        changed |= users.len() != before;
        if !changed {
            break;
        }
    }
    if users.is_empty() {
        return Err(EmkdError::Dataset(format!(
            "no users survive {MIN_DEGREE}-core filtering"
        )));
    }

    users.sort_by(|a, b| natural_cmp(a.0, b.0));
    let items: BTreeSet<NaturalKey> = users
        .iter()
        .flat_map(|(_, s)| s.iter().map(|&(_, i)| NaturalKey(i)))
        .collect();
    let item_ids: Vec<String> = items.iter().map(|k| k.0.to_string()).collect();
    let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(d, k)| (k.0, d)).collect();

    let mut raw_attrs: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for a in attributes {
        if item_index.contains_key(a.item.as_str()) {
            raw_attrs
                .entry(a.item.as_str())
                .or_default()
                .extend(a.attributes.iter().map(String::as_str));
        }
    }
    let attr_keys: BTreeSet<NaturalKey> = raw_attrs.values().flatten().map(|a| NaturalKey(a)).collect();
    let attribute_ids: Vec<String> = attr_keys.iter().map(|k| k.0.to_string()).collect();
    let attr_index: HashMap<&str, usize> = attr_keys.iter().enumerate().map(|(d, k)| (k.0, d)).collect();
    let item_attributes: Vec<Vec<usize>> = item_ids
        .iter()
        .map(|i| {
            let mut set: Vec<usize> = raw_attrs
                .get(i.as_str())
                .map(|s| s.iter().map(|a| attr_index[a]).collect())
                .unwrap_or_default();
            set.sort_unstable();
            set
        })
        .collect();

    let sequences: Vec<Vec<usize>> = users
        .iter()
        .map(|(_, s)| s.iter().map(|&(_, i)| item_index[i]).collect())
        .collect();
    let stats = DatasetStats::compute(&sequences, item_ids.len(), &item_attributes, attribute_ids.len());
    Ok(Dataset {
        user_ids: users.iter().map(|(u, _)| u.to_string()).collect(),
        sequences,
        item_ids,
        attribute_ids,
        item_attributes,
        stats,
        source: None,
    })
}

#[derive(PartialEq, Eq)]
struct NaturalKey<'a>(&'a str);

impl PartialOrd for NaturalKey<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NaturalKey<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        natural_cmp(self.0, other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(fixture: &[(&str, &str, i64)]) -> Vec<Interaction> {
        fixture.iter()
            .map(|&(u, i, t)| Interaction {
                user: u.into(),
                item: i.into(),
                timestamp: t,
            })
            .collect()
    }

    /// Five users over five items, everyone sees everything.
    fn dense_block() -> Vec<(String, String, i64)> {
        let mut v = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                v.push((format!("u{u}"), format!("{}", 10 + i), (i * 10 + u) as i64));
            }
        }
        v
    }

    #[test]
    fn user_with_four_interactions_is_removed() {
        let mut fixture = dense_block();
        for i in 0..4 {
            fixture.push(("short".into(), format!("{}", 10 + i), 100));
        }
        let raw: Vec<_> = fixture.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let ds = preprocess(&rows(&raw), &[]).unwrap();
        assert_eq!(ds.n_users(), 5);
        assert!(!ds.user_ids.contains(&"short".to_string()));
        ds.check().unwrap();
    }

    #[test]
    fn duplicates_keep_earliest_and_ties_use_item_order() {
        let mut fixture = dense_block();
        // u0 re-watches item 14 before everything else
        fixture.push(("u0".into(), "14".into(), -5));
        let raw: Vec<_> = fixture.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let ds = preprocess(&rows(&raw), &[]).unwrap();
        assert_eq!(ds.sequences[0], vec![4, 0, 1, 2, 3]);

        let tied: Vec<_> = (0..5)
            .flat_map(|u| {
                ["12", "3", "7", "1", "5"]
                    .into_iter()
                    .map(move |i| (format!("u{u}"), i.to_string(), 0))
            })
            .collect();
        let raw: Vec<_> = tied.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let ds = preprocess(&rows(&raw), &[]).unwrap();
        assert_eq!(ds.item_ids, vec!["1", "3", "5", "7", "12"]);
        assert_eq!(ds.sequences[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_result_is_an_error() {
        let raw = rows(&[("a", "b", 1)]);
        assert!(matches!(preprocess(&raw, &[]), Err(EmkdError::Dataset(_))));
        assert!(matches!(preprocess(&[], &[]), Err(EmkdError::Dataset(_))));
    }

    #[test]
    fn attributes_follow_surviving_items() {
        let fixture = dense_block();
        let raw: Vec<_> = fixture.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
        let attrs = vec![
            ItemAttributes {
                item: "10".into(),
                attributes: vec!["red".into(), "blue".into()],
            },
            ItemAttributes {
                item: "999".into(),
                attributes: vec!["ghost".into()],
            },
        ];
        let ds = preprocess(&rows(&raw), &attrs).unwrap();
        assert_eq!(ds.attribute_ids, vec!["blue", "red"]);
        assert_eq!(ds.item_attributes[0], vec![0, 1]);
        assert!(ds.item_attributes[1].is_empty());
    }
}
