//! Interaction loading, binarization, and the 7:1:2 split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One raw interaction record, ids kept opaque.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

/// Which split a repaired record was promoted out of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairSource {
    Validation,
    Test,
}

/// A split dataset with dense user/item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Opaque id -> dense index, assigned in first-appearance order.
    pub user_index_map: BTreeMap<String, usize>,
    pub item_index_map: BTreeMap<String, usize>,
    /// (user, item) pairs promoted into train so every user trains.
    pub repairs: Vec<(usize, usize, RepairSource)>,
}

impl IndexedDataset {
    pub fn interaction_count(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn density(&self) -> f64 {
        self.interaction_count() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    /// Train items per user as sorted lists.
    pub fn train_items_by_user(&self) -> Vec<Vec<usize>> {
        let mut by_user = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.train {
            by_user[u].push(i);
        }
        for items in &mut by_user {
            items.sort_unstable();
        }
        by_user
    }

    /// Check the structural invariants; used by tests and after reload.
    pub fn validate(&self) -> Result<()> {
        let all = [&self.train, &self.validation, &self.test];
        let mut seen = HashSet::new();
        let mut users_in_train = vec![false; self.num_users];
        for split in all {
            for &(u, i) in split.iter() {
                if u >= self.num_users || i >= self.num_items {
                    return Err(Error::Config(format!("index out of range: ({u},{i})")));
                }
                if !seen.insert((u, i)) {
                    return Err(Error::Config(format!("pair ({u},{i}) in multiple splits")));
                }
            }
        }
        for &(u, _) in &self.train {
            users_in_train[u] = true;
        }
        for split in [&self.validation, &self.test] {
            for &(u, _) in split.iter() {
                if !users_in_train[u] {
                    return Err(Error::Config(format!("user {u} has no train record")));
                }
            }
        }
        Ok(())
    }
}

/// Parse a delimited interaction file: `user<d>item[<d>rating[<d>timestamp]]`.
///
/// Empty lines are skipped; every other line must have at least two fields.
pub fn load_interactions(path: &Path, delimiter: &str) -> Result<Vec<RawInteraction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, delimiter, path)
}

fn parse_interactions(text: &str, delimiter: &str, path: &Path) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).collect();
        if fields.len() < 2 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected at least 2 fields, got {}", fields.len()),
            });
        }
        let user_id = fields[0].trim().to_string();
        let item_id = fields[1].trim().to_string();
        if user_id.is_empty() || item_id.is_empty() {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty user or item id".into(),
            });
        }
        let rating = match fields.get(2).map(|s| s.trim()) {
            Some(s) if !s.is_empty() => {
                let r: f64 = s.parse().map_err(|_| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("unparseable rating {s:?}"),
                })?;
                if !r.is_finite() {
                    return Err(Error::MalformedLine {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: "non-finite rating".into(),
                    });
                }
                Some(r)
            }
            _ => None,
        };
        let timestamp = match fields.get(3).map(|s| s.trim()) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("unparseable timestamp {s:?}"),
            })?),
            _ => None,
        };
        out.push(RawInteraction {
            user_id,
            item_id,
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Keep records with rating >= threshold; rating-free records are implicit
/// positives and always kept.
pub fn binarize(records: Vec<RawInteraction>, keep_threshold: f64) -> Vec<RawInteraction> {
    records
        .into_iter()
        .filter(|r| r.rating.is_none_or(|v| v >= keep_threshold))
        .collect()
}

/// Drop repeated (user, item) pairs, keeping the first occurrence.
pub fn dedup(records: Vec<RawInteraction>) -> Vec<RawInteraction> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert((r.user_id.clone(), r.item_id.clone())))
        .collect()
}

/// Split deduplicated records into train/validation/test by a global random
/// permutation, then promote one record into train for any user that would
/// otherwise have none.
///
/// Boundaries are the rounded cumulative ratio points, which keeps every
/// split within one record of its exact proportional size.
pub fn split(
    records: &[RawInteraction],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<IndexedDataset> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no interaction records to split".into()));
    }
    let (r1, r2, r3) = ratios;
    if r1 == 0 || r2 == 0 || r3 == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }

    // Dense ids in first-appearance order over the record list.
    let mut user_index_map = BTreeMap::new();
    let mut item_index_map = BTreeMap::new();
    let mut next_user = 0usize;
    let mut next_item = 0usize;
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let u = *user_index_map.entry(r.user_id.clone()).or_insert_with(|| {
            let id = next_user;
            next_user += 1;
            id
        });
        let i = *item_index_map.entry(r.item_id.clone()).or_insert_with(|| {
            let id = next_item;
            next_item += 1;
            id
        });
        pairs.push((u, i));
    }

    let n = pairs.len();
    let total = f64::from(r1 + r2 + r3);
    let c1 = ((n as f64) * f64::from(r1) / total).round() as usize;
    let c2 = ((n as f64) * f64::from(r1 + r2) / total).round() as usize;
    let (c1, c2) = (c1.min(n), c2.min(n).max(c1));

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));

    let mut train: Vec<(usize, usize)> = order[..c1].iter().map(|&k| pairs[k]).collect();
    let mut validation: Vec<(usize, usize)> = order[c1..c2].iter().map(|&k| pairs[k]).collect();
    let mut test: Vec<(usize, usize)> = order[c2..].iter().map(|&k| pairs[k]).collect();

    // Repair: each user appearing anywhere must train on at least one record.
    let mut has_train = vec![false; next_user];
    for &(u, _) in &train {
        has_train[u] = true;
    }
    let mut repairs = Vec::new();
    for user in 0..next_user {
        if has_train[user] {
            continue;
        }
        let promoted = promote_first(&mut validation, user)
            .map(|p| (p, RepairSource::Validation))
            .or_else(|| promote_first(&mut test, user).map(|p| (p, RepairSource::Test)));
        match promoted {
            Some(((u, i), from)) => {
                train.push((u, i));
                has_train[user] = true;
                repairs.push((u, i, from));
            }
            None => {
                return Err(Error::Config(format!(
                    "user index {user} has no records in any split"
                )))
            }
        }
    }

    let dataset = IndexedDataset {
        num_users: next_user,
        num_items: next_item,
        train,
        validation,
        test,
        user_index_map,
        item_index_map,
        repairs,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn promote_first(split: &mut Vec<(usize, usize)>, user: usize) -> Option<(usize, usize)> {
    let pos = split.iter().position(|&(u, _)| u == user)?;
    Some(split.remove(pos))
}

#[derive(Serialize, Deserialize)]
struct IndexMaps {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

const SPLIT_FILES: [&str; 3] = ["train.tsv", "validation.tsv", "test.tsv"];
const MAPS_FILE: &str = "index_maps.json";

/// Persist the split as three delimited files plus a JSON index-map sidecar.
pub fn save_dataset(dataset: &IndexedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let users_by_index = invert(&dataset.user_index_map);
    let items_by_index = invert(&dataset.item_index_map);
    for (name, pairs) in
        SPLIT_FILES
            .iter()
            .zip([&dataset.train, &dataset.validation, &dataset.test])
    {
        let path = dir.join(name);
        let mut buf = String::new();
        for &(u, i) in pairs {
            buf.push_str(users_by_index[u]);
            buf.push('\t');
            buf.push_str(items_by_index[i]);
            buf.push('\n');
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    let maps = IndexMaps {
        users: dataset.user_index_map.clone(),
        items: dataset.item_index_map.clone(),
    };
    let path = dir.join(MAPS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &maps)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reload a dataset persisted by [`save_dataset`], bit-exact.
pub fn load_dataset(dir: &Path) -> Result<IndexedDataset> {
    let maps_path = dir.join(MAPS_FILE);
    let text = fs::read_to_string(&maps_path).map_err(|e| Error::io(&maps_path, e))?;
    let maps: IndexMaps = serde_json::from_str(&text)?;
    let mut splits: Vec<Vec<(usize, usize)>> = Vec::new();
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (user, item) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
                path: path.clone(),
                line: idx + 1,
                reason: "expected user<TAB>item".into(),
            })?;
            let u = *maps.users.get(user).ok_or_else(|| Error::MalformedLine {
                path: path.clone(),
                line: idx + 1,
                reason: format!("unknown user id {user:?}"),
            })?;
            let i = *maps.items.get(item).ok_or_else(|| Error::MalformedLine {
                path: path.clone(),
                line: idx + 1,
                reason: format!("unknown item id {item:?}"),
            })?;
            pairs.push((u, i));
        }
        splits.push(pairs);
    }
    let test = splits.pop().unwrap();
    let validation = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let dataset = IndexedDataset {
        num_users: maps.users.len(),
        num_items: maps.items.len(),
        train,
        validation,
        test,
        user_index_map: maps.users,
        item_index_map: maps.items,
        repairs: Vec::new(),
    };
    dataset.validate()?;
    Ok(dataset)
}

fn invert(map: &BTreeMap<String, usize>) -> Vec<&str> {
    let mut v = vec![""; map.len()];
    for (k, &i) in map {
        v[i] = k.as_str();
    }
    v
}

/// Group split pairs by user; users without pairs get empty vectors.
pub fn pairs_by_user(pairs: &[(usize, usize)], num_users: usize) -> Vec<Vec<usize>> {
    let mut by_user = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        by_user[u].push(i);
    }
    by_user
}
