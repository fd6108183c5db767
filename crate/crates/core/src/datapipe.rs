//! Interaction ingestion, k-core filtering, splitting and persistence.
//!
//! Input format: UTF-8 TSV, one interaction per line,
//! `user<TAB>item[<TAB>timestamp]`; lines starting with `#` are ignored.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

mod checkpoint;
pub use checkpoint::{load_checkpoint, save_checkpoint};

/// One raw interaction event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: Option<i64>,
}

/// Deduplicated raw (user, item) events in ingestion order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionTable {
    pub rows: Vec<Interaction>,
}

impl InteractionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Builds a table from (user, item) pairs, collapsing duplicates.
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut table = InteractionTable::default();
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        for (u, i) in pairs {
            table.push_dedup(u.into(), i.into(), None, &mut seen);
        }
        table
    }

    fn push_dedup(
        &mut self,
        user: String,
        item: String,
        timestamp: Option<i64>,
        seen: &mut HashMap<(String, String), usize>,
    ) {
        let key = (user.clone(), item.clone());
        match seen.get(&key) {
            Some(&idx) => {
                // Duplicate pair: keep the first occurrence, earliest timestamp.
                let row = &mut self.rows[idx];
                row.timestamp = match (row.timestamp, timestamp) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
            None => {
                seen.insert(key, self.rows.len());
                self.rows.push(Interaction {
                    user,
                    item,
                    timestamp,
                });
            }
        }
    }

    pub fn distinct_users(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.rows.iter().filter(|r| seen.insert(&r.user)).count()
    }

    pub fn distinct_items(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        self.rows.iter().filter(|r| seen.insert(&r.item)).count()
    }
}

/// Reads a TSV interaction log, collapsing duplicate (user, item) pairs.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionTable> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut table = InteractionTable::default();
    let mut seen = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let user = fields.next().filter(|s| !s.is_empty());
        let item = fields.next().filter(|s| !s.is_empty());
        let (user, item) = match (user, item) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(Error::MalformedLine {
                    line: lineno,
                    reason: "expected at least 2 tab-separated fields".into(),
                })
            }
        };
        let timestamp = match fields.next() {
            Some(ts) if !ts.is_empty() => {
                Some(ts.parse::<i64>().map_err(|e| Error::MalformedLine {
                    line: lineno,
                    reason: format!("bad timestamp {ts:?}: {e}"),
                })?)
            }
            _ => None,
        };
        table.push_dedup(user.to_owned(), item.to_owned(), timestamp, &mut seen);
    }

    if table.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(table)
}

/// Iterative k-core peeling to a fixed point.
///
/// Repeatedly removes users and items whose degree drops below `k` until all
/// remaining nodes have degree ≥ k. Returns the maximal such subtable, rows
/// in original order.
pub fn k_core_filter(table: &InteractionTable, k: u32) -> Result<InteractionTable> {
    if k == 0 {
        return Err(Error::InvalidConfig("k-core requires k >= 1".into()));
    }
    if table.is_empty() {
        return Err(Error::EmptyInput);
    }

    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut row_user = Vec::with_capacity(table.len());
    let mut row_item = Vec::with_capacity(table.len());
    for row in &table.rows {
        let next = user_ids.len();
        let u = *user_ids.entry(&row.user).or_insert(next);
        let next = item_ids.len();
        let i = *item_ids.entry(&row.item).or_insert(next);
        row_user.push(u);
        row_item.push(i);
    }

    let n_users = user_ids.len();
    let n_items = item_ids.len();
    let mut user_rows: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    let mut item_rows: Vec<Vec<usize>> = vec![Vec::new(); n_items];
    let mut user_deg = vec![0u32; n_users];
    let mut item_deg = vec![0u32; n_items];
    for r in 0..table.len() {
        user_rows[row_user[r]].push(r);
        item_rows[row_item[r]].push(r);
        user_deg[row_user[r]] += 1;
        item_deg[row_item[r]] += 1;
    }

    // Peel: queue every sub-k node, cascade degree decrements.
    #[derive(Clone, Copy)]
    enum Node {
        User(usize),
        Item(usize),
    }
    let mut row_alive = vec![true; table.len()];
    let mut user_alive = vec![true; n_users];
    let mut item_alive = vec![true; n_items];
    let mut queue: Vec<Node> = Vec::new();
    for u in 0..n_users {
        if user_deg[u] < k {
            queue.push(Node::User(u));
        }
    }
    for i in 0..n_items {
        if item_deg[i] < k {
            queue.push(Node::Item(i));
        }
    }

    while let Some(node) = queue.pop() {
        let rows = match node {
            Node::User(u) => {
                if !user_alive[u] {
                    continue;
                }
                user_alive[u] = false;
                &user_rows[u]
            }
            Node::Item(i) => {
                if !item_alive[i] {
                    continue;
                }
                item_alive[i] = false;
                &item_rows[i]
            }
        };
        for &r in rows {
            if !row_alive[r] {
                continue;
            }
            row_alive[r] = false;
            match node {
                Node::User(_) => {
                    let i = row_item[r];
                    item_deg[i] -= 1;
                    if item_alive[i] && item_deg[i] < k {
                        queue.push(Node::Item(i));
                    }
                }
                Node::Item(_) => {
                    let u = row_user[r];
                    user_deg[u] -= 1;
                    if user_alive[u] && user_deg[u] < k {
                        queue.push(Node::User(u));
                    }
                }
            }
        }
    }

    let rows: Vec<Interaction> = table
        .rows
        .iter()
        .zip(&row_alive)
        .filter(|(_, &alive)| alive)
        .map(|(r, _)| r.clone())
        .collect();
    if rows.is_empty() {
        return Err(Error::FilterEmpty { k });
    }
    Ok(InteractionTable { rows })
}

/// Remapped, split interactions plus per-node train degrees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Number of train interactions per user.
    pub user_degree: Vec<u32>,
    /// Number of train interactions per item.
    pub item_degree: Vec<u32>,
    /// Token of each user id (ids assigned by first appearance).
    pub user_tokens: Vec<String>,
    /// Token of each item id.
    pub item_tokens: Vec<String>,
}

impl Dataset {
    pub fn interactions(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// 1 − |E| / (n_users · n_items).
    pub fn sparsity(&self) -> f64 {
        1.0 - self.interactions() as f64 / (self.n_users as f64 * self.n_items as f64)
    }

    /// Builds a dataset whose train split is exactly `pairs` (valid/test
    /// empty). Intended for tests and benches that need a graph directly.
    pub fn from_train_pairs(
        n_users: usize,
        n_items: usize,
        pairs: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let mut user_degree = vec![0u32; n_users];
        let mut item_degree = vec![0u32; n_items];
        for &(u, i) in &pairs {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(Error::ShapeMismatch {
                    expected: format!("ids within {n_users}x{n_items}"),
                    found: format!("pair ({u}, {i})"),
                });
            }
            user_degree[u as usize] += 1;
            item_degree[i as usize] += 1;
        }
        Ok(Dataset {
            n_users,
            n_items,
            train: pairs,
            valid: Vec::new(),
            test: Vec::new(),
            user_degree,
            item_degree,
            user_tokens: (0..n_users).map(|u| format!("u{u}")).collect(),
            item_tokens: (0..n_items).map(|i| format!("i{i}")).collect(),
        })
    }
}

/// Per-user random split into train/valid/test.
///
/// Each user's interactions are shuffled with the seeded generator and cut so
/// that valid and test take `floor((r_valid + r_test) · m)` interactions
/// between them (test gets the odd one) and train keeps the remainder. Users
/// with fewer than 3 interactions put everything in train. Items left with no
/// train interaction get all of their interactions moved back to train so
/// that every evaluated node has train history.
pub fn split(table: &InteractionTable, ratios: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (r_train, r_valid, r_test) = ratios;
    if !(r_train >= 0.0 && r_valid >= 0.0 && r_test >= 0.0) {
        return Err(Error::InvalidConfig("split ratios must be >= 0".into()));
    }
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
    }
    if table.is_empty() {
        return Err(Error::EmptyInput);
    }

    // Contiguous ids by first appearance.
    let mut user_ids: HashMap<&str, u32> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut per_user: Vec<Vec<u32>> = Vec::new();
    for row in &table.rows {
        let u = *user_ids.entry(&row.user).or_insert_with(|| {
            user_tokens.push(row.user.clone());
            per_user.push(Vec::new());
            (user_tokens.len() - 1) as u32
        });
        let i = *item_ids.entry(&row.item).or_insert_with(|| {
            item_tokens.push(row.item.clone());
            (item_tokens.len() - 1) as u32
        });
        per_user[u as usize].push(i);
    }
    let n_users = user_tokens.len();
    let n_items = item_tokens.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<(u32, u32)> = Vec::new();
    let mut valid: Vec<(u32, u32)> = Vec::new();
    let mut test: Vec<(u32, u32)> = Vec::new();

    let holdout_ratio = r_valid + r_test;
    for (u, items) in per_user.iter_mut().enumerate() {
        let u = u as u32;
        items.shuffle(&mut rng);
        let m = items.len();
        let mut n_holdout = if m < 3 || holdout_ratio == 0.0 {
            0
        } else {
            (holdout_ratio * m as f64).floor() as usize
        };
        if n_holdout >= m {
            n_holdout = m - 1; // every user keeps at least one train interaction
        }
        let n_valid = (n_holdout as f64 * r_valid / holdout_ratio.max(f64::MIN_POSITIVE))
            .floor() as usize;
        let n_train = m - n_holdout;
        for (pos, &i) in items.iter().enumerate() {
            if pos < n_train {
                train.push((u, i));
            } else if pos < n_train + n_valid {
                valid.push((u, i));
            } else {
                test.push((u, i));
            }
        }
    }

    // Cold items: anything absent from train moves back with all its holdout
    // interactions.
    let mut item_in_train = vec![false; n_items];
    for &(_, i) in &train {
        item_in_train[i as usize] = true;
    }
    for bucket in [&mut valid, &mut test] {
        let mut kept = Vec::with_capacity(bucket.len());
        for &(u, i) in bucket.iter() {
            if item_in_train[i as usize] {
                kept.push((u, i));
            } else {
                train.push((u, i));
            }
        }
        *bucket = kept;
    }

    let mut user_degree = vec![0u32; n_users];
    let mut item_degree = vec![0u32; n_items];
    for &(u, i) in &train {
        user_degree[u as usize] += 1;
        item_degree[i as usize] += 1;
    }

    Ok(Dataset {
        n_users,
        n_items,
        train,
        valid,
        test,
        user_degree,
        item_degree,
        user_tokens,
        item_tokens,
    })
}

#[derive(Serialize, Deserialize)]
struct IdMapLine<'a> {
    kind: &'a str,
    id: u32,
    token: String,
}

fn write_pairs(path: &Path, pairs: &[(u32, u32)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(u, i) in pairs {
        writeln!(w, "{u}\t{i}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_pairs(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<(u32, u32)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse = |s: Option<&str>| -> Option<u32> { s.and_then(|v| v.parse().ok()) };
        match (parse(fields.next()), parse(fields.next())) {
            (Some(u), Some(i)) if (u as usize) < n_users && (i as usize) < n_items => {
                pairs.push((u, i))
            }
            _ => {
                return Err(Error::MalformedLine {
                    line: lineno + 1,
                    reason: format!("bad id pair in {}", path.display()),
                })
            }
        }
    }
    Ok(pairs)
}

/// Persists a dataset as `train.tsv`, `valid.tsv`, `test.tsv` and
/// `id_maps.jsonl` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_pairs(&dir.join("train.tsv"), &dataset.train)?;
    write_pairs(&dir.join("valid.tsv"), &dataset.valid)?;
    write_pairs(&dir.join("test.tsv"), &dataset.test)?;

    let mut w = BufWriter::new(File::create(dir.join("id_maps.jsonl"))?);
    for (id, token) in dataset.user_tokens.iter().enumerate() {
        let line = IdMapLine {
            kind: "user",
            id: id as u32,
            token: token.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    for (id, token) in dataset.item_tokens.iter().enumerate() {
        let line = IdMapLine {
            kind: "item",
            id: id as u32,
            token: token.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let reader = BufReader::new(File::open(dir.join("id_maps.jsonl"))?);
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let entry: IdMapLine = serde_json::from_str(&line)?;
        let bucket = match entry.kind {
            "user" => &mut user_tokens,
            "item" => &mut item_tokens,
            other => {
                return Err(Error::MalformedLine {
                    line: lineno + 1,
                    reason: format!("unknown id kind {other:?}"),
                })
            }
        };
        if entry.id as usize != bucket.len() {
            return Err(Error::MalformedLine {
                line: lineno + 1,
                reason: format!("non-contiguous id {}", entry.id),
            });
        }
        bucket.push(entry.token);
    }
    let (n_users, n_items) = (user_tokens.len(), item_tokens.len());
    if n_users == 0 || n_items == 0 {
        return Err(Error::EmptyInput);
    }

    let train = read_pairs(&dir.join("train.tsv"), n_users, n_items)?;
    let valid = read_pairs(&dir.join("valid.tsv"), n_users, n_items)?;
    let test = read_pairs(&dir.join("test.tsv"), n_users, n_items)?;
    if train.is_empty() {
        return Err(Error::EmptySplit { split: "train" });
    }

    let mut user_degree = vec![0u32; n_users];
    let mut item_degree = vec![0u32; n_items];
    for &(u, i) in &train {
        user_degree[u as usize] += 1;
        item_degree[i as usize] += 1;
    }

    Ok(Dataset {
        n_users,
        n_items,
        train,
        valid,
        test,
        user_degree,
        item_degree,
        user_tokens,
        item_tokens,
    })
}
