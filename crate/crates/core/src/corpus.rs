//! Interaction logs, time slicing, and per-interval graph construction.
//!
//! The raw corpus is a list of `(user, item, timestamp)` events. Training
//! operates on a sequence of per-interval graphs: a weighted user-item
//! bipartite matrix per interval plus an item-item co-interaction graph whose
//! edges count consecutive same-user interactions, max-normalized to `[0, 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single implicit-feedback event with dense user/item indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// Seconds since epoch.
    pub timestamp: i64,
}

/// Parsed corpus: deduplicated events sorted by `(user, timestamp)`,
/// with ids remapped to dense indices in first-seen order.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// Earliest timestamp in the log.
    pub t_min: i64,
    /// Latest timestamp in the log.
    pub t_max: i64,
    /// Original user ids, indexed by dense user index.
    pub user_ids: Vec<String>,
    /// Original item ids, indexed by dense item index.
    pub item_ids: Vec<String>,
}

/// Supported input formats for [`parse_log`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// `user,item,timestamp` rows; a literal `user,item,timestamp` header is optional.
    Csv,
}

/// Per-interval weighted user-item matrix. Weights live in `(0, 1]`:
/// raw interactions carry weight 1, denoising scales selected entries,
/// augmentation inserts similarity-proportional entries.
#[derive(Debug, Clone, PartialEq)]
pub struct UserItemGraph {
    rows: Vec<BTreeMap<usize, f64>>,
    num_items: usize,
    pub interval: usize,
}

impl UserItemGraph {
    pub fn new(num_users: usize, num_items: usize, interval: usize) -> Self {
        Self {
            rows: vec![BTreeMap::new(); num_users],
            num_items,
            interval,
        }
    }

    pub fn num_users(&self) -> usize {
        self.rows.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn weight(&self, user: usize, item: usize) -> Option<f64> {
        self.rows[user].get(&item).copied()
    }

    /// Inserts or overwrites an entry. Callers are responsible for keeping
    /// weights within `(0, 1]`.
    pub fn set(&mut self, user: usize, item: usize, weight: f64) {
        debug_assert!(weight > 0.0 && weight <= 1.0);
        self.rows[user].insert(item, weight);
    }

    pub fn scale(&mut self, user: usize, item: usize, factor: f64) {
        if factor == 0.0 {
            self.rows[user].remove(&item);
        } else if let Some(w) = self.rows[user].get_mut(&item) {
            *w *= factor;
        }
    }

    pub fn row(&self, user: usize) -> &BTreeMap<usize, f64> {
        &self.rows[user]
    }

    pub fn num_entries(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Entries in `(user, item)` order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |(&i, &w)| (u, i, w)))
    }
}

/// Per-interval item-item co-interaction graph: symmetric, no self-loops,
/// weights normalized so the per-interval maximum is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemItemGraph {
    rows: Vec<BTreeMap<usize, f64>>,
    pub interval: usize,
}

impl ItemItemGraph {
    pub fn new(num_items: usize, interval: usize) -> Self {
        Self {
            rows: vec![BTreeMap::new(); num_items],
            interval,
        }
    }

    pub fn num_items(&self) -> usize {
        self.rows.len()
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        self.rows[a].get(&b).copied()
    }

    pub fn set(&mut self, a: usize, b: usize, weight: f64) {
        assert_ne!(a, b, "item-item graph stores no self-loops");
        self.rows[a].insert(b, weight);
        self.rows[b].insert(a, weight);
    }

    pub fn neighbors(&self, item: usize) -> &BTreeMap<usize, f64> {
        &self.rows[item]
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|r| r.is_empty())
    }

    /// Undirected edges with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(a, row)| {
            row.iter()
                .filter(move |(&b, _)| a < b)
                .map(move |(&b, &w)| (a, b, w))
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges().count()
    }
}

/// The sliced corpus: `num_intervals` user-item and item-item graphs plus the
/// per-user, time-ordered event sequences each interval was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGraphs {
    pub num_intervals: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub t_min: i64,
    pub t_max: i64,
    pub user_item: Vec<UserItemGraph>,
    pub item_item: Vec<ItemItemGraph>,
    /// `sequences[t][user]` = time-ordered `(item, timestamp)` events.
    pub sequences: Vec<Vec<Vec<(usize, i64)>>>,
}

impl IntervalGraphs {
    /// Original (pre-refinement) items a user touched in an interval,
    /// deduplicated, in first-occurrence order.
    pub fn original_items(&self, interval: usize, user: usize) -> Vec<usize> {
        let mut seen = Vec::new();
        for &(item, _) in &self.sequences[interval][user] {
            if !seen.contains(&item) {
                seen.push(item);
            }
        }
        seen
    }

    pub fn total_events(&self) -> usize {
        self.sequences
            .iter()
            .flat_map(|per_user| per_user.iter())
            .map(|s| s.len())
            .sum()
    }
}

/// Held-out final-interval interactions: the training target and the
/// evaluation ground truth (never fed to any model input).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInterval {
    pub num_users: usize,
    pub num_items: usize,
    /// `(user, item, timestamp)` events sorted by `(user, timestamp)`.
    pub events: Vec<(usize, usize, i64)>,
}

impl TargetInterval {
    /// Distinct target items per user, ascending.
    pub fn items_of(&self, user: usize) -> Vec<usize> {
        let mut items: Vec<usize> = self
            .events
            .iter()
            .filter(|&&(u, _, _)| u == user)
            .map(|&(_, i, _)| i)
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }

    /// The user's earliest target event, if any (ground truth for ranking).
    pub fn first_item_of(&self, user: usize) -> Option<usize> {
        self.events
            .iter()
            .filter(|&&(u, _, _)| u == user)
            .min_by_key(|&&(_, _, ts)| ts)
            .map(|&(_, i, _)| i)
    }

    pub fn users_with_targets(&self) -> Vec<usize> {
        let mut users: Vec<usize> = self.events.iter().map(|&(u, _, _)| u).collect();
        users.sort_unstable();
        users.dedup();
        users
    }
}

/// Parses a raw log into dense-indexed, deduplicated, sorted form.
///
/// Ids are remapped in first-seen order; duplicate `(user, item, timestamp)`
/// rows collapse to one; the final order is `(user, timestamp)` with input
/// order breaking timestamp ties.
pub fn parse_log<R: Read>(input: R, format: LogFormat) -> Result<InteractionLog> {
    match format {
        LogFormat::Csv => parse_csv(input),
    }
}

fn parse_csv<R: Read>(input: R) -> Result<InteractionLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);

    let mut user_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut item_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut raw: Vec<Interaction> = Vec::new();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(row_idx as u64 + 1),
            msg: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(row_idx as u64 + 1);
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields (user,item,timestamp), got {}", record.len()),
            });
        }
        // A literal header row is permitted on the first line only.
        if row_idx == 0
            && record[0].eq_ignore_ascii_case("user")
            && record[1].eq_ignore_ascii_case("item")
            && record[2].eq_ignore_ascii_case("timestamp")
        {
            continue;
        }
        let timestamp: i64 = record[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid timestamp {:?}", &record[2]),
        })?;
        if record[0].is_empty() || record[1].is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty user or item id".into(),
            });
        }
        let user = *user_index.entry(record[0].to_string()).or_insert_with(|| {
            user_ids.push(record[0].to_string());
            user_ids.len() - 1
        });
        let item = *item_index.entry(record[1].to_string()).or_insert_with(|| {
            item_ids.push(record[1].to_string());
            item_ids.len() - 1
        });
        raw.push(Interaction {
            user,
            item,
            timestamp,
        });
    }

    if raw.is_empty() {
        return Err(Error::EmptyLog);
    }

    // Stable sort keeps input order for equal (user, timestamp) pairs.
    raw.sort_by_key(|x| (x.user, x.timestamp));
    raw.dedup();

    let t_min = raw.iter().map(|x| x.timestamp).min().unwrap();
    let t_max = raw.iter().map(|x| x.timestamp).max().unwrap();

    Ok(InteractionLog {
        interactions: raw,
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        t_min,
        t_max,
        user_ids,
        item_ids,
    })
}

/// Builds an [`InteractionLog`] directly from dense-indexed events
/// (synthetic generators and tests).
pub fn log_from_events(events: &[(usize, usize, i64)]) -> Result<InteractionLog> {
    if events.is_empty() {
        return Err(Error::EmptyLog);
    }
    let num_users = 1 + events.iter().map(|e| e.0).max().unwrap();
    let num_items = 1 + events.iter().map(|e| e.1).max().unwrap();
    log_from_events_sized(events, num_users, num_items)
}

/// Like [`log_from_events`] but with an explicit catalog size, so users or
/// items without any event keep their slots.
pub fn log_from_events_sized(
    events: &[(usize, usize, i64)],
    num_users: usize,
    num_items: usize,
) -> Result<InteractionLog> {
    if events.is_empty() {
        return Err(Error::EmptyLog);
    }
    if events.iter().any(|e| e.0 >= num_users || e.1 >= num_items) {
        return Err(Error::Data(
            "event index outside the declared catalog".into(),
        ));
    }
    let mut raw: Vec<Interaction> = events
        .iter()
        .map(|&(user, item, timestamp)| Interaction {
            user,
            item,
            timestamp,
        })
        .collect();
    raw.sort_by_key(|x| (x.user, x.timestamp));
    raw.dedup();
    let t_min = raw.iter().map(|x| x.timestamp).min().unwrap();
    let t_max = raw.iter().map(|x| x.timestamp).max().unwrap();
    Ok(InteractionLog {
        interactions: raw,
        num_users,
        num_items,
        t_min,
        t_max,
        user_ids: (0..num_users).map(|u| u.to_string()).collect(),
        item_ids: (0..num_items).map(|i| i.to_string()).collect(),
    })
}

/// Assigns each interaction to one of `num_intervals` equal-length slices of
/// `[t_min, t_max]`. Returns graphs with sequences populated and adjacency
/// empty; an event at exactly `t_max` lands in the last interval.
pub fn slice_time(log: &InteractionLog, num_intervals: usize) -> Result<IntervalGraphs> {
    if num_intervals == 0 {
        return Err(Error::Config("number of intervals must be >= 1".into()));
    }
    if log.interactions.is_empty() {
        return Err(Error::EmptyLog);
    }
    let span = log.t_max - log.t_min;
    let mut sequences = vec![vec![Vec::new(); log.num_users]; num_intervals];
    for x in &log.interactions {
        let t = if span == 0 {
            0
        } else {
            // Exact integer arithmetic: floor((ts - t_min) * T / span), clamped
            // so ts == t_max maps to the final interval.
            let idx = ((x.timestamp - log.t_min) as i128 * num_intervals as i128
                / span as i128) as usize;
            idx.min(num_intervals - 1)
        };
        sequences[t][x.user].push((x.item, x.timestamp));
    }
    Ok(IntervalGraphs {
        num_intervals,
        num_users: log.num_users,
        num_items: log.num_items,
        t_min: log.t_min,
        t_max: log.t_max,
        user_item: (0..num_intervals)
            .map(|t| UserItemGraph::new(log.num_users, log.num_items, t))
            .collect(),
        item_item: (0..num_intervals)
            .map(|t| ItemItemGraph::new(log.num_items, t))
            .collect(),
        sequences,
    })
}

/// Fills the user-item matrices: weight 1 for every `(user, item)` with at
/// least one event in the interval. Repeated events are idempotent.
pub fn build_user_item(graphs: &mut IntervalGraphs) {
    for t in 0..graphs.num_intervals {
        let mut g = UserItemGraph::new(graphs.num_users, graphs.num_items, t);
        for (user, seq) in graphs.sequences[t].iter().enumerate() {
            for &(item, _) in seq {
                g.set(user, item, 1.0);
            }
        }
        graphs.user_item[t] = g;
    }
}

/// Fills the item-item graphs: each consecutive pair of distinct items in a
/// user's per-interval sequence increments the undirected edge weight by one;
/// weights are then divided by the interval's maximum so they span `(0, 1]`.
pub fn build_item_item(graphs: &mut IntervalGraphs) {
    for t in 0..graphs.num_intervals {
        let mut raw: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for seq in &graphs.sequences[t] {
            for pair in seq.windows(2) {
                let (a, b) = (pair[0].0, pair[1].0);
                if a != b {
                    let key = (a.min(b), a.max(b));
                    *raw.entry(key).or_insert(0.0) += 1.0;
                }
            }
        }
        let mut g = ItemItemGraph::new(graphs.num_items, t);
        if let Some(max_w) = raw.values().cloned().fold(None, |m: Option<f64>, w| {
            Some(m.map_or(w, |m| m.max(w)))
        }) {
            for ((a, b), w) in raw {
                g.set(a, b, w / max_w);
            }
        }
        graphs.item_item[t] = g;
    }
}

/// Slice + build both graph families in one call.
pub fn build_interval_graphs(log: &InteractionLog, num_intervals: usize) -> Result<IntervalGraphs> {
    let mut graphs = slice_time(log, num_intervals)?;
    build_user_item(&mut graphs);
    build_item_item(&mut graphs);
    Ok(graphs)
}

/// Splits off the final interval as the held-out prediction target, returning
/// input graphs covering the remaining intervals. The target carries raw
/// events only; its graphs are discarded so nothing downstream can read them.
pub fn split_target(graphs: IntervalGraphs) -> Result<(IntervalGraphs, TargetInterval)> {
    if graphs.num_intervals < 2 {
        return Err(Error::Config(
            "need at least 2 intervals to hold out a target".into(),
        ));
    }
    let last = graphs.num_intervals - 1;
    let mut events: Vec<(usize, usize, i64)> = graphs.sequences[last]
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| seq.iter().map(move |&(i, ts)| (u, i, ts)))
        .collect();
    events.sort_unstable();
    let target = TargetInterval {
        num_users: graphs.num_users,
        num_items: graphs.num_items,
        events,
    };
    let inputs = IntervalGraphs {
        num_intervals: last,
        num_users: graphs.num_users,
        num_items: graphs.num_items,
        t_min: graphs.t_min,
        t_max: graphs.t_max,
        user_item: graphs.user_item.into_iter().take(last).collect(),
        item_item: graphs.item_item.into_iter().take(last).collect(),
        sequences: graphs.sequences.into_iter().take(last).collect(),
    };
    Ok((inputs, target))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_users: usize,
    num_items: usize,
    num_intervals: usize,
    t_min: i64,
    t_max: i64,
}

/// Writes graphs as one sparse triplet file per interval plus a manifest.
/// Output is deterministic: entries are emitted in sorted order and weights
/// use the shortest round-trip decimal form.
pub fn save_graphs(dir: &Path, graphs: &IntervalGraphs) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        num_users: graphs.num_users,
        num_items: graphs.num_items,
        num_intervals: graphs.num_intervals,
        t_min: graphs.t_min,
        t_max: graphs.t_max,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for t in 0..graphs.num_intervals {
        let mut out = String::new();
        for (u, i, w) in graphs.user_item[t].iter() {
            out.push_str(&format!("{} {} {}\n", u, i, w));
        }
        fs::write(dir.join(format!("user_item_{:03}.txt", t)), out)?;

        let mut out = String::new();
        for (a, b, w) in graphs.item_item[t].edges() {
            out.push_str(&format!("{} {} {}\n", a, b, w));
        }
        fs::write(dir.join(format!("item_item_{:03}.txt", t)), out)?;

        let mut out = String::new();
        for (u, seq) in graphs.sequences[t].iter().enumerate() {
            for &(i, ts) in seq {
                out.push_str(&format!("{} {} {}\n", u, i, ts));
            }
        }
        fs::write(dir.join(format!("sequences_{:03}.txt", t)), out)?;
    }
    Ok(())
}

fn parse_triplet_line<A, B, C>(line: &str, path: &Path, lineno: usize) -> Result<(A, B, C)>
where
    A: std::str::FromStr,
    B: std::str::FromStr,
    C: std::str::FromStr,
{
    let mut parts = line.split_whitespace();
    let err = || {
        Error::Artifact(format!(
            "{}:{}: malformed triplet line {:?}",
            path.display(),
            lineno,
            line
        ))
    };
    let a = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    let b = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    let c = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    if parts.next().is_some() {
        return Err(err());
    }
    Ok((a, b, c))
}

fn read_triplets<A, B, C>(path: &Path) -> Result<Vec<(A, B, C)>>
where
    A: std::str::FromStr,
    B: std::str::FromStr,
    C: std::str::FromStr,
{
    let file = fs::File::open(path)
        .map_err(|e| Error::Artifact(format!("cannot open {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_triplet_line(&line, path, idx + 1)?);
    }
    Ok(out)
}

/// Reads graphs previously written by [`save_graphs`].
pub fn load_graphs(dir: &Path) -> Result<IntervalGraphs> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(
        |e| Error::Artifact(format!("cannot open {}: {}", manifest_path.display(), e)),
    )?)?;
    let mut graphs = IntervalGraphs {
        num_intervals: manifest.num_intervals,
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        t_min: manifest.t_min,
        t_max: manifest.t_max,
        user_item: (0..manifest.num_intervals)
            .map(|t| UserItemGraph::new(manifest.num_users, manifest.num_items, t))
            .collect(),
        item_item: (0..manifest.num_intervals)
            .map(|t| ItemItemGraph::new(manifest.num_items, t))
            .collect(),
        sequences: vec![vec![Vec::new(); manifest.num_users]; manifest.num_intervals],
    };
    for t in 0..manifest.num_intervals {
        for (u, i, w) in read_triplets::<usize, usize, f64>(&dir.join(format!("user_item_{:03}.txt", t)))? {
            graphs.user_item[t].set(u, i, w);
        }
        for (a, b, w) in read_triplets::<usize, usize, f64>(&dir.join(format!("item_item_{:03}.txt", t)))? {
            graphs.item_item[t].set(a, b, w);
        }
        for (u, i, ts) in read_triplets::<usize, usize, i64>(&dir.join(format!("sequences_{:03}.txt", t)))? {
            graphs.sequences[t][u].push((i, ts));
        }
    }
    Ok(graphs)
}

/// Writes held-out target events as `user item timestamp` lines.
pub fn save_target(path: &Path, target: &TargetInterval) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "# {} {}", target.num_users, target.num_items)?;
    for &(u, i, ts) in &target.events {
        writeln!(out, "{} {} {}", u, i, ts)?;
    }
    Ok(())
}

pub fn load_target(path: &Path) -> Result<TargetInterval> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Artifact(format!("cannot open {}: {}", path.display(), e)))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact(format!("{}: empty target file", path.display())))??;
    let dims: Vec<usize> = header
        .trim_start_matches('#')
        .split_whitespace()
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Artifact(format!("{}: bad header {:?}", path.display(), header)))?;
    if dims.len() != 2 {
        return Err(Error::Artifact(format!(
            "{}: bad header {:?}",
            path.display(),
            header
        )));
    }
    let mut events = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_triplet_line::<usize, usize, i64>(&line, path, idx + 2)?);
    }
    events.sort_unstable();
    Ok(TargetInterval {
        num_users: dims[0],
        num_items: dims[1],
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<InteractionLog> {
        parse_log(s.as_bytes(), LogFormat::Csv)
    }

    #[test]
    fn parse_basic() {
        let log = parse("u1,i1,100\nu1,i2,200\nu2,i1,150\n").unwrap();
        assert_eq!(log.num_users, 2);
        assert_eq!(log.num_items, 2);
        assert_eq!(log.t_min, 100);
        assert_eq!(log.t_max, 200);
        assert_eq!(log.interactions.len(), 3);
        // First-seen remap: u1 -> 0, u2 -> 1.
        assert_eq!(log.user_ids, vec!["u1", "u2"]);
    }

    #[test]
    fn parse_optional_header() {
        let log = parse("user,item,timestamp\nu1,i1,100\n").unwrap();
        assert_eq!(log.interactions.len(), 1);
    }

    #[test]
    fn parse_dedup() {
        let log = parse("u1,i1,100\nu1,i1,100\n").unwrap();
        assert_eq!(log.interactions.len(), 1);
    }

    #[test]
    fn parse_missing_field_reports_line() {
        let err = parse("u1,i1,100\nu1,i1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_bad_timestamp_reports_line() {
        let err = parse("u1,i1,abc\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_empty_is_error() {
        assert!(matches!(parse(""), Err(Error::EmptyLog)));
    }

    #[test]
    fn slice_assigns_by_floor() {
        let log = log_from_events(&[(0, 0, 0), (0, 1, 50), (0, 2, 100)]).unwrap();
        let graphs = slice_time(&log, 4).unwrap();
        // width 25: ts=0 -> 0, ts=50 -> 2, ts=100 (== t_max) clamps to 3.
        assert_eq!(graphs.sequences[0][0], vec![(0, 0)]);
        assert_eq!(graphs.sequences[2][0], vec![(1, 50)]);
        assert_eq!(graphs.sequences[3][0], vec![(2, 100)]);
    }

    #[test]
    fn slice_single_interval() {
        let log = log_from_events(&[(0, 0, 0), (0, 1, 7), (1, 0, 3)]).unwrap();
        let graphs = slice_time(&log, 1).unwrap();
        assert_eq!(graphs.sequences[0].iter().map(|s| s.len()).sum::<usize>(), 3);
    }

    #[test]
    fn slice_zero_intervals_is_error() {
        let log = log_from_events(&[(0, 0, 0)]).unwrap();
        assert!(slice_time(&log, 0).is_err());
    }

    #[test]
    fn slice_degenerate_span() {
        let log = log_from_events(&[(0, 0, 5), (1, 1, 5)]).unwrap();
        let graphs = slice_time(&log, 3).unwrap();
        assert_eq!(graphs.sequences[0][0].len(), 1);
        assert_eq!(graphs.sequences[0][1].len(), 1);
        assert!(graphs.sequences[1].iter().all(|s| s.is_empty()));
    }

    #[test]
    fn slice_is_a_partition() {
        let log = log_from_events(&[
            (0, 0, 0),
            (0, 1, 10),
            (1, 2, 25),
            (2, 0, 60),
            (2, 1, 99),
            (1, 1, 100),
        ])
        .unwrap();
        let graphs = slice_time(&log, 5).unwrap();
        assert_eq!(graphs.total_events(), log.interactions.len());
    }

    #[test]
    fn user_item_idempotent_weights() {
        let log = log_from_events(&[(0, 3, 10), (0, 3, 12), (0, 1, 14)]).unwrap();
        let graphs = build_interval_graphs(&log, 1).unwrap();
        assert_eq!(graphs.user_item[0].weight(0, 3), Some(1.0));
        assert_eq!(graphs.user_item[0].weight(0, 1), Some(1.0));
        assert_eq!(graphs.user_item[0].num_entries(), 2);
        // Row of a user with no events stays empty.
        let log2 = log_from_events(&[(0, 0, 0), (2, 0, 1)]).unwrap();
        let graphs2 = build_interval_graphs(&log2, 1).unwrap();
        assert!(graphs2.user_item[0].row(1).is_empty());
    }

    #[test]
    fn item_item_consecutive_pairs_normalized() {
        // Two users [a, b], one user [b, c]: raw {a,b}=2, {b,c}=1.
        let log = log_from_events(&[
            (0, 0, 1),
            (0, 1, 2),
            (1, 0, 1),
            (1, 1, 2),
            (2, 1, 1),
            (2, 2, 2),
        ])
        .unwrap();
        let graphs = build_interval_graphs(&log, 1).unwrap();
        let z = &graphs.item_item[0];
        assert_eq!(z.weight(0, 1), Some(1.0));
        assert_eq!(z.weight(1, 2), Some(0.5));
        assert_eq!(z.weight(1, 0), Some(1.0), "symmetric");
    }

    #[test]
    fn item_item_skips_self_pairs() {
        let log = log_from_events(&[(0, 0, 1), (0, 0, 2), (0, 1, 3)]).unwrap();
        let graphs = build_interval_graphs(&log, 1).unwrap();
        // Sequence [a, a, b] after dedup of identical triples is [a(1), a(2), b].
        assert_eq!(graphs.item_item[0].weight(0, 1), Some(1.0));
        assert_eq!(graphs.item_item[0].num_edges(), 1);
    }

    #[test]
    fn item_item_single_item_empty() {
        let log = log_from_events(&[(0, 0, 1), (1, 1, 2)]).unwrap();
        let graphs = build_interval_graphs(&log, 1).unwrap();
        assert!(graphs.item_item[0].is_empty());
    }

    #[test]
    fn split_target_holds_out_last() {
        let log = log_from_events(&[(0, 0, 0), (0, 1, 40), (0, 2, 100), (1, 0, 95)]).unwrap();
        let graphs = build_interval_graphs(&log, 2).unwrap();
        let (inputs, target) = split_target(graphs).unwrap();
        assert_eq!(inputs.num_intervals, 1);
        assert_eq!(target.items_of(0), vec![2]);
        assert_eq!(target.items_of(1), vec![0]);
        assert_eq!(target.first_item_of(0), Some(2));
        // Inputs retain only pre-boundary events.
        assert_eq!(inputs.total_events(), 2);
    }

    #[test]
    fn graphs_roundtrip_on_disk() {
        let log = log_from_events(&[
            (0, 0, 0),
            (0, 1, 10),
            (1, 1, 20),
            (1, 2, 30),
            (2, 0, 95),
        ])
        .unwrap();
        let graphs = build_interval_graphs(&log, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_graphs(dir.path(), &graphs).unwrap();
        let loaded = load_graphs(dir.path()).unwrap();
        assert_eq!(graphs, loaded);
    }
}
