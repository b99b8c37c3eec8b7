//! Interaction logs, k-core filtering, leave-one-out splits and popularity.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// One item occurrence inside a user sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item: usize,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    /// Interactions surviving the k-core, before `max_len` truncation.
    pub interactions: usize,
}

/// Which held-out position of each sequence is the prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

/// Filtered, chronologically ordered user sequences.
///
/// Users and items are sorted by id; `sequences[u]` holds at most `max_len`
/// most recent events. The last event is the test target, the one before it
/// the validation target, and the rest is the training prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionCorpus {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub sequences: Vec<Vec<Event>>,
    pub max_len: usize,
    pub k: usize,
    pub stats: CorpusStats,
}

/// Reads `user<TAB>item<TAB>timestamp` lines, dropping repeated triples.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text)
}

pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let user = fields.next().filter(|s| !s.is_empty());
        let item = fields.next().filter(|s| !s.is_empty());
        let ts = fields.next().filter(|s| !s.is_empty());
        let (Some(user), Some(item), Some(ts)) = (user, item, ts) else {
            return Err(Error::Parse {
                line,
                msg: "missing field".into(),
            });
        };
        if fields.next().is_some() {
            return Err(Error::Parse {
                line,
                msg: "too many fields".into(),
            });
        }
        let timestamp: u64 = ts.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid timestamp {ts:?}"),
        })?;
        let rec = Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        };
        if seen.insert(rec.clone()) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Reads `user,item,rating,timestamp` rating dumps (rating ignored).
pub fn parse_ratings_csv(text: &str) -> Result<Vec<Interaction>> {
    let mut tsv = String::with_capacity(text.len());
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 4 comma-separated fields, got {}", f.len()),
            });
        }
        tsv.push_str(&format!("{}\t{}\t{}\n", f[0], f[1], f[3]));
    }
    parse_interactions(&tsv)
}

#[derive(Deserialize)]
struct Review {
    #[serde(rename = "reviewerID")]
    reviewer: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    time: u64,
}

/// Reads one JSON review object per line (`reviewerID`, `asin`, `unixReviewTime`).
pub fn parse_reviews_jsonl(text: &str) -> Result<Vec<Interaction>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let r: Review = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let rec = Interaction {
            user: r.reviewer,
            item: r.asin,
            timestamp: r.time,
        };
        if seen.insert(rec.clone()) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Picks the parser by extension: `.csv` ratings, `.json`/`.jsonl` reviews,
/// anything else tab-separated.
pub fn load_interactions_any(path: &Path) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_ratings_csv(&text),
        Some("json") | Some("jsonl") => parse_reviews_jsonl(&text),
        _ => parse_interactions(&text),
    }
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut text = String::new();
    for r in interactions {
        text.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.timestamp));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Indices of the interactions that survive iterative `k`-core pruning.
///
/// Degrees count interactions, so a user who interacted with the same item at
/// two different times contributes two to both degrees.
pub fn k_core_survivors(interactions: &[Interaction], k: usize) -> Vec<usize> {
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut edges = Vec::with_capacity(interactions.len());
    for r in interactions {
        let nu = user_ids.len();
        let u = *user_ids.entry(r.user.as_str()).or_insert(nu);
        let ni = item_ids.len();
        let it = *item_ids.entry(r.item.as_str()).or_insert(ni);
        edges.push((u, it));
    }
    let mut user_deg = vec![0usize; user_ids.len()];
    let mut item_deg = vec![0usize; item_ids.len()];
    let mut user_edges = vec![Vec::new(); user_ids.len()];
    let mut item_edges = vec![Vec::new(); item_ids.len()];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_deg[u] += 1;
        item_deg[i] += 1;
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut alive = vec![true; edges.len()];
    let mut user_dead = vec![false; user_ids.len()];
    let mut item_dead = vec![false; item_ids.len()];
    // Work queue of nodes: (is_user, index).
    let mut queue: Vec<(bool, usize)> = Vec::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            queue.push((true, u));
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < k {
            queue.push((false, i));
        }
    }
    while let Some((is_user, n)) = queue.pop() {
        let (dead, list) = if is_user {
            (&mut user_dead[n], &user_edges[n])
        } else {
            (&mut item_dead[n], &item_edges[n])
        };
        if *dead {
            continue;
        }
        *dead = true;
        for &e in list {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            user_deg[u] -= 1;
            item_deg[i] -= 1;
            if is_user {
                if item_deg[i] < k && !item_dead[i] {
                    queue.push((false, i));
                }
            } else if user_deg[u] < k && !user_dead[u] {
                queue.push((true, u));
            }
        }
    }
    (0..edges.len()).filter(|&e| alive[e]).collect()
}

/// k-core filtering followed by chronological ordering, truncation to the
/// most recent `max_len` events and leave-one-out splitting.
pub fn k_core_filter(interactions: &[Interaction], k: usize, max_len: usize) -> Result<InteractionCorpus> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if max_len < 3 {
        return Err(Error::InvalidArgument(
            "max_len must leave room for train, valid and test items".into(),
        ));
    }
    let keep = k_core_survivors(interactions, k);
    if keep.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let items: Vec<String> = keep
        .iter()
        .map(|&e| interactions[e].item.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut per_user: BTreeMap<&str, Vec<(u64, usize, usize)>> = BTreeMap::new();
    for (order, &e) in keep.iter().enumerate() {
        let r = &interactions[e];
        per_user
            .entry(r.user.as_str())
            .or_default()
            .push((r.timestamp, order, item_index[r.item.as_str()]));
    }
    let mut users = Vec::with_capacity(per_user.len());
    let mut sequences = Vec::with_capacity(per_user.len());
    for (user, mut evs) in per_user {
        // stable on file order for equal timestamps
        evs.sort_by_key(|&(ts, order, _)| (ts, order));
        let start = evs.len().saturating_sub(max_len);
        sequences.push(
            evs[start..]
                .iter()
                .map(|&(timestamp, _, item)| Event { item, timestamp })
                .collect(),
        );
        users.push(user.to_string());
    }
    let stats = CorpusStats {
        users: users.len(),
        items: items.len(),
        interactions: keep.len(),
    };
    Ok(InteractionCorpus {
        users,
        items,
        sequences,
        max_len,
        k,
        stats,
    })
}

impl InteractionCorpus {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn train(&self, user: usize) -> &[Event] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    pub fn valid(&self, user: usize) -> Event {
        let s = &self.sequences[user];
        s[s.len() - 2]
    }

    pub fn test(&self, user: usize) -> Event {
        let s = &self.sequences[user];
        s[s.len() - 1]
    }

    /// History visible when predicting `split`, and the target.
    pub fn history_and_target(&self, user: usize, split: Split) -> (&[Event], Event) {
        let s = &self.sequences[user];
        match split {
            Split::Valid => (&s[..s.len() - 2], s[s.len() - 2]),
            Split::Test => (&s[..s.len() - 1], s[s.len() - 1]),
        }
    }

    /// Interaction counts per item over training prefixes only.
    pub fn train_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.items.len()];
        for u in 0..self.users.len() {
            for ev in self.train(u) {
                counts[ev.item] += 1;
            }
        }
        counts
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Min-max scaled counts; a flat distribution maps every item to 0.
pub fn min_max_normalize(counts: &[u64]) -> Vec<f64> {
    let Some(&min) = counts.iter().min() else {
        return Vec::new();
    };
    let max = *counts.iter().max().unwrap_or(&min);
    if max == min {
        return vec![0.0; counts.len()];
    }
    let span = (max - min) as f64;
    counts.iter().map(|&c| (c - min) as f64 / span).collect()
}

/// Popularity `p` per item from training interactions.
pub fn normalize_popularity(corpus: &InteractionCorpus) -> Vec<f64> {
    min_max_normalize(&corpus.train_counts())
}
