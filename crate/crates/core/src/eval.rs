//! Leave-one-out ranking metrics and popularity-group breakdowns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use semrec_tape::Scalar;
use serde::{Deserialize, Serialize};

use crate::corpus::{Event, InteractionCorpus, Split};
use crate::error::{Error, Result};
use crate::recommender::{recommend, ItemContext, RecommenderModel};
use crate::trie::SidTrie;

/// Largest cutoff reported.
pub const MAX_K: usize = 20;

/// 1-based rank of `target` in `ranked`.
pub fn rank_of(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` inside the cutoff; the ideal DCG of one relevant item is 1.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Recommendations for one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub user: usize,
    pub target: usize,
    /// `(item, score)`, best first.
    pub items: Vec<(usize, f64)>,
}

impl Ranking {
    pub fn ranked(&self) -> Vec<usize> {
        self.items.iter().map(|p| p.0).collect()
    }
}

/// Mean metrics over a set of users; `None` when the set is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub recall_10: Option<f64>,
    pub recall_20: Option<f64>,
    pub ndcg_10: Option<f64>,
    pub ndcg_20: Option<f64>,
}

impl Metrics {
    pub fn from_rankings<'a>(rankings: impl IntoIterator<Item = &'a Ranking>) -> Self {
        let mut n = 0usize;
        let mut sums = [0.0f64; 4];
        for r in rankings {
            let ranked = r.ranked();
            sums[0] += recall_at_k(&ranked, r.target, 10);
            sums[1] += recall_at_k(&ranked, r.target, 20);
            sums[2] += ndcg_at_k(&ranked, r.target, 10);
            sums[3] += ndcg_at_k(&ranked, r.target, 20);
            n += 1;
        }
        let mean = |s: f64| (n > 0).then(|| s / n as f64);
        Self {
            n,
            recall_10: mean(sums[0]),
            recall_20: mean(sums[1]),
            ndcg_10: mean(sums[2]),
            ndcg_20: mean(sums[3]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopularityGroup {
    Popular,
    Medium,
    LongTail,
}

impl PopularityGroup {
    pub const ALL: [PopularityGroup; 3] = [Self::Popular, Self::Medium, Self::LongTail];

    pub fn label(self) -> &'static str {
        match self {
            Self::Popular => "Popular",
            Self::Medium => "Medium",
            Self::LongTail => "Long-tail",
        }
    }
}

/// Equal-size tertiles by training count. Items are ordered by `(count, id)`
/// ascending, so boundary ties fall to the less popular group; the first
/// `n % 3` groups in that order (long-tail, then medium) take one extra item.
pub fn popularity_groups(counts: &[u64]) -> Vec<PopularityGroup> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
    let base = n / 3;
    let extra = n % 3;
    let sizes = [base + usize::from(extra > 0), base + usize::from(extra > 1), base];
    let mut out = vec![PopularityGroup::LongTail; n];
    let mut start = 0;
    for (g, size) in [PopularityGroup::LongTail, PopularityGroup::Medium, PopularityGroup::Popular]
        .into_iter()
        .zip(sizes)
    {
        for &i in &order[start..start + size] {
            out[i] = g;
        }
        start += size;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: PopularityGroup,
    pub n_items: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub overall: Metrics,
    pub groups: Vec<GroupMetrics>,
}

/// Overall metrics plus per-group metrics over users whose target is in the group.
pub fn group_report(rankings: &[Ranking], counts: &[u64], split: Split) -> MetricsReport {
    let groups = popularity_groups(counts);
    let per_group = PopularityGroup::ALL
        .iter()
        .map(|&g| GroupMetrics {
            group: g,
            n_items: groups.iter().filter(|&&x| x == g).count(),
            metrics: Metrics::from_rankings(rankings.iter().filter(|r| groups.get(r.target) == Some(&g))),
        })
        .collect();
    MetricsReport {
        split: split_name(split).to_string(),
        overall: Metrics::from_rankings(rankings),
        groups: per_group,
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

/// Ranks every user with `rank_fn` (given chronological histories, returns
/// best-first lists).
pub fn rank_users<F>(corpus: &InteractionCorpus, split: Split, mut rank_fn: F) -> Result<Vec<Ranking>>
where
    F: FnMut(&[&[Event]]) -> Result<Vec<Vec<(usize, f64)>>>,
{
    let pairs: Vec<(&[Event], Event)> = (0..corpus.n_users()).map(|u| corpus.history_and_target(u, split)).collect();
    let histories: Vec<&[Event]> = pairs.iter().map(|p| p.0).collect();
    let lists = rank_fn(&histories)?;
    if lists.len() != pairs.len() {
        return Err(Error::dim("ranked lists", pairs.len(), lists.len()));
    }
    Ok(lists
        .into_iter()
        .zip(&pairs)
        .enumerate()
        .map(|(user, (items, p))| Ranking {
            user,
            target: p.1.item,
            items,
        })
        .collect())
}

/// Beam-search rankings of the whole catalog for every user.
pub fn evaluate<T: Scalar>(
    model: &RecommenderModel<T>,
    ctx: &ItemContext<T>,
    trie: &SidTrie,
    corpus: &InteractionCorpus,
    split: Split,
) -> Result<(MetricsReport, Vec<Ranking>)> {
    let top_n = MAX_K.min(ctx.n_items());
    let rankings = rank_users(corpus, split, |h| recommend(model, ctx, trie, h, top_n))?;
    Ok((group_report(&rankings, &corpus.train_counts(), split), rankings))
}

/// The `n` items with the highest training counts, ties by item id; scores are counts.
pub fn most_popular(counts: &[u64], n: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.into_iter().take(n).map(|i| (i, counts[i] as f64)).collect()
}

pub fn most_popular_rankings(corpus: &InteractionCorpus, split: Split) -> Result<Vec<Ranking>> {
    let list = most_popular(&corpus.train_counts(), MAX_K);
    rank_users(corpus, split, |h| Ok(vec![list.clone(); h.len()]))
}

/// `user<TAB>rank<TAB>item<TAB>score`, ranks from 1.
pub fn rankings_tsv(corpus: &InteractionCorpus, rankings: &[Ranking]) -> String {
    let mut out = String::new();
    for r in rankings {
        for (rank, &(item, score)) in r.items.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", corpus.users[r.user], rank + 1, corpus.items[item], score);
        }
    }
    out
}

pub fn write_rankings_tsv(path: &Path, corpus: &InteractionCorpus, rankings: &[Ranking]) -> Result<()> {
    fs::write(path, rankings_tsv(corpus, rankings)).map_err(|e| Error::io(path, e))
}

/// Parses an exported TSV back into rankings, taking targets from `split`.
pub fn parse_rankings_tsv(text: &str, corpus: &InteractionCorpus, split: Split) -> Result<Vec<Ranking>> {
    let users: std::collections::HashMap<&str, usize> =
        corpus.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let items = corpus.item_index();
    let mut lists: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); corpus.n_users()];
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse { line: ln + 1, msg };
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let u = *users.get(f[0]).ok_or_else(|| err(format!("unknown user {}", f[0])))?;
        let rank: usize = f[1].parse().map_err(|e| err(format!("rank: {e}")))?;
        let item = *items.get(f[2]).ok_or_else(|| err(format!("unknown item {}", f[2])))?;
        let score: f64 = f[3].parse().map_err(|e| err(format!("score: {e}")))?;
        lists[u].push((rank, item, score));
    }
    Ok(lists
        .into_iter()
        .enumerate()
        .map(|(user, mut l)| {
            l.sort_by_key(|x| x.0);
            Ranking {
                user,
                target: corpus.history_and_target(user, split).1.item,
                items: l.into_iter().map(|(_, i, s)| (i, s)).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_and_three() {
        let ranked = [4, 7, 9];
        assert_eq!(recall_at_k(&ranked, 4, 10), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 4, 10), 1.0);
        assert!((ndcg_at_k(&ranked, 9, 10) - 0.5).abs() < 1e-15);
        assert_eq!(recall_at_k(&ranked, 9, 2), 0.0);
        assert_eq!(ndcg_at_k(&ranked, 3, 10), 0.0);
    }

    #[test]
    fn tertiles_one_each() {
        let g = popularity_groups(&[5, 1, 9]);
        assert_eq!(g, vec![PopularityGroup::Medium, PopularityGroup::LongTail, PopularityGroup::Popular]);
    }

    #[test]
    fn boundary_ties_go_down() {
        // 0 and 1 tie at the long-tail/medium boundary; the lower id stays lower.
        let g = popularity_groups(&[3, 3, 7, 9]);
        assert_eq!(g[0], PopularityGroup::LongTail);
        assert_eq!(g[1], PopularityGroup::LongTail);
        assert_eq!(g[2], PopularityGroup::Medium);
        assert_eq!(g[3], PopularityGroup::Popular);
    }

    #[test]
    fn empty_group_has_no_metrics() {
        let rankings = vec![Ranking {
            user: 0,
            target: 2,
            items: vec![(2, 1.0)],
        }];
        let rep = group_report(&rankings, &[1, 2, 3], Split::Test);
        assert_eq!(rep.groups[0].metrics.n, 1);
        assert_eq!(rep.groups[1].metrics.n, 0);
        assert_eq!(rep.groups[1].metrics.recall_10, None);
        assert_eq!(rep.overall.recall_10, Some(1.0));
    }
}
