mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use semrec_core::corpus::{CorpusStats, Event, InteractionCorpus, Split};
use semrec_core::eval::{
    group_report, ndcg_at_k, parse_rankings_tsv, popularity_groups, rank_users, rankings_tsv, recall_at_k, Metrics,
    PopularityGroup,
};

/// Every user has seen every item once, in a shuffled order.
fn full_corpus(n_users: usize, n_items: usize, seed: u64) -> InteractionCorpus {
    let mut r = common::rng(seed);
    let sequences: Vec<Vec<Event>> = (0..n_users)
        .map(|_| {
            let mut items: Vec<usize> = (0..n_items).collect();
            items.shuffle(&mut r);
            items
                .into_iter()
                .enumerate()
                .map(|(t, item)| Event {
                    item,
                    timestamp: t as u64,
                })
                .collect()
        })
        .collect();
    InteractionCorpus {
        users: (0..n_users).map(|u| format!("u{u:04}")).collect(),
        items: (0..n_items).map(|i| format!("i{i:04}")).collect(),
        sequences,
        max_len: n_items,
        k: 1,
        stats: CorpusStats {
            users: n_users,
            items: n_items,
            interactions: n_users * n_items,
        },
    }
}

#[test]
fn random_scorer_recall_matches_cutoff_fraction() {
    let (users, items) = (4000, 50);
    let corpus = full_corpus(users, items, 1);
    let mut r = common::rng(2);
    let rankings = rank_users(&corpus, Split::Test, |h| {
        Ok(h.iter()
            .map(|_| {
                let mut all: Vec<usize> = (0..items).collect();
                all.shuffle(&mut r);
                all.into_iter().map(|i| (i, 0.0)).collect()
            })
            .collect())
    })
    .unwrap();
    let m = Metrics::from_rankings(&rankings);
    for (k, got) in [(10, m.recall_10.unwrap()), (20, m.recall_20.unwrap())] {
        let p = k as f64 / items as f64;
        let sd = (p * (1.0 - p) / users as f64).sqrt();
        assert!((got - p).abs() < 4.0 * sd, "recall@{k} {got} vs {p}");
    }
}

#[test]
fn tsv_round_trip_preserves_rankings() {
    let corpus = full_corpus(30, 25, 3);
    let mut r = common::rng(4);
    let rankings = rank_users(&corpus, Split::Valid, |h| {
        Ok(h.iter()
            .map(|_| {
                let mut all: Vec<usize> = (0..25).collect();
                all.shuffle(&mut r);
                all.into_iter().take(20).enumerate().map(|(k, i)| (i, -(k as f64) / 3.0)).collect()
            })
            .collect())
    })
    .unwrap();
    let text = rankings_tsv(&corpus, &rankings);
    assert_eq!(parse_rankings_tsv(&text, &corpus, Split::Valid).unwrap(), rankings);
}

#[test]
fn group_report_partitions_users() {
    let corpus = full_corpus(60, 12, 5);
    let rankings = rank_users(&corpus, Split::Test, |h| Ok(vec![(0..12).map(|i| (i, 0.0)).collect(); h.len()])).unwrap();
    let counts: Vec<u64> = (0..12).map(|i| (i * 7 % 5) as u64).collect();
    let rep = group_report(&rankings, &counts, Split::Test);
    assert_eq!(rep.groups.iter().map(|g| g.metrics.n).sum::<usize>(), 60);
    assert_eq!(rep.groups.iter().map(|g| g.n_items).sum::<usize>(), 12);
}

/// Rank of each item in ascending `(count, id)` order, split by cumulative size.
fn tertile_oracle(counts: &[u64]) -> Vec<PopularityGroup> {
    let n = counts.len();
    let sizes = [n.div_ceil(3), (n + 1) / 3, n / 3];
    (0..n)
        .map(|i| {
            let rank = (0..n).filter(|&j| (counts[j], j) < (counts[i], i)).count();
            if rank < sizes[0] {
                PopularityGroup::LongTail
            } else if rank < sizes[0] + sizes[1] {
                PopularityGroup::Medium
            } else {
                PopularityGroup::Popular
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn tertiles_match_rank_oracle(counts in prop::collection::vec(0u64..6, 0..40)) {
        let groups = popularity_groups(&counts);
        prop_assert_eq!(&groups, &tertile_oracle(&counts));
        let size = |g| groups.iter().filter(|&&x| x == g).count();
        let sizes: Vec<usize> = PopularityGroup::ALL.iter().map(|&g| size(g)).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let max_of = |g| counts.iter().zip(&groups).filter(|p| *p.1 == g).map(|p| *p.0).max();
        let min_of = |g| counts.iter().zip(&groups).filter(|p| *p.1 == g).map(|p| *p.0).min();
        if let (Some(a), Some(b)) = (max_of(PopularityGroup::LongTail), min_of(PopularityGroup::Medium)) {
            prop_assert!(a <= b);
        }
        if let (Some(a), Some(b)) = (max_of(PopularityGroup::Medium), min_of(PopularityGroup::Popular)) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn metrics_grow_with_cutoff(n in 1usize..40, target in 0usize..40, seed in 0u64..1000) {
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut common::rng(seed));
        let mut prev = (0.0, 0.0);
        for k in 1..=n + 1 {
            let (r, g) = (recall_at_k(&ranked, target, k), ndcg_at_k(&ranked, target, k));
            prop_assert!(r >= prev.0 && g >= prev.1);
            prop_assert!(g <= r && (0.0..=1.0).contains(&g));
            prev = (r, g);
        }
        if target < n {
            prop_assert_eq!(recall_at_k(&ranked, target, n), 1.0);
        }
    }
}
