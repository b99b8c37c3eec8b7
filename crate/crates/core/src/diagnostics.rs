//! SID-quality diagnostics: prefix collision rates, codebook perplexity and
//! clustering purity against planted labels.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sid::SemanticId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    /// `prefix_rates[l]` is the share of items whose length-`l+1` prefix is
    /// shared with at least one other item. The last entry equals `final_rate`.
    pub prefix_rates: Vec<f64>,
    pub final_rate: f64,
    /// Full SIDs held by two or more items, with their item indices.
    pub groups: BTreeMap<SemanticId, Vec<usize>>,
}

fn check_lengths(sids: &[SemanticId]) -> Result<usize> {
    let len = sids.first().map(SemanticId::len).unwrap_or(0);
    if let Some(bad) = sids.iter().find(|s| s.len() != len) {
        return Err(Error::dim("SID length", len, bad.len()));
    }
    Ok(len)
}

pub fn detect_collisions(sids: &[SemanticId]) -> Result<CollisionReport> {
    let depth = check_lengths(sids)?;
    let n = sids.len();
    let mut prefix_rates = Vec::with_capacity(depth);
    for l in 1..=depth {
        let mut counts: HashMap<&[u16], usize> = HashMap::new();
        for s in sids {
            *counts.entry(s.prefix(l)).or_default() += 1;
        }
        let shared = sids.iter().filter(|s| counts[s.prefix(l)] > 1).count();
        prefix_rates.push(if n == 0 { 0.0 } else { shared as f64 / n as f64 });
    }
    let mut groups: BTreeMap<SemanticId, Vec<usize>> = BTreeMap::new();
    for (i, s) in sids.iter().enumerate() {
        groups.entry(s.clone()).or_default().push(i);
    }
    groups.retain(|_, v| v.len() > 1);
    let final_rate = prefix_rates.last().copied().unwrap_or(0.0);
    Ok(CollisionReport {
        prefix_rates,
        final_rate,
        groups,
    })
}

/// `exp(-sum f ln f)` over the empirical code frequencies.
pub fn perplexity_from_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let total = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let f = c as f64 / total;
            -f * f.ln()
        })
        .sum();
    entropy.exp()
}

/// Code usage counts at `level` (0-based).
pub fn code_usage(sids: &[SemanticId], level: usize, codebook_size: usize) -> Result<Vec<usize>> {
    let depth = check_lengths(sids)?;
    if level >= depth {
        return Err(Error::InvalidArgument(format!("level {level} outside SID depth {depth}")));
    }
    let mut counts = vec![0usize; codebook_size];
    for s in sids {
        let c = s.codes()[level] as usize;
        if c >= codebook_size {
            return Err(Error::InvalidArgument(format!(
                "code {c} outside codebook of size {codebook_size}"
            )));
        }
        counts[c] += 1;
    }
    Ok(counts)
}

/// Perplexity of code usage at `level` (0-based).
pub fn codebook_perplexity(sids: &[SemanticId], level: usize, codebook_size: usize) -> Result<f64> {
    if sids.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty SID map".into()));
    }
    Ok(perplexity_from_counts(&code_usage(sids, level, codebook_size)?))
}

/// Per-level perplexities and their geometric mean.
pub fn perplexity_summary(sids: &[SemanticId], codebook_size: usize) -> Result<(Vec<f64>, f64)> {
    if sids.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty SID map".into()));
    }
    let depth = check_lengths(sids)?;
    let per_level = (0..depth)
        .map(|l| codebook_perplexity(sids, l, codebook_size))
        .collect::<Result<Vec<_>>>()?;
    let geo = (per_level.iter().map(|p| p.ln()).sum::<f64>() / depth as f64).exp();
    Ok((per_level, geo))
}

/// Share of items whose cluster's majority label matches their own label.
pub fn clustering_purity(clusters: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(clusters.len(), labels.len(), "one label per clustered item");
    if clusters.is_empty() {
        return 1.0;
    }
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &y) in clusters.iter().zip(labels) {
        *table.entry(c).or_default().entry(y).or_default() += 1;
    }
    let majority: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveSummary {
    pub moved: usize,
    pub mean_cost: f64,
    pub max_cost: f64,
    /// Moves per substitution width (`1` = last level only).
    pub by_width: Vec<usize>,
}

/// The JSON-serializable SID-quality report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidReport {
    pub items: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub prefix_collision_rate: Vec<f64>,
    pub final_collision_rate: f64,
    pub collision_groups: usize,
    pub perplexity: Vec<f64>,
    pub perplexity_geo_mean: f64,
    pub used_codes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub moves: Option<MoveSummary>,
}

pub fn sid_report(sids: &[SemanticId], codebook_size: usize, moves: Option<MoveSummary>) -> Result<SidReport> {
    let coll = detect_collisions(sids)?;
    let (perplexity, perplexity_geo_mean) = perplexity_summary(sids, codebook_size)?;
    let levels = coll.prefix_rates.len();
    let used_codes = (0..levels)
        .map(|l| Ok(code_usage(sids, l, codebook_size)?.iter().filter(|&&c| c > 0).count()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SidReport {
        items: sids.len(),
        levels,
        codebook_size,
        prefix_collision_rate: coll.prefix_rates,
        final_collision_rate: coll.final_rate,
        collision_groups: coll.groups.len(),
        perplexity,
        perplexity_geo_mean,
        used_codes,
        moves,
    })
}
