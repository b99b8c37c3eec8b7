//! Prefix trie over assigned SIDs, adaptive temperature and trie-constrained
//! beam search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sid::SemanticId;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Node {
    children: BTreeMap<u16, usize>,
    item: Option<usize>,
}

/// Immutable prefix tree; leaves carry catalog item indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidTrie {
    depth: usize,
    nodes: Vec<Node>,
    n_items: usize,
}

/// Builds the trie for `sids[i]` naming item `i`.
pub fn build_trie(sids: &[SemanticId]) -> Result<SidTrie> {
    let depth = sids.first().map(SemanticId::len).unwrap_or(0);
    let mut nodes = vec![Node::default()];
    for (item, sid) in sids.iter().enumerate() {
        if sid.len() != depth {
            return Err(Error::dim("SID length", depth, sid.len()));
        }
        let mut at = 0;
        for &c in sid.codes() {
            at = match nodes[at].children.get(&c) {
                Some(&next) => next,
                None => {
                    nodes.push(Node::default());
                    let next = nodes.len() - 1;
                    nodes[at].children.insert(c, next);
                    next
                }
            };
        }
        if nodes[at].item.is_some() {
            return Err(Error::DuplicateSid(sid.codes().to_vec()));
        }
        nodes[at].item = Some(item);
    }
    Ok(SidTrie {
        depth,
        nodes,
        n_items: sids.len(),
    })
}

impl SidTrie {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    fn node(&self, prefix: &[u16]) -> Option<usize> {
        let mut at = 0;
        for c in prefix {
            at = *self.nodes[at].children.get(c)?;
        }
        Some(at)
    }

    /// Child codes below `prefix`, ascending. The prefix must be shorter than the depth.
    pub fn children(&self, prefix: &[u16]) -> Result<Vec<u16>> {
        if prefix.len() >= self.depth {
            return Err(Error::InvalidPrefix(prefix.to_vec()));
        }
        let node = self.node(prefix).ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        Ok(self.nodes[node].children.keys().copied().collect())
    }

    /// Number of valid next codes after `prefix`.
    pub fn branching_factor(&self, prefix: &[u16]) -> Result<usize> {
        if prefix.len() >= self.depth {
            return Err(Error::InvalidPrefix(prefix.to_vec()));
        }
        let node = self.node(prefix).ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        Ok(self.nodes[node].children.len())
    }

    pub fn lookup(&self, sid: &[u16]) -> Option<usize> {
        if sid.len() != self.depth {
            return None;
        }
        self.nodes[self.node(sid)?].item
    }
}

/// Temperature schedule `tau(N) = tau_min + (tau_max - tau_min) * exp(-alpha * N / n_ref)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtsConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub alpha: f64,
    pub n_ref: f64,
}

impl AtsConfig {
    /// Defaults with `n_ref = sqrt(n_items) / 2`.
    pub fn for_catalog(n_items: usize) -> Self {
        Self {
            tau_min: 0.5,
            tau_max: 1.0,
            alpha: 0.5,
            n_ref: (n_items as f64).sqrt() / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(Error::Config("temperatures need 0 < tau_min <= tau_max".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(self.n_ref > 0.0) {
            return Err(Error::Config("n_ref must be positive".into()));
        }
        Ok(())
    }
}

pub fn adaptive_temperature(cfg: &AtsConfig, n_children: usize) -> f64 {
    cfg.tau_min + (cfg.tau_max - cfg.tau_min) * (-cfg.alpha * n_children as f64 / cfg.n_ref).exp()
}

/// Produces next-code logits for a batch of equal-length prefixes.
pub trait PrefixScorer {
    /// One row of logits over the full depth-`depth` vocabulary per prefix.
    fn score(&mut self, depth: usize, prefixes: &[Vec<u16>]) -> Result<Vec<Vec<f64>>>;
}

impl<F> PrefixScorer for F
where
    F: FnMut(usize, &[Vec<u16>]) -> Result<Vec<Vec<f64>>>,
{
    fn score(&mut self, depth: usize, prefixes: &[Vec<u16>]) -> Result<Vec<Vec<f64>>> {
        self(depth, prefixes)
    }
}

/// Log-softmax of `logits[c] / tau` restricted to `valid` codes.
pub fn restricted_log_softmax(logits: &[f64], valid: &[u16], tau: f64) -> Result<Vec<f64>> {
    let mut scaled = Vec::with_capacity(valid.len());
    for &c in valid {
        let x = logits
            .get(c as usize)
            .ok_or_else(|| Error::dim("scorer vocabulary", c as usize + 1, logits.len()))?;
        scaled.push(x / tau);
    }
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scaled.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|x| x - lse).collect())
}

/// Beam search that expands only trie children. Scores are summed restricted
/// log-probabilities; returns up to `top_n` `(item, score)` pairs, best first,
/// ties broken by ascending SID.
pub fn constrained_beam_search<S: PrefixScorer + ?Sized>(
    scorer: &mut S,
    trie: &SidTrie,
    ats: &AtsConfig,
    beam_width: usize,
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    if beam_width < 1 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if top_n > beam_width {
        return Err(Error::InvalidArgument(format!(
            "top_n {top_n} exceeds beam width {beam_width}"
        )));
    }
    let mut beams: Vec<(Vec<u16>, f64)> = vec![(Vec::new(), 0.0)];
    for depth in 0..trie.depth() {
        let prefixes: Vec<Vec<u16>> = beams.iter().map(|b| b.0.clone()).collect();
        let logits = scorer.score(depth, &prefixes)?;
        if logits.len() != prefixes.len() {
            return Err(Error::dim("scorer rows", prefixes.len(), logits.len()));
        }
        let mut next = Vec::new();
        for ((prefix, score), row) in beams.iter().zip(&logits) {
            let valid = trie.children(prefix)?;
            let tau = adaptive_temperature(ats, valid.len());
            let lp = restricted_log_softmax(row, &valid, tau)?;
            for (&c, l) in valid.iter().zip(lp) {
                let mut p = prefix.clone();
                p.push(c);
                next.push((p, score + l));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(beam_width);
        beams = next;
    }
    Ok(beams
        .into_iter()
        .take(top_n)
        .map(|(sid, s)| (trie.lookup(&sid).expect("complete trie path has an item"), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SidTrie {
        build_trie(&[
            SemanticId::new(vec![0, 1]),
            SemanticId::new(vec![0, 2]),
            SemanticId::new(vec![1, 3]),
        ])
        .unwrap()
    }

    #[test]
    fn branching_factors() {
        let t = small();
        assert_eq!(t.branching_factor(&[]).unwrap(), 2);
        assert_eq!(t.branching_factor(&[0]).unwrap(), 2);
        assert_eq!(t.branching_factor(&[1]).unwrap(), 1);
        assert!(t.branching_factor(&[7]).is_err());
        assert!(t.branching_factor(&[0, 1]).is_err());
    }

    #[test]
    fn lookup_and_duplicates() {
        let t = small();
        assert_eq!(t.lookup(&[1, 3]), Some(2));
        assert_eq!(t.lookup(&[1, 2]), None);
        let dup = build_trie(&[SemanticId::new(vec![4, 4]), SemanticId::new(vec![4, 4])]);
        assert!(matches!(dup, Err(Error::DuplicateSid(_))));
    }

    #[test]
    fn temperature_closed_forms() {
        let cfg = AtsConfig {
            n_ref: 10.0,
            ..AtsConfig::for_catalog(1)
        };
        assert_eq!(adaptive_temperature(&cfg, 0), 1.0);
        assert!((adaptive_temperature(&cfg, 10) - 0.803_265_329_856_316_7).abs() < 1e-12);
        assert!((adaptive_temperature(&cfg, 100_000) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_scorer_ranks_lexicographically() {
        let t = small();
        let mut flat = |_: usize, p: &[Vec<u16>]| Ok(vec![vec![0.0; 4]; p.len()]);
        let cfg = AtsConfig::for_catalog(3);
        let out = constrained_beam_search(&mut flat, &t, &cfg, 3, 3).unwrap();
        // (1,3) has one fewer sibling, so its depth-2 probability is 1.
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 0, 1]);
    }

    #[test]
    fn uniform_scorer_on_balanced_trie_is_lexicographic() {
        let sids: Vec<SemanticId> = [[1, 1], [0, 1], [1, 0], [0, 0]].iter().map(|c| SemanticId::new(c.to_vec())).collect();
        let t = build_trie(&sids).unwrap();
        let mut flat = |_: usize, p: &[Vec<u16>]| Ok(vec![vec![0.3; 2]; p.len()]);
        let out = constrained_beam_search(&mut flat, &t, &AtsConfig::for_catalog(4), 4, 4).unwrap();
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 1, 2, 0]);
    }

    #[test]
    fn zero_width_is_rejected() {
        let mut flat = |_: usize, p: &[Vec<u16>]| Ok(vec![vec![0.0; 4]; p.len()]);
        assert!(constrained_beam_search(&mut flat, &small(), &AtsConfig::for_catalog(3), 0, 0).is_err());
    }
}
