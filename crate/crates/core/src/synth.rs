//! Planted-structure corpora for desk-scale runs.
//!
//! Items sit on the leaves of a category tree with `branching` children per
//! node and `depth` levels. Content vectors are the sum of the item's
//! per-level category centroids plus isotropic noise; collaborative vectors
//! are a low-rank category signal whose noise shrinks with popularity. User
//! sequences mostly stay within the current leaf category.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semrec_tape::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{k_core_filter, Interaction, InteractionCorpus};
use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureSet, RawFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    /// Children per category node.
    pub branching: usize,
    pub depth: usize,
    pub d_cont: usize,
    pub d_collab: usize,
    /// Isotropic content noise scale.
    pub noise: f64,
    /// Probability that the next item stays in the current leaf category.
    pub transition_bias: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub collab_rank: usize,
    /// Zipf exponent of item popularity.
    pub zipf: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_users: 2000,
            n_items: 500,
            branching: 4,
            depth: 3,
            d_cont: 128,
            d_collab: 32,
            noise: 0.05,
            transition_bias: 0.9,
            min_seq_len: 6,
            max_seq_len: 14,
            collab_rank: 8,
            zipf: 0.6,
        }
    }
}

/// Generated raw inputs plus the planted labels.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub raw: RawFeatures,
    /// `categories[item][l]`: category node index at depth `l` (global per depth).
    pub categories: HashMap<String, Vec<usize>>,
}

fn tag_name(path: &[usize]) -> String {
    let parts: Vec<String> = path.iter().map(|c| c.to_string()).collect();
    format!("c{}", parts.join("-"))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect()
}

pub fn synth_raw(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.depth == 0 || cfg.branching == 0 {
        return Err(Error::InvalidArgument("depth and branching must be positive".into()));
    }
    let n_leaves = cfg
        .branching
        .checked_pow(cfg.depth as u32)
        .ok_or_else(|| Error::InvalidArgument("category tree too large".into()))?;
    if cfg.n_items < n_leaves {
        return Err(Error::InvalidArgument(format!(
            "{} items cannot populate {n_leaves} leaf categories",
            cfg.n_items
        )));
    }
    if cfg.min_seq_len < 5 || cfg.max_seq_len < cfg.min_seq_len {
        return Err(Error::InvalidArgument(
            "sequence lengths must satisfy 5 <= min <= max".into(),
        ));
    }
    if cfg.n_users == 0 || !(0.0..=1.0).contains(&cfg.transition_bias) {
        return Err(Error::InvalidArgument("need users and a bias in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Centroids for every node at every depth; node index at depth l is the
    // base-`branching` number formed by the path prefix.
    let level_scale = |l: usize| 0.6f64.powi(l as i32);
    let unit = 1.0 / (cfg.d_cont as f64).sqrt();
    let centroids: Vec<Vec<Vec<f64>>> = (0..cfg.depth)
        .map(|l| {
            let nodes = cfg.branching.pow(l as u32 + 1);
            (0..nodes).map(|_| gaussian_vec(&mut rng, cfg.d_cont, unit * level_scale(l))).collect()
        })
        .collect();
    let collab_factors: Vec<Vec<Vec<f64>>> = (0..cfg.depth)
        .map(|l| {
            let nodes = cfg.branching.pow(l as u32 + 1);
            (0..nodes).map(|_| gaussian_vec(&mut rng, cfg.collab_rank, level_scale(l))).collect()
        })
        .collect();
    let projection: Vec<Vec<f64>> = (0..cfg.collab_rank)
        .map(|_| gaussian_vec(&mut rng, cfg.d_collab, 1.0 / (cfg.collab_rank as f64).sqrt()))
        .collect();

    // Every leaf gets at least one item; the rest are spread at random.
    let mut leaf_of: Vec<usize> = (0..cfg.n_items).map(|i| i % n_leaves).collect();
    for l in leaf_of[n_leaves..].iter_mut() {
        *l = rng.random_range(0..n_leaves);
    }
    leaf_of.shuffle(&mut rng);

    let mut rank: Vec<usize> = (0..cfg.n_items).collect();
    rank.shuffle(&mut rng);
    let weights: Vec<f64> = rank.iter().map(|&r| (1.0 / (r as f64 + 1.0)).powf(cfg.zipf)).collect();
    let max_w = weights.iter().copied().fold(0.0, f64::max);

    let item_names: Vec<String> = (0..cfg.n_items).map(|i| format!("i{i:05}")).collect();
    let path_of = |leaf: usize| -> Vec<usize> {
        // digits of the leaf index, most significant first
        let mut digits = vec![0; cfg.depth];
        let mut x = leaf;
        for d in (0..cfg.depth).rev() {
            digits[d] = x % cfg.branching;
            x /= cfg.branching;
        }
        digits
    };
    let node_at = |digits: &[usize], l: usize| digits[..=l].iter().fold(0, |acc, &d| acc * cfg.branching + d);

    let mut content = Tensor::<f32>::zeros(cfg.n_items, cfg.d_cont);
    let mut collab = Tensor::<f32>::zeros(cfg.n_items, cfg.d_collab);
    let mut tags = HashMap::new();
    let mut categories = HashMap::new();
    for i in 0..cfg.n_items {
        let digits = path_of(leaf_of[i]);
        let nodes: Vec<usize> = (0..cfg.depth).map(|l| node_at(&digits, l)).collect();
        let noise = gaussian_vec(&mut rng, cfg.d_cont, cfg.noise * unit);
        for c in 0..cfg.d_cont {
            let v: f64 = (0..cfg.depth).map(|l| centroids[l][nodes[l]][c]).sum::<f64>() + noise[c];
            content.set(i, c, v as f32);
        }
        let mut latent = vec![0.0; cfg.collab_rank];
        for l in 0..cfg.depth {
            for (a, &f) in latent.iter_mut().zip(&collab_factors[l][nodes[l]]) {
                *a += f;
            }
        }
        // rarely seen items get noisier collaborative vectors
        let reliability = weights[i] / max_w;
        let collab_noise = gaussian_vec(&mut rng, cfg.d_collab, 0.1 + 0.5 * (1.0 - reliability));
        for c in 0..cfg.d_collab {
            let v: f64 = latent.iter().zip(&projection).map(|(&a, p)| a * p[c]).sum::<f64>() + collab_noise[c];
            collab.set(i, c, v as f32);
        }
        tags.insert(
            item_names[i].clone(),
            (0..cfg.depth).map(|l| tag_name(&digits[..=l])).collect(),
        );
        categories.insert(item_names[i].clone(), nodes);
    }

    // Tag text embeddings: the mean content of the category node.
    let mut tag_names = Vec::new();
    let mut tag_rows = Vec::new();
    for l in 0..cfg.depth {
        for node in 0..cfg.branching.pow(l as u32 + 1) {
            let mut digits = vec![0; l + 1];
            let mut x = node;
            for d in (0..=l).rev() {
                digits[d] = x % cfg.branching;
                x /= cfg.branching;
            }
            let row: Vec<f32> = (0..cfg.d_cont)
                .map(|c| {
                    (0..=l)
                        .map(|j| centroids[j][node_at(&digits, j)][c])
                        .sum::<f64>() as f32
                })
                .collect();
            tag_names.push(tag_name(&digits));
            tag_rows.push(row);
        }
    }

    let mut by_leaf: Vec<Vec<usize>> = vec![Vec::new(); n_leaves];
    for (i, &l) in leaf_of.iter().enumerate() {
        by_leaf[l].push(i);
    }
    let global = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let leaf_dists: Vec<Option<WeightedIndex<f64>>> = by_leaf
        .iter()
        .map(|members| WeightedIndex::new(members.iter().map(|&i| weights[i])).ok())
        .collect();

    let mut interactions = Vec::new();
    for u in 0..cfg.n_users {
        let user = format!("u{u:06}");
        let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let mut ts: u64 = 1_500_000_000 + rng.random_range(0..10_000_000u64);
        let mut current = global.sample(&mut rng);
        for step in 0..len {
            if step > 0 {
                let leaf = leaf_of[current];
                let members = &by_leaf[leaf];
                current = if rng.random::<f64>() < cfg.transition_bias {
                    let dist = leaf_dists[leaf].as_ref().expect("leaf has items");
                    if members.len() > 1 {
                        loop {
                            let next = members[dist.sample(&mut rng)];
                            if next != current {
                                break next;
                            }
                        }
                    } else {
                        current
                    }
                } else {
                    global.sample(&mut rng)
                };
                // heavy-tailed gaps: minutes to weeks
                let gap = (60.0 * (rng.random::<f64>() * 10.0).exp2()) as u64;
                ts += gap.max(1);
            }
            interactions.push(Interaction {
                user: user.clone(),
                item: item_names[current].clone(),
                timestamp: ts,
            });
        }
    }

    Ok(SynthData {
        interactions,
        raw: RawFeatures {
            index: item_names,
            content,
            collab,
            tags,
            tag_text: Some((tag_names, Tensor::from_rows(&tag_rows))),
        },
        categories,
    })
}

/// Generates, 5-core filters and assembles features for a planted corpus.
pub fn synth_generate<T: Scalar>(
    cfg: &SynthConfig,
    max_len: usize,
) -> Result<(InteractionCorpus, FeatureSet<T>, SynthData)> {
    let data = synth_raw(cfg)?;
    let corpus = k_core_filter(&data.interactions, 5, max_len)?;
    let features = assemble_features(&data.raw, &corpus, cfg.depth, Some(cfg.d_cont), Some(cfg.d_collab))?;
    Ok((corpus, features, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 200,
            n_items: 60,
            branching: 2,
            depth: 3,
            d_cont: 16,
            d_collab: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = synth_raw(&small()).unwrap();
        let b = synth_raw(&small()).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.raw.content, b.raw.content);
        assert_eq!(a.raw.collab, b.raw.collab);
    }

    #[test]
    fn zero_noise_gives_identical_content_within_a_leaf() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let d = synth_raw(&cfg).unwrap();
        let mut by_leaf: HashMap<usize, usize> = HashMap::new();
        for (r, name) in d.raw.index.iter().enumerate() {
            let leaf = *d.categories[name].last().unwrap();
            match by_leaf.get(&leaf) {
                Some(&first) => assert_eq!(d.raw.content.row(first), d.raw.content.row(r)),
                None => {
                    by_leaf.insert(leaf, r);
                }
            }
        }
    }

    #[test]
    fn full_bias_keeps_every_transition_inside_the_leaf() {
        let cfg = SynthConfig {
            transition_bias: 1.0,
            ..small()
        };
        let (corpus, _f, data) = synth_generate::<f32>(&cfg, 20).unwrap();
        let mut pairs = 0;
        for u in 0..corpus.n_users() {
            for w in corpus.train(u).windows(2) {
                let a = data.categories[&corpus.items[w[0].item]].last().unwrap();
                let b = data.categories[&corpus.items[w[1].item]].last().unwrap();
                assert_eq!(a, b);
                pairs += 1;
            }
        }
        assert!(pairs > 0);
    }

    #[test]
    fn infeasible_sizes_are_rejected() {
        let cfg = SynthConfig {
            n_items: 3,
            ..small()
        };
        assert!(synth_raw(&cfg).is_err());
    }
}
