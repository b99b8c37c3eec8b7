#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semrec_core::corpus::Event;
use semrec_core::features::FeatureSet;
use semrec_core::quantizer::{seed_codebooks, QuantizerConfig, QuantizerModel};
use semrec_core::recommender::{CollabInput, ItemContext, RecommenderConfig, RecommenderModel, Sample};
use semrec_core::sid::SemanticId;
use semrec_core::trie::{build_trie, SidTrie};
use semrec_tape::gradcheck::{numeric_param_grad, relative_error};
use semrec_tape::{Gradients, ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Eight items, two tag levels (2 and 4 tags), `d_cont = 6`, `d_collab = 4`.
pub fn micro_features(seed: u64) -> FeatureSet<f64> {
    let mut r = rng(seed);
    let n = 8;
    let tags: Vec<Vec<String>> = (0..n).map(|i| vec![format!("a{}", i % 2), format!("b{}", i % 4)]).collect();
    let tag_vocab = vec![
        vec!["a0".to_string(), "a1".to_string()],
        (0..4).map(|k| format!("b{k}")).collect::<Vec<_>>(),
    ];
    let tag_ids = (0..n).map(|i| vec![i % 2, i % 4]).collect();
    let popularity_raw: Vec<u64> = (0..n).map(|_| r.random_range(1..20)).collect();
    let popularity = semrec_core::corpus::min_max_normalize(&popularity_raw);
    FeatureSet {
        content: Tensor::randn(n, 6, 1.0, &mut r),
        collab: Tensor::randn(n, 4, 1.0, &mut r),
        tags,
        tag_ids,
        tag_vocab,
        tag_text: None,
        popularity_raw,
        popularity,
    }
}

pub fn micro_quantizer_config() -> QuantizerConfig {
    QuantizerConfig {
        levels: 2,
        codebook_size: 4,
        code_dim: 3,
        hidden: vec![5],
        ..QuantizerConfig::default()
    }
}

pub fn micro_quantizer(features: &FeatureSet<f64>, seed: u64) -> QuantizerModel<f64> {
    let mut r = rng(seed);
    let mut m = QuantizerModel::for_features(&micro_quantizer_config(), features, &mut r).unwrap();
    seed_codebooks(&mut m, features, &mut r).unwrap();
    m
}

pub fn micro_recommender_config() -> RecommenderConfig {
    RecommenderConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        d_proj: 4,
        n_experts: 3,
        top_k: 2,
        d_moe: 8,
        gamma: 0.5,
        batch_size: 4,
        ..RecommenderConfig::default()
    }
}

pub struct MicroRec {
    pub ctx: ItemContext<f64>,
    pub trie: SidTrie,
    pub model: RecommenderModel<f64>,
    pub samples: Vec<Sample>,
}

/// Unique SIDs `[i / 4, i % 4]` over the micro features and a one-layer model.
pub fn micro_recommender(seed: u64) -> MicroRec {
    let features = micro_features(seed);
    let quantizer = micro_quantizer(&features, seed + 1);
    let sids: Vec<SemanticId> = (0..8u16).map(|i| SemanticId::new(vec![i / 4, i % 4])).collect();
    let ctx = ItemContext::new(&features, &quantizer, &sids, CollabInput::Raw).unwrap();
    let trie = build_trie(&sids).unwrap();
    let mut r = rng(seed + 2);
    let model = RecommenderModel::new(&micro_recommender_config(), &ctx, 6, &mut r).unwrap();
    let samples = (0..3)
        .map(|s| {
            let len = 1 + s;
            let mut t = 0u64;
            let history = (0..len)
                .map(|_| {
                    t += r.random_range(1..5000);
                    Event {
                        item: r.random_range(0..8),
                        timestamp: t,
                    }
                })
                .collect();
            Sample {
                history,
                target: r.random_range(0..8),
            }
        })
        .collect();
    MicroRec {
        ctx,
        trie,
        model,
        samples,
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every trainable parameter; tensors whose gradients both fall below
/// `1e-7` in norm are compared in absolute terms.
pub fn param_grad_error(
    store: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let analytic: std::collections::HashMap<_, _> = grads.param_grads().map(|(id, g)| (id, g.clone())).collect();
    let ids: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let (r, c) = store.get(id).shape();
        let a = analytic.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(r, c));
        let n = numeric_param_grad(store, id, 1e-6, &mut f);
        worst = worst.max(relative_error(&a, &n, 1e-7));
    }
    worst
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`)
/// by the shortest-augmenting-path Hungarian method. Returns the column of
/// each row and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let m = cost.first().map(Vec::len).unwrap_or(0);
    assert!(n <= m, "more rows than columns");
    let inf = f64::INFINITY;
    // 1-based potentials and matching, column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assign, total)
}

/// Cheapest assignment by trying every injective row-to-column map.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let m = cost.first().map(Vec::len).unwrap_or(0);
    go(cost, 0, &mut vec![false; m])
}
