mod common;

use semrec_core::corpus::Split;
use semrec_core::diagnostics::detect_collisions;
use semrec_core::eval::{evaluate, most_popular_rankings, Metrics};
use semrec_core::quantizer::{train_quantizer, QuantizerConfig};
use semrec_core::recommender::{recommend, train_recommender, CollabInput, ItemContext, RecommenderConfig};
use semrec_core::sid::SemanticId;
use semrec_core::synth::{synth_generate, SynthConfig};
use semrec_core::trie::build_trie;

fn small_synth() -> SynthConfig {
    SynthConfig {
        n_users: 250,
        n_items: 64,
        branching: 2,
        depth: 2,
        d_cont: 16,
        d_collab: 8,
        ..SynthConfig::default()
    }
}

fn quantizer_config() -> QuantizerConfig {
    QuantizerConfig {
        levels: 2,
        codebook_size: 8,
        code_dim: 6,
        hidden: vec![16],
        epochs: 12,
        batch_size: 32,
        ..QuantizerConfig::default()
    }
}

#[test]
fn quantizer_training_is_finite_and_reproducible() {
    let (_, features, _) = synth_generate::<f64>(&small_synth(), 20).unwrap();
    let a = train_quantizer(&features, &quantizer_config(), 3).unwrap();
    let b = train_quantizer(&features, &quantizer_config(), 3).unwrap();
    assert_eq!(a.sids, b.sids);
    assert_eq!(a.log.len(), 12);
    assert!(a.log.iter().all(|e| e.loss.first_non_finite().is_none()));
    let first = a.log.first().unwrap().loss.dhr;
    let last = a.log.last().unwrap().loss.dhr;
    assert!(last < first, "reconstruction loss {first} -> {last}");
    assert!(a.sids.iter().all(|s| s.len() == 2 && s.codes().iter().all(|&c| c < 8)));
}

#[test]
fn recommender_beats_popularity_on_planted_corpus() {
    let (corpus, features, _) = synth_generate::<f64>(&small_synth(), 20).unwrap();
    let n = corpus.n_items();
    let q = train_quantizer(&features, &quantizer_config(), 1).unwrap();
    // Unique SIDs by construction so the test does not depend on dedup.
    let sids: Vec<SemanticId> = (0..n as u16).map(|i| SemanticId::new(vec![i / 8, i % 8])).collect();
    assert_eq!(detect_collisions(&sids).unwrap().final_rate, 0.0);
    let ctx = ItemContext::new(&features, &q.model, &sids, CollabInput::Raw).unwrap();
    let trie = build_trie(&sids).unwrap();
    let cfg = RecommenderConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        d_proj: 8,
        d_moe: 16,
        epochs: 12,
        batch_size: 64,
        lr: 3e-3,
        beam_width: 20,
        valid_users: 50,
        ..RecommenderConfig::default()
    };
    let trained = train_recommender(&corpus, &ctx, &trie, &cfg, 5).unwrap();
    assert_eq!(trained.log.len(), 12);
    assert!(trained.log.last().unwrap().loss.total < trained.log[0].loss.total);

    let histories: Vec<&[semrec_core::corpus::Event]> = (0..5).map(|u| corpus.train(u)).collect();
    for list in recommend(&trained.model, &ctx, &trie, &histories, 10).unwrap() {
        assert_eq!(list.len(), 10);
        let mut items: Vec<usize> = list.iter().map(|p| p.0).collect();
        items.sort_unstable();
        items.dedup();
        assert_eq!(items.len(), 10);
        assert!(items.iter().all(|&i| i < n));
    }

    let (report, _) = evaluate(&trained.model, &ctx, &trie, &corpus, Split::Test).unwrap();
    let pop = Metrics::from_rankings(&most_popular_rankings(&corpus, Split::Test).unwrap());
    let (ours, theirs) = (report.overall.recall_10.unwrap(), pop.recall_10.unwrap());
    assert!(ours > theirs, "recall@10 {ours} vs most-popular {theirs}, log {:?}", trained.log);
}
