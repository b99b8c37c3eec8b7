use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semrec_tape::{Adam, Scalar, Tape};
use serde::{Deserialize, Serialize};

use super::infer::recommend;
use super::loss::{isr_forward, IsrBreakdown, Sample};
use super::{ItemContext, RecommenderConfig, RecommenderModel};
use crate::corpus::{Event, InteractionCorpus, Split};
use crate::error::{Error, Result};
use crate::trie::SidTrie;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecEpochLog {
    pub epoch: usize,
    /// Sample-weighted means over the epoch.
    pub loss: IsrBreakdown,
    /// Validation Recall@10, when evaluated this epoch.
    pub valid_recall: Option<f64>,
    /// Token rows routed to each expert over the epoch.
    pub expert_rows: Vec<usize>,
}

pub struct TrainedRecommender<T> {
    /// Parameters from the epoch with the best validation recall.
    pub model: RecommenderModel<T>,
    pub best_epoch: usize,
    pub log: Vec<RecEpochLog>,
}

/// Every `(prefix -> next item)` pair inside each user's training sequence,
/// with histories cut to the most recent `max_len` events.
pub fn training_samples(corpus: &InteractionCorpus) -> Vec<Sample> {
    let mut out = Vec::new();
    for u in 0..corpus.n_users() {
        let seq = corpus.train(u);
        for j in 1..seq.len() {
            let start = j.saturating_sub(corpus.max_len);
            out.push(Sample {
                history: seq[start..j].to_vec(),
                target: seq[j].item,
            });
        }
    }
    out
}

/// Hit rate of the validation target in the top 10 over `users`.
pub fn validation_recall<T: Scalar>(
    model: &RecommenderModel<T>,
    ctx: &ItemContext<T>,
    trie: &SidTrie,
    corpus: &InteractionCorpus,
    users: &[usize],
) -> Result<f64> {
    if users.is_empty() {
        return Ok(0.0);
    }
    let pairs: Vec<(&[Event], Event)> = users.iter().map(|&u| corpus.history_and_target(u, Split::Valid)).collect();
    let histories: Vec<&[Event]> = pairs.iter().map(|p| p.0).collect();
    let top_n = 10;
    let ranked = recommend(model, ctx, trie, &histories, top_n)?;
    let hits = ranked
        .iter()
        .zip(&pairs)
        .filter(|(r, p)| r.iter().any(|&(i, _)| i == p.1.item))
        .count();
    Ok(hits as f64 / users.len() as f64)
}

pub fn train_recommender<T: Scalar>(
    corpus: &InteractionCorpus,
    ctx: &ItemContext<T>,
    trie: &SidTrie,
    config: &RecommenderConfig,
    seed: u64,
) -> Result<TrainedRecommender<T>> {
    config.validate()?;
    if ctx.n_items() != corpus.n_items() {
        return Err(Error::dim("item context size", corpus.n_items(), ctx.n_items()));
    }
    let mut samples = training_samples(corpus);
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training pairs in the corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RecommenderModel::new(config, ctx, corpus.max_len, &mut rng)?;
    let ats = config.ats(ctx.n_items());
    let mut adam = Adam::new(config.lr);
    let mut valid_users: Vec<usize> = (0..corpus.n_users()).collect();
    if config.valid_users > 0 && config.valid_users < valid_users.len() {
        valid_users.shuffle(&mut rng);
        valid_users.truncate(config.valid_users);
        valid_users.sort_unstable();
    }
    let mut best: Option<(f64, usize, RecommenderModel<T>)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        samples.shuffle(&mut rng);
        let mut sum = IsrBreakdown::default();
        let mut expert_rows = vec![0; config.n_experts];
        for (step, batch) in samples.chunks(config.batch_size).enumerate() {
            let (grads, breakdown, rows) = {
                let mut tape = Tape::new(&model.params);
                let fwd = isr_forward(&mut tape, &model, ctx, trie, &ats, batch, Some(&mut rng))?;
                for (term, v) in [("gen", fwd.breakdown.gen), ("ssa", fwd.breakdown.ssa), ("total", fwd.breakdown.total)] {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            term: term.to_string(),
                            epoch,
                            step,
                        });
                    }
                }
                (tape.backward(fwd.total), fwd.breakdown, fwd.expert_rows)
            };
            adam.step(&mut model.params, &grads);
            let w = batch.len() as f64;
            sum.gen += breakdown.gen * w;
            sum.ssa += breakdown.ssa * w;
            sum.total += breakdown.total * w;
            for (a, r) in expert_rows.iter_mut().zip(rows) {
                *a += r;
            }
        }
        let n = samples.len() as f64;
        let loss = IsrBreakdown {
            gen: sum.gen / n,
            ssa: sum.ssa / n,
            total: sum.total / n,
        };
        let last = epoch + 1 == config.epochs;
        let valid_recall = if last || (epoch + 1) % config.valid_every == 0 {
            Some(validation_recall(&model, ctx, trie, corpus, &valid_users)?)
        } else {
            None
        };
        log::debug!(
            "recommender epoch {epoch}: total {:.5} gen {:.5} ssa {:.5} valid {:?}",
            loss.total,
            loss.gen,
            loss.ssa,
            valid_recall
        );
        if let Some(r) = valid_recall {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, model.clone()));
            }
        }
        log.push(RecEpochLog {
            epoch,
            loss,
            valid_recall,
            expert_rows,
        });
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs.saturating_sub(1)),
    };
    Ok(TrainedRecommender { model, best_epoch, log })
}
