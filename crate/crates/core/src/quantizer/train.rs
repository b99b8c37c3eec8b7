use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semrec_tape::{Adam, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::codebook::{kmeans_pp, Codebook, CodebookStack, QuantizationResult};
use super::loss::{psq_forward, LossBreakdown, QuantMode};
use super::{QuantizerConfig, QuantizerModel};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::sid::SemanticId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size-weighted means over the epoch.
    pub loss: LossBreakdown,
}

pub struct TrainedQuantizer<T> {
    pub model: QuantizerModel<T>,
    /// Final quantization of every catalog item.
    pub quant: Vec<QuantizationResult<T>>,
    /// Pre-deduplication SIDs, `sids[i]` for item `i`.
    pub sids: Vec<SemanticId>,
    pub log: Vec<EpochLog>,
}

/// Seeds every level with k-means++ on the encoder outputs (level 1) and on
/// the residuals left by the levels above.
pub fn seed_codebooks<T: Scalar>(model: &mut QuantizerModel<T>, features: &FeatureSet<T>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut residual = model.encode_items(&features.content, &features.collab)?;
    let mut levels = Vec::with_capacity(model.config.levels);
    for _ in 0..model.config.levels {
        let codes = kmeans_pp(&residual, model.config.codebook_size, rng);
        let cb = Codebook::from_codes(codes);
        for i in 0..residual.rows() {
            let (k, _) = cb.nearest(residual.row(i));
            let code = cb.codes.row(k).to_vec();
            for (r, c) in residual.row_mut(i).iter_mut().zip(code) {
                *r = *r - c;
            }
        }
        levels.push(cb);
    }
    model.codebooks = CodebookStack::new(levels)?;
    Ok(())
}

/// Trains gate, encoder, decoders, anchors and classifiers with Adam and the
/// codebooks with EMA, then quantizes the whole catalog.
pub fn train_quantizer<T: Scalar>(
    features: &FeatureSet<T>,
    config: &QuantizerConfig,
    seed: u64,
) -> Result<TrainedQuantizer<T>> {
    if features.n_items() == 0 {
        return Err(Error::InvalidArgument("no items to quantize".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = QuantizerModel::for_features(config, features, &mut rng)?;
    seed_codebooks(&mut model, features, &mut rng)?;
    let mut adam = Adam::new(config.lr);
    let decay = T::of(config.ema_decay);
    let eps = T::of(config.ema_eps);
    let mut order: Vec<usize> = (0..features.n_items()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (grads, quant, breakdown) = {
                let mut tape = Tape::new(&model.params);
                let fwd = psq_forward(&mut tape, &model, features, batch, QuantMode::Fresh)?;
                if let Some(term) = fwd.breakdown.first_non_finite() {
                    return Err(Error::NonFinite {
                        term: term.to_string(),
                        epoch,
                        step,
                    });
                }
                (tape.backward(fwd.total), fwd.quant, fwd.breakdown)
            };
            adam.step(&mut model.params, &grads);
            for (l, level) in model.codebooks.levels.iter_mut().enumerate() {
                let assignments: Vec<usize> = quant.iter().map(|q| q.indices[l]).collect();
                let inputs = Tensor::from_rows(&quant.iter().map(|q| q.residuals[l].clone()).collect::<Vec<_>>());
                level.ema_update(&assignments, &inputs, decay, eps);
            }
            let w = batch.len() as f64;
            sum.dhr += breakdown.dhr * w;
            sum.commit += breakdown.commit * w;
            sum.acd += breakdown.acd * w;
            sum.hsa += breakdown.hsa * w;
            sum.total += breakdown.total * w;
        }
        let n = features.n_items() as f64;
        let loss = LossBreakdown {
            dhr: sum.dhr / n,
            commit: sum.commit / n,
            acd: sum.acd / n,
            hsa: sum.hsa / n,
            total: sum.total / n,
        };
        log::debug!(
            "quantizer epoch {epoch}: total {:.5} dhr {:.5} commit {:.5} acd {:.5} hsa {:.5}",
            loss.total,
            loss.dhr,
            loss.commit,
            loss.acd,
            loss.hsa
        );
        log.push(EpochLog { epoch, loss });
    }

    let quant = model.quantize_items(&features.content, &features.collab)?;
    let sids = quant.iter().map(|q| q.sid()).collect();
    Ok(TrainedQuantizer {
        model,
        quant,
        sids,
        log,
    })
}
