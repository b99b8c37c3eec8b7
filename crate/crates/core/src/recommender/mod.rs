//! Sequence-to-sequence recommender that generates the next item's SID.
//!
//! History items are expanded into `L` tokens each. Every token embedding is
//! the sum of code, position, depth and time-gap rows, enriched by a noisy
//! top-K mixture of experts over content, collaborative and code features.
//! A pre-LN Transformer encoder-decoder then emits the target SID one depth
//! at a time.

mod dsi;
mod embed;
mod infer;
mod loss;
mod train;
mod transformer;

pub use dsi::{compose_input, fuse, moe_forward, Dsi, MoeOutput};
pub use embed::{embed_token, embed_tokens, time_bucket, EmbeddingTables, TokenRef};
pub use infer::{encode_histories, recommend, DecoderScorer, EncodedHistory};
pub use loss::{gen_term, isr_forward, ssa_term, Batch, IsrBreakdown, IsrForward, Sample};
pub use train::{train_recommender, training_samples, validation_recall, RecEpochLog, TrainedRecommender};
pub use transformer::{DecoderLayer, EncoderLayer, MultiHeadAttention};

use rand::Rng;
use semrec_tape::nn::{Linear, LayerNorm};
use semrec_tape::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::quantizer::QuantizerModel;
use crate::sid::SemanticId;
use crate::trie::AtsConfig;

/// Which collaborative vector feeds the DSI projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollabInput {
    Raw,
    Purified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Per-head width; `None` means `ceil(d_model / heads)`.
    pub d_head: Option<usize>,
    pub ff_dim: usize,
    pub d_proj: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_moe: usize,
    pub eta_init: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_time_buckets: usize,
    pub collab_input: CollabInput,
    pub tau_min: f64,
    pub tau_max: f64,
    pub alpha: f64,
    /// `None` means `sqrt(n_items) / 2`.
    pub n_ref: Option<f64>,
    pub beam_width: usize,
    /// Validation users scored per epoch; 0 means all.
    pub valid_users: usize,
    /// Validate every this many epochs (and after the last).
    pub valid_every: usize,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 6,
            d_head: None,
            ff_dim: 1024,
            d_proj: 64,
            n_experts: 3,
            top_k: 2,
            d_moe: 256,
            eta_init: 0.1,
            gamma: 5e-4,
            lr: 5e-4,
            batch_size: 128,
            epochs: 300,
            n_time_buckets: 32,
            collab_input: CollabInput::Raw,
            tau_min: 0.5,
            tau_max: 1.0,
            alpha: 0.5,
            n_ref: None,
            beam_width: 30,
            valid_users: 0,
            valid_every: 1,
        }
    }
}

impl RecommenderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_head.unwrap_or(self.d_model.div_ceil(self.heads.max(1)))
    }

    pub fn ats(&self, n_items: usize) -> AtsConfig {
        AtsConfig {
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            alpha: self.alpha,
            n_ref: self.n_ref.unwrap_or((n_items as f64).sqrt() / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.head_dim() == 0 || self.ff_dim == 0 {
            return bad("d_model, heads, d_head and ff_dim must be positive");
        }
        if self.n_experts == 0 || self.top_k == 0 {
            return bad("n_experts and top_k must be positive");
        }
        if self.top_k > self.n_experts {
            return bad("top_k cannot exceed n_experts");
        }
        if self.gamma < 0.0 {
            return bad("gamma must be non-negative");
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return bad("batch_size and lr must be positive");
        }
        if self.n_time_buckets == 0 {
            return bad("n_time_buckets must be positive");
        }
        if self.valid_every == 0 {
            return bad("valid_every must be positive");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive");
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) || self.alpha < 0.0 {
            return bad("temperatures need 0 < tau_min <= tau_max and alpha >= 0");
        }
        if matches!(self.n_ref, Some(n) if n <= 0.0) {
            return bad("n_ref must be positive");
        }
        Ok(())
    }
}

/// Frozen per-item inputs derived from features and the trained quantizer.
#[derive(Clone, Debug)]
pub struct ItemContext<T> {
    pub sids: Vec<SemanticId>,
    pub content: Tensor<T>,
    pub collab: Tensor<T>,
    /// `codes[l]` row `i` is item `i`'s depth-`l` code vector.
    pub codes: Vec<Tensor<T>>,
    pub tag_ids: Vec<Vec<usize>>,
    pub tag_vocab_sizes: Vec<usize>,
    pub codebook_size: usize,
}

impl<T: Scalar> ItemContext<T> {
    pub fn new(
        features: &FeatureSet<T>,
        quantizer: &QuantizerModel<T>,
        sids: &[SemanticId],
        collab_input: CollabInput,
    ) -> Result<Self> {
        let n = features.n_items();
        if sids.len() != n {
            return Err(Error::dim("SID map size", n, sids.len()));
        }
        let depth = quantizer.codebooks.depth();
        let k = quantizer.codebooks.size();
        for s in sids {
            if s.len() != depth {
                return Err(Error::dim("SID length", depth, s.len()));
            }
            if let Some(&c) = s.codes().iter().find(|&&c| c as usize >= k) {
                return Err(Error::InvalidArgument(format!("code {c} outside codebook of size {k}")));
            }
        }
        let codes = (0..depth)
            .map(|l| {
                let table = &quantizer.codebooks.levels[l].codes;
                Tensor::from_fn(n, table.cols(), |i, j| table.get(sids[i].codes()[l] as usize, j))
            })
            .collect();
        let collab = match collab_input {
            CollabInput::Raw => features.collab.clone(),
            CollabInput::Purified => {
                let g = crate::quantizer::compute_trust_gate(quantizer, &features.collab)?;
                crate::quantizer::purify(&g, &features.collab)?
            }
        };
        Ok(Self {
            sids: sids.to_vec(),
            content: features.content.clone(),
            collab,
            codes,
            tag_ids: features.tag_ids.clone(),
            tag_vocab_sizes: features.tag_vocab_sizes(),
            codebook_size: k,
        })
    }

    pub fn n_items(&self) -> usize {
        self.sids.len()
    }

    pub fn depth(&self) -> usize {
        self.codes.len()
    }

    pub fn d_cb(&self) -> usize {
        self.codes[0].cols()
    }
}

/// Per-depth regression and tag heads on decoder states.
#[derive(Clone, Debug)]
pub struct SsaHeads {
    pub regressors: Vec<Linear>,
    pub classifiers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct RecommenderModel<T> {
    pub config: RecommenderConfig,
    pub depth: usize,
    pub codebook_size: usize,
    pub max_len: usize,
    pub params: ParamStore<T>,
    pub tables: EmbeddingTables,
    pub dsi: Dsi,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    /// `d_model x K` output table per depth.
    pub outputs: Vec<Linear>,
    pub ssa: SsaHeads,
}

impl<T: Scalar> RecommenderModel<T> {
    pub fn new<R: Rng + ?Sized>(
        config: &RecommenderConfig,
        items: &ItemContext<T>,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let depth = items.depth();
        let k = items.codebook_size;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let tables = EmbeddingTables::new(&mut params, depth, k, max_len, config.n_time_buckets, d, rng);
        let dsi = Dsi::new(
            &mut params,
            config,
            depth,
            items.content.cols(),
            items.collab.cols(),
            items.d_cb(),
            rng,
        );
        let dh = config.head_dim();
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("enc.{i}"), d, config.heads, dh, config.ff_dim, rng))
            .collect();
        let decoder = (0..config.layers)
            .map(|i| DecoderLayer::new(&mut params, &format!("dec.{i}"), d, config.heads, dh, config.ff_dim, rng))
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "enc.norm", d);
        let decoder_norm = LayerNorm::new(&mut params, "dec.norm", d);
        let outputs = (0..depth)
            .map(|l| Linear::new(&mut params, &format!("out.{l}"), d, k, false, rng))
            .collect();
        let ssa = SsaHeads {
            regressors: (0..depth)
                .map(|l| Linear::new(&mut params, &format!("ssa.reg.{l}"), d, items.d_cb(), true, rng))
                .collect(),
            classifiers: items
                .tag_vocab_sizes
                .iter()
                .enumerate()
                .map(|(l, &v)| Linear::new(&mut params, &format!("ssa.cls.{l}"), d, v, true, rng))
                .collect(),
        };
        Ok(Self {
            config: config.clone(),
            depth,
            codebook_size: k,
            max_len,
            params,
            tables,
            dsi,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            outputs,
            ssa,
        })
    }

    /// Begin-of-target token row.
    pub fn bos(&self) -> usize {
        self.depth * self.codebook_size
    }

    /// Padding token row.
    pub fn pad(&self) -> usize {
        self.depth * self.codebook_size + 1
    }

    /// Token row of code `c` at depth `l`.
    pub fn token_row(&self, depth: usize, code: u16) -> usize {
        depth * self.codebook_size + code as usize
    }
}
