//! Gated residual quantizer that turns item features into semantic IDs.
//!
//! A trust gate attenuates the collaborative vector, an MLP encoder maps
//! content and gated collaborative features to a latent `z`, and `L`
//! EMA-updated codebooks quantize `z` residually. Training combines
//! dual-decoder reconstruction, commitment, gate supervision and tag
//! anchoring of every codebook level.

mod codebook;
mod loss;
mod ops;
mod train;

pub use codebook::{kmeans_pp, sq_dist, Codebook, CodebookStack, QuantizationResult};
pub use loss::{
    acd_term, commit_term, dhr_term, hsa_terms, psq_forward, soft_prototype_term, LossBreakdown, PsqForward,
    PsqTerms, QuantMode,
};
pub use ops::{acd_loss, compute_trust_gate, encode, purify, soft_prototype};
pub use train::{seed_codebooks, train_quantizer, EpochLog, TrainedQuantizer};

use rand::Rng;
use semrec_tape::nn::{Activation, Linear, Mlp};
use semrec_tape::{ParamId, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Number of codebook levels `L`.
    pub levels: usize,
    /// Codes per level `K`.
    pub codebook_size: usize,
    /// Code dimension `d_cb`.
    pub code_dim: usize,
    /// Encoder hidden widths; decoders mirror them.
    pub hidden: Vec<usize>,
    /// Gate hidden width; `None` means `d_collab`.
    pub gate_hidden: Option<usize>,
    pub beta: f64,
    pub lambda_acd: f64,
    pub lambda_hsa: f64,
    pub delta: f64,
    pub tau_hsa: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub use_acd: bool,
    pub use_hsa: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 256,
            code_dim: 32,
            hidden: vec![512, 256],
            gate_hidden: None,
            beta: 0.25,
            lambda_acd: 0.8,
            lambda_hsa: 0.2,
            delta: 0.1,
            tau_hsa: 0.15,
            ema_decay: 0.99,
            ema_eps: 1e-5,
            lr: 5e-4,
            batch_size: 128,
            epochs: 300,
            use_acd: true,
            use_hsa: true,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return bad("levels, codebook_size and code_dim must be positive");
        }
        if self.codebook_size > u16::MAX as usize + 1 {
            return bad("codebook_size must fit in 16 bits");
        }
        if self.beta < 0.0 || self.lambda_acd < 0.0 || self.lambda_hsa < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.tau_hsa <= 0.0 {
            return bad("tau_hsa must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return bad("batch_size and lr must be positive");
        }
        Ok(())
    }
}

/// Where the per-depth tag anchors come from.
#[derive(Clone, Debug)]
pub enum AnchorSource {
    /// Frozen tag-text embeddings (one table per depth) through a learned
    /// linear projection into code space.
    Projected { tag_text: Vec<ParamId>, proj: Linear },
    /// Free learnable anchor per tag when no tag text is available.
    Free(Vec<ParamId>),
}

/// Parameters and codebooks of the quantizer.
#[derive(Clone, Debug)]
pub struct QuantizerModel<T> {
    pub config: QuantizerConfig,
    pub d_cont: usize,
    pub d_collab: usize,
    pub tag_vocab_sizes: Vec<usize>,
    pub params: ParamStore<T>,
    pub gate: Mlp,
    pub encoder: Mlp,
    pub dec_cont: Mlp,
    pub dec_collab: Mlp,
    pub anchors: AnchorSource,
    /// Depth `l` classifier reads `q_1 || ... || q_l` (`(l+1) * d_cb` wide).
    pub classifiers: Vec<Linear>,
    pub codebooks: CodebookStack<T>,
}

impl<T: Scalar> QuantizerModel<T> {
    /// Fresh model; codebooks start at zero and are seeded by training.
    pub fn new<R: Rng + ?Sized>(
        config: &QuantizerConfig,
        d_cont: usize,
        d_collab: usize,
        tag_vocab_sizes: &[usize],
        tag_text: Option<&[Tensor<T>]>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if tag_vocab_sizes.len() != config.levels {
            return Err(Error::dim("tag hierarchy depth", config.levels, tag_vocab_sizes.len()));
        }
        let mut params = ParamStore::new();
        let d_cb = config.code_dim;
        let gate_hidden = config.gate_hidden.unwrap_or(d_collab);
        let gate = Mlp::new(&mut params, "gate", &[d_collab, gate_hidden, d_collab], Activation::Gelu, rng);
        let mut enc_dims = vec![d_cont + d_collab];
        enc_dims.extend(&config.hidden);
        enc_dims.push(d_cb);
        let encoder = Mlp::new(&mut params, "encoder", &enc_dims, Activation::Gelu, rng);
        let mut dec_hidden: Vec<usize> = config.hidden.iter().rev().copied().collect();
        let mut dims = vec![d_cb];
        dims.append(&mut dec_hidden);
        let mut cont_dims = dims.clone();
        cont_dims.push(d_cont);
        let mut col_dims = dims;
        col_dims.push(d_collab);
        let dec_cont = Mlp::new(&mut params, "dec_cont", &cont_dims, Activation::Gelu, rng);
        let dec_collab = Mlp::new(&mut params, "dec_collab", &col_dims, Activation::Gelu, rng);
        let anchors = match tag_text {
            Some(tables) => {
                if tables.len() != config.levels {
                    return Err(Error::dim("tag text tables", config.levels, tables.len()));
                }
                let mut ids = Vec::new();
                for (l, t) in tables.iter().enumerate() {
                    if t.rows() != tag_vocab_sizes[l] || t.cols() != d_cont {
                        return Err(Error::dim(format!("tag text table {l} rows"), tag_vocab_sizes[l], t.rows()));
                    }
                    ids.push(params.add_frozen(format!("anchor.tag_text.{l}"), t.clone()));
                }
                let proj = Linear::new(&mut params, "anchor.proj", d_cont, d_cb, false, rng);
                AnchorSource::Projected { tag_text: ids, proj }
            }
            None => AnchorSource::Free(
                tag_vocab_sizes
                    .iter()
                    .enumerate()
                    .map(|(l, &v)| params.add(format!("anchor.free.{l}"), Tensor::randn(v, d_cb, 0.1, rng)))
                    .collect(),
            ),
        };
        let classifiers = tag_vocab_sizes
            .iter()
            .enumerate()
            .map(|(l, &v)| Linear::new(&mut params, &format!("hsa_cls.{l}"), (l + 1) * d_cb, v, true, rng))
            .collect();
        let codebooks = CodebookStack::new(
            (0..config.levels)
                .map(|_| Codebook::from_codes(Tensor::zeros(config.codebook_size, d_cb)))
                .collect(),
        )?;
        Ok(Self {
            config: config.clone(),
            d_cont,
            d_collab,
            tag_vocab_sizes: tag_vocab_sizes.to_vec(),
            params,
            gate,
            encoder,
            dec_cont,
            dec_collab,
            anchors,
            classifiers,
            codebooks,
        })
    }

    pub fn for_features<R: Rng + ?Sized>(
        config: &QuantizerConfig,
        features: &FeatureSet<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if features.depth() != config.levels {
            return Err(Error::dim("tag hierarchy depth", config.levels, features.depth()));
        }
        Self::new(
            config,
            features.d_cont(),
            features.d_collab(),
            &features.tag_vocab_sizes(),
            features.tag_text.as_deref(),
            rng,
        )
    }

    /// Latent `z` for every row of the feature matrices (inference).
    pub fn encode_items(&self, content: &Tensor<T>, collab: &Tensor<T>) -> Result<Tensor<T>> {
        let g = compute_trust_gate(self, collab)?;
        let purified = purify(&g, collab)?;
        encode(self, content, &purified)
    }

    /// Quantizes every row of the feature matrices with the current codebooks.
    pub fn quantize_items(&self, content: &Tensor<T>, collab: &Tensor<T>) -> Result<Vec<QuantizationResult<T>>> {
        let z = self.encode_items(content, collab)?;
        (0..z.rows()).map(|i| self.codebooks.residual_quantize(z.row(i))).collect()
    }
}
