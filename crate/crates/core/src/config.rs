//! Flat pipeline configuration and per-stage hashes.
//!
//! Every key lives at the top level of one TOML file. Keys owned by the
//! synthetic generator start with `synth_`, dedup keys with `dedup_` and the
//! quantizer's optimizer keys with `q_`; recommender keys are unprefixed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dedup::DedupConfig;
use crate::error::{Error, Result};
use crate::features::FeaturePaths;
use crate::quantizer::QuantizerConfig;
use crate::recommender::{CollabInput, RecommenderConfig};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,

    /// Raw `user,item,timestamp` file for `prepare`.
    pub interactions: Option<PathBuf>,
    pub content_features: Option<PathBuf>,
    pub collab_features: Option<PathBuf>,
    pub item_index: Option<PathBuf>,
    pub item_tags: Option<PathBuf>,
    pub tag_embeddings: Option<PathBuf>,
    pub tag_index: Option<PathBuf>,
    pub k_core: usize,
    pub max_len: usize,

    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_branching: usize,
    pub synth_depth: usize,
    pub synth_d_cont: usize,
    pub synth_d_collab: usize,
    pub synth_noise: f64,
    pub synth_transition_bias: f64,
    pub synth_min_seq_len: usize,
    pub synth_max_seq_len: usize,
    pub synth_collab_rank: usize,
    pub synth_zipf: f64,

    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: Vec<usize>,
    pub gate_hidden: Option<usize>,
    pub beta: f64,
    pub lambda_acd: f64,
    pub lambda_hsa: f64,
    pub delta: f64,
    pub tau_hsa: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub q_lr: f64,
    pub q_batch_size: usize,
    pub q_epochs: usize,
    pub use_acd: bool,
    pub use_hsa: bool,

    pub dedup_candidate_cap: usize,
    pub dedup_eps_scale: f64,
    pub dedup_max_iter: usize,
    pub dedup_anneal_steps: usize,
    pub dedup_tol: f64,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
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
    pub n_ref: Option<f64>,
    pub beam_width: usize,
    pub valid_users: usize,
    pub valid_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let q = QuantizerConfig::default();
        let d = DedupConfig::default();
        let r = RecommenderConfig::default();
        Self {
            seed: 42,
            interactions: None,
            content_features: None,
            collab_features: None,
            item_index: None,
            item_tags: None,
            tag_embeddings: None,
            tag_index: None,
            k_core: 5,
            max_len: 50,
            synth_users: s.n_users,
            synth_items: s.n_items,
            synth_branching: s.branching,
            synth_depth: s.depth,
            synth_d_cont: s.d_cont,
            synth_d_collab: s.d_collab,
            synth_noise: s.noise,
            synth_transition_bias: s.transition_bias,
            synth_min_seq_len: s.min_seq_len,
            synth_max_seq_len: s.max_seq_len,
            synth_collab_rank: s.collab_rank,
            synth_zipf: s.zipf,
            levels: q.levels,
            codebook_size: q.codebook_size,
            code_dim: q.code_dim,
            hidden: q.hidden,
            gate_hidden: q.gate_hidden,
            beta: q.beta,
            lambda_acd: q.lambda_acd,
            lambda_hsa: q.lambda_hsa,
            delta: q.delta,
            tau_hsa: q.tau_hsa,
            ema_decay: q.ema_decay,
            ema_eps: q.ema_eps,
            q_lr: q.lr,
            q_batch_size: q.batch_size,
            q_epochs: q.epochs,
            use_acd: q.use_acd,
            use_hsa: q.use_hsa,
            dedup_candidate_cap: d.candidate_cap,
            dedup_eps_scale: d.eps_scale,
            dedup_max_iter: d.max_iter,
            dedup_anneal_steps: d.anneal_steps,
            dedup_tol: d.tol,
            d_model: r.d_model,
            layers: r.layers,
            heads: r.heads,
            d_head: r.d_head,
            ff_dim: r.ff_dim,
            d_proj: r.d_proj,
            n_experts: r.n_experts,
            top_k: r.top_k,
            d_moe: r.d_moe,
            eta_init: r.eta_init,
            gamma: r.gamma,
            lr: r.lr,
            batch_size: r.batch_size,
            epochs: r.epochs,
            n_time_buckets: r.n_time_buckets,
            collab_input: r.collab_input,
            tau_min: r.tau_min,
            tau_max: r.tau_max,
            alpha: r.alpha,
            n_ref: r.n_ref,
            beam_width: r.beam_width,
            valid_users: r.valid_users,
            valid_every: r.valid_every,
        }
    }
}

/// Pipeline stages whose outputs carry a config hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Tokenizer,
    Dedup,
    Recommender,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Tokenizer => "tokenizer",
            Stage::Dedup => "dedup",
            Stage::Recommender => "recommender",
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_core == 0 || self.max_len < 3 {
            return Err(Error::Config("k_core must be positive and max_len at least 3".into()));
        }
        if self.synth_depth != self.levels {
            return Err(Error::Config(format!(
                "synth_depth {} must equal levels {}",
                self.synth_depth, self.levels
            )));
        }
        self.quantizer().validate()?;
        self.recommender().validate()?;
        if self.dedup_candidate_cap == 0 || self.dedup_eps_scale <= 0.0 || self.dedup_max_iter == 0 {
            return Err(Error::Config("dedup_candidate_cap, dedup_eps_scale and dedup_max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_users: self.synth_users,
            n_items: self.synth_items,
            branching: self.synth_branching,
            depth: self.synth_depth,
            d_cont: self.synth_d_cont,
            d_collab: self.synth_d_collab,
            noise: self.synth_noise,
            transition_bias: self.synth_transition_bias,
            min_seq_len: self.synth_min_seq_len,
            max_seq_len: self.synth_max_seq_len,
            collab_rank: self.synth_collab_rank,
            zipf: self.synth_zipf,
        }
    }

    pub fn quantizer(&self) -> QuantizerConfig {
        QuantizerConfig {
            levels: self.levels,
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            hidden: self.hidden.clone(),
            gate_hidden: self.gate_hidden,
            beta: self.beta,
            lambda_acd: self.lambda_acd,
            lambda_hsa: self.lambda_hsa,
            delta: self.delta,
            tau_hsa: self.tau_hsa,
            ema_decay: self.ema_decay,
            ema_eps: self.ema_eps,
            lr: self.q_lr,
            batch_size: self.q_batch_size,
            epochs: self.q_epochs,
            use_acd: self.use_acd,
            use_hsa: self.use_hsa,
        }
    }

    pub fn dedup(&self) -> DedupConfig {
        DedupConfig {
            candidate_cap: self.dedup_candidate_cap,
            eps_scale: self.dedup_eps_scale,
            max_iter: self.dedup_max_iter,
            anneal_steps: self.dedup_anneal_steps,
            tol: self.dedup_tol,
        }
    }

    pub fn recommender(&self) -> RecommenderConfig {
        RecommenderConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_head: self.d_head,
            ff_dim: self.ff_dim,
            d_proj: self.d_proj,
            n_experts: self.n_experts,
            top_k: self.top_k,
            d_moe: self.d_moe,
            eta_init: self.eta_init,
            gamma: self.gamma,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            n_time_buckets: self.n_time_buckets,
            collab_input: self.collab_input,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            alpha: self.alpha,
            n_ref: self.n_ref,
            beam_width: self.beam_width,
            valid_users: self.valid_users,
            valid_every: self.valid_every,
        }
    }

    pub fn feature_paths(&self) -> Result<FeaturePaths> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("`{key}` must be set for prepare")))
        };
        Ok(FeaturePaths {
            content: need(&self.content_features, "content_features")?,
            collab: need(&self.collab_features, "collab_features")?,
            index: need(&self.item_index, "item_index")?,
            tags: need(&self.item_tags, "item_tags")?,
            tag_embeddings: self.tag_embeddings.clone(),
            tag_index: self.tag_index.clone(),
        })
    }

    /// Hash of everything that determines `stage`'s outputs, chained through
    /// the stages before it. `source` names the data origin (`synth` or
    /// `prepare`).
    pub fn stage_hash(&self, stage: Stage, source: &str) -> String {
        let data = serde_json::json!({
            "source": source,
            "seed": self.seed,
            "k_core": self.k_core,
            "max_len": self.max_len,
            "synth": if source == "synth" { serde_json::to_value(self.synth()).ok() } else { None },
            "inputs": if source == "synth" { None } else { Some([
                &self.interactions, &self.content_features, &self.collab_features,
                &self.item_index, &self.item_tags, &self.tag_embeddings, &self.tag_index,
            ]) },
            "depth": self.levels,
        });
        let mut h = sha_hex(data.to_string().as_bytes());
        let chain: [(Stage, serde_json::Value); 3] = [
            (Stage::Tokenizer, serde_json::to_value(self.quantizer()).expect("serializable")),
            (Stage::Dedup, serde_json::to_value(self.dedup()).expect("serializable")),
            (Stage::Recommender, serde_json::to_value(self.recommender()).expect("serializable")),
        ];
        if stage == Stage::Data {
            return h;
        }
        for (s, v) in chain {
            h = sha_hex(format!("{h}|{}|{}|{v}", s.name(), self.seed).as_bytes());
            if s == stage {
                break;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("seed = 1\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(PipelineConfig::from_toml("top_k = 4\nn_experts = 3\n").is_err());
        assert!(PipelineConfig::from_toml("ema_decay = 1.5\n").is_err());
    }

    #[test]
    fn hashes_track_only_upstream_keys() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.codebook_size = 128;
        assert_eq!(a.stage_hash(Stage::Data, "synth"), b.stage_hash(Stage::Data, "synth"));
        assert_ne!(a.stage_hash(Stage::Tokenizer, "synth"), b.stage_hash(Stage::Tokenizer, "synth"));
        assert_ne!(a.stage_hash(Stage::Recommender, "synth"), b.stage_hash(Stage::Recommender, "synth"));
        let mut c = a.clone();
        c.epochs = 3;
        assert_eq!(a.stage_hash(Stage::Dedup, "synth"), c.stage_hash(Stage::Dedup, "synth"));
        assert_ne!(a.stage_hash(Stage::Recommender, "synth"), c.stage_hash(Stage::Recommender, "synth"));
    }
}
