//! Versioned binary checkpoints: magic, format version, a JSON header and
//! named matrices in the feature-matrix encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use semrec_tape::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{decode_matrix, encode_matrix};
use crate::quantizer::QuantizerModel;
use crate::recommender::RecommenderModel;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub dtype: u32,
    /// Wall-clock save time; the only field allowed to differ between reruns.
    pub created_unix: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: &str, config_hash: &str, meta: serde_json::Value, tensors: Vec<(String, Tensor<T>)>) -> Self {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            dtype: T::DTYPE,
            created_unix,
            meta,
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            let m = encode_matrix(t);
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            out.extend_from_slice(&m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let read_len = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 8).ok_or_else(|| bad("truncated"))?;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        };
        let hlen = read_len(8)?;
        let mut at = 16;
        let hbytes = bytes.get(at..at + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(hbytes).map_err(|e| bad(&e.to_string()))?;
        at += hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let len = read_len(at)?;
            at += 8;
            let body = bytes.get(at..at + len).ok_or_else(|| bad("truncated tensor"))?;
            let t: Tensor<T> = decode_matrix(body)?;
            if t.shape() != (entry.rows, entry.cols) {
                return Err(bad(&format!("tensor {} shape mismatch", entry.name)));
            }
            tensors.push((entry.name.clone(), t));
            at += len;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Refuses a checkpoint whose kind or recorded hash differs from what the
    /// current configuration expects.
    pub fn expect(&self, kind: &str, config_hash: &str, artifact: &Path) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!(
                "{}: holds a {} checkpoint, expected {kind}",
                artifact.display(),
                self.header.kind
            )));
        }
        if self.header.config_hash != config_hash {
            return Err(Error::HashMismatch {
                artifact: artifact.display().to_string(),
                expected: config_hash.to_string(),
                found: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }

    fn map(&self) -> HashMap<&str, &Tensor<T>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

pub fn param_tensors<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    store.iter().map(|(_, p)| (format!("param.{}", p.name), p.value.clone())).collect()
}

/// Overwrites every parameter of `store` from `tensors`; names and shapes must match.
pub fn restore_params<T: Scalar>(store: &mut ParamStore<T>, tensors: &HashMap<&str, &Tensor<T>>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("param.{}", store.param(id).name);
        let t = tensors
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = (*t).clone();
    }
    Ok(())
}

pub fn quantizer_checkpoint<T: Scalar>(model: &QuantizerModel<T>, config_hash: &str) -> Checkpoint<T> {
    let mut tensors = param_tensors(&model.params);
    for (l, cb) in model.codebooks.levels.iter().enumerate() {
        tensors.push((format!("codebook.{l}.codes"), cb.codes.clone()));
        tensors.push((format!("codebook.{l}.counts"), Tensor::row_vector(cb.counts.clone())));
        tensors.push((format!("codebook.{l}.sums"), cb.sums.clone()));
    }
    let meta = serde_json::json!({ "config": model.config });
    Checkpoint::new("quantizer", config_hash, meta, tensors)
}

/// Loads parameters and codebooks into a freshly built model of the same shape.
pub fn restore_quantizer<T: Scalar>(model: &mut QuantizerModel<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    let map = ckpt.map();
    restore_params(&mut model.params, &map)?;
    for (l, cb) in model.codebooks.levels.iter_mut().enumerate() {
        let get = |what: &str| {
            let name = format!("codebook.{l}.{what}");
            map.get(name.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let codes = get("codes")?;
        if codes.shape() != cb.codes.shape() {
            return Err(Error::dim(format!("codebook {l} rows"), cb.codes.rows(), codes.rows()));
        }
        cb.codes = codes;
        cb.counts = get("counts")?.into_vec();
        cb.sums = get("sums")?;
    }
    Ok(())
}

pub fn recommender_checkpoint<T: Scalar>(model: &RecommenderModel<T>, config_hash: &str, meta: serde_json::Value) -> Checkpoint<T> {
    Checkpoint::new("recommender", config_hash, meta, param_tensors(&model.params))
}

pub fn restore_recommender<T: Scalar>(model: &mut RecommenderModel<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    restore_params(&mut model.params, &ckpt.map())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_refusal() {
        let t = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let ck = Checkpoint::new("unit", "abc", serde_json::json!({"k": 1}), vec![("w".into(), t.clone())]);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.tensors[0].1, t);
        assert!(back.expect("unit", "abc", Path::new("x")).is_ok());
        assert!(matches!(back.expect("unit", "zzz", Path::new("x")), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let ck = Checkpoint::<f32>::new("unit", "h", serde_json::Value::Null, vec![("a".into(), Tensor::zeros(1, 1))]);
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
    }
}
