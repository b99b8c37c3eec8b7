//! Feature matrices, item index and tag hierarchy files.
//!
//! Matrix files carry a 16-byte little-endian header (`PRSM`, dtype code,
//! rows, cols) followed by row-major elements; dtype 1 is `f32`, 2 is `f64`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use semrec_tape::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"PRSM";
pub const LEAF_TAG: &str = "<leaf>";

pub fn encode_matrix<T: Scalar>(m: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.len() * std::mem::size_of::<T>());
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decodes a matrix of either stored dtype into `T`.
pub fn decode_matrix<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 16 || bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format("not a PRSM matrix (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (dtype, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => return Err(Error::Format(format!("unknown matrix dtype code {other}"))),
    };
    let body = &bytes[16..];
    if body.len() != rows * cols * width {
        return Err(Error::Format(format!(
            "matrix body holds {} bytes, header promises {rows}x{cols}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(width)
        .map(|c| match dtype {
            1 => T::of(f32::read_le(c) as f64),
            _ => T::of(f64::read_le(c)),
        })
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

pub fn write_matrix<T: Scalar>(path: &Path, m: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One id per line; line `r` names matrix row `r`.
pub fn write_index(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// `item<TAB>tag1/tag2/.../tagL` per line.
pub fn read_tags(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((item, path_str)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "missing field".into(),
            });
        };
        let tags = path_str
            .split('/')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        out.insert(item.to_string(), tags);
    }
    Ok(out)
}

pub fn write_tags(path: &Path, items: &[String], tags: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for (item, t) in items.iter().zip(tags) {
        text.push_str(&format!("{item}\t{}\n", t.join("/")));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pads with [`LEAF_TAG`] or truncates to exactly `depth` tags.
pub fn normalize_tag_path(tags: &[String], depth: usize) -> Vec<String> {
    (0..depth)
        .map(|l| tags.get(l).cloned().unwrap_or_else(|| LEAF_TAG.to_string()))
        .collect()
}

/// Locations of the per-item feature inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePaths {
    pub content: PathBuf,
    pub collab: PathBuf,
    /// Item id per row of both matrices.
    pub index: PathBuf,
    pub tags: PathBuf,
    /// Optional tag-text embeddings (same space as content) and their row index.
    pub tag_embeddings: Option<PathBuf>,
    pub tag_index: Option<PathBuf>,
}

/// Feature inputs as read from disk, keyed by item id.
#[derive(Clone, Debug)]
pub struct RawFeatures {
    pub index: Vec<String>,
    pub content: Tensor<f32>,
    pub collab: Tensor<f32>,
    pub tags: HashMap<String, Vec<String>>,
    pub tag_text: Option<(Vec<String>, Tensor<f32>)>,
}

impl RawFeatures {
    pub fn read(paths: &FeaturePaths) -> Result<Self> {
        let index = read_index(&paths.index)?;
        let content = read_matrix(&paths.content)?;
        let collab = read_matrix(&paths.collab)?;
        for (name, m) in [("content", &content), ("collab", &collab)] {
            if m.rows() != index.len() {
                return Err(Error::dim(format!("{name} matrix rows vs index"), index.len(), m.rows()));
            }
        }
        let tags = read_tags(&paths.tags)?;
        let tag_text = match (&paths.tag_embeddings, &paths.tag_index) {
            (Some(m), Some(ix)) => {
                let names = read_index(ix)?;
                let mat = read_matrix(m)?;
                if mat.rows() != names.len() {
                    return Err(Error::dim("tag embedding rows vs tag index", names.len(), mat.rows()));
                }
                Some((names, mat))
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "tag embeddings need both a matrix and an index".into(),
                ))
            }
        };
        Ok(Self {
            index,
            content,
            collab,
            tags,
            tag_text,
        })
    }

    pub fn write(&self, paths: &FeaturePaths) -> Result<()> {
        write_index(&paths.index, &self.index)?;
        write_matrix(&paths.content, &self.content)?;
        write_matrix(&paths.collab, &self.collab)?;
        let tags: Vec<Vec<String>> = self
            .index
            .iter()
            .map(|i| self.tags.get(i).cloned().unwrap_or_default())
            .collect();
        write_tags(&paths.tags, &self.index, &tags)?;
        if let (Some((names, mat)), Some(m), Some(ix)) = (&self.tag_text, &paths.tag_embeddings, &paths.tag_index) {
            write_index(ix, names)?;
            write_matrix(m, mat)?;
        }
        Ok(())
    }
}

/// Per-item features aligned with `corpus.items`.
#[derive(Clone, Debug)]
pub struct FeatureSet<T> {
    pub content: Tensor<T>,
    pub collab: Tensor<T>,
    /// Exactly `depth` tags per item.
    pub tags: Vec<Vec<String>>,
    /// `tag_ids[item][l]` indexes `tag_vocab[l]`.
    pub tag_ids: Vec<Vec<usize>>,
    pub tag_vocab: Vec<Vec<String>>,
    /// Per depth: `tag_vocab[l].len() x d_cont` tag-text embeddings.
    pub tag_text: Option<Vec<Tensor<T>>>,
    pub popularity_raw: Vec<u64>,
    pub popularity: Vec<f64>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn n_items(&self) -> usize {
        self.content.rows()
    }

    pub fn d_cont(&self) -> usize {
        self.content.cols()
    }

    pub fn d_collab(&self) -> usize {
        self.collab.cols()
    }

    pub fn depth(&self) -> usize {
        self.tag_vocab.len()
    }

    pub fn tag_vocab_sizes(&self) -> Vec<usize> {
        self.tag_vocab.iter().map(Vec::len).collect()
    }
}

fn missing_error(mut missing: Vec<String>) -> Error {
    missing.sort();
    let count = missing.len();
    missing.truncate(10);
    Error::MissingItems {
        count,
        first: missing,
    }
}

/// Aligns raw features with the corpus item order, normalizes tag paths to
/// `depth` and attaches training popularity.
pub fn assemble_features<T: Scalar>(
    raw: &RawFeatures,
    corpus: &InteractionCorpus,
    depth: usize,
    d_cont: Option<usize>,
    d_collab: Option<usize>,
) -> Result<FeatureSet<T>> {
    if let Some(d) = d_cont {
        if raw.content.cols() != d {
            return Err(Error::dim("content dimension", d, raw.content.cols()));
        }
    }
    if let Some(d) = d_collab {
        if raw.collab.cols() != d {
            return Err(Error::dim("collab dimension", d, raw.collab.cols()));
        }
    }
    let rows: HashMap<&str, usize> = raw.index.iter().enumerate().map(|(r, s)| (s.as_str(), r)).collect();
    let missing: Vec<String> = corpus
        .items
        .iter()
        .filter(|i| !rows.contains_key(i.as_str()) || !raw.tags.contains_key(*i))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(missing_error(missing));
    }
    let order: Vec<usize> = corpus.items.iter().map(|i| rows[i.as_str()]).collect();
    let conv = |m: &Tensor<f32>| {
        let sel = m.select_rows(&order);
        Tensor::from_vec(sel.rows(), sel.cols(), sel.data().iter().map(|&x| T::of(x as f64)).collect())
    };
    let tags: Vec<Vec<String>> = corpus
        .items
        .iter()
        .map(|i| normalize_tag_path(&raw.tags[i], depth))
        .collect();
    let tag_vocab: Vec<Vec<String>> = (0..depth)
        .map(|l| {
            tags.iter()
                .map(|t| t[l].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();
    let tag_ids = tags
        .iter()
        .map(|t| {
            (0..depth)
                .map(|l| tag_vocab[l].binary_search(&t[l]).expect("tag is in its vocabulary"))
                .collect()
        })
        .collect();
    let tag_text = raw.tag_text.as_ref().map(|(names, mat)| {
        let pos: HashMap<&str, usize> = names.iter().enumerate().map(|(r, s)| (s.as_str(), r)).collect();
        tag_vocab
            .iter()
            .map(|vocab| {
                Tensor::from_fn(vocab.len(), mat.cols(), |r, c| match pos.get(vocab[r].as_str()) {
                    Some(&row) => T::of(mat.get(row, c) as f64),
                    None => T::zero(),
                })
            })
            .collect()
    });
    let popularity_raw = corpus.train_counts();
    let popularity = crate::corpus::min_max_normalize(&popularity_raw);
    Ok(FeatureSet {
        content: conv(&raw.content),
        collab: conv(&raw.collab),
        tags,
        tag_ids,
        tag_vocab,
        tag_text,
        popularity_raw,
        popularity,
    })
}

pub fn load_features<T: Scalar>(
    paths: &FeaturePaths,
    corpus: &InteractionCorpus,
    depth: usize,
    d_cont: Option<usize>,
    d_collab: Option<usize>,
) -> Result<FeatureSet<T>> {
    assemble_features(&RawFeatures::read(paths)?, corpus, depth, d_cont, d_collab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_paths_are_padded_long_paths_truncated() {
        let p = normalize_tag_path(&["A".into(), "B".into()], 3);
        assert_eq!(p, vec!["A", "B", LEAF_TAG]);
        let p = normalize_tag_path(&["A".into(), "B".into(), "C".into(), "D".into()], 3);
        assert_eq!(p, vec!["A", "B", "C"]);
    }

    #[test]
    fn matrix_header_layout() {
        let m = Tensor::<f32>::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"PRSM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_matrix::<f32>(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let m = Tensor::<f32>::zeros(2, 2);
        let bytes = encode_matrix(&m);
        assert!(decode_matrix::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_matrix::<f32>(b"NOPE").is_err());
    }
}
