use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// L-tuple of code indices naming one item. Orders lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(Vec<u16>);

impl SemanticId {
    pub fn new(codes: Vec<u16>) -> Self {
        Self(codes)
    }

    pub fn codes(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prefix(&self, len: usize) -> &[u16] {
        &self.0[..len]
    }
}

impl From<Vec<u16>> for SemanticId {
    fn from(v: Vec<u16>) -> Self {
        Self(v)
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// `sids[i]` is the semantic ID of catalog item `i`.
pub type SidMap = Vec<SemanticId>;

/// Writes `item<TAB>c1,c2,...,cL` lines.
pub fn write_sid_map(path: &Path, items: &[String], sids: &[SemanticId]) -> Result<()> {
    let mut text = String::new();
    for (item, sid) in items.iter().zip(sids) {
        text.push_str(&format!("{item}\t{sid}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a SID map and aligns it with `items`.
pub fn read_sid_map(path: &Path, items: &[String]) -> Result<SidMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_item = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (item, codes) = line.split_once('\t').ok_or_else(|| parse_err("missing field"))?;
        let codes = codes
            .split(',')
            .map(|c| c.trim().parse::<u16>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err("invalid code"))?;
        by_item.insert(item.to_string(), SemanticId(codes));
    }
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match by_item.remove(item) {
            Some(s) => out.push(s),
            None => missing.push(item.clone()),
        }
    }
    if !missing.is_empty() {
        let count = missing.len();
        missing.truncate(10);
        return Err(Error::MissingItems {
            count,
            first: missing,
        });
    }
    Ok(out)
}
