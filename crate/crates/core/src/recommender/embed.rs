use rand::Rng;
use semrec_tape::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// `min(n_buckets - 1, floor(log2(1 + dt)))`.
pub fn time_bucket(dt: u64, n_buckets: usize) -> usize {
    let x = dt.saturating_add(1);
    let b = (63 - x.leading_zeros()) as usize;
    b.min(n_buckets.saturating_sub(1))
}

/// Code, sequence-position, depth and time-gap tables, all `d_model` wide.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub tok: ParamId,
    pub seq: ParamId,
    pub hier: ParamId,
    pub time: ParamId,
}

impl EmbeddingTables {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        depth: usize,
        codebook_size: usize,
        max_len: usize,
        n_buckets: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        Self {
            tok: store.add("emb.tok", Tensor::randn(depth * codebook_size + 2, d_model, std, rng)),
            seq: store.add("emb.seq", Tensor::randn(max_len, d_model, std, rng)),
            hier: store.add("emb.hier", Tensor::randn(depth, d_model, std, rng)),
            time: store.add("emb.time", Tensor::randn(n_buckets, d_model, std, rng)),
        }
    }
}

/// Row indices of one token in each table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRef {
    pub row: usize,
    pub pos: usize,
    pub depth: usize,
    pub bucket: usize,
}

fn check<T: Scalar>(store: &ParamStore<T>, tables: &EmbeddingTables, t: &TokenRef) -> Result<()> {
    let checks = [
        ("token row", t.row, store.get(tables.tok).rows()),
        ("sequence position", t.pos, store.get(tables.seq).rows()),
        ("depth", t.depth, store.get(tables.hier).rows()),
        ("time bucket", t.bucket, store.get(tables.time).rows()),
    ];
    for (what, idx, n) in checks {
        if idx >= n {
            return Err(Error::InvalidArgument(format!("{what} {idx} out of range {n}")));
        }
    }
    Ok(())
}

/// `E_tok[row] + P_seq[pos] + P_hier[depth] + P_time[bucket]`.
pub fn embed_token<T: Scalar>(store: &ParamStore<T>, tables: &EmbeddingTables, t: &TokenRef) -> Result<Vec<T>> {
    check(store, tables, t)?;
    let rows = [
        store.get(tables.tok).row(t.row),
        store.get(tables.seq).row(t.pos),
        store.get(tables.hier).row(t.depth),
        store.get(tables.time).row(t.bucket),
    ];
    Ok((0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum()).collect())
}

/// Batched [`embed_token`] on the tape, one output row per token.
pub fn embed_tokens<T: Scalar>(tape: &mut Tape<'_, T>, tables: &EmbeddingTables, tokens: &[TokenRef]) -> Result<Var> {
    for t in tokens {
        check(tape.store(), tables, t)?;
    }
    let parts: [(ParamId, Vec<usize>); 4] = [
        (tables.tok, tokens.iter().map(|t| t.row).collect()),
        (tables.seq, tokens.iter().map(|t| t.pos).collect()),
        (tables.hier, tokens.iter().map(|t| t.depth).collect()),
        (tables.time, tokens.iter().map(|t| t.bucket).collect()),
    ];
    let mut acc: Option<Var> = None;
    for (id, idx) in parts {
        let table = tape.param(id);
        let rows = tape.gather_rows(table, &idx);
        acc = Some(match acc {
            Some(a) => tape.add(a, rows),
            None => rows,
        });
    }
    Ok(acc.expect("four tables"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_logarithmic() {
        assert_eq!(time_bucket(0, 32), 0);
        assert_eq!(time_bucket(1, 32), 1);
        assert_eq!(time_bucket(2, 32), 1);
        assert_eq!(time_bucket(3, 32), 2);
        assert_eq!(time_bucket(86_400, 32), 16);
        assert_eq!(time_bucket(u64::MAX, 32), 31);
    }
}
