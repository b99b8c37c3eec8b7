use rand_chacha::ChaCha8Rng;
use semrec_tape::{Scalar, Tape, Tensor};

use super::loss::Batch;
use super::{ItemContext, RecommenderModel};
use crate::corpus::Event;
use crate::error::{Error, Result};
use crate::trie::{constrained_beam_search, PrefixScorer, SidTrie};

/// Encoder output for one history, without padding rows.
#[derive(Clone, Debug)]
pub struct EncodedHistory<T> {
    pub memory: Tensor<T>,
    pub target_pos: usize,
}

/// Encodes histories in chunks of `chunk` without routing noise.
pub fn encode_histories<T: Scalar>(
    model: &RecommenderModel<T>,
    ctx: &ItemContext<T>,
    histories: &[&[Event]],
    chunk: usize,
) -> Result<Vec<EncodedHistory<T>>> {
    let mut out = Vec::with_capacity(histories.len());
    for part in histories.chunks(chunk.max(1)) {
        let mut tape = Tape::new(&model.params);
        let batch = model.encode(&mut tape, ctx, part, None::<&mut ChaCha8Rng>)?;
        let mem = tape.value(batch.memory);
        for (b, &len) in batch.mem_lens.iter().enumerate() {
            let idx: Vec<usize> = (b * batch.mem_len..b * batch.mem_len + len).collect();
            out.push(EncodedHistory {
                memory: mem.select_rows(&idx),
                target_pos: batch.target_pos[b],
            });
        }
    }
    Ok(out)
}

/// Runs the decoder over every beam of one encoded history.
pub struct DecoderScorer<'a, T: Scalar> {
    pub model: &'a RecommenderModel<T>,
    pub history: &'a EncodedHistory<T>,
}

impl<T: Scalar> PrefixScorer for DecoderScorer<'_, T> {
    fn score(&mut self, depth: usize, prefixes: &[Vec<u16>]) -> Result<Vec<Vec<f64>>> {
        let m = self.model;
        if depth >= m.depth {
            return Err(Error::InvalidArgument(format!("depth {depth} beyond SID length {}", m.depth)));
        }
        let mut tape = Tape::new(&m.params);
        let memory = tape.constant(self.history.memory.clone());
        let len = self.history.memory.rows();
        let batch = Batch {
            memory,
            mem_len: len,
            mem_lens: vec![len],
            target_pos: vec![self.history.target_pos],
            expert_rows: Vec::new(),
        };
        let rows = vec![0; prefixes.len()];
        let states = m.decode(&mut tape, &batch, &rows, prefixes)?;
        let last = m.step_states(&mut tape, states, prefixes.len(), depth + 1, depth);
        let logits = m.outputs[depth].forward(&mut tape, last);
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|r| v.row(r).iter().map(|x| x.f64()).collect()).collect())
    }
}

/// Top-`top_n` `(item, log-score)` pairs for each history via trie-constrained
/// beam search.
pub fn recommend<T: Scalar>(
    model: &RecommenderModel<T>,
    ctx: &ItemContext<T>,
    trie: &SidTrie,
    histories: &[&[Event]],
    top_n: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let ats = model.config.ats(ctx.n_items());
    let beam = model.config.beam_width.max(top_n);
    let encoded = encode_histories(model, ctx, histories, model.config.batch_size)?;
    encoded
        .iter()
        .map(|h| {
            let mut scorer = DecoderScorer { model, history: h };
            constrained_beam_search(&mut scorer, trie, &ats, beam, top_n)
        })
        .collect()
}
