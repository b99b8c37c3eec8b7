use rand::Rng;
use semrec_tape::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::dsi::{compose_input, fuse, moe_forward};
use super::embed::{embed_tokens, time_bucket, TokenRef};
use super::{ItemContext, RecommenderModel};
use crate::corpus::Event;
use crate::error::{Error, Result};
use crate::trie::{adaptive_temperature, AtsConfig, SidTrie};

/// One next-item prediction: chronological history and the target item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub history: Vec<Event>,
    pub target: usize,
}

/// Encoded histories of a batch.
pub struct Batch {
    pub memory: Var,
    /// Padded encoder length (`max history * L`).
    pub mem_len: usize,
    pub mem_lens: Vec<usize>,
    /// Sequence position used by each sample's target tokens.
    pub target_pos: Vec<usize>,
    /// Rows each expert was evaluated on.
    pub expert_rows: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IsrBreakdown {
    pub gen: f64,
    pub ssa: f64,
    pub total: f64,
}

pub struct IsrForward {
    pub total: Var,
    pub gen: Var,
    pub ssa: Var,
    /// Final decoder states per depth (`B x d_model` each).
    pub states: Vec<Var>,
    pub breakdown: IsrBreakdown,
    /// Token rows routed to each expert.
    pub expert_rows: Vec<usize>,
}

impl<T: Scalar> RecommenderModel<T> {
    /// Runs the encoder over a batch of histories (most recent `max_len` items kept).
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &ItemContext<T>,
        histories: &[&[Event]],
        noise: Option<&mut R>,
    ) -> Result<Batch> {
        let l_depth = self.depth;
        let b = histories.len();
        if histories.iter().any(|h| h.is_empty()) {
            return Err(Error::InvalidArgument("empty history".into()));
        }
        let hist: Vec<&[Event]> = histories
            .iter()
            .map(|h| &h[h.len().saturating_sub(self.max_len)..])
            .collect();
        let max_items = hist.iter().map(|h| h.len()).max().unwrap_or(0);
        let mem_len = max_items * l_depth;
        let mut tokens = Vec::with_capacity(b * mem_len);
        let mut items = Vec::with_capacity(b * mem_len);
        let mut depths = Vec::with_capacity(b * mem_len);
        for h in &hist {
            for (i, e) in h.iter().enumerate() {
                if e.item >= ctx.n_items() {
                    return Err(Error::InvalidArgument(format!("history item {} outside catalog", e.item)));
                }
                let bucket = if i == 0 {
                    0
                } else {
                    time_bucket(e.timestamp.saturating_sub(h[i - 1].timestamp), self.config.n_time_buckets)
                };
                for l in 0..l_depth {
                    tokens.push(TokenRef {
                        row: self.token_row(l, ctx.sids[e.item].codes()[l]),
                        pos: i,
                        depth: l,
                        bucket,
                    });
                    items.push(e.item);
                    depths.push(l);
                }
            }
            for _ in h.len() * l_depth..mem_len {
                tokens.push(TokenRef {
                    row: self.pad(),
                    pos: 0,
                    depth: 0,
                    bucket: 0,
                });
                items.push(h[0].item);
                depths.push(0);
            }
        }
        let e_id = embed_tokens(tape, &self.tables, &tokens)?;
        let x = compose_input(tape, &self.dsi, e_id, &items, &depths, ctx)?;
        let moe = moe_forward(tape, &self.dsi, x, noise)?;
        let mut h = fuse(tape, &self.dsi, e_id, moe.h);
        let mem_lens: Vec<usize> = hist.iter().map(|h| h.len() * l_depth).collect();
        for layer in &self.encoder {
            h = layer.forward(tape, h, b, mem_len, &mem_lens);
        }
        let memory = self.encoder_norm.forward(tape, h);
        Ok(Batch {
            memory,
            mem_len,
            mem_lens,
            target_pos: hist.iter().map(|h| h.len().min(self.max_len - 1)).collect(),
            expert_rows: moe.evaluations,
        })
    }

    /// Teacher-forced decoder over `BOS, prefix...`; returns `rows x d_model`
    /// states laid out as `row * (prefix_len + 1) + t`.
    ///
    /// `rows[r]` selects the batch sample whose memory row `r` attends to.
    pub fn decode(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &Batch,
        rows: &[usize],
        prefixes: &[Vec<u16>],
    ) -> Result<Var> {
        let n = rows.len();
        let len = prefixes.first().map(|p| p.len()).unwrap_or(0) + 1;
        if prefixes.len() != n || prefixes.iter().any(|p| p.len() + 1 != len) {
            return Err(Error::InvalidArgument("decoder prefixes must share one length".into()));
        }
        if len > self.depth {
            return Err(Error::InvalidArgument(format!("decoder prefix longer than {}", self.depth - 1)));
        }
        let mut tokens = Vec::with_capacity(n * len);
        for (&r, p) in rows.iter().zip(prefixes) {
            let pos = batch.target_pos[r];
            tokens.push(TokenRef {
                row: self.bos(),
                pos,
                depth: 0,
                bucket: 0,
            });
            for (l, &c) in p.iter().enumerate() {
                if c as usize >= self.codebook_size {
                    return Err(Error::InvalidArgument(format!("code {c} outside codebook")));
                }
                tokens.push(TokenRef {
                    row: self.token_row(l, c),
                    pos,
                    depth: l,
                    bucket: 0,
                });
            }
        }
        let mut y = embed_tokens(tape, &self.tables, &tokens)?;
        let memory = if rows.iter().copied().eq(0..batch.mem_lens.len()) {
            batch.memory
        } else {
            let idx: Vec<usize> = rows
                .iter()
                .flat_map(|&r| (r * batch.mem_len)..((r + 1) * batch.mem_len))
                .collect();
            tape.gather_rows(batch.memory, &idx)
        };
        let mem_lens: Vec<usize> = rows.iter().map(|&r| batch.mem_lens[r]).collect();
        for layer in &self.decoder {
            y = layer.forward(tape, y, memory, n, len, batch.mem_len, &mem_lens);
        }
        Ok(self.decoder_norm.forward(tape, y))
    }

    /// Rows `r * len + t` of a decoder output, for all `r`.
    pub fn step_states(&self, tape: &mut Tape<'_, T>, states: Var, n: usize, len: usize, t: usize) -> Var {
        let idx: Vec<usize> = (0..n).map(|r| r * len + t).collect();
        tape.gather_rows(states, &idx)
    }
}

/// `sum_l CE(logits_l / tau_l, y_l)` per row, batch-averaged.
pub fn gen_term<T: Scalar>(tape: &mut Tape<'_, T>, logits: &[Var], targets: &[Vec<usize>], inv_temps: &[Vec<T>]) -> Var {
    let mut acc: Option<Var> = None;
    for ((&lg, y), s) in logits.iter().zip(targets).zip(inv_temps) {
        let ce = tape.cross_entropy(lg, y, Some(s));
        acc = Some(match acc {
            Some(a) => tape.add(a, ce),
            None => ce,
        });
    }
    let acc = acc.expect("at least one depth");
    tape.mean(acc)
}

/// `sum_l ||reg_l(o_l) - q_l||^2 + CE(cls_l(o_l), t_l)` per row, batch-averaged.
pub fn ssa_term<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &RecommenderModel<T>,
    states: &[Var],
    code_targets: &[Tensor<T>],
    tag_targets: &[Vec<usize>],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (l, &o) in states.iter().enumerate() {
        let vocab = model.ssa.classifiers[l].out_dim;
        if let Some(&t) = tag_targets[l].iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("tag {t} outside vocabulary {vocab} at depth {l}")));
        }
        let pred = model.ssa.regressors[l].forward(tape, o);
        let target = tape.constant(code_targets[l].clone());
        let diff = tape.sub(pred, target);
        let sq = tape.square(diff);
        let reg = tape.row_sum(sq);
        let logits = model.ssa.classifiers[l].forward(tape, o);
        let ce = tape.cross_entropy(logits, &tag_targets[l], None);
        let term = tape.add(reg, ce);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let acc = acc.expect("at least one depth");
    Ok(tape.mean(acc))
}

/// `L_gen + gamma * L_ssa` on a batch of samples.
pub fn isr_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    model: &RecommenderModel<T>,
    ctx: &ItemContext<T>,
    trie: &SidTrie,
    ats: &AtsConfig,
    samples: &[Sample],
    noise: Option<&mut R>,
) -> Result<IsrForward> {
    let depth = model.depth;
    let b = samples.len();
    let histories: Vec<&[Event]> = samples.iter().map(|s| s.history.as_slice()).collect();
    let batch = model.encode(tape, ctx, &histories, noise)?;
    let target_sids: Vec<&[u16]> = samples.iter().map(|s| ctx.sids[s.target].codes()).collect();
    let prefixes: Vec<Vec<u16>> = target_sids.iter().map(|s| s[..depth - 1].to_vec()).collect();
    let rows: Vec<usize> = (0..b).collect();
    let states_all = model.decode(tape, &batch, &rows, &prefixes)?;
    let mut states = Vec::with_capacity(depth);
    let mut logits = Vec::with_capacity(depth);
    let mut targets = Vec::with_capacity(depth);
    let mut inv_temps = Vec::with_capacity(depth);
    for t in 0..depth {
        let o = model.step_states(tape, states_all, b, depth, t);
        logits.push(model.outputs[t].forward(tape, o));
        states.push(o);
        targets.push(target_sids.iter().map(|s| s[t] as usize).collect::<Vec<_>>());
        inv_temps.push(
            target_sids
                .iter()
                .map(|s| Ok(T::of(1.0 / adaptive_temperature(ats, trie.branching_factor(&s[..t])?))))
                .collect::<Result<Vec<T>>>()?,
        );
    }
    let gen = gen_term(tape, &logits, &targets, &inv_temps);
    let code_targets: Vec<Tensor<T>> = (0..depth)
        .map(|l| {
            let idx: Vec<usize> = samples.iter().map(|s| s.target).collect();
            ctx.codes[l].select_rows(&idx)
        })
        .collect();
    let tag_targets: Vec<Vec<usize>> = (0..depth)
        .map(|l| samples.iter().map(|s| ctx.tag_ids[s.target][l]).collect())
        .collect();
    let ssa = ssa_term(tape, model, &states, &code_targets, &tag_targets)?;
    let weighted = tape.scale(ssa, T::of(model.config.gamma));
    let total = tape.add(gen, weighted);
    let breakdown = IsrBreakdown {
        gen: tape.value(gen).item().f64(),
        ssa: tape.value(ssa).item().f64(),
        total: tape.value(total).item().f64(),
    };
    Ok(IsrForward {
        total,
        gen,
        ssa,
        states,
        breakdown,
        expert_rows: batch.expert_rows,
    })
}
