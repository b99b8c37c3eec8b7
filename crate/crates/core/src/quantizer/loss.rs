use semrec_tape::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::codebook::QuantizationResult;
use super::{AnchorSource, QuantizerModel};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

/// How the forward pass obtains code assignments.
#[derive(Clone, Copy, Debug)]
pub enum QuantMode<'a, T> {
    /// Quantize the current encoder output.
    Fresh,
    /// Reuse assignments and straight-through offsets computed earlier.
    /// Differentiating this surrogate exactly reproduces the straight-through
    /// gradient, which makes it checkable by finite differences.
    Frozen(&'a [QuantizationResult<T>]),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dhr: f64,
    pub commit: f64,
    pub acd: f64,
    pub hsa: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite term, in evaluation order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("dhr", self.dhr),
            ("commit", self.commit),
            ("acd", self.acd),
            ("hsa", self.hsa),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Unweighted loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PsqTerms {
    pub dhr: Var,
    pub commit: Var,
    pub acd: Option<Var>,
    pub hsa: Option<Var>,
}

pub struct PsqForward<T> {
    pub total: Var,
    pub terms: PsqTerms,
    pub breakdown: LossBreakdown,
    pub quant: Vec<QuantizationResult<T>>,
    pub z: Var,
    pub gate: Option<Var>,
}

fn scalar_of<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

/// Batch mean of `(mean(g) - p)^2 + relu(delta - Var(g))`.
pub fn acd_term<T: Scalar>(tape: &mut Tape<'_, T>, g: Var, popularity: &[T], delta: T) -> Var {
    let (b, _) = tape.shape(g);
    assert_eq!(popularity.len(), b, "one popularity per row");
    let mean = tape.row_mean(g);
    let p = tape.constant(Tensor::from_vec(b, 1, popularity.to_vec()));
    let gap = tape.sub(mean, p);
    let gap_sq = tape.square(gap);
    let neg_mean = tape.scale(mean, -T::one());
    let centered = tape.add_col(g, neg_mean);
    let centered_sq = tape.square(centered);
    let var = tape.row_mean(centered_sq);
    let neg_var = tape.scale(var, -T::one());
    let margin = tape.add_const(neg_var, delta);
    let hinge = tape.relu(margin);
    let per_row = tape.add(gap_sq, hinge);
    tape.mean(per_row)
}

/// Batch mean of `||z - sg(z_q)||^2`.
pub fn commit_term<T: Scalar>(tape: &mut Tape<'_, T>, z: Var, z_q: &Tensor<T>) -> Var {
    let target = tape.constant(z_q.clone());
    let diff = tape.sub(z, target);
    let sq = tape.square(diff);
    let per_row = tape.row_sum(sq);
    tape.mean(per_row)
}

/// Batch mean of `||e_cont - cont_hat||^2 + ||collab_target - collab_hat||^2`.
pub fn dhr_term<T: Scalar>(
    tape: &mut Tape<'_, T>,
    e_cont: Var,
    cont_hat: Var,
    collab_target: Var,
    collab_hat: Var,
) -> Var {
    let d1 = tape.sub(e_cont, cont_hat);
    let d1 = tape.square(d1);
    let r1 = tape.row_sum(d1);
    let d2 = tape.sub(collab_target, collab_hat);
    let d2 = tape.square(d2);
    let r2 = tape.row_sum(d2);
    let per_row = tape.add(r1, r2);
    tape.mean(per_row)
}

/// Per-row `||p - soft_prototype(p)||^2` against a constant codebook (`B x 1`).
pub fn soft_prototype_term<T: Scalar>(tape: &mut Tape<'_, T>, anchors: Var, codes: &Tensor<T>, tau: T) -> Var {
    let code_norms = Tensor::from_fn(1, codes.rows(), |_, k| codes.row(k).iter().map(|&x| x * x).sum());
    let codes_t = tape.constant(codes.transpose());
    let codes_c = tape.constant(codes.clone());
    let norms = tape.constant(code_norms);
    let p_sq = tape.square(anchors);
    let p_norm = tape.row_sum(p_sq);
    let cross = tape.matmul(anchors, codes_t);
    let cross = tape.scale(cross, T::of(-2.0));
    let dist = tape.add_col(cross, p_norm);
    let dist = tape.add_row(dist, norms);
    let logits = tape.scale(dist, -tau.recip());
    let alpha = tape.softmax_rows(logits);
    let proto = tape.matmul(alpha, codes_c);
    let diff = tape.sub(anchors, proto);
    let sq = tape.square(diff);
    tape.row_sum(sq)
}

/// Anchor vectors for each item of the batch at every depth.
pub fn anchor_vectors<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &QuantizerModel<T>,
    tag_ids: &[Vec<usize>],
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(model.config.levels);
    for l in 0..model.config.levels {
        let ids: Vec<usize> = tag_ids.iter().map(|t| t[l]).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= model.tag_vocab_sizes[l]) {
            return Err(Error::InvalidArgument(format!(
                "tag index {bad} out of vocabulary of size {} at depth {l}",
                model.tag_vocab_sizes[l]
            )));
        }
        let table = match &model.anchors {
            AnchorSource::Projected { tag_text, proj } => {
                let t = tape.param(tag_text[l]);
                proj.forward(tape, t)
            }
            AnchorSource::Free(tables) => tape.param(tables[l]),
        };
        out.push(tape.gather_rows(table, &ids));
    }
    Ok(out)
}

/// Batch mean of `sum_l ||p_l - p~_l||^2 + CE(cls_l(q_1..q_l), t_l)`.
///
/// `codes_st[l]` carries the value of `q_l`; its gradient path is up to the
/// caller (straight-through to `z` during training).
pub fn hsa_terms<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &QuantizerModel<T>,
    anchors: &[Var],
    codes_st: &[Var],
    tag_ids: &[Vec<usize>],
) -> Result<Var> {
    let tau = T::of(model.config.tau_hsa);
    let mut total: Option<Var> = None;
    for l in 0..model.config.levels {
        let targets: Vec<usize> = tag_ids.iter().map(|t| t[l]).collect();
        if let Some(&bad) = targets.iter().find(|&&t| t >= model.tag_vocab_sizes[l]) {
            return Err(Error::InvalidArgument(format!(
                "tag index {bad} out of vocabulary at depth {l}"
            )));
        }
        let anchor_sq = soft_prototype_term(tape, anchors[l], &model.codebooks.levels[l].codes, tau);
        let h = tape.concat_cols(&codes_st[..=l]);
        let logits = model.classifiers[l].forward(tape, h);
        let ce = tape.cross_entropy(logits, &targets, None);
        let per_row = tape.add(anchor_sq, ce);
        total = Some(match total {
            Some(t) => tape.add(t, per_row),
            None => per_row,
        });
    }
    let total = total.expect("at least one level");
    Ok(tape.mean(total))
}

/// Full quantizer objective on a batch of catalog items:
/// `dhr + beta * commit + lambda_acd * acd + lambda_hsa * hsa`.
pub fn psq_forward<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    model: &QuantizerModel<T>,
    features: &FeatureSet<T>,
    items: &[usize],
    mode: QuantMode<'_, T>,
) -> Result<PsqForward<T>> {
    let cfg = &model.config;
    let b = items.len();
    let e_cont = tape.constant(features.content.select_rows(items));
    let e_collab = tape.constant(features.collab.select_rows(items));
    let gate = if cfg.use_acd {
        let logits = model.gate.forward(tape, e_collab);
        Some(tape.sigmoid(logits))
    } else {
        None
    };
    let purified = match gate {
        Some(g) => tape.mul(g, e_collab),
        None => e_collab,
    };
    let x = tape.concat_cols(&[e_cont, purified]);
    let z = model.encoder.forward(tape, x);

    let quant: Vec<QuantizationResult<T>> = match mode {
        QuantMode::Fresh => {
            let zv = tape.value(z);
            (0..b)
                .map(|i| model.codebooks.residual_quantize(zv.row(i)))
                .collect::<Result<_>>()?
        }
        QuantMode::Frozen(q) => {
            if q.len() != b {
                return Err(Error::dim("frozen quantization rows", b, q.len()));
            }
            q.to_vec()
        }
    };
    let d_cb = cfg.code_dim;
    // Straight-through: decoder input = z + sg(z_q - z), with offsets taken
    // from the quantization's own `z` so that frozen mode stays a smooth
    // function of the parameters.
    let offset = Tensor::from_fn(b, d_cb, |i, j| quant[i].z_q[j] - quant[i].z()[j]);
    let offset = tape.constant(offset);
    let dec_in = tape.add(z, offset);
    let cont_hat = model.dec_cont.forward(tape, dec_in);
    let collab_hat = model.dec_collab.forward(tape, dec_in);
    let dhr = dhr_term(tape, e_cont, cont_hat, purified, collab_hat);

    let z_q = Tensor::from_fn(b, d_cb, |i, j| quant[i].z_q[j]);
    let commit = commit_term(tape, z, &z_q);

    let weighted = tape_scaled(tape, commit, cfg.beta);
    let mut total = tape.add(dhr, weighted);
    let mut breakdown = LossBreakdown {
        dhr: scalar_of(tape, dhr),
        commit: scalar_of(tape, commit),
        ..LossBreakdown::default()
    };

    let mut terms = PsqTerms {
        dhr,
        commit,
        acd: None,
        hsa: None,
    };
    if let Some(g) = gate {
        let pop: Vec<T> = items.iter().map(|&i| T::of(features.popularity[i])).collect();
        let acd = acd_term(tape, g, &pop, T::of(cfg.delta));
        breakdown.acd = scalar_of(tape, acd);
        terms.acd = Some(acd);
        let weighted = tape_scaled(tape, acd, cfg.lambda_acd);
        total = tape.add(total, weighted);
    }

    if cfg.use_hsa {
        let tag_ids: Vec<Vec<usize>> = items.iter().map(|&i| features.tag_ids[i].clone()).collect();
        let anchors = anchor_vectors(tape, model, &tag_ids)?;
        let codes_st: Vec<Var> = (0..cfg.levels)
            .map(|l| {
                // q_l + (z - z_base): value q_l, gradient straight to z
                let off = Tensor::from_fn(b, d_cb, |i, j| quant[i].codes[l][j] - quant[i].z()[j]);
                let off = tape.constant(off);
                tape.add(z, off)
            })
            .collect();
        let hsa = hsa_terms(tape, model, &anchors, &codes_st, &tag_ids)?;
        breakdown.hsa = scalar_of(tape, hsa);
        terms.hsa = Some(hsa);
        let weighted = tape_scaled(tape, hsa, cfg.lambda_hsa);
        total = tape.add(total, weighted);
    }
    breakdown.total = scalar_of(tape, total);
    Ok(PsqForward {
        total,
        terms,
        breakdown,
        quant,
        z,
        gate,
    })
}

fn tape_scaled<T: Scalar>(tape: &mut Tape<'_, T>, v: Var, w: f64) -> Var {
    tape.scale(v, T::of(w))
}
