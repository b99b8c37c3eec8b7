use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use semrec_tape::nn::{Activation, LayerNorm, Linear, Mlp};
use semrec_tape::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use super::{ItemContext, RecommenderConfig};
use crate::error::{Error, Result};

/// Composite-input projections, router, experts and fusion scale.
#[derive(Clone, Debug)]
pub struct Dsi {
    pub cont_proj: Vec<Linear>,
    pub cont_norm: Vec<LayerNorm>,
    pub col_proj: Vec<Linear>,
    pub col_norm: Vec<LayerNorm>,
    pub router: Linear,
    pub experts: Vec<Mlp>,
    pub out: Linear,
    pub eta: ParamId,
    pub top_k: usize,
    pub d_x: usize,
}

impl Dsi {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &RecommenderConfig,
        depth: usize,
        d_cont: usize,
        d_collab: usize,
        d_cb: usize,
        rng: &mut R,
    ) -> Self {
        let d_x = cfg.d_model + 2 * cfg.d_proj + d_cb;
        let cont_proj = (0..depth)
            .map(|l| Linear::new(store, &format!("dsi.cont.{l}"), d_cont, cfg.d_proj, true, rng))
            .collect();
        let cont_norm = (0..depth)
            .map(|l| LayerNorm::new(store, &format!("dsi.cont_norm.{l}"), cfg.d_proj))
            .collect();
        let col_proj = (0..depth)
            .map(|l| Linear::new(store, &format!("dsi.col.{l}"), d_collab, cfg.d_proj, true, rng))
            .collect();
        let col_norm = (0..depth)
            .map(|l| LayerNorm::new(store, &format!("dsi.col_norm.{l}"), cfg.d_proj))
            .collect();
        let router = Linear::new(store, "dsi.router", d_x, cfg.n_experts, false, rng);
        let experts = (0..cfg.n_experts)
            .map(|i| Mlp::new(store, &format!("dsi.expert.{i}"), &[d_x, cfg.d_moe, d_x], Activation::Gelu, rng))
            .collect();
        let out = Linear::new(store, "dsi.out", d_x, cfg.d_model, false, rng);
        let eta = store.add("dsi.eta", Tensor::scalar(T::of(cfg.eta_init)));
        Self {
            cont_proj,
            cont_norm,
            col_proj,
            col_norm,
            router,
            experts,
            out,
            eta,
            top_k: cfg.top_k,
            d_x,
        }
    }
}

/// `x = e_id || LN(phi_cont(e_cont)) || LN(phi_col(e_collab)) || q`, one row per
/// token of item `items[r]` at depth `depths[r]`.
pub fn compose_input<T: Scalar>(
    tape: &mut Tape<'_, T>,
    dsi: &Dsi,
    e_id: Var,
    items: &[usize],
    depths: &[usize],
    ctx: &ItemContext<T>,
) -> Result<Var> {
    let rows = items.len();
    if depths.len() != rows || tape.shape(e_id).0 != rows {
        return Err(Error::dim("composite input rows", rows, depths.len().min(tape.shape(e_id).0)));
    }
    if let Some(&i) = items.iter().find(|&&i| i >= ctx.n_items()) {
        return Err(Error::InvalidArgument(format!("item {i} outside catalog")));
    }
    if let Some(&l) = depths.iter().find(|&&l| l >= ctx.depth()) {
        return Err(Error::InvalidArgument(format!("depth {l} outside SID length")));
    }
    let mut uniq: Vec<usize> = items.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let slot: HashMap<usize, usize> = uniq.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let u = uniq.len();
    let cont = tape.constant(ctx.content.select_rows(&uniq));
    let col = tape.constant(ctx.collab.select_rows(&uniq));
    let mut cont_tables = Vec::with_capacity(ctx.depth());
    let mut col_tables = Vec::with_capacity(ctx.depth());
    for l in 0..ctx.depth() {
        let c = dsi.cont_proj[l].forward(tape, cont);
        cont_tables.push(dsi.cont_norm[l].forward(tape, c));
        let e = dsi.col_proj[l].forward(tape, col);
        col_tables.push(dsi.col_norm[l].forward(tape, e));
    }
    let idx: Vec<usize> = items.iter().zip(depths).map(|(i, &l)| l * u + slot[i]).collect();
    let cont_all = tape.concat_rows(&cont_tables);
    let col_all = tape.concat_rows(&col_tables);
    let cont_rows = tape.gather_rows(cont_all, &idx);
    let col_rows = tape.gather_rows(col_all, &idx);
    let q = Tensor::from_fn(rows, ctx.d_cb(), |r, j| ctx.codes[depths[r]].get(items[r], j));
    let q = tape.constant(q);
    Ok(tape.concat_cols(&[e_id, cont_rows, col_rows, q]))
}

pub struct MoeOutput<T> {
    pub h: Var,
    /// Routing weights (zero for unselected experts).
    pub weights: Tensor<T>,
    /// Selected experts per row, best first.
    pub selected: Vec<Vec<usize>>,
    /// Rows each expert was evaluated on.
    pub evaluations: Vec<usize>,
}

/// Noisy top-K routing; only selected experts run, each on its own rows.
/// `noise` is drawn only when given (training).
pub fn moe_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    dsi: &Dsi,
    x: Var,
    noise: Option<&mut R>,
) -> Result<MoeOutput<T>> {
    let n = dsi.experts.len();
    if dsi.top_k > n {
        return Err(Error::InvalidArgument(format!("top-{} routing over {n} experts", dsi.top_k)));
    }
    let (rows, _) = tape.shape(x);
    let mut logits = dsi.router.forward(tape, x);
    if let Some(rng) = noise {
        let eps = Tensor::from_fn(rows, n, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)));
        let eps = tape.constant(eps);
        logits = tape.add(logits, eps);
    }
    let lv = tape.value(logits).clone();
    let mut selected = Vec::with_capacity(rows);
    let mut mask = Tensor::full(rows, n, T::neg_infinity());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..rows {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| lv.get(r, b).f64().total_cmp(&lv.get(r, a).f64()).then(a.cmp(&b)));
        order.truncate(dsi.top_k);
        for &e in &order {
            mask.set(r, e, T::zero());
            members[e].push(r);
        }
        selected.push(order);
    }
    for m in &mut members {
        m.sort_unstable();
    }
    let mask = tape.constant(mask);
    let masked = tape.add(logits, mask);
    let weights = tape.softmax_rows(masked);
    let mut h: Option<Var> = None;
    let mut evaluations = vec![0; n];
    for (e, rows_e) in members.iter().enumerate() {
        if rows_e.is_empty() {
            continue;
        }
        evaluations[e] = rows_e.len();
        let xe = tape.gather_rows(x, rows_e);
        let ye = dsi.experts[e].forward(tape, xe);
        let we = tape.slice_cols(weights, e, 1);
        let we = tape.gather_rows(we, rows_e);
        let contrib = tape.mul_col(ye, we);
        let full = tape.scatter_rows(contrib, rows_e, rows);
        h = Some(match h {
            Some(acc) => tape.add(acc, full),
            None => full,
        });
    }
    Ok(MoeOutput {
        h: h.expect("top_k >= 1 selects at least one expert"),
        weights: tape.value(weights).clone(),
        selected,
        evaluations,
    })
}

/// `e_fused = e_id + eta * phi_out(h)`.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, dsi: &Dsi, e_id: Var, h: Var) -> Var {
    let proj = dsi.out.forward(tape, h);
    let eta = tape.param(dsi.eta);
    let scaled = tape.mul_scalar(proj, eta);
    tape.add(e_id, scaled)
}
