//! Global collision removal by entropic optimal transport.
//!
//! Within each group of items sharing a full SID, the item quantized most
//! faithfully keeps the SID. Every other item is moved to an unused SID near
//! its latent. Movers and candidate SIDs form one sparse transport problem
//! solved with log-domain Sinkhorn iterations, then rounded to a one-to-one
//! assignment.

use std::collections::{BTreeMap, HashMap, HashSet};

use semrec_tape::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::diagnostics::MoveSummary;
use crate::error::{Error, Result};
use crate::quantizer::CodebookStack;
use crate::sid::SemanticId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupConfig {
    /// Candidate SIDs kept per moving item at each widening step.
    pub candidate_cap: usize,
    /// Entropic regularization as a multiple of the median candidate cost.
    pub eps_scale: f64,
    /// Sweeps per annealing stage.
    pub max_iter: usize,
    /// Extra stages after the first, each dividing epsilon by 4 and warm
    /// starting from the previous potentials.
    pub anneal_steps: usize,
    /// Stop once every row marginal is within this distance of its target.
    pub tol: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            candidate_cap: 64,
            eps_scale: 0.05,
            max_iter: 500,
            anneal_steps: 5,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub item: usize,
    pub old: SemanticId,
    pub new: SemanticId,
    pub cost: f64,
    /// Number of trailing levels that were allowed to change.
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SinkhornStats {
    pub iterations: usize,
    pub converged: bool,
    /// Largest row-marginal violation at exit (columns are exact after each sweep).
    pub marginal_error: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupAssignment {
    pub sids: Vec<SemanticId>,
    pub moves: Vec<Move>,
    pub stats: Option<SinkhornStats>,
}

impl DedupAssignment {
    pub fn summary(&self) -> MoveSummary {
        let moved = self.moves.len();
        let width = self.moves.iter().map(|m| m.width).max().unwrap_or(0);
        let mut by_width = vec![0; width];
        for m in &self.moves {
            by_width[m.width - 1] += 1;
        }
        MoveSummary {
            moved,
            mean_cost: if moved == 0 {
                0.0
            } else {
                self.moves.iter().map(|m| m.cost).sum::<f64>() / moved as f64
            },
            max_cost: self.moves.iter().map(|m| m.cost).fold(0.0, f64::max),
            by_width,
        }
    }
}

/// Rows of `(column, cost)` pairs; each row must be matched to a distinct column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCost {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_cols: usize,
}

impl SparseCost {
    pub fn dense(cost: &[Vec<f64>]) -> Self {
        let n_cols = cost.first().map(Vec::len).unwrap_or(0);
        Self {
            rows: cost.iter().map(|r| r.iter().copied().enumerate().collect()).collect(),
            n_cols,
        }
    }
}

/// Entropic transport plan between unit-mass rows and unit-capacity columns.
/// Surplus column capacity is absorbed by a zero-cost slack row.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// Mass on each sparse entry, aligned with `SparseCost::rows`.
    pub mass: Vec<Vec<f64>>,
    /// Mass the slack row sends to each column.
    pub slack: Vec<f64>,
    pub stats: SinkhornStats,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Log-domain Sinkhorn on a sparse cost matrix, annealing epsilon from
/// `eps_scale * median(cost)` down by a factor of 4 per stage.
pub fn sinkhorn_plan(cost: &SparseCost, cfg: &DedupConfig) -> Result<TransportPlan> {
    let m = cost.rows.len();
    let n = cost.n_cols;
    if m > n {
        return Err(Error::SidSpaceSaturated(format!("{m} rows but only {n} columns")));
    }
    if let Some(i) = cost.rows.iter().position(Vec::is_empty) {
        return Err(Error::SidSpaceSaturated(format!("row {i} has no candidates")));
    }
    let mut all: Vec<f64> = cost.rows.iter().flatten().map(|&(_, c)| c).collect();
    let mut eps0 = cfg.eps_scale * median(&mut all);
    if !(eps0 > 0.0 && eps0.is_finite()) {
        eps0 = 1e-6;
    }
    let slack_mass = (n - m) as f64;
    let log_slack = if slack_mass > 0.0 { slack_mass.ln() } else { f64::NEG_INFINITY };

    // column -> (row, entry) incidence
    let mut by_col: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, row) in cost.rows.iter().enumerate() {
        for (e, &(j, _)) in row.iter().enumerate() {
            by_col[j].push((i, e));
        }
    }
    let mut f = vec![0.0; m];
    let mut f_slack = 0.0;
    let mut g = vec![0.0; n];
    let mut stats = SinkhornStats::default();
    for stage in 0..=cfg.anneal_steps {
        let eps = eps0 / 4f64.powi(stage as i32);
        stats = SinkhornStats {
            epsilon: eps,
            ..SinkhornStats::default()
        };
        let last = stage == cfg.anneal_steps;
        let tol = if last { cfg.tol } else { cfg.tol.max(1e-3) };
        sinkhorn_sweeps(cost, cfg, &by_col, eps, tol, log_slack, &mut f, &mut f_slack, &mut g, &mut stats);
        if !last && stats.converged && near_integral(cost, &f, &g, eps) {
            break;
        }
    }
    if !stats.converged {
        log::warn!(
            "sinkhorn stopped after {} iterations with marginal error {:.3e}; rounding anyway",
            stats.iterations,
            stats.marginal_error
        );
    }
    let eps = stats.epsilon;
    let mass = cost
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|&(j, c)| ((f[i] + g[j] - c) / eps).exp()).collect())
        .collect();
    let slack = if slack_mass > 0.0 {
        g.iter().map(|&gj| ((f_slack + gj) / eps).exp()).collect()
    } else {
        vec![0.0; n]
    };
    Ok(TransportPlan { mass, slack, stats })
}

/// True once every row puts almost all of its mass on one column.
fn near_integral(cost: &SparseCost, f: &[f64], g: &[f64], eps: f64) -> bool {
    cost.rows.iter().zip(f).all(|(row, &fi)| {
        row.iter()
            .map(|&(j, c)| ((fi + g[j] - c) / eps).exp())
            .fold(0.0, f64::max)
            > 0.999
    })
}

#[allow(clippy::too_many_arguments)]
fn sinkhorn_sweeps(
    cost: &SparseCost,
    cfg: &DedupConfig,
    by_col: &[Vec<(usize, usize)>],
    eps: f64,
    tol: f64,
    log_slack: f64,
    f: &mut [f64],
    f_slack: &mut f64,
    g: &mut [f64],
    stats: &mut SinkhornStats,
) {
    let has_slack = log_slack > f64::NEG_INFINITY;
    for it in 0..cfg.max_iter {
        for (i, row) in cost.rows.iter().enumerate() {
            f[i] = -eps * log_sum_exp(row.iter().map(|&(j, c)| (g[j] - c) / eps));
        }
        if has_slack {
            *f_slack = eps * log_slack - eps * log_sum_exp(g.iter().map(|&gj| gj / eps));
        }
        for (j, inc) in by_col.iter().enumerate() {
            let real = inc.iter().map(|&(i, e)| (f[i] - cost.rows[i][e].1) / eps);
            let lse = if has_slack {
                log_sum_exp(real.chain(std::iter::once(*f_slack / eps)))
            } else {
                log_sum_exp(real)
            };
            g[j] = -eps * lse;
        }
        let err = cost
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let s: f64 = row.iter().map(|&(j, c)| ((f[i] + g[j] - c) / eps).exp()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max);
        stats.iterations = it + 1;
        stats.marginal_error = err;
        if err < tol {
            stats.converged = true;
            break;
        }
    }
}

/// Greedy rounding by descending transport mass, then augmenting paths for
/// rows left unmatched. Returns the column chosen for each row.
pub fn round_plan(cost: &SparseCost, plan: &TransportPlan) -> Result<Vec<usize>> {
    let m = cost.rows.len();
    let mut entries: Vec<(usize, usize)> = cost
        .rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| (0..row.len()).map(move |e| (i, e)))
        .collect();
    entries.sort_by(|&(i1, e1), &(i2, e2)| {
        plan.mass[i2][e2]
            .total_cmp(&plan.mass[i1][e1])
            .then(cost.rows[i1][e1].1.total_cmp(&cost.rows[i2][e2].1))
            .then((i1, e1).cmp(&(i2, e2)))
    });
    let mut row_to = vec![usize::MAX; m];
    let mut col_to = vec![usize::MAX; cost.n_cols];
    for (i, e) in entries {
        let j = cost.rows[i][e].0;
        if row_to[i] == usize::MAX && col_to[j] == usize::MAX {
            row_to[i] = j;
            col_to[j] = i;
        }
    }
    // Cheapest-first adjacency for the repair search.
    let adj: Vec<Vec<usize>> = cost
        .rows
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            r.into_iter().map(|(j, _)| j).collect()
        })
        .collect();
    for i in 0..m {
        if row_to[i] != usize::MAX {
            continue;
        }
        let mut seen = vec![false; cost.n_cols];
        if !augment(i, &adj, &mut row_to, &mut col_to, &mut seen) {
            return Err(Error::SidSpaceSaturated(format!("no feasible column for row {i}")));
        }
    }
    Ok(row_to)
}

fn augment(i: usize, adj: &[Vec<usize>], row_to: &mut [usize], col_to: &mut [usize], seen: &mut [bool]) -> bool {
    // Iterative DFS to keep deep repairs off the call stack.
    let mut stack: Vec<(usize, usize)> = vec![(i, 0)];
    let mut path: Vec<(usize, usize)> = Vec::new();
    while let Some(&mut (r, ref mut next)) = stack.last_mut() {
        if *next >= adj[r].len() {
            stack.pop();
            path.pop();
            continue;
        }
        let j = adj[r][*next];
        *next += 1;
        if seen[j] {
            continue;
        }
        seen[j] = true;
        path.truncate(stack.len() - 1);
        path.push((r, j));
        if col_to[j] == usize::MAX {
            for &(r, j) in &path {
                row_to[r] = j;
                col_to[j] = r;
            }
            return true;
        }
        stack.push((col_to[j], 0));
    }
    false
}

/// Solves a rectangular assignment (rows ≤ columns) by Sinkhorn plus rounding.
pub fn sinkhorn_assign(cost: &SparseCost, cfg: &DedupConfig) -> Result<(Vec<usize>, SinkhornStats)> {
    let plan = sinkhorn_plan(cost, cfg)?;
    let assignment = round_plan(cost, &plan)?;
    Ok((assignment, plan.stats))
}

fn cost_to<T: Scalar>(z: &[T], partial: &[f64]) -> f64 {
    z.iter().zip(partial).map(|(&a, &b)| (a.f64() - b).powi(2)).sum()
}

/// Up to `cap` unused SIDs that share `sid`'s first `L - width` codes,
/// cheapest first. Width 1 is enumerated exactly; wider suffixes are
/// searched with a beam over levels.
fn candidates<T: Scalar>(
    z: &[T],
    sid: &SemanticId,
    width: usize,
    codebooks: &CodebookStack<T>,
    used: &HashSet<SemanticId>,
    cap: usize,
) -> Vec<(SemanticId, f64)> {
    let depth = codebooks.depth();
    let k = codebooks.size();
    let fixed = depth - width;
    let mut base = vec![0.0; codebooks.dim()];
    for l in 0..fixed {
        for (b, &c) in base.iter_mut().zip(codebooks.levels[l].codes.row(sid.codes()[l] as usize)) {
            *b += c.f64();
        }
    }
    let beam_width = (4 * cap).max(k);
    let mut beam: Vec<(Vec<u16>, Vec<f64>, f64)> = vec![(sid.prefix(fixed).to_vec(), base, 0.0)];
    for l in fixed..depth {
        let last = l + 1 == depth;
        let mut next = Vec::with_capacity(beam.len() * k);
        for (codes, partial, _) in &beam {
            for c in 0..k {
                let mut p = partial.clone();
                for (x, &e) in p.iter_mut().zip(codebooks.levels[l].codes.row(c)) {
                    *x += e.f64();
                }
                let mut cs = codes.clone();
                cs.push(c as u16);
                if last && used.contains(&SemanticId::new(cs.clone())) {
                    continue;
                }
                let d = cost_to(z, &p);
                next.push((cs, p, d));
            }
        }
        next.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
        next.truncate(if last { cap } else { beam_width });
        beam = next;
    }
    beam.into_iter().map(|(c, _, d)| (SemanticId::new(c), d)).collect()
}

/// Removes every full-SID collision.
///
/// `z` holds one latent row per item, `item_ids` break keeper ties.
pub fn sinkhorn_dedup<T: Scalar>(
    sids: &[SemanticId],
    z: &Tensor<T>,
    item_ids: &[String],
    codebooks: &CodebookStack<T>,
    cfg: &DedupConfig,
) -> Result<DedupAssignment> {
    let n = sids.len();
    if z.rows() != n || item_ids.len() != n {
        return Err(Error::dim("dedup inputs", n, z.rows().min(item_ids.len())));
    }
    if z.cols() != codebooks.dim() {
        return Err(Error::dim("latent width", codebooks.dim(), z.cols()));
    }
    if let Some(s) = sids.iter().find(|s| s.len() != codebooks.depth()) {
        return Err(Error::dim("SID length", codebooks.depth(), s.len()));
    }
    let mut groups: BTreeMap<&SemanticId, Vec<usize>> = BTreeMap::new();
    for (i, s) in sids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let residual = |i: usize| cost_to(z.row(i), &codebooks.reconstruct(&sids[i]).iter().map(|x| x.f64()).collect::<Vec<_>>());
    let mut movers = Vec::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let keeper = *members
            .iter()
            .min_by(|&&a, &&b| {
                residual(a)
                    .total_cmp(&residual(b))
                    .then_with(|| item_ids[a].cmp(&item_ids[b]))
            })
            .expect("nonempty group");
        movers.extend(members.iter().copied().filter(|&i| i != keeper));
    }
    movers.sort_unstable();
    if movers.is_empty() {
        return Ok(DedupAssignment {
            sids: sids.to_vec(),
            moves: Vec::new(),
            stats: None,
        });
    }
    let used: HashSet<SemanticId> = groups.keys().map(|s| (*s).clone()).collect();
    let space = (codebooks.size() as f64).powi(codebooks.depth() as i32);
    if space - (used.len() as f64) < movers.len() as f64 {
        return Err(Error::SidSpaceSaturated(format!(
            "{} items need new SIDs but only {} are free",
            movers.len(),
            space as u64 - used.len() as u64
        )));
    }

    let depth = codebooks.depth();
    let mut width = vec![1usize; movers.len()];
    let mut cands: Vec<Vec<(SemanticId, f64)>> = movers
        .iter()
        .map(|&i| candidates(z.row(i), &sids[i], 1, codebooks, &used, cfg.candidate_cap))
        .collect();
    loop {
        let (cost, columns) = build_problem(&cands);
        let unmatched = unmatched_rows(&cost);
        if unmatched.is_empty() {
            let (assignment, stats) = assign_components(&cost, cfg)?;
            let mut out = sids.to_vec();
            let mut moves = Vec::with_capacity(movers.len());
            for (r, &i) in movers.iter().enumerate() {
                let col = assignment[r];
                let new = columns[col].clone();
                let c = cost.rows[r].iter().find(|e| e.0 == col).map(|e| e.1).unwrap_or(f64::NAN);
                moves.push(Move {
                    item: i,
                    old: sids[i].clone(),
                    new: new.clone(),
                    cost: c,
                    width: width[r],
                });
                out[i] = new;
            }
            return Ok(DedupAssignment {
                sids: out,
                moves,
                stats: Some(stats),
            });
        }
        let mut widened = false;
        for r in unmatched {
            if width[r] < depth {
                width[r] += 1;
                let i = movers[r];
                let extra = candidates(z.row(i), &sids[i], width[r], codebooks, &used, cfg.candidate_cap);
                let mut merged = cands[r].clone();
                merged.extend(extra);
                merged.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
                merged.dedup_by(|a, b| a.0 == b.0);
                cands[r] = merged;
                widened = true;
            }
        }
        if !widened {
            return Err(Error::SidSpaceSaturated(
                "candidate neighbourhoods exhausted at full width".into(),
            ));
        }
    }
}

/// Solves each connected component of the candidate graph on its own and
/// merges the stats (worst case over components).
fn assign_components(cost: &SparseCost, cfg: &DedupConfig) -> Result<(Vec<usize>, SinkhornStats)> {
    let m = cost.rows.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut owner = vec![usize::MAX; cost.n_cols];
    for (i, row) in cost.rows.iter().enumerate() {
        for &(j, _) in row {
            if owner[j] == usize::MAX {
                owner[j] = i;
            } else {
                let (a, b) = (find(&mut parent, owner[j]), find(&mut parent, i));
                parent[a] = b;
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        let root = find(&mut parent, i);
        comps.entry(root).or_default().push(i);
    }
    let mut assignment = vec![usize::MAX; m];
    let mut merged = SinkhornStats {
        converged: true,
        ..SinkhornStats::default()
    };
    for rows in comps.values() {
        let mut cols: Vec<usize> = rows.iter().flat_map(|&i| cost.rows[i].iter().map(|e| e.0)).collect();
        cols.sort_unstable();
        cols.dedup();
        let local: HashMap<usize, usize> = cols.iter().enumerate().map(|(k, &j)| (j, k)).collect();
        let sub = SparseCost {
            rows: rows
                .iter()
                .map(|&i| cost.rows[i].iter().map(|&(j, c)| (local[&j], c)).collect())
                .collect(),
            n_cols: cols.len(),
        };
        let (a, st) = sinkhorn_assign(&sub, cfg)?;
        for (&i, k) in rows.iter().zip(a) {
            assignment[i] = cols[k];
        }
        merged.iterations = merged.iterations.max(st.iterations);
        merged.converged &= st.converged;
        merged.marginal_error = merged.marginal_error.max(st.marginal_error);
        merged.epsilon = merged.epsilon.max(st.epsilon);
    }
    Ok((assignment, merged))
}

fn build_problem(cands: &[Vec<(SemanticId, f64)>]) -> (SparseCost, Vec<SemanticId>) {
    let mut index: HashMap<&SemanticId, usize> = HashMap::new();
    let mut columns: Vec<SemanticId> = Vec::new();
    let mut all: Vec<&SemanticId> = cands.iter().flatten().map(|(s, _)| s).collect();
    all.sort();
    all.dedup();
    for s in all {
        index.insert(s, columns.len());
        columns.push(s.clone());
    }
    let rows = cands
        .iter()
        .map(|row| row.iter().map(|(s, c)| (index[s], *c)).collect())
        .collect();
    (
        SparseCost {
            rows,
            n_cols: columns.len(),
        },
        columns,
    )
}

/// Rows left uncovered by a maximum matching of the candidate graph.
fn unmatched_rows(cost: &SparseCost) -> Vec<usize> {
    let adj: Vec<Vec<usize>> = cost.rows.iter().map(|r| r.iter().map(|e| e.0).collect()).collect();
    let mut row_to = vec![usize::MAX; cost.rows.len()];
    let mut col_to = vec![usize::MAX; cost.n_cols];
    let mut out = Vec::new();
    for i in 0..cost.rows.len() {
        let mut seen = vec![false; cost.n_cols];
        if !augment(i, &adj, &mut row_to, &mut col_to, &mut seen) {
            out.push(i);
        }
    }
    out
}

/// Total cost of an assignment (`assignment[r]` is the column of row `r`).
pub fn assignment_cost(cost: &SparseCost, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(r, &j)| {
            cost.rows[r]
                .iter()
                .find(|e| e.0 == j)
                .map(|e| e.1)
                .unwrap_or(f64::INFINITY)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::Codebook;

    fn line_codebooks() -> CodebookStack<f64> {
        // Level 1 spreads along x, level 2 along y with small steps.
        let l1 = Tensor::from_fn(4, 2, |k, j| if j == 0 { k as f64 } else { 0.0 });
        let l2 = Tensor::from_fn(4, 2, |k, j| if j == 1 { 0.1 * k as f64 } else { 0.0 });
        CodebookStack::new(vec![Codebook::from_codes(l1), Codebook::from_codes(l2)]).unwrap()
    }

    #[test]
    fn no_collision_is_identity() {
        let cb = line_codebooks();
        let sids = vec![SemanticId::new(vec![0, 0]), SemanticId::new(vec![1, 0])];
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let out = sinkhorn_dedup(&sids, &z, &["a".into(), "b".into()], &cb, &DedupConfig::default()).unwrap();
        assert_eq!(out.sids, sids);
        assert!(out.moves.is_empty());
    }

    #[test]
    fn worse_quantized_item_moves() {
        let cb = line_codebooks();
        let sids = vec![SemanticId::new(vec![2, 0]); 2];
        let z = Tensor::from_rows(&[vec![2.0, 0.29], vec![2.0, 0.01]]);
        let out = sinkhorn_dedup(&sids, &z, &["a".into(), "b".into()], &cb, &DedupConfig::default()).unwrap();
        assert_eq!(out.sids[1], SemanticId::new(vec![2, 0]));
        assert_eq!(out.sids[0], SemanticId::new(vec![2, 3]));
        assert_eq!(out.moves.len(), 1);
    }

    #[test]
    fn keeper_tie_goes_to_smaller_id() {
        let cb = line_codebooks();
        let sids = vec![SemanticId::new(vec![1, 1]); 2];
        let z = Tensor::from_rows(&[vec![1.0, 0.1], vec![1.0, 0.1]]);
        let out = sinkhorn_dedup(&sids, &z, &["zz".into(), "aa".into()], &cb, &DedupConfig::default()).unwrap();
        assert_eq!(out.sids[1], SemanticId::new(vec![1, 1]));
        assert_eq!(out.moves[0].item, 0);
    }

    #[test]
    fn widens_past_a_full_last_level() {
        let cb = line_codebooks();
        let mut sids: Vec<SemanticId> = (0..4).map(|c| SemanticId::new(vec![0, c])).collect();
        sids.push(SemanticId::new(vec![0, 0]));
        let z = Tensor::from_fn(5, 2, |_, _| 0.0);
        let ids: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let out = sinkhorn_dedup(&sids, &z, &ids, &cb, &DedupConfig::default()).unwrap();
        assert_eq!(out.moves.len(), 1);
        assert_eq!(out.moves[0].width, 2);
        assert_eq!(out.moves[0].new.codes()[0], 1);
    }

    #[test]
    fn saturated_space_is_reported() {
        let l = Codebook::from_codes(Tensor::from_fn(2, 1, |k, _| k as f64));
        let cb = CodebookStack::new(vec![l]).unwrap();
        let sids = vec![SemanticId::new(vec![0]); 3];
        let z = Tensor::zeros(3, 1);
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let err = sinkhorn_dedup(&sids, &z, &ids, &cb, &DedupConfig::default()).unwrap_err();
        assert!(err.to_string().contains("SID space saturated"));
    }

    #[test]
    fn plan_marginals_match() {
        let cost = SparseCost::dense(&[vec![1.0, 2.0, 3.0], vec![2.0, 0.5, 1.0]]);
        let cfg = DedupConfig {
            max_iter: 100_000,
            ..DedupConfig::default()
        };
        let plan = sinkhorn_plan(&cost, &cfg).unwrap();
        assert!(plan.stats.converged);
        for row in &plan.mass {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for j in 0..3 {
            let col: f64 = plan.mass.iter().map(|r| r[j]).sum::<f64>() + plan.slack[j];
            assert!((col - 1.0).abs() < 1e-6);
        }
    }
}
