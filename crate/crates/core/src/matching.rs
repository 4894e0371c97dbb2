//! One-to-one node assignment between a predicted and a reference tree.
//!
//! The assignment maximizes total IoU. Weights are IoU values rounded to 12
//! decimal digits and stored as integers, so the solver is exact and the
//! result does not depend on floating-point summation order. The positive
//! weight graph is split into connected components and every component is
//! solved independently with the Hungarian algorithm.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::mask::iou_unchecked;
use crate::tree::{NodeId, OpenTree};

pub const DEFAULT_TAU_NODE: f64 = 0.5;

/// Scale used to turn IoU into integer assignment weights.
pub const IOU_SCALE: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("canvas mismatch: prediction is {0}x{1}, reference is {2}x{3}")]
    CanvasMismatch(u32, u32, u32, u32),
    #[error("tau_node must lie in (0, 1], got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub pred: NodeId,
    pub reference: NodeId,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Every assigned pair with positive IoU, ordered by predicted id.
    pub pairs: Vec<MatchedPair>,
    /// Pairs with `iou >= tau_node`.
    pub tp: Vec<MatchedPair>,
    /// Predicted nodes outside `tp`.
    pub fp: Vec<NodeId>,
    /// Reference nodes outside `tp`.
    pub fn_: Vec<NodeId>,
    pub tau_node: f64,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.tp.len()
    }

    /// Reference id matched to each TP predicted id.
    pub fn pred_to_ref(&self) -> HashMap<NodeId, NodeId> {
        self.tp.iter().map(|p| (p.pred, p.reference)).collect()
    }

    pub fn ref_to_pred(&self) -> HashMap<NodeId, NodeId> {
        self.tp.iter().map(|p| (p.reference, p.pred)).collect()
    }

    pub fn tp_pred_ids(&self) -> BTreeSet<NodeId> {
        self.tp.iter().map(|p| p.pred).collect()
    }

    pub fn tp_ref_ids(&self) -> BTreeSet<NodeId> {
        self.tp.iter().map(|p| p.reference).collect()
    }

    /// Sum of rounded assignment weights over all emitted pairs.
    pub fn total_weight(&self) -> i64 {
        self.pairs.iter().map(|p| iou_weight(p.iou)).sum()
    }
}

pub fn iou_weight(iou: f64) -> i64 {
    (iou * IOU_SCALE).round() as i64
}

/// Positive-IoU candidate pairs `(pred_index, ref_index, iou)` in row-major order.
///
/// Pairs whose bounding boxes do not overlap are skipped without touching the masks.
pub fn candidate_pairs(pred: &OpenTree, reference: &OpenTree) -> Vec<(usize, usize, f64)> {
    let pred_nodes: Vec<_> = pred.nodes().collect();
    let ref_nodes: Vec<_> = reference.nodes().collect();
    let ref_boxes: Vec<_> = ref_nodes.iter().map(|n| n.mask.bbox()).collect();
    let mut out = Vec::new();
    for (i, p) in pred_nodes.iter().enumerate() {
        let Some(pb) = p.mask.bbox() else { continue };
        for (j, r) in ref_nodes.iter().enumerate() {
            match ref_boxes[j] {
                Some(rb) if rb.overlaps(&pb) => {}
                _ => continue,
            }
            let v = iou_unchecked(&p.mask, &r.mask);
            if iou_weight(v) > 0 {
                out.push((i, j, v));
            }
        }
    }
    out
}

const INF: i64 = i64::MAX / 4;

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    debug_assert!(n <= m);
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Maximum-weight assignment on a dense non-negative weight matrix.
///
/// Returns the column assigned to each row; rows may stay unassigned when
/// there are more rows than columns.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        let cost: Vec<Vec<i64>> = weights
            .iter()
            .map(|r| r.iter().map(|&w| -w).collect())
            .collect();
        hungarian_min(&cost).into_iter().map(Some).collect()
    } else {
        let cost: Vec<Vec<i64>> = (0..cols)
            .map(|j| (0..rows).map(|i| -weights[i][j]).collect())
            .collect();
        let mut out = vec![None; rows];
        for (j, i) in hungarian_min(&cost).into_iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Optimal sparse assignment: `(row, col)` pairs with positive weight.
pub fn sparse_assignment(rows: usize, cols: usize, edges: &[(usize, usize, i64)]) -> Vec<(usize, usize)> {
    // Union-find over rows [0, rows) and columns [rows, rows + cols).
    let mut parent: Vec<usize> = (0..rows + cols).collect();
    for &(i, j, w) in edges {
        if w > 0 {
            let (a, b) = (find(&mut parent, i), find(&mut parent, rows + j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    for x in 0..rows + cols {
        let r = find(&mut parent, x);
        let k = *index.entry(r).or_insert_with(|| {
            comps.push((r, Vec::new(), Vec::new()));
            comps.len() - 1
        });
        if x < rows {
            comps[k].1.push(x);
        } else {
            comps[k].2.push(x - rows);
        }
    }
    let mut by_comp: HashMap<usize, Vec<(usize, usize, i64)>> = HashMap::new();
    for &(i, j, w) in edges {
        if w > 0 {
            by_comp.entry(find(&mut parent, i)).or_default().push((i, j, w));
        }
    }
    let mut out = Vec::new();
    for (root, crow, ccol) in &comps {
        if crow.is_empty() || ccol.is_empty() {
            continue;
        }
        let row_pos: HashMap<usize, usize> = crow.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let col_pos: HashMap<usize, usize> = ccol.iter().enumerate().map(|(k, &j)| (j, k)).collect();
        let mut dense = vec![vec![0i64; ccol.len()]; crow.len()];
        for &(i, j, w) in &by_comp[root] {
            dense[row_pos[&i]][col_pos[&j]] = w;
        }
        for (k, col) in max_weight_assignment(&dense).into_iter().enumerate() {
            if let Some(c) = col {
                if dense[k][c] > 0 {
                    out.push((crow[k], ccol[c]));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Matches non-root nodes of `pred` against `reference` by maximum total IoU
/// and partitions them into TP / FP / FN at `tau_node`.
pub fn match_trees(pred: &OpenTree, reference: &OpenTree, tau_node: f64) -> Result<MatchResult, MatchError> {
    if !(tau_node > 0.0 && tau_node <= 1.0) {
        return Err(MatchError::InvalidTau(tau_node));
    }
    let (pc, rc) = (pred.canvas(), reference.canvas());
    if !pc.same_dimensions(rc) {
        return Err(MatchError::CanvasMismatch(pc.width, pc.height, rc.width, rc.height));
    }
    let pred_ids: Vec<NodeId> = pred.ids().collect();
    let ref_ids: Vec<NodeId> = reference.ids().collect();
    let cands = candidate_pairs(pred, reference);
    let ious: HashMap<(usize, usize), f64> = cands.iter().map(|&(i, j, v)| ((i, j), v)).collect();
    let edges: Vec<(usize, usize, i64)> = cands.iter().map(|&(i, j, v)| (i, j, iou_weight(v))).collect();

    let pairs: Vec<MatchedPair> = sparse_assignment(pred_ids.len(), ref_ids.len(), &edges)
        .into_iter()
        .map(|(i, j)| MatchedPair {
            pred: pred_ids[i],
            reference: ref_ids[j],
            iou: ious[&(i, j)],
        })
        .collect();
    let tp: Vec<MatchedPair> = pairs.iter().copied().filter(|p| p.iou >= tau_node).collect();
    let tp_pred: BTreeSet<NodeId> = tp.iter().map(|p| p.pred).collect();
    let tp_ref: BTreeSet<NodeId> = tp.iter().map(|p| p.reference).collect();
    Ok(MatchResult {
        fp: pred_ids.iter().copied().filter(|id| !tp_pred.contains(id)).collect(),
        fn_: ref_ids.iter().copied().filter(|id| !tp_ref.contains(id)).collect(),
        pairs,
        tp,
        tau_node,
    })
}
