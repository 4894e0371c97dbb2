//! Brute-force oracles shared by the integration tests. Everything here works
//! on expanded pixel arrays and plain parent lookups, independent of the
//! interval arithmetic and indexes used by the library.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use otq::matching::MatchResult;
use otq::{NodeId, OpenTree};

pub fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn pixel_overlap(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count()
}

/// Maximum total weight over all partial one-to-one assignments.
pub fn exhaustive_max(weights: &[Vec<i64>]) -> i64 {
    fn go(w: &[Vec<i64>], row: usize, used: &mut Vec<bool>) -> i64 {
        if row == w.len() {
            return 0;
        }
        let mut best = go(w, row + 1, used);
        for c in 0..used.len() {
            if !used[c] && w[row][c] > 0 {
                used[c] = true;
                best = best.max(w[row][c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = weights.first().map_or(0, |r| r.len());
    go(weights, 0, &mut vec![false; cols])
}

/// IoU weights between all pred (rows) and ref (columns) nodes in id order.
pub fn weight_matrix(pred: &OpenTree, reference: &OpenTree) -> Vec<Vec<i64>> {
    let pb: Vec<Vec<bool>> = pred.nodes().map(|n| n.mask.to_bits()).collect();
    let rb: Vec<Vec<bool>> = reference.nodes().map(|n| n.mask.to_bits()).collect();
    pb.iter()
        .map(|p| rb.iter().map(|r| (pixel_iou(p, r) * 1e12).round() as i64).collect())
        .collect()
}

pub fn matching_weight(m: &MatchResult) -> i64 {
    m.pairs.iter().map(|p| (p.iou * 1e12).round() as i64).sum()
}

/// Skeleton parents by the ancestor-climbing rule, scanning every node.
pub fn oracle_skeleton(tree: &OpenTree, keep: &BTreeSet<NodeId>) -> HashMap<NodeId, NodeId> {
    let bits: HashMap<NodeId, Vec<bool>> = tree.nodes().map(|n| (n.id, n.mask.to_bits())).collect();
    let mut out = HashMap::new();
    for &id in keep {
        let mine = &bits[&id];
        let mut attach = NodeId::ROOT;
        let mut anc = tree.node(id).unwrap().parent;
        while !anc.is_root() {
            let a = tree.node(anc).unwrap();
            let mut best: Option<(f64, NodeId)> = None;
            for cand in tree.nodes() {
                if cand.parent != a.parent || cand.label != a.label || !keep.contains(&cand.id) {
                    continue;
                }
                if pixel_overlap(mine, &bits[&cand.id]) == 0 {
                    continue;
                }
                let v = pixel_iou(mine, &bits[&cand.id]);
                let better = match best {
                    None => true,
                    Some((bv, bid)) => v > bv || (v == bv && cand.id < bid),
                };
                if better {
                    best = Some((v, cand.id));
                }
            }
            if let Some((_, c)) = best {
                attach = c;
                break;
            }
            anc = a.parent;
        }
        out.insert(id, attach);
    }
    out
}

pub fn oracle_lca(parent: &HashMap<NodeId, NodeId>, a: NodeId, b: NodeId) -> NodeId {
    let mut seen = HashSet::new();
    let mut x = a;
    while !x.is_root() {
        seen.insert(x);
        x = parent[&x];
    }
    let mut y = b;
    while !y.is_root() {
        if seen.contains(&y) {
            return y;
        }
        y = parent[&y];
    }
    NodeId::ROOT
}

/// (pairs, consistent) over all unordered TP pairs of the assignment in `m`,
/// re-deriving TP from the assigned IoUs.
pub fn oracle_branch_counts(pred: &OpenTree, reference: &OpenTree, m: &MatchResult) -> (u64, u64) {
    let tp: Vec<_> = m.pairs.iter().filter(|p| p.iou >= m.tau_node).copied().collect();
    let tp_pred: BTreeSet<NodeId> = tp.iter().map(|p| p.pred).collect();
    let tp_ref: BTreeSet<NodeId> = tp.iter().map(|p| p.reference).collect();
    let sp = oracle_skeleton(pred, &tp_pred);
    let sr = oracle_skeleton(reference, &tp_ref);
    let to_pred: HashMap<NodeId, NodeId> = tp.iter().map(|p| (p.reference, p.pred)).collect();
    let (mut pairs, mut consistent) = (0, 0);
    for (i, a) in tp.iter().enumerate() {
        for b in &tp[i + 1..] {
            let g = oracle_lca(&sr, a.reference, b.reference);
            let p = oracle_lca(&sp, a.pred, b.pred);
            let mapped = if g.is_root() { NodeId::ROOT } else { to_pred[&g] };
            pairs += 1;
            if mapped == p {
                consistent += 1;
            }
        }
    }
    (pairs, consistent)
}

pub fn oracle_bq(pred: &OpenTree, reference: &OpenTree, m: &MatchResult) -> f64 {
    let (pairs, consistent) = oracle_branch_counts(pred, reference, m);
    if pairs == 0 {
        1.0
    } else {
        consistent as f64 / pairs as f64
    }
}

/// Fraction of node pairs whose LCA in the raw reference tree is the root.
pub fn root_lca_fraction(tree: &OpenTree) -> f64 {
    let parent: HashMap<NodeId, NodeId> = tree.nodes().map(|n| (n.id, n.parent)).collect();
    let ids: Vec<NodeId> = tree.ids().collect();
    let (mut pairs, mut at_root) = (0u64, 0u64);
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            pairs += 1;
            if oracle_lca(&parent, a, b).is_root() {
                at_root += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        at_root as f64 / pairs as f64
    }
}
