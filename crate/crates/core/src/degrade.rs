//! Seeded corruptions of reference trees for metric audits.
//!
//! Every image draws from its own ChaCha8 stream seeded with
//! `SHA-256(seed_le_bytes || image_id)`, so a degraded corpus is identical
//! regardless of thread count or image order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mask::{dilate, erode};
use crate::tree::{InstanceNode, NodeId, OpenTree};

/// Keep ratios of the standard audit sweep.
pub const SWEEP_KEEP_RATIOS: [f64; 4] = [0.75, 0.50, 0.30, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeKind {
    MaskErosion,
    MaskDilation,
    ParentRewire,
    InternalNodeMissing,
    LeafNodeMissing,
    RandomNodeMissing,
}

impl DegradeKind {
    pub const ALL: [DegradeKind; 6] = [
        DegradeKind::MaskErosion,
        DegradeKind::MaskDilation,
        DegradeKind::ParentRewire,
        DegradeKind::InternalNodeMissing,
        DegradeKind::LeafNodeMissing,
        DegradeKind::RandomNodeMissing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradeKind::MaskErosion => "mask_erosion",
            DegradeKind::MaskDilation => "mask_dilation",
            DegradeKind::ParentRewire => "parent_rewire",
            DegradeKind::InternalNodeMissing => "internal_node_missing",
            DegradeKind::LeafNodeMissing => "leaf_node_missing",
            DegradeKind::RandomNodeMissing => "random_node_missing",
        }
    }
}

impl fmt::Display for DegradeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DegradeError {
    #[error("unknown degradation kind {0:?}")]
    UnknownKind(String),
    #[error("keep ratio must lie in (0, 1], got {0}")]
    InvalidKeep(f64),
}

impl FromStr for DegradeKind {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DegradeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DegradeError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// Mask-area keep for erosion, inverse growth for dilation, fraction of
    /// untouched nodes for the structural kinds.
    pub keep_ratio: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn new(kind: DegradeKind, keep_ratio: f64, seed: u64) -> Result<Self, DegradeError> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(DegradeError::InvalidKeep(keep_ratio));
        }
        Ok(DegradeSpec {
            kind,
            keep_ratio,
            seed,
        })
    }
}

/// Per-image generator derived from the corpus seed.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `ceil((1 - keep) * pool)`, ignoring float noise below 1e-9.
pub fn corruption_count(keep_ratio: f64, pool: usize) -> usize {
    let raw = (1.0 - keep_ratio) * pool as f64;
    let n = (raw - 1e-9).ceil().max(0.0) as usize;
    n.min(pool)
}

fn sample_ids(rng: &mut ChaCha8Rng, pool: &[NodeId], keep_ratio: f64, what: &str) -> Vec<NodeId> {
    let wanted = ((1.0 - keep_ratio) * pool.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let k = corruption_count(keep_ratio, pool.len());
    if wanted > k {
        log::warn!("requested {wanted} {what} but only {} exist; corrupting all", pool.len());
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

fn rewire(tree: &OpenTree, keep_ratio: f64, rng: &mut ChaCha8Rng) -> OpenTree {
    let ids: Vec<NodeId> = tree.ids().collect();
    let chosen = sample_ids(rng, &ids, keep_ratio, "nodes");
    let mut parent: BTreeMap<NodeId, NodeId> = tree.nodes().map(|n| (n.id, n.parent)).collect();
    let is_descendant = |parent: &BTreeMap<NodeId, NodeId>, c: NodeId, v: NodeId| {
        let mut cur = c;
        loop {
            if cur == v {
                return true;
            }
            match parent.get(&cur) {
                Some(&p) => cur = p,
                None => return false,
            }
        }
    };
    for v in chosen {
        let current = parent[&v];
        let candidates: Vec<NodeId> = std::iter::once(NodeId::ROOT)
            .chain(ids.iter().copied())
            .filter(|&c| c != current && !is_descendant(&parent, c, v))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        parent.insert(v, pick);
    }
    let (canvas, nodes) = tree.clone().into_parts();
    let nodes = nodes
        .into_iter()
        .map(|n| InstanceNode {
            parent: parent[&n.id],
            ..n
        })
        .collect();
    OpenTree::new(canvas, nodes).expect("rewiring avoids descendants")
}

fn transform_masks(tree: &OpenTree, f: impl Fn(&InstanceNode) -> crate::mask::Mask) -> OpenTree {
    let mut vanished = BTreeSet::new();
    let mut nodes = Vec::with_capacity(tree.len());
    for n in tree.nodes() {
        let m = f(n);
        if m.is_empty() {
            vanished.insert(n.id);
        }
        // placeholder keeps the original mask so splicing can reuse the structure
        nodes.push(InstanceNode {
            mask: if m.is_empty() { n.mask.clone() } else { m },
            ..n.clone()
        });
    }
    let t = OpenTree::new(tree.canvas().clone(), nodes).expect("masks stay on the canvas");
    if vanished.is_empty() {
        t
    } else {
        t.remove_spliced(&vanished)
    }
}

/// Applies one corruption to `tree`.
pub fn degrade_tree(tree: &OpenTree, spec: &DegradeSpec) -> OpenTree {
    let mut rng = image_rng(spec.seed, tree.image_id());
    let keep = spec.keep_ratio;
    match spec.kind {
        DegradeKind::MaskErosion => transform_masks(tree, |n| erode(&n.mask, keep)),
        DegradeKind::MaskDilation => transform_masks(tree, |n| dilate(&n.mask, 1.0 / keep)),
        DegradeKind::ParentRewire => rewire(tree, keep, &mut rng),
        DegradeKind::InternalNodeMissing => {
            let pool: Vec<NodeId> = tree.ids().filter(|&id| !tree.is_leaf(id)).collect();
            let gone = sample_ids(&mut rng, &pool, keep, "internal nodes");
            tree.remove_spliced(&gone.into_iter().collect())
        }
        DegradeKind::LeafNodeMissing => {
            let pool = tree.leaves();
            let gone = sample_ids(&mut rng, &pool, keep, "leaves");
            tree.remove_spliced(&gone.into_iter().collect())
        }
        DegradeKind::RandomNodeMissing => {
            let pool: Vec<NodeId> = tree.ids().collect();
            let gone = sample_ids(&mut rng, &pool, keep, "nodes");
            tree.remove_spliced(&gone.into_iter().collect())
        }
    }
}

pub fn degrade_corpus(trees: &[OpenTree], spec: &DegradeSpec) -> Vec<OpenTree> {
    trees.par_iter().map(|t| degrade_tree(t, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::tree::ImageCanvas;

    fn sample_tree() -> OpenTree {
        // root -> 1 -> {2 -> {5, 6}, 3}, 4 (top-level leaf)
        let m = |x0, y0, x1, y1| Mask::rect(20, 20, x0, y0, x1, y1).unwrap();
        OpenTree::new(
            ImageCanvas::new("img-a", 20, 20),
            vec![
                InstanceNode::new(1, "car", m(0, 0, 12, 12), NodeId::ROOT),
                InstanceNode::new(2, "door", m(0, 0, 8, 8), NodeId(1)),
                InstanceNode::new(3, "wheel", m(8, 8, 12, 12), NodeId(1)),
                InstanceNode::new(4, "tree", m(14, 14, 20, 20), NodeId::ROOT),
                InstanceNode::new(5, "handle", m(1, 1, 3, 3), NodeId(2)),
                InstanceNode::new(6, "window", m(4, 4, 8, 8), NodeId(2)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn keep_one_is_identity() {
        let t = sample_tree();
        for kind in DegradeKind::ALL {
            let spec = DegradeSpec::new(kind, 1.0, 3).unwrap();
            assert_eq!(degrade_tree(&t, &spec), t, "{kind}");
        }
    }

    #[test]
    fn rewire_without_alternatives() {
        let t = OpenTree::new(
            ImageCanvas::new("x", 4, 4),
            vec![InstanceNode::new(1, "a", Mask::full(4, 4).unwrap(), NodeId::ROOT)],
        )
        .unwrap();
        let spec = DegradeSpec::new(DegradeKind::ParentRewire, 0.5, 1).unwrap();
        assert_eq!(degrade_tree(&t, &spec), t);
    }

    #[test]
    fn leaf_removal_is_reproducible() {
        let t = sample_tree();
        assert_eq!(t.leaves().len(), 4);
        let spec = DegradeSpec::new(DegradeKind::LeafNodeMissing, 0.5, 42).unwrap();
        let a = degrade_tree(&t, &spec);
        let b = degrade_tree(&t, &spec);
        assert_eq!(a, b);
        assert_eq!(a.len(), t.len() - 2);
        let removed: Vec<NodeId> = t.ids().filter(|id| !a.contains(*id)).collect();
        assert!(removed.iter().all(|&id| t.is_leaf(id)));
    }

    #[test]
    fn rewire_preserves_nodes_and_changes_parents() {
        let t = sample_tree();
        let spec = DegradeSpec::new(DegradeKind::ParentRewire, 0.5, 9).unwrap();
        let d = degrade_tree(&t, &spec);
        assert_eq!(d.len(), t.len());
        let changed = t.nodes().filter(|n| d.parent(n.id) != Some(n.parent)).count();
        assert_eq!(changed, 3);
        for n in t.nodes() {
            let m = d.node(n.id).unwrap();
            assert_eq!((&m.label, &m.mask), (&n.label, &n.mask));
        }
    }

    #[test]
    fn internal_removal_splices() {
        let t = sample_tree();
        let spec = DegradeSpec::new(DegradeKind::InternalNodeMissing, 0.15, 5).unwrap();
        let d = degrade_tree(&t, &spec);
        // both internal nodes (1, 2) go; their descendants survive under the root
        assert_eq!(d.len(), 4);
        for id in [3, 5, 6] {
            assert_eq!(d.parent(NodeId(id)), Some(NodeId::ROOT));
        }
    }

    #[test]
    fn erosion_drops_vanishing_masks() {
        let t = sample_tree();
        let spec = DegradeSpec::new(DegradeKind::MaskErosion, 0.15, 0).unwrap();
        let d = degrade_tree(&t, &spec);
        // the 2x2 handle erodes away; everything else survives
        assert!(!d.contains(NodeId(5)));
        assert_eq!(d.len(), 5);
        for n in d.nodes() {
            assert!(n.mask.is_subset_of(&t.node(n.id).unwrap().mask));
        }
        let spec = DegradeSpec::new(DegradeKind::MaskDilation, 0.5, 0).unwrap();
        let d = degrade_tree(&t, &spec);
        assert_eq!(d.len(), t.len());
        for n in t.nodes() {
            assert!(n.mask.is_subset_of(&d.node(n.id).unwrap().mask));
        }
    }

    #[test]
    fn counts_and_parsing() {
        assert_eq!(corruption_count(0.3, 10), 7);
        assert_eq!(corruption_count(0.75, 4), 1);
        assert_eq!(corruption_count(0.5, 5), 3);
        assert_eq!(corruption_count(1.0, 5), 0);
        assert_eq!("leaf_node_missing".parse::<DegradeKind>().unwrap(), DegradeKind::LeafNodeMissing);
        assert!("nope".parse::<DegradeKind>().is_err());
        assert!(DegradeSpec::new(DegradeKind::MaskErosion, 0.0, 0).is_err());
    }

    #[test]
    fn streams_differ_per_image() {
        let a: u64 = image_rng(1, "a").random();
        let b: u64 = image_rng(1, "b").random();
        let a2: u64 = image_rng(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
