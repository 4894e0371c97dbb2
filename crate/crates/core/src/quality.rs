//! Open Tree Quality: matched-node quality, branch consistency on TP
//! skeletons, tree quality and their per-image / corpus aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_sim::{LabelSimError, SimilarityProtocol};
use crate::mask::iou_unchecked;
use crate::matching::{match_trees, MatchError, MatchResult};
use crate::tree::{NodeId, OpenTree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Label(#[from] LabelSimError),
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("unpaired images: missing reference for {missing_reference:?}, missing prediction for {missing_prediction:?}")]
    MissingCounterpart {
        missing_reference: Vec<String>,
        missing_prediction: Vec<String>,
    },
    #[error("duplicate image_id {0:?}")]
    DuplicateImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Pred,
    Ref,
}

/// Averages over TP matches of IoU x similarity, IoU, and similarity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeQuality {
    pub mean_nq: f64,
    pub mq: f64,
    pub lq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct PairSums {
    nq: f64,
    iou: f64,
    sim: f64,
}

fn pair_sums(
    m: &MatchResult,
    pred: &OpenTree,
    reference: &OpenTree,
    proto: &SimilarityProtocol,
) -> Result<PairSums, LabelSimError> {
    let mut s = PairSums::default();
    for p in &m.tp {
        let lp = &pred.node(p.pred).expect("matched node exists").label;
        let lr = &reference.node(p.reference).expect("matched node exists").label;
        let sim = proto.similarity(lp, lr)?;
        s.nq += p.iou * sim;
        s.iou += p.iou;
        s.sim += sim;
    }
    Ok(s)
}

pub fn matched_node_quality(
    m: &MatchResult,
    pred: &OpenTree,
    reference: &OpenTree,
    proto: &SimilarityProtocol,
) -> Result<NodeQuality, LabelSimError> {
    let s = pair_sums(m, pred, reference, proto)?;
    let n = m.tp.len();
    if n == 0 {
        return Ok(NodeQuality::default());
    }
    let n = n as f64;
    Ok(NodeQuality {
        mean_nq: s.nq / n,
        mq: s.iou / n,
        lq: s.sim / n,
    })
}

/// Tree induced on TP nodes plus the artificial root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    parent: BTreeMap<NodeId, NodeId>,
}

impl Skeleton {
    /// Skeleton parent of a TP node (`NodeId::ROOT` for top-level ones).
    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.parent.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// `id`, its skeleton ancestors, and finally the root.
    pub fn path_to_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        if *path.last().unwrap() != NodeId::ROOT {
            path.push(NodeId::ROOT);
        }
        path
    }

    /// Deepest common vertex of the two root paths.
    pub fn lca(&self, a: NodeId, b: NodeId) -> NodeId {
        let pb: HashSet<NodeId> = self.path_to_root(b).into_iter().collect();
        self.path_to_root(a)
            .into_iter()
            .find(|x| pb.contains(x))
            .unwrap_or(NodeId::ROOT)
    }
}

/// Builds the skeleton over `keep` (the TP nodes of `tree`).
///
/// Each kept node climbs its original ancestors, nearest first. At ancestor
/// `a` the candidates are the kept nodes among `a` and its siblings that
/// carry `a`'s label (the semantic group at that level) and overlap the
/// climbing node by at least one pixel. The node attaches to the candidate
/// with the highest IoU, smaller id on ties; with no candidate at any level
/// it attaches to the root.
pub fn skeleton_over(tree: &OpenTree, keep: &BTreeSet<NodeId>) -> Skeleton {
    let mut parent = BTreeMap::new();
    for &id in keep {
        let node = tree.node(id).expect("kept node belongs to the tree");
        let mut attach = NodeId::ROOT;
        'climb: for anc in tree.ancestors(id) {
            let anc_node = tree.node(anc).expect("ancestor exists");
            let grandparent = anc_node.parent;
            let mut best: Option<(f64, NodeId)> = None;
            for &cand in tree.children(grandparent) {
                if !keep.contains(&cand) {
                    continue;
                }
                let cn = tree.node(cand).expect("child exists");
                if cn.label != anc_node.label {
                    continue;
                }
                if node.mask.intersection_area_unchecked(&cn.mask) == 0 {
                    continue;
                }
                let v = iou_unchecked(&node.mask, &cn.mask);
                // children are visited in ascending id order, so strict `>` keeps the smaller id
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, cand));
                }
            }
            if let Some((_, c)) = best {
                attach = c;
                break 'climb;
            }
        }
        parent.insert(id, attach);
    }
    Skeleton { parent }
}

pub fn build_skeleton(tree: &OpenTree, m: &MatchResult, side: Side) -> Skeleton {
    let keep = match side {
        Side::Pred => m.tp_pred_ids(),
        Side::Ref => m.tp_ref_ids(),
    };
    skeleton_over(tree, &keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchStats {
    pub pairs: u64,
    pub consistent: u64,
}

impl BranchStats {
    /// Fraction of consistent pairs, 1 when there are no pairs.
    pub fn quality(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.consistent as f64 / self.pairs as f64
        }
    }
}

/// Counts TP pairs whose reference-side LCA is matched to the prediction-side LCA
/// (the two artificial roots count as matched).
pub fn branch_stats(skel_pred: &Skeleton, skel_ref: &Skeleton, m: &MatchResult) -> BranchStats {
    let ref_to_pred = m.ref_to_pred();
    let ref_paths: HashMap<NodeId, Vec<NodeId>> =
        m.tp.iter().map(|p| (p.reference, skel_ref.path_to_root(p.reference))).collect();
    let pred_paths: HashMap<NodeId, Vec<NodeId>> =
        m.tp.iter().map(|p| (p.pred, skel_pred.path_to_root(p.pred))).collect();
    let lca = |pa: &[NodeId], pb: &[NodeId]| -> NodeId {
        // paths end at the root; align from the root end
        let mut out = NodeId::ROOT;
        for (x, y) in pa.iter().rev().zip(pb.iter().rev()) {
            if x != y {
                break;
            }
            out = *x;
        }
        out
    };
    let mut stats = BranchStats::default();
    for (i, a) in m.tp.iter().enumerate() {
        for b in &m.tp[i + 1..] {
            let g = lca(&ref_paths[&a.reference], &ref_paths[&b.reference]);
            let p = lca(&pred_paths[&a.pred], &pred_paths[&b.pred]);
            let mapped = if g.is_root() {
                NodeId::ROOT
            } else {
                ref_to_pred[&g]
            };
            stats.pairs += 1;
            if mapped == p {
                stats.consistent += 1;
            }
        }
    }
    stats
}

pub fn branch_quality(skel_pred: &Skeleton, skel_ref: &Skeleton, m: &MatchResult) -> f64 {
    branch_stats(skel_pred, skel_ref, m).quality()
}

/// `bq * tp / (tp + fp/2 + fn/2)`, 0 without true positives.
pub fn tree_quality(bq: f64, m: &MatchResult) -> f64 {
    recovery_quality(bq, m.tp.len() as u64, m.fp.len() as u64, m.fn_.len() as u64)
}

fn recovery_quality(bq: f64, tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let tp = tp as f64;
    bq * tp / (tp + 0.5 * fp as f64 + 0.5 * fn_ as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OtqScores {
    pub otq: f64,
    pub tq: f64,
    pub bq: f64,
    pub mean_nq: f64,
    pub mq: f64,
    pub lq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Unordered TP pairs considered by branch quality.
    pub n_pairs: u64,
    pub n_consistent: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub image_id: String,
    #[serde(flatten)]
    pub scores: OtqScores,
    #[serde(skip)]
    sums: PairSums,
}

pub fn evaluate_image(
    pred: &OpenTree,
    reference: &OpenTree,
    proto: &SimilarityProtocol,
    tau_node: f64,
) -> Result<ImageReport, EvalError> {
    let m = match_trees(pred, reference, tau_node)?;
    let sums = pair_sums(&m, pred, reference, proto)?;
    let nq = matched_node_quality(&m, pred, reference, proto)?;
    let mut scores = OtqScores {
        tp: m.tp.len() as u64,
        fp: m.fp.len() as u64,
        fn_: m.fn_.len() as u64,
        ..OtqScores::default()
    };
    if !m.tp.is_empty() {
        let sp = build_skeleton(pred, &m, Side::Pred);
        let sr = build_skeleton(reference, &m, Side::Ref);
        let bs = branch_stats(&sp, &sr, &m);
        let bq = bs.quality();
        let tq = tree_quality(bq, &m);
        scores.n_pairs = bs.pairs;
        scores.n_consistent = bs.consistent;
        scores.bq = bq;
        scores.tq = tq;
        scores.mean_nq = nq.mean_nq;
        scores.mq = nq.mq;
        scores.lq = nq.lq;
        scores.otq = tq * nq.mean_nq;
    }
    Ok(ImageReport {
        image_id: reference.image_id().to_string(),
        scores,
        sums,
    })
}

/// How per-image results are combined into the corpus record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Unweighted mean of per-image scores.
    #[default]
    Macro,
    /// Scores recomputed from counts and sums pooled over all images.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub pooling: Pooling,
    pub n_images: u64,
    #[serde(flatten)]
    pub scores: OtqScores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub corpus: CorpusSummary,
    pub images: Vec<ImageReport>,
}

/// Aggregates per-image reports, which must already be in canonical order.
pub fn aggregate(images: &[ImageReport], pooling: Pooling) -> CorpusSummary {
    let mut s = OtqScores::default();
    let mut sums = PairSums::default();
    for r in images {
        s.tp += r.scores.tp;
        s.fp += r.scores.fp;
        s.fn_ += r.scores.fn_;
        s.n_pairs += r.scores.n_pairs;
        s.n_consistent += r.scores.n_consistent;
        sums.nq += r.sums.nq;
        sums.iou += r.sums.iou;
        sums.sim += r.sums.sim;
    }
    let n = images.len();
    match pooling {
        Pooling::Macro if n > 0 => {
            let mean = |f: fn(&OtqScores) -> f64| images.iter().map(|r| f(&r.scores)).sum::<f64>() / n as f64;
            s.otq = mean(|x| x.otq);
            s.tq = mean(|x| x.tq);
            s.bq = mean(|x| x.bq);
            s.mean_nq = mean(|x| x.mean_nq);
            s.mq = mean(|x| x.mq);
            s.lq = mean(|x| x.lq);
        }
        Pooling::Micro if s.tp > 0 => {
            let tp = s.tp as f64;
            s.mean_nq = sums.nq / tp;
            s.mq = sums.iou / tp;
            s.lq = sums.sim / tp;
            s.bq = BranchStats {
                pairs: s.n_pairs,
                consistent: s.n_consistent,
            }
            .quality();
            s.tq = recovery_quality(s.bq, s.tp, s.fp, s.fn_);
            s.otq = s.tq * s.mean_nq;
        }
        _ => {}
    }
    CorpusSummary {
        pooling,
        n_images: n as u64,
        scores: s,
    }
}

/// Evaluates already paired `(pred, ref)` trees.
///
/// Images are processed on the current rayon pool; results are ordered by
/// image id before aggregation so the report does not depend on scheduling.
pub fn evaluate_pairs(
    pairs: &[(&OpenTree, &OpenTree)],
    proto: &SimilarityProtocol,
    tau_node: f64,
    pooling: Pooling,
) -> Result<CorpusReport, EvalError> {
    let mut sorted: Vec<&(&OpenTree, &OpenTree)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.1.image_id().cmp(b.1.image_id()));
    let images = sorted
        .par_iter()
        .map(|(p, r)| {
            evaluate_image(p, r, proto, tau_node).map_err(|e| EvalError::Image {
                image_id: r.image_id().to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorpusReport {
        corpus: aggregate(&images, pooling),
        images,
    })
}

/// Pairs predictions with references by image id and evaluates them.
pub fn evaluate_corpus(
    preds: &[OpenTree],
    refs: &[OpenTree],
    proto: &SimilarityProtocol,
    tau_node: f64,
    pooling: Pooling,
) -> Result<CorpusReport, EvalError> {
    let pairs = pair_by_image(preds, refs)?;
    evaluate_pairs(&pairs, proto, tau_node, pooling)
}

pub fn pair_by_image<'a>(
    preds: &'a [OpenTree],
    refs: &'a [OpenTree],
) -> Result<Vec<(&'a OpenTree, &'a OpenTree)>, EvalError> {
    let index = |trees: &'a [OpenTree]| -> Result<BTreeMap<&'a str, &'a OpenTree>, EvalError> {
        let mut map = BTreeMap::new();
        for t in trees {
            if map.insert(t.image_id(), t).is_some() {
                return Err(EvalError::DuplicateImage(t.image_id().to_string()));
            }
        }
        Ok(map)
    };
    let p = index(preds)?;
    let r = index(refs)?;
    let missing_reference: Vec<String> = p.keys().filter(|k| !r.contains_key(*k)).map(|k| k.to_string()).collect();
    let missing_prediction: Vec<String> = r.keys().filter(|k| !p.contains_key(*k)).map(|k| k.to_string()).collect();
    if !missing_reference.is_empty() || !missing_prediction.is_empty() {
        return Err(EvalError::MissingCounterpart {
            missing_reference,
            missing_prediction,
        });
    }
    Ok(r.iter().map(|(k, rt)| (p[k], *rt)).collect())
}
