//! Geometric core of the recursive annotation pipeline.
//!
//! Label proposal and mask grounding are external models; they enter through
//! the [`Proposer`] and [`Grounder`] traits. This module owns everything that
//! happens between those calls: evidence filtering, sibling merging, the
//! breadth-first expansion of semantic nodes and the final conversion into an
//! instance-level [`OpenTree`]. [`ScriptedMocks`] replays a JSON script in
//! place of the models.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Deserialize;
use thiserror::Error;

use crate::mask::{containment, iou_unchecked, BBox, Mask, MaskError};
use crate::tree::{normalize_label, ImageCanvas, InstanceNode, NodeId, OpenTree, SemanticNode};

/// Parents smaller than this fraction of the image use the relaxed threshold.
pub const SMALL_PARENT_FRACTION: f64 = 0.05;
pub const SMALL_PARENT_CONFIDENCE: f64 = 0.4;
pub const DEFAULT_CONFIDENCE: f64 = 0.5;
/// Masks covering more than this fraction of the image are rejected.
pub const MAX_CANVAS_COVERAGE: f64 = 0.70;
/// Masks covering more than this fraction of their parent are rejected.
pub const MAX_PARENT_COVERAGE: f64 = 0.90;
/// Siblings overlapping by more than this (intersection / smaller area) merge.
pub const SIBLING_MERGE_OVERLAP: f64 = 0.90;

pub const OTHERS_LABEL: &str = "others";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("at {path:?}: {message}")]
    Interface { path: String, message: String },
    #[error("invalid proposal for {label:?}: {message}")]
    InvalidProposal { label: String, message: String },
    #[error("script: {0}")]
    Script(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Grounded candidate instances for one proposed label.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub label: String,
    pub masks: Vec<Mask>,
    pub confidence: Vec<f64>,
    /// Semantic node being decomposed; `None` for the root.
    pub parent_semantic_id: Option<usize>,
}

impl Proposal {
    pub fn new(
        label: impl Into<String>,
        masks: Vec<Mask>,
        confidence: Vec<f64>,
        parent_semantic_id: Option<usize>,
    ) -> Result<Self, PipelineError> {
        let label = label.into();
        if masks.len() != confidence.len() {
            return Err(PipelineError::InvalidProposal {
                label,
                message: format!("{} masks but {} confidences", masks.len(), confidence.len()),
            });
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(PipelineError::InvalidProposal {
                label,
                message: "confidence outside [0, 1]".into(),
            });
        }
        Ok(Proposal {
            label,
            masks,
            confidence,
            parent_semantic_id,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn area_fraction(mask: Option<&Mask>, canvas: &ImageCanvas) -> f64 {
    match mask {
        None => 1.0,
        Some(m) => m.area() as f64 / canvas.area() as f64,
    }
}

/// Grounding confidence required for children of `parent_mask` (`None` = root).
pub fn confidence_threshold(parent_mask: Option<&Mask>, canvas: &ImageCanvas) -> f64 {
    if area_fraction(parent_mask, canvas) < SMALL_PARENT_FRACTION {
        SMALL_PARENT_CONFIDENCE
    } else {
        DEFAULT_CONFIDENCE
    }
}

/// Whether one mask passes all three evidence gates.
pub fn passes_gates(mask: &Mask, confidence: f64, parent_mask: Option<&Mask>, canvas: &ImageCanvas) -> bool {
    if mask.is_empty() || confidence < confidence_threshold(parent_mask, canvas) {
        return false;
    }
    if mask.area() as f64 / canvas.area() as f64 > MAX_CANVAS_COVERAGE {
        return false;
    }
    if let Some(p) = parent_mask {
        if p.is_empty() || !p.same_canvas(mask) {
            return false;
        }
        let covered = mask.intersection_area_unchecked(p) as f64 / p.area() as f64;
        if covered > MAX_PARENT_COVERAGE {
            return false;
        }
    }
    true
}

/// Drops masks that fail the confidence, image-coverage or parent-coverage gates.
pub fn filter_proposal(p: &Proposal, parent_mask: Option<&Mask>, canvas: &ImageCanvas) -> Proposal {
    let (masks, confidence) = p
        .masks
        .iter()
        .zip(&p.confidence)
        .filter(|(m, &c)| passes_gates(m, c, parent_mask, canvas))
        .map(|(m, &c)| (m.clone(), c))
        .unzip();
    Proposal {
        label: p.label.clone(),
        masks,
        confidence,
        parent_semantic_id: p.parent_semantic_id,
    }
}

/// Intersection over the smaller area; 0 if either mask is empty.
pub fn sibling_overlap(a: &Mask, b: &Mask) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller == 0 {
        return 0.0;
    }
    a.intersection_area_unchecked(b) as f64 / smaller as f64
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups of input indices whose unions are pairwise at most
/// `SIBLING_MERGE_OVERLAP` apart. Closure is repeated on the merged unions
/// until no pair exceeds the threshold. Groups are ordered by smallest member.
pub fn merge_groups(masks: &[Mask]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..masks.len()).map(|i| vec![i]).collect();
    let mut unions: Vec<Mask> = masks.to_vec();
    loop {
        let n = groups.len();
        let mut parent: Vec<usize> = (0..n).collect();
        let mut merged_any = false;
        for i in 0..n {
            let bi = unions[i].bbox();
            for j in i + 1..n {
                let overlap_possible = match (bi, unions[j].bbox()) {
                    (Some(a), Some(b)) => a.overlaps(&b),
                    _ => false,
                };
                if overlap_possible && sibling_overlap(&unions[i], &unions[j]) > SIBLING_MERGE_OVERLAP {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                        merged_any = true;
                    }
                }
            }
        }
        if !merged_any {
            return groups;
        }
        let mut next: BTreeMap<usize, (Vec<usize>, Mask)> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            match next.get_mut(&r) {
                Some((g, u)) => {
                    g.extend_from_slice(&groups[i]);
                    *u = u.union(&unions[i]).expect("siblings share a canvas");
                }
                None => {
                    next.insert(r, (groups[i].clone(), unions[i].clone()));
                }
            }
        }
        groups = Vec::with_capacity(next.len());
        unions = Vec::with_capacity(next.len());
        for (_, (mut g, u)) in next {
            g.sort_unstable();
            groups.push(g);
            unions.push(u);
        }
    }
}

/// Merges near-duplicate sibling masks by pixel union.
pub fn merge_siblings(masks: &[Mask]) -> Vec<Mask> {
    merge_groups(masks)
        .into_iter()
        .map(|g| {
            g.iter()
                .skip(1)
                .fold(masks[g[0]].clone(), |acc, &i| acc.union(&masks[i]).expect("same canvas"))
        })
        .collect()
}

/// Intermediate tree of semantic nodes. Parents always precede children.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTree {
    pub canvas: ImageCanvas,
    /// Instance masks keyed by the ids they will carry after materialization.
    pub instances: BTreeMap<NodeId, Mask>,
    pub nodes: Vec<SemanticNode>,
    /// Parent semantic node index; `None` for children of the root.
    pub parents: Vec<Option<usize>>,
    /// Pixels of each node not covered by its accepted children.
    pub others: Vec<Option<Mask>>,
    pub root_others: Option<Mask>,
}

impl SemanticTree {
    pub fn new(canvas: ImageCanvas) -> Self {
        SemanticTree {
            canvas,
            instances: BTreeMap::new(),
            nodes: Vec::new(),
            parents: Vec::new(),
            others: Vec::new(),
            root_others: None,
        }
    }

    /// Adds a semantic node from its instance masks; returns its index.
    pub fn push(&mut self, label: &str, masks: Vec<Mask>, parent: Option<usize>) -> Result<usize, MaskError> {
        if let Some(p) = parent {
            assert!(p < self.nodes.len(), "parent must be added first");
        }
        let base = self.instances.keys().next_back().map_or(1, |id| id.0 + 1);
        let ids: Vec<NodeId> = (0..masks.len() as u64).map(|k| NodeId(base + k)).collect();
        let node = SemanticNode::new(label, ids.iter().copied().zip(masks.iter()))?;
        for (id, m) in ids.into_iter().zip(masks) {
            self.instances.insert(id, m);
        }
        self.nodes.push(node);
        self.parents.push(parent);
        self.others.push(None);
        Ok(self.nodes.len() - 1)
    }

    pub fn path(&self, idx: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = idx;
        while let Some(i) = cur {
            out.push(self.nodes[i].label.clone());
            cur = self.parents[i];
        }
        out.reverse();
        out
    }
}

/// Converts semantic nodes into instance nodes.
///
/// Each child instance is routed to the member of its semantic parent that
/// contains it most, breaking ties by IoU and then smaller id. Instances with
/// zero containment in every candidate are dropped as noise.
pub fn materialize_instances(semantic: &SemanticTree) -> OpenTree {
    let mut alive: BTreeSet<NodeId> = BTreeSet::new();
    let mut nodes = Vec::new();
    for (idx, sem) in semantic.nodes.iter().enumerate() {
        let parent_members: Option<Vec<NodeId>> = semantic.parents[idx].map(|p| {
            semantic.nodes[p]
                .member_mask_ids
                .iter()
                .copied()
                .filter(|id| alive.contains(id))
                .collect()
        });
        for &id in &sem.member_mask_ids {
            let mask = &semantic.instances[&id];
            let parent = match &parent_members {
                None => Some(NodeId::ROOT),
                Some(cands) => {
                    let mut best: Option<(f64, f64, NodeId)> = None;
                    for &c in cands {
                        let pm = &semantic.instances[&c];
                        let cont = containment(mask, pm).unwrap_or(0.0);
                        if cont <= 0.0 {
                            continue;
                        }
                        let v = iou_unchecked(mask, pm);
                        let better = match best {
                            None => true,
                            Some((bc, bv, _)) => cont > bc || (cont == bc && v > bv),
                        };
                        if better {
                            best = Some((cont, v, c));
                        }
                    }
                    best.map(|b| b.2)
                }
            };
            if let Some(parent) = parent {
                alive.insert(id);
                nodes.push(InstanceNode {
                    id,
                    label: sem.label.clone(),
                    mask: mask.clone(),
                    parent,
                });
            } else {
                log::debug!("dropping instance {id} ({}) without a containing parent", sem.label);
            }
        }
    }
    OpenTree::new(semantic.canvas.clone(), nodes).expect("materialized trees are valid")
}

/// What a proposer or grounder sees for one expansion step.
#[derive(Debug, Clone)]
pub struct CropContext<'a> {
    pub canvas: &'a ImageCanvas,
    /// Labels from the root down to the node being expanded.
    pub path: Vec<String>,
    pub label: Option<&'a str>,
    /// Visible region; pixels outside it are suppressed.
    pub region: &'a Mask,
    pub bbox: Option<BBox>,
    /// Set when the region is the uncovered remainder of a node.
    pub is_others: bool,
}

impl CropContext<'_> {
    pub fn path_key(&self) -> String {
        self.path.join("/")
    }
}

/// Proposes child labels for a cropped region.
pub trait Proposer {
    fn propose(&self, ctx: &CropContext<'_>) -> Result<Vec<String>, String>;
}

/// Grounds a label into candidate instance masks inside a region.
pub trait Grounder {
    fn ground(&self, ctx: &CropContext<'_>, label: &str) -> Result<Proposal, String>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Limits {
    /// Deepest semantic level that may be created (top-level nodes are depth 1).
    pub max_depth: Option<u32>,
    /// Maximum accepted semantic children per node.
    pub max_children: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub semantic: SemanticTree,
    pub tree: OpenTree,
}

struct Accepted {
    label: String,
    mask: Mask,
    confidence: f64,
}

fn ground_into(
    ctx: &CropContext<'_>,
    labels: Vec<String>,
    grounder: &dyn Grounder,
    parent_mask: Option<&Mask>,
    parent_idx: Option<usize>,
    out: &mut Vec<Accepted>,
) -> Result<(), PipelineError> {
    let mut seen = BTreeSet::new();
    for label in labels {
        let label = normalize_label(&label);
        if label.is_empty() || !seen.insert(label.clone()) {
            continue;
        }
        let raw = grounder.ground(ctx, &label).map_err(|message| PipelineError::Interface {
            path: format!("{}/{}", ctx.path_key(), label),
            message,
        })?;
        let clipped = raw
            .masks
            .iter()
            .map(|m| m.intersect(ctx.region))
            .collect::<Result<Vec<_>, _>>()?;
        let p = Proposal::new(label.clone(), clipped, raw.confidence, parent_idx)?;
        let kept = filter_proposal(&p, parent_mask, ctx.canvas);
        for (mask, confidence) in kept.masks.into_iter().zip(kept.confidence) {
            out.push(Accepted {
                label: label.clone(),
                mask,
                confidence,
            });
        }
    }
    Ok(())
}

fn uncovered(region: &Mask, accepted: &[Accepted]) -> Result<Mask, MaskError> {
    let mut rest = region.clone();
    for a in accepted {
        rest = rest.difference(&a.mask)?;
    }
    Ok(rest)
}

/// Breadth-first recursive decomposition followed by instance materialization.
pub fn run_pipeline(
    canvas: &ImageCanvas,
    proposer: &dyn Proposer,
    grounder: &dyn Grounder,
    limits: Limits,
) -> Result<PipelineOutput, PipelineError> {
    let full = Mask::full(canvas.width, canvas.height)?;
    let mut semantic = SemanticTree::new(canvas.clone());
    let mut queue: VecDeque<(Option<usize>, u32)> = VecDeque::from([(None, 0)]);
    while let Some((node, depth)) = queue.pop_front() {
        if limits.max_depth.is_some_and(|max| depth >= max) {
            continue;
        }
        let region = match node {
            None => full.clone(),
            Some(i) => semantic.nodes[i].union_mask.clone(),
        };
        let parent_mask = node.map(|_| &region);
        let path = semantic.path(node);
        let label = node.map(|i| semantic.nodes[i].label.clone());
        let ctx = CropContext {
            canvas,
            path: path.clone(),
            label: label.as_deref(),
            region: &region,
            bbox: region.bbox(),
            is_others: false,
        };
        let labels = proposer.propose(&ctx).map_err(|message| PipelineError::Interface {
            path: ctx.path_key(),
            message,
        })?;
        let mut accepted = Vec::new();
        ground_into(&ctx, labels, grounder, parent_mask, node, &mut accepted)?;

        let rest = uncovered(&region, &accepted)?;
        if !rest.is_empty() {
            let mut others_path = path.clone();
            others_path.push(OTHERS_LABEL.to_string());
            let octx = CropContext {
                canvas,
                path: others_path,
                label: Some(OTHERS_LABEL),
                region: &rest,
                bbox: rest.bbox(),
                is_others: true,
            };
            let labels = proposer.propose(&octx).map_err(|message| PipelineError::Interface {
                path: octx.path_key(),
                message,
            })?;
            ground_into(&octx, labels, grounder, parent_mask, node, &mut accepted)?;
        }

        let masks: Vec<Mask> = accepted.iter().map(|a| a.mask.clone()).collect();
        let mut by_label: Vec<(String, Vec<Mask>)> = Vec::new();
        let mut label_pos: HashMap<String, usize> = HashMap::new();
        for group in merge_groups(&masks) {
            // the most confident member names the merged mask; earliest wins ties
            let lead = group
                .iter()
                .copied()
                .reduce(|a, b| if accepted[b].confidence > accepted[a].confidence { b } else { a })
                .expect("groups are non-empty");
            let union = group
                .iter()
                .skip(1)
                .try_fold(masks[group[0]].clone(), |acc, &i| acc.union(&masks[i]))?;
            let l = accepted[lead].label.clone();
            let pos = *label_pos.entry(l.clone()).or_insert_with(|| {
                by_label.push((l, Vec::new()));
                by_label.len() - 1
            });
            by_label[pos].1.push(union);
        }
        if let Some(cap) = limits.max_children {
            by_label.truncate(cap);
        }
        let mut covered: Vec<Accepted> = Vec::new();
        for (l, group_masks) in by_label {
            for m in &group_masks {
                covered.push(Accepted {
                    label: l.clone(),
                    mask: m.clone(),
                    confidence: 1.0,
                });
            }
            let idx = semantic.push(&l, group_masks, node)?;
            queue.push_back((Some(idx), depth + 1));
        }
        let rest = uncovered(&region, &covered)?;
        let rest = (!rest.is_empty()).then_some(rest);
        match node {
            None => semantic.root_others = rest,
            Some(i) => semantic.others[i] = rest,
        }
    }
    let tree = materialize_instances(&semantic);
    Ok(PipelineOutput { semantic, tree })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScriptMask {
    Rle { rle: String, confidence: f64 },
    Rect { rect: [u32; 4], confidence: f64 },
}

#[derive(Debug, Clone, Deserialize)]
struct ScriptDoc {
    image_id: String,
    width: u32,
    height: u32,
    /// Path (labels joined by `/`, empty for the root) to proposed labels.
    #[serde(default)]
    children: BTreeMap<String, Vec<String>>,
    /// `path/label` or bare `label` to grounded masks.
    #[serde(default)]
    masks: BTreeMap<String, Vec<ScriptMask>>,
}

/// Deterministic proposer and grounder replaying a JSON script.
///
/// ```json
/// {"image_id": "scene", "width": 64, "height": 64,
///  "children": {"": ["car"], "car": ["wheel"]},
///  "masks": {"car": [{"rect": [0, 0, 40, 30], "confidence": 0.9}],
///            "car/wheel": [{"rect": [2, 20, 10, 30], "confidence": 0.8}]}}
/// ```
///
/// `rect` is `[x0, y0, x1, y1)` in pixels; `rle` uses the tree document encoding.
#[derive(Debug, Clone)]
pub struct ScriptedMocks {
    pub canvas: ImageCanvas,
    children: BTreeMap<String, Vec<String>>,
    masks: BTreeMap<String, Vec<(Mask, f64)>>,
}

impl ScriptedMocks {
    pub fn from_json(document: &[u8]) -> Result<Self, PipelineError> {
        let doc: ScriptDoc = serde_json::from_slice(document).map_err(|e| PipelineError::Script(e.to_string()))?;
        let canvas = ImageCanvas::new(doc.image_id, doc.width, doc.height);
        let mut masks = BTreeMap::new();
        for (key, entries) in doc.masks {
            let mut list = Vec::new();
            for e in entries {
                let (m, c) = match e {
                    ScriptMask::Rle { rle, confidence } => (Mask::parse_rle(canvas.width, canvas.height, &rle)?, confidence),
                    ScriptMask::Rect { rect, confidence } => (
                        Mask::rect(canvas.width, canvas.height, rect[0], rect[1], rect[2], rect[3])?,
                        confidence,
                    ),
                };
                list.push((m, c));
            }
            masks.insert(normalize_label(&key), list);
        }
        let children = doc
            .children
            .into_iter()
            .map(|(k, v)| (normalize_label(&k), v))
            .collect();
        Ok(ScriptedMocks {
            canvas,
            children,
            masks,
        })
    }
}

impl Proposer for ScriptedMocks {
    fn propose(&self, ctx: &CropContext<'_>) -> Result<Vec<String>, String> {
        Ok(self.children.get(&ctx.path_key()).cloned().unwrap_or_default())
    }
}

impl Grounder for ScriptedMocks {
    fn ground(&self, ctx: &CropContext<'_>, label: &str) -> Result<Proposal, String> {
        let qualified = if ctx.path.is_empty() {
            label.to_string()
        } else {
            format!("{}/{}", ctx.path_key(), label)
        };
        let entries = self
            .masks
            .get(&qualified)
            .or_else(|| self.masks.get(label))
            .ok_or_else(|| format!("no masks scripted for {qualified:?}"))?;
        let (masks, conf): (Vec<Mask>, Vec<f64>) = entries.iter().cloned().unzip();
        Proposal::new(label, masks, conf, None).map_err(|e| e.to_string())
    }
}
