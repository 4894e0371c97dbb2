//! Open-tree data model, JSON(L) codec and structural validation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::mask::{Mask, MaskError};

/// Node identifier, unique within one tree.
///
/// `NodeId::ROOT` is the artificial root; it never appears in documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(u64::MAX);

    pub fn is_root(self) -> bool {
        self == NodeId::ROOT
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            f.write_str("root")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageCanvas {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

impl ImageCanvas {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageCanvas {
            image_id: image_id.into(),
            width,
            height,
        }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn same_dimensions(&self, other: &ImageCanvas) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceNode {
    pub id: NodeId,
    pub label: String,
    pub mask: Mask,
    /// Parent node, or `NodeId::ROOT` for top-level nodes.
    pub parent: NodeId,
}

impl InstanceNode {
    pub fn new(id: u64, label: impl Into<String>, mask: Mask, parent: NodeId) -> Self {
        InstanceNode {
            id: NodeId(id),
            label: label.into(),
            mask,
            parent,
        }
    }
}

/// A group of instance masks that share one label under one parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticNode {
    pub label: String,
    pub member_mask_ids: Vec<NodeId>,
    pub union_mask: Mask,
}

impl SemanticNode {
    pub fn new<'a>(
        label: impl Into<String>,
        members: impl IntoIterator<Item = (NodeId, &'a Mask)>,
    ) -> Result<Self, MaskError> {
        let mut ids = Vec::new();
        let mut union: Option<Mask> = None;
        for (id, m) in members {
            ids.push(id);
            union = Some(match union {
                None => m.clone(),
                Some(u) => u.union(m)?,
            });
        }
        let union_mask = union.ok_or(MaskError::EmptyMask)?;
        Ok(SemanticNode {
            label: normalize_label(&label.into()),
            member_mask_ids: ids,
            union_mask,
        })
    }
}

/// NFC-normalizes and lowercases a label.
pub fn normalize_label(label: &str) -> String {
    label.nfc().collect::<String>().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationRule {
    InvalidCanvas,
    ReservedId,
    DuplicateId,
    EmptyLabel,
    EmptyMask,
    MaskDimensions { width: u32, height: u32 },
    InvalidMask(String),
    DanglingParent(NodeId),
    Cycle,
}

impl fmt::Display for ValidationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationRule::InvalidCanvas => f.write_str("canvas must be at least 1x1"),
            ValidationRule::ReservedId => f.write_str("node id is reserved for the root"),
            ValidationRule::DuplicateId => f.write_str("duplicate node id"),
            ValidationRule::EmptyLabel => f.write_str("empty label"),
            ValidationRule::EmptyMask => f.write_str("empty mask"),
            ValidationRule::MaskDimensions { width, height } => {
                write!(f, "mask is {width}x{height}, does not match canvas")
            }
            ValidationRule::InvalidMask(msg) => write!(f, "invalid mask encoding: {msg}"),
            ValidationRule::DanglingParent(p) => write!(f, "parent {p} does not exist"),
            ValidationRule::Cycle => f.write_str("cycle at node"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("validation error at node {}: {rule}", node.map(|n| n.to_string()).unwrap_or_else(|| "-".into()))]
    Validation {
        node: Option<NodeId>,
        rule: ValidationRule,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

impl TreeError {
    fn at(node: NodeId, rule: ValidationRule) -> Self {
        TreeError::Validation {
            node: Some(node),
            rule,
        }
    }
}

/// A validated, immutable rooted tree of instance nodes over one image.
#[derive(Debug, Clone)]
pub struct OpenTree {
    canvas: ImageCanvas,
    nodes: BTreeMap<NodeId, InstanceNode>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    depth: HashMap<NodeId, u32>,
}

impl PartialEq for OpenTree {
    fn eq(&self, other: &Self) -> bool {
        self.canvas == other.canvas && self.nodes == other.nodes
    }
}

impl OpenTree {
    /// Validates and builds a tree. Labels are normalized.
    pub fn new(canvas: ImageCanvas, nodes: Vec<InstanceNode>) -> Result<Self, TreeError> {
        if canvas.width == 0 || canvas.height == 0 {
            return Err(TreeError::Validation {
                node: None,
                rule: ValidationRule::InvalidCanvas,
            });
        }
        let mut map = BTreeMap::new();
        for mut node in nodes {
            if node.id.is_root() {
                return Err(TreeError::at(node.id, ValidationRule::ReservedId));
            }
            node.label = normalize_label(&node.label);
            if node.label.is_empty() {
                return Err(TreeError::at(node.id, ValidationRule::EmptyLabel));
            }
            if node.mask.width() != canvas.width || node.mask.height() != canvas.height {
                return Err(TreeError::at(
                    node.id,
                    ValidationRule::MaskDimensions {
                        width: node.mask.width(),
                        height: node.mask.height(),
                    },
                ));
            }
            if node.mask.is_empty() {
                return Err(TreeError::at(node.id, ValidationRule::EmptyMask));
            }
            let id = node.id;
            if map.insert(id, node).is_some() {
                return Err(TreeError::at(id, ValidationRule::DuplicateId));
            }
        }
        for node in map.values() {
            if node.parent == node.id {
                return Err(TreeError::at(node.id, ValidationRule::Cycle));
            }
            if !node.parent.is_root() && !map.contains_key(&node.parent) {
                return Err(TreeError::at(
                    node.id,
                    ValidationRule::DanglingParent(node.parent),
                ));
            }
        }

        let mut depth: HashMap<NodeId, u32> = HashMap::with_capacity(map.len() + 1);
        depth.insert(NodeId::ROOT, 0);
        for &start in map.keys() {
            let mut path = Vec::new();
            let mut on_path = BTreeSet::new();
            let mut cur = start;
            let base = loop {
                if let Some(&d) = depth.get(&cur) {
                    break d;
                }
                if !on_path.insert(cur) {
                    return Err(TreeError::at(cur, ValidationRule::Cycle));
                }
                path.push(cur);
                cur = map[&cur].parent;
            };
            for (i, id) in path.iter().rev().enumerate() {
                depth.insert(*id, base + 1 + i as u32);
            }
        }

        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        children.insert(NodeId::ROOT, Vec::new());
        for node in map.values() {
            children.entry(node.id).or_default();
            children.entry(node.parent).or_default().push(node.id);
        }
        Ok(OpenTree {
            canvas,
            nodes: map,
            children,
            depth,
        })
    }

    /// A tree with no nodes besides the root.
    pub fn root_only(canvas: ImageCanvas) -> Result<Self, TreeError> {
        Self::new(canvas, Vec::new())
    }

    pub fn canvas(&self) -> &ImageCanvas {
        &self.canvas
    }

    pub fn image_id(&self) -> &str {
        &self.canvas.image_id
    }

    /// Number of non-root nodes (equal to the number of edges).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-root nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &InstanceNode> + '_ {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&InstanceNode> {
        self.nodes.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.is_root() || self.nodes.contains_key(&id)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes.get(&id).map(|n| n.parent)
    }

    /// Children of `id` (use `NodeId::ROOT` for top-level nodes) in id order.
    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn depth(&self, id: NodeId) -> Result<u32, TreeError> {
        self.depth
            .get(&id)
            .copied()
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.values().copied().max().unwrap_or(0)
    }

    /// Proper ancestors of `id`, nearest first, excluding the root.
    pub fn ancestors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let mut cur = self.parent(id);
        std::iter::from_fn(move || {
            let p = cur.filter(|p| !p.is_root())?;
            cur = self.parent(p);
            Some(p)
        })
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children(id).is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.ids().filter(|&id| self.is_leaf(id)).collect()
    }

    /// `id` and everything below it.
    pub fn subtree(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if out.insert(n) {
                stack.extend_from_slice(self.children(n));
            }
        }
        out
    }

    pub fn into_parts(self) -> (ImageCanvas, Vec<InstanceNode>) {
        (self.canvas, self.nodes.into_values().collect())
    }

    /// Removes `ids`, re-attaching each orphan to its nearest surviving ancestor.
    pub fn remove_spliced(&self, ids: &BTreeSet<NodeId>) -> OpenTree {
        let nodes = self
            .nodes()
            .filter(|n| !ids.contains(&n.id))
            .map(|n| {
                let mut n = n.clone();
                while !n.parent.is_root() && ids.contains(&n.parent) {
                    n.parent = self.nodes[&n.parent].parent;
                }
                n
            })
            .collect();
        OpenTree::new(self.canvas.clone(), nodes).expect("splicing preserves validity")
    }

    /// Every node re-parented to the root.
    pub fn flattened(&self) -> OpenTree {
        let nodes = self
            .nodes()
            .map(|n| InstanceNode {
                parent: NodeId::ROOT,
                ..n.clone()
            })
            .collect();
        OpenTree::new(self.canvas.clone(), nodes).expect("flat tree is valid")
    }
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: u64,
    label: String,
    parent: Option<u64>,
    rle: String,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    image_id: String,
    width: u32,
    height: u32,
    nodes: Vec<NodeDoc>,
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, seg) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += seg.len() + 1;
    }
    text.len()
}

/// Parses and validates one JSON tree document.
pub fn parse_tree(document: &[u8]) -> Result<OpenTree, TreeError> {
    let doc: TreeDoc = serde_json::from_slice(document).map_err(|e| TreeError::Parse {
        offset: byte_offset(document, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let canvas = ImageCanvas::new(doc.image_id, doc.width, doc.height);
    if canvas.width == 0 || canvas.height == 0 {
        return Err(TreeError::Validation {
            node: None,
            rule: ValidationRule::InvalidCanvas,
        });
    }
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let id = NodeId(n.id);
        let mask = Mask::parse_rle(canvas.width, canvas.height, &n.rle)
            .map_err(|e| TreeError::at(id, ValidationRule::InvalidMask(e.to_string())))?;
        nodes.push(InstanceNode {
            id,
            label: n.label,
            mask,
            parent: n.parent.map(NodeId).unwrap_or(NodeId::ROOT),
        });
    }
    OpenTree::new(canvas, nodes)
}

/// Serializes a tree as a single-line JSON document, nodes in id order.
pub fn serialize_tree(tree: &OpenTree) -> Vec<u8> {
    let doc = TreeDoc {
        image_id: tree.canvas.image_id.clone(),
        width: tree.canvas.width,
        height: tree.canvas.height,
        nodes: tree
            .nodes()
            .map(|n| NodeDoc {
                id: n.id.0,
                label: n.label.clone(),
                parent: (!n.parent.is_root()).then_some(n.parent.0),
                rle: n.mask.to_rle_string(),
            })
            .collect(),
    };
    serde_json::to_vec(&doc).expect("tree documents always serialize")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: {error}")]
    Line { line: usize, error: TreeError },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImage { line: usize, image_id: String },
}

/// Parses every non-blank JSONL line independently; line numbers are 1-based.
pub fn parse_corpus_lines(text: &str) -> Vec<(usize, Result<OpenTree, TreeError>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, parse_tree(l.as_bytes())))
        .collect()
}

/// Parses a JSONL corpus, failing on the first bad line or repeated image id.
pub fn parse_corpus(text: &str) -> Result<Vec<OpenTree>, CorpusError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, res) in parse_corpus_lines(text) {
        let tree = res.map_err(|error| CorpusError::Line { line, error })?;
        if !seen.insert(tree.image_id().to_string()) {
            return Err(CorpusError::DuplicateImage {
                line,
                image_id: tree.image_id().to_string(),
            });
        }
        out.push(tree);
    }
    Ok(out)
}

pub fn serialize_corpus<'a>(trees: impl IntoIterator<Item = &'a OpenTree>) -> String {
    let mut out = String::new();
    for t in trees {
        out.push_str(std::str::from_utf8(&serialize_tree(t)).expect("serde_json emits UTF-8"));
        out.push('\n');
    }
    out
}
