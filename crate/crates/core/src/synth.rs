//! Seeded synthetic open trees.
//!
//! Children are rectangles placed in the cells of a grid laid over their
//! parent, inset by a random margin, so siblings are disjoint and every node
//! lies inside its parent. Labels come from small per-depth vocabularies and
//! repeat among siblings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::image_rng;
use crate::mask::Mask;
use crate::tree::{ImageCanvas, InstanceNode, NodeId, OpenTree};

const VOCAB: [&[&str]; 4] = [
    &["car", "person", "tree", "building", "dog"],
    &["wheel", "door", "window", "head", "arm"],
    &["rim", "handle", "pane", "eye", "hand"],
    &["bolt", "hinge", "screw", "pupil", "nail"],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    /// Inclusive child-count range per depth; its length is the maximum depth.
    pub children: Vec<(u32, u32)>,
    /// Inset of a child inside its grid cell, as a fraction of the cell side.
    pub margin: (f64, f64),
}

impl SynthParams {
    /// Roughly 85 nodes per image over four levels.
    pub fn dense() -> Self {
        SynthParams {
            width: 512,
            height: 512,
            children: vec![(3, 5), (2, 4), (1, 3), (0, 4)],
            margin: (0.1, 0.2),
        }
    }

    /// Around 20 nodes, three levels deep.
    pub fn shallow() -> Self {
        SynthParams {
            width: 256,
            height: 256,
            children: vec![(2, 4), (1, 3), (1, 3)],
            margin: (0.1, 0.2),
        }
    }
}

#[derive(Clone, Copy)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

fn place_children(
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    parent: NodeId,
    area: Rect,
    depth: usize,
    next_id: &mut u64,
    out: &mut Vec<InstanceNode>,
) {
    let Some(&(lo, hi)) = params.children.get(depth) else {
        return;
    };
    let count = rng.random_range(lo..=hi) as usize;
    if count == 0 {
        return;
    }
    // at least 2x2 so a child never covers the middle of its parent
    let grid = ((count as f64).sqrt().ceil() as u32).max(2);
    let (w, h) = (area.x1 - area.x0, area.y1 - area.y0);
    if w / grid < 3 || h / grid < 3 {
        return;
    }
    let mut cells: Vec<u32> = (0..grid * grid).collect();
    // choose which cells are occupied when the grid is not full
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    cells.truncate(count);
    cells.sort_unstable();
    let vocab = VOCAB[depth.min(VOCAB.len() - 1)];
    for cell in cells {
        let (cx, cy) = (cell % grid, cell / grid);
        let c = Rect {
            x0: area.x0 + cx * w / grid,
            y0: area.y0 + cy * h / grid,
            x1: area.x0 + (cx + 1) * w / grid,
            y1: area.y0 + (cy + 1) * h / grid,
        };
        let (cw, ch) = (c.x1 - c.x0, c.y1 - c.y0);
        let mut inset = |side: u32| -> u32 {
            let f = rng.random_range(params.margin.0..=params.margin.1);
            ((side as f64 * f).round() as u32).max(1)
        };
        let r = Rect {
            x0: c.x0 + inset(cw),
            y0: c.y0 + inset(ch),
            x1: c.x1 - inset(cw),
            y1: c.y1 - inset(ch),
        };
        if r.x1 <= r.x0 || r.y1 <= r.y0 {
            continue;
        }
        let id = *next_id;
        *next_id += 1;
        let label = vocab[rng.random_range(0..vocab.len())];
        let mask = Mask::rect(params.width, params.height, r.x0, r.y0, r.x1, r.y1).expect("rect inside canvas");
        out.push(InstanceNode::new(id, label, mask, parent));
        place_children(rng, params, NodeId(id), r, depth + 1, next_id, out);
    }
}

/// Generates one tree. The same `(seed, image_id)` always yields the same tree.
pub fn synth_tree(params: &SynthParams, seed: u64, image_id: &str) -> OpenTree {
    let mut rng = image_rng(seed, image_id);
    let mut nodes = Vec::new();
    let mut next_id = 1;
    let full = Rect {
        x0: 0,
        y0: 0,
        x1: params.width,
        y1: params.height,
    };
    place_children(&mut rng, params, NodeId::ROOT, full, 0, &mut next_id, &mut nodes);
    OpenTree::new(ImageCanvas::new(image_id, params.width, params.height), nodes).expect("synthetic trees are valid")
}

/// `n` trees with ids `img_00000`, `img_00001`, ...
pub fn synth_corpus(params: &SynthParams, seed: u64, n: usize) -> Vec<OpenTree> {
    (0..n).map(|i| synth_tree(params, seed, &format!("img_{i:05}"))).collect()
}

/// A tree of at most `max_nodes` random-pixel masks on a small canvas with
/// random parents and labels drawn from `{a, b, c}`.
pub fn random_small_tree(rng: &mut ChaCha8Rng, image_id: &str, side: u32, max_nodes: usize) -> OpenTree {
    let n = rng.random_range(0..=max_nodes);
    let mut nodes: Vec<InstanceNode> = Vec::with_capacity(n);
    for i in 0..n {
        let mask = random_mask(rng, side);
        let parent = if i == 0 || rng.random_bool(0.3) {
            NodeId::ROOT
        } else {
            nodes[rng.random_range(0..i)].id
        };
        let label = ["a", "b", "c"][rng.random_range(0..3)];
        nodes.push(InstanceNode::new(i as u64 + 1, label, mask, parent));
    }
    OpenTree::new(ImageCanvas::new(image_id, side, side), nodes).expect("random trees are valid")
}

/// A filled random rectangle with some pixels flipped; never empty.
fn random_mask(rng: &mut ChaCha8Rng, side: u32) -> Mask {
    let x0 = rng.random_range(0..side);
    let y0 = rng.random_range(0..side);
    let x1 = rng.random_range(x0 + 1..=side);
    let y1 = rng.random_range(y0 + 1..=side);
    let noise = rng.random_range(0.0..0.2);
    let bits: Vec<bool> = (0..side * side)
        .map(|k| {
            let (x, y) = (k / side, k % side);
            let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
            inside ^ rng.random_bool(noise)
        })
        .collect();
    let m = Mask::from_bits(side, side, &bits).expect("bits cover the canvas");
    if m.is_empty() {
        Mask::rect(side, side, x0, y0, x1, y1).expect("rect inside canvas")
    } else {
        m
    }
}

/// A noisy copy of `tree`: nodes are dropped, re-parented, relabelled or
/// jittered at random and a few random nodes are added.
pub fn perturb_small_tree(rng: &mut ChaCha8Rng, tree: &OpenTree) -> OpenTree {
    let side = tree.canvas().width;
    let mut nodes: Vec<InstanceNode> = Vec::new();
    for n in tree.nodes() {
        if rng.random_bool(0.2) {
            continue;
        }
        let mut bits = n.mask.to_bits();
        for b in bits.iter_mut() {
            if rng.random_bool(0.05) {
                *b = !*b;
            }
        }
        let mask = Mask::from_bits(side, side, &bits).expect("same canvas");
        let mask = if mask.is_empty() { n.mask.clone() } else { mask };
        let label = if rng.random_bool(0.2) {
            ["a", "b", "c"][rng.random_range(0..3)].to_string()
        } else {
            n.label.clone()
        };
        nodes.push(InstanceNode {
            id: n.id,
            label,
            mask,
            parent: n.parent,
        });
    }
    // re-parent onto an earlier survivor (or the root) so no cycle can form
    for i in 0..nodes.len() {
        let keep_parent = nodes[i].parent.is_root() || nodes[..i].iter().any(|p| p.id == nodes[i].parent);
        if !keep_parent || rng.random_bool(0.25) {
            nodes[i].parent = if i == 0 || rng.random_bool(0.4) {
                NodeId::ROOT
            } else {
                nodes[rng.random_range(0..i)].id
            };
        }
    }
    let first_new = tree.ids().map(|i| i.0).max().unwrap_or(0) + 1;
    let extra = rng.random_range(0..=2);
    for next in (first_new..).take(extra) {
        if nodes.len() >= 7 {
            break;
        }
        let parent = if nodes.is_empty() || rng.random_bool(0.5) {
            NodeId::ROOT
        } else {
            nodes[rng.random_range(0..nodes.len())].id
        };
        let label = ["a", "b", "c"][rng.random_range(0..3)];
        nodes.push(InstanceNode::new(next, label, random_mask(rng, side), parent));
    }
    OpenTree::new(tree.canvas().clone(), nodes).expect("perturbed trees are valid")
}
