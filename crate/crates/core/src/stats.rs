//! Dataset statistics and flat-mask compatibility (recall of existing flat
//! references by the masks of a tree corpus).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mask::SizeBin;
use crate::matching::candidate_pairs;
use crate::tree::OpenTree;

pub const DEPTH_ROWS: [&str; 4] = ["1", "2", "3", ">=4"];
pub const BIN_COLUMNS: [&str; 5] = ["All", "XS", "S*", "M", "L"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("unpaired images: {0:?}")]
    Unpaired(Vec<String>),
    #[error("duplicate image_id {0:?}")]
    DuplicateImage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_images: u64,
    pub n_masks: u64,
    pub masks_per_image: f64,
    pub n_unique_labels: u64,
    pub max_depth: u32,
    /// Raw counts, rows = depth 1, 2, 3, >=4; columns = All, XS, S*, M, L.
    pub depth_counts: [[u64; 5]; 4],
    /// Column-normalized percentages of `depth_counts`; empty columns stay 0.
    pub depth_by_bin: [[f64; 5]; 4],
}

fn bin_column(bin: SizeBin) -> usize {
    match bin {
        SizeBin::XS => 1,
        SizeBin::S => 2,
        SizeBin::M => 3,
        SizeBin::L => 4,
    }
}

pub fn corpus_stats<'a>(corpus: impl IntoIterator<Item = &'a OpenTree>) -> CorpusStats {
    let mut n_images = 0u64;
    let mut n_masks = 0u64;
    let mut labels = BTreeSet::new();
    let mut max_depth = 0u32;
    let mut counts = [[0u64; 5]; 4];
    for tree in corpus {
        n_images += 1;
        for node in tree.nodes() {
            n_masks += 1;
            labels.insert(node.label.as_str());
            let d = tree.depth(node.id).expect("node belongs to tree");
            max_depth = max_depth.max(d);
            let row = (d.clamp(1, 4) - 1) as usize;
            let bin = SizeBin::from_area(node.mask.area()).expect("valid nodes are non-empty");
            counts[row][0] += 1;
            counts[row][bin_column(bin)] += 1;
        }
    }
    let mut pct = [[0.0; 5]; 4];
    for col in 0..5 {
        let total: u64 = (0..4).map(|r| counts[r][col]).sum();
        if total > 0 {
            for row in 0..4 {
                pct[row][col] = 100.0 * counts[row][col] as f64 / total as f64;
            }
        }
    }
    CorpusStats {
        n_images,
        n_masks,
        masks_per_image: if n_images == 0 { 0.0 } else { n_masks as f64 / n_images as f64 },
        n_unique_labels: labels.len() as u64,
        max_depth,
        depth_counts: counts,
        depth_by_bin: pct,
    }
}

pub fn render_stats_table(s: &CorpusStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>6}", "Images", "Masks", "M/img", "Labels", "MaxD");
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>8.1} {:>8} {:>6}",
        s.n_images, s.n_masks, s.masks_per_image, s.n_unique_labels, s.max_depth
    );
    out.push('\n');
    let _ = write!(out, "{:>6}", "Depth");
    for c in BIN_COLUMNS {
        let _ = write!(out, " {c:>6}");
    }
    out.push('\n');
    for (r, name) in DEPTH_ROWS.iter().enumerate() {
        let _ = write!(out, "{name:>6}");
        for c in 0..5 {
            let _ = write!(out, " {:>6.1}", s.depth_by_bin[r][c]);
        }
        out.push('\n');
    }
    out
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BinRecall {
    #[serde(rename = "XS")]
    pub xs: Option<f64>,
    #[serde(rename = "S*")]
    pub s: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    #[serde(rename = "L")]
    pub l: Option<f64>,
}

impl BinRecall {
    pub fn get(&self, bin: SizeBin) -> Option<f64> {
        match bin {
            SizeBin::XS => self.xs,
            SizeBin::S => self.s,
            SizeBin::M => self.m,
            SizeBin::L => self.l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CompatReport {
    pub n_references: u64,
    pub n_candidates: u64,
    /// Over references that received a candidate.
    pub mean_iou: f64,
    pub median_iou: f64,
    pub ar: f64,
    pub ar50: f64,
    pub ar75: f64,
    /// AR restricted to references in each size bin; `None` for empty bins.
    pub ar_by_bin: BinRecall,
}

/// Best IoU per reference mask under greedy one-to-one consumption of candidates.
pub fn greedy_best_iou(candidate: &OpenTree, reference: &OpenTree) -> Vec<f64> {
    let mut pairs: Vec<(usize, usize, f64)> = candidate_pairs(candidate, reference);
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    let mut best = vec![0.0; reference.len()];
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    for (c, r, v) in pairs {
        if !used_c[c] && !used_r[r] {
            used_c[c] = true;
            used_r[r] = true;
            best[r] = v;
        }
    }
    best
}

fn recall_at(ious: &[f64], t: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v + 1e-12 >= t).count() as f64 / ious.len() as f64
}

fn average_recall(ious: &[f64]) -> f64 {
    let ts = ar_thresholds();
    ts.iter().map(|&t| recall_at(ious, t)).sum::<f64>() / ts.len() as f64
}

pub fn compat_eval(candidates: &[OpenTree], references: &[OpenTree]) -> Result<CompatReport, StatsError> {
    let mut cand = BTreeMap::new();
    for t in candidates {
        if cand.insert(t.image_id(), t).is_some() {
            return Err(StatsError::DuplicateImage(t.image_id().to_string()));
        }
    }
    let mut refs = BTreeMap::new();
    for t in references {
        if refs.insert(t.image_id(), t).is_some() {
            return Err(StatsError::DuplicateImage(t.image_id().to_string()));
        }
    }
    let unpaired: Vec<String> = cand
        .keys()
        .filter(|k| !refs.contains_key(*k))
        .chain(refs.keys().filter(|k| !cand.contains_key(*k)))
        .map(|k| k.to_string())
        .collect();
    if !unpaired.is_empty() {
        return Err(StatsError::Unpaired(unpaired));
    }
    let per_image: Vec<Vec<(f64, SizeBin)>> = refs
        .par_iter()
        .map(|(id, r)| {
            let best = greedy_best_iou(cand[id], r);
            r.nodes()
                .zip(best)
                .map(|(n, v)| (v, SizeBin::from_area(n.mask.area()).expect("non-empty")))
                .collect()
        })
        .collect();
    let all: Vec<(f64, SizeBin)> = per_image.into_iter().flatten().collect();
    let ious: Vec<f64> = all.iter().map(|x| x.0).collect();
    let mut matched: Vec<f64> = ious.iter().copied().filter(|&v| v > 0.0).collect();
    matched.sort_by(f64::total_cmp);
    let mean_iou = if matched.is_empty() { 0.0 } else { matched.iter().sum::<f64>() / matched.len() as f64 };
    let median_iou = match matched.len() {
        0 => 0.0,
        n if n % 2 == 1 => matched[n / 2],
        n => (matched[n / 2 - 1] + matched[n / 2]) / 2.0,
    };
    let bin_ar = |bin: SizeBin| {
        let v: Vec<f64> = all.iter().filter(|x| x.1 == bin).map(|x| x.0).collect();
        (!v.is_empty()).then(|| average_recall(&v))
    };
    Ok(CompatReport {
        n_references: ious.len() as u64,
        n_candidates: candidates.iter().map(|t| t.len() as u64).sum(),
        mean_iou,
        median_iou,
        ar: average_recall(&ious),
        ar50: recall_at(&ious, 0.5),
        ar75: recall_at(&ious, 0.75),
        ar_by_bin: BinRecall {
            xs: bin_ar(SizeBin::XS),
            s: bin_ar(SizeBin::S),
            m: bin_ar(SizeBin::M),
            l: bin_ar(SizeBin::L),
        },
    })
}

pub fn render_compat_table(r: &CompatReport) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "mIoU", "medIoU", "AR", "AR50", "AR75", "XS", "S*", "M", "L"
    );
    let _ = writeln!(
        out,
        "{:>8.3} {:>8.3} {:>6.3} {:>6.3} {:>6.3} {:>6} {:>6} {:>6} {:>6}",
        r.mean_iou,
        r.median_iou,
        r.ar,
        r.ar50,
        r.ar75,
        cell(r.ar_by_bin.xs),
        cell(r.ar_by_bin.s),
        cell(r.ar_by_bin.m),
        cell(r.ar_by_bin.l)
    );
    out
}
