//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otq::degrade::{degrade_corpus, degrade_tree, DegradeKind, DegradeSpec, SWEEP_KEEP_RATIOS};
use otq::label_sim::{load_similarity_table, MissingPolicy, SimilarityProtocol};
use otq::mask::Mask;
use otq::matching::{match_trees, DEFAULT_TAU_NODE};
use otq::pipeline::{
    filter_proposal, merge_siblings, Proposal, MAX_CANVAS_COVERAGE, MAX_PARENT_COVERAGE, SIBLING_MERGE_OVERLAP,
};
use otq::quality::{evaluate_corpus, evaluate_image, Pooling};
use otq::synth::{perturb_small_tree, random_small_tree, synth_corpus, SynthParams};
use otq::tree::{ImageCanvas, InstanceNode, OpenTree};

use common::*;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const TAU: f64 = DEFAULT_TAU_NODE;

/// 60 shallow and 40 dense synthetic trees.
fn fixtures() -> Vec<OpenTree> {
    let mut out = synth_corpus(&SynthParams::shallow(), 11, 60);
    for (i, t) in synth_corpus(&SynthParams::dense(), 12, 40).into_iter().enumerate() {
        let (canvas, nodes) = t.into_parts();
        let canvas = ImageCanvas::new(format!("dense_{i:03}"), canvas.width, canvas.height);
        out.push(OpenTree::new(canvas, nodes).unwrap());
    }
    out
}

fn ac1_identity(fx: &[OpenTree]) -> Outcome {
    let start = Instant::now();
    for t in fx {
        let r = evaluate_image(t, t, &SimilarityProtocol::Strict, TAU).map_err(|e| e.to_string())?;
        let s = &r.scores;
        for (name, v) in [("otq", s.otq), ("tq", s.tq), ("bq", s.bq), ("mean_nq", s.mean_nq), ("mq", s.mq), ("lq", s.lq)] {
            ensure!(v == 1.0, "{}: {name} = {v}", t.image_id());
        }
        ensure!(s.tp == t.len() as u64 && s.fp == 0 && s.fn_ == 0, "{}: counts {s:?}", t.image_id());
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!("{} fixtures, all six scores exactly 1, {took:.2?}", fx.len()))
}

fn ac2_rewire(fx: &[OpenTree]) -> Outcome {
    let spec = DegradeSpec::new(DegradeKind::ParentRewire, 0.5, 2024).unwrap();
    let mut changed_images = 0;
    for t in fx {
        let pred = degrade_tree(t, &spec);
        let r = evaluate_image(&pred, t, &SimilarityProtocol::Strict, TAU).map_err(|e| e.to_string())?;
        let s = &r.scores;
        ensure!(
            s.mean_nq == 1.0 && s.mq == 1.0 && s.lq == 1.0,
            "{}: node scores {} {} {}",
            t.image_id(),
            s.mean_nq,
            s.mq,
            s.lq
        );
        let m = match_trees(&pred, t, TAU).unwrap();
        let (pairs, consistent) = oracle_branch_counts(&pred, t, &m);
        let lca_changed = consistent < pairs;
        if s.tp >= 2 && lca_changed {
            changed_images += 1;
            ensure!(s.tq < 1.0, "{}: LCA changed but tq = {}", t.image_id(), s.tq);
        }
        ensure!(lca_changed || s.tq == 1.0, "{}: no LCA changed but tq = {}", t.image_id(), s.tq);
    }
    ensure!(changed_images > 0, "no image had a changed LCA");
    Ok(format!(
        "meanNQ = MQ = LQ = 1 on {} images; TQ < 1 on all {changed_images} with a changed LCA",
        fx.len()
    ))
}

fn ac3_removal(fx: &[OpenTree]) -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for &keep in &SWEEP_KEEP_RATIOS {
        let spec = DegradeSpec::new(DegradeKind::LeafNodeMissing, keep, 7).unwrap();
        for t in fx {
            let pred = degrade_tree(t, &spec);
            let n = t.len() as f64;
            let k = n - pred.len() as f64;
            let r = evaluate_image(&pred, t, &SimilarityProtocol::Strict, TAU).map_err(|e| e.to_string())?;
            let expect = (n - k) / ((n - k) + k / 2.0);
            let err = (r.scores.tq - expect).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-12, "{} keep {keep}: tq {} vs {expect}", t.image_id(), r.scores.tq);
            ensure!(r.scores.mean_nq == 1.0, "{} keep {keep}: meanNQ {}", t.image_id(), r.scores.mean_nq);
            ensure!(r.scores.bq == 1.0, "{} keep {keep}: bq {}", t.image_id(), r.scores.bq);
            checked += 1;
        }
    }
    Ok(format!("{checked} degraded trees, max |TQ - closed form| = {worst:.1e}, meanNQ = 1"))
}

fn ac4_erosion() -> Outcome {
    let refs = synth_corpus(&SynthParams::dense(), 40, 50);
    let mut series = Vec::new();
    let mut prev = (f64::INFINITY, f64::INFINITY);
    let mut surviving = 0;
    for &keep in [1.0].iter().chain(SWEEP_KEEP_RATIOS.iter()) {
        let spec = DegradeSpec::new(DegradeKind::MaskErosion, keep, 0).unwrap();
        let preds = degrade_corpus(&refs, &spec);
        let rep = evaluate_corpus(&preds, &refs, &SimilarityProtocol::Strict, TAU, Pooling::Macro).map_err(|e| e.to_string())?;
        let c = &rep.corpus.scores;
        ensure!(c.mq <= prev.0 && c.mean_nq <= prev.1, "keep {keep}: MQ {} meanNQ {} after {prev:?}", c.mq, c.mean_nq);
        prev = (c.mq, c.mean_nq);
        for (p, r) in preds.iter().zip(&refs) {
            let m = match_trees(p, r, TAU).unwrap();
            for pair in &m.pairs {
                let (lp, lr) = (&p.node(pair.pred).unwrap().label, &r.node(pair.reference).unwrap().label);
                ensure!(lp == lr, "keep {keep} {}: {lp} matched to {lr}", r.image_id());
                surviving += 1;
            }
        }
        for img in &rep.images {
            ensure!(img.scores.tp == 0 || img.scores.lq == 1.0, "keep {keep} {}: lq {}", img.image_id, img.scores.lq);
        }
        series.push(format!("{keep}: {:.3}/{:.3}", c.mq, c.mean_nq));
    }
    Ok(format!(
        "MQ/meanNQ by keep [{}], LQ = 1 on {surviving} surviving matches",
        series.join(", ")
    ))
}

fn ac5_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tp_pairs = 0;
    for i in 0..500 {
        let side = rng.random_range(4..=8);
        let reference = random_small_tree(&mut rng, &format!("r{i}"), side, 7);
        let pred = if rng.random_bool(0.8) {
            perturb_small_tree(&mut rng, &reference)
        } else {
            random_small_tree(&mut rng, &format!("r{i}"), side, 7)
        };
        ensure!(pred.len() <= 7 && reference.len() <= 7, "tree too large");
        let m = match_trees(&pred, &reference, TAU).map_err(|e| e.to_string())?;
        let best = exhaustive_max(&weight_matrix(&pred, &reference));
        ensure!(matching_weight(&m) == best, "tree {i}: matching {} vs exhaustive {best}", matching_weight(&m));
        let r = evaluate_image(&pred, &reference, &SimilarityProtocol::Strict, TAU).map_err(|e| e.to_string())?;
        let (pairs, consistent) = oracle_branch_counts(&pred, &reference, &m);
        ensure!(
            (r.scores.n_pairs, r.scores.n_consistent) == (pairs, consistent),
            "tree {i}: branch counts {:?} vs oracle {:?}",
            (r.scores.n_pairs, r.scores.n_consistent),
            (pairs, consistent)
        );
        if m.tp.is_empty() {
            ensure!(r.scores.bq == 0.0, "tree {i}: bq without tp");
        } else {
            ensure!(r.scores.bq == oracle_bq(&pred, &reference, &m), "tree {i}: bq {}", r.scores.bq);
        }
        tp_pairs += pairs;
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("500 random pairs, matching and BQ equal the oracles ({tp_pairs} TP pairs), {took:.2?}"))
}

const WORDS: [&str; 20] = [
    "car", "person", "tree", "building", "dog", "wheel", "door", "window", "head", "arm", "rim", "handle", "pane", "eye",
    "hand", "bolt", "hinge", "screw", "pupil", "nail",
];

fn relabel(t: &OpenTree, rng: &mut ChaCha8Rng) -> OpenTree {
    let (canvas, nodes) = t.clone().into_parts();
    let nodes = nodes
        .into_iter()
        .map(|n| {
            if rng.random_bool(0.3) {
                InstanceNode {
                    label: WORDS[rng.random_range(0..WORDS.len())].to_string(),
                    ..n
                }
            } else {
                n
            }
        })
        .collect();
    OpenTree::new(canvas, nodes).unwrap()
}

fn ac6_protocols(fx: &[OpenTree]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut jsonl = String::new();
    for (i, a) in WORDS.iter().enumerate() {
        for b in &WORDS[i + 1..] {
            jsonl.push_str(&format!("{{\"a\":\"{a}\",\"b\":\"{b}\",\"sim\":{}}}\n", rng.random_range(0.0..1.0)));
        }
    }
    let table = load_similarity_table(jsonl.as_bytes(), MissingPolicy::Reject).map_err(|e| e.to_string())?;
    let protocols = [SimilarityProtocol::Strict, SimilarityProtocol::ConstantOne, table];

    let mut preds = Vec::new();
    for (i, t) in fx.iter().enumerate() {
        let kind = [DegradeKind::ParentRewire, DegradeKind::MaskErosion, DegradeKind::RandomNodeMissing][i % 3];
        let degraded = degrade_tree(t, &DegradeSpec::new(kind, 0.75, i as u64).unwrap());
        preds.push(relabel(&degraded, &mut rng));
    }
    let mut lq_differs = 0;
    let mut n = 0;
    for (i, (r, p)) in fx.iter().zip(&preds).enumerate() {
        let g = protocols
            .iter()
            .map(|proto| evaluate_image(p, r, proto, TAU).map(|rep| rep.scores))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let key = |s: &otq::OtqScores| (s.tq.to_bits(), s.bq.to_bits(), s.mq.to_bits(), s.tp, s.fp, s.fn_);
        ensure!(
            g.iter().all(|s| key(s) == key(&g[0])),
            "image {i}: {:?}",
            g.iter().map(key).collect::<Vec<_>>()
        );
        if g[0].lq != g[1].lq {
            lq_differs += 1;
        }
        n += 1;
    }
    ensure!(lq_differs > 0, "relabelling never changed LQ; the check would be vacuous");
    Ok(format!("{n} images, TQ/BQ/MQ/counts bit-identical across strict, lq1, table (LQ differs on {lq_differs})"))
}

fn ac7_flat() -> Outcome {
    let refs = synth_corpus(&SynthParams::shallow(), 70, 20);
    let mut max_err: f64 = 0.0;
    for r in &refs {
        ensure!(r.max_depth() == 3, "{} has depth {}", r.image_id(), r.max_depth());
        let flat = r.flattened();
        let rep = evaluate_image(&flat, r, &SimilarityProtocol::Strict, TAU).map_err(|e| e.to_string())?;
        let m = match_trees(&flat, r, TAU).unwrap();
        let keep: BTreeSet<_> = m.pairs.iter().map(|p| p.reference).collect();
        let skel = oracle_skeleton(r, &keep);
        let (mut pairs, mut at_root) = (0u64, 0u64);
        for (i, a) in m.pairs.iter().enumerate() {
            for b in &m.pairs[i + 1..] {
                pairs += 1;
                if oracle_lca(&skel, a.reference, b.reference).is_root() {
                    at_root += 1;
                }
            }
        }
        let expect = at_root as f64 / pairs as f64;
        max_err = max_err.max((rep.scores.bq - expect).abs());
        ensure!((rep.scores.bq - expect).abs() <= 1e-12, "{}: bq {} vs {expect}", r.image_id(), rep.scores.bq);
        ensure!(rep.scores.tq < 1.0, "{}: tq {}", r.image_id(), rep.scores.tq);
        ensure!(
            (rep.scores.bq - root_lca_fraction(r)).abs() <= 1e-12,
            "{}: skeleton differs from the raw tree",
            r.image_id()
        );
    }
    Ok(format!("{} depth-3 trees, max |BQ - oracle| = {max_err:.1e}, TQ < 1 on all", refs.len()))
}

fn random_gate_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, parent: Option<&Mask>) -> Mask {
    let (bx0, by0, bx1, by1) = match parent.and_then(|p| p.bbox()) {
        Some(b) if rng.random_bool(0.7) => (b.x0, b.y0, b.x1 + 1, b.y1 + 1),
        _ => (0, 0, w, h),
    };
    let x0 = rng.random_range(bx0..bx1);
    let y0 = rng.random_range(by0..by1);
    let x1 = rng.random_range(x0 + 1..=bx1);
    let y1 = rng.random_range(y0 + 1..=by1);
    Mask::rect(w, h, x0, y0, x1, y1).unwrap()
}

fn ac8_gates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut kept, mut rejected, mut merged) = (0usize, 0usize, 0usize);
    for i in 0..10_000 {
        let (w, h) = (rng.random_range(8..=40), rng.random_range(8..=40));
        let canvas = ImageCanvas::new(format!("p{i}"), w, h);
        let parent = if rng.random_bool(0.2) {
            None
        } else {
            Some(random_gate_mask(&mut rng, w, h, None))
        };
        let n = rng.random_range(1..=6);
        let masks: Vec<Mask> = (0..n).map(|_| random_gate_mask(&mut rng, w, h, parent.as_ref())).collect();
        let conf: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.4,
                1 => 0.5,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        let proposal = Proposal::new("x", masks.clone(), conf.clone(), None).unwrap();
        let out = filter_proposal(&proposal, parent.as_ref(), &canvas);

        let canvas_px = (w * h) as f64;
        let parent_bits = parent.as_ref().map(|p| p.to_bits());
        let mut expected = Vec::new();
        for (m, &c) in masks.iter().zip(&conf) {
            let bits = m.to_bits();
            let area = bits.iter().filter(|b| **b).count() as f64;
            let threshold = match &parent_bits {
                Some(pb) if (pb.iter().filter(|b| **b).count() as f64) < 0.05 * canvas_px => 0.4,
                _ => 0.5,
            };
            let parent_ok = parent_bits.as_ref().is_none_or(|pb| {
                let pa = pb.iter().filter(|b| **b).count() as f64;
                pixel_overlap(&bits, pb) as f64 / pa <= MAX_PARENT_COVERAGE
            });
            if c >= threshold && area / canvas_px <= MAX_CANVAS_COVERAGE && parent_ok {
                expected.push((m.clone(), c));
            }
        }
        let got: Vec<(Mask, f64)> = out.masks.iter().cloned().zip(out.confidence.iter().copied()).collect();
        ensure!(got == expected, "proposal {i}: kept {} but gates admit {}", got.len(), expected.len());
        kept += got.len();
        rejected += n - got.len();

        let merged_out = merge_siblings(&masks);
        let bits: Vec<Vec<bool>> = merged_out.iter().map(|m| m.to_bits()).collect();
        for a in 0..bits.len() {
            for b in a + 1..bits.len() {
                let inter = pixel_overlap(&bits[a], &bits[b]) as f64;
                let smaller = bits[a].iter().filter(|x| **x).count().min(bits[b].iter().filter(|x| **x).count()) as f64;
                ensure!(inter / smaller <= SIBLING_MERGE_OVERLAP, "proposal {i}: merged masks overlap {}", inter / smaller);
            }
        }
        let union_in = masks.iter().skip(1).fold(masks[0].clone(), |u, m| u.union(m).unwrap());
        let union_out = merged_out.iter().skip(1).fold(merged_out[0].clone(), |u, m| u.union(m).unwrap());
        ensure!(union_in == union_out, "proposal {i}: merging changed the covered pixels");
        merged += n - merged_out.len();
    }
    Ok(format!("10000 proposals, 0 violations ({kept} kept, {rejected} rejected, {merged} merges)"))
}

fn ac9_scale() -> Outcome {
    let refs = synth_corpus(&SynthParams::dense(), 90, 1000);
    let mean_nodes = refs.iter().map(|t| t.len()).sum::<usize>() as f64 / refs.len() as f64;
    let rewired = degrade_corpus(&refs, &DegradeSpec::new(DegradeKind::ParentRewire, 0.5, 1).unwrap());
    let preds = degrade_corpus(&rewired, &DegradeSpec::new(DegradeKind::MaskErosion, 0.75, 1).unwrap());
    let run = |threads: usize| -> Result<(Vec<u8>, Duration), String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let rep = pool
            .install(|| evaluate_corpus(&preds, &refs, &SimilarityProtocol::Strict, TAU, Pooling::Macro))
            .map_err(|e| e.to_string())?;
        let took = start.elapsed();
        Ok((serde_json::to_vec(&rep).map_err(|e| e.to_string())?, took))
    };
    let (one, t1) = run(1)?;
    let (eight, t8) = run(8)?;
    ensure!(one == eight, "reports differ between 1 and 8 threads");
    ensure!(t1 < Duration::from_secs(60) && t8 < Duration::from_secs(60), "took {t1:?} / {t8:?}");
    Ok(format!(
        "1000 images, {mean_nodes:.1} nodes/image, 1 thread {t1:.2?}, 8 threads {t8:.2?}, {} identical report bytes",
        one.len()
    ))
}

fn main() -> ExitCode {
    let fx = fixtures();
    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("AC1 identity", Box::new(|| ac1_identity(&fx))),
        ("AC2 rewire signature", Box::new(|| ac2_rewire(&fx))),
        ("AC3 removal signature", Box::new(|| ac3_removal(&fx))),
        ("AC4 erosion signature", Box::new(ac4_erosion)),
        ("AC5 oracle equivalence", Box::new(ac5_oracles)),
        ("AC6 label-protocol independence", Box::new(|| ac6_protocols(&fx))),
        ("AC7 flat projection", Box::new(ac7_flat)),
        ("AC8 pipeline gates", Box::new(ac8_gates)),
        ("AC9 determinism and scale", Box::new(ac9_scale)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
