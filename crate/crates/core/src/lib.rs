//! Open Tree Quality: evaluation of image-specific part hierarchies.
//!
//! Trees are rooted hierarchies of (instance mask, open-vocabulary label)
//! nodes. [`quality::evaluate_image`] matches two trees by mask IoU and scores
//! both node quality and whether matched nodes keep their branch relations.

pub mod degrade;
pub mod label_sim;
pub mod mask;
pub mod matching;
pub mod pipeline;
pub mod quality;
pub mod stats;
pub mod synth;
pub mod tree;

pub use label_sim::{load_similarity_table, MissingPolicy, SimilarityProtocol, SimilarityTable};
pub use mask::{containment, iou, Mask, MaskError, SizeBin};
pub use matching::{match_trees, MatchResult, DEFAULT_TAU_NODE};
pub use quality::{evaluate_corpus, evaluate_image, CorpusReport, EvalError, ImageReport, OtqScores, Pooling};
pub use tree::{parse_corpus, parse_tree, serialize_corpus, serialize_tree, ImageCanvas, InstanceNode, NodeId, OpenTree, TreeError};
