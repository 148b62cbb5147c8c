//! Template-matching unaries: patch extraction, K-means template banks and
//! a two-tower match network.

mod checkpoint;
mod net;
mod patch;
mod templates;
mod train;

pub use checkpoint::{read_kmat, write_kmat, KMAT_MAGIC};
pub use net::{
    match_prob, match_probs, matcher_loss, matcher_loss_grad, sigmoid, unary_score, Head, MatchScorer, MatcherArch,
    MatcherParams, Tower, PROB_CLAMP,
};
pub use patch::{extract_patch, iou, label_pair, truth_patch, BoxF, DEFAULT_DEPTH_SCALE, PATCH, PATCH_LEN};
pub use templates::{cluster_templates, kmeans, read_ktpl, write_ktpl, KMeansConfig, KMeansResult, TemplateSet, KTPL_MAGIC};
pub use train::{matcher_train, MatcherTrainConfig, MatcherTrainOutcome};
