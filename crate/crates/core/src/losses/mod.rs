//! Tube matching, the PQ-style loss, auxiliary, temporal and depth losses.

mod aux;
mod depth;
mod dice;
mod matching;
mod pq;
mod targets;
mod temporal;
mod total;

pub use aux::{
    instance_discrimination_loss, l2_normalize_rows, sample_pixels, tube_id_cross_entropy,
    video_semantic_loss, INSTANCE_MAX_PIXELS, INSTANCE_TEMPERATURE,
};
pub use depth::{depth_loss, SILOG_LAMBDA};
pub use dice::{dice_coefficient, dice_var, vpq_similarity, DICE_EPS};
pub use matching::{hungarian_match, match_predictions, thing_similarity, Matching};
pub use pq::{pq_style_loss, PqFactors, PqTerms, NEG_WEIGHT};
pub use targets::{ClipTargets, GtTube};
pub use temporal::{clip_pair_temporal_loss, frame_logits, temporal_consistency_loss};
pub use total::{
    clip_loss_terms, LossInputs, LossReport, LossTerms, LossWeights, COMPONENTS, DEPTH, INSTANCE,
    PQ_NEG, PQ_POS, SEMANTIC, TEMPORAL, TUBE_ID,
};
