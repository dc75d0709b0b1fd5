//! Mask-free, text-driven local image editing with learnable edit regions.
//!
//! The pipeline picks anchor cells from a self-supervised attention map,
//! scores a set of square box proposals around each anchor with a small
//! region generation network trained per image by straight-through
//! Gumbel-Softmax, edits the selected regions with a mask-based editor and
//! ranks the per-anchor results with a weighted text/image quality score.
//!
//! Every pretrained model sits behind a trait in [`backends`]; the
//! [`backends::mock`] implementations are deterministic and analytically
//! checkable, so the whole algorithm runs without weights.

pub mod anchors;
pub mod backends;
pub mod baselines;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod grid;
pub mod image;
pub mod losses;
mod nn;
pub mod regions;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use anchors::{select_anchors, AnchorConfig};
pub use backends::{
    edit_image, embed_image, embed_text, extract_features, patch_tokens, Backends,
    CapabilityDescriptor, EditorBackend, FeatureBackend, ScorerBackend, TokenGrid,
};
pub use embedding::{cosine_distance, cosine_similarity, EmbeddingVector};
pub use error::{Error, Result};
pub use grid::{Anchor, AttentionMap, BoxProposal, FeatureMap, GridRect};
pub use image::{rasterize_mask, ImageBuffer, RegionMask};
pub use losses::{LossBreakdown, LossWeights, PromptSpec, QualityScore};
pub use regions::{
    make_proposals, roi_pool, rgn_forward, sample_gumbel_selection, ArchitectureDescriptor,
    PooledFeature, ProposalConfig, RegionGeneratorParams, SelectionSample,
};
pub use trainer::{
    infer_best_edit, train_region_generator, EditCandidate, GradientMode, Inference, LossTable,
    TrainConfig, TrainOutcome,
};
