//! Hierarchical similarity graphs over feature pyramids.
//!
//! Two pyramids are compared level by level through per-coordinate similarity
//! nodes. Nodes at adjacent levels are linked by dataset-level correlations of their
//! class-activation maps, and the overall dissimilarity is inferred top-down: each
//! node is blended with its correlated children according to a learned reliability.
//! The result decomposes exactly into per-node contributions whose coefficients sum
//! to the embedding size.

mod codec;

pub mod ablation;
pub mod attribution;
pub mod avsf;
pub mod config;
pub mod error;
pub mod eval;
pub mod feature;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod training;

pub use ablation::{run_ablation, run_sweep, AblationVariant, ResultsTable, SweepAxis};
pub use attribution::{
    compute_sensitivities, export_saliency, rank_nodes, sensitivities_with, AttributionReport,
    NodeRecord, NodeRef, RankKey, SensitivityField,
};
pub use avsf::{read_pyramid_file, write_pyramid_file, ManifestEntry};
pub use config::{Config, LossKind};
pub use error::{Error, ParseErrorKind, Result};
pub use eval::{recall_at_k, sliced_similarity, RecallResult, SimilaritySlice};
pub use feature::{
    linearize_map, normalize_embedding, pool_and_project, EmbeddingVector, FeatureMap,
    FeaturePyramid, LinearizedMap, ProjectionLayer,
};
pub use graph::{
    compute_cams, compute_similarity_nodes, rescale_and_normalize_cam, CamStack, EdgeStore,
    RescaledCam, RescaledStack, SimilarityNodeVector,
};
pub use inference::{
    compute_reliability, normalize_edges, rectify, rectify_with, top_k_indices, InferenceParams,
    NormalizedEdges, RectifiedNodes, ReliabilityVector,
};
pub use losses::{margin_loss, proxy_anchor_loss, MarginLossConfig, ProxyAnchorConfig};
pub use model::{EncodedSample, Model, PairGraph, PairScorer, PreparedSample, Scoring};
pub use synth::{synthesize_dataset, synthesize_pyramid, SynthSpec};
pub use training::{Checkpoint, LossHead, StepMetrics, TrainOptions, TrainState};
