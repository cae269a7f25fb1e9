//! Neighboring-region attention alignment (NRAA) for open-vocabulary
//! detection, at desk scale.
//!
//! The crate implements the full method end to end on a synthetic benchmark
//! small enough to train and evaluate in seconds on a laptop: proposals are
//! surrounded by same-size grid neighbors, every region is mapped to pseudo-
//! word tokens, a small attention block refines the token sequence with its
//! neighborhood as context, and the refined sequence is aligned to a frozen
//! vision-language teacher with a symmetric infoNCE loss over FIFO negative
//! queues. Classification stays open-vocabulary: region embeddings are scored
//! against text embeddings of arbitrary class prompts, so classes never seen
//! during training can be recognized at test time.
//!
//! Everything runs in `f64` on a hand-rolled reverse-mode tape
//! ([`graph::Tape`]), which keeps gradients exact enough for finite-difference
//! checking and runs bit-identically across platforms.
//!
//! See the `examples/` directory for one runnable walkthrough per capability
//! and the `nraa` binary for the file-driven command-line interface.

pub mod alignment;
pub mod config;
pub mod det;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod image;
pub mod nra;
pub mod ovd;
pub mod params;
pub mod tokens;
pub mod toy;
pub mod train;

pub use alignment::{info_nce_graph, info_nce_value, AlignConfig, EmbeddingQueue};
pub use config::{AblationConfig, TrainConfig};
pub use det::{fnv1a64, stream_rng, Stream};
pub use encoders::{ClassVocabulary, OracleVlm, Split};
pub use error::{Error, Result};
pub use eval::{classification_accuracy, detect_scenes, evaluate, Metrics};
pub use geometry::{grid_neighbor, iou, sample_neighbors, union_box, BBox, Direction, ImageSize, RegionSample};
pub use image::Image;
pub use nra::{nra_forward, scaled_attention, NraConfig, SequenceAttention};
pub use ovd::{class_probs, greedy_nms, infer_regions, ClassifierState, Detection, InferenceSettings};
pub use params::{BoundParams, ParamStore, SgdMomentum};
pub use tokens::{
    build_region_sequence, expected_sequence_len, pad_batch, token_dropout, SegmentId,
    TokenSequence, V2l,
};
pub use train::{
    init_model, parse_grid, run_ablation_grid, train_and_evaluate, GridEntry, GridOutcome,
    LossRecord, TrainedRun, Trainer,
};
pub use toy::{
    canonical_prompt_colors, class_colors, class_companion_colors, generate_toy_benchmark, propose,
    roi_features, select_topk, ProposeConfig,
    ToyDataset, ToyGenConfig, ToyScene, D_ROI,
};
