//! Concept-based neighbor Shapley attribution (CONE-SHAP) for image classifiers.
//!
//! The crate is layered bottom-up:
//!
//! - [`game`] and [`graph`]: coalition games with memoized evaluation and the
//!   neighbor relation between players.
//! - [`shapley`]: exact, neighbor-restricted and sampled Shapley estimators plus
//!   Monte Carlo and occlusion baselines.
//! - [`segmentation`]: multi-resolution SLIC superpixels and physical adjacency.
//! - [`models`]: built-in classifiers, masking, the stdio adapter, and the
//!   image-to-game bridge.
//! - [`concepts`]: segment embeddings, k-means concept discovery, semantic edges.
//! - [`explain`]: per-segment scores, saliency maps, concept importances.
//! - [`metrics`]: coherency, complexity, faithfulness and SSC/SDC curves.
//! - [`toy`] and [`pipeline`]: a synthetic blob dataset and the file-based
//!   pipeline the CLI drives.

pub mod concepts;
pub mod error;
pub mod explain;
pub mod game;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod pipeline;
pub mod segmentation;
pub mod shapley;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use game::{Coalition, Game, PlayerId, ValueFunction};
pub use graph::{Ablation, EdgeKind, NeighborGraph};
pub use shapley::{AttributionVector, Method, SamplerConfig};
pub use tensor::ImageTensor;
