//! Interactive refinement of zero-shot patch predictions with a sparse
//! conditional random field.
//!
//! The unary term comes from cosine similarities between patch and class
//! text embeddings. Two pairwise terms act on sparse, per-iteration
//! resampled neighborhoods: a diversity term that discourages the most
//! dissimilar patches from sharing a label, and an annotation term that
//! pulls patches similar to an expert-annotated one toward its label.
//! Inference is synchronous mean-field message passing.

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod model;
pub mod neighborhood;
pub mod potentials;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use inference::{mean_field_step, refine, EngineConfig, RefinementResult, Refiner};
pub use io::{load_dataset, Dataset, DatasetManifest};
pub use model::{AnnotationSet, Beliefs, ClassTextEmbeddings, EmbeddingMatrix};
pub use neighborhood::{build_index, NeighborhoodIndex, NeighborhoodParams, SampledNeighborhoods};
pub use potentials::{compute_unary, BaseTerm, PairwiseWeights, UnaryField};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};
