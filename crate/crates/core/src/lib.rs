//! Re-ranking and evaluation for text-to-image retrieval over precomputed
//! embeddings.
//!
//! The crate works on dense embedding matrices produced by any dual
//! encoder. It provides:
//!
//! * [`store`]: the `A3REMB01` binary embedding format and JSON-lines
//!   manifests;
//! * [`similarity`]: dense similarity matrices and exhaustive top-K search;
//! * [`augment`]: zero-shot filling of missing attribute slots through an
//!   [`EmbeddingProvider`](provider::EmbeddingProvider);
//! * [`adaption`]: the adapted query, an image-space surrogate for a text
//!   query built from the dominant singular direction of the
//!   similarity-weighted candidate pool;
//! * [`kreciprocal`]: k-reciprocal encoding re-ranking;
//! * [`eval`]: AP@K, mAP@K and rank-movement reports;
//! * [`pipeline`]: the per-query flow and a deterministic batch driver;
//! * [`fixtures`]: seeded synthetic datasets with a modality gap.
//!
//! ```
//! use a3r::pipeline::{run_query, Method, RerankConfig};
//! use a3r::store::{l2_normalize, EmbeddingMatrix, Manifest};
//!
//! let gallery = l2_normalize(&EmbeddingMatrix::from_rows(&[
//!     [1.0f32, 0.1], [0.2, 1.0], [0.9, 0.3],
//! ])?)?;
//! let ids = Manifest::from_ids(["a", "b", "c"])?;
//! let ranking = run_query("q", &[1.0f32, 0.0], &gallery, &ids,
//!                         &RerankConfig::with_method(Method::None))?;
//! assert_eq!(ranking.entries[0].id, "a");
//! # Ok::<(), a3r::Error>(())
//! ```

pub mod adaption;
pub mod augment;
mod error;
pub mod eval;
pub mod fixtures;
pub mod kreciprocal;
pub mod pipeline;
pub mod provider;
pub mod ranking;
pub mod similarity;
pub mod store;

pub use error::{Error, Result};
pub use ranking::{RankedEntry, RankedList};
pub use store::{EmbeddingMatrix, Manifest, SampleRecord};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/adapted-query.md")]
    mod adapted_query {}
    #[doc = include_str!("../../../book/src/k-reciprocal.md")]
    mod k_reciprocal {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
