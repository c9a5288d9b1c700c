//! Selective convolutional descriptor aggregation.
//!
//! Given activation tensors already extracted from a convolutional network,
//! this crate localizes the main object of each image without supervision,
//! pools the descriptors inside it into compact features, compresses them and
//! runs exact cosine retrieval with top-k mAP and localization metrics.
//!
//! The typical flow for one image:
//!
//! ```
//! use scda::tensor::{ActivationTensor, Layer, Orientation};
//! use scda::selection::{object_mask, select_descriptors, Connectivity};
//! use scda::aggregation::scda;
//!
//! // a 3x3 grid of 4-channel descriptors with a bright centre cell
//! let mut values = vec![0.1f32; 3 * 3 * 4];
//! values[4 * 4..5 * 4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
//! let t = ActivationTensor::new(3, 3, 4, values, Layer::Pool5, Orientation::Original)?;
//!
//! let masks = object_mask(&t, Connectivity::Eight);
//! let selected = select_descriptors(&t, &masks.largest)?;
//! assert_eq!(selected.positions(), &[(1, 1)]);
//!
//! let feature = scda(&selected)?;
//! assert_eq!(feature.dim(), 8);
//! # Ok::<(), scda::Error>(())
//! ```
//!
//! A longer guide lives in the `book/` directory of the repository.

pub mod aggregation;
pub mod cli;
mod codec;
pub mod compression;
mod error;
pub mod feature_store;
pub mod localization;
pub mod pipeline;
pub mod retrieval;
pub mod selection;
pub mod tensor;

pub use codec::write_atomic;
pub use error::{Error, Result};

// The book's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/localization.md")]
    mod localization {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
