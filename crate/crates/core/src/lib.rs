//! Deep edge filtering for neural network features.
//!
//! The edge filter replaces a feature map `h` by `h − detach(LPF(h))`: a
//! high-pass residual whose low-pass branch is cut out of the gradient. This
//! crate ships the filter, a small CPU autodiff engine to train models that
//! carry it, dataset loaders and corruptions, test-time adaptation, and the
//! measurement tools used to study the filter's effect.
//!
//! ```
//! use edgefilter::filters::{edge_filter, FilterSpec};
//! use edgefilter::Tensor;
//!
//! let h = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1])?;
//! let spec = FilterSpec::new(
//!     edgefilter::filters::LpfKind::Mean,
//!     edgefilter::filters::Dimensionality::OneD,
//!     3,
//! );
//! let e = edge_filter(&h, &spec)?;
//! assert!((e.data()[0] + 2.0 / 3.0).abs() < 1e-6);
//! # Ok::<(), edgefilter::Error>(())
//! ```

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/edge-filter.md")]
    mod edge_filter {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
