#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod augment;
pub mod backend;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod modelfile;
pub mod pipeline;
pub mod pooling;
pub mod repvgg;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/reparameterization.md")]
    mod reparameterization {}
    #[doc = include_str!("../../../book/src/pooling.md")]
    mod pooling {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/backend.md")]
    mod backend {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
