//! Structured filter pruning for small CNNs, guided by Fisher-LDA neuron
//! selection and deconvolution dependency tracing.
//!
//! The guide under `book/` walks through the pipeline; its code blocks run
//! as doctests of this crate.

pub mod arch;
pub mod bench;
pub mod classify;
pub mod dataset;
pub mod deconv;
pub mod error;
pub mod io;
pub mod lda;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// One module per chapter so a failing doctest names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/model-files.md")]
    mod model_files {}
    #[doc = include_str!("../../../book/src/firing-and-lda.md")]
    mod firing_and_lda {}
    #[doc = include_str!("../../../book/src/deconv.md")]
    mod deconv {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
