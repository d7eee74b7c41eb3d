//! Plans and runs image-classification inference with preprocessing as a
//! first-class cost: throughput models, a Pareto planner, a preprocessing
//! graph optimizer, a partial JPEG decoder and a pipelined engine.
//!
//! The guide in `book/` walks through each module.

pub mod catalog;
pub mod costmodel;
pub mod dagopt;
pub mod engine;
pub mod jpegdec;
pub mod planner;
pub mod preproc;

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cost-models.md")]
    mod cost_models {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/preprocessing-dag.md")]
    mod preprocessing_dag {}
    #[doc = include_str!("../../../book/src/partial-decoding.md")]
    mod partial_decoding {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
