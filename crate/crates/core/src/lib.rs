//! Temporal action proposal generation from environment and actor features.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bmm;
pub mod dataio;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod postproc;
pub mod pvr;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/representation.md")]
    mod representation {}
    #[doc = include_str!("../../../book/src/boundary-matching.md")]
    mod boundary_matching {}
    #[doc = include_str!("../../../book/src/postprocessing.md")]
    mod postprocessing {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
