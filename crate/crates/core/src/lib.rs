pub mod error;
pub mod experiment;
pub mod fluid;
pub mod index;
pub mod matching;
pub mod mdp;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/single-user.md")]
    struct SingleUser;
    #[doc = include_str!("../../../book/src/nested-index.md")]
    struct NestedIndex;
    #[doc = include_str!("../../../book/src/scheduling.md")]
    struct Scheduling;
    #[doc = include_str!("../../../book/src/lower-bound.md")]
    struct LowerBound;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    struct Diagnostics;
    #[doc = include_str!("../../../book/src/config.md")]
    struct Config;
    #[doc = include_str!("../../../book/src/artifacts.md")]
    struct Artifacts;
}
