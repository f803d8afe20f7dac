pub mod augmentation;
pub mod backprop;
pub mod bench;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod tensor;
pub mod layers;
pub mod network;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/feature-maps.md")]
    mod feature_maps {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/forward.md")]
    mod forward {}
    #[doc = include_str!("../../../book/src/pulling-deltas.md")]
    mod pulling_deltas {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    mod gradcheck {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
