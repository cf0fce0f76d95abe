//! Williams-Bjerknes tumor growth on the `d`-regular tree.

pub mod analysis;
pub mod configs;
pub mod dynamics;
pub mod error;
pub mod graphical;
pub mod lattice;
pub mod montecarlo;
pub mod rng;
pub mod stats;
pub mod tree;
pub mod verify;

pub use configs::{BoundarySpec, Configuration, InitSpec, Site};
pub use error::*;
pub use rng::{RandomStream, StreamKey};
pub use tree::{Region, TreeParams, VertexAddr};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/tree.md")]
    mod tree {}
    #[doc = include_str!("../../../book/src/configs.md")]
    mod configs {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/graphical.md")]
    mod graphical {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/montecarlo.md")]
    mod montecarlo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
