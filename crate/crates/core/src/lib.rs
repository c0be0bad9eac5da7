pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod elastic;
pub mod error;
pub mod gbt;
pub mod heuristics;
pub mod latency;
pub mod optim;
pub mod params;
pub mod space;
pub mod stats;
pub mod search;
pub mod supernet;
pub mod surrogate;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use space::{DesignSpace, ShapeVector};
pub use supernet::{BackboneConfig, MlmBatch, Supernet};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/shapes.md")]
    mod shapes {}
    #[doc = include_str!("../../../book/src/supernet.md")]
    mod supernet {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/predictors.md")]
    mod predictors {}
    #[doc = include_str!("../../../book/src/latency.md")]
    mod latency {}
    #[doc = include_str!("../../../book/src/heuristics.md")]
    mod heuristics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
