pub mod dataio;
pub mod dropctl;
pub mod error;
pub mod featcache;
pub mod gradstats;
pub mod graph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{build, ArchPreset, CutPoint, Mode, NetGraph};
pub use tensor::{DType, Scalar, Tensor};
