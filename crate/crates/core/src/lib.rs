pub mod answer;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Graph, Modality, OpKind, Var};
pub use checkpoint::Checkpoint;
pub use config::{DropoutRates, Variant, VariantSpec};
pub use data::StoryInstance;
pub use error::{MdamError, Result};
pub use params::{ModelParams, Param};
pub use tensor::Tensor;
pub use text::{PreparedStory, Vocabulary};
