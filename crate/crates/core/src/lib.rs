//! Hierarchy flow image-to-image translation.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod flow;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod nets;
pub mod perceptual;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use flow::{Fusion, ModelConfig, Styling, Variant};
pub use nets::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use nets::{init_params, Params, StyleParams};
pub use perceptual::{Backend, LossConfig, Vgg19};
pub use pipeline::{translate, TranslateOptions};
pub use tensor::{Element, FeatureMap, Tensor};
pub use training::{TrainConfig, ImageSize};
