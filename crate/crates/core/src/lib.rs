//! Audio-visual segmentation: which object in a clip is making the sound.

pub mod encoders;
pub mod metrics;
pub mod error;
pub mod io;
pub mod mask_head;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod train;
pub mod numeric;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{AutrModel, ModelConfig};
