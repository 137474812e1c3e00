//! On-disk formats: tensor containers, checkpoints and flat config files.

pub mod checkpoint;
pub mod config;
pub mod container;

pub use checkpoint::{load_checkpoint, read_checkpoint_config, save_checkpoint};
pub use config::Config;
pub use container::{Container, DType};
