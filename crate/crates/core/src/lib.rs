pub mod applat;
pub mod cli;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod geomcam;
pub mod image;
pub mod jsonio;
pub mod metrics;
pub mod nvsnet;
pub mod scenegen;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
