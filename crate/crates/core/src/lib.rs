pub mod analysis;
pub mod cluster;
pub mod csvio;
pub mod data;
pub mod datagen;
pub mod design;
pub mod error;
pub mod gee;
pub mod glm;
pub mod mmi;
pub mod plan;
pub mod relr;
pub mod rng;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
