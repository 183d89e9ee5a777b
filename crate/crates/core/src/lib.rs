//! Semi-supervised, attribute-guided unpaired image-to-image translation.
//!
//! Images are decomposed into a spatial content code and a style code whose
//! leading `nz` entries are free noise and whose trailing `nd` entries track
//! `{-1, +1}` attribute labels. Editing the style code at inference time
//! changes attributes while the content code keeps the image structure.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod service;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
