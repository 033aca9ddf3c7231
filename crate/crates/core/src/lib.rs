//! Tissue triangulation workbench: a position-based-dynamics tissue sheet,
//! a software renderer, reward geometry, contrastive image translation,
//! patch embeddings, generative quality metrics and policy learning.

mod error;
pub mod checkpoint;
pub mod config;
pub mod cut;
pub mod dataset;
pub mod embed;
pub mod geom;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod raster;
pub mod reward;
pub mod rngs;
pub mod sim;

pub use error::{Error, Result};
pub use geom::Vec3;
