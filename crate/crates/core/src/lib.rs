//! Active-view splat reconstruction over a synthetic scene oracle: ensemble
//! uncertainty drives viewpoint selection, the resulting field is partitioned
//! into seam-optimized tiles, and tiles render through level-of-detail caches.

pub mod error;
pub mod math;
pub mod image;
pub mod scene;
pub mod field;
pub mod refine;
pub mod prior;
pub mod uncertainty;
pub mod metrics;
pub mod active;
pub mod maxflow;
pub mod seam;
pub mod tiling;
pub mod lod;
pub mod harness;
pub mod runner;

pub use error::{Error, Result};
