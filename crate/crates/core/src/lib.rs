//! Stereographic projection of feature vectors onto the unit hypersphere,
//! angular-margin classification heads (SphereFace, CosFace, ArcFace,
//! BroadFace) and a small training stack to compare them.

pub mod data;
pub mod error;
pub mod heads;
pub mod ndcore;
pub mod stereo;
pub mod train;

pub use error::{Error, Result};
