//! Touch-guided object addition at desk scale.
//!
//! A placement model turns (image, short instruction, touch point) into a
//! bounding box by generating reasoning text and quantised coordinate
//! tokens. A small diffusion editor then synthesises the object inside that
//! box together with an instance mask, and the mask blends the result back
//! onto the untouched source.

pub mod datagen;
pub mod editor;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod placement;
pub mod rng;
pub mod touchprior;

pub use error::{Error, Result};
pub use geometry::{iou, Frame, NormalizedBBox, SizeStats, TouchPoint};
pub use image::{Image, Mask};
