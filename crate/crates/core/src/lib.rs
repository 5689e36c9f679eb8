//! Semi-supervised few-shot object detection.
//!
//! A small two-stage detector trained in a student-teacher fashion: the EMA
//! teacher produces pseudo labels on weakly augmented unlabeled images, the
//! student learns from them on strongly augmented views, and an entropy
//! regression term ties the student's and teacher's predictions on shared
//! region proposals together. A two-stage base-pretrain / few-shot fine-tune
//! protocol and a generalized (base + novel) evaluation harness sit on top.

pub mod augment;
pub mod data;
pub mod detector;
pub mod entreg;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod semisup;

pub use error::{Error, Result};
pub use geometry::{AffineTransform, BBox, ScoredBox};
pub use image::Image;
