//! Grasp dataset augmentation: retarget a few demonstrated grasps onto a
//! robot hand, deform the demonstrated objects with a latent-conditioned
//! field, carry the grasps over through dense correspondences, keep the
//! ones that survive randomized wrench-space checks, and learn a point-set
//! grasping policy from the result.

pub mod baselines;
pub mod demo_synth;
pub mod error;
pub mod geometry;
pub mod hand;
pub mod lp;
pub mod pipeline;
pub mod policy;
pub mod refinement;
pub mod retarget;
pub mod seeding;
pub mod shape;
pub mod stability;
pub mod transfer;

pub use error::{Error, Result};
