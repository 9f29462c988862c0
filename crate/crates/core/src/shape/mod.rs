//! Implicit template shapes, the deformation field and deformed instances.

pub mod field;
pub mod grid;
pub mod instance;
pub mod template;

pub use field::{deform, DeformationField, FieldParams, LatentVector, LATENT_DIM};
pub use instance::{default_sigma, instance_sdf, sample_instance, InstanceSpec, SdfSample, ShapeInstance};
pub use template::TemplateShape;
