//! Latent-conditioned radial-basis deformation field.
//!
//! `D(p; α) = g · Σ_k w_k(α) · exp(-|p - c_k|² / σ²)` with
//! `w_k(α) = (W α)_k`, so the displacement is smooth in `p` and linear in
//! the latent `α`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::shape::template::TemplateShape;

pub const LATENT_DIM: usize = 128;
pub const LATTICE: usize = 4;
pub const NUM_CENTERS: usize = LATTICE * LATTICE * LATTICE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros() -> Self {
        Self(vec![0.0; LATENT_DIM])
    }

    pub fn sample(rng: &mut impl rand::Rng, sigma: f64) -> Self {
        Self(
            (0..LATENT_DIM)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * sigma
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != LATENT_DIM || self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "latent must have {LATENT_DIM} finite entries"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &LatentVector) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

/// Parameters that fully determine a [`DeformationField`] for a template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldParams {
    /// Seed of the latent-to-weights mixing matrix.
    pub seed: u64,
    /// Kernel width as a fraction of the template bounding-box diagonal.
    pub width_factor: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            width_factor: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub centers: Vec<Vec3>,
    pub sigma: f64,
    /// Row-major `(NUM_CENTERS * 3) × LATENT_DIM`.
    pub mix: Vec<f64>,
    pub gain: f64,
    pub params: FieldParams,
}

impl DeformationField {
    /// Centres on a 4×4×4 lattice spanning the template bounding box, gain
    /// equal to the box diagonal and `N(0, 1/LATENT_DIM)` mixing entries.
    pub fn for_template(template: &TemplateShape, params: &FieldParams) -> Result<Self> {
        template.validate()?;
        if !(params.width_factor > 0.0) {
            return Err(Error::InvalidInput("field width factor must be > 0".into()));
        }
        let h = template.half_extents();
        let mut centers = Vec::with_capacity(NUM_CENTERS);
        for i in 0..LATTICE {
            for j in 0..LATTICE {
                for k in 0..LATTICE {
                    let t = |n: usize| -1.0 + 2.0 * n as f64 / (LATTICE - 1) as f64;
                    centers.push(Vec3::new(h.x * t(i), h.y * t(j), h.z * t(k)));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let scale = (LATENT_DIM as f64).sqrt().recip();
        let mix = (0..NUM_CENTERS * 3 * LATENT_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        let diag = template.bbox_diagonal();
        Ok(Self {
            centers,
            sigma: params.width_factor * diag,
            mix,
            gain: diag,
            params: params.clone(),
        })
    }

    /// Per-centre displacement weights `W α`.
    pub fn weights(&self, latent: &LatentVector) -> Vec<Vec3> {
        (0..NUM_CENTERS)
            .map(|k| {
                Vec3::from_fn(|d, _| {
                    let row = &self.mix[(k * 3 + d) * LATENT_DIM..(k * 3 + d + 1) * LATENT_DIM];
                    row.iter().zip(&latent.0).map(|(a, b)| a * b).sum()
                })
            })
            .collect()
    }

    pub fn displacement_with(&self, weights: &[Vec3], p: &Vec3) -> Vec3 {
        let inv = 1.0 / (self.sigma * self.sigma);
        let mut d = Vec3::zeros();
        for (c, w) in self.centers.iter().zip(weights) {
            d += w * (-(p - c).norm_squared() * inv).exp();
        }
        d * self.gain
    }

    /// Jacobian of `p ↦ p + D(p)`.
    pub fn jacobian_with(&self, weights: &[Vec3], p: &Vec3) -> Mat3 {
        let inv = 1.0 / (self.sigma * self.sigma);
        let mut j = Mat3::zeros();
        for (c, w) in self.centers.iter().zip(weights) {
            let r = p - c;
            let phi = (-r.norm_squared() * inv).exp();
            let grad = r * (-2.0 * inv * phi);
            j += w * grad.transpose();
        }
        Mat3::identity() + j * self.gain
    }
}

/// `p + D(p; α)`.
pub fn deform(field: &DeformationField, latent: &LatentVector, p: &Vec3) -> Vec3 {
    p + field.displacement_with(&field.weights(latent), p)
}
