//! Deformed shape instances with dense correspondences to their template.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::shape::field::{DeformationField, FieldParams, LatentVector};
use crate::shape::grid::SpatialGrid;
use crate::shape::template::TemplateShape;

/// Latent standard deviation of the shape prior.
pub const LATENT_SIGMA: f64 = 0.002;
/// Gain on [`LATENT_SIGMA`] mapping the analytic field onto displacements of
/// a few millimetres to a couple of centimetres. Calibrated by Monte-Carlo
/// over 100 instances per template kind (see `shape::instance` tests).
pub const SCALE_ADAPT: f64 = 4.0;
pub const DEFAULT_SAMPLES: usize = 4096;
pub const MIN_SAMPLES: usize = 2048;

const PROJECTION_STEPS: usize = 5;
const MIN_JACOBIAN_DET: f64 = 1e-8;

pub fn default_sigma() -> f64 {
    LATENT_SIGMA * SCALE_ADAPT
}

/// Everything needed to rebuild an instance bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub template: TemplateShape,
    pub latent: LatentVector,
    pub field: FieldParams,
    /// Seed of the template surface sampling, shared by all instances of a
    /// template so that sample `i` corresponds across instances.
    pub surface_seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct ShapeInstance {
    pub spec: InstanceSpec,
    pub field: DeformationField,
    pub template_points: Vec<Vec3>,
    pub template_normals: Vec<Vec3>,
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Sample spacing `sqrt(area / M)`, estimated as twice the mean
    /// nearest-neighbour distance (exact in expectation for uniform samples).
    pub spacing: f64,
    pub center: Vec3,
    pub bounding_radius: f64,
    grid: SpatialGrid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdfSample {
    pub distance: f64,
    pub normal: Vec3,
    pub nearest: usize,
}

fn template_candidate(template: &TemplateShape, rng: &mut ChaCha8Rng) -> Option<(Vec3, Vec3)> {
    let h = template.half_extents() * 1.1;
    let shell = 0.05 * template.half_extents().min();
    let mut p = Vec3::new(rng.gen_range(-h.x..h.x), rng.gen_range(-h.y..h.y), rng.gen_range(-h.z..h.z));
    if template.distance_lower_bound(&p) >= shell || template.sdf(&p).abs() >= shell {
        return None;
    }
    for _ in 0..PROJECTION_STEPS {
        let (d, g) = template.sdf_and_gradient(&p);
        p -= g * d;
    }
    Some((p, template.normal(&p)))
}

impl ShapeInstance {
    pub fn build(spec: InstanceSpec) -> Result<Self> {
        spec.template.validate()?;
        spec.latent.validate()?;
        if spec.samples < MIN_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "instances need at least {MIN_SAMPLES} surface samples"
            )));
        }
        let field = DeformationField::for_template(&spec.template, &spec.field)?;
        let weights = field.weights(&spec.latent);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.surface_seed);
        let n = spec.samples;
        let mut template_points = Vec::with_capacity(n);
        let mut template_normals = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        while points.len() < n {
            let Some((p, nt)) = template_candidate(&spec.template, &mut rng) else {
                continue;
            };
            let j = field.jacobian_with(&weights, &p);
            // singular Jacobian: draw a replacement sample
            if j.determinant() < MIN_JACOBIAN_DET {
                continue;
            }
            let Some(j_inv) = j.try_inverse() else {
                continue;
            };
            let nd = j_inv.transpose() * nt;
            template_points.push(p);
            template_normals.push(nt);
            points.push(p + field.displacement_with(&weights, &p));
            normals.push(nd.normalize());
        }
        let center = points.iter().sum::<Vec3>() / n as f64;
        let bounding_radius = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        let grid = SpatialGrid::new(&points);
        let spacing = points
            .iter()
            .enumerate()
            .map(|(i, p)| grid.nearest_excluding(&points, p, i).map_or(0.0, |(_, d)| d))
            .sum::<f64>()
            * 2.0
            / n as f64;
        Ok(Self {
            spec,
            field,
            template_points,
            template_normals,
            points,
            normals,
            spacing,
            center,
            bounding_radius,
            grid,
        })
    }

    pub fn template(&self) -> &TemplateShape {
        &self.spec.template
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Height of the supporting table (lowest surface sample).
    pub fn table_height(&self) -> f64 {
        self.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
    }

    pub fn max_height(&self) -> f64 {
        self.points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean distance between corresponding template and deformed samples.
    pub fn mean_displacement(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.template_points)
            .map(|(d, t)| (d - t).norm())
            .sum::<f64>()
            / self.len() as f64
    }

    /// Signed distance from the nearest deformed sample; the sign comes from
    /// that sample's normal.
    pub fn sdf(&self, p: &Vec3) -> Result<SdfSample> {
        let (i, dist) = self
            .grid
            .nearest(&self.points, p)
            .ok_or_else(|| Error::InvalidInput("instance has no surface samples".into()))?;
        let normal = self.normals[i];
        let sign = if (p - self.points[i]).dot(&normal) < 0.0 { -1.0 } else { 1.0 };
        Ok(SdfSample {
            distance: sign * dist,
            normal,
            nearest: i,
        })
    }

    /// Writes `x y z nx ny nz` per deformed sample.
    pub fn write_point_cloud(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (p, n) in self.points.iter().zip(&self.normals) {
            writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?;
        }
        Ok(())
    }

    /// Same instance rigidly moved; correspondences are kept.
    pub fn transformed(&self, g: &crate::geometry::RigidTransform) -> ShapeInstance {
        let mut out = self.clone();
        out.points = self.points.iter().map(|p| g.apply(p)).collect();
        out.normals = self.normals.iter().map(|n| g.apply_vector(n)).collect();
        out.center = g.apply(&self.center);
        out.grid = SpatialGrid::new(&out.points);
        out
    }
}

/// Surface-sample-level view used by correspondence-only code paths.
pub fn instance_sdf(inst: &ShapeInstance, p: &Vec3) -> Result<SdfSample> {
    inst.sdf(p)
}

/// Draws a latent `N(0, sigma²)` from `seed` and builds the instance.
pub fn sample_instance(
    template: &TemplateShape,
    seed: u64,
    sigma: f64,
    field: &FieldParams,
    surface_seed: u64,
    samples: usize,
) -> Result<ShapeInstance> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput("latent sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = LatentVector::sample(&mut rng, sigma);
    ShapeInstance::build(InstanceSpec {
        template: template.clone(),
        latent,
        field: field.clone(),
        surface_seed,
        samples,
    })
}
