//! Procedural "human" demonstrations on template shapes.
//!
//! Keypoints are placed by casting rays from the template centre along
//! style-specific directions; thumb and index form the primary opposed
//! pair. The palm sits outward along the mean keypoint normal, facing the
//! object, with its x axis running from thumb toward index.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame3, Mat3, RigidTransform, Vec3};
use crate::hand::NUM_FINGERS;
use crate::retarget::DemoRecord;
use crate::seeding::rng_for;
use crate::shape::TemplateShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspStyle {
    PinchTop,
    WrapSide,
    Tripod,
}

impl GraspStyle {
    pub const ALL: [GraspStyle; 3] = [GraspStyle::PinchTop, GraspStyle::WrapSide, GraspStyle::Tripod];

    pub fn name(&self) -> &'static str {
        match self {
            GraspStyle::PinchTop => "pinch-top",
            GraspStyle::WrapSide => "wrap-side",
            GraspStyle::Tripod => "tripod",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSpec {
    pub template: TemplateShape,
    pub style: GraspStyle,
    /// Standard deviation of the keypoint jitter, m.
    pub jitter: f64,
}

/// Widest object the primary pair can straddle, m.
pub const MAX_APERTURE: f64 = 0.16;
/// Thinnest extent a style can grip, m.
pub const MIN_THICKNESS: f64 = 0.02;
/// Human palm distance from the keypoint centroid, m.
pub const PALM_OFFSET: f64 = 0.05;

fn dir(azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
}

/// Ray directions (thumb, index, middle, ring) from the template centre.
fn style_directions(style: GraspStyle) -> [Vec3; NUM_FINGERS] {
    match style {
        // opposed pair above the equator, supports beside the index
        GraspStyle::PinchTop => [dir(180.0, 35.0), dir(0.0, 35.0), dir(30.0, 30.0), dir(60.0, 25.0)],
        // thumb and fingers on opposite flanks, fingers stacked vertically
        GraspStyle::WrapSide => [dir(-90.0, 10.0), dir(90.0, 25.0), dir(90.0, 0.0), dir(90.0, -25.0)],
        // thumb against index and middle, ring resting beside the middle
        GraspStyle::Tripod => [dir(180.0, 20.0), dir(-30.0, 20.0), dir(30.0, 20.0), dir(60.0, 35.0)],
    }
}

fn check_feasible(template: &TemplateShape, style: GraspStyle) -> Result<()> {
    let h = template.half_extents();
    let (span, name) = match style {
        GraspStyle::PinchTop | GraspStyle::Tripod => (2.0 * h.x, "x"),
        GraspStyle::WrapSide => (2.0 * h.y, "y"),
    };
    if span > MAX_APERTURE {
        return Err(Error::InfeasibleStyle(format!(
            "{}: object width {span:.3} m along {name} exceeds hand aperture {MAX_APERTURE} m",
            style.name()
        )));
    }
    let thickness = match style {
        GraspStyle::WrapSide => 2.0 * h.z,
        _ => 2.0 * h.x.min(h.y).min(h.z),
    };
    if thickness < MIN_THICKNESS {
        return Err(Error::InfeasibleStyle(format!(
            "{}: object thickness {thickness:.3} m below minimum {MIN_THICKNESS} m",
            style.name()
        )));
    }
    Ok(())
}

/// Noise-free keypoints and their outward template normals.
pub fn style_keypoints(template: &TemplateShape, style: GraspStyle) -> Result<([Vec3; NUM_FINGERS], [Vec3; NUM_FINGERS])> {
    template.validate()?;
    check_feasible(template, style)?;
    let dirs = style_directions(style);
    let points = dirs.map(|d| template.ray_surface(&d));
    let normals = points.map(|p| template.normal(&p));
    Ok((points, normals))
}

pub fn synth_demo(spec: &DemoSpec, seed: u64) -> Result<DemoRecord> {
    if !(spec.jitter >= 0.0) || !spec.jitter.is_finite() {
        return Err(Error::InvalidInput("jitter must be finite and >= 0".into()));
    }
    let (clean, normals) = style_keypoints(&spec.template, spec.style)?;
    let mut rng = rng_for(seed, &[]);
    let noise = Normal::new(0.0, spec.jitter).expect("finite jitter");
    let tips = clean.map(|p| p + Vec3::from_fn(|_, _| noise.sample(&mut rng)));

    let mean_normal = normals.iter().sum::<Vec3>();
    let outward = if mean_normal.norm() > 1e-9 {
        mean_normal.normalize()
    } else {
        Vec3::z()
    };
    let centroid = tips.iter().sum::<Vec3>() / NUM_FINGERS as f64;
    let facing = -outward;
    let span = tips[1] - tips[0];
    let mut pointing = span - facing * span.dot(&facing);
    if pointing.norm() < 1e-9 {
        pointing = crate::geometry::build_surface_frame(Vec3::zeros(), facing, Vec3::x()).x_axis();
    }
    let x = pointing.normalize();
    let y = facing.cross(&x);
    let palm = Frame3 {
        origin: centroid + outward * PALM_OFFSET,
        axes: Mat3::from_columns(&[x, y, facing]),
    };
    let record = DemoRecord {
        human_fingertips: tips,
        human_palm: palm,
        object_pose: RigidTransform::identity(),
        object_center: Vec3::zeros(),
    };
    record.validate()?;
    Ok(record)
}
