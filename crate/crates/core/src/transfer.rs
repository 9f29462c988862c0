//! Carrying a grasp from a source instance to a deformed one through the
//! per-sample correspondences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_surface_frame, Frame3, RigidTransform, Vec3};
use crate::hand::{HandDescription, HandPose, NUM_JOINTS};
use crate::shape::ShapeInstance;

pub const DEFAULT_REFERENCES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub pregrasp: RigidTransform,
    /// Final finger pose.
    pub fingers: [f64; NUM_JOINTS],
}

impl Grasp {
    pub fn new(pregrasp: RigidTransform, fingers: [f64; NUM_JOINTS]) -> Self {
        Self { pregrasp, fingers }
    }

    pub fn pose(&self) -> HandPose {
        HandPose::new(self.pregrasp, self.fingers)
    }

    pub fn validate(&self, desc: &HandDescription) -> Result<()> {
        if !self.pose().is_finite() {
            return Err(Error::InvalidInput("grasp contains NaN or infinity".into()));
        }
        for (j, q) in self.fingers.iter().enumerate() {
            let (lo, hi) = desc.limits(j);
            if *q < lo - 1e-12 || *q > hi + 1e-12 {
                return Err(Error::Domain(format!("joint {j} = {q} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn transformed(&self, g: &RigidTransform) -> Grasp {
        Grasp::new(g.compose(&self.pregrasp), self.fingers)
    }
}

impl From<HandPose> for Grasp {
    fn from(p: HandPose) -> Self {
        Grasp::new(p.base, p.fingers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferContext {
    pub reference_indices: Vec<usize>,
    pub local_offsets: Vec<Vec3>,
}

fn sample_frame(inst: &ShapeInstance, i: usize) -> Result<Frame3> {
    if i >= inst.len() {
        return Err(Error::InvalidInput(format!(
            "reference index {i} out of range for {} samples",
            inst.len()
        )));
    }
    Ok(build_surface_frame(inst.points[i], inst.normals[i], Vec3::z()))
}

/// Picks the `n` samples closest to the pregrasp translation and expresses
/// the translation in each sample's surface frame.
pub fn build_context(source: &ShapeInstance, grasp: &Grasp, n: usize) -> Result<TransferContext> {
    if n == 0 || n > source.len() {
        return Err(Error::InvalidInput(format!(
            "need 1..={} reference points, got {n}",
            source.len()
        )));
    }
    let t = grasp.pregrasp.translation;
    let mut order: Vec<(f64, usize)> = source
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - t).norm_squared(), i))
        .collect();
    order.select_nth_unstable_by(n - 1, |a, b| a.partial_cmp(b).unwrap());
    order.truncate(n);
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let reference_indices: Vec<usize> = order.into_iter().map(|(_, i)| i).collect();
    let local_offsets = reference_indices
        .iter()
        .map(|&i| Ok(sample_frame(source, i)?.to_local(&t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferContext {
        reference_indices,
        local_offsets,
    })
}

/// New pregrasp translation as the mean of the offsets mapped through the
/// target's frames at the corresponding samples. Rotation and fingers are
/// copied.
pub fn transfer_grasp(ctx: &TransferContext, source: &ShapeInstance, target: &ShapeInstance, grasp: &Grasp) -> Result<Grasp> {
    if source.spec.template != target.spec.template || source.len() != target.len() {
        return Err(Error::InvalidInput("source and target must share a template".into()));
    }
    if ctx.reference_indices.is_empty() || ctx.reference_indices.len() != ctx.local_offsets.len() {
        return Err(Error::InvalidInput("malformed transfer context".into()));
    }
    let mut sum = Vec3::zeros();
    for (&i, off) in ctx.reference_indices.iter().zip(&ctx.local_offsets) {
        sum += sample_frame(target, i)?.to_world(off);
    }
    let t = sum / ctx.reference_indices.len() as f64;
    Ok(Grasp::new(RigidTransform::new(t, grasp.pregrasp.rotation), grasp.fingers))
}
