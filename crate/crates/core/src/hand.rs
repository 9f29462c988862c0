//! Kinematics of the simplified four-finger hand.
//!
//! Every finger is a planar chain: an abduction joint about the finger's
//! curl axis, then three flexion joints that rotate the chain direction
//! toward the curl axis. That keeps forward kinematics closed-form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame3, RigidTransform, UnitQuat, Vec3};

pub const NUM_FINGERS: usize = 4;
pub const JOINTS_PER_FINGER: usize = 4;
pub const NUM_JOINTS: usize = NUM_FINGERS * JOINTS_PER_FINGER;

const DEFAULT_HAND: &str = include_str!("../assets/default_hand.toml");

/// One kinematic chain, all vectors in the palm frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerChain {
    pub name: String,
    pub base: [f64; 3],
    pub direction: [f64; 3],
    pub curl: [f64; 3],
    pub links: [f64; 3],
    pub limits: [[f64; 2]; JOINTS_PER_FINGER],
}

impl FingerChain {
    pub fn length(&self) -> f64 {
        self.links.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandDescription {
    /// Robot-to-human hand size ratio used by the retargeting shape term.
    pub scale_ratio: f64,
    /// Fingertip sphere radius in meters.
    pub tip_radius: f64,
    pub fingers: Vec<FingerChain>,
}

impl Default for HandDescription {
    fn default() -> Self {
        Self::from_toml(DEFAULT_HAND).expect("shipped hand description is valid")
    }
}

impl HandDescription {
    pub fn from_toml(text: &str) -> Result<Self> {
        let desc: HandDescription =
            toml::from_str(text).map_err(|e| Error::Config(format!("hand description: {e}")))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fingers.len() != NUM_FINGERS {
            return Err(Error::Config(format!(
                "expected {NUM_FINGERS} fingers, found {}",
                self.fingers.len()
            )));
        }
        if !(self.tip_radius > 0.0) || !(self.scale_ratio > 0.0) {
            return Err(Error::Config("tip_radius and scale_ratio must be > 0".into()));
        }
        for f in &self.fingers {
            if f.links.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::Config(format!("finger {}: link lengths must be > 0", f.name)));
            }
            if f.limits.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::Config(format!("finger {}: inverted joint limits", f.name)));
            }
            let d = Vec3::from(f.direction);
            let c = Vec3::from(f.curl);
            if (d.norm() - 1.0).abs() > 1e-9 || (c.norm() - 1.0).abs() > 1e-9 || d.dot(&c).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "finger {}: direction and curl must be orthonormal",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn limits(&self, joint: usize) -> (f64, f64) {
        let [lo, hi] = self.fingers[joint / JOINTS_PER_FINGER].limits[joint % JOINTS_PER_FINGER];
        (lo, hi)
    }

    /// Clamps every joint into its interval; returns whether anything moved.
    pub fn clamp_joints(&self, joints: &mut [f64; NUM_JOINTS]) -> bool {
        let mut clamped = false;
        for (j, v) in joints.iter_mut().enumerate() {
            let (lo, hi) = self.limits(j);
            let c = v.clamp(lo, hi);
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        clamped
    }

    pub fn mid_joints(&self) -> [f64; NUM_JOINTS] {
        std::array::from_fn(|j| {
            let (lo, hi) = self.limits(j);
            0.5 * (lo + hi)
        })
    }

    /// Chain length from `joint` to the fingertip.
    pub fn distal_length(&self, joint: usize) -> f64 {
        let f = &self.fingers[joint / JOINTS_PER_FINGER];
        match joint % JOINTS_PER_FINGER {
            0 | 1 => f.length(),
            k => f.links[k - 1..].iter().sum(),
        }
    }
}

/// Floating base plus sixteen finger joints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub base: RigidTransform,
    pub fingers: [f64; NUM_JOINTS],
}

impl HandPose {
    pub fn new(base: RigidTransform, fingers: [f64; NUM_JOINTS]) -> Self {
        Self { base, fingers }
    }

    pub fn is_finite(&self) -> bool {
        self.base.translation.iter().all(|v| v.is_finite())
            && self.base.rotation.to_array().iter().all(|v| v.is_finite())
            && self.fingers.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandKinematics {
    pub palm_frame: Frame3,
    pub fingertips: [Vec3; NUM_FINGERS],
    /// Palm normal, the palm-frame z axis.
    pub facing: Vec3,
    /// Palm-frame x axis.
    pub pointing: Vec3,
    /// Set when some joint was outside its limits and got clamped.
    pub clamped: bool,
}

/// Fingertip centre of one finger in the palm frame.
pub fn fingertip_local(chain: &FingerChain, joints: &[f64]) -> Vec3 {
    let curl = Vec3::from(chain.curl);
    let dir = UnitQuat::from_axis_angle(curl, joints[0]).rotate(&Vec3::from(chain.direction));
    let mut tip = Vec3::from(chain.base);
    let mut theta = 0.0;
    for (link, q) in chain.links.iter().zip(&joints[1..]) {
        theta += q;
        tip += (dir * theta.cos() + curl * theta.sin()) * *link;
    }
    tip
}

pub fn forward_kinematics(desc: &HandDescription, pose: &HandPose) -> Result<HandKinematics> {
    if !pose.is_finite() {
        return Err(Error::InvalidInput("hand pose contains NaN or infinity".into()));
    }
    let mut joints = pose.fingers;
    let clamped = desc.clamp_joints(&mut joints);
    let palm_frame = pose.base.to_frame();
    let fingertips = std::array::from_fn(|i| {
        let local = fingertip_local(
            &desc.fingers[i],
            &joints[i * JOINTS_PER_FINGER..(i + 1) * JOINTS_PER_FINGER],
        );
        pose.base.apply(&local)
    });
    Ok(HandKinematics {
        facing: palm_frame.z_axis(),
        pointing: palm_frame.x_axis(),
        palm_frame,
        fingertips,
        clamped,
    })
}
