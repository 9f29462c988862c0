//! Reference grasp generators and the dense-plus-contact reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, UnitQuat, Vec3};
use crate::hand::{HandDescription, JOINTS_PER_FINGER, NUM_FINGERS, NUM_JOINTS};
use crate::seeding::rng_for;
use crate::shape::ShapeInstance;
use crate::transfer::Grasp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Half-width of the uniform translation box around the object centre, m.
    pub translation_range: f64,
    /// Half-width of each axis-angle component, rad.
    pub rotation_range: f64,
    pub finger_range: (f64, f64),
    /// Palm height above the object top for the heuristic grasp, m.
    pub heuristic_offset: f64,
    pub heuristic_flexion: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            translation_range: 0.1,
            rotation_range: 0.5,
            finger_range: (0.5, 1.0),
            heuristic_offset: 0.05,
            heuristic_flexion: 0.8,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let (f0, f1) = self.finger_range;
        let ok = self.translation_range >= 0.0
            && self.rotation_range >= 0.0
            && f0 <= f1
            && self.heuristic_offset > 0.0
            && self.heuristic_flexion.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid baseline configuration: {self:?}")))
        }
    }
}

/// Palm facing −z with fingers pointing along +x.
pub fn top_down() -> UnitQuat {
    UnitQuat::from_axis_angle(Vec3::x(), std::f64::consts::PI)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Uniform pose around the object centre; joints outside their limits are
/// clamped.
pub fn random_grasp(desc: &HandDescription, inst: &ShapeInstance, cfg: &BaselineConfig, seed: u64) -> Grasp {
    let mut rng = rng_for(seed, &[]);
    let t = cfg.translation_range;
    let r = cfg.rotation_range;
    let dt = Vec3::from_fn(|_, _| uniform(&mut rng, -t, t));
    let dr = Vec3::from_fn(|_, _| uniform(&mut rng, -r, r));
    let mut fingers = [0.0; NUM_JOINTS];
    for q in fingers.iter_mut() {
        *q = uniform(&mut rng, cfg.finger_range.0, cfg.finger_range.1);
    }
    desc.clamp_joints(&mut fingers);
    let rotation = top_down().compose(&UnitQuat::from_scaled_axis(dr));
    Grasp::new(RigidTransform::new(inst.center + dt, rotation), fingers)
}

/// Top-down grasp a fixed offset above the highest surface sample with all
/// flexion joints half closed.
pub fn heuristic_grasp(desc: &HandDescription, inst: &ShapeInstance, cfg: &BaselineConfig) -> Grasp {
    let top = inst.max_height();
    let mut fingers = [0.0; NUM_JOINTS];
    for f in 0..NUM_FINGERS {
        for j in 1..JOINTS_PER_FINGER {
            fingers[f * JOINTS_PER_FINGER + j] = cfg.heuristic_flexion;
        }
    }
    desc.clamp_joints(&mut fingers);
    let t = Vec3::new(inst.center.x, inst.center.y, top + cfg.heuristic_offset);
    Grasp::new(RigidTransform::new(t, top_down()), fingers)
}

/// `exp(-Σ‖f_i − o‖) + N_c / 4`.
pub fn ppo_reward(fingertips: &[Vec3; NUM_FINGERS], object_center: &Vec3, n_contacts: usize) -> f64 {
    let dist: f64 = fingertips.iter().map(|f| (f - object_center).norm()).sum();
    (-dist).exp() + n_contacts as f64 / NUM_FINGERS as f64
}
