//! Rejection-sampling refinement: perturb a grasp until one candidate holds
//! under every randomized physics draw.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, UnitQuat, Vec3};
use crate::hand::HandDescription;
use crate::seeding::{derive_seed, rng_for};
use crate::shape::ShapeInstance;
use crate::stability::{lift_success, OracleConfig, PhysicsParams};
use crate::transfer::Grasp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationRanges {
    pub dt: f64,
    pub dr: f64,
    pub df: f64,
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        Self {
            dt: 0.02,
            dr: 0.5,
            df: 0.1,
        }
    }
}

impl PerturbationRanges {
    pub fn zero() -> Self {
        Self {
            dt: 0.0,
            dr: 0.0,
            df: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.dt, self.dr, self.df].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("perturbation ranges must be >= 0: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub ranges: PerturbationRanges,
    /// Perturbed candidates tried after the seed grasp.
    pub draws: usize,
    pub randomizations: usize,
    pub mass_range: (f64, f64),
    pub friction_range: (f64, f64),
    pub oracle: OracleConfig,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            ranges: PerturbationRanges::default(),
            draws: 50,
            randomizations: 10,
            mass_range: (0.05, 0.25),
            friction_range: (0.7, 1.0),
            oracle: OracleConfig::default(),
        }
    }
}

impl RefineOptions {
    pub fn validate(&self) -> Result<()> {
        self.ranges.validate()?;
        self.oracle.validate()?;
        let (m0, m1) = self.mass_range;
        let (f0, f1) = self.friction_range;
        if self.draws == 0 || self.randomizations == 0 || !(0.0 < m0 && m0 <= m1) || !(0.0 <= f0 && f0 <= f1) {
            return Err(Error::Config(format!("invalid refinement options: {self:?}")));
        }
        Ok(())
    }
}

/// One randomized physics draw; enough to replay the check exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsDraw {
    pub mass: f64,
    pub friction: f64,
    pub disturbance_seed: u64,
}

impl PhysicsDraw {
    pub fn params(&self) -> PhysicsParams {
        PhysicsParams::new(self.mass, self.friction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub trial: usize,
    pub grasp: Grasp,
    pub accepted: bool,
    /// Index of the first randomization that failed.
    pub failed_randomization: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub grasp: Option<Grasp>,
    pub trials: usize,
    /// Physics draws the accepted grasp passed.
    pub draws: Vec<PhysicsDraw>,
    pub logs: Vec<TrialLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub attempted: usize,
    pub refined: usize,
    /// `None` when nothing was attempted.
    pub rate: Option<f64>,
    pub items: Vec<RefineOutcome>,
}

/// Uniform local perturbation of translation, body-frame rotation and
/// finger joints (clamped to limits).
pub fn perturb(desc: &HandDescription, grasp: &Grasp, ranges: &PerturbationRanges, seed: u64) -> Grasp {
    let mut rng = rng_for(seed, &[]);
    let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let dt = Vec3::new(u(ranges.dt), u(ranges.dt), u(ranges.dt));
    let dr = Vec3::new(u(ranges.dr), u(ranges.dr), u(ranges.dr));
    let mut fingers = grasp.fingers;
    for q in fingers.iter_mut() {
        *q += u(ranges.df);
    }
    desc.clamp_joints(&mut fingers);
    let rotation = grasp.pregrasp.rotation.compose(&UnitQuat::from_scaled_axis(dr));
    Grasp::new(RigidTransform::new(grasp.pregrasp.translation + dt, rotation), fingers)
}

/// The `n` physics draws used for trial `trial` under `seed`; draw `r` is
/// independent of `n`, so more randomizations only add draws.
pub fn physics_draws(seed: u64, trial: usize, n: usize, opts: &RefineOptions) -> Vec<PhysicsDraw> {
    (0..n)
        .map(|r| {
            let mut rng = rng_for(seed, &[2, trial as u64, r as u64]);
            let (m0, m1) = opts.mass_range;
            let (f0, f1) = opts.friction_range;
            PhysicsDraw {
                mass: rng.gen_range(m0..=m1),
                friction: rng.gen_range(f0..=f1),
                disturbance_seed: rng.gen(),
            }
        })
        .collect()
}

/// Checks a grasp under every draw; returns the first failing draw index.
pub fn check_draws(
    desc: &HandDescription,
    inst: &ShapeInstance,
    grasp: &Grasp,
    draws: &[PhysicsDraw],
    oracle: &OracleConfig,
) -> Result<Option<usize>> {
    for (r, d) in draws.iter().enumerate() {
        if !lift_success(desc, inst, grasp, &d.params(), oracle, d.disturbance_seed)?.success {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

/// Tries the seed grasp, then up to `opts.draws` perturbations of it, and
/// returns the first one that passes all randomizations.
pub fn refine(desc: &HandDescription, inst: &ShapeInstance, seed_grasp: &Grasp, opts: &RefineOptions, seed: u64) -> Result<RefineOutcome> {
    opts.validate()?;
    let mut logs = Vec::new();
    for trial in 0..=opts.draws {
        let candidate = if trial == 0 {
            *seed_grasp
        } else {
            perturb(desc, seed_grasp, &opts.ranges, derive_seed(seed, &[1, trial as u64]))
        };
        let draws = physics_draws(seed, trial, opts.randomizations, opts);
        let (failed, error) = match check_draws(desc, inst, &candidate, &draws, &opts.oracle) {
            Ok(f) => (f, None),
            Err(e) => (Some(0), Some(e.to_string())),
        };
        let accepted = failed.is_none();
        logs.push(TrialLog {
            trial,
            grasp: candidate,
            accepted,
            failed_randomization: failed,
            error,
        });
        if accepted {
            return Ok(RefineOutcome {
                grasp: Some(candidate),
                trials: trial + 1,
                draws,
                logs,
            });
        }
    }
    Ok(RefineOutcome {
        grasp: None,
        trials: opts.draws + 1,
        draws: Vec::new(),
        logs,
    })
}

/// Refines every `(instance, grasp)` item with per-item seeds derived from
/// `master` and the item index.
pub fn batch_refine(
    desc: &HandDescription,
    items: &[(&ShapeInstance, Grasp)],
    opts: &RefineOptions,
    master: u64,
) -> Result<RefinementReport> {
    let outcomes = items
        .par_iter()
        .enumerate()
        .map(|(i, (inst, g))| refine(desc, inst, g, opts, derive_seed(master, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from(outcomes))
}

pub fn report_from(items: Vec<RefineOutcome>) -> RefinementReport {
    let attempted = items.len();
    let refined = items.iter().filter(|o| o.grasp.is_some()).count();
    RefinementReport {
        attempted,
        refined,
        rate: (attempted > 0).then(|| refined as f64 / attempted as f64),
        items,
    }
}

impl RefinementReport {
    pub fn summary(&self) -> String {
        match self.rate {
            Some(r) => format!("refined {}/{} ({:.1}%)", self.refined, self.attempted, 100.0 * r),
            None => "refined 0/0 (no inputs)".into(),
        }
    }
}

