//! Human-to-robot grasp retargeting.
//!
//! The robot pose minimizes `w_g·d_g + w_c·d_c + w_r·d_r`, where `d_g`
//! compares fingertip-to-palm displacements (human ones scaled by the hand
//! size ratio), `d_c` compares fingertip-to-object-centre vectors and `d_r`
//! is the geodesic distance between palm orientations.
//!
//! The solver is multi-start projected gradient descent on
//! `(translation, rotation, finger joints)` with central-difference gradients
//! of the position terms, spectral (Barzilai–Borwein) trial steps and
//! monotone backtracking. The rotation is an axis-angle vector composed onto
//! the human palm orientation, so the rotation term is the norm of that
//! vector and is applied through its shrinkage operator; joint limits are
//! enforced by projection after every step.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, Frame3, RigidTransform, UnitQuat, Vec3};
use crate::hand::{forward_kinematics, HandDescription, HandKinematics, HandPose, NUM_FINGERS, NUM_JOINTS};
use crate::seeding::rng_for;

/// Human keypoints for the grasp frame of one demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    /// Thumb, index, middle, ring.
    pub human_fingertips: [Vec3; NUM_FINGERS],
    pub human_palm: Frame3,
    pub object_pose: RigidTransform,
    pub object_center: Vec3,
}

impl DemoRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = self.human_fingertips.iter().flat_map(|v| v.iter()).all(|v| v.is_finite())
            && self.object_center.iter().all(|v| v.is_finite())
            && self.human_palm.origin.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("demo record has non-finite entries".into()));
        }
        self.human_palm.validate()
    }

    /// Applies `g` to every spatial quantity in the record.
    pub fn transformed(&self, g: &RigidTransform) -> DemoRecord {
        let r = g.rotation.to_matrix();
        DemoRecord {
            human_fingertips: self.human_fingertips.map(|p| g.apply(&p)),
            human_palm: Frame3 {
                origin: g.apply(&self.human_palm.origin),
                axes: r * self.human_palm.axes,
            },
            object_pose: g.compose(&self.object_pose),
            object_center: g.apply(&self.object_center),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetWeights {
    pub w_g: f64,
    pub w_c: f64,
    pub w_r: f64,
}

impl Default for RetargetWeights {
    fn default() -> Self {
        Self {
            w_g: 1.0,
            w_c: 1.0,
            w_r: 0.5,
        }
    }
}

impl RetargetWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_g, self.w_c, self.w_r];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidInput(format!("invalid retargeting weights {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    /// Translation jitter (m) applied to the palm anchor for restarts > 0.
    pub translation_jitter: f64,
    /// Rotation jitter (rad) applied to the palm anchor for restarts > 0.
    pub rotation_jitter: f64,
    pub seed: u64,
}

impl Default for RetargetOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 500,
            grad_tol: 1e-6,
            fd_step: 1e-5,
            translation_jitter: 0.03,
            rotation_jitter: 0.4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetargetResult {
    pub pose: HandPose,
    pub objective: f64,
    /// `[d_g, d_c, d_r]` at the returned pose.
    pub term_values: [f64; 3],
    pub converged: bool,
    /// Index of the restart that produced `pose`.
    pub restart: usize,
    /// Objective after every accepted iteration of the winning restart.
    pub trace: Vec<f64>,
    /// Objective at each restart's starting point.
    pub start_objectives: Vec<f64>,
}

fn dg_from(desc: &HandDescription, k: &HandKinematics, demo: &DemoRecord) -> f64 {
    let s = desc.scale_ratio;
    (0..NUM_FINGERS)
        .map(|i| {
            let a_r = k.fingertips[i] - k.palm_frame.origin;
            let a_h = demo.human_fingertips[i] - demo.human_palm.origin;
            (a_r - a_h * s).norm_squared()
        })
        .sum()
}

fn dc_from(k: &HandKinematics, demo: &DemoRecord) -> f64 {
    (0..NUM_FINGERS)
        .map(|i| {
            let c_r = k.fingertips[i] - demo.object_center;
            let c_h = demo.human_fingertips[i] - demo.object_center;
            (c_r - c_h).norm_squared()
        })
        .sum()
}

fn dr_from(k: &HandKinematics, demo: &DemoRecord) -> Result<f64> {
    geodesic_distance(&k.palm_frame.axes, &demo.human_palm.axes)
}

/// Fingertip/palm displacement discrepancy, m².
pub fn cost_dg(desc: &HandDescription, pose: &HandPose, demo: &DemoRecord) -> Result<f64> {
    Ok(dg_from(desc, &forward_kinematics(desc, pose)?, demo))
}

/// Fingertip/object-centre discrepancy, m².
pub fn cost_dc(desc: &HandDescription, pose: &HandPose, demo: &DemoRecord) -> Result<f64> {
    Ok(dc_from(&forward_kinematics(desc, pose)?, demo))
}

/// Palm orientation discrepancy, rad.
pub fn cost_dr(desc: &HandDescription, pose: &HandPose, demo: &DemoRecord) -> Result<f64> {
    dr_from(&forward_kinematics(desc, pose)?, demo)
}

/// `[d_g, d_c, d_r]` from a single forward-kinematics pass.
pub fn cost_terms(desc: &HandDescription, pose: &HandPose, demo: &DemoRecord) -> Result<[f64; 3]> {
    let k = forward_kinematics(desc, pose)?;
    Ok([dg_from(desc, &k, demo), dc_from(&k, demo), dr_from(&k, demo)?])
}

pub fn objective(
    desc: &HandDescription,
    pose: &HandPose,
    demo: &DemoRecord,
    w: &RetargetWeights,
) -> Result<f64> {
    let [g, c, r] = cost_terms(desc, pose, demo)?;
    Ok(w.w_g * g + w.w_c * c + w.w_r * r)
}

// Optimization variables: translation (scaled by LENGTH_SCALE), rotation
// as an axis-angle vector about the human palm orientation, finger joints.
// In that chart the rotation term is exactly `w_r·|ω|` (for |ω| <= π), which
// is handled by a shrinkage step instead of a finite-difference gradient.
const DIM: usize = 6 + NUM_JOINTS;
const LENGTH_SCALE: f64 = 0.1;
const MAX_BACKTRACKS: usize = 60;
const STEP_MIN: f64 = 1e-10;
const STEP_MAX: f64 = 1e4;

struct Problem<'a> {
    desc: &'a HandDescription,
    demo: &'a DemoRecord,
    weights: &'a RetargetWeights,
    anchor_translation: Vec3,
    anchor_rotation: UnitQuat,
}

type Point = [f64; DIM];

impl Problem<'_> {
    fn pose_at(&self, x: &Point) -> HandPose {
        let t = self.anchor_translation + Vec3::new(x[0], x[1], x[2]) * LENGTH_SCALE;
        let q = self.anchor_rotation.compose(&UnitQuat::from_scaled_axis(Vec3::new(x[3], x[4], x[5])));
        HandPose::new(RigidTransform::new(t, q), std::array::from_fn(|j| x[6 + j]))
    }

    /// Position terms only.
    fn smooth(&self, x: &Point) -> f64 {
        match forward_kinematics(self.desc, &self.pose_at(x)) {
            Ok(k) => self.weights.w_g * dg_from(self.desc, &k, self.demo) + self.weights.w_c * dc_from(&k, self.demo),
            Err(_) => f64::INFINITY,
        }
    }

    fn rotation_term(&self, x: &Point) -> f64 {
        self.weights.w_r * Vec3::new(x[3], x[4], x[5]).norm()
    }

    fn gradient(&self, x: &Point, h: f64) -> Point {
        let mut g = [0.0; DIM];
        for i in 0..DIM {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += h;
            xm[i] -= h;
            g[i] = (self.smooth(&xp) - self.smooth(&xm)) / (2.0 * h);
        }
        g
    }

    /// Proximal map of the rotation term plus projection onto joint limits.
    fn prox(&self, x: &mut Point, alpha: f64) {
        let w = Vec3::new(x[3], x[4], x[5]);
        let n = w.norm();
        let shrunk = if n > alpha * self.weights.w_r { w * (1.0 - alpha * self.weights.w_r / n) } else { Vec3::zeros() };
        // keep the chart inside the ball of radius π
        let shrunk = if shrunk.norm() > std::f64::consts::PI {
            shrunk * (1.0 - std::f64::consts::TAU / shrunk.norm())
        } else {
            shrunk
        };
        x[3] = shrunk.x;
        x[4] = shrunk.y;
        x[5] = shrunk.z;
        for j in 0..NUM_JOINTS {
            let (lo, hi) = self.desc.limits(j);
            x[6 + j] = x[6 + j].clamp(lo, hi);
        }
    }

    fn step(&self, x: &Point, g: &Point, alpha: f64) -> Point {
        let mut y: Point = std::array::from_fn(|i| x[i] - alpha * g[i]);
        self.prox(&mut y, alpha);
        y
    }
}

struct Descent {
    pose: HandPose,
    objective: f64,
    converged: bool,
    trace: Vec<f64>,
    start_objective: f64,
}

fn descend(p: &Problem, start: Point, opts: &RetargetOptions) -> Descent {
    let mut x = start;
    p.prox(&mut x, 0.0);
    let mut fs = p.smooth(&x);
    let mut f = fs + p.rotation_term(&x);
    let start_objective = f;
    let mut trace = vec![f];
    let mut g = p.gradient(&x, opts.fd_step);
    let mut step = 1.0;
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let unit = p.step(&x, &g, 1.0);
        let mapping: f64 = (0..DIM).map(|i| (unit[i] - x[i]).powi(2)).sum::<f64>().sqrt();
        if mapping < opts.grad_tol {
            converged = true;
            break;
        }
        let mut alpha = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = p.step(&x, &g, alpha);
            let d: Point = std::array::from_fn(|i| cand[i] - x[i]);
            let lin: f64 = (0..DIM).map(|i| g[i] * d[i]).sum();
            let quad: f64 = d.iter().map(|v| v * v).sum::<f64>() / (2.0 * alpha);
            let fs_c = p.smooth(&cand);
            let f_c = fs_c + p.rotation_term(&cand);
            if fs_c <= fs + lin + quad && f_c <= f {
                accepted = Some((cand, fs_c, f_c));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, fs_c, f_c)) = accepted else {
            break;
        };
        let new_g = p.gradient(&cand, opts.fd_step);
        let s: Point = std::array::from_fn(|i| cand[i] - x[i]);
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = (0..DIM).map(|i| s[i] * (new_g[i] - g[i])).sum();
        step = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { (alpha * 4.0).min(STEP_MAX) };
        x = cand;
        g = new_g;
        fs = fs_c;
        f = f_c;
        trace.push(f);
        if ss == 0.0 {
            break;
        }
    }
    Descent {
        pose: p.pose_at(&x),
        objective: f,
        converged,
        trace,
        start_objective,
    }
}

fn start_point(desc: &HandDescription, restart: usize, opts: &RetargetOptions) -> Point {
    let mut x = [0.0; DIM];
    if restart == 0 {
        x[6..].copy_from_slice(&desc.mid_joints());
        return x;
    }
    let mut rng = rng_for(opts.seed, &[restart as u64]);
    for i in 0..3 {
        x[i] = rng.gen_range(-1.0..1.0) * opts.translation_jitter / LENGTH_SCALE;
        x[3 + i] = rng.gen_range(-1.0..1.0) * opts.rotation_jitter;
    }
    for j in 0..NUM_JOINTS {
        let (lo, hi) = desc.limits(j);
        x[6 + j] = rng.gen_range(lo..=hi);
    }
    x
}

/// Multi-start minimization of the weighted retargeting objective.
///
/// Restart 0 starts at the human palm pose with mid-range joints; the others
/// jitter the palm and draw random joints. The lowest objective wins, ties
/// going to the lower restart index.
pub fn retarget(
    desc: &HandDescription,
    demo: &DemoRecord,
    weights: &RetargetWeights,
    opts: &RetargetOptions,
) -> Result<RetargetResult> {
    weights.validate()?;
    demo.validate()?;
    if opts.restarts == 0 {
        return Err(Error::InvalidInput("retargeting needs at least one restart".into()));
    }
    let anchor = demo.human_palm.to_transform()?;
    let problem = Problem {
        desc,
        demo,
        weights,
        anchor_translation: anchor.translation,
        anchor_rotation: anchor.rotation,
    };
    let starts: Vec<Point> = (0..opts.restarts).map(|r| start_point(desc, r, opts)).collect();
    let runs: Vec<Descent> = starts
        .into_par_iter()
        .map(|s| descend(&problem, s, opts))
        .collect();
    let (restart, best) = runs
        .iter()
        .enumerate()
        .fold(None::<(usize, &Descent)>, |acc, (i, d)| match acc {
            Some((_, b)) if b.objective <= d.objective => acc,
            _ => Some((i, d)),
        })
        .expect("at least one restart");
    Ok(RetargetResult {
        pose: best.pose,
        objective: best.objective,
        term_values: cost_terms(desc, &best.pose, demo)?,
        converged: best.converged,
        restart,
        trace: best.trace.clone(),
        start_objectives: runs.iter().map(|d| d.start_objective).collect(),
    })
}
