//! Quasi-static grasp oracle: finger closing against the sampled surface,
//! friction-cone wrench spaces, force closure and gravity resistance under
//! palm disturbances.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_surface_frame, Vec3};
use crate::hand::{fingertip_local, HandDescription, JOINTS_PER_FINGER, NUM_FINGERS, NUM_JOINTS};
use crate::lp::{Cmp, LinearProgram, LpOutcome};
use crate::seeding::rng_for;
use crate::shape::ShapeInstance;
use crate::transfer::Grasp;

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsParams {
    pub mass: f64,
    pub friction: f64,
    /// Gravity acceleration vector, `(0, 0, -9.81)` unless the whole scene
    /// is rotated.
    #[serde(default = "default_gravity")]
    pub gravity: Vec3,
}

fn default_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY)
}

impl PhysicsParams {
    pub fn new(mass: f64, friction: f64) -> Self {
        Self {
            mass,
            friction,
            gravity: default_gravity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !(self.friction >= 0.0) || !self.friction.is_finite() {
            return Err(Error::Domain(format!(
                "need mass > 0 and friction >= 0, got m={} mu={}",
                self.mass, self.friction
            )));
        }
        if !(self.gravity.norm() > 0.0) || self.gravity.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("gravity must be a finite non-zero vector".into()));
        }
        Ok(())
    }

    /// Unit vector opposite to gravity.
    pub fn up(&self) -> Vec3 {
        -self.gravity.normalize()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Normal-force limit per contact, N.
    pub f_max: f64,
    /// Palm stiffness turning palm displacement into a disturbance force, N/m.
    pub k_palm: f64,
    pub perturb_sigma: f64,
    pub disturbances: usize,
    pub m_sides: usize,
    /// Contact patch radius for torsional friction, m.
    pub patch_radius: f64,
    pub close_steps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            f_max: 5.0,
            k_palm: 50.0,
            perturb_sigma: 0.01,
            disturbances: 10,
            m_sides: 8,
            patch_radius: 0.005,
            close_steps: 10,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f_max > 0.0
            && self.k_palm >= 0.0
            && self.perturb_sigma >= 0.0
            && self.m_sides >= 3
            && self.patch_radius >= 0.0
            && self.close_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid oracle configuration: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Vec3,
    /// Unit normal pointing into the object.
    pub normal: Vec3,
    pub finger_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    TableCollision,
    TooFewContacts,
    NoForceClosure,
    Gravity,
    Disturbance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub success: bool,
    pub contacts: Vec<Contact>,
    pub epsilon_quality: f64,
    /// First failing load case: 0 is gravity alone, `k >= 1` the k-th
    /// disturbance.
    pub failed_draw: Option<usize>,
    pub reason: Option<FailureReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedHand {
    pub contacts: Vec<Contact>,
    pub final_angles: [f64; NUM_JOINTS],
}

/// Reference point and torque scale for the wrench space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectFrame {
    pub center: Vec3,
    pub radius: f64,
}

impl ObjectFrame {
    pub fn of(inst: &ShapeInstance) -> Self {
        Self {
            center: inst.center,
            radius: inst.bounding_radius.max(1e-9),
        }
    }
}

fn finger_tip(desc: &HandDescription, grasp: &Grasp, finger: usize, scale: f64) -> Vec3 {
    let lo = finger * JOINTS_PER_FINGER;
    let joints: [f64; JOINTS_PER_FINGER] = std::array::from_fn(|j| grasp.fingers[lo + j] * scale);
    grasp.pregrasp.apply(&fingertip_local(&desc.fingers[finger], &joints))
}

/// Closes each finger linearly from open to the grasp pose in `steps`
/// steps, freezing a finger at its last free step once its tip sphere
/// penetrates the surface.
pub fn close_fingers_with_steps(desc: &HandDescription, inst: &ShapeInstance, grasp: &Grasp, steps: usize) -> Result<ClosedHand> {
    grasp.validate(desc)?;
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one closing step".into()));
    }
    if inst.sdf(&grasp.pregrasp.translation)?.distance < 0.0 {
        return Err(Error::PregraspInCollision);
    }
    let r = desc.tip_radius;
    let mut contacts = Vec::new();
    let mut final_angles = grasp.fingers;
    for f in 0..NUM_FINGERS {
        let penetrates = |s: f64| -> Result<bool> { Ok(inst.sdf(&finger_tip(desc, grasp, f, s))?.distance < r) };
        let mut hit = None;
        if penetrates(0.0)? {
            hit = Some((0usize, 0.0));
        } else {
            for k in 1..=steps {
                let s = k as f64 / steps as f64;
                if penetrates(s)? {
                    // locate the crossing inside the step
                    let mut lo = (k - 1) as f64 / steps as f64;
                    let mut hi = s;
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        if penetrates(mid)? {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    hit = Some((k, hi));
                    break;
                }
            }
        }
        if let Some((k, s)) = hit {
            let frozen = k.saturating_sub(1) as f64 / steps as f64;
            for j in 0..JOINTS_PER_FINGER {
                final_angles[f * JOINTS_PER_FINGER + j] = grasp.fingers[f * JOINTS_PER_FINGER + j] * frozen;
            }
            let tip = finger_tip(desc, grasp, f, s);
            let near = inst.sdf(&tip)?;
            let q = inst.points[near.nearest];
            let n = near.normal;
            contacts.push(Contact {
                point: tip - n * (tip - q).dot(&n),
                normal: -n,
                finger_id: f,
            });
        }
    }
    Ok(ClosedHand {
        contacts,
        final_angles,
    })
}

pub fn close_fingers(desc: &HandDescription, inst: &ShapeInstance, grasp: &Grasp) -> Result<ClosedHand> {
    close_fingers_with_steps(desc, inst, grasp, OracleConfig::default().close_steps)
}

/// Contact wrenches at unit normal force: `m_sides` friction-pyramid edges
/// plus two torsional-friction wrenches per contact. With `torque_scale`
/// the moments are divided by the object radius.
pub fn contact_wrenches(
    contacts: &[Contact],
    frame: &ObjectFrame,
    friction: f64,
    up: &Vec3,
    cfg: &OracleConfig,
    torque_scale: bool,
) -> Vec<[f64; 6]> {
    let s = if torque_scale { 1.0 / frame.radius } else { 1.0 };
    let gamma = friction * cfg.patch_radius;
    let mut out = Vec::with_capacity(contacts.len() * (cfg.m_sides + 2));
    for c in contacts {
        let basis = build_surface_frame(c.point, c.normal, *up);
        let (t1, t2, n) = (basis.x_axis(), basis.y_axis(), basis.z_axis());
        let r = c.point - frame.center;
        let push = |out: &mut Vec<[f64; 6]>, f: Vec3, extra: Vec3| {
            let m = (r.cross(&f) + extra) * s;
            out.push([f.x, f.y, f.z, m.x, m.y, m.z]);
        };
        for k in 0..cfg.m_sides {
            let th = std::f64::consts::TAU * k as f64 / cfg.m_sides as f64;
            push(&mut out, n + (t1 * th.cos() + t2 * th.sin()) * friction, Vec3::zeros());
        }
        push(&mut out, n, n * gamma);
        push(&mut out, n, -n * gamma);
    }
    out
}

fn rank(ws: &[[f64; 6]]) -> usize {
    if ws.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(6, ws.len(), |r, c| ws[c][r]);
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|v| **v > 1e-9 * max.max(1e-300)).count()
}

/// Whether the origin lies strictly inside the convex hull of `ws`:
/// maximize `s` over `λ_i = s + μ_i`, `μ ≥ 0`, `Σ λ_i w_i = 0`, `Σ λ_i = 1`.
pub fn origin_in_interior(ws: &[[f64; 6]]) -> bool {
    if ws.len() < 7 || rank(ws) < 6 {
        return false;
    }
    let n = ws.len();
    // variables: μ_0..μ_{n-1}, s⁺, s⁻
    let mut lp = LinearProgram::new(n + 2);
    lp.cost[n] = -1.0;
    lp.cost[n + 1] = 1.0;
    for d in 0..6 {
        let total: f64 = ws.iter().map(|w| w[d]).sum();
        let mut row: Vec<f64> = ws.iter().map(|w| w[d]).collect();
        row.push(total);
        row.push(-total);
        lp.add_row(row, Cmp::Eq, 0.0);
    }
    let mut row = vec![1.0; n];
    row.push(n as f64);
    row.push(-(n as f64));
    lp.add_row(row, Cmp::Eq, 1.0);
    match lp.solve() {
        LpOutcome::Optimal { x, .. } => x[n] - x[n + 1] > 1e-9,
        _ => false,
    }
}

const DIRECTION_SEED: u64 = 0x6570_7369_6c6f_6e00;
const RANDOM_DIRECTIONS: usize = 2000;

/// Fixed set of unit 6-vectors: the twelve signed axes plus seeded random
/// directions.
pub fn wrench_directions() -> &'static [[f64; 6]] {
    static DIRS: OnceLock<Vec<[f64; 6]>> = OnceLock::new();
    DIRS.get_or_init(|| {
        let mut out = Vec::with_capacity(12 + RANDOM_DIRECTIONS);
        for k in 0..6 {
            for s in [1.0, -1.0] {
                let mut d = [0.0; 6];
                d[k] = s;
                out.push(d);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED);
        while out.len() < 12 + RANDOM_DIRECTIONS {
            let v: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                out.push(v.map(|x| x / n));
            }
        }
        out
    })
}

/// `min_u max_i u·w_i` over the fixed direction set: the support-function
/// estimate of the distance from the origin to the hull boundary.
fn min_support(ws: &[[f64; 6]]) -> f64 {
    wrench_directions()
        .iter()
        .map(|u| {
            ws.iter()
                .map(|w| (0..6).map(|k| u[k] * w[k]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Signed closure margin: the ε estimate when the origin is interior to the
/// wrench hull, otherwise a non-positive value (negative when some sampled
/// direction separates the origin from the hull).
pub fn wrench_margin(contacts: &[Contact], frame: &ObjectFrame, params: &PhysicsParams, cfg: &OracleConfig) -> f64 {
    if contacts.is_empty() {
        return 0.0;
    }
    let ws = contact_wrenches(contacts, frame, params.friction, &params.up(), cfg, true);
    let h = min_support(&ws);
    if contacts.len() >= 2 && origin_in_interior(&ws) {
        h.max(0.0)
    } else {
        h.min(0.0)
    }
}

/// Ferrari–Canny quality of the contact set; positive iff force closure.
pub fn force_closure_quality(contacts: &[Contact], frame: &ObjectFrame, params: &PhysicsParams, cfg: &OracleConfig) -> f64 {
    if contacts.len() < 2 {
        return 0.0;
    }
    wrench_margin(contacts, frame, params, cfg).max(0.0)
}

/// Whether contact forces with at most `f_max` normal force per contact can
/// cancel the external force `load` applied at the object centre.
pub fn can_resist(contacts: &[Contact], frame: &ObjectFrame, params: &PhysicsParams, cfg: &OracleConfig, load: &Vec3) -> bool {
    let per = cfg.m_sides + 2;
    let ws = contact_wrenches(contacts, frame, params.friction, &params.up(), cfg, false);
    let n = ws.len();
    let mut lp = LinearProgram::new(n);
    for d in 0..6 {
        let row: Vec<f64> = ws.iter().map(|w| w[d]).collect();
        let rhs = if d < 3 { -load[d] } else { 0.0 };
        lp.add_row(row, Cmp::Eq, rhs);
    }
    for c in 0..contacts.len() {
        let mut row = vec![0.0; n];
        for v in row.iter_mut().skip(c * per).take(per) {
            *v = 1.0;
        }
        lp.add_row(row, Cmp::Le, cfg.f_max);
    }
    lp.solve().is_feasible()
}

/// Palm-frame disturbance displacements for one evaluation.
pub fn disturbance_draws(seed: u64, cfg: &OracleConfig) -> Vec<Vec3> {
    let mut rng = rng_for(seed, &[]);
    let normal = Normal::new(0.0, cfg.perturb_sigma.max(0.0)).expect("finite sigma");
    (0..cfg.disturbances)
        .map(|_| Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect()
}

fn failure(contacts: Vec<Contact>, eps: f64, draw: Option<usize>, reason: FailureReason) -> StabilityVerdict {
    StabilityVerdict {
        success: false,
        contacts,
        epsilon_quality: eps,
        failed_draw: draw,
        reason: Some(reason),
    }
}

/// Lift proxy: the closed grasp must be force closure and hold the object
/// against gravity alone and against gravity plus each palm disturbance.
pub fn lift_success(
    desc: &HandDescription,
    inst: &ShapeInstance,
    grasp: &Grasp,
    params: &PhysicsParams,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<StabilityVerdict> {
    params.validate()?;
    cfg.validate()?;
    let closed = close_fingers_with_steps(desc, inst, grasp, cfg.close_steps)?;
    let up = params.up();
    let table = inst.points.iter().map(|p| p.dot(&up)).fold(f64::INFINITY, f64::min);
    if grasp.pregrasp.translation.dot(&up) < table {
        return Ok(failure(closed.contacts, 0.0, None, FailureReason::TableCollision));
    }
    if closed.contacts.len() < 2 {
        return Ok(failure(closed.contacts, 0.0, None, FailureReason::TooFewContacts));
    }
    let frame = ObjectFrame::of(inst);
    let eps = force_closure_quality(&closed.contacts, &frame, params, cfg);
    if eps <= 0.0 {
        return Ok(failure(closed.contacts, eps, None, FailureReason::NoForceClosure));
    }
    let weight = params.gravity * params.mass;
    if !can_resist(&closed.contacts, &frame, params, cfg, &weight) {
        return Ok(failure(closed.contacts, eps, Some(0), FailureReason::Gravity));
    }
    for (k, delta) in disturbance_draws(seed, cfg).iter().enumerate() {
        let force = grasp.pregrasp.apply_vector(delta) * cfg.k_palm;
        if !can_resist(&closed.contacts, &frame, params, cfg, &(weight + force)) {
            return Ok(failure(closed.contacts, eps, Some(k + 1), FailureReason::Disturbance));
        }
    }
    Ok(StabilityVerdict {
        success: true,
        contacts: closed.contacts,
        epsilon_quality: eps,
        failed_draw: None,
        reason: None,
    })
}

/// Draws a mass and friction uniformly from the given ranges.
pub fn sample_physics(rng: &mut impl Rng, mass: (f64, f64), friction: (f64, f64)) -> PhysicsParams {
    PhysicsParams::new(rng.gen_range(mass.0..=mass.1), rng.gen_range(friction.0..=friction.1))
}
