#![allow(dead_code)]

use isagrasp::geometry::{RigidTransform, UnitQuat, Vec3};
use isagrasp::hand::{FingerChain, HandDescription, NUM_JOINTS};
use isagrasp::shape::{sample_instance, FieldParams, ShapeInstance, TemplateShape};
use isagrasp::policy::{NetShape, PointFeatures, PolicyNet, FEATURE_DIM};
use isagrasp::stability::Contact;
use isagrasp::transfer::Grasp;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PINCH_RADIUS: f64 = 0.05;
pub const PINCH_HEIGHT: f64 = 0.2;

fn chain(name: &str, base: [f64; 3], direction: [f64; 3], curl: [f64; 3]) -> FingerChain {
    FingerChain {
        name: name.into(),
        base,
        direction,
        curl,
        links: [0.05, 0.03, 0.02],
        limits: [[-0.5, 0.5], [0.0, 1.6], [0.0, 1.6], [0.0, 1.6]],
    }
}

/// Two opposed fingers that swing toward each other in the palm x-z plane,
/// plus two fingers that stay out of the way.
pub fn pinch_hand() -> HandDescription {
    HandDescription {
        scale_ratio: 1.0,
        tip_radius: 0.012,
        fingers: vec![
            chain("thumb", [-0.09, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
            chain("index", [0.09, 0.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]),
            chain("middle", [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            chain("ring", [0.0, -0.1, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]),
        ],
    }
}

/// Depth below the palm at which the fingertip arcs reach the sphere at its
/// equator: the tip path `x = -0.09 + 0.1 sin θ` meets `|x| = R + r_tip` at
/// `sin θ = 0.28`.
pub fn pinch_depth() -> f64 {
    let s: f64 = (0.09 - (PINCH_RADIUS + 0.012)) / 0.1;
    0.1 * (1.0 - s * s).sqrt()
}

/// Sphere instance centred under a downward-facing palm at `PINCH_HEIGHT`.
pub fn pinch_scene() -> (HandDescription, ShapeInstance, Grasp) {
    let sphere = sample_instance(&TemplateShape::Sphere { radius: PINCH_RADIUS }, 0, 0.0, &FieldParams::default(), 21, 8192).unwrap();
    let center = Vec3::new(0.0, 0.0, PINCH_HEIGHT - pinch_depth());
    let inst = sphere.transformed(&RigidTransform::from_translation(center));
    let mut fingers = [0.0; NUM_JOINTS];
    fingers[1] = 1.0;
    fingers[5] = 1.0;
    let pregrasp = RigidTransform::new(Vec3::new(0.0, 0.0, PINCH_HEIGHT), UnitQuat::from_axis_angle(Vec3::x(), std::f64::consts::PI));
    (pinch_hand(), inst, Grasp::new(pregrasp, fingers))
}

/// Independent wrench construction: Gram–Schmidt tangent basis from the up
/// vector, pyramid edges at unit normal force, two torsional wrenches.
pub fn oracle_wrenches(contacts: &[Contact], center: Vec3, radius: f64, mu: f64, up: Vec3, m_sides: usize, patch: f64) -> Vec<[f64; 6]> {
    let mut out = Vec::new();
    for c in contacts {
        let n = c.normal / c.normal.norm();
        let mut t1 = up - n * up.dot(&n);
        if t1.norm() < 1e-6 {
            // same fallback as the library: least aligned global axis
            let a = n.abs();
            let i = if a.x <= a.y && a.x <= a.z { 0 } else if a.y <= a.z { 1 } else { 2 };
            let mut e = Vec3::zeros();
            e[i] = 1.0;
            t1 = e - n * e.dot(&n);
        }
        t1 /= t1.norm();
        let t2 = n.cross(&t1);
        let r = c.point - center;
        let mut forces: Vec<(Vec3, Vec3)> = (0..m_sides)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / m_sides as f64;
                (n + mu * (a.cos() * t1 + a.sin() * t2), Vec3::zeros())
            })
            .collect();
        forces.push((n, n * (mu * patch)));
        forces.push((n, -n * (mu * patch)));
        for (f, tau) in forces {
            let m = (r.cross(&f) + tau) / radius;
            out.push([f.x, f.y, f.z, m.x, m.y, m.z]);
        }
    }
    out
}

/// Brute-force closure test: every one of `dirs` random unit wrenches must
/// be a non-negative combination of the contact wrenches.
pub fn brute_force_closure(ws: &[[f64; 6]], dirs: usize, rng: &mut impl Rng) -> bool {
    for _ in 0..dirs {
        let d: Vec<f64> = loop {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                break v.iter().map(|x| x / n).collect();
            }
        };
        let mut p = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = ws.iter().map(|_| p.add_var(0.0, (0.0, f64::INFINITY))).collect();
        for k in 0..6 {
            let expr: Vec<_> = vars.iter().zip(ws).map(|(v, w)| (*v, w[k])).collect();
            p.add_constraint(&expr[..], ComparisonOp::Eq, d[k]);
        }
        if p.solve().is_err() {
            return false;
        }
    }
    true
}

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Contacts on a sphere of radius `r` around `center` with inward normals.
pub fn sphere_contacts(rng: &mut impl Rng, k: usize, center: Vec3, r: f64) -> Vec<Contact> {
    (0..k)
        .map(|i| {
            let u = random_unit(rng);
            Contact {
                point: center + u * r,
                normal: -u,
                finger_id: i,
            }
        })
        .collect()
}

pub fn random_features(rng: &mut impl Rng, n: usize) -> PointFeatures {
    let values = (0..n * FEATURE_DIM)
        .map(|k| if k % FEATURE_DIM < 3 { rng.gen_range(-0.05..0.05) } else { rng.gen_range(-1.0..1.0) })
        .collect();
    PointFeatures {
        values,
        center: Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.1)),
    }
}

/// Central-difference check of the analytic gradient on a small network.
pub fn max_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetShape {
        point_widths: vec![FEATURE_DIM, 5, 6, 8],
        head_hidden: 4,
    };
    let mut net = PolicyNet::new(shape, seed).unwrap();
    for p in net.params.iter_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    // labels sit at least 0.05 from the prediction in every L1 coordinate so
    // that no kink of the absolute value falls inside the difference step
    fn away(rng: &mut impl Rng, v: f64) -> f64 {
        v + rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
    }
    let batch: Vec<(PointFeatures, Grasp)> = (0..2)
        .map(|_| {
            let f = random_features(&mut rng, 4);
            let out = net.predict(&f).unwrap();
            let t = out.translation.map(|v| away(&mut rng, v));
            let fingers = out.fingers.map(|v| away(&mut rng, v));
            let q = UnitQuat::from_scaled_axis(random_unit(&mut rng) * rng.gen_range(0.3..2.5)).compose(&out.rotation);
            (f, Grasp::new(RigidTransform::new(t, q), fingers))
        })
        .collect();
    let (_, grad) = net.loss_and_gradient(&batch);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let orig = net.params[i];
        net.params[i] = orig + h;
        let up = net.mean_loss(&batch);
        net.params[i] = orig - h;
        let down = net.mean_loss(&batch);
        net.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

/// Contacts on a sphere with normals tilted away from radial so that the
/// friction-free torques are not all zero.
pub fn tilted_contacts(rng: &mut impl Rng, k: usize) -> Vec<Contact> {
    sphere_contacts(rng, k, Vec3::zeros(), 0.05)
        .into_iter()
        .map(|mut c| {
            let axis = random_unit(rng);
            let tilt = UnitQuat::from_axis_angle(axis, rng.gen_range(0.0..0.5));
            c.normal = tilt.rotate(&c.normal);
            c
        })
        .collect()
}
