//! Headline acceptance criteria. Each prints one PASS/FAIL line with the
//! measured value and the pinned tolerance; the test fails if any does.
//!
//! Run alone with `cargo test -p isagrasp --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use common::*;
use isagrasp::geometry::{geodesic_distance, RigidTransform, UnitQuat, Vec3};
use isagrasp::hand::{forward_kinematics, HandDescription, HandPose};
use isagrasp::pipeline::{self, default_templates, PipelineConfig};
use isagrasp::policy::{PointFeatures, PolicyNet, NetShape};
use isagrasp::retarget::{retarget, DemoRecord, RetargetOptions, RetargetWeights};
use isagrasp::shape::{deform, default_sigma, sample_instance, DeformationField, FieldParams, LatentVector, TemplateShape};
use isagrasp::stability::{force_closure_quality, wrench_margin, ObjectFrame, OracleConfig, PhysicsParams};
use isagrasp::transfer::{build_context, transfer_grasp, Grasp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    };
    println!(
        "[{}] {}: {} ({:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.elapsed.as_secs_f64()
    );
    o
}

fn random_pose(desc: &HandDescription, rng: &mut impl Rng) -> HandPose {
    let fingers = std::array::from_fn(|j| {
        let (lo, hi) = desc.limits(j);
        rng.gen_range(lo..=hi)
    });
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    HandPose::new(
        RigidTransform::new(
            Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.0..0.3)),
            UnitQuat::from_scaled_axis(axis * 1.5),
        ),
        fingers,
    )
}

fn retarget_round_trip() -> (bool, String) {
    let desc = HandDescription {
        scale_ratio: 1.0,
        ..HandDescription::default()
    };
    let start = Instant::now();
    let mut recovered = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let k = forward_kinematics(&desc, &random_pose(&desc, &mut rng)).unwrap();
        let demo = DemoRecord {
            human_fingertips: k.fingertips,
            human_palm: k.palm_frame,
            object_pose: RigidTransform::identity(),
            object_center: k.palm_frame.origin + k.facing * 0.06,
        };
        let opts = RetargetOptions {
            seed,
            ..RetargetOptions::default()
        };
        let r = retarget(&desc, &demo, &RetargetWeights::default(), &opts).unwrap();
        worst = worst.max(r.objective);
        recovered += (r.objective < 1e-6) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        recovered >= 48 && secs < 60.0,
        format!("{recovered}/50 below 1e-6 (need >= 48), worst {worst:.2e}, {secs:.1} s (limit 60 s)"),
    )
}

fn gradient_oracle() -> (bool, String) {
    let start = Instant::now();
    let worst = (0..3).map(max_gradient_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-3 && secs < 10.0,
        format!("max relative error {worst:.2e} (limit 1e-3, h = 1e-4), {secs:.1} s (limit 10 s)"),
    )
}

fn force_closure_equivalence() -> (bool, String) {
    let start = Instant::now();
    let cfg = OracleConfig::default();
    let frame = ObjectFrame {
        center: Vec3::zeros(),
        radius: 0.05,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut agree, mut compared, mut excluded, mut closures) = (0, 0, 0, 0);
    for _ in 0..200 {
        let k = rng.gen_range(1..=4);
        let contacts = tilted_contacts(&mut rng, k);
        let mu = rng.gen_range(0.2..1.0);
        let p = PhysicsParams::new(0.1, mu);
        let margin = wrench_margin(&contacts, &frame, &p, &cfg);
        if margin.abs() < 1e-4 {
            excluded += 1;
            continue;
        }
        let ws = oracle_wrenches(&contacts, frame.center, frame.radius, mu, Vec3::z(), cfg.m_sides, cfg.patch_radius);
        let oracle = brute_force_closure(&ws, 300, &mut rng);
        compared += 1;
        closures += oracle as usize;
        agree += (oracle == (margin > 0.0)) as usize;
    }
    let rate = agree as f64 / compared.max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    (
        rate >= 0.98 && compared > 0 && secs < 120.0,
        format!(
            "{agree}/{compared} agree = {:.1}% (need >= 98%), {excluded} excluded at |eps| < 1e-4, {closures} in closure, {secs:.1} s (limit 120 s)",
            100.0 * rate
        ),
    )
}

fn transfer_exactness() -> (bool, String) {
    let mut kinds = default_templates();
    kinds.push(TemplateShape::Capsule {
        radius: 0.03,
        half_length: 0.04,
    });
    let mut worst: f64 = 0.0;
    let shift = Vec3::new(0.013, -0.2, 0.05);
    for (i, t) in kinds.iter().enumerate() {
        let inst = sample_instance(t, i as u64, default_sigma(), &FieldParams::default(), 3, 2048).unwrap();
        let moved = inst.transformed(&RigidTransform::from_translation(shift));
        let g = Grasp::new(RigidTransform::new(inst.center + Vec3::new(0.01, -0.02, 0.09), UnitQuat::identity()), [0.3; 16]);
        for n in [1, 5, 20] {
            let ctx = build_context(&inst, &g, n).unwrap();
            let same = transfer_grasp(&ctx, &inst, &inst, &g).unwrap();
            worst = worst.max((same.pregrasp.translation - g.pregrasp.translation).norm());
            let out = transfer_grasp(&ctx, &inst, &moved, &g).unwrap();
            worst = worst.max((out.pregrasp.translation - (g.pregrasp.translation + shift)).norm());
        }
    }
    (
        worst < 1e-9,
        format!("max translation error {worst:.2e} m over {} templates x n in {{1, 5, 20}} (limit 1e-9 m)", kinds.len()),
    )
}

fn invariant_suites() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures: Vec<String> = Vec::new();

    // permutation invariance of the policy
    let net = PolicyNet::new(NetShape::default(), 3).unwrap();
    let f = random_features(&mut rng, 200);
    let mut order: Vec<usize> = (0..200).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let permuted = PointFeatures {
        values: order.iter().flat_map(|&i| f.row(i).to_vec()).collect(),
        center: f.center,
    };
    if net.predict(&f).unwrap() != net.predict(&permuted).unwrap() {
        failures.push("permutation invariance".into());
    }

    // geodesic metric axioms
    let rot = |rng: &mut ChaCha8Rng| UnitQuat::from_scaled_axis(random_unit(rng) * rng.gen_range(0.0..3.1)).to_matrix();
    for _ in 0..100 {
        let (a, b, c) = (rot(&mut rng), rot(&mut rng), rot(&mut rng));
        let d = |x, y| geodesic_distance(x, y).unwrap();
        let ok = d(&a, &a) < 1e-6 && (d(&a, &b) - d(&b, &a)).abs() < 1e-9 && d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9;
        if !ok {
            failures.push("geodesic metric".into());
            break;
        }
    }

    // friction monotonicity of the closure quality
    let cfg = OracleConfig::default();
    let frame = ObjectFrame {
        center: Vec3::zeros(),
        radius: 0.05,
    };
    for _ in 0..30 {
        let contacts = tilted_contacts(&mut rng, 3);
        let mu = rng.gen_range(0.1..1.0);
        let lo = force_closure_quality(&contacts, &frame, &PhysicsParams::new(0.1, mu), &cfg);
        let hi = force_closure_quality(&contacts, &frame, &PhysicsParams::new(0.1, mu + 0.3), &cfg);
        if lo > hi + 1e-12 {
            failures.push("friction monotonicity".into());
            break;
        }
    }

    // latent linearity of the deformation field
    let t = TemplateShape::Cylinder {
        radius: 0.035,
        half_height: 0.05,
    };
    let field = DeformationField::for_template(&t, &FieldParams::default()).unwrap();
    let a = LatentVector::sample(&mut rng, 0.01);
    let b = LatentVector::sample(&mut rng, 0.01);
    for _ in 0..50 {
        let p = Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
        let (da, db) = (deform(&field, &a, &p) - p, deform(&field, &b, &p) - p);
        let dab = deform(&field, &a.scaled(2.0).add(&b), &p) - p;
        if (dab - (da * 2.0 + db)).norm() > 1e-14 {
            failures.push("latent linearity".into());
            break;
        }
    }

    // rigid equivariance of forward kinematics and of transfer under yaw
    let desc = HandDescription::default();
    for _ in 0..50 {
        let pose = random_pose(&desc, &mut rng);
        let g = random_pose(&desc, &mut rng).base;
        let moved = HandPose::new(g.compose(&pose.base), pose.fingers);
        let (ka, kb) = (forward_kinematics(&desc, &pose).unwrap(), forward_kinematics(&desc, &moved).unwrap());
        if ka.fingertips.iter().zip(&kb.fingertips).any(|(x, y)| (g.apply(x) - y).norm() > 1e-9) {
            failures.push("kinematic rigid equivariance".into());
            break;
        }
    }
    let s = sample_instance(&t, 5, default_sigma(), &FieldParams::default(), 2, 2048).unwrap();
    let g = Grasp::new(RigidTransform::new(s.center + Vec3::new(0.0, 0.02, 0.09), UnitQuat::identity()), [0.2; 16]);
    let yaw = RigidTransform::new(Vec3::zeros(), UnitQuat::from_axis_angle(Vec3::z(), 0.9));
    let ctx = build_context(&s, &g, 20).unwrap();
    let out = transfer_grasp(&ctx, &s, &s.transformed(&yaw), &g).unwrap();
    if (out.pregrasp.translation - yaw.apply(&g.pregrasp.translation)).norm() > 1e-7 {
        failures.push("transfer yaw equivariance".into());
    }

    let checked = "permutation invariance, geodesic metric, friction monotonicity, latent linearity, rigid equivariances";
    if failures.is_empty() {
        (true, format!("all hold ({checked}); full suites run in the per-module tests"))
    } else {
        (false, format!("violated: {}", failures.join(", ")))
    }
}

#[test]
fn primary_criteria() {
    let mut outcomes = vec![
        run("retargeting round-trip", retarget_round_trip),
        run("gradient oracle", gradient_oracle),
        run("force-closure equivalence", force_closure_equivalence),
        run("transfer exactness", transfer_exactness),
    ];

    // one desk-suite dataset feeds the refinement, determinism,
    // self-certification and policy criteria
    let cfg = PipelineConfig::default();
    let desc = cfg.hand_description().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let full = Instant::now();
    let generation = pipeline::generate_dataset(&cfg, &desc).unwrap();
    let gen_time = full.elapsed();

    outcomes.push(run("refinement rate by seed source", || {
        let cmp = pipeline::compare_refinement(&cfg, &desc, &generation).unwrap();
        let secs = full.elapsed().as_secs_f64();
        let gap = cmp.gap_pp().unwrap_or(f64::NEG_INFINITY);
        (
            gap >= 20.0 && secs < 600.0,
            format!(
                "correspondence {}/{} vs random {}/{}: gap {gap:.1} pp (need >= 20 pp), {secs:.1} s (limit 600 s)",
                cmp.correspondence.refined, cmp.correspondence.attempted, cmp.random.refined, cmp.random.attempted
            ),
        )
    }));

    let path_a = dir.path().join("a.jsonl");
    pipeline::write_dataset(&path_a, &generation.records).unwrap();
    outcomes.push(run("dataset determinism", || {
        let path_b = dir.path().join("b.jsonl");
        pipeline::write_dataset(&path_b, &pipeline::generate_dataset(&cfg, &desc).unwrap().records).unwrap();
        let (a, b) = (std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
        (a == b, format!("{} records, {} bytes, files {}", generation.records.len(), a.len(), if a == b { "identical" } else { "differ" }))
    }));

    outcomes.push(run("dataset self-certification", || {
        let records = pipeline::read_dataset(&path_a).unwrap();
        let ok = records.iter().filter(|r| pipeline::verify_record(&desc, r).unwrap().ok()).count();
        (ok == records.len() && !records.is_empty(), format!("{ok}/{} records re-verify (need 100%)", records.len()))
    }));

    outcomes.push(run("policy vs baselines", || {
        let stage = Instant::now();
        let trained = pipeline::train_policy(&cfg, &generation.records).unwrap();
        let table = pipeline::run_eval(&cfg, &desc, &trained.net).unwrap();
        println!("{}", pipeline::render_eval_table(&table));
        let rate = |m| table.rate(m).unwrap_or(f64::NAN);
        let (p, r, h) = (rate("policy"), rate("random"), rate("heuristic"));
        // generation plus training plus evaluation
        let secs = (gen_time + stage.elapsed()).as_secs_f64();
        (
            p > r && p > h && r < 0.15 && secs < 1800.0,
            format!("policy {p:.3} vs random {r:.3}, heuristic {h:.3} (need policy above both, random < 0.15), {secs:.0} s (limit 1800 s)"),
        )
    }));

    outcomes.push(run("invariant suites", invariant_suites));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!("{}/{} primary criteria pass", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
