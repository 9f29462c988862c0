mod common;

use common::*;
use isagrasp::geometry::{geodesic_distance, RigidTransform, UnitQuat, Vec3};
use isagrasp::policy::*;
use isagrasp::shape::{sample_instance, FieldParams, ShapeInstance, TemplateShape};
use isagrasp::stability::OracleConfig;
use isagrasp::transfer::Grasp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance() -> ShapeInstance {
    let t = TemplateShape::Cylinder { radius: 0.035, half_height: 0.05 };
    sample_instance(&t, 3, 0.008, &FieldParams::default(), 5, 2048).unwrap()
}

fn random_grasp(rng: &mut impl Rng) -> Grasp {
    let t = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.2));
    let q = UnitQuat::from_scaled_axis(random_unit(rng) * rng.gen_range(0.1..3.0));
    let fingers = std::array::from_fn(|_| rng.gen_range(0.0..1.5));
    Grasp::new(RigidTransform::new(t, q), fingers)
}

#[test]
fn aligned_vectors_give_unit_scalars() {
    let mut inst = instance();
    inst.normals.iter_mut().for_each(|n| *n = Vec3::z());
    let z = Vec3::z();
    let f = build_features(&inst, &z, &z, &z, 256, 1).unwrap();
    assert_eq!(f.count(), 256);
    for i in 0..f.count() {
        assert!(f.row(i)[3..].iter().all(|&v| v == 1.0));
    }
}

#[test]
fn facing_orthogonal_to_table_zeroes_last_scalar() {
    let inst = instance();
    let f = build_features(&inst, &Vec3::x(), &Vec3::y(), &Vec3::z(), 128, 2).unwrap();
    assert!((0..f.count()).all(|i| f.row(i)[6] == 0.0));
}

#[test]
fn scalars_match_recomputation() {
    let inst = instance();
    let facing = canonical_facing();
    let pointing = canonical_pointing();
    let table = table_normal();
    let f = build_features(&inst, &facing, &pointing, &table, NUM_POINTS, 7).unwrap();
    let mut mean = Vec3::zeros();
    for i in 0..f.count() {
        let r = f.row(i);
        let p = Vec3::new(r[0], r[1], r[2]) + f.center;
        mean += Vec3::new(r[0], r[1], r[2]);
        let k = (0..inst.points.len())
            .min_by(|&a, &b| (inst.points[a] - p).norm().total_cmp(&(inst.points[b] - p).norm()))
            .unwrap();
        assert!((inst.points[k] - p).norm() < 1e-12);
        let n = inst.normals[k];
        let want = [n.dot(&table), n.dot(&facing), n.dot(&pointing), facing.dot(&table)];
        for (a, b) in r[3..].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(a));
        }
    }
    assert!((mean / f.count() as f64).norm() < 1e-12);
}

#[test]
fn farthest_point_sampling_is_spread_and_seeded() {
    let inst = instance();
    let a = farthest_point_indices(&inst.points, 500, 3).unwrap();
    assert_eq!(a, farthest_point_indices(&inst.points, 500, 3).unwrap());
    let mut u = a.clone();
    u.sort_unstable();
    u.dedup();
    assert_eq!(u.len(), 500);
    // every point lies within the last selection radius of some chosen point
    let min_gap = |set: &[usize], p: &Vec3| set.iter().map(|&i| (inst.points[i] - p).norm()).fold(f64::INFINITY, f64::min);
    let last = min_gap(&a[..499], &inst.points[a[499]]);
    assert!(inst.points.iter().all(|p| min_gap(&a, p) <= last + 1e-12));
    assert!(farthest_point_indices(&inst.points, inst.points.len() + 1, 0).is_err());
}

#[test]
fn loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let label = random_grasp(&mut rng);
    let exact = PolicyOutput {
        translation: label.pregrasp.translation,
        rotation: label.pregrasp.rotation,
        fingers: label.fingers,
    };
    let l = loss(&exact, &label);
    assert_eq!((l.total, l.translation_l1, l.rotation_geodesic, l.finger_l1), (0.0, 0.0, 0.0, 0.0));
    let mut off = exact.clone();
    off.translation.x += 0.03;
    assert!((loss(&off, &label).total - 0.01).abs() < 1e-12);

    for _ in 0..20 {
        let a = random_grasp(&mut rng);
        let b = random_grasp(&mut rng);
        let out = PolicyOutput {
            translation: a.pregrasp.translation,
            rotation: a.pregrasp.rotation,
            fingers: a.fingers,
        };
        let l = loss(&out, &b);
        let t = (a.pregrasp.translation - b.pregrasp.translation).abs().sum() / 3.0;
        let r = geodesic_distance(&a.pregrasp.rotation.to_matrix(), &b.pregrasp.rotation.to_matrix()).unwrap();
        let f = a.fingers.iter().zip(&b.fingers).map(|(x, y)| (x - y).abs()).sum::<f64>() / 16.0;
        assert!((l.translation_l1 - t).abs() < 1e-12);
        assert!((l.rotation_geodesic - r).abs() < 1e-6);
        assert!((l.finger_l1 - f).abs() < 1e-12);
        assert!((l.total - (t + r + f)).abs() < 1e-6);
        assert!(l.total >= 0.0);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = max_gradient_error(seed);
        assert!(err < 1e-3, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn prediction_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = PolicyNet::new(NetShape::default(), 1).unwrap();
    let f = random_features(&mut rng, 300);
    let mut order: Vec<usize> = (0..300).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let permuted = PointFeatures {
        values: order.iter().flat_map(|&i| f.row(i).to_vec()).collect(),
        center: f.center,
    };
    assert_eq!(net.predict(&f).unwrap(), net.predict(&permuted).unwrap());
}

#[test]
fn zero_weight_net_outputs_biases() {
    let mut net = PolicyNet::zeros(NetShape::default()).unwrap();
    let slices = net.slices();
    let find = |name: &str| slices.iter().find(|(n, _)| n == name).unwrap().1.clone();
    let t = find("head.translation.1.bias");
    let r = find("head.rotation.1.bias");
    let g = find("head.fingers.1.bias");
    net.params[t].copy_from_slice(&[1.0, -2.0, 0.5]);
    net.params[r].copy_from_slice(&[0.0, 3.0, 0.0, 4.0]);
    for (k, i) in g.enumerate() {
        net.params[i] = 0.1 * k as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = random_features(&mut rng, 50);
    let out = net.predict(&f).unwrap();
    let want_t = f.center + Vec3::new(1.0, -2.0, 0.5) * TRANSLATION_UNIT;
    assert!((out.translation - want_t).norm() < 1e-15);
    assert!(out.rotation.same_rotation(&UnitQuat::new(0.0, 0.6, 0.0, 0.8).unwrap(), 1e-15));
    assert!(out.fingers.iter().enumerate().all(|(k, &v)| v == 0.1 * k as f64));
    let q = out.rotation.to_array();
    assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
}

fn one_record() -> TrainSample {
    let inst = instance();
    let features = build_features(&inst, &canonical_facing(), &canonical_pointing(), &table_normal(), NUM_POINTS, 3).unwrap();
    let mut fingers = [0.0; 16];
    for (k, f) in fingers.iter_mut().enumerate() {
        *f = if k % 4 == 0 { 0.05 } else { 0.6 + 0.02 * k as f64 };
    }
    let label = Grasp::new(
        RigidTransform::new(
            inst.center + Vec3::new(0.01, -0.02, 0.09),
            UnitQuat::from_axis_angle(Vec3::x(), std::f64::consts::PI).compose(&UnitQuat::from_axis_angle(Vec3::z(), 0.4)),
        ),
        fingers,
    );
    TrainSample { features, label }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = vec![one_record(); 3];
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.net, initial_net(&cfg).unwrap());
    assert_eq!(out.loss_curve.len(), 2);
}

#[test]
fn memorizes_a_single_record() {
    let rec = one_record();
    let data = vec![rec.clone(); 32];
    let cfg = TrainConfig {
        epochs: 200,
        augment: false,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    let last = *out.loss_curve.last().unwrap();
    let after = out.net.mean_loss(&[(rec.features.clone(), rec.label)]);
    assert!(after < 1e-3, "loss after training {after} (last epoch {last})");
    let pred = out.net.predict(&rec.features).unwrap();
    assert!((pred.translation - rec.label.pregrasp.translation).norm() < 5e-3);
}

#[test]
fn training_is_deterministic() {
    let data = vec![one_record(); 4];
    let cfg = TrainConfig {
        epochs: 3,
        batch: 3,
        ..TrainConfig::default()
    };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn divergence_names_a_parameter_slice() {
    let data = vec![one_record(); 2];
    let cfg = TrainConfig {
        learning_rate: 1e300,
        epochs: 5,
        ..TrainConfig::default()
    };
    let names: Vec<String> = initial_net(&cfg).unwrap().slices().into_iter().map(|s| s.0).collect();
    match train(&data, &cfg) {
        Err(isagrasp::Error::NonFinite { slice, .. }) => assert!(names.contains(&slice), "{slice}"),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.loss_curve)),
    }
}

#[test]
fn yaw_augmentation_moves_label_with_scene() {
    let inst = instance();
    let rec = one_record();
    let angle = 0.9;
    let yawed = yaw_sample(&rec, angle);
    // features of the physically rotated scene
    let c = rec.features.center;
    let yaw = UnitQuat::from_axis_angle(Vec3::z(), angle);
    let g = RigidTransform::new(c - yaw.rotate(&c), yaw);
    let moved = inst.transformed(&g);
    let direct = build_features(&moved, &yaw.rotate(&canonical_facing()), &yaw.rotate(&canonical_pointing()), &table_normal(), NUM_POINTS, 3).unwrap();
    assert!((direct.center - c).norm() < 1e-12);
    for (a, b) in direct.values.iter().zip(&yawed.features.values) {
        assert!((a - b).abs() < 1e-12);
    }
    let want = rec.label.transformed(&g);
    assert!((yawed.label.pregrasp.translation - want.pregrasp.translation).norm() < 1e-15);
    assert!(yawed.label.pregrasp.rotation.same_rotation(&want.pregrasp.rotation, 1e-15));
    // and back again
    let back = yaw_sample(&yawed, -angle);
    assert!((back.label.pregrasp.translation - rec.label.pregrasp.translation).norm() < 1e-12);
    assert!(back.label.pregrasp.rotation.same_rotation(&rec.label.pregrasp.rotation, 1e-12));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let net = PolicyNet::new(NetShape::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    net.save(&path).unwrap();
    let back = PolicyNet::load(&path).unwrap();
    assert_eq!(net, back);
    assert!(back.params.iter().zip(&net.params).all(|(a, b)| a.to_bits() == b.to_bits()));

    let bytes = net.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(PolicyNet::from_bytes(&bad), Err(isagrasp::Error::Checkpoint(_))));
    assert!(matches!(PolicyNet::from_bytes(&bytes[..bytes.len() - 3]), Err(isagrasp::Error::Checkpoint(_))));
    let mut nan = net.clone();
    let (name, range) = nan.slices()[3].clone();
    nan.params[range.start + 2] = f64::NAN;
    match PolicyNet::from_bytes(&nan.to_bytes()) {
        Err(isagrasp::Error::NonFinite { slice, index }) => assert_eq!((slice, index), (name, 2)),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn evaluation_rates() {
    let (hand, inst, grasp) = pinch_scene();
    let strong = OracleConfig { f_max: 50.0, ..OracleConfig::default() };
    let instances = vec![inst.clone(), inst];
    let ok = evaluate_grasps(&hand, &instances, &strong, 1, |_, _| Ok(grasp));
    assert_eq!((ok.successes, ok.trials, ok.rate), (10, 10, Some(1.0)));
    let always_fail = OracleConfig { k_palm: 1e9, ..OracleConfig::default() };
    let bad = evaluate_grasps(&hand, &instances, &always_fail, 1, |_, _| Ok(grasp));
    assert_eq!(bad.rate, Some(0.0));
    let net = PolicyNet::new(NetShape::default(), 0).unwrap();
    let r = evaluate(&net, &hand, &instances, &[Approach::default(); 2], &always_fail, 2);
    assert_eq!(r.rate, Some(0.0));
    assert_eq!(evaluate(&net, &hand, &[], &[], &strong, 0).rate, None);
}

