//! Point-set grasp policy.
//!
//! Each surface point carries its centred position and four alignment
//! scalars between the object normal, the table normal and the hand's
//! facing/pointing axes. A shared per-point MLP is max-pooled into a global
//! code that three heads map to translation, quaternion and finger joints.
//! The backward pass is written out by hand.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, UnitQuat, Vec3};
use crate::hand::{HandDescription, NUM_JOINTS};
use crate::seeding::{derive_seed, rng_for};
use crate::shape::ShapeInstance;
use crate::stability::{lift_success, OracleConfig, PhysicsParams};
use crate::transfer::Grasp;

pub const NUM_POINTS: usize = 1024;
pub const FEATURE_DIM: usize = 7;

/// Positions enter the network in decimetres and the translation head
/// predicts decimetres, so both sit near unit scale.
const POSITION_SCALE: f64 = 10.0;
/// Metres per unit of the translation head output.
pub const TRANSLATION_UNIT: f64 = 0.1;

const HEAD_NAMES: [&str; 3] = ["translation", "rotation", "fingers"];
const HEAD_OUTPUTS: [usize; 3] = [3, 4, NUM_JOINTS];

/// Largest `|q̂·q|` used when differentiating the geodesic term.
const DOT_CLAMP: f64 = 1.0 - 1e-6;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Samples per gradient chunk; chunks are reduced in a fixed order so the
/// result does not depend on the thread count.
const CHUNK: usize = 8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ISAGPOL\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Hand facing used when building features: palm toward the table.
pub fn canonical_facing() -> Vec3 {
    -Vec3::z()
}

pub fn canonical_pointing() -> Vec3 {
    Vec3::x()
}

pub fn table_normal() -> Vec3 {
    Vec3::z()
}

/// Requested hand directions the features are conditioned on: the palm
/// normal and the finger direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Approach {
    pub facing: Vec3,
    pub pointing: Vec3,
}

impl Default for Approach {
    fn default() -> Self {
        Approach {
            facing: canonical_facing(),
            pointing: canonical_pointing(),
        }
    }
}

impl Approach {
    /// Palm z and x axes of a hand orientation.
    pub fn of(rotation: &UnitQuat) -> Self {
        Approach {
            facing: rotation.rotate(&Vec3::z()),
            pointing: rotation.rotate(&Vec3::x()),
        }
    }

    pub fn features(&self, inst: &ShapeInstance, count: usize, seed: u64) -> Result<PointFeatures> {
        build_features(inst, &self.facing, &self.pointing, &table_normal(), count, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointFeatures {
    /// Row-major `count × 7`: position relative to `center`, then
    /// `N_o·N_t`, `N_o·N_f`, `N_o·N_p`, `N_f·N_t`.
    pub values: Vec<f64>,
    /// Mean of the selected points, world frame.
    pub center: Vec3,
}

impl PointFeatures {
    pub fn count(&self) -> usize {
        self.values.len() / FEATURE_DIM
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() % FEATURE_DIM != 0 {
            return Err(Error::InvalidInput(format!("feature array length {} is not a positive multiple of {FEATURE_DIM}", self.values.len())));
        }
        if !self.values.iter().all(|v| v.is_finite()) || !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(())
    }

    /// Rotates the position columns about the vertical axis.
    fn yawed(&self, angle: f64) -> PointFeatures {
        let (s, c) = angle.sin_cos();
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(FEATURE_DIM) {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
        }
        PointFeatures { values, center: self.center }
    }
}

fn check_unit(v: &Vec3, name: &str) -> Result<()> {
    if (v.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("{name} must be a unit vector, got norm {}", v.norm())));
    }
    Ok(())
}

/// Farthest-point subsample of the instance surface with a seeded start.
pub fn farthest_point_indices(points: &[Vec3], count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > points.len() {
        return Err(Error::InvalidInput(format!("cannot pick {count} of {} points", points.len())));
    }
    let mut rng = rng_for(seed, &[]);
    let mut chosen = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = rng.gen_range(0..points.len());
    for _ in 0..count {
        chosen.push(next);
        let p = points[next];
        let mut best = (0, -1.0);
        for (i, d) in dist.iter_mut().enumerate() {
            let e = (points[i] - p).norm_squared();
            if e < *d {
                *d = e;
            }
            if *d > best.1 {
                best = (i, *d);
            }
        }
        next = best.0;
    }
    Ok(chosen)
}

pub fn build_features(
    inst: &ShapeInstance,
    facing: &Vec3,
    pointing: &Vec3,
    table: &Vec3,
    count: usize,
    seed: u64,
) -> Result<PointFeatures> {
    check_unit(facing, "hand facing")?;
    check_unit(pointing, "hand pointing")?;
    check_unit(table, "table normal")?;
    let idx = farthest_point_indices(&inst.points, count, seed)?;
    let center = idx.iter().map(|&i| inst.points[i]).sum::<Vec3>() / count as f64;
    let ft = facing.dot(table);
    let mut values = Vec::with_capacity(count * FEATURE_DIM);
    for &i in &idx {
        let p = inst.points[i] - center;
        let n = inst.normals[i];
        values.extend_from_slice(&[p.x, p.y, p.z, n.dot(table), n.dot(facing), n.dot(pointing), ft]);
    }
    Ok(PointFeatures { values, center })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    /// Widths of the shared point MLP, starting with the feature dimension.
    pub point_widths: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            point_widths: vec![FEATURE_DIM, 64, 128, 256],
            head_hidden: 128,
        }
    }
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.point_widths.len() < 2 || self.point_widths[0] != FEATURE_DIM || self.point_widths.contains(&0) || self.head_hidden == 0 {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, w) in self.point_widths.windows(2).enumerate() {
            out.push((format!("point.{i}"), w[0], w[1]));
        }
        let pooled = *self.point_widths.last().expect("validated");
        for (name, k) in HEAD_NAMES.iter().zip(HEAD_OUTPUTS) {
            out.push((format!("head.{name}.0"), pooled, self.head_hidden));
            out.push((format!("head.{name}.1"), self.head_hidden, k));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    name: String,
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.inputs * self.outputs;
        b..b + self.outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    shape: NetShape,
    layers: Vec<Layer>,
    /// All weights and biases; layer `l` stores its row-major
    /// `inputs × outputs` weight followed by its bias.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub translation: Vec3,
    pub rotation: UnitQuat,
    pub fingers: [f64; NUM_JOINTS],
}

impl PolicyOutput {
    pub fn to_grasp(&self, desc: &HandDescription) -> Grasp {
        let mut fingers = self.fingers;
        desc.clamp_joints(&mut fingers);
        Grasp::new(RigidTransform::new(self.translation, self.rotation), fingers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub translation_l1: f64,
    pub rotation_geodesic: f64,
    pub finger_l1: f64,
}

/// Raw head outputs: translation in metres relative to the cloud centre,
/// unnormalized quaternion, finger angles.
struct HeadValues {
    translation: [f64; 3],
    quaternion: [f64; 4],
    fingers: [f64; NUM_JOINTS],
}

struct Label {
    translation: [f64; 3],
    quaternion: [f64; 4],
    fingers: [f64; NUM_JOINTS],
}

impl Label {
    fn relative(grasp: &Grasp, center: &Vec3) -> Label {
        let t = grasp.pregrasp.translation - center;
        Label {
            translation: [t.x, t.y, t.z],
            quaternion: grasp.pregrasp.rotation.to_array(),
            fingers: grasp.fingers,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss terms and their gradients with respect to the raw head values.
fn loss_and_grad(out: &HeadValues, label: &Label) -> (LossTerms, [f64; 3], [f64; 4], [f64; NUM_JOINTS]) {
    let mut dt = [0.0; 3];
    let mut lt = 0.0;
    for k in 0..3 {
        let e = out.translation[k] - label.translation[k];
        lt += e.abs() / 3.0;
        dt[k] = sign(e) / 3.0;
    }
    let mut df = [0.0; NUM_JOINTS];
    let mut lf = 0.0;
    for k in 0..NUM_JOINTS {
        let e = out.fingers[k] - label.fingers[k];
        lf += e.abs() / NUM_JOINTS as f64;
        df[k] = sign(e) / NUM_JOINTS as f64;
    }
    let r = out.quaternion;
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dr = [0.0; 4];
    let lr = if norm > 1e-12 {
        let qh = r.map(|v| v / norm);
        let d: f64 = qh.iter().zip(&label.quaternion).map(|(a, b)| a * b).sum();
        let c = d.abs().min(1.0);
        let dl_dc = -2.0 / (1.0 - c.min(DOT_CLAMP).powi(2)).sqrt();
        let s = sign(d);
        for k in 0..4 {
            dr[k] = dl_dc * s * (label.quaternion[k] - d * qh[k]) / norm;
        }
        2.0 * c.acos()
    } else {
        std::f64::consts::PI
    };
    let terms = LossTerms {
        total: lt + lr + lf,
        translation_l1: lt,
        rotation_geodesic: lr,
        finger_l1: lf,
    };
    (terms, dt, dr, df)
}

/// Translation L1 (mean over 3, m) + quaternion geodesic (rad) + finger L1
/// (mean over the joints, rad), both sides in the world frame.
pub fn loss(output: &PolicyOutput, label: &Grasp) -> LossTerms {
    let t = output.translation;
    let out = HeadValues {
        translation: [t.x, t.y, t.z],
        quaternion: output.rotation.to_array(),
        fingers: output.fingers,
    };
    loss_and_grad(&out, &Label::relative(label, &Vec3::zeros())).0
}

/// Strided read-only matrix view for `matrixmultiply`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows × b.cols`.
fn gemm(a: View, b: View, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    // SAFETY: the bounds above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Squareplus `(z + sqrt(z² + 4)) / 2`, a smooth ReLU-like activation;
/// smoothness keeps finite-difference checks meaningful where a ReLU kink
/// would sit inside the step, and it needs no `exp`.
fn act(z: f64) -> f64 {
    0.5 * (z + (z * z + 4.0).sqrt())
}

fn act_grad(z: f64) -> f64 {
    0.5 * (1.0 + z / (z * z + 4.0).sqrt())
}

/// Everything the backward pass needs from one forward pass.
struct Trace {
    /// Point-layer activations, `acts[0]` being the scaled input.
    acts: Vec<Vec<f64>>,
    /// Point-layer pre-activations, `pre[l]` feeding `acts[l + 1]`.
    pre: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    hidden: [Vec<f64>; 3],
    hidden_pre: [Vec<f64>; 3],
    head: HeadValues,
}

impl PolicyNet {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(shape)?;
        let mut rng = rng_for(seed, &[]);
        for l in &net.layers {
            let bound = if l.name.starts_with("point") || l.name.ends_with(".0") {
                (6.0 / l.inputs as f64).sqrt()
            } else {
                (6.0 / (l.inputs + l.outputs) as f64).sqrt()
            };
            for w in &mut net.params[l.weight_range()] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        // start the quaternion head at the identity rotation
        let rot = net.layer("head.rotation.1").expect("rotation head").bias_range();
        net.params[rot.start] = 1.0;
        Ok(net)
    }

    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let mut offset = 0;
        let layers: Vec<Layer> = shape
            .layer_dims()
            .into_iter()
            .map(|(name, inputs, outputs)| {
                let l = Layer { name, inputs, outputs, offset };
                offset += inputs * outputs + outputs;
                l
            })
            .collect();
        Ok(Self {
            shape,
            layers,
            params: vec![0.0; offset],
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Named parameter slices (`<layer>.weight`, `<layer>.bias`) in storage order.
    pub fn slices(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.name), l.weight_range()), (format!("{}.bias", l.name), l.bias_range())])
            .collect()
    }

    /// First slice holding a non-finite value, with the index inside it.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        first_non_finite_in(&self.slices(), &self.params)
    }

    fn num_point_layers(&self) -> usize {
        self.shape.point_widths.len() - 1
    }

    fn forward(&self, features: &PointFeatures) -> Trace {
        let p = features.count();
        let mut input = features.values.clone();
        for row in input.chunks_exact_mut(FEATURE_DIM) {
            row[..3].iter_mut().for_each(|v| *v *= POSITION_SCALE);
        }
        let mut acts = vec![input];
        let mut pre = Vec::new();
        for l in &self.layers[..self.num_point_layers()] {
            let bias = &self.params[l.bias_range()];
            let mut z: Vec<f64> = (0..p).flat_map(|_| bias.iter().copied()).collect();
            let h = acts.last().expect("input");
            gemm(View::new(h, p, l.inputs), View::new(&self.params[l.weight_range()], l.inputs, l.outputs), 1.0, &mut z);
            acts.push(z.iter().map(|&v| act(v)).collect());
            pre.push(z);
        }
        let width = *self.shape.point_widths.last().expect("validated");
        let last = acts.last().expect("layers");
        let mut argmax = vec![0usize; width];
        let mut pooled = last[..width].to_vec();
        for i in 1..p {
            let row = &last[i * width..(i + 1) * width];
            for j in 0..width {
                if row[j] > pooled[j] {
                    pooled[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let np = self.num_point_layers();
        let mut hidden: [Vec<f64>; 3] = Default::default();
        let mut hidden_pre: [Vec<f64>; 3] = Default::default();
        let mut outs: [Vec<f64>; 3] = Default::default();
        for h in 0..3 {
            let l0 = &self.layers[np + 2 * h];
            let l1 = &self.layers[np + 2 * h + 1];
            let mut a = self.params[l0.bias_range()].to_vec();
            gemm(View::new(&pooled, 1, l0.inputs), View::new(&self.params[l0.weight_range()], l0.inputs, l0.outputs), 1.0, &mut a);
            let act: Vec<f64> = a.iter().map(|&v| act(v)).collect();
            let mut o = self.params[l1.bias_range()].to_vec();
            gemm(View::new(&act, 1, l1.inputs), View::new(&self.params[l1.weight_range()], l1.inputs, l1.outputs), 1.0, &mut o);
            hidden[h] = act;
            hidden_pre[h] = a;
            outs[h] = o;
        }
        let head = HeadValues {
            translation: [0, 1, 2].map(|k| outs[0][k] * TRANSLATION_UNIT),
            quaternion: [0, 1, 2, 3].map(|k| outs[1][k]),
            fingers: std::array::from_fn(|k| outs[2][k]),
        };
        Trace {
            acts,
            pre,
            argmax,
            pooled,
            hidden,
            hidden_pre,
            head,
        }
    }

    /// Accumulates `scale · ∂loss/∂params` into `grad`; returns the loss.
    fn backward(&self, features: &PointFeatures, label: &Label, scale: f64, grad: &mut [f64]) -> LossTerms {
        let tr = self.forward(features);
        let (terms, dt, dr, df) = loss_and_grad(&tr.head, label);
        let np = self.num_point_layers();
        let width = tr.pooled.len();
        let mut dpooled = vec![0.0; width];
        let douts: [Vec<f64>; 3] = [
            dt.iter().map(|g| g * TRANSLATION_UNIT * scale).collect(),
            dr.iter().map(|g| g * scale).collect(),
            df.iter().map(|g| g * scale).collect(),
        ];
        for h in 0..3 {
            let l0 = &self.layers[np + 2 * h];
            let l1 = &self.layers[np + 2 * h + 1];
            let a = &tr.hidden[h];
            let dout = &douts[h];
            let mut gw = l1.weight_range();
            gemm(View::new(a, l1.inputs, 1), View::new(dout, 1, l1.outputs), 1.0, &mut grad[gw.clone()]);
            for (g, d) in grad[l1.bias_range()].iter_mut().zip(dout) {
                *g += d;
            }
            let mut da = vec![0.0; l1.inputs];
            gemm(View::new(dout, 1, l1.outputs), View::new(&self.params[l1.weight_range()], l1.inputs, l1.outputs).t(), 0.0, &mut da);
            for (d, z) in da.iter_mut().zip(&tr.hidden_pre[h]) {
                *d *= act_grad(*z);
            }
            gw = l0.weight_range();
            gemm(View::new(&tr.pooled, l0.inputs, 1), View::new(&da, 1, l0.outputs), 1.0, &mut grad[gw]);
            for (g, d) in grad[l0.bias_range()].iter_mut().zip(&da) {
                *g += d;
            }
            gemm(View::new(&da, 1, l0.outputs), View::new(&self.params[l0.weight_range()], l0.inputs, l0.outputs).t(), 1.0, &mut dpooled);
        }

        // only the rows that won a max-pool channel receive gradient
        let mut rows: Vec<usize> = tr.argmax.clone();
        rows.sort_unstable();
        rows.dedup();
        let slot = |i: usize| rows.binary_search(&i).expect("argmax row");
        let mut dh = vec![0.0; rows.len() * width];
        for (j, &i) in tr.argmax.iter().enumerate() {
            dh[slot(i) * width + j] += dpooled[j];
        }
        for li in (0..np).rev() {
            let l = &self.layers[li];
            let z = &tr.pre[li];
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..l.outputs {
                    dh[r * l.outputs + j] *= act_grad(z[i * l.outputs + j]);
                }
            }
            let prev: Vec<f64> = rows.iter().flat_map(|&i| tr.acts[li][i * l.inputs..(i + 1) * l.inputs].iter().copied()).collect();
            let gw = l.weight_range();
            gemm(View::new(&prev, rows.len(), l.inputs).t(), View::new(&dh, rows.len(), l.outputs), 1.0, &mut grad[gw]);
            let gb = l.bias_range();
            for r in 0..rows.len() {
                for (g, d) in grad[gb.clone()].iter_mut().zip(&dh[r * l.outputs..(r + 1) * l.outputs]) {
                    *g += d;
                }
            }
            if li > 0 {
                let mut dprev = vec![0.0; rows.len() * l.inputs];
                gemm(View::new(&dh, rows.len(), l.outputs), View::new(&self.params[l.weight_range()], l.inputs, l.outputs).t(), 0.0, &mut dprev);
                dh = dprev;
            }
        }
        terms
    }

    /// Mean loss and its gradient over `(features, label)` pairs.
    pub fn loss_and_gradient(&self, batch: &[(PointFeatures, Grasp)]) -> (f64, Vec<f64>) {
        let items: Vec<(&PointFeatures, Label)> = batch.iter().map(|(f, g)| (f, Label::relative(g, &f.center))).collect();
        self.batch_gradient(&items)
    }

    fn batch_gradient(&self, items: &[(&PointFeatures, Label)]) -> (f64, Vec<f64>) {
        let scale = 1.0 / items.len() as f64;
        let parts: Vec<(f64, Vec<f64>)> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; self.params.len()];
                let mut total = 0.0;
                for (f, label) in chunk {
                    total += self.backward(f, label, scale, &mut g).total;
                }
                (total, g)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (l, g) in parts {
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        (total * scale, grad)
    }

    /// Mean loss over `(features, label)` pairs without gradients.
    pub fn mean_loss(&self, batch: &[(PointFeatures, Grasp)]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|(f, g)| loss_and_grad(&self.forward(f).head, &Label::relative(g, &f.center)).0.total)
            .sum();
        total / batch.len() as f64
    }

    pub fn predict(&self, features: &PointFeatures) -> Result<PolicyOutput> {
        features.validate()?;
        let head = self.forward(features).head;
        let [w, x, y, z] = head.quaternion;
        let t = head.translation;
        Ok(PolicyOutput {
            translation: features.center + Vec3::new(t[0], t[1], t[2]),
            rotation: UnitQuat::new(w, x, y, z)?,
            fingers: head.fingers,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.layers.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = u32_at(take(4)?) as usize;
        if n_layers < 7 {
            return Err(Error::Checkpoint(format!("{n_layers} layers is too few")));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = u32_at(take(4)?) as usize;
            let o = u32_at(take(4)?) as usize;
            dims.push((i, o));
        }
        let np = n_layers - 6;
        let mut widths: Vec<usize> = vec![dims[0].0];
        widths.extend(dims[..np].iter().map(|d| d.1));
        let shape = NetShape {
            point_widths: widths,
            head_hidden: dims[np].1,
        };
        let mut net = PolicyNet::zeros(shape).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected: Vec<(usize, usize)> = net.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        if expected != dims {
            return Err(Error::Checkpoint(format!("inconsistent layer shapes {dims:?}")));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        if count != net.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, header says {count}", net.params.len())));
        }
        let data = take(8 * count)?;
        for (p, b) in net.params.iter_mut().zip(data.chunks_exact(8)) {
            *p = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        if !cur.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cur.len())));
        }
        if let Some((slice, index)) = net.first_non_finite() {
            return Err(Error::NonFinite { slice, index });
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn first_non_finite_in(slices: &[(String, std::ops::Range<usize>)], values: &[f64]) -> Option<(String, usize)> {
    slices.iter().find_map(|(name, r)| values[r.clone()].iter().position(|v| !v.is_finite()).map(|i| (name.clone(), i)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    /// Random rotation about the table normal applied to each sample.
    pub augment: bool,
    pub net: NetShape,
    /// Set programmatically; the pipeline derives it from its master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            learning_rate: 2e-4,
            schedule: LrSchedule::Cosine,
            epochs: 300,
            augment: true,
            net: NetShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch == 0 || !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid training configuration: batch {} lr {}", self.batch, self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub features: PointFeatures,
    /// World-frame grasp label.
    pub label: Grasp,
}

pub struct TrainOutcome {
    pub net: PolicyNet,
    /// Mean training loss per epoch, measured before each update.
    pub loss_curve: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// The sample seen after rotating the scene by `angle` about the vertical
/// axis through the cloud centre: positions and the label turn together.
pub fn yaw_sample(sample: &TrainSample, angle: f64) -> TrainSample {
    let c = sample.features.center;
    let yaw = UnitQuat::from_axis_angle(Vec3::z(), angle);
    let g = RigidTransform::new(c - yaw.rotate(&c), yaw);
    TrainSample {
        features: sample.features.yawed(angle),
        label: sample.label.transformed(&g),
    }
}

/// The untrained network `train` starts from.
pub fn initial_net(cfg: &TrainConfig) -> Result<PolicyNet> {
    PolicyNet::new(cfg.net.clone(), derive_seed(cfg.seed, &[0]))
}

pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    for s in samples {
        s.features.validate()?;
    }
    let mut net = initial_net(cfg)?;
    let mut adam = Adam::new(net.num_params());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total_steps = cfg.epochs * samples.len().div_ceil(cfg.batch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        let angles: Vec<f64> = order
            .iter()
            .map(|_| if cfg.augment { rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI) } else { 0.0 })
            .collect();
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<TrainSample> = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let a = angles[b * cfg.batch + k];
                    if a == 0.0 {
                        samples[i].clone()
                    } else {
                        yaw_sample(&samples[i], a)
                    }
                })
                .collect();
            let items: Vec<(&PointFeatures, Label)> = batch.iter().map(|s| (&s.features, Label::relative(&s.label, &s.features.center))).collect();
            let (batch_loss, grad) = net.batch_gradient(&items);
            if !batch_loss.is_finite() {
                let (slice, index) = net
                    .first_non_finite()
                    .or_else(|| first_non_finite_in(&net.slices(), &grad))
                    .unwrap_or_else(|| ("loss".into(), 0));
                return Err(Error::NonFinite { slice, index });
            }
            epoch_loss += batch_loss * idx.len() as f64;
            adam.step(&mut net.params, &grad, cfg.schedule.rate(cfg.learning_rate, step, total_steps));
            step += 1;
            if let Some((slice, index)) = net.first_non_finite() {
                return Err(Error::NonFinite { slice, index });
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(TrainOutcome { net, loss_curve: curve })
}

/// The five evaluation (mass kg, friction) conditions.
pub const EVAL_CONDITIONS: [(f64, f64); 5] = [(0.05, 0.8), (0.1, 0.85), (0.15, 0.9), (0.2, 0.95), (0.25, 1.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub successes: usize,
    pub trials: usize,
    /// `None` when there were no trials.
    pub rate: Option<f64>,
}

/// Runs one grasp per instance through every evaluation condition. A
/// grasp that cannot be produced or placed counts as a failure.
pub fn evaluate_grasps<F>(desc: &HandDescription, instances: &[ShapeInstance], oracle: &OracleConfig, seed: u64, grasp_for: F) -> EvalReport
where
    F: Fn(usize, &ShapeInstance) -> Result<Grasp> + Sync,
{
    let successes: usize = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let Ok(grasp) = grasp_for(i, inst) else { return 0 };
            EVAL_CONDITIONS
                .iter()
                .enumerate()
                .filter(|(c, (m, mu))| {
                    let s = derive_seed(seed, &[i as u64, *c as u64]);
                    lift_success(desc, inst, &grasp, &PhysicsParams::new(*m, *mu), oracle, s).map(|v| v.success).unwrap_or(false)
                })
                .count()
        })
        .sum();
    let trials = instances.len() * EVAL_CONDITIONS.len();
    EvalReport {
        successes,
        trials,
        rate: (trials > 0).then(|| successes as f64 / trials as f64),
    }
}

/// Feature seed used for instance `i` during evaluation.
pub fn eval_feature_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[u64::MAX, i as u64])
}

/// Predicts a grasp for each instance under its requested approach and
/// lifts it under every evaluation condition.
pub fn evaluate(net: &PolicyNet, desc: &HandDescription, instances: &[ShapeInstance], approaches: &[Approach], oracle: &OracleConfig, seed: u64) -> EvalReport {
    assert_eq!(instances.len(), approaches.len(), "one approach per instance");
    evaluate_grasps(desc, instances, oracle, seed, |i, inst| {
        let f = approaches[i].features(inst, NUM_POINTS.min(inst.points.len()), eval_feature_seed(seed, i))?;
        Ok(net.predict(&f)?.to_grasp(desc))
    })
}
