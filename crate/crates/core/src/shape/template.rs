//! Closed-form signed distance functions for the template shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Template shapes, centred at the origin with their symmetry axis on z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateShape {
    Sphere { radius: f64 },
    Capsule { radius: f64, half_length: f64 },
    Cylinder { radius: f64, half_height: f64 },
    RoundedBox { half_extents: [f64; 3], radius: f64 },
    /// `((|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1)) = 1`
    Superellipsoid { radii: [f64; 3], e1: f64, e2: f64 },
}

impl TemplateShape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TemplateShape::Sphere { .. } => "sphere",
            TemplateShape::Capsule { .. } => "capsule",
            TemplateShape::Cylinder { .. } => "cylinder",
            TemplateShape::RoundedBox { .. } => "rounded_box",
            TemplateShape::Superellipsoid { .. } => "superellipsoid",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self {
            TemplateShape::Sphere { radius } => positive(*radius),
            TemplateShape::Capsule { radius, half_length } => positive(*radius) && positive(*half_length),
            TemplateShape::Cylinder { radius, half_height } => positive(*radius) && positive(*half_height),
            TemplateShape::RoundedBox { half_extents, radius } => {
                half_extents.iter().all(|h| positive(*h))
                    && radius.is_finite()
                    && *radius >= 0.0
                    && half_extents.iter().all(|h| *radius < *h)
            }
            TemplateShape::Superellipsoid { radii, e1, e2 } => {
                radii.iter().all(|r| positive(*r)) && (0.1..=1.0).contains(e1) && (0.1..=1.0).contains(e2)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid template parameters: {self:?}")))
        }
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> Vec3 {
        match self {
            TemplateShape::Sphere { radius } => Vec3::repeat(*radius),
            TemplateShape::Capsule { radius, half_length } => Vec3::new(*radius, *radius, radius + half_length),
            TemplateShape::Cylinder { radius, half_height } => Vec3::new(*radius, *radius, *half_height),
            TemplateShape::RoundedBox { half_extents, .. } => Vec3::from(*half_extents),
            TemplateShape::Superellipsoid { radii, .. } => Vec3::from(*radii),
        }
    }

    pub fn bbox_diagonal(&self) -> f64 {
        2.0 * self.half_extents().norm()
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            TemplateShape::Sphere { radius } => p.norm() - radius,
            TemplateShape::Capsule { radius, half_length } => {
                let axis = Vec3::new(0.0, 0.0, p.z.clamp(-half_length, *half_length));
                (p - axis).norm() - radius
            }
            TemplateShape::Cylinder { radius, half_height } => {
                let dx = p.xy().norm() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dx.max(dz).min(0.0)
            }
            TemplateShape::RoundedBox { half_extents, radius } => {
                let q = p.abs() - (Vec3::from(*half_extents) - Vec3::repeat(*radius));
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0) - radius
            }
            TemplateShape::Superellipsoid { radii, e1, e2 } => superellipsoid_distance(p, radii, *e1, *e2).0,
        }
    }

    /// Unit outward normal from a central-difference gradient.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let g = self.gradient(p);
        let n = g.norm();
        if n > 1e-12 {
            g / n
        } else {
            Vec3::z()
        }
    }

    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        self.sdf_and_gradient(p).1
    }

    pub fn sdf_and_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        if let TemplateShape::Superellipsoid { radii, e1, e2 } = self {
            // distance gradient points from the foot to p
            let (d, foot) = superellipsoid_distance(p, radii, *e1, *e2);
            let v = p - foot;
            let n = v.norm();
            if n > 1e-9 {
                return (d, v / n * d.signum());
            }
            return (d, superellipsoid_implicit_gradient(p, radii, *e1, *e2).normalize());
        }
        (self.sdf(p), self.fd_gradient(p))
    }

    fn fd_gradient(&self, p: &Vec3) -> Vec3 {
        const H: f64 = 1e-6;
        Vec3::from_fn(|i, _| {
            let mut a = *p;
            let mut b = *p;
            a[i] += H;
            b[i] -= H;
            (self.sdf(&a) - self.sdf(&b)) / (2.0 * H)
        })
    }

    /// Cheap lower bound on `|sdf(p)|`; exact for all but the superellipsoid.
    pub fn distance_lower_bound(&self, p: &Vec3) -> f64 {
        match self {
            TemplateShape::Superellipsoid { radii, e1, e2 } => {
                // the gauge of a convex body holding a ball of radius rmin is
                // (1/rmin)-Lipschitz and equals 1 on the surface
                let rmin = radii.iter().cloned().fold(f64::INFINITY, f64::min);
                let gauge = superellipsoid_implicit(p, radii, *e1, *e2).powf(e1 / 2.0);
                rmin * (gauge - 1.0).abs()
            }
            _ => self.sdf(p).abs(),
        }
    }

    pub fn is_inside(&self, p: &Vec3) -> bool {
        match self {
            TemplateShape::Superellipsoid { radii, e1, e2 } => superellipsoid_implicit(p, radii, *e1, *e2) < 1.0,
            _ => self.sdf(p) < 0.0,
        }
    }

    /// First surface crossing from the origin along `dir`.
    pub fn ray_surface(&self, dir: &Vec3) -> Vec3 {
        let d = dir.normalize();
        let mut lo = 0.0;
        let mut hi = self.bbox_diagonal();
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.is_inside(&(d * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        d * (0.5 * (lo + hi))
    }
}

fn superellipsoid_implicit(p: &Vec3, r: &[f64; 3], e1: f64, e2: f64) -> f64 {
    let xy = (p.x / r[0]).abs().powf(2.0 / e2) + (p.y / r[1]).abs().powf(2.0 / e2);
    xy.powf(e2 / e1) + (p.z / r[2]).abs().powf(2.0 / e1)
}

fn superellipsoid_implicit_gradient(p: &Vec3, r: &[f64; 3], e1: f64, e2: f64) -> Vec3 {
    let u = [p.x / r[0], p.y / r[1], p.z / r[2]];
    let a = u[0].abs().powf(2.0 / e2) + u[1].abs().powf(2.0 / e2);
    let mut g = Vec3::zeros();
    if a > 0.0 {
        let outer = (2.0 / e1) * a.powf(e2 / e1 - 1.0);
        for i in 0..2 {
            g[i] = outer * u[i].abs().powf(2.0 / e2 - 1.0) * u[i].signum() / r[i];
        }
    }
    g.z = (2.0 / e1) * u[2].abs().powf(2.0 / e1 - 1.0) * u[2].signum() / r[2];
    g
}

fn radial_project(p: &Vec3, r: &[f64; 3], e1: f64, e2: f64) -> Vec3 {
    let f = superellipsoid_implicit(p, r, e1, e2);
    p * f.powf(-e1 / 2.0)
}

/// Signed distance and foot point by damped tangent-plane projection.
///
/// Each start is the radial projection of a seed point; the iteration
/// alternates a step toward the foot of `p` on the local tangent plane with
/// a radial re-projection, accepting only steps that get closer. Outside
/// the (convex) body one start suffices; inside, the seeds are `p` and `p`
/// pushed onto each bounding face, and the closest foot wins.
fn superellipsoid_distance(p: &Vec3, r: &[f64; 3], e1: f64, e2: f64) -> (f64, Vec3) {
    let rmin = r.iter().cloned().fold(f64::INFINITY, f64::min);
    if p.norm() < 1e-12 * rmin {
        return (-rmin, Vec3::new(0.0, 0.0, r[2]) * (rmin / r[2]));
    }
    let inside = superellipsoid_implicit(p, r, e1, e2) < 1.0;
    let starts = if inside { 4 } else { 1 };
    let mut best = (f64::INFINITY, *p);
    for k in 0..starts {
        let mut seed = *p;
        if k > 0 {
            let i = k - 1;
            seed[i] = if p[i] < 0.0 { -r[i] } else { r[i] };
        }
        if seed.norm() < 1e-12 * rmin {
            continue;
        }
        let foot = superellipsoid_foot(p, &seed, r, e1, e2, rmin);
        let d = (p - foot).norm();
        if d < best.0 {
            best = (d, foot);
        }
    }
    if inside {
        (-best.0, best.1)
    } else {
        best
    }
}

fn superellipsoid_foot(p: &Vec3, seed: &Vec3, r: &[f64; 3], e1: f64, e2: f64, rmin: f64) -> Vec3 {
    let mut x = radial_project(seed, r, e1, e2);
    let mut dist = (p - x).norm();
    let mut step = 0.5;
    for _ in 0..200 {
        let g = superellipsoid_implicit_gradient(&x, r, e1, e2);
        let gn = g.norm();
        if !(gn > 0.0) || !gn.is_finite() {
            break;
        }
        let n = g / gn;
        let d = p - x;
        let tangential = d - n * d.dot(&n);
        if tangential.norm() < 1e-10 * rmin {
            break;
        }
        let next = x + tangential * step;
        if next.norm() < 1e-12 {
            break;
        }
        let cand = radial_project(&next, r, e1, e2);
        let cd = (p - cand).norm();
        if cd < dist {
            x = cand;
            dist = cd;
            step = (step * 1.5).min(1.0);
        } else {
            step *= 0.5;
            if step < 1e-6 {
                break;
            }
        }
    }
    x
}
