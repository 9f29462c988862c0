//! Uniform grid for nearest-sample queries.

use crate::geometry::Vec3;

const TARGET_PER_CELL: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct SpatialGrid {
    min: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `items`, one per cell plus a sentinel.
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(points: &[Vec3]) -> Self {
        if points.is_empty() {
            return Self {
                min: Vec3::zeros(),
                cell: 1.0,
                dims: [1, 1, 1],
                offsets: vec![0, 0],
                items: Vec::new(),
            };
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let ext = (max - min).map(|v| v.max(1e-9));
        // points lie on a surface: size cells from the box surface area
        let area = 2.0 * (ext.x * ext.y + ext.y * ext.z + ext.z * ext.x);
        let cell = (TARGET_PER_CELL * area / points.len() as f64)
            .sqrt()
            .max(ext.max() / 255.0)
            .max(1e-6);
        let dims = [0, 1, 2].map(|i| (ext[i] / cell).floor() as usize + 1);
        let ncells = dims[0] * dims[1] * dims[2];
        let index_of = |p: &Vec3| -> usize {
            let c = [0, 1, 2].map(|i| (((p[i] - min[i]) / cell).floor() as usize).min(dims[i] - 1));
            (c[0] * dims[1] + c[1]) * dims[2] + c[2]
        };
        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            counts[index_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut items = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = index_of(p);
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            min,
            cell,
            dims,
            offsets,
            items,
        }
    }

    pub fn nearest(&self, points: &[Vec3], p: &Vec3) -> Option<(usize, f64)> {
        self.search(points, p, usize::MAX)
    }

    pub fn nearest_excluding(&self, points: &[Vec3], p: &Vec3, skip: usize) -> Option<(usize, f64)> {
        self.search(points, p, skip)
    }

    fn search(&self, points: &[Vec3], p: &Vec3, skip: usize) -> Option<(usize, f64)> {
        if self.items.is_empty() {
            return None;
        }
        // Virtual (unclamped) cell of the query.
        let q = [0, 1, 2].map(|i| ((p[i] - self.min[i]) / self.cell).floor() as i64);
        let hi = self.dims.map(|d| d as i64 - 1);
        // first ring that touches the grid
        let r0 = (0..3)
            .map(|i| if q[i] < 0 { -q[i] } else if q[i] > hi[i] { q[i] - hi[i] } else { 0 })
            .max()
            .unwrap_or(0);
        let rmax = r0 + self.dims.iter().copied().max().unwrap_or(1) as i64 + 1;
        let mut best: Option<(usize, f64)> = None;
        for r in r0..=rmax {
            if let Some((_, d)) = best {
                // every cell at ring r is at least (r - 1) cells away
                if d <= (r - 1) as f64 * self.cell {
                    break;
                }
            }
            let lo_c = [0, 1, 2].map(|i| (q[i] - r).max(0));
            let hi_c = [0, 1, 2].map(|i| (q[i] + r).min(hi[i]));
            for x in lo_c[0]..=hi_c[0] {
                for y in lo_c[1]..=hi_c[1] {
                    for z in lo_c[2]..=hi_c[2] {
                        let cheb = (x - q[0]).abs().max((y - q[1]).abs()).max((z - q[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let c = ((x as usize) * self.dims[1] + y as usize) * self.dims[2] + z as usize;
                        for &i in &self.items[self.offsets[c]..self.offsets[c + 1]] {
                            if i == skip {
                                continue;
                            }
                            let d = (points[i] - p).norm();
                            // ties go to the lower index
                            match best {
                                Some((bi, bd)) if bd < d || (bd == d && bi < i) => {}
                                _ => best = Some((i, d)),
                            }
                        }
                    }
                }
            }
        }
        best
    }
}
