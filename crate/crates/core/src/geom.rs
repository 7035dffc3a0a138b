//! Oriented 3-d boxes, point clouds, coordinate transforms and rotated IoU.
//!
//! All geometry runs at f64. Point features ride along as f32 rows, since
//! they feed the training paths.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RandomState;

/// Wrap an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut w = a - tau * (a / tau).round();
    if w <= -std::f64::consts::PI {
        w += tau;
    }
    if w > std::f64::consts::PI {
        w -= tau;
    }
    w
}

/// A 7-DoF oriented box: center, per-axis extents, yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Extents along the box-frame x, y, z axes, all strictly positive.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "box size must be strictly positive, got {size:?}"
            )));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// World point into the box's canonical frame (translate, then rotate
    /// by -yaw).
    pub fn to_canonical(&self, p: [f64; 3]) -> [f64; 3] {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = (-self.yaw).sin_cos();
        [c * dx - s * dy, s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Canonical-frame point back into the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.center[0],
            s * p[0] + c * p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }

    /// Closed-interval containment with each extent scaled by `1 + extend`.
    pub fn contains(&self, p: [f64; 3], extend_ratio: f64) -> bool {
        let q = self.to_canonical(p);
        let f = 1.0 + extend_ratio;
        q[0].abs() <= self.size[0] * f / 2.0
            && q[1].abs() <= self.size[1] * f / 2.0
            && q[2].abs() <= self.size[2] * f / 2.0
    }

    /// Corners of the yawed footprint rectangle, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let rot = |x: f64, y: f64| {
            [
                c * x - s * y + self.center[0],
                s * x + c * y + self.center[1],
            ]
        };
        [rot(hx, hy), rot(-hx, hy), rot(-hx, -hy), rot(hx, -hy)]
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (
            self.center[2] - self.size[2] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        )
    }
}

/// Ordered set of 3-d points with optional per-point feature rows.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    features: Option<FeatureBlock>,
}

/// Row-major n×c feature storage aligned with the owning cloud's points.
#[derive(Debug, Clone)]
pub struct FeatureBlock {
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            features: None,
        }
    }

    pub fn with_features(points: Vec<[f64; 3]>, cols: usize, data: Vec<f32>) -> Result<Self> {
        if points.len() * cols != data.len() {
            return Err(Error::InvalidArgument(format!(
                "feature rows ({}) do not match point count ({})",
                if cols == 0 { 0 } else { data.len() / cols },
                points.len()
            )));
        }
        Ok(PointCloud {
            points,
            features: Some(FeatureBlock { cols, data }),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn features(&self) -> Option<&FeatureBlock> {
        self.features.as_ref()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let features = self.features.as_ref().map(|f| {
            let mut data = Vec::with_capacity(indices.len() * f.cols);
            for &i in indices {
                data.extend_from_slice(&f.data[i * f.cols..(i + 1) * f.cols]);
            }
            FeatureBlock { cols: f.cols, data }
        });
        PointCloud { points, features }
    }

    /// Every point mapped into `frame`'s canonical coordinates.
    pub fn to_canonical(&self, frame: &Box3D) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| frame.to_canonical(p)).collect(),
            features: self.features.clone(),
        }
    }
}

/// Points inside `box_`, each size component scaled by `1 + extend_ratio`.
/// Face points count as inside. May return an empty cloud.
pub fn crop_to_box(cloud: &PointCloud, box_: &Box3D, extend_ratio: f64) -> PointCloud {
    let indices: Vec<usize> = (0..cloud.len())
        .filter(|&i| box_.contains(cloud.points[i], extend_ratio))
        .collect();
    cloud.select(&indices)
}

/// Crop with each size component increased by `2 · margin_m` (the template
/// box enlarged in all directions).
pub fn make_search_region(cloud: &PointCloud, prev_box: &Box3D, margin_m: f64) -> PointCloud {
    let grown = Box3D {
        center: prev_box.center,
        size: [
            prev_box.size[0] + 2.0 * margin_m,
            prev_box.size[1] + 2.0 * margin_m,
            prev_box.size[2] + 2.0 * margin_m,
        ],
        yaw: prev_box.yaw,
    };
    crop_to_box(cloud, &grown, 0.0)
}

/// Per-axis uniform center perturbation in [-range_m, +range_m]; size and
/// yaw unchanged.
pub fn distort_box(box_: &Box3D, rng: &mut RandomState, range_m: f64) -> Box3D {
    let mut b = *box_;
    if range_m > 0.0 {
        for axis in &mut b.center {
            *axis += rng.random_range(-range_m..=range_m);
        }
    }
    b
}

/// Translate the center, advance the yaw, keep the size.
pub fn apply_offsets(box_: &Box3D, offsets: (f64, f64, f64, f64)) -> Box3D {
    Box3D {
        center: [
            box_.center[0] + offsets.0,
            box_.center[1] + offsets.1,
            box_.center[2] + offsets.2,
        ],
        size: box_.size,
        yaw: wrap_angle(box_.yaw + offsets.3),
    }
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let dz = a.center[2] - b.center[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Sutherland–Hodgman: clip `subject` against a convex counter-clockwise
/// polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| {
            let d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let t = d1 / (d1 - d2);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let cur = input[k];
            let next = input[(k + 1) % input.len()];
            match (inside(cur), inside(next)) {
                (true, true) => output.push(next),
                (true, false) => output.push(intersect(cur, next)),
                (false, true) => {
                    output.push(intersect(cur, next));
                    output.push(next);
                }
                (false, false) => {}
            }
        }
    }
    output
}

/// Exact rotated-box IoU: polygon-clipped footprint overlap times z-extent
/// overlap, over the union volume.
pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (az0, az1) = a.z_interval();
    let (bz0, bz1) = b.z_interval();
    let z_overlap = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    if z_overlap == 0.0 {
        return 0.0;
    }
    let inter_area = polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()));
    let inter = inter_area * z_overlap;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
