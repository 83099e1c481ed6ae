//! Oriented 3D boxes and their exact intersection-over-union.
//!
//! The general path clips one box (as a convex polytope) against the six
//! face half-spaces of the other and measures the remaining volume with
//! signed tetrahedra. Boxes rotated only about the z axis can instead use a
//! ground-plane polygon intersection times a vertical interval overlap.
//! A seeded Monte-Carlo estimator is provided as an independent check.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Point3D;
use crate::rotation::RotationMatrix;

/// On-plane classification tolerance for clipping, in meters.
pub const CLIP_TOL: f64 = 1e-9;
/// Tolerance on the off-axis rotation entries accepted by the BEV path.
pub const YAW_ONLY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box dimensions must be positive and finite, got {0:?}")]
    InvalidDims([f64; 3]),
    #[error("box center must be finite")]
    NonFiniteCenter,
    #[error("rotation is not yaw-only about the z axis")]
    NotYawOnly,
}

/// Box with dimensions `(L, W, H)` along its local `(x, y, z)` axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub center: Point3D,
    pub dims: [f64; 3],
    pub rot: RotationMatrix,
}

impl OrientedBox3D {
    pub fn new(center: Point3D, dims: [f64; 3], rot: RotationMatrix) -> Result<Self, BoxError> {
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(BoxError::InvalidDims(dims));
        }
        if ![center.x, center.y, center.z].iter().all(|v| v.is_finite()) {
            return Err(BoxError::NonFiniteCenter);
        }
        Ok(Self { center, dims, rot })
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.dims[0], self.dims[1], self.dims[2]) / 2.0
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self {
            center: Point3D::from_vector(&(self.center.to_vector() + t)),
            ..*self
        }
    }

    /// Applies `p -> R p + t` to the whole box.
    pub fn transformed(&self, r: &RotationMatrix, t: &Vector3<f64>) -> Self {
        Self {
            center: Point3D::from_vector(&(r.matrix() * self.center.to_vector() + t)),
            dims: self.dims,
            rot: r.compose(&self.rot),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rot.matrix().transpose() * (p - self.center.to_vector());
        let h = self.half_extents();
        local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z
    }

    /// Outward half-spaces `n · p <= offset`, one per face.
    fn half_spaces(&self) -> [(Vector3<f64>, f64); 6] {
        let c = self.center.to_vector();
        let h = self.half_extents();
        let m = self.rot.matrix();
        let mut out = [(Vector3::zeros(), 0.0); 6];
        for k in 0..3 {
            let axis: Vector3<f64> = m.column(k).into_owned();
            out[2 * k] = (axis, axis.dot(&c) + h[k]);
            out[2 * k + 1] = (-axis, -axis.dot(&c) + h[k]);
        }
        out
    }
}

/// Corner sign pattern: bottom face (local z-) counter-clockwise from
/// `(-,-)`, then the top face in the same order.
const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Face cycles over [`CORNER_SIGNS`], counter-clockwise seen from outside.
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

/// The eight corners `center + R · (±L/2, ±W/2, ±H/2)` in [`CORNER_SIGNS`] order.
pub fn corners(b: &OrientedBox3D) -> [Point3D; 8] {
    let c = b.center.to_vector();
    let h = b.half_extents();
    let m = b.rot.matrix();
    CORNER_SIGNS.map(|s| {
        let local = Vector3::new(s[0] * h.x, s[1] * h.y, s[2] * h.z);
        Point3D::from_vector(&(c + m * local))
    })
}

/// Convex polyhedron as shared vertices plus outward-oriented face cycles.
#[derive(Debug, Clone, Default)]
pub struct ConvexPolytope {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<Vec<usize>>,
}

impl ConvexPolytope {
    pub fn from_box(b: &OrientedBox3D) -> Self {
        Self {
            vertices: corners(b).iter().map(|p| p.to_vector()).collect(),
            faces: BOX_FACES.iter().map(|f| f.to_vec()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Volume by signed tetrahedra from the vertex centroid.
    pub fn volume(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        let used = self.used_vertices();
        let centroid = used.iter().map(|&i| self.vertices[i]).sum::<Vector3<f64>>() / used.len() as f64;
        let mut six_vol = 0.0;
        for face in &self.faces {
            let p0 = self.vertices[face[0]] - centroid;
            for w in face[1..].windows(2) {
                let p1 = self.vertices[w[0]] - centroid;
                let p2 = self.vertices[w[1]] - centroid;
                six_vol += p0.dot(&p1.cross(&p2));
            }
        }
        (six_vol / 6.0).max(0.0)
    }

    fn used_vertices(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.faces.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// Keeps the part of the polytope with `normal · p <= offset`.
    pub fn clip(&self, normal: &Vector3<f64>, offset: f64) -> ConvexPolytope {
        if self.is_empty() {
            return self.clone();
        }
        let dist: Vec<f64> = self
            .vertices
            .iter()
            .map(|v| normal.dot(v) - offset)
            .collect();
        let used = self.used_vertices();
        let any_out = used.iter().any(|&i| dist[i] > CLIP_TOL);
        let any_in = used.iter().any(|&i| dist[i] < -CLIP_TOL);
        if !any_out {
            return self.clone();
        }
        if !any_in {
            return ConvexPolytope::default();
        }

        let mut vertices = Vec::new();
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut edge_points: HashMap<(usize, usize), usize> = HashMap::new();
        let mut cap: Vec<usize> = Vec::new();
        let mut faces = Vec::with_capacity(self.faces.len() + 1);

        for face in &self.faces {
            let mut out_face = Vec::with_capacity(face.len() + 1);
            for (k, &i) in face.iter().enumerate() {
                let j = face[(k + 1) % face.len()];
                if dist[i] <= CLIP_TOL {
                    let idx = *remap.entry(i).or_insert_with(|| {
                        vertices.push(self.vertices[i]);
                        if dist[i] >= -CLIP_TOL {
                            cap.push(vertices.len() - 1);
                        }
                        vertices.len() - 1
                    });
                    out_face.push(idx);
                }
                let crosses = (dist[i] < -CLIP_TOL && dist[j] > CLIP_TOL)
                    || (dist[i] > CLIP_TOL && dist[j] < -CLIP_TOL);
                if crosses {
                    let key = (i.min(j), i.max(j));
                    let idx = *edge_points.entry(key).or_insert_with(|| {
                        let t = dist[i] / (dist[i] - dist[j]);
                        vertices.push(self.vertices[i] + (self.vertices[j] - self.vertices[i]) * t);
                        cap.push(vertices.len() - 1);
                        vertices.len() - 1
                    });
                    out_face.push(idx);
                }
            }
            if out_face.len() >= 3 {
                faces.push(out_face);
            }
        }

        if cap.len() >= 3 {
            faces.push(order_cap(&vertices, cap, normal));
        }
        ConvexPolytope { vertices, faces }
    }
}

/// Orders coplanar points counter-clockwise about `normal`.
fn order_cap(vertices: &[Vector3<f64>], mut cap: Vec<usize>, normal: &Vector3<f64>) -> Vec<usize> {
    let centroid = cap.iter().map(|&i| vertices[i]).sum::<Vector3<f64>>() / cap.len() as f64;
    let n = normal.normalize();
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&seed).normalize();
    let e2 = n.cross(&e1);
    let angle = |i: usize| {
        let d = vertices[i] - centroid;
        d.dot(&e2).atan2(d.dot(&e1))
    };
    cap.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
    cap
}

/// Volume of the intersection of two boxes.
pub fn intersection_volume(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let mut poly = ConvexPolytope::from_box(a);
    for (n, off) in b.half_spaces() {
        poly = poly.clip(&n, off);
        if poly.is_empty() {
            return 0.0;
        }
    }
    poly.volume()
}

pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn is_yaw_only(r: &RotationMatrix) -> bool {
    [(2, 0), (2, 1), (0, 2), (1, 2)]
        .iter()
        .all(|&(i, j)| r.get(i, j).abs() <= YAW_ONLY_TOL)
}

fn footprint(b: &OrientedBox3D) -> Vec<Vector2<f64>> {
    let c = Vector2::new(b.center.x, b.center.y);
    let h = b.half_extents();
    let m = b.rot.matrix();
    let ex = Vector2::new(m[(0, 0)], m[(1, 0)]) * h.x;
    let ey = Vector2::new(m[(0, 1)], m[(1, 1)]) * h.y;
    let mut poly = vec![c - ex - ey, c + ex - ey, c + ex + ey, c - ex + ey];
    if polygon_area_signed(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

fn polygon_area_signed(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        })
        .sum::<f64>()
        / 2.0
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Sutherland–Hodgman clip of a convex polygon by a counter-clockwise convex clipper.
fn clip_polygon(subject: &[Vector2<f64>], clipper: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output = subject.to_vec();
    for i in 0..clipper.len() {
        if output.is_empty() {
            break;
        }
        let a = clipper[i];
        let b = clipper[(i + 1) % clipper.len()];
        let edge = b - a;
        let side = |p: &Vector2<f64>| cross2(&edge, &(p - a));
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let p = input[k];
            let q = input[(k + 1) % input.len()];
            let (sp, sq) = (side(&p), side(&q));
            if sp >= 0.0 {
                output.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                output.push(p + (q - p) * t);
            }
        }
    }
    output
}

/// Bird's-eye-view IoU for boxes rotated only about z.
pub fn iou3d_bev_yaw(a: &OrientedBox3D, b: &OrientedBox3D) -> Result<f64, BoxError> {
    if !is_yaw_only(&a.rot) || !is_yaw_only(&b.rot) {
        return Err(BoxError::NotYawOnly);
    }
    let overlap_poly = clip_polygon(&footprint(a), &footprint(b));
    let area = if overlap_poly.len() >= 3 {
        polygon_area_signed(&overlap_poly).abs()
    } else {
        0.0
    };
    let (a_lo, a_hi) = (a.center.z - a.dims[2] / 2.0, a.center.z + a.dims[2] / 2.0);
    let (b_lo, b_hi) = (b.center.z - b.dims[2] / 2.0, b.center.z + b.dims[2] / 2.0);
    let dz = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Rejection-sampling IoU estimate over the axis-aligned hull of both boxes.
pub fn iou3d_monte_carlo(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, seed: u64) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in corners(a).iter().chain(corners(b).iter()) {
        let v = p.to_vector();
        lo = lo.inf(&v);
        hi = hi.sup(&v);
    }
    let span = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for _ in 0..samples.max(1) {
        let p = lo + Vector3::new(
            span.x * rng.random::<f64>(),
            span.y * rng.random::<f64>(),
            span.z * rng.random::<f64>(),
        );
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        in_a += ia as u64;
        in_b += ib as u64;
        in_both += (ia && ib) as u64;
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

#[derive(Serialize, Deserialize)]
struct BoxWire {
    center: [f64; 3],
    dims: [f64; 3],
    rot: RotationMatrix,
}

impl Serialize for OrientedBox3D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BoxWire {
            center: [self.center.x, self.center.y, self.center.z],
            dims: self.dims,
            rot: self.rot,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for OrientedBox3D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = BoxWire::deserialize(d)?;
        let [x, y, z] = w.center;
        OrientedBox3D::new(Point3D::new(x, y, z), w.dims, w.rot).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{euler_to_matrix, EulerAngles};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn aabb(center: [f64; 3], dims: [f64; 3]) -> OrientedBox3D {
        OrientedBox3D::new(
            Point3D::new(center[0], center[1], center[2]),
            dims,
            RotationMatrix::identity(),
        )
        .unwrap()
    }

    fn yawed(center: [f64; 3], dims: [f64; 3], yaw: f64) -> OrientedBox3D {
        OrientedBox3D::new(
            Point3D::new(center[0], center[1], center[2]),
            dims,
            euler_to_matrix(&EulerAngles::new(0.0, 0.0, yaw)),
        )
        .unwrap()
    }

    #[test]
    fn unit_cube_corners() {
        let c = corners(&aabb([0.0; 3], [1.0; 3]));
        for (p, s) in c.iter().zip(CORNER_SIGNS.iter()) {
            assert_eq!([p.x, p.y, p.z], [s[0] * 0.5, s[1] * 0.5, s[2] * 0.5]);
        }
    }

    #[test]
    fn yaw_swaps_extents() {
        let c = corners(&yawed([0.0; 3], [2.0, 1.0, 1.0], FRAC_PI_2));
        let max_x = c.iter().map(|p| p.x.abs()).fold(0.0, f64::max);
        let max_y = c.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
        assert!((max_x - 0.5).abs() < 1e-15);
        assert!((max_y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn corners_translate() {
        let b = yawed([1.0, 2.0, 3.0], [2.0, 1.0, 0.5], 0.3);
        let t = Vector3::new(-4.0, 0.5, 10.0);
        for (p, q) in corners(&b).iter().zip(corners(&b.translated(&t)).iter()) {
            assert!((q.to_vector() - p.to_vector() - t).abs().max() < 1e-12);
        }
    }

    #[test]
    fn polytope_volume_matches_box() {
        let b = OrientedBox3D::new(
            Point3D::new(1.0, -2.0, 9.0),
            [2.0, 0.7, 1.3],
            euler_to_matrix(&EulerAngles::new(0.3, -0.8, 1.9)),
        )
        .unwrap();
        assert!((ConvexPolytope::from_box(&b).volume() - b.volume()).abs() < 1e-12);
    }

    #[test]
    fn clip_halves_cube() {
        let poly = ConvexPolytope::from_box(&aabb([0.0; 3], [1.0; 3]));
        let half = poly.clip(&Vector3::x(), 0.0);
        assert!((half.volume() - 0.5).abs() < 1e-15);
        let corner = poly.clip(&Vector3::new(1.0, 1.0, 1.0).normalize(), 0.0);
        assert!((corner.volume() - 0.5).abs() < 1e-15);
        assert!(poly.clip(&Vector3::x(), -1.0).is_empty());
        assert_eq!(poly.clip(&Vector3::x(), 0.5).faces.len(), 6);
    }

    #[test]
    fn intersection_examples() {
        let a = aabb([0.0; 3], [1.0; 3]);
        assert!((intersection_volume(&a, &a) - 1.0).abs() < 1e-12);
        let b = aabb([0.5, 0.0, 0.0], [1.0; 3]);
        assert!((intersection_volume(&a, &b) - 0.5).abs() < 1e-12);
        let far = aabb([100.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(intersection_volume(&a, &far), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = aabb([0.0; 3], [1.0; 3]);
        assert_eq!(iou3d(&a, &a), 1.0);
        let b = aabb([0.5, 0.0, 0.0], [1.0; 3]);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou3d(&a, &aabb([100.0, 0.0, 0.0], [1.0; 3])), 0.0);
    }

    #[test]
    fn touching_faces_have_zero_overlap() {
        let a = aabb([0.0; 3], [1.0; 3]);
        let b = aabb([1.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(iou3d(&a, &b), 0.0);
    }

    #[test]
    fn bev_examples() {
        let a = yawed([0.0; 3], [1.0; 3], 0.7);
        assert!((iou3d_bev_yaw(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let square = yawed([0.0; 3], [1.0; 3], 0.0);
        let turned = yawed([0.0; 3], [1.0; 3], FRAC_PI_4);
        let octagon = 2.0 * (SQRT_2 - 1.0);
        let expected = octagon / (2.0 - octagon);
        let bev = iou3d_bev_yaw(&square, &turned).unwrap();
        assert!((bev - expected).abs() < 1e-12);
        assert!((iou3d(&square, &turned) - expected).abs() < 1e-12);
        let mc = iou3d_monte_carlo(&square, &turned, 200_000, 7);
        assert!((mc - expected).abs() < 0.01);

        let pitched = OrientedBox3D::new(
            Point3D::new(0.0, 0.0, 0.0),
            [1.0; 3],
            euler_to_matrix(&EulerAngles::new(0.1, 0.0, 0.0)),
        )
        .unwrap();
        assert_eq!(iou3d_bev_yaw(&square, &pitched), Err(BoxError::NotYawOnly));
    }

    #[test]
    fn monte_carlo_examples() {
        let a = yawed([0.0, 0.0, 5.0], [2.0, 1.0, 1.0], 0.4);
        assert_eq!(iou3d_monte_carlo(&a, &a, 1000, 3), 1.0);
        let far = aabb([50.0, 0.0, 5.0], [1.0; 3]);
        assert_eq!(iou3d_monte_carlo(&a, &far, 1000, 3), 0.0);
        assert_eq!(
            iou3d_monte_carlo(&a, &far.translated(&Vector3::new(-49.5, 0.0, 0.0)), 5000, 11),
            iou3d_monte_carlo(&a, &far.translated(&Vector3::new(-49.5, 0.0, 0.0)), 5000, 11)
        );
    }

    #[test]
    fn invalid_boxes_rejected() {
        let r = RotationMatrix::identity();
        assert!(OrientedBox3D::new(Point3D::new(0.0, 0.0, 0.0), [0.0, 1.0, 1.0], r).is_err());
        assert!(OrientedBox3D::new(Point3D::new(f64::NAN, 0.0, 0.0), [1.0; 3], r).is_err());
    }

    #[test]
    fn box_json_shape() {
        let b = aabb([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]);
        let v = serde_json::to_value(b).unwrap();
        assert_eq!(v["center"], serde_json::json!([1.0, 2.0, 3.0]));
        assert_eq!(v["dims"], serde_json::json!([4.0, 5.0, 6.0]));
        assert_eq!(v["rot"].as_array().unwrap().len(), 9);
        let back: OrientedBox3D = serde_json::from_value(v).unwrap();
        assert_eq!(back, b);
    }
}
