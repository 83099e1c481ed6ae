use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{HarnessError, ProfileKind, SceneObject, SceneRecord};
use crate::box3d::{corners, OrientedBox3D};
use crate::camera::{backproject_center, project, CameraIntrinsics, Point2D, Point3D};
use crate::rotation::RotationMatrix;

/// Every tenth scene (index ≡ 9 mod 10) is a focal pair of its predecessor.
const FOCAL_PAIR_PERIOD: usize = 10;
/// Corners closer than this to the camera plane cause a resample.
const MIN_CORNER_DEPTH: f64 = 0.05;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRanges {
    pub fx: (f64, f64),
    pub width: (f64, f64),
    pub depth: (f64, f64),
    pub dims_min: [f64; 3],
    pub dims_max: [f64; 3],
    /// Uniform random 3-DoF rotations when true, yaw about local z otherwise.
    pub full_rotation: bool,
    pub objects_per_scene: (usize, usize),
}

impl SynthRanges {
    pub fn indoor() -> Self {
        Self {
            fx: (500.0, 2000.0),
            width: (640.0, 1920.0),
            depth: (0.5, 8.0),
            dims_min: [0.3, 0.3, 0.3],
            dims_max: [2.0, 1.5, 1.5],
            full_rotation: true,
            objects_per_scene: (1, 3),
        }
    }

    pub fn outdoor() -> Self {
        Self {
            fx: (500.0, 2000.0),
            width: (640.0, 1920.0),
            depth: (2.0, 60.0),
            dims_min: [3.0, 1.5, 1.4],
            dims_max: [5.0, 2.0, 1.8],
            full_rotation: false,
            objects_per_scene: (1, 3),
        }
    }

    pub fn for_kind(kind: ProfileKind) -> Self {
        match kind {
            ProfileKind::Indoor => Self::indoor(),
            ProfileKind::Outdoor => Self::outdoor(),
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let interval = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi {
                Ok(())
            } else {
                Err(HarnessError::InvalidRanges(format!("{name} must satisfy 0 < min <= max")))
            }
        };
        interval("fx", self.fx)?;
        interval("width", self.width)?;
        interval("depth", self.depth)?;
        for k in 0..3 {
            interval("dims", (self.dims_min[k], self.dims_max[k]))?;
        }
        let (lo, hi) = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return Err(HarnessError::InvalidRanges(
                "objects_per_scene must satisfy 1 <= min <= max".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_intrinsics<R: Rng>(rng: &mut R, r: &SynthRanges) -> CameraIntrinsics {
    let fx = uniform(rng, r.fx);
    let fy = fx * uniform(rng, (0.95, 1.05));
    let width = uniform(rng, r.width).round();
    let height = (width * uniform(rng, (0.5, 0.8))).round();
    let cx = width * uniform(rng, (0.45, 0.55));
    let cy = height * uniform(rng, (0.45, 0.55));
    CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
    }
}

fn sample_rotation<R: Rng>(rng: &mut R, full: bool) -> RotationMatrix {
    if full {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
        RotationMatrix::from_rotation3(&q.to_rotation_matrix())
    } else {
        RotationMatrix::about_axis(&Vector3::z(), uniform(rng, (-PI, PI)))
    }
}

/// Pixel-space extent of the projected corners, clamped to the image.
fn box2d(b: &OrientedBox3D, cam: &CameraIntrinsics) -> [f64; 4] {
    let mut out = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in corners(b) {
        if let Ok(p) = project(c, cam) {
            out[0] = out[0].min(p.u);
            out[1] = out[1].min(p.v);
            out[2] = out[2].max(p.u);
            out[3] = out[3].max(p.v);
        }
    }
    [
        out[0].clamp(0.0, cam.width),
        out[1].clamp(0.0, cam.height),
        out[2].clamp(0.0, cam.width),
        out[3].clamp(0.0, cam.height),
    ]
}

fn make_object(id: usize, b: OrientedBox3D, cam: &CameraIntrinsics) -> SceneObject {
    SceneObject {
        object_id: id.to_string(),
        caption: format!("object {id}"),
        box2d: box2d(&b, cam),
        h2d: cam.fy * b.dims[2] / b.center.z,
        box3d: b,
    }
}

fn sample_object<R: Rng>(rng: &mut R, r: &SynthRanges, cam: &CameraIntrinsics) -> Result<OrientedBox3D, HarnessError> {
    for _ in 0..MAX_ATTEMPTS {
        let pixel = Point2D::new(uniform(rng, (0.0, cam.width)), uniform(rng, (0.0, cam.height)));
        let z = uniform(rng, r.depth);
        let dims = [0, 1, 2].map(|k| uniform(rng, (r.dims_min[k], r.dims_max[k])));
        let rot = sample_rotation(rng, r.full_rotation);
        let center = backproject_center(pixel, z, cam).expect("sampled depth is positive");
        let b = OrientedBox3D::new(center, dims, rot).expect("sampled dims are positive");
        if corners(&b).iter().all(|c| c.z > MIN_CORNER_DEPTH) {
            return Ok(b);
        }
    }
    Err(HarnessError::InvalidRanges(
        "could not place a box in front of the camera; depth range too small for the dims".into(),
    ))
}

/// The focal-pair twin: both focal lengths and every depth doubled, lateral
/// position and orientation kept, so every projected center stays put.
fn focal_pair(src: &SceneRecord, image_id: String) -> SceneRecord {
    let mut cam = src.intrinsics;
    cam.fx *= 2.0;
    cam.fy *= 2.0;
    let objects = src
        .objects
        .iter()
        .map(|o| {
            let c = o.box3d.center;
            let b = OrientedBox3D::new(Point3D::new(c.x, c.y, 2.0 * c.z), o.box3d.dims, o.box3d.rot)
                .expect("copied box is valid");
            let mut obj = make_object(0, b, &cam);
            obj.object_id = o.object_id.clone();
            obj.caption = o.caption.clone();
            obj
        })
        .collect();
    SceneRecord {
        image_id,
        intrinsics: cam,
        objects,
        focal_pair_of: Some(src.image_id.clone()),
    }
}

/// Deterministic synthetic scenes. Scene `i` is named `scene_{i:05}`.
pub fn synth_scenes(n: usize, seed: u64, ranges: &SynthRanges) -> Result<Vec<SceneRecord>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::InvalidRanges("scene count must be at least 1".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes: Vec<SceneRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let image_id = format!("scene_{i:05}");
        if i % FOCAL_PAIR_PERIOD == FOCAL_PAIR_PERIOD - 1 {
            let pair = focal_pair(&scenes[i - 1], image_id);
            scenes.push(pair);
            continue;
        }
        let cam = sample_intrinsics(&mut rng, ranges);
        let count = rng.random_range(ranges.objects_per_scene.0..=ranges.objects_per_scene.1);
        let mut objects = Vec::with_capacity(count);
        for id in 0..count {
            let b = sample_object(&mut rng, ranges, &cam)?;
            objects.push(make_object(id, b, &cam));
        }
        scenes.push(SceneRecord {
            image_id,
            intrinsics: cam,
            objects,
            focal_pair_of: None,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::box3d::is_yaw_only;

    #[test]
    fn deterministic() {
        let a = synth_scenes(3, 11, &SynthRanges::indoor()).unwrap();
        let b = synth_scenes(3, 11, &SynthRanges::indoor()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_scenes(3, 12, &SynthRanges::indoor()).unwrap());
    }

    #[test]
    fn centers_project_inside_image() {
        for s in synth_scenes(40, 1, &SynthRanges::outdoor()).unwrap() {
            let cam = s.intrinsics;
            cam.validate().unwrap();
            for o in &s.objects {
                let p = project(o.box3d.center, &cam).unwrap();
                assert!((0.0..=cam.width).contains(&p.u) && (0.0..=cam.height).contains(&p.v));
                assert!(is_yaw_only(&o.box3d.rot));
            }
        }
    }

    #[test]
    fn focal_pairs_every_tenth_scene() {
        let scenes = synth_scenes(20, 2, &SynthRanges::indoor()).unwrap();
        let pairs: Vec<usize> = (0..20).filter(|&i| scenes[i].focal_pair_of.is_some()).collect();
        assert_eq!(pairs, vec![9, 19]);
        assert_eq!(scenes[9].focal_pair_of.as_deref(), Some("scene_00008"));
        assert_eq!(scenes[9].intrinsics.fx, 2.0 * scenes[8].intrinsics.fx);
    }

    #[test]
    fn bad_ranges() {
        let mut r = SynthRanges::indoor();
        r.depth = (3.0, 1.0);
        assert!(matches!(synth_scenes(1, 0, &r), Err(HarnessError::InvalidRanges(_))));
        assert!(synth_scenes(0, 0, &SynthRanges::indoor()).is_err());
    }
}
