use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetProfile, HarnessError, Payload, PredictionRecord, RotationFrame, SceneRecord};
use crate::box3d::OrientedBox3D;
use crate::camera::{project, real_to_virtual_depth, reason_center, CameraIntrinsics, GeometryError};
use crate::decoder::RawHeadOutput;
use crate::metrics::{aggregate, score_query_with, DepthErrorKind, MetricReport, QueryResult};
use crate::rotation::{allocentric_to_egocentric, egocentric_to_allocentric, matrix_to_rot6d, rot6d_to_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Raw,
    Box,
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionMode::Raw => "raw",
            PredictionMode::Box => "box",
        })
    }
}

pub fn query_id(image_id: &str, object_id: &str) -> String {
    format!("{image_id}/{object_id}")
}

/// Reasoning chain from head outputs to a camera-frame box. `h2d` is the
/// 2D box height, used only when the profile fuses depths.
pub fn raw_to_box(
    raw: &RawHeadOutput,
    cam: &CameraIntrinsics,
    h2d: Option<f64>,
    profile: &DatasetProfile,
    query: &str,
) -> Result<OrientedBox3D, HarnessError> {
    let center = reason_center(raw, cam, &profile.virtual_camera, profile.depth_mode, h2d).map_err(|source| {
        HarnessError::Geometry {
            query: query.to_string(),
            source,
        }
    })?;
    let r = rot6d_to_matrix(&raw.rot6d).map_err(|source| HarnessError::Rotation {
        query: query.to_string(),
        source,
    })?;
    let rot = match profile.rotation_frame {
        RotationFrame::Egocentric => r,
        RotationFrame::Allocentric => allocentric_to_egocentric(&r, &center),
    };
    OrientedBox3D::new(center, raw.dims, rot).map_err(|source| HarnessError::Box {
        query: query.to_string(),
        source,
    })
}

/// The head outputs that reproduce `b` exactly under `profile`; used for
/// training targets and perfect predictions.
pub fn box_to_raw(b: &OrientedBox3D, cam: &CameraIntrinsics, profile: &DatasetProfile) -> Result<RawHeadOutput, GeometryError> {
    let p = project(b.center, cam)?;
    let rot = match profile.rotation_frame {
        RotationFrame::Egocentric => b.rot,
        RotationFrame::Allocentric => egocentric_to_allocentric(&b.rot, &b.center),
    };
    Ok(RawHeadOutput {
        u_norm: p.u / cam.width,
        v_norm: p.v / cam.height,
        d_v: real_to_virtual_depth(b.center.z, cam, &profile.virtual_camera)?,
        dims: b.dims,
        rot6d: matrix_to_rot6d(&rot),
    })
}

/// One prediction per ground-truth object, describing it exactly. With
/// `depth_noise = Some((eps, seed))`, raw predictions get `d_v` scaled by
/// `1 + eps·s`, `s ~ U[-1, 1]`, and nothing else is perturbed.
pub fn perfect_predictions(
    gt: &[SceneRecord],
    mode: PredictionMode,
    profile: &DatasetProfile,
    depth_noise: Option<(f64, u64)>,
) -> Result<Vec<PredictionRecord>, HarnessError> {
    let mut rng = depth_noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for scene in gt {
        for obj in &scene.objects {
            let payload = match mode {
                PredictionMode::Box => Payload::Box(obj.box3d),
                PredictionMode::Raw => {
                    let mut raw = box_to_raw(&obj.box3d, &scene.intrinsics, profile).map_err(|source| {
                        HarnessError::Geometry {
                            query: query_id(&scene.image_id, &obj.object_id),
                            source,
                        }
                    })?;
                    if let (Some((eps, _)), Some(rng)) = (depth_noise, rng.as_mut()) {
                        let s: f64 = rng.random_range(-1.0..=1.0);
                        raw.d_v *= 1.0 + eps * s;
                    }
                    Payload::Raw(raw)
                }
            };
            out.push(PredictionRecord {
                image_id: scene.image_id.clone(),
                object_id: obj.object_id.clone(),
                payload,
            });
        }
    }
    Ok(out)
}

/// Scores every ground-truth object, in ground-truth order. Objects without
/// a prediction score as misses.
pub fn evaluate(
    gt: &[SceneRecord],
    preds: &[PredictionRecord],
    mode: PredictionMode,
    profile: &DatasetProfile,
    depth_kind: DepthErrorKind,
) -> Result<Vec<QueryResult>, HarnessError> {
    let mut index: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    for (si, scene) in gt.iter().enumerate() {
        for (oi, obj) in scene.objects.iter().enumerate() {
            index.insert((scene.image_id.as_str(), obj.object_id.as_str()), (si, oi));
        }
    }
    let mut matched: HashMap<(usize, usize), &PredictionRecord> = HashMap::new();
    for p in preds {
        let key = index
            .get(&(p.image_id.as_str(), p.object_id.as_str()))
            .copied()
            .ok_or_else(|| HarnessError::UnmatchedPrediction {
                image_id: p.image_id.clone(),
                object_id: p.object_id.clone(),
            })?;
        let found = match p.payload {
            Payload::Raw(_) => PredictionMode::Raw,
            Payload::Box(_) => PredictionMode::Box,
        };
        if found != mode {
            return Err(HarnessError::ModeMismatch {
                image_id: p.image_id.clone(),
                object_id: p.object_id.clone(),
                found,
                expected: mode,
            });
        }
        if matched.insert(key, p).is_some() {
            return Err(HarnessError::DuplicatePrediction {
                image_id: p.image_id.clone(),
                object_id: p.object_id.clone(),
            });
        }
    }

    let mut results = Vec::new();
    for (si, scene) in gt.iter().enumerate() {
        for (oi, obj) in scene.objects.iter().enumerate() {
            let qid = query_id(&scene.image_id, &obj.object_id);
            let Some(p) = matched.get(&(si, oi)) else {
                results.push(QueryResult::missing(qid));
                continue;
            };
            let pred_box = match &p.payload {
                Payload::Box(b) => *b,
                Payload::Raw(raw) => raw_to_box(raw, &scene.intrinsics, Some(obj.h2d), profile, &qid)?,
            };
            results.push(score_query_with(&pred_box, &obj.box3d, qid, depth_kind));
        }
    }
    Ok(results)
}

pub fn run_pipeline(
    gt: &[SceneRecord],
    preds: &[PredictionRecord],
    mode: PredictionMode,
    profile: &DatasetProfile,
) -> Result<MetricReport, HarnessError> {
    evaluate(gt, preds, mode, profile, DepthErrorKind::AxisZ).map(|r| aggregate(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{synth_scenes, SynthRanges};

    #[test]
    fn perfect_raw_predictions_score_perfectly() {
        for (ranges, profile) in [
            (SynthRanges::indoor(), DatasetProfile::indoor()),
            (SynthRanges::outdoor(), DatasetProfile::outdoor()),
        ] {
            let gt = synth_scenes(20, 3, &ranges).unwrap();
            let preds = perfect_predictions(&gt, PredictionMode::Raw, &profile, None).unwrap();
            let r = run_pipeline(&gt, &preds, PredictionMode::Raw, &profile).unwrap();
            assert_eq!(r.acc_50, 1.0);
            assert!(r.mean_depth_error.unwrap() < 1e-9);
        }
    }

    #[test]
    fn unmatched_and_mismatched() {
        let gt = synth_scenes(2, 3, &SynthRanges::indoor()).unwrap();
        let profile = DatasetProfile::indoor();
        let mut preds = perfect_predictions(&gt, PredictionMode::Box, &profile, None).unwrap();
        assert!(matches!(
            run_pipeline(&gt, &preds, PredictionMode::Raw, &profile),
            Err(HarnessError::ModeMismatch { .. })
        ));
        preds[0].object_id = "ghost".into();
        let err = run_pipeline(&gt, &preds, PredictionMode::Box, &profile).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn missing_prediction_is_a_miss() {
        let gt = synth_scenes(1, 4, &SynthRanges::indoor()).unwrap();
        let profile = DatasetProfile::indoor();
        let mut preds = perfect_predictions(&gt, PredictionMode::Box, &profile, None).unwrap();
        let n = preds.len();
        preds.pop();
        let r = run_pipeline(&gt, &preds, PredictionMode::Box, &profile).unwrap();
        assert_eq!(r.count, n);
        assert_eq!(r.acc_25, (n - 1) as f64 / n as f64);
    }
}
