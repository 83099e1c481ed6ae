//! Synthetic scenes, JSONL records and the evaluation pipeline that turns
//! predictions into grounding metrics.

mod io;
mod pipeline;
mod synth;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{BoxError, OrientedBox3D};
use crate::camera::{CameraIntrinsics, DepthMode, GeometryError, VirtualCamera};
use crate::decoder::{DecoderError, RawHeadOutput};
use crate::rotation::RotationError;

pub use io::{
    parse_predictions, parse_scenes, read_predictions, read_scenes, to_jsonl, write_jsonl, write_loss_csv,
};
pub use pipeline::{
    box_to_raw, evaluate, perfect_predictions, query_id, raw_to_box, run_pipeline, PredictionMode,
};
pub use synth::{synth_scenes, SynthRanges};
pub use toy::{build_toy_dataset, predict_toy, train_toy, ToyEncoder, ToyOutcome, ToySample, TOY_IMAGE_TOKENS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid synthesis ranges: {0}")]
    InvalidRanges(String),
    #[error("{source_name}: line {line}: invalid JSON: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: line {line}: field `{field}`: {message}")]
    Schema {
        source_name: String,
        line: usize,
        field: String,
        message: String,
    },
    #[error("prediction {image_id}/{object_id} matches no ground-truth object")]
    UnmatchedPrediction { image_id: String, object_id: String },
    #[error("more than one prediction for {image_id}/{object_id}")]
    DuplicatePrediction { image_id: String, object_id: String },
    #[error("prediction {image_id}/{object_id} carries a {found} payload but the run expects {expected}")]
    ModeMismatch {
        image_id: String,
        object_id: String,
        found: PredictionMode,
        expected: PredictionMode,
    },
    #[error("{query}: {source}")]
    Geometry { query: String, source: GeometryError },
    #[error("{query}: {source}")]
    Rotation { query: String, source: RotationError },
    #[error("{query}: {source}")]
    Box { query: String, source: BoxError },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

impl HarnessError {
    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, HarnessError::Io { .. } | HarnessError::Csv { .. })
    }
}

/// One referred object inside a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub caption: String,
    pub box3d: OrientedBox3D,
    /// `(x1, y1, x2, y2)` in pixels.
    pub box2d: [f64; 4],
    /// Projected object height in pixels.
    pub h2d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
    /// Set on focal-pair scenes: the image this one duplicates with doubled
    /// focal length and doubled depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_pair_of: Option<String>,
}

/// What a prediction carries: head outputs to reason from, or a finished box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Raw(RawHeadOutput),
    Box(OrientedBox3D),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictionWire", into = "PredictionWire")]
pub struct PredictionRecord {
    pub image_id: String,
    pub object_id: String,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionWire {
    image_id: String,
    object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<RawHeadOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box3d: Option<OrientedBox3D>,
}

impl TryFrom<PredictionWire> for PredictionRecord {
    type Error = String;

    fn try_from(w: PredictionWire) -> Result<Self, String> {
        let payload = match (w.raw, w.box3d) {
            (Some(raw), None) => {
                raw.validate().map_err(|e| format!("raw: {e}"))?;
                Payload::Raw(raw)
            }
            (None, Some(b)) => Payload::Box(b),
            _ => return Err("exactly one of `raw` or `box3d` is required".into()),
        };
        Ok(Self {
            image_id: w.image_id,
            object_id: w.object_id,
            payload,
        })
    }
}

impl From<PredictionRecord> for PredictionWire {
    fn from(p: PredictionRecord) -> Self {
        let (raw, box3d) = match p.payload {
            Payload::Raw(r) => (Some(r), None),
            Payload::Box(b) => (None, Some(b)),
        };
        Self {
            image_id: p.image_id,
            object_id: p.object_id,
            raw,
            box3d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationFrame {
    Egocentric,
    /// Relative to the viewing ray through the object center.
    #[default]
    Allocentric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Indoor,
    Outdoor,
}

/// How raw predictions are turned into boxes for one dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub depth_mode: DepthMode,
    pub rotation_frame: RotationFrame,
    pub virtual_camera: VirtualCamera,
}

impl DatasetProfile {
    /// Full 3-DoF rotations, virtual-depth branch only.
    pub fn indoor() -> Self {
        Self {
            depth_mode: DepthMode::VirtualOnly,
            rotation_frame: RotationFrame::Allocentric,
            virtual_camera: VirtualCamera::default(),
        }
    }

    /// Yaw-only rotations, virtual depth averaged with height depth.
    pub fn outdoor() -> Self {
        Self {
            depth_mode: DepthMode::FusedAverage,
            ..Self::indoor()
        }
    }

    pub fn for_kind(kind: ProfileKind) -> Self {
        match kind {
            ProfileKind::Indoor => Self::indoor(),
            ProfileKind::Outdoor => Self::outdoor(),
        }
    }
}
