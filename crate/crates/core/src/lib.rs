//! Geometry engine, decoder numerics and evaluation harness for grounding
//! language-referred objects as oriented 3D boxes from a single image.
//!
//! The layers, bottom-up:
//! - [`camera`]: pinhole projection, virtual-camera depth normalization, depth fusion.
//! - [`rotation`]: continuous 6D rotations, Euler conversion, allocentric frames.
//! - [`box3d`]: oriented boxes and exact 3D IoU by convex clipping.
//! - [`metrics`]: Acc@0.25 / Acc@0.5 and mean depth/size errors.
//! - [`fusion`]: feature mining with cross-branch attention.
//! - [`decoder`]: the query-token decoder, its heads, gradients and training loop.
//! - [`harness`]: synthetic scenes, JSONL I/O and the evaluation pipeline.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod box3d;
pub mod camera;
pub mod decoder;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rotation;

pub use box3d::{iou3d, OrientedBox3D};
pub use camera::{CameraIntrinsics, DepthMode, Point2D, Point3D, VirtualCamera};
pub use decoder::RawHeadOutput;
pub use metrics::{aggregate, format_report, MetricReport, QueryResult};
pub use rotation::{Rot6D, RotationMatrix};
