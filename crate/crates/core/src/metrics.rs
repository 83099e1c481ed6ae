//! Per-query grounding scores and their dataset-level aggregation
//! (Acc@0.25, Acc@0.5 and mean depth / size errors).

use serde::{Deserialize, Serialize};

use crate::box3d::{iou3d, OrientedBox3D};

pub const ACC_LOOSE_THRESHOLD: f64 = 0.25;
pub const ACC_STRICT_THRESHOLD: f64 = 0.5;

/// Column headers in report order.
pub const REPORT_COLUMNS: [&str; 6] = [
    "Acc@0.25",
    "Acc@0.5",
    "DepthError",
    "LengthError",
    "WidthError",
    "HeightError",
];

/// How depth error is measured between predicted and ground-truth centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthErrorKind {
    /// `|ΔZ|` along the optical axis.
    #[default]
    AxisZ,
    /// Euclidean distance between centers.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxErrors {
    pub depth: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Score for one grounding query. `errors` is `None` when the query had no
/// prediction; such queries count as misses but are left out of error means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub iou: f64,
    pub errors: Option<BoxErrors>,
}

impl QueryResult {
    pub fn missing(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            iou: 0.0,
            errors: None,
        }
    }
}

pub fn score_query(pred: &OrientedBox3D, gt: &OrientedBox3D, query_id: impl Into<String>) -> QueryResult {
    score_query_with(pred, gt, query_id, DepthErrorKind::AxisZ)
}

pub fn score_query_with(
    pred: &OrientedBox3D,
    gt: &OrientedBox3D,
    query_id: impl Into<String>,
    depth_kind: DepthErrorKind,
) -> QueryResult {
    let depth = match depth_kind {
        DepthErrorKind::AxisZ => (pred.center.z - gt.center.z).abs(),
        DepthErrorKind::Euclidean => (pred.center.to_vector() - gt.center.to_vector()).norm(),
    };
    QueryResult {
        query_id: query_id.into(),
        iou: iou3d(pred, gt),
        errors: Some(BoxErrors {
            depth,
            length: (pred.dims[0] - gt.dims[0]).abs(),
            width: (pred.dims[1] - gt.dims[1]).abs(),
            height: (pred.dims[2] - gt.dims[2]).abs(),
        }),
    }
}

/// Dataset-level summary. Error means are `None` when no query was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_25: f64,
    pub acc_50: f64,
    pub mean_depth_error: Option<f64>,
    pub mean_length_error: Option<f64>,
    pub mean_width_error: Option<f64>,
    pub mean_height_error: Option<f64>,
    pub count: usize,
}

pub fn aggregate(results: &[QueryResult]) -> MetricReport {
    let count = results.len();
    let frac = |t: f64| {
        if count == 0 {
            0.0
        } else {
            results.iter().filter(|r| r.iou > t).count() as f64 / count as f64
        }
    };
    let scored: Vec<&BoxErrors> = results.iter().filter_map(|r| r.errors.as_ref()).collect();
    let mean = |f: fn(&BoxErrors) -> f64| {
        (!scored.is_empty()).then(|| scored.iter().map(|e| f(e)).sum::<f64>() / scored.len() as f64)
    };
    MetricReport {
        acc_25: frac(ACC_LOOSE_THRESHOLD),
        acc_50: frac(ACC_STRICT_THRESHOLD),
        mean_depth_error: mean(|e| e.depth),
        mean_length_error: mean(|e| e.length),
        mean_width_error: mean(|e| e.width),
        mean_height_error: mean(|e| e.height),
        count,
    }
}

impl MetricReport {
    /// Values in [`REPORT_COLUMNS`] order.
    pub fn columns(&self) -> [Option<f64>; 6] {
        [
            Some(self.acc_25),
            Some(self.acc_50),
            self.mean_depth_error,
            self.mean_length_error,
            self.mean_width_error,
            self.mean_height_error,
        ]
    }
}

/// One-line table: accuracies as percentages with one decimal, errors in
/// meters with two decimals, blank when there is nothing to average.
pub fn format_report(r: &MetricReport) -> String {
    let mut cells: Vec<String> = REPORT_COLUMNS
        .iter()
        .zip(r.columns())
        .enumerate()
        .map(|(i, (name, value))| match (i < 2, value) {
            (true, Some(v)) => format!("{name} {:.1}", v * 100.0),
            (false, Some(v)) => format!("{name} {v:.2}"),
            (_, None) => name.to_string(),
        })
        .collect();
    cells.push(format!("count {}", r.count));
    cells.join(" | ")
}

pub fn report_json(r: &MetricReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}
