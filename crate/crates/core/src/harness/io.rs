use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::Formatter;

use super::{HarnessError, Payload, PredictionRecord, SceneRecord};

/// Compact JSON with every float written as 17 significant digits, which
/// is enough to reproduce any `f64` exactly and so makes
/// write → read → write byte-stable.
struct RoundTripFormatter;

impl Formatter for RoundTripFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut buf = Vec::new();
    for r in records {
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, RoundTripFormatter);
        r.serialize(&mut ser).expect("records serialize to JSON");
        buf.push(b'\n');
    }
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    fs::write(path, to_jsonl(records)).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `epoch,mean_loss` rows; epoch 0 is the loss before training.
pub fn write_loss_csv(path: &Path, initial: f64, history: &[f64]) -> Result<(), HarnessError> {
    let wrap = |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["epoch", "mean_loss"]).map_err(wrap)?;
    for (epoch, loss) in std::iter::once(&initial).chain(history).enumerate() {
        w.write_record([epoch.to_string(), format!("{loss:.16e}")]).map_err(wrap)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

const NON_FINITE_TOKENS: [&str; 5] = ["NaN", "-Infinity", "Infinity", "-inf", "inf"];

/// Name of the object key whose value starts at or before byte `pos`.
fn key_before(line: &str, pos: usize) -> Option<String> {
    let prefix = &line[..pos.min(line.len())];
    let colon = prefix.rfind(':')?;
    let before = prefix[..colon].trim_end();
    let body = before.strip_suffix('"')?;
    let start = body.rfind('"')?;
    Some(body[start + 1..].to_string())
}

/// Recognizes the NaN / infinity literals that JSON cannot express so they
/// can be reported as a schema violation on the field rather than as a
/// generic syntax error.
fn non_finite_field(line: &str, err: &serde_json::Error) -> Option<String> {
    let col = err.column();
    let msg = err.to_string();
    let out_of_range = msg.contains("number out of range");
    let window_end = (col + 10).min(line.len());
    let search = line.get(..window_end)?;
    let start = NON_FINITE_TOKENS
        .iter()
        .filter_map(|t| search.rfind(t))
        .filter(|&i| i <= col.max(1))
        .max();
    let pos = match (start, out_of_range) {
        (Some(i), _) => i,
        (None, true) => col.saturating_sub(1),
        (None, false) => return None,
    };
    Some(key_before(line, pos).unwrap_or_else(|| "<value>".to_string()))
}

fn missing_field_name(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

fn parse_lines<T: DeserializeOwned>(
    text: &str,
    source_name: &str,
    mut check: impl FnMut(&T, usize) -> Result<(), HarnessError>,
) -> Result<Vec<T>, HarnessError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                if let Some(field) = non_finite_field(line, &e) {
                    return Err(HarnessError::Schema {
                        source_name: source_name.to_string(),
                        line: line_no,
                        field,
                        message: "numbers must be finite".into(),
                    });
                }
                return Err(HarnessError::Parse {
                    source_name: source_name.to_string(),
                    line: line_no,
                    message: e.to_string(),
                });
            }
        };
        let record: T = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            let field = match (missing_field_name(&message), path.as_str()) {
                (Some(name), ".") => name.to_string(),
                (Some(name), p) => format!("{p}.{name}"),
                (None, p) => p.to_string(),
            };
            HarnessError::Schema {
                source_name: source_name.to_string(),
                line: line_no,
                field,
                message,
            }
        })?;
        check(&record, line_no)?;
        out.push(record);
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn schema(source_name: &str, line: usize, field: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Schema {
        source_name: source_name.to_string(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn check_scene(s: &SceneRecord, source_name: &str, line: usize) -> Result<(), HarnessError> {
    s.intrinsics
        .validate()
        .map_err(|e| schema(source_name, line, "intrinsics", e.to_string()))?;
    let mut ids = HashSet::new();
    for (i, o) in s.objects.iter().enumerate() {
        if !ids.insert(o.object_id.as_str()) {
            return Err(schema(
                source_name,
                line,
                &format!("objects[{i}].object_id"),
                format!("duplicate object_id {}", o.object_id),
            ));
        }
        if !(o.box3d.center.z > 0.0) {
            return Err(schema(
                source_name,
                line,
                &format!("objects[{i}].box3d.center"),
                "box center must lie in front of the camera (Z > 0)",
            ));
        }
        if !(o.h2d.is_finite() && o.h2d > 0.0) {
            return Err(schema(source_name, line, &format!("objects[{i}].h2d"), "must be positive"));
        }
        let [x1, y1, x2, y2] = o.box2d;
        if !(x1 <= x2 && y1 <= y2) {
            return Err(schema(
                source_name,
                line,
                &format!("objects[{i}].box2d"),
                "expected x1 <= x2 and y1 <= y2",
            ));
        }
    }
    Ok(())
}

pub fn parse_scenes(text: &str, source_name: &str) -> Result<Vec<SceneRecord>, HarnessError> {
    let mut images = HashSet::new();
    parse_lines(text, source_name, |s: &SceneRecord, line| {
        if !images.insert(s.image_id.clone()) {
            return Err(schema(
                source_name,
                line,
                "image_id",
                format!("duplicate image_id {}", s.image_id),
            ));
        }
        check_scene(s, source_name, line)
    })
}

/// Parses predictions; a second prediction for the same object is rejected.
pub fn parse_predictions(text: &str, source_name: &str) -> Result<Vec<PredictionRecord>, HarnessError> {
    let mut seen = HashSet::new();
    parse_lines(text, source_name, |p: &PredictionRecord, line| {
        if let Payload::Box(b) = &p.payload {
            if !(b.center.z > 0.0) {
                return Err(schema(source_name, line, "box3d.center", "Z must be positive"));
            }
        }
        if !seen.insert((p.image_id.clone(), p.object_id.clone())) {
            return Err(HarnessError::DuplicatePrediction {
                image_id: p.image_id.clone(),
                object_id: p.object_id.clone(),
            });
        }
        Ok(())
    })
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>, HarnessError> {
    parse_scenes(&read_text(path)?, &path.display().to_string())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, HarnessError> {
    parse_predictions(&read_text(path)?, &path.display().to_string())
}
