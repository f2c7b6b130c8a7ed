//! JSON-lines record formats.
//!
//! Detection lines: `{"image_id": str, "class_id": int, "bbox": [x,y,w,h], "score": float}`.
//! Ground-truth lines are the same without `score`. Blank lines are skipped.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ClassId, Detection, GroundTruthBox};
use crate::error::{Error, Result};

fn parse_lines<T: DeserializeOwned>(text: &str, check: impl Fn(&T) -> Result<()>) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let record: T = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            check(&record).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(record)
        })
        .collect()
}

pub(crate) fn check_detection(d: &Detection) -> Result<()> {
    d.bbox.validate()?;
    if !(0.0..=1.0).contains(&d.score) {
        return Err(Error::InvalidArgument(format!("score {} outside [0, 1]", d.score)));
    }
    Ok(())
}

pub(crate) fn check_ground_truth(g: &GroundTruthBox) -> Result<()> {
    g.bbox.validate()
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    parse_lines(text, check_detection)
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthBox>> {
    parse_lines(text, check_ground_truth)
}

/// Class-name map: a JSON object from class id (as a string key) to name.
pub fn parse_class_names(text: &str) -> Result<BTreeMap<ClassId, String>> {
    let raw: BTreeMap<String, String> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<ClassId>()
                .map(|id| (id, v))
                .map_err(|_| Error::InvalidArgument(format!("class id `{k}` is not an integer")))
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}
