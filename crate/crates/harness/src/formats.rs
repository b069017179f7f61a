//! JSONL record formats for detections and ground truth.
//!
//! One JSON object per line, LF separated. Parsing is strict: unknown
//! fields are rejected and errors carry the 1-based line number. Within a
//! file, frame ids must not decrease.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tta_core::evaluation::{FrameId, GroundTruth};
use tta_core::{BBox, ChannelId, Detection};

use crate::error::{read_string, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_id: u64,
    pub channel_id: String,
    pub class_id: u32,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub frame_id: u64,
    pub class_id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ignore: bool,
}

trait Record {
    fn frame_id(&self) -> u64;
    fn check(&self) -> Result<(), String>;
}

fn check_box(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<(), String> {
    if [x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err("box coordinates must be finite".into())
    }
}

impl Record for DetectionRecord {
    fn frame_id(&self) -> u64 {
        self.frame_id
    }

    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        check_box(self.x1, self.y1, self.x2, self.y2)
    }
}

impl Record for GtRecord {
    fn frame_id(&self) -> u64 {
        self.frame_id
    }

    fn check(&self) -> Result<(), String> {
        check_box(self.x1, self.y1, self.x2, self.y2)
    }
}

fn parse_lines<T: DeserializeOwned + Record>(text: &str, path: &Path) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| HarnessError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: T = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        rec.check().map_err(fail)?;
        if let Some(prev) = out.last() {
            if rec.frame_id() < prev.frame_id() {
                return Err(fail(format!("frame {} after frame {}", rec.frame_id(), prev.frame_id())));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parses detection JSONL text; `path` is only used in error messages.
pub fn parse_detections_str(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_lines(text, path)
}

pub fn parse_gt_str(text: &str, path: &Path) -> Result<Vec<GtRecord>> {
    parse_lines(text, path)
}

pub fn parse_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    parse_detections_str(&read_string(path)?, path)
}

pub fn parse_gt(path: &Path) -> Result<Vec<GtRecord>> {
    parse_gt_str(&read_string(path)?, path)
}

pub fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

impl DetectionRecord {
    pub fn from_detection(frame_id: u64, channel: &str, d: &Detection) -> Self {
        Self {
            frame_id,
            channel_id: channel.to_string(),
            class_id: d.class_id,
            score: d.score,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        }
    }

    pub fn to_detection(&self, channel: ChannelId) -> Detection {
        Detection::new(BBox::new(self.x1, self.y1, self.x2, self.y2).normalize(), self.score, self.class_id, channel)
    }
}

impl GtRecord {
    pub fn from_gt(frame_id: u64, g: &GroundTruth) -> Self {
        let b = g.bbox;
        Self { frame_id, class_id: g.class_id, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, ignore: g.ignore }
    }

    pub fn to_gt(&self) -> GroundTruth {
        let b = BBox::new(self.x1, self.y1, self.x2, self.y2).normalize();
        GroundTruth { bbox: b, class_id: self.class_id, ignore: self.ignore }
    }
}

/// Maps channel names to dense ids in order of first registration.
#[derive(Debug, Clone, Default)]
pub struct ChannelTable {
    names: Vec<String>,
}

impl ChannelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> Result<ChannelId> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Ok(ChannelId(i as u16));
        }
        if self.names.len() > u16::MAX as usize {
            return Err(HarnessError::Invalid("too many channels".into()));
        }
        self.names.push(name.to_string());
        Ok(ChannelId((self.names.len() - 1) as u16))
    }

    pub fn name(&self, id: ChannelId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Groups records by frame, interning channel names as they appear.
pub fn group_detections(
    records: &[DetectionRecord],
    table: &mut ChannelTable,
) -> Result<BTreeMap<FrameId, Vec<Detection>>> {
    let mut out: BTreeMap<FrameId, Vec<Detection>> = BTreeMap::new();
    for r in records {
        let id = table.intern(&r.channel_id)?;
        out.entry(FrameId(r.frame_id)).or_default().push(r.to_detection(id));
    }
    Ok(out)
}

pub fn group_gt(records: &[GtRecord]) -> BTreeMap<FrameId, Vec<GroundTruth>> {
    let mut out: BTreeMap<FrameId, Vec<GroundTruth>> = BTreeMap::new();
    for r in records {
        out.entry(FrameId(r.frame_id)).or_default().push(r.to_gt());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("d.jsonl")
    }

    const LINE: &str = r#"{"frame_id":3,"channel_id":"src","class_id":0,"score":0.5,"x1":1.0,"y1":2.0,"x2":3.0,"y2":4.0}"#;

    #[test]
    fn empty_file_is_empty_set() {
        assert!(parse_detections_str("", p()).unwrap().is_empty());
        assert!(parse_detections_str("\n\n", p()).unwrap().is_empty());
    }

    #[test]
    fn parses_one_record() {
        let r = parse_detections_str(LINE, p()).unwrap();
        assert_eq!(r[0].channel_id, "src");
        assert_eq!(r[0].score, 0.5);
    }

    #[test]
    fn score_out_of_range_reports_line() {
        let text = format!("{LINE}\n{}", LINE.replace("0.5", "1.5"));
        match parse_detections_str(&text, p()) {
            Err(HarnessError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("1.5"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = LINE.replace("\"score\"", "\"extra\":1,\"score\"");
        assert!(matches!(parse_detections_str(&text, p()), Err(HarnessError::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_field_rejected() {
        let text = LINE.replace(",\"y2\":4.0", "");
        assert!(parse_detections_str(&text, p()).is_err());
    }

    #[test]
    fn decreasing_frames_rejected() {
        let text = format!("{LINE}\n{}", LINE.replace("\"frame_id\":3", "\"frame_id\":2"));
        assert!(matches!(parse_detections_str(&text, p()), Err(HarnessError::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{LINE}\n{LINE}\n{{\"frame_id\":");
        assert!(matches!(parse_detections_str(&text, p()), Err(HarnessError::Parse { line: 3, .. })));
    }

    #[test]
    fn gt_ignore_defaults_to_false() {
        let g = parse_gt_str(r#"{"frame_id":0,"class_id":1,"x1":0,"y1":0,"x2":5,"y2":5}"#, p()).unwrap();
        assert!(!g[0].ignore);
        assert_eq!(write_jsonl(&g), "{\"frame_id\":0,\"class_id\":1,\"x1\":0.0,\"y1\":0.0,\"x2\":5.0,\"y2\":5.0}\n");
    }

    #[test]
    fn channel_table_is_dense() {
        let mut t = ChannelTable::new();
        assert_eq!(t.intern("b").unwrap(), ChannelId(0));
        assert_eq!(t.intern("a").unwrap(), ChannelId(1));
        assert_eq!(t.intern("b").unwrap(), ChannelId(0));
        assert_eq!(t.name(ChannelId(1)), "a");
    }
}
