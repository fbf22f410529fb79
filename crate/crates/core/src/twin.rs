//! Digital twin documents: per-frame scene descriptions of tracked object
//! instances, their validation and their canonical JSON form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;

/// Normalized spatial properties of one instance in one frame.
///
/// `depth` is 0 for the nearest point to the camera and 1 for the farthest.
/// `size` is the fraction of the frame area covered by the instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialProps {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub size: f64,
}

impl SpatialProps {
    pub fn new(x: f64, y: f64, depth: f64, size: f64) -> Self {
        Self { x, y, depth, size }
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [("x", self.x), ("y", self.y), ("depth", self.depth), ("size", self.size)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u64,
    pub category: String,
    pub attributes: Vec<String>,
    /// Path of the RLE mask file, relative to the benchmark mask directory.
    pub mask_ref: String,
    pub spatial: SpatialProps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub timestamp_s: f64,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalTwin {
    pub video_id: String,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameRecord>,
}

/// One broken invariant found by [`validate_twin`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub frame_index: Option<u64>,
    pub instance_id: Option<u64>,
    pub rule: String,
}

impl Violation {
    fn new(frame_index: Option<u64>, instance_id: Option<u64>, rule: impl Into<String>) -> Self {
        Self { frame_index, instance_id, rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame_index {
            Some(fi) => write!(f, "frame {fi}")?,
            None => write!(f, "twin")?,
        }
        if let Some(id) = self.instance_id {
            write!(f, ", instance {id}")?;
        }
        write!(f, ": {}", self.rule)
    }
}

#[derive(Debug, Error)]
pub enum TwinParseError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("twin violates {} invariant(s): {}", .0.len(), join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Check every invariant of the twin and its records. Never fails; an empty
/// list means the twin is well-formed.
pub fn validate_twin(twin: &DigitalTwin) -> Vec<Violation> {
    let mut out = Vec::new();
    if twin.video_id.is_empty() {
        out.push(Violation::new(None, None, "video_id must be non-empty"));
    }
    if !(twin.fps.is_finite() && twin.fps > 0.0) {
        out.push(Violation::new(None, None, format!("fps must be finite and > 0 (got {})", twin.fps)));
    }
    if twin.width == 0 || twin.height == 0 {
        out.push(Violation::new(None, None, "width and height must be positive"));
    }
    if twin.frames.is_empty() {
        out.push(Violation::new(None, None, "twin must contain at least one frame"));
    }

    let mut categories: BTreeMap<u64, (&str, u64)> = BTreeMap::new();
    let mut prev: Option<&FrameRecord> = None;
    for frame in &twin.frames {
        let fi = Some(frame.frame_index);
        if let Some(p) = prev {
            if frame.frame_index <= p.frame_index {
                out.push(Violation::new(
                    fi,
                    None,
                    format!("frame_index must be strictly increasing (previous {})", p.frame_index),
                ));
            }
            if frame.timestamp_s < p.timestamp_s {
                out.push(Violation::new(fi, None, "timestamps must be non-decreasing"));
            }
        }
        if !(frame.timestamp_s.is_finite() && frame.timestamp_s >= 0.0) {
            out.push(Violation::new(fi, None, format!("timestamp_s must be finite and >= 0 (got {})", frame.timestamp_s)));
        }

        let mut seen = BTreeSet::new();
        for inst in &frame.instances {
            let id = Some(inst.instance_id);
            if !seen.insert(inst.instance_id) {
                out.push(Violation::new(fi, id, "instance_id must be unique within a frame"));
            }
            if inst.category.is_empty() {
                out.push(Violation::new(fi, id, "category must be non-empty"));
            }
            if inst.mask_ref.is_empty() {
                out.push(Violation::new(fi, id, "mask_ref must be non-empty"));
            }
            for (name, v) in inst.spatial.fields() {
                if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    out.push(Violation::new(fi, id, format!("spatial.{name} must lie in [0,1] (got {v})")));
                }
            }
            match categories.get(&inst.instance_id) {
                Some((cat, first)) if *cat != inst.category => out.push(Violation::new(
                    fi,
                    id,
                    format!(
                        "category must be stable across frames (\"{cat}\" in frame {first}, \"{}\" here)",
                        inst.category
                    ),
                )),
                Some(_) => {}
                None => {
                    categories.insert(inst.instance_id, (&inst.category, frame.frame_index));
                }
            }
        }
        prev = Some(frame);
    }
    out
}

/// Canonical JSON text of a twin.
pub fn serialize_twin(twin: &DigitalTwin) -> String {
    // plain data with string keys: serialization cannot fail
    to_canonical_string(twin).expect("twin serialization")
}

/// Parse and validate a twin document.
pub fn parse_twin(text: &str) -> Result<DigitalTwin, TwinParseError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| TwinParseError::Malformed(e.to_string()))?;
    let twin: DigitalTwin = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        match missing_field_name(&msg) {
            Some(field) => TwinParseError::MissingField(field),
            None => TwinParseError::Schema(msg),
        }
    })?;
    let violations = validate_twin(&twin);
    if violations.is_empty() {
        Ok(twin)
    } else {
        Err(TwinParseError::Invalid(violations))
    }
}

fn missing_field_name(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next().map(str::to_owned)
}

/// Per-track aggregate over all frames where the instance appears.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSummary {
    pub instance_id: u64,
    pub category: String,
    /// Distinct attribute descriptors in order of first appearance.
    pub attributes: Vec<String>,
    pub mean: SpatialProps,
    pub frame_indices: Vec<u64>,
}

impl DigitalTwin {
    /// Distinct instance ids (tracks), ascending.
    pub fn track_ids(&self) -> Vec<u64> {
        let ids: BTreeSet<u64> = self
            .frames
            .iter()
            .flat_map(|f| f.instances.iter().map(|i| i.instance_id))
            .collect();
        ids.into_iter().collect()
    }

    pub fn has_track(&self, id: u64) -> bool {
        self.frames.iter().any(|f| f.instances.iter().any(|i| i.instance_id == id))
    }

    pub fn track(&self, id: u64) -> Option<TrackSummary> {
        let mut summary: Option<TrackSummary> = None;
        let (mut sx, mut sy, mut sd, mut ss) = (0.0, 0.0, 0.0, 0.0);
        for frame in &self.frames {
            for inst in frame.instances.iter().filter(|i| i.instance_id == id) {
                let s = summary.get_or_insert_with(|| TrackSummary {
                    instance_id: id,
                    category: inst.category.clone(),
                    attributes: Vec::new(),
                    mean: inst.spatial,
                    frame_indices: Vec::new(),
                });
                for a in &inst.attributes {
                    if !s.attributes.contains(a) {
                        s.attributes.push(a.clone());
                    }
                }
                s.frame_indices.push(frame.frame_index);
                sx += inst.spatial.x;
                sy += inst.spatial.y;
                sd += inst.spatial.depth;
                ss += inst.spatial.size;
            }
        }
        summary.map(|mut s| {
            let n = s.frame_indices.len() as f64;
            s.mean = SpatialProps::new(sx / n, sy / n, sd / n, ss / n);
            s
        })
    }

    pub fn tracks(&self) -> Vec<TrackSummary> {
        self.track_ids().into_iter().filter_map(|id| self.track(id)).collect()
    }

    /// Frames sorted by `frame_index`, whatever the storage order.
    pub fn frames_in_order(&self) -> Vec<&FrameRecord> {
        let mut frames: Vec<&FrameRecord> = self.frames.iter().collect();
        frames.sort_by_key(|f| f.frame_index);
        frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn inst(id: u64, cat: &str, x: f64) -> InstanceRecord {
        InstanceRecord {
            instance_id: id,
            category: cat.into(),
            attributes: vec!["orange".into()],
            mask_ref: format!("v/{id}_0.rle"),
            spatial: SpatialProps::new(x, 0.5, 0.2, 0.01),
        }
    }

    fn two_frame() -> DigitalTwin {
        DigitalTwin {
            video_id: "v".into(),
            fps: 30.0,
            width: 64,
            height: 48,
            frames: vec![
                FrameRecord { frame_index: 0, timestamp_s: 0.0, instances: vec![inst(3, "cat", 0.1), inst(4, "table", 0.8)] },
                FrameRecord { frame_index: 1, timestamp_s: 0.5, instances: vec![inst(3, "cat", 0.2)] },
            ],
        }
    }

    #[test]
    fn well_formed_twin_has_no_violations() {
        assert!(validate_twin(&two_frame()).is_empty());
    }

    #[test]
    fn category_change_names_instance() {
        let mut t = two_frame();
        t.frames[1].instances[0].category = "dog".into();
        let v = validate_twin(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].instance_id, Some(3));
        assert_eq!(v[0].frame_index, Some(1));
        assert!(v[0].rule.contains("category"));
    }

    #[test]
    fn out_of_range_spatial() {
        let mut t = two_frame();
        t.frames[0].instances[0].spatial.x = 1.4;
        let v = validate_twin(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("spatial.x"), "{}", v[0]);
        assert_eq!(v[0].instance_id, Some(3));
    }

    #[test]
    fn frame_order_and_duplicates() {
        let mut t = two_frame();
        t.frames[1].frame_index = 0;
        t.frames[0].instances.push(inst(3, "cat", 0.3));
        let v = validate_twin(&t);
        assert!(v.iter().any(|v| v.rule.contains("strictly increasing")));
        assert!(v.iter().any(|v| v.rule.contains("unique within a frame")));
    }

    #[test]
    fn empty_twin_and_nan() {
        let mut t = two_frame();
        t.frames.clear();
        t.fps = f64::NAN;
        let v = validate_twin(&t);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn missing_field_and_malformed() {
        let text = serialize_twin(&two_frame());
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value.as_object_mut().unwrap().remove("video_id");
        match parse_twin(&value.to_string()) {
            Err(TwinParseError::MissingField(f)) => assert_eq!(f, "video_id"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_twin("{\"video_id\":"), Err(TwinParseError::Malformed(_))));
        assert!(matches!(
            parse_twin(&text.replace("\"fps\":30.0", "\"fps\":\"fast\"")),
            Err(TwinParseError::Schema(_))
        ));
        assert!(matches!(
            parse_twin(&text.replace("\"fps\":30.0", "\"fps\":-1.0")),
            Err(TwinParseError::Invalid(_))
        ));
    }

    #[test]
    fn round_trip_and_canonical_bytes() {
        let t = two_frame();
        let text = serialize_twin(&t);
        let back = parse_twin(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(serialize_twin(&back), text);
    }

    #[test]
    fn track_summary_means() {
        let t = two_frame();
        assert_eq!(t.track_ids(), vec![3, 4]);
        let s = t.track(3).unwrap();
        assert!((s.mean.x - 0.15).abs() < 1e-12);
        assert_eq!(s.frame_indices, vec![0, 1]);
        assert_eq!(s.attributes, vec!["orange".to_string()]);
        assert!(t.track(9).is_none());
    }
}
