//! Pairwise relation tuples derived from the spatial properties of
//! co-occurring tracks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::twin::{DigitalTwin, SpatialProps};

/// Closed predicate vocabulary. Variants are declared in name order so the
/// derived `Ord` sorts tuples alphabetically by predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Above,
    Approaching,
    Behind,
    Below,
    InFrontOf,
    LargerThan,
    LeftOf,
    Near,
    Receding,
    RightOf,
}

impl Predicate {
    pub const ALL: [Predicate; 10] = [
        Predicate::Above,
        Predicate::Approaching,
        Predicate::Behind,
        Predicate::Below,
        Predicate::InFrontOf,
        Predicate::LargerThan,
        Predicate::LeftOf,
        Predicate::Near,
        Predicate::Receding,
        Predicate::RightOf,
    ];

    /// Predicates evaluated per frame and lifted by support.
    pub const STATIC: [Predicate; 8] = [
        Predicate::Above,
        Predicate::Behind,
        Predicate::Below,
        Predicate::InFrontOf,
        Predicate::LargerThan,
        Predicate::LeftOf,
        Predicate::Near,
        Predicate::RightOf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Predicate::Above => "above",
            Predicate::Approaching => "approaching",
            Predicate::Behind => "behind",
            Predicate::Below => "below",
            Predicate::InFrontOf => "in_front_of",
            Predicate::LargerThan => "larger_than",
            Predicate::LeftOf => "left_of",
            Predicate::Near => "near",
            Predicate::Receding => "receding",
            Predicate::RightOf => "right_of",
        }
    }

    /// Natural-language rendering used in relation component text.
    pub fn words(self) -> &'static str {
        match self {
            Predicate::Above => "above",
            Predicate::Approaching => "approaching",
            Predicate::Behind => "behind",
            Predicate::Below => "below",
            Predicate::InFrontOf => "in front of",
            Predicate::LargerThan => "larger than",
            Predicate::LeftOf => "to the left of",
            Predicate::Near => "near",
            Predicate::Receding => "moving away from",
            Predicate::RightOf => "to the right of",
        }
    }

    pub fn parse(s: &str) -> Option<Predicate> {
        Predicate::ALL.into_iter().find(|p| p.as_str() == s)
    }

    /// Whether the predicate holds for subject `a` and object `b` in one frame.
    /// Motion predicates are never true per frame.
    pub fn holds(self, a: &SpatialProps, b: &SpatialProps, cfg: &RelationConfig) -> bool {
        match self {
            Predicate::LeftOf => a.x + cfg.axis_margin < b.x,
            Predicate::RightOf => a.x > b.x + cfg.axis_margin,
            Predicate::Above => a.y + cfg.axis_margin < b.y,
            Predicate::Below => a.y > b.y + cfg.axis_margin,
            Predicate::InFrontOf => a.depth + cfg.depth_margin < b.depth,
            Predicate::Behind => a.depth > b.depth + cfg.depth_margin,
            Predicate::Near => centroid_distance(a, b) < cfg.near_radius,
            Predicate::LargerThan => a.size > cfg.size_ratio * b.size,
            Predicate::Approaching | Predicate::Receding => false,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn centroid_distance(a: &SpatialProps, b: &SpatialProps) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTuple {
    pub subject_id: u64,
    pub object_id: u64,
    pub predicate: Predicate,
    /// Fraction of co-occurring frames where a static predicate held; 1 for
    /// motion predicates, which are decided once per pair.
    pub support: f64,
}

impl RelationTuple {
    /// `subject:predicate:object`, the component key used in the index.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.subject_id, self.predicate, self.object_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub axis_margin: f64,
    pub depth_margin: f64,
    pub near_radius: f64,
    pub size_ratio: f64,
    pub support_threshold: f64,
    pub motion_delta: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            axis_margin: 0.05,
            depth_margin: 0.05,
            near_radius: 0.2,
            size_ratio: 1.5,
            support_threshold: 0.5,
            motion_delta: 0.1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid relation config: {0}")]
pub struct RelationConfigError(pub String);

impl RelationConfig {
    pub fn validate(&self) -> Result<(), RelationConfigError> {
        let fields = [
            ("axis_margin", self.axis_margin),
            ("depth_margin", self.depth_margin),
            ("near_radius", self.near_radius),
            ("size_ratio", self.size_ratio),
            ("support_threshold", self.support_threshold),
            ("motion_delta", self.motion_delta),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(RelationConfigError(format!("{name} must be positive (got {v})")));
            }
        }
        if self.support_threshold > 1.0 {
            return Err(RelationConfigError("support_threshold must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Derive relation tuples for every ordered pair of co-occurring tracks.
///
/// Output is sorted by `(subject_id, object_id, predicate)`.
pub fn extract_relations(twin: &DigitalTwin, cfg: &RelationConfig) -> Vec<RelationTuple> {
    // per pair: spatial props in frame order for every co-occurring frame
    let mut pairs: BTreeMap<(u64, u64), Vec<(SpatialProps, SpatialProps)>> = BTreeMap::new();
    for frame in twin.frames_in_order() {
        for a in &frame.instances {
            for b in &frame.instances {
                if a.instance_id != b.instance_id {
                    pairs.entry((a.instance_id, b.instance_id)).or_default().push((a.spatial, b.spatial));
                }
            }
        }
    }

    let mut out = Vec::new();
    for ((subject_id, object_id), frames) in pairs {
        let n = frames.len() as f64;
        for predicate in Predicate::STATIC {
            let held = frames.iter().filter(|(a, b)| predicate.holds(a, b, cfg)).count();
            let support = held as f64 / n;
            if held > 0 && support >= cfg.support_threshold {
                out.push(RelationTuple { subject_id, object_id, predicate, support });
            }
        }
        let (first, last) = (&frames[0], &frames[frames.len() - 1]);
        let d0 = centroid_distance(&first.0, &first.1);
        let d1 = centroid_distance(&last.0, &last.1);
        if d1 < d0 - cfg.motion_delta {
            out.push(RelationTuple { subject_id, object_id, predicate: Predicate::Approaching, support: 1.0 });
        }
        if d1 > d0 + cfg.motion_delta {
            out.push(RelationTuple { subject_id, object_id, predicate: Predicate::Receding, support: 1.0 });
        }
    }
    out.sort_by(|a, b| (a.subject_id, a.object_id, a.predicate).cmp(&(b.subject_id, b.object_id, b.predicate)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twin::{FrameRecord, InstanceRecord};
    use proptest::prelude::*;

    fn inst(id: u64, cat: &str, s: SpatialProps) -> InstanceRecord {
        InstanceRecord { instance_id: id, category: cat.into(), attributes: vec![], mask_ref: format!("{id}.rle"), spatial: s }
    }

    fn twin(frames: Vec<Vec<InstanceRecord>>) -> DigitalTwin {
        DigitalTwin {
            video_id: "v".into(),
            fps: 10.0,
            width: 32,
            height: 32,
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(i, instances)| FrameRecord { frame_index: i as u64, timestamp_s: i as f64 * 0.1, instances })
                .collect(),
        }
    }

    #[test]
    fn static_left_right() {
        let frames = (0..3)
            .map(|_| vec![inst(1, "cat", SpatialProps::new(0.2, 0.5, 0.5, 0.1)), inst(2, "table", SpatialProps::new(0.8, 0.5, 0.5, 0.1))])
            .collect();
        let rels = extract_relations(&twin(frames), &RelationConfig::default());
        let got: Vec<(u64, u64, Predicate, f64)> = rels.iter().map(|r| (r.subject_id, r.object_id, r.predicate, r.support)).collect();
        assert_eq!(got, vec![(1, 2, Predicate::LeftOf, 1.0), (2, 1, Predicate::RightOf, 1.0)]);
    }

    #[test]
    fn approaching_pair() {
        let frames = vec![
            vec![inst(1, "dog", SpatialProps::new(0.2, 0.5, 0.5, 0.1)), inst(2, "ball", SpatialProps::new(0.8, 0.5, 0.5, 0.1))],
            vec![inst(1, "dog", SpatialProps::new(0.35, 0.5, 0.5, 0.1)), inst(2, "ball", SpatialProps::new(0.8, 0.5, 0.5, 0.1))],
            vec![inst(1, "dog", SpatialProps::new(0.5, 0.5, 0.5, 0.1)), inst(2, "ball", SpatialProps::new(0.8, 0.5, 0.5, 0.1))],
        ];
        let rels = extract_relations(&twin(frames), &RelationConfig::default());
        assert!(rels.iter().any(|r| r.subject_id == 1 && r.object_id == 2 && r.predicate == Predicate::Approaching));
        assert!(rels.iter().any(|r| r.subject_id == 2 && r.object_id == 1 && r.predicate == Predicate::Approaching));
        assert!(!rels.iter().any(|r| r.predicate == Predicate::Receding));
    }

    /// Exhaustive oracle: re-evaluate every pair, frame and predicate with
    /// explicit per-frame lookups instead of the pair accumulation.
    fn oracle(t: &DigitalTwin, cfg: &RelationConfig) -> Vec<(u64, u64, String, f64)> {
        let ids = t.track_ids();
        let mut frames: Vec<_> = t.frames.iter().collect();
        frames.sort_by_key(|f| f.frame_index);
        let mut out = Vec::new();
        for &a in &ids {
            for &b in &ids {
                if a == b {
                    continue;
                }
                let co: Vec<_> = frames
                    .iter()
                    .filter_map(|f| {
                        let sa = f.instances.iter().find(|i| i.instance_id == a)?;
                        let sb = f.instances.iter().find(|i| i.instance_id == b)?;
                        Some((sa.spatial, sb.spatial))
                    })
                    .collect();
                if co.is_empty() {
                    continue;
                }
                for name in ["left_of", "right_of", "above", "below", "in_front_of", "behind", "near", "larger_than"] {
                    let held = co
                        .iter()
                        .filter(|(p, q)| match name {
                            "left_of" => p.x + cfg.axis_margin < q.x,
                            "right_of" => q.x + cfg.axis_margin < p.x,
                            "above" => p.y + cfg.axis_margin < q.y,
                            "below" => q.y + cfg.axis_margin < p.y,
                            "in_front_of" => p.depth + cfg.depth_margin < q.depth,
                            "behind" => q.depth + cfg.depth_margin < p.depth,
                            "near" => ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() < cfg.near_radius,
                            _ => p.size > cfg.size_ratio * q.size,
                        })
                        .count();
                    let s = held as f64 / co.len() as f64;
                    if held > 0 && s >= cfg.support_threshold {
                        out.push((a, b, name.to_string(), s));
                    }
                }
                let dist = |(p, q): &(SpatialProps, SpatialProps)| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                let (d0, d1) = (dist(&co[0]), dist(&co[co.len() - 1]));
                if d1 < d0 - cfg.motion_delta {
                    out.push((a, b, "approaching".into(), 1.0));
                }
                if d1 > d0 + cfg.motion_delta {
                    out.push((a, b, "receding".into(), 1.0));
                }
            }
        }
        out.sort_by(|x, y| (x.0, x.1, &x.2).cmp(&(y.0, y.1, &y.2)));
        out
    }

    #[test]
    fn three_track_mixed_scene_matches_oracle() {
        let s = SpatialProps::new;
        let frames = vec![
            vec![inst(1, "cat", s(0.1, 0.2, 0.1, 0.30)), inst(2, "dog", s(0.5, 0.5, 0.5, 0.10)), inst(3, "ball", s(0.9, 0.9, 0.9, 0.02))],
            vec![inst(1, "cat", s(0.6, 0.2, 0.1, 0.30)), inst(2, "dog", s(0.5, 0.55, 0.6, 0.10))],
            vec![inst(1, "cat", s(0.45, 0.45, 0.7, 0.05)), inst(2, "dog", s(0.5, 0.5, 0.5, 0.10)), inst(3, "ball", s(0.55, 0.5, 0.4, 0.02))],
            vec![inst(2, "dog", s(0.2, 0.5, 0.5, 0.10)), inst(3, "ball", s(0.3, 0.5, 0.45, 0.02))],
        ];
        let t = twin(frames);
        let cfg = RelationConfig::default();
        let got: Vec<(u64, u64, String, f64)> =
            extract_relations(&t, &cfg).into_iter().map(|r| (r.subject_id, r.object_id, r.predicate.to_string(), r.support)).collect();
        let want = oracle(&t, &cfg);
        assert!(!want.is_empty());
        assert!(want.iter().any(|r| r.3 < 1.0), "fixture should have partial support");
        assert_eq!(got, want);
    }

    #[test]
    fn vocabulary_round_trip() {
        for p in Predicate::ALL {
            assert_eq!(Predicate::parse(p.as_str()), Some(p));
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.as_str()));
        }
        let mut sorted = Predicate::ALL.map(|p| p.as_str());
        sorted.sort();
        assert_eq!(sorted, Predicate::ALL.map(|p| p.as_str()));
    }

    #[test]
    fn config_validation() {
        assert!(RelationConfig::default().validate().is_ok());
        let cfg = RelationConfig { support_threshold: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = RelationConfig { near_radius: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    fn grid() -> impl Strategy<Value = f64> {
        (0u32..=64).prop_map(|k| k as f64 / 64.0)
    }

    fn scene() -> impl Strategy<Value = DigitalTwin> {
        let props = (grid(), grid(), grid(), grid()).prop_map(|(x, y, d, s)| SpatialProps::new(x, y, d, s));
        proptest::collection::vec(proptest::collection::vec((any::<bool>(), props), 3), 1..5).prop_map(|frames| {
            twin(
                frames
                    .into_iter()
                    .map(|f| {
                        f.into_iter()
                            .enumerate()
                            .filter(|(_, (present, _))| *present)
                            .map(|(i, (_, s))| inst(i as u64, "obj", s))
                            .collect()
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn antisymmetry(t in scene()) {
            let rels = extract_relations(&t, &RelationConfig::default());
            let pairs = [(Predicate::LeftOf, Predicate::RightOf), (Predicate::Above, Predicate::Below), (Predicate::InFrontOf, Predicate::Behind)];
            for r in &rels {
                for (p, q) in pairs {
                    for (from, to) in [(p, q), (q, p)] {
                        if r.predicate == from {
                            prop_assert!(rels.iter().any(|o| o.subject_id == r.object_id && o.object_id == r.subject_id && o.predicate == to && o.support == r.support));
                        }
                    }
                }
            }
        }

        #[test]
        fn mirroring_swaps_left_right_only(t in scene()) {
            let cfg = RelationConfig::default();
            let mut mirrored = t.clone();
            for f in &mut mirrored.frames {
                for i in &mut f.instances {
                    i.spatial.x = 1.0 - i.spatial.x;
                }
            }
            let swap = |p: Predicate| match p {
                Predicate::LeftOf => Predicate::RightOf,
                Predicate::RightOf => Predicate::LeftOf,
                other => other,
            };
            let mut expected: Vec<_> = extract_relations(&t, &cfg)
                .into_iter()
                .map(|r| RelationTuple { predicate: swap(r.predicate), ..r })
                .collect();
            expected.sort_by(|a, b| (a.subject_id, a.object_id, a.predicate).cmp(&(b.subject_id, b.object_id, b.predicate)));
            prop_assert_eq!(extract_relations(&mirrored, &cfg), expected);
        }

        #[test]
        fn storage_order_irrelevant(t in scene()) {
            let mut reversed = t.clone();
            reversed.frames.reverse();
            let cfg = RelationConfig::default();
            prop_assert_eq!(extract_relations(&t, &cfg), extract_relations(&reversed, &cfg));
        }
    }
}
