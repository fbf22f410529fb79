//! Benchmark corpus layout, loading, and a seeded synthetic generator.
//!
//! Layout under a benchmark root:
//!
//! ```text
//! manifest.json
//! queries.json
//! twins/<video_id>.json
//! masks/<video_id>/<instance>_<frame>.rle
//! fixtures/decompositions/<query key>.json
//! fixtures/reasoner/<query key>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::decomposer::{SubQuery, SubQueryKind};
use crate::llm::{FixtureLlmClient, ReasonerFixture};
use crate::mask::{read_mask_file, write_mask_file, MaskBitmap, MaskError};
use crate::relations::{extract_relations, Predicate, RelationConfig, RelationTuple};
use crate::twin::{parse_twin, serialize_twin, DigitalTwin, FrameRecord, InstanceRecord, SpatialProps, TwinParseError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: String,
    pub text: String,
    pub gt_video_id: String,
    pub gt_object_ids: Vec<u64>,
    /// Decomposition fixture path relative to the benchmark root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<String>,
}

/// `manifest.json` as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub twin_dir: String,
    pub mask_dir: String,
    pub queries_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures_dir: Option<String>,
    /// Declared corpus size, checked against the directory when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_videos: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_queries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub file: ManifestFile,
    pub queries: Vec<QueryEntry>,
}

/// A loaded, validated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub root: PathBuf,
    pub manifest: BenchmarkManifest,
    pub twins: BTreeMap<String, DigitalTwin>,
}

impl Benchmark {
    pub fn mask_dir(&self) -> PathBuf {
        self.root.join(&self.manifest.file.mask_dir)
    }

    pub fn fixtures_dir(&self) -> Option<PathBuf> {
        self.manifest.file.fixtures_dir.as_ref().map(|d| self.root.join(d))
    }

    pub fn read_mask(&self, mask_ref: &str) -> Result<MaskBitmap, MaskError> {
        read_mask_file(&self.mask_dir().join(mask_ref))
    }

    /// Ground-truth masks of a query keyed by `(object_id, frame_index)`.
    pub fn gt_masks(&self, query: &QueryEntry) -> Result<BTreeMap<(u64, u64), MaskBitmap>, MaskError> {
        let mut out = BTreeMap::new();
        let Some(twin) = self.twins.get(&query.gt_video_id) else { return Ok(out) };
        for frame in twin.frames_in_order() {
            for inst in frame.instances.iter().filter(|i| query.gt_object_ids.contains(&i.instance_id)) {
                out.insert((inst.instance_id, frame.frame_index), self.read_mask(&inst.mask_ref)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: malformed: {message}")]
    Malformed { path: String, message: String },
    #[error("twin {path}: {source}")]
    Twin { path: String, source: TwinParseError },
    #[error("twin file {path} holds video {video_id}")]
    TwinName { path: String, video_id: String },
    #[error("query {query_id} references missing video {video_id}")]
    MissingTwin { query_id: String, video_id: String },
    #[error("query {query_id} references object {object_id} absent from video {video_id}")]
    DanglingObject { query_id: String, video_id: String, object_id: u64 },
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error("query {0} has no ground-truth objects")]
    NoObjects(String),
    #[error("manifest declares {declared} {what}, directory holds {found}")]
    CountMismatch { what: &'static str, declared: usize, found: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("no unique query combinations after {attempts} attempts; vocabulary too small")]
    VocabularyTooSmall { attempts: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |e| BenchError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| BenchError::Malformed { path: path.display().to_string(), message: e.to_string() })
}

/// Load and validate a benchmark. Never writes.
pub fn load_benchmark(root: &Path) -> Result<Benchmark, BenchError> {
    let file: ManifestFile = read_json(&root.join(MANIFEST_FILE))?;
    let queries: Vec<QueryEntry> = read_json(&root.join(&file.queries_file))?;

    let twin_dir = root.join(&file.twin_dir);
    let mut paths: Vec<PathBuf> = fs::read_dir(&twin_dir)
        .map_err(io_err(&twin_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut twins = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let twin = parse_twin(&text).map_err(|source| BenchError::Twin { path: path.display().to_string(), source })?;
        if path.file_stem().and_then(|s| s.to_str()) != Some(twin.video_id.as_str()) {
            return Err(BenchError::TwinName { path: path.display().to_string(), video_id: twin.video_id });
        }
        twins.insert(twin.video_id.clone(), twin);
    }

    let mut seen = BTreeSet::new();
    for q in &queries {
        if !seen.insert(q.query_id.as_str()) {
            return Err(BenchError::DuplicateQuery(q.query_id.clone()));
        }
        let twin = twins
            .get(&q.gt_video_id)
            .ok_or_else(|| BenchError::MissingTwin { query_id: q.query_id.clone(), video_id: q.gt_video_id.clone() })?;
        if q.gt_object_ids.is_empty() {
            return Err(BenchError::NoObjects(q.query_id.clone()));
        }
        if let Some(&object_id) = q.gt_object_ids.iter().find(|id| !twin.has_track(**id)) {
            return Err(BenchError::DanglingObject { query_id: q.query_id.clone(), video_id: q.gt_video_id.clone(), object_id });
        }
    }
    if let Some(declared) = file.expected_videos {
        if declared != twins.len() {
            return Err(BenchError::CountMismatch { what: "videos", declared, found: twins.len() });
        }
    }
    if let Some(declared) = file.expected_queries {
        if declared != queries.len() {
            return Err(BenchError::CountMismatch { what: "queries", declared, found: queries.len() });
        }
    }
    Ok(Benchmark { root: root.to_owned(), manifest: BenchmarkManifest { file, queries }, twins })
}

/// The defining content of a synthetic query: an attributed subject related
/// to an object by a static predicate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub category: String,
    pub attribute: String,
    pub predicate: Predicate,
    pub object_category: String,
}

impl Combination {
    /// Subject track ids of `twin` satisfying this combination.
    pub fn satisfying_subjects(&self, twin: &DigitalTwin, relations: &[RelationTuple]) -> BTreeSet<u64> {
        let tracks: BTreeMap<u64, _> = twin.tracks().into_iter().map(|t| (t.instance_id, t)).collect();
        relations
            .iter()
            .filter(|r| r.predicate == self.predicate)
            .filter(|r| {
                let (s, o) = (&tracks[&r.subject_id], &tracks[&r.object_id]);
                s.category == self.category && s.attributes.contains(&self.attribute) && o.category == self.object_category
            })
            .map(|r| r.subject_id)
            .collect()
    }
}

pub const QUERY_PREDICATES: [Predicate; 6] =
    [Predicate::LeftOf, Predicate::RightOf, Predicate::Above, Predicate::Below, Predicate::InFrontOf, Predicate::Behind];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub videos: usize,
    pub distractors: usize,
    pub queries: usize,
    pub min_tracks: usize,
    pub max_tracks: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            seed: 7,
            videos: 20,
            distractors: 10,
            queries: 10,
            min_tracks: 3,
            max_tracks: 5,
            frames: 4,
            width: 64,
            height: 48,
            categories: words(&["dog", "cat", "horse", "bird", "car", "bicycle", "person", "ball", "chair", "umbrella", "bottle", "kite"]),
            attributes: words(&["red", "blue", "green", "yellow", "white", "black", "striped", "spotted"]),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.into()));
        if self.videos == 0 || self.queries == 0 || self.frames == 0 {
            return bad("videos, queries and frames must be positive");
        }
        if self.distractors >= self.videos {
            return bad("at least one video must be a query target");
        }
        if self.min_tracks < 2 || self.max_tracks < self.min_tracks {
            return bad("track range must satisfy 2 <= min_tracks <= max_tracks");
        }
        if self.width < 8 || self.height < 8 {
            return bad("frames must be at least 8x8 pixels");
        }
        if self.categories.len() < 2 || self.attributes.is_empty() {
            return bad("need at least two categories and one attribute");
        }
        Ok(())
    }

    fn targets(&self) -> usize {
        self.videos - self.distractors
    }
}

/// Summary of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBenchmark {
    pub root: PathBuf,
    pub queries: Vec<(QueryEntry, Combination)>,
    pub distractors: Vec<String>,
}

const TEMPLATES: [&str; 4] = [
    "Find the clip where a {attr} {cat} is {rel} a {obj}.",
    "Which video shows some {attr} {cat} {rel} a {obj}?",
    "I remember a scene with a {attr} {cat} that was {rel} a {obj}; which one was it?",
    "Show me the footage in which the {attr} {cat} appears {rel} the {obj}.",
];

struct Track {
    id: u64,
    category: String,
    attributes: Vec<String>,
    pos: SpatialProps,
}

struct Draft {
    video_id: String,
    tracks: Vec<Track>,
    next_id: u64,
}

fn random_pos(rng: &mut ChaCha8Rng) -> SpatialProps {
    SpatialProps::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.95), rng.gen_range(0.01..0.06))
}

/// Subject and object positions separated along the predicate's axis.
fn planted_pair(rng: &mut ChaCha8Rng, p: Predicate) -> (SpatialProps, SpatialProps) {
    let lo = rng.gen_range(0.1..0.35);
    let hi = rng.gen_range(0.65..0.9);
    let (mut s, mut o) = (random_pos(rng), random_pos(rng));
    match p {
        Predicate::LeftOf => (s.x, o.x) = (lo, hi),
        Predicate::RightOf => (s.x, o.x) = (hi, lo),
        Predicate::Above => (s.y, o.y) = (lo, hi),
        Predicate::Below => (s.y, o.y) = (hi, lo),
        Predicate::InFrontOf => (s.depth, o.depth) = (lo, hi),
        Predicate::Behind => (s.depth, o.depth) = (hi, lo),
        _ => unreachable!("only static axis predicates are planted"),
    }
    (s, o)
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [String]) -> &'a String {
    items.choose(rng).expect("non-empty vocabulary")
}

fn instance_mask(spec: &SyntheticSpec, pos: &SpatialProps) -> MaskBitmap {
    let (w, h) = (f64::from(spec.width), f64::from(spec.height));
    let side_x = (pos.size * w * h).sqrt().max(2.0);
    let side_y = side_x;
    let cx = pos.x * w;
    let cy = pos.y * h;
    let clamp = |v: f64, max: u32| v.round().clamp(0.0, f64::from(max)) as u32;
    MaskBitmap::rect(
        spec.width,
        spec.height,
        clamp(cx - side_x / 2.0, spec.width),
        clamp(cy - side_y / 2.0, spec.height),
        clamp(cx + side_x / 2.0, spec.width),
        clamp(cy + side_y / 2.0, spec.height),
    )
    .expect("dimensions validated")
}

fn draft_to_twin(spec: &SyntheticSpec, draft: &Draft) -> DigitalTwin {
    let fps = 2.0;
    let frames = (0..spec.frames as u64)
        .map(|f| FrameRecord {
            frame_index: f,
            timestamp_s: f as f64 / fps,
            instances: draft
                .tracks
                .iter()
                .map(|t| InstanceRecord {
                    instance_id: t.id,
                    category: t.category.clone(),
                    attributes: t.attributes.clone(),
                    mask_ref: format!("{}/{}_{}.rle", draft.video_id, t.id, f),
                    spatial: t.pos,
                })
                .collect(),
        })
        .collect();
    DigitalTwin { video_id: draft.video_id.clone(), fps, width: spec.width, height: spec.height, frames }
}

struct Plan {
    twins: Vec<DigitalTwin>,
    queries: Vec<(QueryEntry, Combination)>,
    distractors: Vec<String>,
    refine_first: Vec<bool>,
}

fn attempt(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Plan> {
    let mut order: Vec<usize> = (0..spec.videos).collect();
    order.shuffle(rng);
    let target_slots: Vec<usize> = order[..spec.targets()].to_vec();
    let mut drafts: Vec<Draft> = (0..spec.videos)
        .map(|i| Draft { video_id: format!("syn-{i:04}"), tracks: Vec::new(), next_id: 1 })
        .collect();

    // plant one combination per query into its target video
    let mut combos = Vec::new();
    for q in 0..spec.queries {
        let slot = target_slots[q % target_slots.len()];
        let category = pick(rng, &spec.categories).clone();
        let object_category = loop {
            let c = pick(rng, &spec.categories);
            if *c != category {
                break c.clone();
            }
        };
        let combo = Combination {
            attribute: pick(rng, &spec.attributes).clone(),
            predicate: *QUERY_PREDICATES.choose(rng).expect("non-empty"),
            category,
            object_category,
        };
        let (sp, op) = planted_pair(rng, combo.predicate);
        let d = &mut drafts[slot];
        let (sid, oid) = (d.next_id, d.next_id + 1);
        d.next_id += 2;
        d.tracks.push(Track { id: sid, category: combo.category.clone(), attributes: vec![combo.attribute.clone()], pos: sp });
        d.tracks.push(Track { id: oid, category: combo.object_category.clone(), attributes: Vec::new(), pos: op });
        combos.push((slot, sid, oid, combo));
    }

    // fill every video with vocabulary-sharing tracks
    for d in &mut drafts {
        let want = rng.gen_range(spec.min_tracks..=spec.max_tracks).max(d.tracks.len());
        while d.tracks.len() < want {
            let n_attr = rng.gen_range(0..=2usize.min(spec.attributes.len()));
            let mut attributes: Vec<String> = spec.attributes.choose_multiple(rng, n_attr).cloned().collect();
            attributes.sort();
            let id = d.next_id;
            d.next_id += 1;
            d.tracks.push(Track { id, category: pick(rng, &spec.categories).clone(), attributes, pos: random_pos(rng) });
        }
        d.tracks.sort_by_key(|t| t.id);
    }

    let twins: Vec<DigitalTwin> = drafts.iter().map(|d| draft_to_twin(spec, d)).collect();
    let cfg = RelationConfig::default();
    let relations: Vec<Vec<RelationTuple>> = twins.iter().map(|t| extract_relations(t, &cfg)).collect();

    // uniqueness: each combination is satisfied by its own video and subject only
    let mut queries = Vec::new();
    let mut refine_first = Vec::new();
    for (q, (slot, sid, _oid, combo)) in combos.iter().enumerate() {
        for (i, twin) in twins.iter().enumerate() {
            let subjects = combo.satisfying_subjects(twin, &relations[i]);
            let expected: BTreeSet<u64> = if i == *slot { [*sid].into() } else { BTreeSet::new() };
            if subjects != expected {
                return None;
            }
        }
        let text = TEMPLATES[rng.gen_range(0..TEMPLATES.len())]
            .replace("{attr}", &combo.attribute)
            .replace("{cat}", &combo.category)
            .replace("{rel}", combo.predicate.words())
            .replace("{obj}", &combo.object_category);
        queries.push((
            QueryEntry {
                query_id: format!("q{q:04}"),
                text,
                gt_video_id: twins[*slot].video_id.clone(),
                gt_object_ids: vec![*sid],
                decomposition: None,
            },
            combo.clone(),
        ));
        refine_first.push(rng.gen_bool(0.5));
    }
    let distractors = order[spec.targets()..].iter().map(|&i| twins[i].video_id.clone()).collect();
    Some(Plan { twins, queries, distractors, refine_first })
}

fn write(path: &Path, text: &str) -> Result<(), BenchError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Fixture sub-queries for a combination: the attributed subject and the
/// relation, phrased like the index renders them.
pub fn combination_subqueries(c: &Combination) -> Vec<SubQuery> {
    vec![
        SubQuery::new(format!("{} {}", c.attribute, c.category), SubQueryKind::Attribute),
        SubQuery::new(format!("{} {} {}", c.category, c.predicate.words(), c.object_category), SubQueryKind::Spatial),
    ]
}

/// Write a synthetic benchmark under `root`. Output depends only on `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<GeneratedBenchmark, BenchError> {
    const ATTEMPTS: usize = 200;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut plan = (0..ATTEMPTS).find_map(|_| attempt(spec, &mut rng)).ok_or(BenchError::VocabularyTooSmall { attempts: ATTEMPTS })?;

    let fixtures = root.join("fixtures");
    for twin in &plan.twins {
        write(&root.join("twins").join(format!("{}.json", twin.video_id)), &(serialize_twin(twin) + "\n"))?;
        for frame in &twin.frames {
            for inst in &frame.instances {
                write_mask_file(&root.join("masks").join(&inst.mask_ref), &instance_mask(spec, &inst.spatial))?;
            }
        }
    }

    for ((entry, combo), refine_first) in plan.queries.iter_mut().zip(&plan.refine_first) {
        let dpath = FixtureLlmClient::decomposition_path(&fixtures, &entry.text);
        let subqueries = combination_subqueries(combo);
        write(&dpath, &(to_canonical_string(&subqueries).expect("sub-queries serialize") + "\n"))?;
        entry.decomposition = Some(relative(root, &dpath));

        let subject = entry.gt_object_ids[0];
        let mut videos = BTreeMap::new();
        for twin in &plan.twins {
            let turns = if twin.video_id == entry.gt_video_id {
                let verdict = serde_json::json!({
                    "action": "verdict",
                    "verdict": {
                        "relevance": 1.0,
                        "trace": format!("instance {subject} is a {} {} {} a {}", combo.attribute, combo.category, combo.predicate.words(), combo.object_category),
                        "object_ids": [subject],
                    }
                });
                if *refine_first {
                    let refine = serde_json::json!({
                        "action": "refine",
                        "plan": {"calls": [{"tool": "captioner", "instance_ids": [subject], "params": {}}]}
                    });
                    vec![refine, verdict]
                } else {
                    vec![verdict]
                }
            } else {
                vec![serde_json::json!({
                    "action": "verdict",
                    "verdict": {
                        "relevance": 0.1,
                        "trace": format!("no {} {} is {} a {}", combo.attribute, combo.category, combo.predicate.words(), combo.object_category),
                        "object_ids": [],
                    }
                })]
            };
            videos.insert(twin.video_id.clone(), turns);
        }
        let fixture = ReasonerFixture { query: entry.text.clone(), videos };
        write(&FixtureLlmClient::reasoner_path(&fixtures, &entry.text), &(to_canonical_string(&fixture).expect("fixture serializes") + "\n"))?;
    }

    let entries: Vec<&QueryEntry> = plan.queries.iter().map(|(q, _)| q).collect();
    write(&root.join("queries.json"), &(to_canonical_string(&entries).expect("queries serialize") + "\n"))?;
    let manifest = ManifestFile {
        name: format!("synthetic-seed{}", spec.seed),
        twin_dir: "twins".into(),
        mask_dir: "masks".into(),
        queries_file: "queries.json".into(),
        fixtures_dir: Some("fixtures".into()),
        expected_videos: Some(spec.videos),
        expected_queries: Some(spec.queries),
    };
    write(&root.join(MANIFEST_FILE), &(to_canonical_string(&manifest).expect("manifest serializes") + "\n"))?;
    Ok(GeneratedBenchmark { root: root.to_owned(), queries: plan.queries, distractors: plan.distractors })
}
