//! Track and scenario data model, map metadata, and CSV/JSON ingestion.
//!
//! All tracks live on a shared 5 fps grid: global frame `k` is time
//! `k * DT`. Ingestion downsamples higher input rates by keeping every
//! `fps_in / 5`-th frame and never re-derives kinematics from positions;
//! velocity and acceleration come straight from the file columns.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DualPathFrame, GeometryError, ReferencePath, SegmentKind};

/// Time step of the shared track grid [s].
pub const DT: f64 = 0.2;
/// Frame rate of the shared track grid [Hz].
pub const TARGET_FPS: u32 = 5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv row {row}: {msg}")]
    Ingest { row: usize, msg: String },
    #[error("track {id}: missing frame {missing} between {before} and {after}")]
    FrameGap {
        id: u64,
        missing: i64,
        before: i64,
        after: i64,
    },
    #[error("input rate {0} fps is not a positive multiple of {TARGET_FPS} fps")]
    BadInputRate(u32),
    #[error("map: {0}")]
    Map(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("scenario invalid: {0}")]
    InvalidScenario(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One sample of a recorded vehicle state on the 5 fps grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackFrame {
    pub pos: Point2<f64>,
    pub vel: Vector2<f64>,
    pub acc: Vector2<f64>,
    pub lane_id: i32,
}

/// A recorded vehicle: contiguous frames starting at `start_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub start_frame: i64,
    pub width: f64,
    pub length: f64,
    pub frames: Vec<TrackFrame>,
}

impl Track {
    /// First frame after the end of the track (exclusive).
    pub fn end_frame(&self) -> i64 {
        self.start_frame + self.frames.len() as i64
    }

    pub fn at(&self, global_frame: i64) -> Option<&TrackFrame> {
        let idx = global_frame - self.start_frame;
        if idx < 0 {
            return None;
        }
        self.frames.get(idx as usize)
    }

    pub fn covers(&self, first: i64, last: i64) -> bool {
        self.start_frame <= first && self.end_frame() > last
    }

    pub fn time_of(global_frame: i64) -> f64 {
        global_frame as f64 * DT
    }
}

/// All tracks of a recording or scenario, indexed by vehicle id.
#[derive(Debug, Clone, Default)]
pub struct TrackSet {
    tracks: Vec<Track>,
    by_id: HashMap<u64, usize>,
}

impl TrackSet {
    pub fn new(mut tracks: Vec<Track>) -> Self {
        tracks.sort_by_key(|t| t.id);
        let by_id = tracks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id, i))
            .collect();
        Self { tracks, by_id }
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.by_id.get(&id).map(|&i| &self.tracks[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Vehicles that have a sample at `global_frame`.
    pub fn present_at(&self, global_frame: i64) -> impl Iterator<Item = (&Track, &TrackFrame)> {
        self.tracks
            .iter()
            .filter_map(move |t| t.at(global_frame).map(|f| (t, f)))
    }
}

/// Lane taxonomy: crossings are anticipated into/from `Normal`, expected
/// into `ExpectMerging`, expected from `Merge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    NoLane,
    Normal,
    ExpectMerging,
    Merge,
}

impl LaneKind {
    pub fn code(self) -> u8 {
        match self {
            LaneKind::NoLane => 0,
            LaneKind::Normal => 1,
            LaneKind::ExpectMerging => 2,
            LaneKind::Merge => 3,
        }
    }
}

/// Maps a recording's `lane_id` to its role and geometric slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneDef {
    pub id: i32,
    pub kind: LaneKind,
    /// Index within the main carriageway, 0 = rightmost lane. `None` for
    /// the slip lane.
    pub main_index: Option<usize>,
}

/// On-disk map schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub lane_width: f64,
    pub nominal_speed: f64,
    pub main: PathSpec,
    pub slip: PathSpec,
    pub lanes: Vec<LaneDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSpec {
    pub points: Vec<[f64; 2]>,
    pub corridor_half_width: f64,
    /// Raw arc-length range where vehicles may associate with this path;
    /// lets a slip path extend past the merge point as a pure reference.
    #[serde(default)]
    pub corridor_extent: Option<(f64, f64)>,
    /// Main carriageway only: number of lanes.
    #[serde(default)]
    pub lane_count: Option<usize>,
}

/// Road model: dual reference paths plus lane metadata.
///
/// Conventions: the main reference path is the carriageway centerline, so
/// main lane `i` (0 = rightmost) is centred at `(i - (n-1)/2) * lane_width`.
/// The slip lane runs right of the carriageway and tapers into the
/// rightmost lane.
#[derive(Debug, Clone)]
pub struct MapModel {
    pub paths: DualPathFrame,
    pub lane_width: f64,
    pub main_lane_count: usize,
    pub lanes: Vec<LaneDef>,
    pub nominal_speed: f64,
    /// Slip centerline expressed in main-path Frenet: samples of (s, d).
    slip_offset_table: Vec<(f64, f64)>,
    /// Main-path s range where the slip lane runs alongside the carriageway.
    merge_range: (f64, f64),
}

impl MapModel {
    pub fn from_file_model(file: MapFile) -> Result<Self, SceneError> {
        let lane_count = file
            .main
            .lane_count
            .ok_or_else(|| SceneError::Map("main path missing lane_count".into()))?;
        if lane_count == 0 {
            return Err(SceneError::Map("lane_count must be positive".into()));
        }
        let mut main = ReferencePath::new(
            file.main.points,
            SegmentKind::MainCarriageway,
            file.main.corridor_half_width,
        )?;
        if let Some((lo, hi)) = file.main.corridor_extent {
            main = main.with_corridor_extent(lo, hi);
        }
        let mut slip = ReferencePath::new(
            file.slip.points,
            SegmentKind::SlipRoad,
            file.slip.corridor_half_width,
        )?;
        if let Some((lo, hi)) = file.slip.corridor_extent {
            slip = slip.with_corridor_extent(lo, hi);
        }
        Ok(Self::new(
            DualPathFrame::new(slip, main),
            file.lane_width,
            lane_count,
            file.lanes,
            file.nominal_speed,
        ))
    }

    pub fn new(
        paths: DualPathFrame,
        lane_width: f64,
        main_lane_count: usize,
        lanes: Vec<LaneDef>,
        nominal_speed: f64,
    ) -> Self {
        // Project the slip centerline onto the main path once; everything
        // lateral (road edge, merge adjacency) interpolates this table.
        let mut table: Vec<(f64, f64)> = Vec::new();
        for p in paths.slip.points() {
            let proj = paths.main.to_frenet(*p);
            if !proj.status.is_clamped() {
                table.push((proj.state.s, proj.state.d));
            }
        }
        table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        table.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-9);

        // The slip lane is a distinct lane while its centerline runs
        // outside the carriageway's right edge; past that the slip path is
        // only a reference continuation along the target lane.
        let right_edge = -(main_lane_count as f64) * lane_width / 2.0;
        let merge_range = {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(s, d) in &table {
                if d <= right_edge {
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
            if lo.is_finite() {
                (lo, hi)
            } else {
                (0.0, 0.0)
            }
        };

        Self {
            paths,
            lane_width,
            main_lane_count,
            lanes,
            nominal_speed,
            slip_offset_table: table,
            merge_range,
        }
    }

    pub fn to_file_model(&self) -> MapFile {
        MapFile {
            lane_width: self.lane_width,
            nominal_speed: self.nominal_speed,
            main: PathSpec {
                points: self.paths.main.points().iter().map(|p| [p.x, p.y]).collect(),
                corridor_half_width: self.paths.main.corridor_half_width(),
                corridor_extent: self.paths.main.corridor_extent(),
                lane_count: Some(self.main_lane_count),
            },
            slip: PathSpec {
                points: self.paths.slip.points().iter().map(|p| [p.x, p.y]).collect(),
                corridor_half_width: self.paths.slip.corridor_half_width(),
                corridor_extent: self.paths.slip.corridor_extent(),
                lane_count: None,
            },
            lanes: self.lanes.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)?;
        let file: MapFile = serde_json::from_str(&text)?;
        Self::from_file_model(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(&self.to_file_model())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn lane_kind_of_id(&self, lane_id: i32) -> LaneKind {
        self.lanes
            .iter()
            .find(|l| l.id == lane_id)
            .map(|l| l.kind)
            .unwrap_or(LaneKind::Normal)
    }

    /// Centerline offset of main lane `index` in main-path Frenet [m].
    pub fn main_lane_offset(&self, index: usize) -> f64 {
        (index as f64 - (self.main_lane_count as f64 - 1.0) / 2.0) * self.lane_width
    }

    /// Main lane index whose band contains cross-track `d`, clamped.
    pub fn main_lane_index(&self, d: f64) -> usize {
        let raw = d / self.lane_width + (self.main_lane_count as f64 - 1.0) / 2.0;
        raw.round().clamp(0.0, self.main_lane_count as f64 - 1.0) as usize
    }

    pub fn merge_range(&self) -> (f64, f64) {
        self.merge_range
    }

    pub fn slip_active_at(&self, s: f64) -> bool {
        s >= self.merge_range.0 && s <= self.merge_range.1 && !self.slip_offset_table.is_empty()
    }

    /// Slip centerline offset in main-path Frenet at `s`, if the slip lane
    /// extends there.
    pub fn slip_offset_at(&self, s: f64) -> Option<f64> {
        let table = &self.slip_offset_table;
        if table.is_empty() || s < table[0].0 || s > table[table.len() - 1].0 {
            return None;
        }
        let idx = table.partition_point(|&(ts, _)| ts < s).min(table.len() - 1);
        if idx == 0 {
            return Some(table[0].1);
        }
        let (s0, d0) = table[idx - 1];
        let (s1, d1) = table[idx];
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        Some(d0 + t * (d1 - d0))
    }

    /// Left road edge offset in main-path Frenet (constant).
    pub fn left_edge(&self) -> f64 {
        self.main_lane_count as f64 * self.lane_width / 2.0
    }

    /// Right road edge offset at `s`: the slip lane widens the carriageway
    /// while it runs alongside. The `min` keeps the edge continuous as the
    /// taper rejoins the base edge.
    pub fn right_edge_at(&self, s: f64) -> f64 {
        let base = -self.left_edge();
        match self.slip_offset_at(s) {
            Some(d) => base.min(d - self.lane_width / 2.0),
            None => base,
        }
    }

    /// Cross-track offsets of lane markings at `s` (main-path Frenet),
    /// interior main markings plus the merge marking while the slip lane
    /// is adjacent.
    pub fn lane_marking_offsets_at(&self, s: f64) -> Vec<f64> {
        let n = self.main_lane_count as f64;
        let mut marks: Vec<f64> = (1..self.main_lane_count)
            .map(|k| (k as f64 - n / 2.0) * self.lane_width)
            .collect();
        if self.slip_active_at(s) {
            marks.push(-self.left_edge());
        }
        marks
    }
}

/// A replayable merging episode: ego vehicle, open-loop background tracks,
/// and the planner's references.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub map: Arc<MapModel>,
    pub tracks: TrackSet,
    pub ego_id: u64,
    pub t0_frame: i64,
    pub duration_frames: usize,
    /// Nominal speed of the target merging lane [m/s].
    pub u_des: f64,
    /// Centerline offset of the target merging lane in main-path Frenet [m].
    pub target_lane_offset: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SceneError> {
        let ego = self
            .tracks
            .get(self.ego_id)
            .ok_or_else(|| SceneError::InvalidScenario(format!("missing ego {}", self.ego_id)))?;
        let last = self.t0_frame + self.duration_frames as i64;
        if !ego.covers(self.t0_frame, last) {
            return Err(SceneError::InvalidScenario(format!(
                "ego track [{}, {}) does not cover [{}, {}]",
                ego.start_frame,
                ego.end_frame(),
                self.t0_frame,
                last
            )));
        }
        if self.duration_frames == 0 {
            return Err(SceneError::InvalidScenario("zero duration".into()));
        }
        Ok(())
    }
}

/// Sidecar scenario metadata (tracks and map live in their own files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub name: String,
    pub ego_id: u64,
    pub t0_frame: i64,
    pub duration_frames: usize,
    pub u_des: f64,
    pub target_lane_offset: f64,
}

impl Scenario {
    pub fn meta(&self) -> ScenarioMeta {
        ScenarioMeta {
            name: self.name.clone(),
            ego_id: self.ego_id,
            t0_frame: self.t0_frame,
            duration_frames: self.duration_frames,
            u_des: self.u_des,
            target_lane_offset: self.target_lane_offset,
        }
    }

    pub fn from_parts(meta: ScenarioMeta, map: Arc<MapModel>, tracks: TrackSet) -> Self {
        Self {
            name: meta.name,
            map,
            tracks,
            ego_id: meta.ego_id,
            t0_frame: meta.t0_frame,
            duration_frames: meta.duration_frames,
            u_des: meta.u_des,
            target_lane_offset: meta.target_lane_offset,
        }
    }

    /// Loads `scenario.json`, `map.json`, `tracks.csv` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, SceneError> {
        let meta: ScenarioMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("scenario.json"))?)?;
        let map = Arc::new(MapModel::load(&dir.join("map.json"))?);
        let file = std::fs::File::open(dir.join("tracks.csv"))?;
        let tracks = ingest_tracks(file, TARGET_FPS)?;
        let scenario = Self::from_parts(meta, map, tracks);
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("scenario.json"),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        self.map.save(&dir.join("map.json"))?;
        let mut out = std::fs::File::create(dir.join("tracks.csv"))?;
        write_tracks_csv(&mut out, &self.tracks)?;
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct TrackRow {
    frame: i64,
    id: u64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    lane_id: i32,
    width: f64,
    length: f64,
}

/// Reads tracks from the canonical CSV schema and downsamples to 5 fps by
/// keeping frames whose input index is divisible by `fps_in / 5`.
pub fn ingest_tracks<R: Read>(reader: R, fps_in: u32) -> Result<TrackSet, SceneError> {
    if fps_in == 0 || fps_in % TARGET_FPS != 0 {
        return Err(SceneError::BadInputRate(fps_in));
    }
    let step = (fps_in / TARGET_FPS) as i64;

    let mut csv_reader = csv::Reader::from_reader(reader);
    let mut rows: HashMap<u64, Vec<(i64, TrackRow)>> = HashMap::new();
    for (i, record) in csv_reader.deserialize::<TrackRow>().enumerate() {
        let row_no = i + 2; // 1-based, after the header
        let row = record.map_err(|e| SceneError::Ingest {
            row: row_no,
            msg: e.to_string(),
        })?;
        for (name, v) in [
            ("x", row.x),
            ("y", row.y),
            ("vx", row.vx),
            ("vy", row.vy),
            ("ax", row.ax),
            ("ay", row.ay),
            ("width", row.width),
            ("length", row.length),
        ] {
            if !v.is_finite() {
                return Err(SceneError::Ingest {
                    row: row_no,
                    msg: format!("non-finite value in column {name}"),
                });
            }
        }
        if let Some(prev) = rows.get(&row.id).and_then(|v| v.last()) {
            if row.frame <= prev.0 {
                return Err(SceneError::Ingest {
                    row: row_no,
                    msg: format!(
                        "frames not strictly increasing for id {} ({} after {})",
                        row.id, row.frame, prev.0
                    ),
                });
            }
        }
        rows.entry(row.id).or_default().push((row.frame, row));
    }

    let mut tracks = Vec::new();
    for (id, frames) in rows {
        for pair in frames.windows(2) {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(SceneError::FrameGap {
                    id,
                    missing: pair[0].0 + 1,
                    before: pair[0].0,
                    after: pair[1].0,
                });
            }
        }
        let kept: Vec<&TrackRow> = frames
            .iter()
            .filter(|(f, _)| f % step == 0)
            .map(|(_, r)| r)
            .collect();
        if kept.is_empty() {
            continue;
        }
        let start_frame = kept[0].frame / step;
        let track = Track {
            id,
            start_frame,
            width: kept[0].width,
            length: kept[0].length,
            frames: kept
                .iter()
                .map(|r| TrackFrame {
                    pos: Point2::new(r.x, r.y),
                    vel: Vector2::new(r.vx, r.vy),
                    acc: Vector2::new(r.ax, r.ay),
                    lane_id: r.lane_id,
                })
                .collect(),
        };
        tracks.push(track);
    }
    Ok(TrackSet::new(tracks))
}

/// Writes the canonical 5 fps CSV. Re-ingesting the output is byte-stable.
pub fn write_tracks_csv<W: Write>(writer: &mut W, tracks: &TrackSet) -> Result<(), SceneError> {
    let mut out = csv::Writer::from_writer(writer);
    for track in tracks.iter() {
        for (i, f) in track.frames.iter().enumerate() {
            out.serialize(TrackRow {
                frame: track.start_frame + i as i64,
                id: track.id,
                x: f.pos.x,
                y: f.pos.y,
                vx: f.vel.x,
                vy: f.vel.y,
                ax: f.acc.x,
                ay: f.acc.y,
                lane_id: f.lane_id,
                width: track.width,
                length: track.length,
            })
            .map_err(|e| SceneError::Ingest {
                row: 0,
                msg: e.to_string(),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Settings for cutting merging episodes out of a recording.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Keep every `stride`-th start frame of the slip-road phase.
    pub stride: usize,
    pub duration_frames: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            duration_frames: 25,
        }
    }
}

/// One scenario per admissible start frame of each vehicle that drives a
/// merge-labelled lane and later a normal lane. Start frames step through
/// the slip-road phase with the configured stride.
pub fn extract_merging_scenarios(
    tracks: &TrackSet,
    map: &Arc<MapModel>,
    cfg: &ExtractConfig,
) -> Vec<Scenario> {
    let mut scenarios = Vec::new();
    for track in tracks.iter() {
        let kinds: Vec<LaneKind> = track
            .frames
            .iter()
            .map(|f| map.lane_kind_of_id(f.lane_id))
            .collect();
        let first_merge = kinds.iter().position(|k| *k == LaneKind::Merge);
        let Some(first_merge) = first_merge else {
            continue;
        };
        let merged_after = kinds[first_merge..]
            .iter()
            .any(|k| matches!(k, LaneKind::Normal | LaneKind::ExpectMerging));
        if !merged_after {
            continue;
        }
        let slip_end = kinds[first_merge..]
            .iter()
            .position(|k| *k != LaneKind::Merge)
            .map(|off| first_merge + off)
            .unwrap_or(kinds.len());

        let mut count = 0usize;
        for local in (first_merge..slip_end).step_by(cfg.stride.max(1)) {
            let t0 = track.start_frame + local as i64;
            if !track.covers(t0, t0 + cfg.duration_frames as i64) {
                continue;
            }
            let target_lane_offset = map.main_lane_offset(0);
            scenarios.push(Scenario {
                name: format!("merge_{}_{}", track.id, count),
                map: Arc::clone(map),
                tracks: TrackSet::new(tracks.iter().cloned().collect()),
                ego_id: track.id,
                t0_frame: t0,
                duration_frames: cfg.duration_frames,
                u_des: map.nominal_speed,
                target_lane_offset,
            });
            count += 1;
        }
    }
    scenarios
}
