//! Per-time-step input features and padded observation windows.
//!
//! Each observed step of a target vehicle (TV) becomes 28 features in the
//! Frenet frame of the TV's associated reference path:
//!
//! * `[0..5)`  TV motion: lateral position in lane, longitudinal velocity,
//!   lateral velocity, lateral acceleration, longitudinal acceleration;
//! * `[5..25)` ten surrounding-vehicle slots × (lateral gap, longitudinal
//!   gap), center to center;
//! * `[25..28)` environment: lane width, left lane type, right lane type.
//!
//! Windows are padded with zero rows up to [`T_MAX`]; the valid rows form a
//! contiguous suffix ending at the current time step.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, SegmentKind};
use crate::scene::{LaneKind, MapModel, TrackSet};

pub const NUM_FEATURES: usize = 28;
/// Maximum observation length (3 s at 5 fps).
pub const T_MAX: usize = 15;
/// Minimum observation length (0.4 s at 5 fps).
pub const T_MIN: usize = 2;
pub const NUM_SLOTS: usize = 10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("observation length {0} outside [{T_MIN}, {T_MAX}]")]
    InsufficientObservation(usize),
    #[error("track {id} has no frame {frame}")]
    MissingFrame { id: u64, frame: i64 },
    #[error("unknown vehicle {0}")]
    UnknownVehicle(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Surrounding-vehicle slot order. Preceding means larger along-track
/// coordinate than the TV; close/far bands split at 1.5 lane widths of
/// lateral gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Preceding = 0,
    Following = 1,
    RightClosePreceding = 2,
    RightCloseFollowing = 3,
    RightFarPreceding = 4,
    RightFarFollowing = 5,
    LeftClosePreceding = 6,
    LeftCloseFollowing = 7,
    LeftFarPreceding = 8,
    LeftFarFollowing = 9,
}

impl Slot {
    pub fn is_preceding(self) -> bool {
        (self as usize) % 2 == 0
    }
}

/// Gaps to the up-to-ten surrounding vehicles; `None` is an empty slot and
/// becomes the ghost-vehicle placeholder in the feature vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurroundingSlots {
    /// (lateral gap, longitudinal gap) [m], both `sv - tv`.
    pub gaps: [Option<(f64, f64)>; NUM_SLOTS],
}

impl SurroundingSlots {
    /// Ghost placeholder: zero lateral gap, longitudinal gap at the
    /// perception range, signed away from the TV.
    pub fn feature_pairs(&self, perception_range: f64) -> [(f64, f64); NUM_SLOTS] {
        let mut out = [(0.0, 0.0); NUM_SLOTS];
        for (i, gap) in self.gaps.iter().enumerate() {
            out[i] = match gap {
                Some(pair) => *pair,
                None => {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    (0.0, sign * perception_range)
                }
            };
        }
        out
    }
}

/// Lane width and the types of the lanes left and right of the TV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneContext {
    pub lane_width: f64,
    pub left: LaneKind,
    pub right: LaneKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Surrounding vehicles beyond this along-track distance are ghosts [m].
    pub perception_range: f64,
    /// Close/far band boundary in lane widths.
    pub close_band: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            perception_range: 100.0,
            close_band: 1.5,
        }
    }
}

/// Padded feature matrix plus validity mask for one TV.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    /// `T_MAX` rows; padded rows are exactly zero.
    pub features: Vec<[f64; NUM_FEATURES]>,
    pub mask: Vec<bool>,
    pub t_obs: usize,
}

impl ObservationWindow {
    /// Index of the first valid row.
    pub fn first_valid(&self) -> usize {
        T_MAX - self.t_obs
    }

    pub fn check_invariants(&self) -> bool {
        if self.features.len() != T_MAX || self.mask.len() != T_MAX {
            return false;
        }
        if !(T_MIN..=T_MAX).contains(&self.t_obs) {
            return false;
        }
        let first = self.first_valid();
        self.mask.iter().enumerate().all(|(i, &m)| m == (i >= first))
            && self.features[..first]
                .iter()
                .all(|row| row.iter().all(|v| *v == 0.0))
    }
}

/// Per-feature affine normalization fitted on the training set and stored
/// with the model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; NUM_FEATURES],
            std: vec![1.0; NUM_FEATURES],
        }
    }

    /// Mean and standard deviation over the valid rows of the given windows.
    pub fn fit<'a>(windows: impl Iterator<Item = &'a ObservationWindow>) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0; NUM_FEATURES];
        let mut sum_sq = vec![0.0; NUM_FEATURES];
        for w in windows {
            for (row, &valid) in w.features.iter().zip(&w.mask) {
                if !valid {
                    continue;
                }
                count += 1;
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for j in 0..NUM_FEATURES {
            out[j] = (row[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// Assigns each neighbour `(Δd, Δs)` relative to the TV to at most one
/// slot; the nearest by |Δs| wins within a slot.
pub fn assign_slots(
    neighbors: &[(f64, f64)],
    lane_width: f64,
    cfg: &FeatureConfig,
) -> SurroundingSlots {
    let mut slots = SurroundingSlots::default();
    let mut best_abs = [f64::INFINITY; NUM_SLOTS];
    for &(dd, ds) in neighbors {
        if ds.abs() > cfg.perception_range {
            continue;
        }
        let lateral = dd.abs();
        let side = if lateral <= lane_width / 2.0 {
            0 // same lane
        } else if dd < 0.0 {
            if lateral < cfg.close_band * lane_width {
                1 // right close
            } else {
                2 // right far
            }
        } else if lateral < cfg.close_band * lane_width {
            3 // left close
        } else {
            4 // left far
        };
        let preceding = ds >= 0.0;
        let slot = match (side, preceding) {
            (0, true) => Slot::Preceding,
            (0, false) => Slot::Following,
            (1, true) => Slot::RightClosePreceding,
            (1, false) => Slot::RightCloseFollowing,
            (2, true) => Slot::RightFarPreceding,
            (2, false) => Slot::RightFarFollowing,
            (3, true) => Slot::LeftClosePreceding,
            (3, false) => Slot::LeftCloseFollowing,
            (4, true) => Slot::LeftFarPreceding,
            (4, false) => Slot::LeftFarFollowing,
            _ => unreachable!(),
        } as usize;
        if ds.abs() < best_abs[slot] {
            best_abs[slot] = ds.abs();
            slots.gaps[slot] = Some((dd, ds));
        }
    }
    slots
}

/// Lane context seen by a TV at `(s, d)` on its associated path.
pub fn lane_context(
    map: &MapModel,
    kind: SegmentKind,
    s: f64,
    d: f64,
    position: Point2<f64>,
) -> LaneContext {
    match kind {
        SegmentKind::SlipRoad => {
            // Adjacency to the carriageway is judged on the main path.
            let main_proj = map.paths.main.to_frenet(position);
            let left = if !main_proj.status.is_clamped() && map.slip_active_at(main_proj.state.s) {
                LaneKind::ExpectMerging
            } else {
                LaneKind::NoLane
            };
            LaneContext {
                lane_width: map.lane_width,
                left,
                right: LaneKind::NoLane,
            }
        }
        SegmentKind::MainCarriageway => {
            let lane = map.main_lane_index(d);
            let left = if lane + 1 < map.main_lane_count {
                LaneKind::Normal
            } else {
                LaneKind::NoLane
            };
            let right = if lane > 0 {
                if lane - 1 == 0 && map.slip_active_at(s) {
                    LaneKind::ExpectMerging
                } else {
                    LaneKind::Normal
                }
            } else if map.slip_active_at(s) {
                LaneKind::Merge
            } else {
                LaneKind::NoLane
            };
            LaneContext {
                lane_width: map.lane_width,
                left,
                right,
            }
        }
    }
}

/// Builds feature rows and observation windows from a track set and map.
pub struct WindowBuilder<'a> {
    pub map: &'a MapModel,
    pub cfg: FeatureConfig,
}

impl<'a> WindowBuilder<'a> {
    pub fn new(map: &'a MapModel) -> Self {
        Self {
            map,
            cfg: FeatureConfig::default(),
        }
    }

    /// Associates the vehicle at its current frame, with no history bias.
    pub fn associate(
        &self,
        tracks: &TrackSet,
        id: u64,
        frame: i64,
    ) -> Result<SegmentKind, FeatureError> {
        let track = tracks.get(id).ok_or(FeatureError::UnknownVehicle(id))?;
        let f = track
            .at(frame)
            .ok_or(FeatureError::MissingFrame { id, frame })?;
        Ok(self.map.paths.associate(f.pos, None)?)
    }

    /// The 28-feature row of vehicle `id` at `frame`, in the Frenet frame
    /// of `path_kind`.
    pub fn feature_row(
        &self,
        tracks: &TrackSet,
        id: u64,
        frame: i64,
        path_kind: SegmentKind,
    ) -> Result<[f64; NUM_FEATURES], FeatureError> {
        let track = tracks.get(id).ok_or(FeatureError::UnknownVehicle(id))?;
        let tv = track
            .at(frame)
            .ok_or(FeatureError::MissingFrame { id, frame })?;
        let path = self.map.paths.path(path_kind);
        let proj = path.to_frenet(tv.pos);
        let (s, d) = (proj.state.s, proj.state.d);
        let tangent = path.tangent_at(s);
        let normal = nalgebra::Vector2::new(-tangent.y, tangent.x);

        let lane_center = match path_kind {
            SegmentKind::SlipRoad => 0.0,
            SegmentKind::MainCarriageway => self.map.main_lane_offset(self.map.main_lane_index(d)),
        };
        let motion = [
            d - lane_center,
            tv.vel.dot(&tangent),
            tv.vel.dot(&normal),
            tv.acc.dot(&normal),
            tv.acc.dot(&tangent),
        ];

        let neighbors: Vec<(f64, f64)> = tracks
            .present_at(frame)
            .filter(|(t, _)| t.id != id)
            .map(|(_, f)| {
                let p = path.to_frenet(f.pos);
                (p.state.d - d, p.state.s - s)
            })
            .collect();
        let slots = assign_slots(&neighbors, self.map.lane_width, &self.cfg);
        let pairs = slots.feature_pairs(self.cfg.perception_range);

        let ctx = lane_context(self.map, path_kind, s, d, tv.pos);

        let mut row = [0.0; NUM_FEATURES];
        row[..5].copy_from_slice(&motion);
        for (i, (lat, lon)) in pairs.iter().enumerate() {
            row[5 + 2 * i] = *lat;
            row[5 + 2 * i + 1] = *lon;
        }
        row[25] = ctx.lane_width;
        row[26] = ctx.left.code() as f64;
        row[27] = ctx.right.code() as f64;
        Ok(row)
    }

    /// Observation window ending at `anchor_frame` with `t_obs` valid steps.
    /// Returns the window and the path the TV was associated with.
    pub fn build_window(
        &self,
        tracks: &TrackSet,
        id: u64,
        anchor_frame: i64,
        t_obs: usize,
    ) -> Result<(ObservationWindow, SegmentKind), FeatureError> {
        if !(T_MIN..=T_MAX).contains(&t_obs) {
            return Err(FeatureError::InsufficientObservation(t_obs));
        }
        let path_kind = self.associate(tracks, id, anchor_frame)?;
        let mut features = vec![[0.0; NUM_FEATURES]; T_MAX];
        let mut mask = vec![false; T_MAX];
        let first = T_MAX - t_obs;
        for k in 0..t_obs {
            let frame = anchor_frame - (t_obs - 1 - k) as i64;
            features[first + k] = self.feature_row(tracks, id, frame, path_kind)?;
            mask[first + k] = true;
        }
        let window = ObservationWindow {
            features,
            mask,
            t_obs,
        };
        debug_assert!(window.check_invariants());
        Ok((window, path_kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Track, TrackFrame, DT};
    use crate::synthetic::{make_map, GeneratorConfig};
    use nalgebra::Vector2;

    fn test_map() -> MapModel {
        make_map(&GeneratorConfig::default()).unwrap().0
    }

    fn track_at(id: u64, x: f64, y: f64, vx: f64) -> Track {
        let frames = (0..30)
            .map(|k| TrackFrame {
                pos: Point2::new(x + vx * k as f64 * DT, y),
                vel: Vector2::new(vx, 0.0),
                acc: Vector2::zeros(),
                lane_id: 0,
            })
            .collect();
        Track {
            id,
            start_frame: 0,
            width: 1.8,
            length: 4.5,
            frames,
        }
    }

    #[test]
    fn empty_road_feature_row() {
        let map = test_map();
        // Lane 0 centre of the 2-lane default map is d = -1.75.
        let tracks = TrackSet::new(vec![track_at(1, 100.0, -1.75, 24.0)]);
        let builder = WindowBuilder::new(&map);
        let row = builder
            .feature_row(&tracks, 1, 5, SegmentKind::MainCarriageway)
            .unwrap();
        assert!((row[0] - 0.0).abs() < 1e-9, "lateral position in lane");
        assert!((row[1] - 24.0).abs() < 1e-9, "longitudinal velocity");
        assert_eq!(&row[2..5], &[0.0, 0.0, 0.0]);
        for i in 0..NUM_SLOTS {
            assert_eq!(row[5 + 2 * i], 0.0);
            assert_eq!(row[5 + 2 * i + 1].abs(), 100.0, "ghost slot {i}");
        }
        assert_eq!(row[25], 3.5);
    }

    #[test]
    fn preceding_vehicle_fills_slot_one() {
        let map = test_map();
        let tracks = TrackSet::new(vec![
            track_at(1, 100.0, -1.75, 24.0),
            track_at(2, 120.0, -1.75, 24.0),
        ]);
        let builder = WindowBuilder::new(&map);
        let row = builder
            .feature_row(&tracks, 1, 0, SegmentKind::MainCarriageway)
            .unwrap();
        assert!((row[5] - 0.0).abs() < 1e-9);
        assert!((row[6] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_candidate_wins_the_slot() {
        let cfg = FeatureConfig::default();
        let slots = assign_slots(&[(0.0, 40.0), (0.0, 15.0)], 3.5, &cfg);
        assert_eq!(slots.gaps[Slot::Preceding as usize], Some((0.0, 15.0)));
    }

    #[test]
    fn beyond_perception_range_is_ghost() {
        let cfg = FeatureConfig::default();
        let slots = assign_slots(&[(0.0, 150.0)], 3.5, &cfg);
        assert_eq!(slots.gaps[Slot::Preceding as usize], None);
        let pairs = slots.feature_pairs(cfg.perception_range);
        assert_eq!(pairs[Slot::Preceding as usize], (0.0, 100.0));
        assert_eq!(pairs[Slot::Following as usize], (0.0, -100.0));
    }

    #[test]
    fn close_and_far_bands() {
        let cfg = FeatureConfig::default();
        let w = 3.5;
        let slots = assign_slots(&[(-w, 10.0), (-2.0 * w, 12.0), (w, -8.0)], w, &cfg);
        assert_eq!(
            slots.gaps[Slot::RightClosePreceding as usize],
            Some((-w, 10.0))
        );
        assert_eq!(
            slots.gaps[Slot::RightFarPreceding as usize],
            Some((-2.0 * w, 12.0))
        );
        assert_eq!(
            slots.gaps[Slot::LeftCloseFollowing as usize],
            Some((w, -8.0))
        );
    }

    #[test]
    fn no_vehicle_occupies_two_slots() {
        let cfg = FeatureConfig::default();
        let neighbors = vec![(0.0, 20.0), (-3.5, 5.0), (3.5, -5.0), (0.0, -30.0)];
        let slots = assign_slots(&neighbors, 3.5, &cfg);
        let filled = slots.gaps.iter().flatten().count();
        assert_eq!(filled, neighbors.len());
    }

    #[test]
    fn mainline_tv_sees_merge_lane_on_right() {
        let map = test_map();
        // x = -80 lies within the slip extent of the default map.
        let origin_x = map.paths.origin().x;
        let s = -80.0 - origin_x;
        let ctx = lane_context(
            &map,
            SegmentKind::MainCarriageway,
            s,
            -1.75,
            Point2::new(-80.0, -1.75),
        );
        assert_eq!(ctx.right, LaneKind::Merge, "s = {s}");
        assert_eq!(ctx.left, LaneKind::Normal);
        // Lane 1 sees the expect-merging lane 0 on its right there.
        let ctx = lane_context(
            &map,
            SegmentKind::MainCarriageway,
            s,
            1.75,
            Point2::new(-80.0, 1.75),
        );
        assert_eq!(ctx.right, LaneKind::ExpectMerging);
        assert_eq!(ctx.left, LaneKind::NoLane);
    }

    #[test]
    fn window_shapes_and_mask() {
        let map = test_map();
        let tracks = TrackSet::new(vec![track_at(1, -100.0, -1.75, 24.0)]);
        let builder = WindowBuilder::new(&map);

        let (full, _) = builder.build_window(&tracks, 1, 20, 15).unwrap();
        assert_eq!(full.t_obs, 15);
        assert!(full.mask.iter().all(|&m| m));

        let (short, _) = builder.build_window(&tracks, 1, 20, 2).unwrap();
        assert_eq!(short.mask.iter().filter(|&&m| m).count(), 2);
        assert!(short.features[..13]
            .iter()
            .all(|row| row.iter().all(|v| *v == 0.0)));
        assert!(short.check_invariants());

        assert!(matches!(
            builder.build_window(&tracks, 1, 20, 1),
            Err(FeatureError::InsufficientObservation(1))
        ));
        assert!(matches!(
            builder.build_window(&tracks, 1, 20, 16),
            Err(FeatureError::InsufficientObservation(16))
        ));
    }

    #[test]
    fn normalization_is_finite_and_floored() {
        let map = test_map();
        let tracks = TrackSet::new(vec![track_at(1, -100.0, -1.75, 24.0)]);
        let builder = WindowBuilder::new(&map);
        let (w, _) = builder.build_window(&tracks, 1, 20, 5).unwrap();
        let norm = FeatureNorm::fit([&w].into_iter());
        for j in 0..NUM_FEATURES {
            assert!(norm.std[j] >= 1e-6);
        }
        let shifted = norm.apply(&w.features[T_MAX - 1]);
        assert!(shifted.iter().all(|v| v.is_finite()));
    }
}
