//! Deterministic synthetic merging scenarios.
//!
//! Desk-scale substitute for drone recordings: a straight multi-lane
//! carriageway with a right-hand slip lane that tapers into the rightmost
//! lane. Mainline vehicles follow closed-form or car-following profiles;
//! one ego vehicle approaches on the slip road. Everything derives from a
//! single seed, so repeated calls produce identical scenarios.

use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{Point2, Vector2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DualPathFrame, ReferencePath, SegmentKind};
use crate::scene::{
    LaneDef, LaneKind, MapModel, Scenario, Track, TrackFrame, TrackSet, DT,
};

/// Lane id used for the slip lane in generated tracks.
pub const SLIP_LANE_ID: i32 = 100;
/// Vehicle id of the merging ego.
pub const EGO_ID: u64 = 0;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("density gap range ({0:.1}..{1:.1} m) below the safety spawn gap {2:.1} m")]
    InfeasibleDensity(f64, f64, f64),
    #[error("road too short for the requested layout")]
    RoadTooShort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Sparse,
    Medium,
    Dense,
}

impl Density {
    /// Bumper-to-bumper spawn gap range [m].
    fn gap_range(self) -> (f64, f64) {
        match self {
            Density::Sparse => (60.0, 110.0),
            Density::Medium => (28.0, 55.0),
            Density::Dense => (11.0, 22.0),
        }
    }
}

/// Relative weights for the mainline motion profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileMix {
    pub constant: f64,
    pub sine_speed: f64,
    pub lateral_drift: f64,
    pub gap_close: f64,
}

impl Default for ProfileMix {
    fn default() -> Self {
        Self {
            constant: 0.35,
            sine_speed: 0.3,
            lateral_drift: 0.15,
            gap_close: 0.2,
        }
    }
}

impl ProfileMix {
    pub fn constant_only() -> Self {
        Self {
            constant: 1.0,
            sine_speed: 0.0,
            lateral_drift: 0.0,
            gap_close: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub main_lane_count: usize,
    pub lane_width: f64,
    pub road_length: f64,
    pub density: Density,
    /// Mean mainline speed of the rightmost lane [m/s].
    pub speed_mean: f64,
    /// Half-width of the per-vehicle speed draw [m/s].
    pub speed_spread: f64,
    /// Ego speed on the slip road at spawn [m/s].
    pub slip_speed: f64,
    /// Total generated track length [s]; must cover pre-roll + simulation
    /// + prediction horizon.
    pub duration_s: f64,
    /// History available before the scenario start [s].
    pub pre_roll_s: f64,
    /// Minimum bumper-to-bumper gap at spawn [m].
    pub safety_spawn_gap: f64,
    pub profile: ProfileMix,
    /// Put a second merging vehicle on the slip road ahead of the ego.
    pub slip_leader: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            main_lane_count: 2,
            lane_width: 3.5,
            road_length: 600.0,
            density: Density::Medium,
            speed_mean: 25.0,
            speed_spread: 2.5,
            slip_speed: 20.0,
            duration_s: 16.0,
            pre_roll_s: 3.0,
            safety_spawn_gap: 8.0,
            profile: ProfileMix::default(),
            slip_leader: true,
        }
    }
}

/// Quintic smoothstep (C2) and its first two derivatives on [0, 1].
fn smoothstep5(t: f64) -> (f64, f64, f64) {
    let t = t.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    let s = 6.0 * t3 * t2 - 15.0 * t2 * t2 + 10.0 * t3;
    let ds = 30.0 * t2 * t2 - 60.0 * t3 + 30.0 * t2;
    let dds = 120.0 * t3 - 180.0 * t2 + 60.0 * t;
    (s, ds, dds)
}

/// Geometry of the generated merge area, all in road coordinates
/// (x along the carriageway, y lateral, carriageway centerline at y = 0).
#[derive(Debug, Clone, Copy)]
pub struct MergeLayout {
    pub x_min: f64,
    pub x_max: f64,
    /// Slip lane starts here.
    pub x_slip_start: f64,
    /// Lateral taper begins.
    pub x_taper_start: f64,
    /// Slip centerline has joined the rightmost main lane.
    pub x_merge_end: f64,
    pub y_slip: f64,
    pub y_lane0: f64,
}

impl MergeLayout {
    fn from_config(cfg: &GeneratorConfig) -> Result<Self, GenerationError> {
        let half = cfg.road_length / 2.0;
        let n = cfg.main_lane_count as f64;
        let layout = Self {
            x_min: -half,
            x_max: half,
            x_slip_start: -half + 20.0,
            x_taper_start: -60.0,
            x_merge_end: 30.0,
            y_slip: -(n + 1.0) / 2.0 * cfg.lane_width,
            y_lane0: -(n - 1.0) / 2.0 * cfg.lane_width,
        };
        if layout.x_slip_start >= layout.x_taper_start - 40.0 {
            return Err(GenerationError::RoadTooShort);
        }
        Ok(layout)
    }

    /// Slip centerline lateral position and its x-derivatives at `x`.
    pub fn slip_y(&self, x: f64) -> (f64, f64, f64) {
        if x <= self.x_taper_start {
            (self.y_slip, 0.0, 0.0)
        } else if x >= self.x_merge_end {
            (self.y_lane0, 0.0, 0.0)
        } else {
            let span = self.x_merge_end - self.x_taper_start;
            let t = (x - self.x_taper_start) / span;
            let (s, ds, dds) = smoothstep5(t);
            let dy = self.y_lane0 - self.y_slip;
            (
                self.y_slip + dy * s,
                dy * ds / span,
                dy * dds / (span * span),
            )
        }
    }
}

pub fn make_map(cfg: &GeneratorConfig) -> Result<(MapModel, MergeLayout), GenerationError> {
    let layout = MergeLayout::from_config(cfg)?;
    let main_pts: Vec<[f64; 2]> = step_range(layout.x_min, layout.x_max, 5.0)
        .map(|x| [x, 0.0])
        .collect();
    // The slip reference continues along the target lane past the merge
    // point so predicted futures of merging vehicles stay convertible; the
    // corridor extent below keeps association limited to the actual lane.
    let slip_pts: Vec<[f64; 2]> = step_range(layout.x_slip_start, layout.x_max - 5.0, 2.0)
        .map(|x| [x, layout.slip_y(x).0])
        .collect();
    let n = cfg.main_lane_count as f64;
    let main = ReferencePath::new(
        main_pts,
        SegmentKind::MainCarriageway,
        n * cfg.lane_width / 2.0 + 0.6,
    )
    .expect("generated main path is valid");
    let slip = ReferencePath::new(
        slip_pts,
        SegmentKind::SlipRoad,
        cfg.lane_width / 2.0 + 0.6,
    )
    .expect("generated slip path is valid");
    let lane_end = slip
        .to_frenet(Point2::new(layout.x_merge_end, layout.y_lane0))
        .state
        .s;
    let slip = slip.with_corridor_extent(0.0, lane_end);

    let mut lanes: Vec<LaneDef> = (0..cfg.main_lane_count)
        .map(|i| LaneDef {
            id: i as i32,
            kind: if i == 0 {
                LaneKind::ExpectMerging
            } else {
                LaneKind::Normal
            },
            main_index: Some(i),
        })
        .collect();
    lanes.push(LaneDef {
        id: SLIP_LANE_ID,
        kind: LaneKind::Merge,
        main_index: None,
    });

    let map = MapModel::new(
        DualPathFrame::new(slip, main),
        cfg.lane_width,
        cfg.main_lane_count,
        lanes,
        cfg.speed_mean,
    );
    Ok((map, layout))
}

fn step_range(from: f64, to: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((to - from) / step).ceil() as usize;
    (0..=n).map(move |i| (from + i as f64 * step).min(to))
}

#[derive(Debug, Clone)]
enum Profile {
    Constant {
        speed: f64,
        y: f64,
    },
    SineSpeed {
        base: f64,
        amp: f64,
        omega: f64,
        phase: f64,
        y: f64,
    },
    LateralDrift {
        speed: f64,
        y0: f64,
        amp: f64,
        omega: f64,
        phase: f64,
    },
    /// Car following: approach the leader, then hold a desired headway.
    GapClose {
        v0: f64,
        y: f64,
        leader: usize,
    },
}

struct Spawn {
    x0: f64,
    lane_id: i32,
    length: f64,
    width: f64,
    profile: Profile,
}

/// Deterministic scenario from a seed. Mainline vehicles replay open-loop;
/// the ego track records a nominal human-like merge used for scenario
/// initialisation and training data.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<Scenario, GenerationError> {
    let (lo, hi) = cfg.density.gap_range();
    if hi < cfg.safety_spawn_gap {
        return Err(GenerationError::InfeasibleDensity(lo, hi, cfg.safety_spawn_gap));
    }
    let (map, layout) = make_map(cfg)?;
    let map = Arc::new(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (cfg.duration_s / DT).round() as usize;

    let mut spawns: Vec<Spawn> = Vec::new();
    // Mainline lanes, front to back so car-followers can reference their
    // leader's already-generated trajectory.
    for lane in 0..cfg.main_lane_count {
        let y_lane = map.main_lane_offset(lane);
        let lane_speed = cfg.speed_mean + lane as f64 * 1.5;
        // Leave the far end clear so tracks stay on the map for the whole
        // duration.
        let mut x = layout.x_max - cfg.duration_s * (lane_speed + cfg.speed_spread) - 10.0;
        let mut leader: Option<usize> = None;
        while x > layout.x_min + 15.0 {
            let length = 4.3 + rng.gen_range(0.0..0.9);
            let width = 1.8 + rng.gen_range(0.0..0.25);
            let speed = lane_speed + rng.gen_range(-cfg.speed_spread..cfg.speed_spread);
            let y = y_lane + rng.gen_range(-0.15..0.15);
            let profile = pick_profile(&mut rng, &cfg.profile, speed, y, leader);
            spawns.push(Spawn {
                x0: x,
                lane_id: lane as i32,
                length,
                width,
                profile,
            });
            leader = Some(spawns.len() - 1);
            let gap = rng.gen_range(lo..hi).max(cfg.safety_spawn_gap);
            x -= gap + length;
        }
    }

    let mut tracks: Vec<Track> = Vec::new();
    // Ego first so vehicle ids stay stable regardless of traffic count.
    tracks.push(ego_track(cfg, &layout, &mut rng, steps, EGO_ID, 0.0));
    if cfg.slip_leader {
        let lead_gap = rng.gen_range(22.0..38.0);
        tracks.push(ego_track(cfg, &layout, &mut rng, steps, 1, lead_gap));
    }

    let id_base = 10u64;
    let mut mainline: Vec<Track> = Vec::with_capacity(spawns.len());
    for (i, spawn) in spawns.iter().enumerate() {
        let track = mainline_track(spawn, &mainline, steps, id_base + i as u64);
        mainline.push(track);
    }
    tracks.extend(mainline);

    let scenario = Scenario {
        name: format!("synthetic_{seed}"),
        map,
        tracks: TrackSet::new(tracks),
        ego_id: EGO_ID,
        t0_frame: (cfg.pre_roll_s / DT).round() as i64,
        duration_frames: 25,
        u_des: cfg.speed_mean,
        target_lane_offset: -(cfg.main_lane_count as f64 - 1.0) / 2.0 * cfg.lane_width,
    };
    debug_assert!(scenario.validate().is_ok());
    Ok(scenario)
}

fn pick_profile(
    rng: &mut ChaCha8Rng,
    mix: &ProfileMix,
    speed: f64,
    y: f64,
    leader: Option<usize>,
) -> Profile {
    let total = mix.constant + mix.sine_speed + mix.lateral_drift + mix.gap_close;
    let draw = rng.gen_range(0.0..total.max(1e-12));
    if draw < mix.constant || total <= 1e-12 {
        Profile::Constant { speed, y }
    } else if draw < mix.constant + mix.sine_speed {
        Profile::SineSpeed {
            base: speed,
            amp: rng.gen_range(0.8..1.8),
            omega: TAU / rng.gen_range(6.0..10.0),
            phase: rng.gen_range(0.0..TAU),
            y,
        }
    } else if draw < mix.constant + mix.sine_speed + mix.lateral_drift {
        Profile::LateralDrift {
            speed,
            y0: y,
            amp: rng.gen_range(0.2..0.4),
            omega: TAU / rng.gen_range(5.0..9.0),
            phase: rng.gen_range(0.0..TAU),
        }
    } else if let Some(leader) = leader {
        Profile::GapClose {
            // Spawn faster than the leader so the approach is visible.
            v0: speed + rng.gen_range(1.0..3.0),
            y,
            leader,
        }
    } else {
        Profile::Constant { speed, y }
    }
}

fn mainline_track(spawn: &Spawn, done: &[Track], steps: usize, id: u64) -> Track {
    let mut frames = Vec::with_capacity(steps + 1);
    match spawn.profile {
        Profile::Constant { speed, y } => {
            for k in 0..=steps {
                let t = k as f64 * DT;
                frames.push(TrackFrame {
                    pos: Point2::new(spawn.x0 + speed * t, y),
                    vel: Vector2::new(speed, 0.0),
                    acc: Vector2::zeros(),
                    lane_id: spawn.lane_id,
                });
            }
        }
        Profile::SineSpeed {
            base,
            amp,
            omega,
            phase,
            y,
        } => {
            for k in 0..=steps {
                let t = k as f64 * DT;
                let x = spawn.x0 + base * t - amp / omega * ((omega * t + phase).cos() - phase.cos());
                frames.push(TrackFrame {
                    pos: Point2::new(x, y),
                    vel: Vector2::new(base + amp * (omega * t + phase).sin(), 0.0),
                    acc: Vector2::new(amp * omega * (omega * t + phase).cos(), 0.0),
                    lane_id: spawn.lane_id,
                });
            }
        }
        Profile::LateralDrift {
            speed,
            y0,
            amp,
            omega,
            phase,
        } => {
            for k in 0..=steps {
                let t = k as f64 * DT;
                frames.push(TrackFrame {
                    pos: Point2::new(spawn.x0 + speed * t, y0 + amp * (omega * t + phase).sin()),
                    vel: Vector2::new(speed, amp * omega * (omega * t + phase).cos()),
                    acc: Vector2::new(0.0, -amp * omega * omega * (omega * t + phase).sin()),
                    lane_id: spawn.lane_id,
                });
            }
        }
        Profile::GapClose { v0, y, leader } => {
            let leader = &done[leader];
            let fine = 10usize;
            let dt = DT / fine as f64;
            let (mut x, mut v) = (spawn.x0, v0);
            let headway = 1.2;
            let standstill = 4.0;
            for k in 0..=steps {
                // Leader state at the coarse step; constant within it.
                let lead = &leader.frames[k.min(leader.frames.len() - 1)];
                let gap = lead.pos.x - x - (spawn.length + 4.6) / 2.0;
                let gap_des = standstill + headway * v;
                let a = (0.35 * (lead.vel.x - v) + 0.25 * (gap - gap_des)).clamp(-4.0, 2.0);
                frames.push(TrackFrame {
                    pos: Point2::new(x, y),
                    vel: Vector2::new(v, 0.0),
                    acc: Vector2::new(a, 0.0),
                    lane_id: spawn.lane_id,
                });
                for _ in 0..fine {
                    x += v * dt + 0.5 * a * dt * dt;
                    v = (v + a * dt).max(0.0);
                }
            }
        }
    }
    Track {
        id,
        start_frame: 0,
        width: spawn.width,
        length: spawn.length,
        frames,
    }
}

/// Nominal human-like merge: accelerate on the slip lane toward the
/// mainline speed while following the taper into the rightmost lane.
fn ego_track(
    cfg: &GeneratorConfig,
    layout: &MergeLayout,
    rng: &mut ChaCha8Rng,
    steps: usize,
    id: u64,
    lead_distance: f64,
) -> Track {
    let n = cfg.main_lane_count as f64;
    let edge = -n * cfg.lane_width / 2.0;
    // Placed so the taper is reached a little after the scenario start.
    let reach = cfg.slip_speed * (cfg.pre_roll_s + 1.0 + rng.gen_range(0.0..1.5));
    let x0 = layout.x_taper_start - reach + lead_distance;
    let v_target = cfg.speed_mean + rng.gen_range(-1.0..1.0);
    let fine = 10usize;
    let dt = DT / fine as f64;
    let (mut x, mut v) = (x0, cfg.slip_speed + rng.gen_range(-0.8..0.8));
    let mut frames = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let a = (0.8 * (v_target - v)).clamp(-1.5, 1.5);
        let (y, dy_dx, ddy_dx) = layout.slip_y(x);
        let vy = dy_dx * v;
        let ay = ddy_dx * v * v + dy_dx * a;
        let lane_id = if y < edge {
            SLIP_LANE_ID
        } else {
            // Joined the carriageway: nearest main lane.
            let idx = ((y - (-(n - 1.0) / 2.0 * cfg.lane_width)) / cfg.lane_width)
                .round()
                .clamp(0.0, n - 1.0) as i32;
            idx
        };
        frames.push(TrackFrame {
            pos: Point2::new(x, y),
            vel: Vector2::new(v, vy),
            acc: Vector2::new(a, ay),
            lane_id,
        });
        for _ in 0..fine {
            x += v * dt + 0.5 * a * dt * dt;
            v = (v + a * dt).max(0.0);
        }
    }
    Track {
        id,
        start_frame: 0,
        width: 1.85,
        length: 4.6,
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::write_tracks_csv;

    #[test]
    fn deterministic_given_seed() {
        let cfg = GeneratorConfig::default();
        let a = generate_synthetic(&cfg, 42).unwrap();
        let b = generate_synthetic(&cfg, 42).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        write_tracks_csv(&mut bytes_a, &a.tracks).unwrap();
        write_tracks_csv(&mut bytes_b, &b.tracks).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_ne!(bytes_a.len(), 0);
    }

    #[test]
    fn constant_profile_matches_cv_extrapolation() {
        let cfg = GeneratorConfig {
            profile: ProfileMix::constant_only(),
            slip_leader: false,
            ..GeneratorConfig::default()
        };
        let scenario = generate_synthetic(&cfg, 7).unwrap();
        for track in scenario.tracks.iter().filter(|t| t.id != EGO_ID) {
            let f0 = &track.frames[0];
            for (k, f) in track.frames.iter().enumerate() {
                let expect = f0.pos + f0.vel * (k as f64 * DT);
                assert!((f.pos - expect).norm() < 1e-9, "vehicle {} drifted", track.id);
            }
        }
    }

    #[test]
    fn dense_spawns_respect_safety_gap() {
        let cfg = GeneratorConfig {
            density: Density::Dense,
            ..GeneratorConfig::default()
        };
        let scenario = generate_synthetic(&cfg, 3).unwrap();
        // Check bumper gaps per lane at t = 0.
        for lane in 0..cfg.main_lane_count as i32 {
            let mut xs: Vec<(f64, f64)> = scenario
                .tracks
                .iter()
                .filter(|t| t.id >= 10 && t.frames[0].lane_id == lane)
                .map(|t| (t.frames[0].pos.x, t.length))
                .collect();
            xs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for pair in xs.windows(2) {
                let gap = pair[1].0 - pair[0].0 - (pair[0].1 + pair[1].1) / 2.0;
                assert!(
                    gap >= cfg.safety_spawn_gap - 1e-9,
                    "spawn gap {gap:.2} below safety"
                );
            }
        }
    }

    #[test]
    fn infeasible_density_is_an_error() {
        let cfg = GeneratorConfig {
            safety_spawn_gap: 50.0,
            density: Density::Dense,
            ..GeneratorConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, 1),
            Err(GenerationError::InfeasibleDensity(..))
        ));
    }

    #[test]
    fn ego_merges_onto_carriageway() {
        let cfg = GeneratorConfig::default();
        let scenario = generate_synthetic(&cfg, 11).unwrap();
        let ego = scenario.tracks.get(EGO_ID).unwrap();
        assert_eq!(ego.frames[0].lane_id, SLIP_LANE_ID);
        assert!(
            ego.frames.iter().any(|f| f.lane_id != SLIP_LANE_ID),
            "ego never left the slip lane"
        );
        scenario.validate().unwrap();
    }

    #[test]
    fn map_merge_metadata_is_consistent() {
        let cfg = GeneratorConfig::default();
        let (map, layout) = make_map(&cfg).unwrap();
        // Inside the parallel slip section the right edge bulges out by one
        // lane.
        let origin_x = map.paths.origin().x;
        let s_mid = (layout.x_taper_start - 40.0) - origin_x;
        assert!(map.slip_active_at(s_mid));
        let edge = map.right_edge_at(s_mid);
        assert!(edge < -(cfg.main_lane_count as f64) * cfg.lane_width / 2.0 - 1.0);
        // Far upstream there is no slip lane.
        let s_up = layout.x_min + 5.0 - origin_x;
        assert!(!map.slip_active_at(s_up));
    }
}
