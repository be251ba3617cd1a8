//! Frenet frame conversion against dual reference paths.
//!
//! A merge area carries two reference paths, one for the slip road and one
//! for the main carriageway. Both measure the along-track coordinate `s`
//! from a shared origin: the crossing point of the two paths (or, for paths
//! that meet tangentially, the midpoint of their closest points). `s` is
//! negative upstream of the origin. The cross-track coordinate `d` is
//! positive to the left of the direction of travel.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum spacing between consecutive polyline points.
pub const MIN_POINT_SPACING: f64 = 1e-9;

/// Hysteresis margin applied when re-associating a vehicle that already has
/// a path, so a merging vehicle does not flap between frames.
pub const ASSOCIATION_HYSTERESIS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("reference path needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("consecutive path points {0} and {1} are closer than {MIN_POINT_SPACING} m")]
    DegenerateSegment(usize, usize),
    #[error("arc length {s:.3} outside path range [{min:.3}, {max:.3}]")]
    ArcLengthOutOfRange { s: f64, min: f64, max: f64 },
    #[error("position ({0:.2}, {1:.2}) lies outside both path corridors")]
    OutsideCorridors(f64, f64),
}

/// Which road segment a reference path (or a Frenet state) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    SlipRoad,
    MainCarriageway,
}

/// Road-aligned coordinates relative to one reference path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetState {
    /// Along-track coordinate, measured from the dual-path origin [m].
    pub s: f64,
    /// Cross-track coordinate, positive left of travel [m].
    pub d: f64,
    pub path: SegmentKind,
}

/// Where the orthogonal projection landed relative to the path extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStatus {
    Interior,
    /// Projection fell before the first point; result clamped to the start.
    ClampedStart,
    /// Projection fell past the last point; result clamped to the end.
    ClampedEnd,
}

impl ProjectionStatus {
    pub fn is_clamped(self) -> bool {
        !matches!(self, ProjectionStatus::Interior)
    }
}

/// Result of projecting a Cartesian point onto a path.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub state: FrenetState,
    pub status: ProjectionStatus,
}

/// Arc-length-parametrized polyline with linear interpolation between points.
///
/// A path may extend beyond the road segment it names (a slip-road path
/// usually continues along the target lane so predictions past the merge
/// point stay convertible); `corridor_extent` then restricts where
/// vehicles may be associated with it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferencePath {
    points: Vec<Point2<f64>>,
    cumulative_arclength: Vec<f64>,
    kind: SegmentKind,
    /// Half-width of the corridor in which vehicles may be associated [m].
    corridor_half_width: f64,
    /// Raw arc-length range (from the first point) where the corridor
    /// applies; `None` means the whole path.
    #[serde(default)]
    corridor_extent: Option<(f64, f64)>,
    /// Arc length (from the first point) of the shared origin on this path.
    s_origin: f64,
}

impl ReferencePath {
    pub fn new(
        points: Vec<[f64; 2]>,
        kind: SegmentKind,
        corridor_half_width: f64,
    ) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let points: Vec<Point2<f64>> = points.into_iter().map(Point2::from).collect();
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for i in 1..points.len() {
            let step = (points[i] - points[i - 1]).norm();
            if step <= MIN_POINT_SPACING {
                return Err(GeometryError::DegenerateSegment(i - 1, i));
            }
            cumulative.push(cumulative[i - 1] + step);
        }
        Ok(Self {
            points,
            cumulative_arclength: cumulative,
            kind,
            corridor_half_width,
            corridor_extent: None,
            s_origin: 0.0,
        })
    }

    /// Restricts vehicle association to the given raw arc-length range.
    pub fn with_corridor_extent(mut self, lo: f64, hi: f64) -> Self {
        self.corridor_extent = Some((lo, hi));
        self
    }

    pub fn corridor_extent(&self) -> Option<(f64, f64)> {
        self.corridor_extent
    }

    /// Whether the corridor exists at the (origin-anchored) arc length.
    pub fn corridor_covers(&self, s: f64) -> bool {
        match self.corridor_extent {
            None => true,
            Some((lo, hi)) => {
                let raw = s + self.s_origin;
                raw >= lo && raw <= hi
            }
        }
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn corridor_half_width(&self) -> f64 {
        self.corridor_half_width
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    /// Total polyline length [m].
    pub fn length(&self) -> f64 {
        *self.cumulative_arclength.last().unwrap()
    }

    /// Valid `s` range relative to the origin.
    pub fn s_range(&self) -> (f64, f64) {
        (-self.s_origin, self.length() - self.s_origin)
    }

    fn segment_count(&self) -> usize {
        self.points.len() - 1
    }

    /// Closest point on segment `i` to `p`, as (clamped parameter, squared distance).
    fn project_on_segment(&self, i: usize, p: Point2<f64>) -> (f64, f64) {
        let a = self.points[i];
        let b = self.points[i + 1];
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        let closest = a + ab * t;
        (t, (p - closest).norm_squared())
    }

    /// Orthogonal projection of `p` onto the polyline: per-segment closest
    /// point, then global minimum over segments.
    pub fn to_frenet(&self, p: Point2<f64>) -> Projection {
        let mut best = (0usize, 0.0f64, f64::INFINITY);
        for i in 0..self.segment_count() {
            let (t, d2) = self.project_on_segment(i, p);
            if d2 < best.2 {
                best = (i, t, d2);
            }
        }
        let (i, t, _) = best;
        let a = self.points[i];
        let b = self.points[i + 1];
        let seg = b - a;
        let seg_len = seg.norm();
        let tangent = seg / seg_len;
        let foot = a + seg * t;
        let offset = p - foot;
        // d > 0 to the left of travel: z-component of tangent × offset.
        let d = tangent.x * offset.y - tangent.y * offset.x;
        let s_raw = self.cumulative_arclength[i] + t * seg_len;

        let status = if i == 0 && t == 0.0 && (p - a).dot(&tangent) < 0.0 {
            ProjectionStatus::ClampedStart
        } else if i == self.segment_count() - 1 && t == 1.0 && (p - b).dot(&tangent) > 0.0 {
            ProjectionStatus::ClampedEnd
        } else {
            ProjectionStatus::Interior
        };

        Projection {
            state: FrenetState {
                s: s_raw - self.s_origin,
                d,
                path: self.kind,
            },
            status,
        }
    }

    /// Inverse of [`to_frenet`](Self::to_frenet) for in-range `s`.
    pub fn to_cartesian(&self, s: f64, d: f64) -> Result<Point2<f64>, GeometryError> {
        let (lo, hi) = self.s_range();
        // Tolerate round-off at the extremes.
        if s < lo - 1e-9 || s > hi + 1e-9 {
            return Err(GeometryError::ArcLengthOutOfRange { s, min: lo, max: hi });
        }
        let s_raw = (s + self.s_origin).clamp(0.0, self.length());
        let (foot, tangent) = self.interpolate(s_raw);
        let left = Vector2::new(-tangent.y, tangent.x);
        Ok(foot + left * d)
    }

    /// Unit tangent of the segment containing arc length `s` (origin-relative).
    pub fn tangent_at(&self, s: f64) -> Vector2<f64> {
        let s_raw = (s + self.s_origin).clamp(0.0, self.length());
        self.interpolate(s_raw).1
    }

    /// Centerline point at arc length `s` (origin-relative), clamped to range.
    pub fn point_at(&self, s: f64) -> Point2<f64> {
        let s_raw = (s + self.s_origin).clamp(0.0, self.length());
        self.interpolate(s_raw).0
    }

    fn interpolate(&self, s_raw: f64) -> (Point2<f64>, Vector2<f64>) {
        let idx = match self
            .cumulative_arclength
            .binary_search_by(|c| c.partial_cmp(&s_raw).unwrap())
        {
            Ok(i) => i.min(self.segment_count() - 1),
            Err(i) => i.saturating_sub(1).min(self.segment_count() - 1),
        };
        let a = self.points[idx];
        let b = self.points[idx + 1];
        let seg = b - a;
        let seg_len = seg.norm();
        let t = (s_raw - self.cumulative_arclength[idx]) / seg_len;
        (a + seg * t, seg / seg_len)
    }

    fn set_origin(&mut self, s_raw: f64) {
        self.s_origin = s_raw;
    }
}

/// The two reference paths of a merge area sharing one origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualPathFrame {
    pub slip: ReferencePath,
    pub main: ReferencePath,
    origin: Point2<f64>,
}

impl DualPathFrame {
    /// Builds the frame and anchors both `s` axes at the crossing point of
    /// the two polylines, falling back to the midpoint of the closest pair
    /// of points when they only meet tangentially.
    pub fn new(mut slip: ReferencePath, mut main: ReferencePath) -> Self {
        let origin = match polyline_intersection(&slip, &main) {
            Some(p) => p,
            None => closest_pair_midpoint(&slip, &main),
        };
        let slip_proj = slip.to_frenet(origin);
        let main_proj = main.to_frenet(origin);
        slip.set_origin(slip_proj.state.s);
        main.set_origin(main_proj.state.s);
        Self { slip, main, origin }
    }

    pub fn origin(&self) -> Point2<f64> {
        self.origin
    }

    pub fn path(&self, kind: SegmentKind) -> &ReferencePath {
        match kind {
            SegmentKind::SlipRoad => &self.slip,
            SegmentKind::MainCarriageway => &self.main,
        }
    }

    /// Associates `position` with the path whose corridor contains it.
    ///
    /// Both corridors containing the point is resolved by smaller |d|, then
    /// in favour of the main carriageway. A previous association gets an
    /// [`ASSOCIATION_HYSTERESIS`] bonus on both the corridor test and the
    /// |d| comparison so a merging vehicle switches paths only once.
    pub fn associate(
        &self,
        position: Point2<f64>,
        previous: Option<SegmentKind>,
    ) -> Result<SegmentKind, GeometryError> {
        // Main first: strict comparison below then keeps it on exact ties.
        let candidates = [SegmentKind::MainCarriageway, SegmentKind::SlipRoad];
        let mut best: Option<(SegmentKind, f64)> = None;
        for kind in candidates {
            let path = self.path(kind);
            let proj = path.to_frenet(position);
            if proj.status.is_clamped() || !path.corridor_covers(proj.state.s) {
                continue;
            }
            let bonus = if previous == Some(kind) {
                ASSOCIATION_HYSTERESIS
            } else {
                0.0
            };
            let abs_d = proj.state.d.abs();
            if abs_d > path.corridor_half_width + bonus {
                continue;
            }
            let score = abs_d - bonus;
            let better = match best {
                None => true,
                Some((_, best_score)) => score < best_score,
            };
            if better {
                best = Some((kind, score));
            }
        }
        best.map(|(kind, _)| kind)
            .ok_or(GeometryError::OutsideCorridors(position.x, position.y))
    }
}

/// First intersection point between two polylines, if any.
fn polyline_intersection(a: &ReferencePath, b: &ReferencePath) -> Option<Point2<f64>> {
    for i in 0..a.segment_count() {
        for j in 0..b.segment_count() {
            if let Some(p) = segment_intersection(
                a.points[i],
                a.points[i + 1],
                b.points[j],
                b.points[j + 1],
            ) {
                return Some(p);
            }
        }
    }
    None
}

fn segment_intersection(
    p1: Point2<f64>,
    p2: Point2<f64>,
    q1: Point2<f64>,
    q2: Point2<f64>,
) -> Option<Point2<f64>> {
    let r = p2 - p1;
    let s = q2 - q1;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = q1 - p1;
    let t = (qp.x * s.y - qp.y * s.x) / denom;
    let u = (qp.x * r.y - qp.y * r.x) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(p1 + r * t)
    } else {
        None
    }
}

/// Midpoint of the closest pair of sample points between two polylines.
fn closest_pair_midpoint(a: &ReferencePath, b: &ReferencePath) -> Point2<f64> {
    let mut best = (f64::INFINITY, Point2::origin());
    for pa in &a.points {
        for pb in &b.points {
            let d2 = (pa - pb).norm_squared();
            if d2 < best.0 {
                best = (d2, Point2::from((pa.coords + pb.coords) * 0.5));
            }
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn straight_x(len: f64, spacing: f64) -> ReferencePath {
        let n = (len / spacing).ceil() as usize + 1;
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [i as f64 * spacing, 0.0]).collect();
        ReferencePath::new(pts, SegmentKind::MainCarriageway, 5.0).unwrap()
    }

    /// Left-turning quarter circle of radius 100 centred at (0, 100),
    /// starting at the origin heading +x.
    fn quarter_circle(n: usize) -> ReferencePath {
        let pts: Vec<[f64; 2]> = (0..=n)
            .map(|i| {
                let phi = (i as f64 / n as f64) * (PI / 2.0);
                [100.0 * phi.sin(), 100.0 * (1.0 - phi.cos())]
            })
            .collect();
        ReferencePath::new(pts, SegmentKind::MainCarriageway, 5.0).unwrap()
    }

    #[test]
    fn axis_aligned_projection() {
        let path = straight_x(100.0, 1.0);
        let proj = path.to_frenet(Point2::new(10.0, 2.0));
        assert_abs_diff_eq!(proj.state.s, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(proj.state.d, 2.0, epsilon = 1e-12);
        assert_eq!(proj.status, ProjectionStatus::Interior);
    }

    #[test]
    fn point_on_path_has_zero_cross_track() {
        let path = straight_x(100.0, 0.5);
        let proj = path.to_frenet(Point2::new(37.5, 0.0));
        assert_abs_diff_eq!(proj.state.s, 37.5, epsilon = 1e-12);
        assert_abs_diff_eq!(proj.state.d, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quarter_circle_offset_point() {
        // Dense polyline oracle: 1e4 points. The probe sits at the 45° arc
        // position, 1 m outward of the circle; outward is to the right of a
        // left-turning path, so d = -1.
        let path = quarter_circle(10_000);
        let phi = PI / 4.0;
        let center = Point2::new(0.0, 100.0);
        let radial = Vector2::new(phi.sin(), -phi.cos());
        let p = center + radial * 101.0;
        let proj = path.to_frenet(p);
        assert_abs_diff_eq!(proj.state.s, PI * 100.0 / 4.0, epsilon = 1e-3);
        assert_abs_diff_eq!(proj.state.d, -1.0, epsilon = 1e-3);

        let back = path.to_cartesian(proj.state.s, proj.state.d).unwrap();
        assert!((back - p).norm() < 1e-3);
    }

    #[test]
    fn straight_to_cartesian() {
        let path = straight_x(50.0, 1.0);
        let p = path.to_cartesian(10.0, 0.0).unwrap();
        assert_abs_diff_eq!(p.x, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_random_points_straight() {
        let path = straight_x(200.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = Point2::new(rng.gen_range(1.0..199.0), rng.gen_range(-4.9..4.9));
            let proj = path.to_frenet(p);
            let back = path.to_cartesian(proj.state.s, proj.state.d).unwrap();
            assert!((back - p).norm() < 1e-6, "round trip error at {p:?}");
        }
    }

    #[test]
    fn extrapolation_is_flagged_and_clamped() {
        let path = straight_x(50.0, 1.0);
        let proj = path.to_frenet(Point2::new(-5.0, 1.0));
        assert_eq!(proj.status, ProjectionStatus::ClampedStart);
        assert_abs_diff_eq!(proj.state.s, 0.0, epsilon = 1e-12);

        let proj = path.to_frenet(Point2::new(55.0, 1.0));
        assert_eq!(proj.status, ProjectionStatus::ClampedEnd);

        assert!(path.to_cartesian(60.0, 0.0).is_err());
    }

    #[test]
    fn s_monotone_along_path() {
        let path = quarter_circle(500);
        let mut last = f64::NEG_INFINITY;
        for i in 0..200 {
            let phi = (i as f64 / 200.0) * (PI / 2.0) * 0.99;
            let p = Point2::new(100.0 * phi.sin(), 100.0 * (1.0 - phi.cos()));
            let s = path.to_frenet(p).state.s;
            assert!(s >= last, "s not monotone: {s} after {last}");
            last = s;
        }
    }

    #[test]
    fn d_sign_left_positive() {
        // Path heading +y: left of travel is -x.
        let pts: Vec<[f64; 2]> = (0..100).map(|i| [0.0, i as f64]).collect();
        let path = ReferencePath::new(pts, SegmentKind::MainCarriageway, 5.0).unwrap();
        let proj = path.to_frenet(Point2::new(-2.0, 50.0));
        assert!(proj.state.d > 0.0);
    }

    fn crossing_frame() -> DualPathFrame {
        // Main along +x through the origin; slip approaches from lower-left
        // and crosses the main path at (50, 0).
        let main = straight_x(200.0, 1.0);
        let slip_pts: Vec<[f64; 2]> = (0..=100)
            .map(|i| {
                let t = i as f64;
                [t, (t - 50.0) * 0.1]
            })
            .collect();
        let slip = ReferencePath::new(slip_pts, SegmentKind::SlipRoad, 2.0).unwrap();
        DualPathFrame::new(slip, main)
    }

    #[test]
    fn origin_at_crossing_point() {
        let frame = crossing_frame();
        assert_abs_diff_eq!(frame.origin().x, 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(frame.origin().y, 0.0, epsilon = 1e-9);
        // s measured from the crossing: upstream of it is negative.
        let proj = frame.main.to_frenet(Point2::new(10.0, 0.0));
        assert_abs_diff_eq!(proj.state.s, -40.0, epsilon = 1e-9);
    }

    #[test]
    fn association_rules() {
        let frame = crossing_frame();
        // On the main centerline, far from the slip corridor.
        let kind = frame.associate(Point2::new(150.0, 0.0), None).unwrap();
        assert_eq!(kind, SegmentKind::MainCarriageway);
        // On the slip centerline upstream of the merge.
        let kind = frame.associate(Point2::new(10.0, -4.0), None).unwrap();
        assert_eq!(kind, SegmentKind::SlipRoad);
        // Equidistant inside the merge area: tie broken to main.
        let kind = frame.associate(Point2::new(50.0, 0.0), None).unwrap();
        assert_eq!(kind, SegmentKind::MainCarriageway);
        // Outside both corridors.
        assert!(frame.associate(Point2::new(150.0, 30.0), None).is_err());
    }

    #[test]
    fn association_hysteresis_holds_previous_path() {
        let frame = crossing_frame();
        // A point slightly closer to the main path keeps its slip association
        // when the margin is below the hysteresis.
        let p = Point2::new(49.0, -0.04);
        let free = frame.associate(p, None).unwrap();
        assert_eq!(free, SegmentKind::MainCarriageway);
        let held = frame.associate(p, Some(SegmentKind::SlipRoad)).unwrap();
        assert_eq!(held, SegmentKind::SlipRoad);
    }

    #[test]
    fn tangential_paths_fall_back_to_closest_pair() {
        let main = straight_x(100.0, 1.0);
        // Parallel path 3 m right of main, never crossing.
        let pts: Vec<[f64; 2]> = (0..=100).map(|i| [i as f64, -3.0]).collect();
        let slip = ReferencePath::new(pts, SegmentKind::SlipRoad, 2.0).unwrap();
        let frame = DualPathFrame::new(slip, main);
        assert_abs_diff_eq!(frame.origin().y, -1.5, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_path_rejected() {
        let err = ReferencePath::new(
            vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
            SegmentKind::MainCarriageway,
            2.0,
        );
        assert!(err.is_err());
    }
}
