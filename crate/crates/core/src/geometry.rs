//! Road topology and the planar geometry the vehicles and roadside units use.
//!
//! Everything here is pure: the dead-reckoned [`PathRecord`], angle-interval
//! arrival classification against a [`NeighborTable`], lane-change detection,
//! and position-to-lane resolution over per-lane coordinate strips.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::AgentId;

/// Default lane width in meters.
pub const DEFAULT_LANE_WIDTH: f64 = 3.5;

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub u32);

impl SegmentId {
    /// Pseudo-segment for vehicles that entered the network from outside.
    pub const EXTERNAL: SegmentId = SegmentId(0);
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LaneId(pub u32);

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// A (segment, lane) pair.
pub type LaneRef = (SegmentId, LaneId);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add_scaled(self, dir: Point, k: f64) -> Point {
        Point::new(self.x + dir.x * k, self.y + dir.y * k)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Unit vector at `deg` degrees counter-clockwise from +x.
    pub fn unit(deg: f64) -> Point {
        let r = deg.to_radians();
        Point::new(r.cos(), r.sin())
    }
}

/// Normalizes an angle in degrees into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Signed smallest rotation from `from` to `to`, in `(-180, 180]`.
pub fn angle_diff_deg(from: f64, to: f64) -> f64 {
    let d = normalize_deg(to - from);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Travel direction of a lane relative to its segment axis.
///
/// `Right` lanes carry traffic from the segment's start node to its end node
/// and sit on the right of the axis; `Left` lanes carry the reverse flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
        }
    }
}

/// The (Lid, L, V, D) lane tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub lid: LaneId,
    pub length_m: f64,
    pub avg_speed_limit: f64,
    pub direction: Direction,
}

/// Closed interval of movement angles in degrees.
///
/// `lo` is kept in `[0, 360)`; `hi` may exceed 360 for intervals that wrap
/// past the +x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleInterval {
    pub lo: f64,
    pub hi: f64,
}

impl AngleInterval {
    /// Builds an interval, normalizing `lo` into `[0, 360)` and keeping the width.
    pub fn new(lo: f64, hi: f64) -> Self {
        let width = hi - lo;
        let lo_n = normalize_deg(lo);
        Self {
            lo: lo_n,
            hi: lo_n + width,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, angle_deg: f64) -> bool {
        let a = normalize_deg(angle_deg);
        (a >= self.lo && a <= self.hi) || (a + 360.0 >= self.lo && a + 360.0 <= self.hi)
    }

    pub fn overlaps(&self, other: &AngleInterval) -> bool {
        [-360.0, 0.0, 360.0]
            .iter()
            .any(|shift| self.lo <= other.hi + shift && other.lo + shift <= self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub from_rid: SegmentId,
    pub from_lid: LaneId,
    pub interval: AngleInterval,
    pub to_lid: LaneId,
}

/// The set of (Rid_j, Lid_j, I_alpha, Lid_i) tuples an RSU broadcasts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub entries: Vec<NeighborEntry>,
}

impl NeighborTable {
    pub fn new(entries: Vec<NeighborEntry>) -> Self {
        Self { entries }
    }

    /// Checks `lo < hi` and pairwise disjointness per origin lane.
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.interval.lo < e.interval.hi) || e.interval.width() >= 360.0 {
                return Err(GeometryError::BadInterval { index: i });
            }
            for other in &self.entries[i + 1..] {
                if other.from_rid == e.from_rid
                    && other.from_lid == e.from_lid
                    && other.to_lid != e.to_lid
                    && e.interval.overlaps(&other.interval)
                {
                    return Err(GeometryError::OverlappingIntervals {
                        from_rid: e.from_rid,
                        from_lid: e.from_lid,
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether any entry describes arrivals from `origin`.
    pub fn has_origin(&self, origin: LaneRef) -> bool {
        self.entries
            .iter()
            .any(|e| (e.from_rid, e.from_lid) == origin)
    }

    /// Lanes this table can classify arrivals into, sorted.
    pub fn target_lanes(&self) -> Vec<LaneId> {
        let set: BTreeSet<LaneId> = self.entries.iter().map(|e| e.to_lid).collect();
        set.into_iter().collect()
    }
}

/// Axis-aligned rectangle, boundary inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(a: Point, b: Point) -> Self {
        Self {
            min: Point::new(a.x.min(b.x), a.y.min(b.y)),
            max: Point::new(a.x.max(b.x), a.y.max(b.y)),
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x - EPS
            && p.x <= self.max.x + EPS
            && p.y >= self.min.y - EPS
            && p.y <= self.max.y + EPS
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.min.x + self.max.x) / 2.0,
            (self.min.y + self.max.y) / 2.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneStrip {
    pub lid: LaneId,
    pub rect: Rect,
}

/// A road segment spanning two signalized junctions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub rid: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Lane ends at the edge of each junction box; the axis runs from `start` to `end`.
    pub start: Point,
    pub end: Point,
    pub lanes: Vec<Lane>,
    pub rsu_ids: Vec<AgentId>,
    pub mrsu_id: AgentId,
    pub neighbor_table: NeighborTable,
    pub rpos: Option<Rect>,
    pub lpos: Vec<LaneStrip>,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    /// Heading of the segment axis in degrees.
    pub fn heading_deg(&self) -> f64 {
        let d = self.end.sub(self.start);
        normalize_deg(d.y.atan2(d.x).to_degrees())
    }

    pub fn axis(&self) -> Point {
        let d = self.end.sub(self.start);
        let n = d.norm();
        Point::new(d.x / n, d.y / n)
    }

    pub fn lane(&self, lid: LaneId) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.lid == lid)
    }

    /// Signed lateral offset of a lane's centerline from the axis (left positive).
    ///
    /// Right-direction lanes stack outward on the right of the axis, left-direction
    /// lanes on the left, in declaration order.
    pub fn lane_offset(&self, lid: LaneId, lane_width: f64) -> Option<f64> {
        let lane = self.lane(lid)?;
        let rank = self
            .lanes
            .iter()
            .filter(|l| l.direction == lane.direction)
            .position(|l| l.lid == lid)?;
        let off = (rank as f64 + 0.5) * lane_width;
        Some(match lane.direction {
            Direction::Right => -off,
            Direction::Left => off,
        })
    }

    /// World position of a point `s` meters along a lane in its travel direction.
    pub fn lane_point(&self, lid: LaneId, s: f64, lane_width: f64) -> Option<Point> {
        let lane = self.lane(lid)?;
        let axis = self.axis();
        let normal = Point::new(-axis.y, axis.x);
        let off = self.lane_offset(lid, lane_width)?;
        let along = match lane.direction {
            Direction::Right => s,
            Direction::Left => self.length() - s,
        };
        Some(self.start.add_scaled(axis, along).add_scaled(normal, off))
    }

    /// Heading of travel on a lane in degrees.
    pub fn lane_heading_deg(&self, lid: LaneId) -> Option<f64> {
        let lane = self.lane(lid)?;
        Some(match lane.direction {
            Direction::Right => self.heading_deg(),
            Direction::Left => normalize_deg(self.heading_deg() + 180.0),
        })
    }

    /// Projection of a world point onto the road-direction axis (meters from `start`).
    pub fn project_onto_axis(&self, p: Point) -> f64 {
        p.sub(self.start).dot(self.axis())
    }

    /// Lane strips and the enclosing extent, derived from the lane layout.
    pub fn derive_positioning(&mut self, lane_width: f64) {
        let axis = self.axis();
        let normal = Point::new(-axis.y, axis.x);
        let mut strips = Vec::new();
        for lane in &self.lanes {
            let off = self.lane_offset(lane.lid, lane_width).unwrap_or(0.0);
            let a = self
                .start
                .add_scaled(normal, off - lane_width / 2.0);
            let b = self
                .end
                .add_scaled(normal, off + lane_width / 2.0);
            strips.push(LaneStrip {
                lid: lane.lid,
                rect: Rect::new(a, b),
            });
        }
        strips.sort_by_key(|s| s.lid);
        let mut extent = strips[0].rect;
        for s in &strips[1..] {
            extent = Rect::new(
                Point::new(extent.min.x.min(s.rect.min.x), extent.min.y.min(s.rect.min.y)),
                Point::new(extent.max.x.max(s.rect.max.x), extent.max.y.max(s.rect.max.y)),
            );
        }
        self.rpos = Some(extent);
        self.lpos = strips;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub String);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LightId(pub String);

impl fmt::Display for LightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SegmentEnd {
    Start,
    End,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: NodeId,
    pub pos: Point,
    /// Segment ends attached here.
    pub segment_ends: Vec<(SegmentId, SegmentEnd)>,
    pub lights: Vec<LightId>,
    /// Signal controlling each lane that ends here.
    pub approach_lights: Vec<(LaneRef, LightId)>,
    pub lbs: AgentId,
}

impl Intersection {
    pub fn light_for(&self, lane: LaneRef) -> Option<&LightId> {
        self.approach_lights
            .iter()
            .find(|(l, _)| *l == lane)
            .map(|(_, id)| id)
    }
}

/// A network terminal where traffic enters or leaves the modeled area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub id: NodeId,
    pub pos: Point,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub segments: Vec<Segment>,
    pub intersections: Vec<Intersection>,
    pub terminals: Vec<Terminal>,
    /// Undirected LBS adjacency, stored with the smaller id first.
    pub lbs_neighbor_links: BTreeSet<(AgentId, AgentId)>,
}

impl RoadNetwork {
    pub fn segment(&self, rid: SegmentId) -> Option<&Segment> {
        self.segments.iter().find(|s| s.rid == rid)
    }

    pub fn intersection(&self, id: &NodeId) -> Option<&Intersection> {
        self.intersections.iter().find(|i| &i.id == id)
    }

    pub fn intersection_by_lbs(&self, lbs: AgentId) -> Option<&Intersection> {
        self.intersections.iter().find(|i| i.lbs == lbs)
    }

    pub fn node_pos(&self, id: &NodeId) -> Option<Point> {
        self.intersection(id)
            .map(|i| i.pos)
            .or_else(|| self.terminals.iter().find(|t| &t.id == id).map(|t| t.pos))
    }

    pub fn lbs_neighbors(&self, lbs: AgentId) -> Vec<AgentId> {
        self.lbs_neighbor_links
            .iter()
            .filter_map(|&(a, b)| {
                if a == lbs {
                    Some(b)
                } else if b == lbs {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn link_lbs(&mut self, a: AgentId, b: AgentId) {
        if a != b {
            self.lbs_neighbor_links.insert((a.min(b), a.max(b)));
        }
    }

    /// Node a lane's traffic enters the segment from.
    pub fn lane_entry_node(&self, (rid, lid): LaneRef) -> Option<&NodeId> {
        let seg = self.segment(rid)?;
        Some(match seg.lane(lid)?.direction {
            Direction::Right => &seg.from_node,
            Direction::Left => &seg.to_node,
        })
    }

    /// Node a lane's traffic leaves the segment at.
    pub fn lane_exit_node(&self, (rid, lid): LaneRef) -> Option<&NodeId> {
        let seg = self.segment(rid)?;
        Some(match seg.lane(lid)?.direction {
            Direction::Right => &seg.to_node,
            Direction::Left => &seg.from_node,
        })
    }

    /// Every permitted movement through an intersection: lanes ending at a
    /// junction connect to the lanes of other segments starting there.
    pub fn connections(&self) -> Vec<(LaneRef, LaneRef)> {
        let mut out = Vec::new();
        for from in &self.segments {
            for fl in &from.lanes {
                let Some(node) = self.lane_exit_node((from.rid, fl.lid)) else { continue };
                if self.intersection(node).is_none() {
                    continue;
                }
                for to in self.segments.iter().filter(|s| s.rid != from.rid) {
                    for tl in &to.lanes {
                        if self.lane_entry_node((to.rid, tl.lid)) == Some(node) {
                            out.push(((from.rid, fl.lid), (to.rid, tl.lid)));
                        }
                    }
                }
            }
        }
        out
    }

    /// Checks the structural invariants of the topology.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let mut rids = BTreeSet::new();
        for seg in &self.segments {
            if seg.rid == SegmentId::EXTERNAL || !rids.insert(seg.rid) {
                return Err(GeometryError::Topology(format!(
                    "segment id {} is reserved or duplicated",
                    seg.rid
                )));
            }
            if seg.lanes.is_empty() {
                return Err(GeometryError::Topology(format!("{} has no lanes", seg.rid)));
            }
            let mut lids = BTreeSet::new();
            for lane in &seg.lanes {
                if !lids.insert(lane.lid) {
                    return Err(GeometryError::Topology(format!(
                        "{} repeats lane {}",
                        seg.rid, lane.lid
                    )));
                }
                if !(lane.length_m > 0.0) || !(lane.avg_speed_limit > 0.0) {
                    return Err(GeometryError::Topology(format!(
                        "{}:{} needs positive length and speed limit",
                        seg.rid, lane.lid
                    )));
                }
            }
            for node in [&seg.from_node, &seg.to_node] {
                if self.node_pos(node).is_none() {
                    return Err(GeometryError::Topology(format!(
                        "{} attaches to unknown node {}",
                        seg.rid, node
                    )));
                }
            }
            if let Some(rpos) = &seg.rpos {
                if seg.lpos.iter().any(|s| !rpos.contains_rect(&s.rect)) {
                    return Err(GeometryError::Topology(format!(
                        "{} has a lane strip outside its extent",
                        seg.rid
                    )));
                }
            }
            seg.neighbor_table.validate()?;
        }
        for ix in &self.intersections {
            if ix.lights.is_empty() {
                return Err(GeometryError::Topology(format!(
                    "intersection {} has no traffic lights",
                    ix.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("path start and end coincide")]
    DegeneratePath,
    #[error("segment carries no lane coordinate strips")]
    MissingLposData,
    #[error("neighbor entry {index} has an empty or full-circle interval")]
    BadInterval { index: usize },
    #[error("overlapping angle intervals for arrivals from {from_rid}:{from_lid}")]
    OverlappingIntervals { from_rid: SegmentId, from_lid: LaneId },
    #[error("invalid topology: {0}")]
    Topology(String),
}

/// Dead-reckoned trajectory since the last segment entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub points: Vec<Point>,
    /// Current heading estimate in degrees.
    pub heading_deg: f64,
    /// Reference horizontal that chord angles are measured against.
    pub reference_deg: f64,
    pub origin_ref: LaneRef,
}

impl PathRecord {
    pub fn new(origin_ref: LaneRef, heading_deg: f64) -> Self {
        Self {
            points: vec![Point::ORIGIN],
            heading_deg,
            reference_deg: 0.0,
            origin_ref,
        }
    }

    /// Drops the recorded path and starts a new one at the zero offset.
    pub fn reset(&mut self, origin_ref: LaneRef) {
        self.points.clear();
        self.points.push(Point::ORIGIN);
        self.origin_ref = origin_ref;
    }

    pub fn last(&self) -> Point {
        *self.points.last().expect("path always has its origin point")
    }

    /// Appends one dead-reckoned point.
    ///
    /// The heading turns at `steering_gain * wheel_angle` degrees per second and
    /// the arc is integrated exactly for the step, so a constant wheel angle
    /// yields the same endpoint regardless of how the interval is subdivided.
    pub fn record_step(&mut self, wheel_angle_deg: f64, speed: f64, dt: f64, steering_gain: f64) {
        assert!(dt > 0.0, "dt must be positive");
        assert!(speed >= 0.0, "speed must be non-negative");
        let rate = (steering_gain * wheel_angle_deg).to_radians();
        let h0 = self.heading_deg.to_radians();
        let h1 = h0 + rate * dt;
        let from = self.last();
        let next = if rate.abs() < 1e-12 {
            Point::new(from.x + speed * dt * h0.cos(), from.y + speed * dt * h0.sin())
        } else {
            let r = speed / rate;
            Point::new(
                from.x + r * (h1.sin() - h0.sin()),
                from.y - r * (h1.cos() - h0.cos()),
            )
        };
        self.points.push(next);
        self.heading_deg = normalize_deg(h1.to_degrees());
    }

    /// Straight-line distance from the first to the last point.
    pub fn chord_length(&self) -> f64 {
        self.points[0].dist(self.last())
    }
}

/// Angle in `[0, 360)` of the start-to-end chord against the reference horizontal.
pub fn path_heading_angle(path: &PathRecord) -> Result<f64, GeometryError> {
    let d = path.last().sub(path.points[0]);
    if d.norm() < EPS {
        return Err(GeometryError::DegeneratePath);
    }
    Ok(normalize_deg(d.y.atan2(d.x).to_degrees() - path.reference_deg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arrival {
    Lane(LaneId),
    Unclassified,
}

/// Resolves which lane a vehicle arrived on from its chord angle.
pub fn classify_arrival(path: &PathRecord, table: &NeighborTable) -> Result<Arrival, GeometryError> {
    let angle = path_heading_angle(path)?;
    Ok(table
        .entries
        .iter()
        .filter(|e| (e.from_rid, e.from_lid) == path.origin_ref)
        .find(|e| e.interval.contains(angle))
        .map_or(Arrival::Unclassified, |e| Arrival::Lane(e.to_lid)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneChange {
    SameLane,
    MovedLeft,
    MovedRight,
}

/// Detects a lane change from the chord of `path` relative to the lane axis
/// (`path.reference_deg`).
///
/// The angle is taken between the chord and the right-hand normal of the lane
/// axis: a leftward move makes it obtuse, a rightward move acute.
pub fn classify_lane_change(path: &PathRecord, lane_width: f64) -> Result<LaneChange, GeometryError> {
    let d = path.last().sub(path.points[0]);
    let len = d.norm();
    if len < EPS {
        return Err(GeometryError::DegeneratePath);
    }
    let axis = Point::unit(path.reference_deg);
    let left = Point::new(-axis.y, axis.x);
    let right = Point::new(axis.y, -axis.x);
    let lateral = d.dot(left);
    let angle = (d.dot(right) / len).clamp(-1.0, 1.0).acos().to_degrees();
    let tol = 1e-9;
    Ok(if lateral >= lane_width - tol && angle > 90.0 {
        LaneChange::MovedLeft
    } else if lateral <= -lane_width + tol && angle < 90.0 {
        LaneChange::MovedRight
    } else {
        LaneChange::SameLane
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneHit {
    Lane(LaneId),
    OutOfSegment,
}

/// Finds the lane strip containing `pos`; shared boundaries go to the lowest lid.
pub fn lane_from_position(pos: Point, segment: &Segment) -> Result<LaneHit, GeometryError> {
    if segment.lpos.is_empty() {
        return Err(GeometryError::MissingLposData);
    }
    if let Some(rpos) = &segment.rpos {
        if !rpos.contains(pos) {
            return Ok(LaneHit::OutOfSegment);
        }
    }
    let mut strips: Vec<&LaneStrip> = segment.lpos.iter().collect();
    strips.sort_by_key(|s| s.lid);
    Ok(strips
        .into_iter()
        .find(|s| s.rect.contains(pos))
        .map_or(LaneHit::OutOfSegment, |s| LaneHit::Lane(s.lid)))
}
