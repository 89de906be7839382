//! The world model: agent tracks, maps, the ego-centric critical region and
//! unseen-vehicle identification.

mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use synth::{synth_generate, GeneratorConfig, MapTemplate, Profile};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, EgoFrame, OrientedBox, Polygon, Pose, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Ego,
    Vehicle,
    Pedestrian,
}

/// One agent over the scene timeline. Timesteps are integer frame indices at
/// the scene rate; missing frames are simply absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    pub class: AgentClass,
    /// `[length, width]` in meters.
    pub extent: [f64; 2],
    pub poses: BTreeMap<i64, Pose>,
}

impl AgentTrack {
    pub fn new(id: impl Into<String>, class: AgentClass, length: f64, width: f64) -> Self {
        Self {
            id: id.into(),
            class,
            extent: [length, width],
            poses: BTreeMap::new(),
        }
    }

    pub fn with_pose(mut self, timestep: i64, pose: Pose) -> Self {
        self.poses.insert(timestep, pose);
        self
    }

    pub fn length(&self) -> f64 {
        self.extent[0]
    }

    pub fn width(&self) -> f64 {
        self.extent[1]
    }

    pub fn pose_at(&self, timestep: i64) -> Option<Pose> {
        self.poses.get(&timestep).copied()
    }

    pub fn footprint(&self, timestep: i64) -> Option<OrientedBox> {
        self.pose_at(timestep)
            .map(|p| OrientedBox::new(p, self.length(), self.width()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(Error::Scene(format!("agent `{}` has non-positive extent", self.id)));
        }
        if let Some((t, _)) = self.poses.iter().find(|(_, p)| !p.is_finite()) {
            return Err(Error::Scene(format!("agent `{}` has a non-finite pose at {t}", self.id)));
        }
        Ok(())
    }
}

/// A directed lane centerline; traffic flows from the first to the last vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lane(pub Vec<[f64; 2]>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub rate_hz: u32,
    pub drivable: Vec<Polygon>,
    #[serde(default)]
    pub lanes: Vec<Lane>,
    pub agents: Vec<AgentTrack>,
    pub ego_id: String,
}

impl Scene {
    pub fn ego(&self) -> Result<&AgentTrack> {
        let mut it = self.agents.iter().filter(|a| a.id == self.ego_id);
        match (it.next(), it.next()) {
            (Some(a), None) if a.class == AgentClass::Ego => Ok(a),
            (Some(_), None) => Err(Error::Scene(format!("agent `{}` is not of class ego", self.ego_id))),
            (None, _) => Err(Error::Scene(format!("ego `{}` not found", self.ego_id))),
            _ => Err(Error::Scene(format!("duplicate agent id `{}`", self.ego_id))),
        }
    }

    /// The ego pose at `timestep`, the anchor of every ego-centric grid.
    pub fn ego_pose(&self, timestep: i64) -> Result<Pose> {
        self.ego()?.pose_at(timestep).ok_or_else(|| Error::NoEgoAnchor {
            ego: self.ego_id.clone(),
            timestep,
        })
    }

    pub fn agent(&self, id: &str) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn is_drivable(&self, x: f64, y: f64) -> bool {
        self.drivable.iter().any(|poly| poly.contains(x, y))
    }

    /// Checks the structural invariants of the world model.
    pub fn validate(&self) -> Result<()> {
        self.ego()?;
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(a.id.as_str()) {
                return Err(Error::Scene(format!("duplicate agent id `{}`", a.id)));
            }
            if a.class == AgentClass::Ego && a.id != self.ego_id {
                return Err(Error::Scene(format!("second ego agent `{}`", a.id)));
            }
            a.validate()?;
        }
        if let Some(i) = self.drivable.iter().position(|p| !p.is_simple()) {
            return Err(Error::Scene(format!("drivable polygon {i} is not simple")));
        }
        if self.rate_hz == 0 {
            return Err(Error::Scene("rate_hz must be positive".into()));
        }
        Ok(())
    }
}

/// Ego-centric rectangle of integer pixel coordinates
/// `{(x, y) | l <= x <= p, m <= y <= k}`; `x` grows to the right of the ego,
/// `y` grows forward, and the ego center is pixel `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalRegion {
    pub l: i32,
    pub p: i32,
    pub m: i32,
    pub k: i32,
    /// Meters per pixel.
    pub resolution: f64,
}

impl CriticalRegion {
    pub fn new(l: i32, p: i32, m: i32, k: i32, resolution: f64) -> Result<Self> {
        let r = Self { l, p, m, k, resolution };
        r.validate()?;
        Ok(r)
    }

    /// 25 m to each side, 40 m ahead, 10 m behind at 0.1 m/px.
    pub fn full_scale() -> Self {
        Self { l: -250, p: 249, m: -100, k: 399, resolution: 0.1 }
    }

    /// The 100×100 desk-scale region at 0.5 m/px with the same proportions.
    pub fn desk() -> Self {
        Self { l: -50, p: 49, m: -20, k: 79, resolution: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l >= self.p || self.m >= self.k {
            return Err(Error::Config(format!(
                "critical region needs l < p and m < k, got l={} p={} m={} k={}",
                self.l, self.p, self.m, self.k
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        Ok(())
    }

    /// Number of pixel rows, `k - m + 1`.
    pub fn height(&self) -> usize {
        (self.k - self.m + 1) as usize
    }

    /// Number of pixel columns, `p - l + 1`.
    pub fn width(&self) -> usize {
        (self.p - self.l + 1) as usize
    }

    /// Ego-frame meters of the center of pixel `(row, col)`.
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.l + col as i32;
        let y = self.k - row as i32;
        (x as f64 * self.resolution, y as f64 * self.resolution)
    }

    /// Nearest pixel to an ego-frame point; may lie outside the grid.
    #[inline]
    pub fn local_to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let px = (x / self.resolution).round() as i64;
        let py = (y / self.resolution).round() as i64;
        (self.k as i64 - py, px - self.l as i64)
    }

    /// The area covered by the region's pixel cells, in ego-frame meters.
    pub fn extent(&self) -> Rect {
        let r = self.resolution;
        Rect {
            xmin: (self.l as f64 - 0.5) * r,
            xmax: (self.p as f64 + 0.5) * r,
            ymin: (self.m as f64 - 0.5) * r,
            ymax: (self.k as f64 + 0.5) * r,
        }
    }

    /// Inclusive pixel window `(row0, row1, col0, col1)` that can contain
    /// centers of a local-frame box, clipped to the grid. `None` if disjoint.
    pub fn pixel_window(&self, b: &OrientedBox) -> Option<(usize, usize, usize, usize)> {
        let (xmin, ymin, xmax, ymax) = b.bounds();
        let r = self.resolution;
        let c0 = ((xmin / r).floor() as i64 - self.l as i64).max(0);
        let c1 = ((xmax / r).ceil() as i64 - self.l as i64).min(self.width() as i64 - 1);
        let r0 = (self.k as i64 - (ymax / r).ceil() as i64).max(0);
        let r1 = (self.k as i64 - (ymin / r).floor() as i64).min(self.height() as i64 - 1);
        if c0 > c1 || r0 > r1 {
            None
        } else {
            Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
        }
    }
}

/// History and prediction window around the current frame index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    /// `H`, number of history timesteps.
    pub history: usize,
    /// `T`, number of future timesteps.
    pub future: usize,
    /// Index of the current frame `t`.
    pub current: i64,
}

impl Horizon {
    pub fn new(history: usize, future: usize, current: i64) -> Result<Self> {
        let h = Self { history, future, current };
        h.validate()?;
        Ok(h)
    }

    /// `H = 20`, `T = 30` at 10 Hz with the current frame at index 20.
    pub fn full_scale() -> Self {
        Self { history: 20, future: 30, current: 20 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history < 1 || self.future < 1 {
            return Err(Error::Config("horizon needs H >= 1 and T >= 1".into()));
        }
        Ok(())
    }

    pub fn t(&self) -> i64 {
        self.current
    }

    pub fn horizon_t(&self) -> usize {
        self.future
    }

    /// Total timeline length `H + T + 1` frames from `t - H` to `t + T`.
    pub fn frames(&self) -> usize {
        self.history + self.future + 1
    }
}

/// Ids of agents whose footprint at `timestep` intersects the region placed
/// in `frame`.
pub fn agents_in_frame(
    scene: &Scene,
    region: &CriticalRegion,
    frame: &EgoFrame,
    timestep: i64,
) -> BTreeSet<String> {
    let rect = region.extent();
    scene
        .agents
        .iter()
        .filter(|a| {
            a.footprint(timestep)
                .map(|b| frame.box_to_local(&b).intersects_rect(&rect))
                .unwrap_or(false)
        })
        .map(|a| a.id.clone())
        .collect()
}

/// Ids of agents whose footprint at `timestep` intersects the critical region
/// anchored at the ego pose of that same timestep. When the ego has no pose
/// at `timestep` the closest ego pose in time anchors the region; an empty
/// ego track yields an empty set.
pub fn agents_in_region(scene: &Scene, region: &CriticalRegion, timestep: i64) -> BTreeSet<String> {
    match scene.ego().ok().and_then(|e| nearest_pose(e, timestep)) {
        Some(anchor) => agents_in_frame(scene, region, &EgoFrame::new(anchor), timestep),
        None => BTreeSet::new(),
    }
}

fn nearest_pose(track: &AgentTrack, timestep: i64) -> Option<Pose> {
    if let Some(p) = track.pose_at(timestep) {
        return Some(p);
    }
    let before = track.poses.range(..timestep).next_back();
    let after = track.poses.range(timestep..).next();
    match (before, after) {
        (Some((tb, pb)), Some((ta, pa))) => Some(if timestep - tb <= ta - timestep { *pb } else { *pa }),
        (Some((_, p)), None) | (None, Some((_, p))) => Some(*p),
        (None, None) => None,
    }
}

/// Vehicles that never touch the critical region at or before the current
/// frame (region anchored at the ego pose of each past frame) but touch the
/// frozen current-frame region at some frame in `(t, t + T]`.
///
/// An agent that leaves and later re-enters is not unseen: only agents never
/// present at or before `t` qualify.
pub fn unseen_agent_ids(scene: &Scene, region: &CriticalRegion, horizon: &Horizon) -> Result<BTreeSet<String>> {
    let ego = scene.ego()?;
    let frame = EgoFrame::new(scene.ego_pose(horizon.current)?);
    Ok(scene
        .agents
        .iter()
        .filter(|a| a.class == AgentClass::Vehicle && is_unseen(a, ego, &frame, region, horizon))
        .map(|a| a.id.clone())
        .collect())
}

/// Per-agent test behind [`unseen_agent_ids`]; `frame` is the ego frame at `t`.
pub(crate) fn is_unseen(
    agent: &AgentTrack,
    ego: &AgentTrack,
    frame: &EgoFrame,
    region: &CriticalRegion,
    horizon: &Horizon,
) -> bool {
    let t = horizon.current;
    let rect = region.extent();
    let seen = agent.poses.range(..=t).any(|(&ts, pose)| {
        let anchor = nearest_pose(ego, ts).unwrap_or(frame.origin());
        let b = OrientedBox::new(*pose, agent.length(), agent.width());
        EgoFrame::new(anchor).box_to_local(&b).intersects_rect(&rect)
    });
    !seen
        && (1..=horizon.future as i64).any(|dt| {
            agent
                .footprint(t + dt)
                .map(|b| frame.box_to_local(&b).intersects_rect(&rect))
                .unwrap_or(false)
        })
}

/// Resamples a track recorded at `src_hz` to `dst_hz` (an integer multiple).
/// Positions are interpolated linearly, headings along the shortest arc, and
/// source keyframes are kept exactly. Only adjacent source frames are
/// bridged; gaps in the source remain gaps.
pub fn interpolate_track(track: &AgentTrack, src_hz: u32, dst_hz: u32) -> Result<AgentTrack> {
    if src_hz == 0 || dst_hz == 0 || dst_hz % src_hz != 0 {
        return Err(Error::RateMismatch { src: src_hz, dst: dst_hz });
    }
    let factor = (dst_hz / src_hz) as i64;
    let mut poses = BTreeMap::new();
    let keys: Vec<(i64, Pose)> = track.poses.iter().map(|(&k, &p)| (k, p)).collect();
    for (i, &(k, p)) in keys.iter().enumerate() {
        poses.insert(k * factor, p);
        if let Some(&(k2, p2)) = keys.get(i + 1) {
            if k2 != k + 1 {
                continue;
            }
            let dyaw = angle_diff(p.yaw, p2.yaw);
            for j in 1..factor {
                let a = j as f64 / factor as f64;
                poses.insert(
                    k * factor + j,
                    Pose::new(p.x + a * (p2.x - p.x), p.y + a * (p2.y - p.y), p.yaw + a * dyaw),
                );
            }
        }
    }
    Ok(AgentTrack {
        id: track.id.clone(),
        class: track.class,
        extent: track.extent,
        poses,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    pub(crate) fn scene_with(agents: Vec<AgentTrack>) -> Scene {
        let mut all = vec![AgentTrack::new("ego", AgentClass::Ego, 4.5, 2.0)];
        for t in 0..=50 {
            all[0].poses.insert(t, Pose::new(0.0, 0.0, PI / 2.0));
        }
        all.extend(agents);
        Scene {
            id: "s".into(),
            rate_hz: 10,
            drivable: vec![Polygon::rect(-100.0, -100.0, 100.0, 100.0)],
            lanes: vec![],
            agents: all,
            ego_id: "ego".into(),
        }
    }

    #[test]
    fn region_geometry() {
        let r = CriticalRegion::full_scale();
        assert_eq!((r.height(), r.width()), (500, 500));
        let d = CriticalRegion::desk();
        assert_eq!((d.height(), d.width()), (100, 100));
        assert!(CriticalRegion::new(5, 5, 0, 1, 0.1).is_err());
        assert!(CriticalRegion::new(0, 1, 0, 1, 0.0).is_err());
        assert_eq!(r.local_to_pixel(0.0, 0.0), (399, 250));
    }

    #[test]
    fn ego_is_in_region_far_agent_is_not() {
        let far = AgentTrack::new("far", AgentClass::Vehicle, 4.0, 2.0).with_pose(20, Pose::new(1000.0, 1000.0, 0.0));
        let s = scene_with(vec![far]);
        let ids = agents_in_region(&s, &CriticalRegion::full_scale(), 20);
        assert!(ids.contains("ego"));
        assert!(!ids.contains("far"));
    }

    #[test]
    fn straddling_agent_is_included() {
        // Ego faces +y in the world, so world +y is ego-forward. The region
        // front edge is at 39.95 m; put the box center 0.5 m beyond it.
        let r = CriticalRegion::full_scale();
        let edge = r.extent().ymax;
        let a = AgentTrack::new("a", AgentClass::Vehicle, 4.0, 2.0).with_pose(20, Pose::new(0.0, edge + 0.5, PI / 2.0));
        let s = scene_with(vec![a]);
        // oracle: the box spans [edge - 1.5, edge + 2.5] along y, overlapping the region
        assert!(agents_in_region(&s, &r, 20).contains("a"));
    }

    #[test]
    fn unseen_definitions() {
        let r = CriticalRegion::full_scale();
        let h = Horizon::full_scale();
        let mut always = AgentTrack::new("always", AgentClass::Vehicle, 4.0, 2.0);
        let mut late = AgentTrack::new("late", AgentClass::Vehicle, 4.0, 2.0);
        let mut at_t = AgentTrack::new("at_t", AgentClass::Vehicle, 4.0, 2.0);
        let mut ped = AgentTrack::new("ped", AgentClass::Pedestrian, 0.6, 0.6);
        for ts in 0..=50 {
            always.poses.insert(ts, Pose::new(5.0, 5.0, 0.0));
            // far away until t + 5, then inside
            let y_late = if ts < 25 { 500.0 } else { 10.0 };
            late.poses.insert(ts, Pose::new(0.0, y_late, 0.0));
            ped.poses.insert(ts, Pose::new(3.0, y_late, 0.0));
            let y_at = if ts < 20 { 500.0 } else { 10.0 };
            at_t.poses.insert(ts, Pose::new(0.0, y_at, 0.0));
        }
        let s = scene_with(vec![always, late, at_t, ped]);
        let u = unseen_agent_ids(&s, &r, &h).unwrap();
        assert_eq!(u.into_iter().collect::<Vec<_>>(), vec!["late".to_string()]);
    }

    #[test]
    fn interpolation_is_linear_and_keeps_keyframes() {
        let t = AgentTrack::new("a", AgentClass::Vehicle, 4.0, 2.0)
            .with_pose(0, Pose::new(0.0, 0.0, 0.0))
            .with_pose(1, Pose::new(10.0, 0.0, 0.0));
        let d = interpolate_track(&t, 2, 10).unwrap();
        let xs: Vec<f64> = d.poses.values().map(|p| p.x).collect();
        assert_eq!(xs.len(), 6);
        for (x, want) in xs.iter().zip([0.0, 2.0, 4.0, 6.0, 8.0, 10.0]) {
            assert!((x - want).abs() < 1e-12);
        }
        assert_eq!(d.pose_at(5), t.pose_at(1));
        assert_eq!(interpolate_track(&t, 2, 2).unwrap(), t);
        assert!(matches!(interpolate_track(&t, 2, 5), Err(Error::RateMismatch { .. })));
    }

    #[test]
    fn interpolation_takes_the_short_arc() {
        let t = AgentTrack::new("a", AgentClass::Vehicle, 4.0, 2.0)
            .with_pose(0, Pose::new(0.0, 0.0, 170f64.to_radians()))
            .with_pose(1, Pose::new(1.0, 0.0, (-170f64).to_radians()));
        let d = interpolate_track(&t, 2, 10).unwrap();
        // oracle: walk the unit circle from 170° by +4° steps
        for j in 1..5 {
            let yaw = d.pose_at(j).unwrap().yaw;
            let want = 170.0 + 4.0 * j as f64;
            let (c, s) = (want.to_radians().cos(), want.to_radians().sin());
            assert!((yaw.cos() - c).abs() < 1e-12 && (yaw.sin() - s).abs() < 1e-12, "{j}: {yaw}");
            assert!(yaw.cos() < -0.9, "must pass through 180°, not 0°");
        }
    }

    #[test]
    fn scene_validation() {
        let mut s = scene_with(vec![]);
        assert!(s.validate().is_ok());
        s.agents.push(AgentTrack::new("bad", AgentClass::Vehicle, 0.0, 2.0));
        assert!(s.validate().is_err());
        let mut s = scene_with(vec![]);
        s.ego_id = "nobody".into();
        assert!(s.validate().is_err());
    }
}
