//! Procedural scenes on template road maps.
//!
//! Maps are built around a junction at the world origin. Every arm carries
//! one lane per direction (right-hand traffic); routes join an inbound lane
//! to an outbound lane with a straight segment or a quarter-circle fillet.
//! Vehicles follow routes with a longitudinal speed profile.

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_unseen, AgentClass, AgentTrack, CriticalRegion, Horizon, Lane, Scene};
use crate::error::{Error, Result};
use crate::geometry::{EgoFrame, OrientedBox, Polygon, Pose};

const LANE_OFFSET: f64 = 1.75;
const ROAD_HALF_WIDTH: f64 = 3.5;
const ARM_LENGTH: f64 = 150.0;
const SIDEWALK_OFFSET: f64 = 5.5;
const MIN_GAP: f64 = 6.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapTemplate {
    StraightRoad,
    TIntersection,
    FourWay,
}

impl MapTemplate {
    fn arms(self) -> &'static [[f64; 2]] {
        const E: [f64; 2] = [1.0, 0.0];
        const N: [f64; 2] = [0.0, 1.0];
        const W: [f64; 2] = [-1.0, 0.0];
        const S: [f64; 2] = [0.0, -1.0];
        match self {
            MapTemplate::StraightRoad => &[E, W],
            MapTemplate::TIntersection => &[E, W, N],
            MapTemplate::FourWay => &[E, N, W, S],
        }
    }
}

/// Longitudinal behaviour of a generated agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    ConstantSpeed,
    Braking,
    Accelerating,
    /// Constant speed on a route that turns at the junction.
    Turning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub scenes: usize,
    pub templates: Vec<MapTemplate>,
    /// Inclusive range of vehicles placed inside the region at `t`.
    pub vehicles: [usize; 2],
    pub pedestrians: [usize; 2],
    /// Inclusive initial speed range, m/s.
    pub speed_mps: [f64; 2],
    /// Probability that a scene receives unseen vehicles.
    pub unseen_spawn_prob: f64,
    /// Upper bound on unseen vehicles per scene (at least one is attempted).
    pub max_unseen: usize,
    pub region: CriticalRegion,
    pub horizon: Horizon,
    pub rate_hz: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            templates: vec![MapTemplate::StraightRoad, MapTemplate::TIntersection, MapTemplate::FourWay],
            vehicles: [2, 6],
            pedestrians: [0, 3],
            speed_mps: [4.0, 12.0],
            unseen_spawn_prob: 0.5,
            max_unseen: 2,
            region: CriticalRegion::desk(),
            horizon: Horizon::full_scale(),
            rate_hz: 10,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("scene count must be positive".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Config("at least one map template is required".into()));
        }
        let [lo, hi] = self.speed_mps;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("speeds must be positive with min <= max, got [{lo}, {hi}]")));
        }
        if self.vehicles[0] > self.vehicles[1] || self.pedestrians[0] > self.pedestrians[1] {
            return Err(Error::Config("count ranges need min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.unseen_spawn_prob) {
            return Err(Error::Config("unseen_spawn_prob must lie in [0, 1]".into()));
        }
        if self.rate_hz == 0 {
            return Err(Error::Config("rate_hz must be positive".into()));
        }
        self.region.validate()?;
        self.horizon.validate()
    }
}

/// Generates `config.scenes` scenes. Scene `i` draws from its own ChaCha
/// stream keyed by `(seed, i)`, so the output is a pure function of the
/// inputs and independent of generation order.
pub fn synth_generate(config: &GeneratorConfig, seed: u64) -> Result<Vec<Scene>> {
    config.validate()?;
    Ok((0..config.scenes).map(|i| generate_one(config, seed, i)).collect())
}

struct Route {
    points: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
    turns: bool,
}

impl Route {
    fn new(points: Vec<[f64; 2]>, turns: bool) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Self { points, cumulative, turns }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Pose at arc length `s`, extrapolating linearly past either end.
    fn pose_at(&self, s: f64) -> Pose {
        let n = self.points.len();
        let seg = match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let (a, b) = (self.points[seg], self.points[seg + 1]);
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let u = (s - self.cumulative[seg]) / len;
        Pose::new(a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), (b[1] - a[1]).atan2(b[0] - a[0]))
    }
}

fn rot90(d: [f64; 2]) -> [f64; 2] {
    [-d[1], d[0]]
}

fn add(a: [f64; 2], sa: f64, b: [f64; 2], sb: f64) -> [f64; 2] {
    [sa * a[0] + sb * b[0], sa * a[1] + sb * b[1]]
}

fn build_route(from: [f64; 2], to: [f64; 2]) -> Route {
    let n_from = rot90(from);
    let n_to = rot90(to);
    let start = add(from, ARM_LENGTH, n_from, LANE_OFFSET);
    let enter = add(from, ROAD_HALF_WIDTH, n_from, LANE_OFFSET);
    let exit = add(to, ROAD_HALF_WIDTH, n_to, -LANE_OFFSET);
    let end = add(to, ARM_LENGTH, n_to, -LANE_OFFSET);
    let heading = [-from[0], -from[1]];
    let cross = heading[0] * to[1] - heading[1] * to[0];
    let mut points = vec![start, enter];
    let turns = cross.abs() > 0.5;
    if turns {
        let left = cross > 0.0;
        let chord = ((exit[0] - enter[0]).powi(2) + (exit[1] - enter[1]).powi(2)).sqrt();
        let radius = chord / 2f64.sqrt();
        let side = if left { rot90(heading) } else { [heading[1], -heading[0]] };
        let centre = add(enter, 1.0, side, radius);
        let a0 = (enter[1] - centre[1]).atan2(enter[0] - centre[0]);
        let sweep = if left { FRAC_PI_2 } else { -FRAC_PI_2 };
        const STEPS: usize = 12;
        for i in 1..STEPS {
            let a = a0 + sweep * i as f64 / STEPS as f64;
            points.push([centre[0] + radius * a.cos(), centre[1] + radius * a.sin()]);
        }
    }
    points.push(exit);
    points.push(end);
    Route::new(points, turns)
}

struct MapLayout {
    drivable: Vec<Polygon>,
    routes: Vec<Route>,
    arms: Vec<[f64; 2]>,
}

fn build_map(template: MapTemplate) -> MapLayout {
    let arms = template.arms().to_vec();
    let mut drivable = vec![Polygon::rect(-ROAD_HALF_WIDTH, -ROAD_HALF_WIDTH, ROAD_HALF_WIDTH, ROAD_HALF_WIDTH)];
    for d in &arms {
        let n = rot90(*d);
        let far = add(*d, ARM_LENGTH, n, 0.0);
        let corners = [
            add(n, ROAD_HALF_WIDTH, [0.0; 2], 0.0),
            add(far, 1.0, n, ROAD_HALF_WIDTH),
            add(far, 1.0, n, -ROAD_HALF_WIDTH),
            add(n, -ROAD_HALF_WIDTH, [0.0; 2], 0.0),
        ];
        drivable.push(Polygon(corners.to_vec()));
    }
    let mut routes = Vec::new();
    for from in &arms {
        for to in &arms {
            if from != to {
                routes.push(build_route(*from, *to));
            }
        }
    }
    MapLayout { drivable, routes, arms }
}

#[derive(Debug, Clone, Copy)]
struct Motion {
    profile: Profile,
    speed: f64,
    accel: f64,
    /// Seconds from the start of the timeline when the speed starts changing.
    onset: f64,
    max_speed: f64,
}

impl Motion {
    /// Distance travelled since the start of the timeline.
    fn distance(&self, tau: f64) -> f64 {
        let v0 = self.speed;
        match self.profile {
            Profile::ConstantSpeed | Profile::Turning => v0 * tau,
            Profile::Braking => {
                if tau <= self.onset {
                    return v0 * tau;
                }
                let dt = tau - self.onset;
                let stop = v0 / self.accel;
                let before = v0 * self.onset;
                if dt < stop {
                    before + v0 * dt - 0.5 * self.accel * dt * dt
                } else {
                    before + v0 * v0 / (2.0 * self.accel)
                }
            }
            Profile::Accelerating => {
                if tau <= self.onset {
                    return v0 * tau;
                }
                let dt = tau - self.onset;
                let ramp = ((self.max_speed - v0) / self.accel).max(0.0);
                let before = v0 * self.onset;
                if dt < ramp {
                    before + v0 * dt + 0.5 * self.accel * dt * dt
                } else {
                    before + v0 * ramp + 0.5 * self.accel * ramp * ramp + self.max_speed * (dt - ramp)
                }
            }
        }
    }
}

struct SceneBuilder<'a> {
    config: &'a GeneratorConfig,
    rng: ChaCha8Rng,
    map: MapLayout,
    first: i64,
    last: i64,
}

impl<'a> SceneBuilder<'a> {
    fn tau(&self, ts: i64) -> f64 {
        (ts - self.first) as f64 / self.config.rate_hz as f64
    }

    fn random_motion(&mut self, profile: Profile) -> Motion {
        let [lo, hi] = self.config.speed_mps;
        let speed = self.rng.gen_range(lo..=hi);
        let span = self.tau(self.last);
        let (speed, accel) = match profile {
            Profile::Braking => (speed, self.rng.gen_range(1.5..4.0)),
            Profile::Accelerating => (speed, self.rng.gen_range(0.5..2.5)),
            Profile::Turning => (speed.min(8.0), 0.0),
            Profile::ConstantSpeed => (speed, 0.0),
        };
        Motion {
            profile,
            speed,
            accel,
            onset: self.rng.gen_range(0.0..span),
            max_speed: hi * 1.3,
        }
    }

    fn random_profile(&mut self) -> Profile {
        *[Profile::ConstantSpeed, Profile::ConstantSpeed, Profile::Braking, Profile::Accelerating, Profile::Turning]
            .choose(&mut self.rng)
            .unwrap()
    }

    fn pick_route(&mut self, profile: Profile) -> usize {
        let candidates: Vec<usize> = (0..self.map.routes.len())
            .filter(|&i| profile != Profile::Turning || self.map.routes[i].turns)
            .collect();
        let pool = if candidates.is_empty() {
            (0..self.map.routes.len()).collect()
        } else {
            candidates
        };
        *pool.choose(&mut self.rng).unwrap()
    }

    fn track(&self, id: String, class: AgentClass, extent: [f64; 2], route: usize, motion: &Motion, s_now: f64) -> AgentTrack {
        let route = &self.map.routes[route];
        let now = self.tau(self.config.horizon.current);
        let offset = s_now - motion.distance(now);
        let mut track = AgentTrack::new(id, class, extent[0], extent[1]);
        for ts in self.first..=self.last {
            track.poses.insert(ts, route.pose_at(offset + motion.distance(self.tau(ts))));
        }
        track
    }

    fn vehicle_extent(&mut self) -> [f64; 2] {
        [self.rng.gen_range(4.0..5.0), self.rng.gen_range(1.8..2.1)]
    }

    fn clear_of(placed: &[Pose], p: &Pose) -> bool {
        placed.iter().all(|q| (q.x - p.x).hypot(q.y - p.y) >= MIN_GAP)
    }
}

fn generate_one(config: &GeneratorConfig, seed: u64, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let template = *config.templates.choose(&mut rng).unwrap();
    let horizon = config.horizon;
    let mut b = SceneBuilder {
        config,
        rng,
        map: build_map(template),
        first: horizon.current - horizon.history as i64,
        last: horizon.current + horizon.future as i64,
    };
    let t = horizon.current;

    // ego: somewhere on the approach to the junction or just past it
    let ego_profile = *[Profile::ConstantSpeed, Profile::Braking, Profile::Accelerating].choose(&mut b.rng).unwrap();
    let ego_route = b.pick_route(ego_profile);
    let ego_motion = b.random_motion(ego_profile);
    let approach = ARM_LENGTH - ROAD_HALF_WIDTH;
    let ego_s = approach + b.rng.gen_range(-45.0..15.0);
    let ego = b.track("ego".into(), AgentClass::Ego, [4.5, 2.0], ego_route, &ego_motion, ego_s);
    let ego_now = ego.pose_at(t).expect("ego covers the timeline");
    let frame = EgoFrame::new(ego_now);
    let rect = config.region.extent();
    let mut placed = vec![ego_now];
    let mut agents = vec![ego];

    let n_seen = b.rng.gen_range(config.vehicles[0]..=config.vehicles[1]);
    let mut next_id = 0;
    for _ in 0..n_seen {
        let profile = b.random_profile();
        let route = b.pick_route(profile);
        let motion = b.random_motion(profile);
        let extent = b.vehicle_extent();
        let len = b.map.routes[route].length();
        let candidates: Vec<f64> = (0..len as usize)
            .map(|s| s as f64)
            .filter(|&s| {
                let p = b.map.routes[route].pose_at(s);
                let fp = OrientedBox::new(p, extent[0], extent[1]);
                frame.box_to_local(&fp).intersects_rect(&rect) && SceneBuilder::clear_of(&placed, &p)
            })
            .collect();
        if let Some(&s) = candidates.choose(&mut b.rng) {
            let track = b.track(format!("veh-{next_id}"), AgentClass::Vehicle, extent, route, &motion, s);
            next_id += 1;
            placed.push(track.pose_at(t).unwrap());
            agents.push(track);
        }
    }

    if b.rng.gen_bool(config.unseen_spawn_prob) {
        let wanted = b.rng.gen_range(1..=config.max_unseen.max(1));
        let mut order: Vec<usize> = (0..b.map.routes.len()).collect();
        order.shuffle(&mut b.rng);
        let mut spawned = 0;
        for route in order {
            if spawned == wanted {
                break;
            }
            let profile = if b.map.routes[route].turns {
                Profile::Turning
            } else {
                *[Profile::ConstantSpeed, Profile::Accelerating].choose(&mut b.rng).unwrap()
            };
            let motion = b.random_motion(profile);
            let extent = b.vehicle_extent();
            let len = b.map.routes[route].length();
            let candidates: Vec<AgentTrack> = (0..len as usize)
                .filter_map(|s| {
                    let track = b.track(format!("veh-{next_id}"), AgentClass::Vehicle, extent, route, &motion, s as f64);
                    let now = track.pose_at(t).unwrap();
                    (SceneBuilder::clear_of(&placed, &now) && is_unseen(&track, &agents[0], &frame, &config.region, &horizon))
                        .then_some(track)
                })
                .collect();
            if let Some(track) = candidates.choose(&mut b.rng) {
                placed.push(track.pose_at(t).unwrap());
                agents.push(track.clone());
                next_id += 1;
                spawned += 1;
            }
        }
    }

    let n_ped = b.rng.gen_range(config.pedestrians[0]..=config.pedestrians[1]);
    for i in 0..n_ped {
        let arm = *b.map.arms.choose(&mut b.rng).unwrap();
        let side = if b.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let along = b.rng.gen_range(ROAD_HALF_WIDTH + 2.0..60.0);
        let speed = b.rng.gen_range(0.8..1.6) * if b.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let n = rot90(arm);
        let yaw = if speed > 0.0 { arm[1].atan2(arm[0]) } else { (-arm[1]).atan2(-arm[0]) };
        let mut track = AgentTrack::new(format!("ped-{i}"), AgentClass::Pedestrian, 0.6, 0.6);
        for ts in b.first..=b.last {
            let s = along + speed * (b.tau(ts) - b.tau(t));
            let p = add(arm, s, n, side * SIDEWALK_OFFSET);
            track.poses.insert(ts, Pose::new(p[0], p[1], yaw));
        }
        agents.push(track);
    }

    Scene {
        id: format!("synth-{seed}-{index:05}"),
        rate_hz: config.rate_hz,
        drivable: b.map.drivable,
        lanes: b.map.routes.iter().map(|r| Lane(r.points.clone())).collect(),
        agents,
        ego_id: "ego".into(),
    }
}
