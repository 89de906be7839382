//! Physical motion models, conversion of predicted trajectories to earliest
//! occupancy maps, and random injection of boundary vehicles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, normalize_angle, EgoFrame, OrientedBox, Pose};
use crate::grid::Grid;
use crate::occupancy::EarliestOccupancyMap;
use crate::raster::{drivable_mask, for_each_box_pixel};
use crate::scene::{agents_in_region, AgentClass, AgentTrack, CriticalRegion, Horizon, Scene};

/// Straight-line fallback below this yaw rate (rad/s).
pub const MIN_YAW_RATE: f64 = 1e-6;
/// Spline samples per scene timestep.
pub const DENSIFY: usize = 10;
/// Footprint of injected vehicles, length × width in metres.
pub const INJECTED_EXTENT: [f64; 2] = [4.5, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModel {
    /// Constant velocity.
    Cv,
    /// Constant acceleration and heading.
    Ca,
    /// Constant rates of change of speed and yaw.
    Cm,
    /// Constant speed and yaw rate.
    Cy,
}

impl MotionModel {
    pub const ALL: [MotionModel; 4] = [MotionModel::Cv, MotionModel::Ca, MotionModel::Cm, MotionModel::Cy];

    pub fn name(self) -> &'static str {
        match self {
            MotionModel::Cv => "cv",
            MotionModel::Ca => "ca",
            MotionModel::Cm => "cm",
            MotionModel::Cy => "cy",
        }
    }
}

impl std::str::FromStr for MotionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cv" => Ok(MotionModel::Cv),
            "ca" => Ok(MotionModel::Ca),
            "cm" => Ok(MotionModel::Cm),
            "cy" => Ok(MotionModel::Cy),
            _ => Err(Error::Config(format!("unknown motion model `{s}` (expected cv, ca, cm or cy)"))),
        }
    }
}

/// Kinematic state in world coordinates; optional fields are required only
/// by the models that use them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub position: [f64; 2],
    pub velocity: Option<[f64; 2]>,
    pub acceleration: Option<[f64; 2]>,
    pub yaw: f64,
    pub yaw_rate: Option<f64>,
    pub speed: Option<f64>,
}

impl KinematicState {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            position: [pose.x, pose.y],
            velocity: Some([0.0, 0.0]),
            acceleration: Some([0.0, 0.0]),
            yaw: pose.yaw,
            yaw_rate: Some(0.0),
            speed: Some(0.0),
        }
    }

    fn velocity(&self) -> Result<[f64; 2]> {
        self.velocity.ok_or(Error::MissingState("velocity"))
    }

    fn speed(&self) -> Result<f64> {
        match (self.speed, self.velocity) {
            (Some(s), _) => Ok(s),
            (None, Some(v)) => Ok(v[0].hypot(v[1])),
            _ => Err(Error::MissingState("speed")),
        }
    }

    fn yaw_rate(&self) -> Result<f64> {
        self.yaw_rate.ok_or(Error::MissingState("yaw_rate"))
    }

    /// Rate of change of speed: acceleration projected on the heading.
    fn speed_rate(&self) -> Result<f64> {
        let a = self.acceleration.ok_or(Error::MissingState("acceleration"))?;
        Ok(a[0] * self.yaw.cos() + a[1] * self.yaw.sin())
    }
}

/// Finite-difference state of `track` at `timestep` from the last two
/// poses (velocity) and three poses (acceleration, yaw rate).
pub fn estimate_state(track: &AgentTrack, timestep: i64, dt: f64) -> Result<KinematicState> {
    let p0 = track.pose_at(timestep).ok_or(Error::MissingState("current pose"))?;
    let mut s = KinematicState::at_rest(p0);
    let Some(p1) = track.pose_at(timestep - 1) else {
        return Ok(s);
    };
    let v0 = [(p0.x - p1.x) / dt, (p0.y - p1.y) / dt];
    s.velocity = Some(v0);
    s.speed = Some(v0[0].hypot(v0[1]));
    if let Some(p2) = track.pose_at(timestep - 2) {
        let v1 = [(p1.x - p2.x) / dt, (p1.y - p2.y) / dt];
        s.acceleration = Some([(v0[0] - v1[0]) / dt, (v0[1] - v1[1]) / dt]);
        s.yaw_rate = Some(angle_diff(p2.yaw, p0.yaw) / (2.0 * dt));
    } else {
        s.yaw_rate = Some(angle_diff(p1.yaw, p0.yaw) / dt);
    }
    Ok(s)
}

/// Poses at integer future steps of one agent. Step 0 is the observed
/// current pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub extent: [f64; 2],
    pub steps: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("trajectory steps must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Closed-form position after `tau` seconds at constant speed and yaw rate.
fn arc(x: f64, y: f64, yaw: f64, speed: f64, omega: f64, tau: f64) -> (f64, f64, f64) {
    if omega.abs() < MIN_YAW_RATE {
        return (x + speed * tau * yaw.cos(), y + speed * tau * yaw.sin(), yaw);
    }
    let r = speed / omega;
    let yaw1 = yaw + omega * tau;
    (x + r * (yaw1.sin() - yaw.sin()), y - r * (yaw1.cos() - yaw.cos()), yaw1)
}

/// Substeps per timestep for the constant-rates model.
const CM_SUBSTEPS: usize = 10;

/// Rolls `state` forward `horizon.future` steps of `dt` seconds.
pub fn rollout(model: MotionModel, state: &KinematicState, horizon: &Horizon, dt: f64, extent: [f64; 2]) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config("dt must be positive".into()));
    }
    let [x0, y0] = state.position;
    let mut steps = Vec::with_capacity(horizon.future + 1);
    steps.push((0, Pose::new(x0, y0, state.yaw)));
    match model {
        MotionModel::Cv => {
            let v = state.velocity()?;
            let yaw = if v[0].hypot(v[1]) > 1e-9 { v[1].atan2(v[0]) } else { state.yaw };
            for k in 1..=horizon.future {
                let tau = k as f64 * dt;
                steps.push((k, Pose::new(x0 + v[0] * tau, y0 + v[1] * tau, yaw)));
            }
        }
        MotionModel::Ca => {
            let v = state.velocity()?;
            let a = state.acceleration.ok_or(Error::MissingState("acceleration"))?;
            for k in 1..=horizon.future {
                let tau = k as f64 * dt;
                let x = x0 + v[0] * tau + 0.5 * a[0] * tau * tau;
                let y = y0 + v[1] * tau + 0.5 * a[1] * tau * tau;
                steps.push((k, Pose::new(x, y, state.yaw)));
            }
        }
        MotionModel::Cy => {
            let (s, w) = (state.speed()?, state.yaw_rate()?);
            for k in 1..=horizon.future {
                let (x, y, yaw) = arc(x0, y0, state.yaw, s, w, k as f64 * dt);
                steps.push((k, Pose::new(x, y, yaw)));
            }
        }
        MotionModel::Cm => {
            let (s0, w, sdot) = (state.speed()?, state.yaw_rate()?, state.speed_rate()?);
            let h = dt / CM_SUBSTEPS as f64;
            let (mut x, mut y, mut yaw) = (x0, y0, state.yaw);
            let mut tau = 0.0;
            for k in 1..=horizon.future {
                for _ in 0..CM_SUBSTEPS {
                    // midpoint speed, exact arc within the substep; speed
                    // stops at zero rather than reversing
                    let speed = (s0 + sdot * (tau + 0.5 * h)).max(0.0);
                    (x, y, yaw) = arc(x, y, yaw, speed, w, h);
                    tau += h;
                }
                steps.push((k, Pose::new(x, y, yaw)));
            }
        }
    }
    Ok(Trajectory { extent, steps })
}

/// Natural cubic spline through `(knots[i], values[i])`.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots.
    curvature: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n {
            return Err(Error::Config("spline needs at least two matching knots and values".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas algorithm)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let (h0, h1) = (knots[i] - knots[i - 1], knots[i + 1] - knots[i]);
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = knots[i + 1] - knots[i];
                let f = lower / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { knots: knots.to_vec(), values: values.to_vec(), curvature: m })
    }

    fn segment(&self, t: f64) -> usize {
        let i = self.knots.partition_point(|&k| k <= t);
        i.clamp(1, self.knots.len() - 1) - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        a * self.values[i] + b * self.values[i + 1] + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        (self.values[i + 1] - self.values[i]) / h + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0
    }
}

/// Densified `(time in steps, pose)` samples of a trajectory; yaw follows the
/// path tangent except where the agent barely moves.
pub fn densify(traj: &Trajectory) -> Result<Vec<(f64, Pose)>> {
    traj.validate()?;
    match traj.steps.len() {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![(traj.steps[0].0 as f64, traj.steps[0].1)]),
        _ => {}
    }
    let knots: Vec<f64> = traj.steps.iter().map(|(k, _)| *k as f64).collect();
    let xs: Vec<f64> = traj.steps.iter().map(|(_, p)| p.x).collect();
    let ys: Vec<f64> = traj.steps.iter().map(|(_, p)| p.y).collect();
    let (sx, sy) = (NaturalSpline::new(&knots, &xs)?, NaturalSpline::new(&knots, &ys)?);
    let (first, last) = (knots[0], knots[knots.len() - 1]);
    let samples = ((last - first) * DENSIFY as f64).round() as usize;
    let mut out = Vec::with_capacity(samples + 1);
    for j in 0..=samples {
        let tau = first + j as f64 / DENSIFY as f64;
        let (dx, dy) = (sx.derivative(tau), sy.derivative(tau));
        let yaw = if dx.hypot(dy) > 0.05 {
            dy.atan2(dx)
        } else {
            let i = sx.segment(tau);
            let near = if tau - knots[i] <= knots[i + 1] - tau { i } else { i + 1 };
            traj.steps[near].1.yaw
        };
        out.push((tau, Pose::new(sx.eval(tau), sy.eval(tau), yaw)));
    }
    Ok(out)
}

/// Sweeps densified trajectory boxes over the grid. A pixel covered at
/// continuous time `τ` arrives at `⌊τ⌋`; non-drivable pixels are 0 and
/// uncovered drivable pixels are `T`.
pub fn trajectory_to_eom(
    trajectories: &[Trajectory],
    region: &CriticalRegion,
    frame: &EgoFrame,
    drivable: &Grid<u8>,
    horizon: &Horizon,
) -> Result<EarliestOccupancyMap> {
    if drivable.height() != region.height() || drivable.width() != region.width() {
        return Err(Error::Shape("drivable mask does not match the region".into()));
    }
    let t_max = horizon.future;
    let mut grid = drivable.map(|d| if d != 0 { t_max as f32 } else { 0.0 });
    let w = region.width();
    for traj in trajectories {
        for (tau, pose) in densify(traj)? {
            let arrival = tau.floor();
            if arrival < 0.0 || arrival >= t_max as f64 {
                continue;
            }
            let value = arrival as f32;
            let local = frame.box_to_local(&OrientedBox::new(pose, traj.extent[0], traj.extent[1]));
            let data = grid.as_mut_slice();
            for_each_box_pixel(region, &local, |r, c| {
                let cell = &mut data[r * w + c];
                if value < *cell {
                    *cell = value;
                }
            });
        }
    }
    Ok(EarliestOccupancyMap::new(grid, t_max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub eom: EarliestOccupancyMap,
    /// Number of vehicles placed.
    pub count: usize,
}

/// Places `n ~ Poisson(λ)` vehicle boxes at random boundary pixels, heading
/// inward, each lowering covered pixels to a random arrival in `1..=T`.
pub fn inject_poisson_unseen(eom: &EarliestOccupancyMap, region: &CriticalRegion, lambda: f64, seed: u64) -> Result<Injection> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    if eom.height() != region.height() || eom.width() != region.width() {
        return Err(Error::Shape("map does not match the region".into()));
    }
    let mut out = eom.clone();
    if lambda == 0.0 {
        return Ok(Injection { eom: out, count: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = Poisson::new(lambda).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng) as usize;
    let (h, w) = (region.height(), region.width());
    let perimeter = if h == 1 || w == 1 { h * w } else { 2 * (h + w) - 4 };
    for _ in 0..count {
        let idx = rng.gen_range(0..perimeter);
        // walk the border clockwise from the top-left pixel
        let (row, col, heading) = if idx < w {
            (0, idx, -std::f64::consts::FRAC_PI_2)
        } else if idx < w + h - 1 {
            (idx - w + 1, w - 1, std::f64::consts::PI)
        } else if idx < 2 * w + h - 2 {
            (h - 1, w - 1 - (idx - (w + h - 1)), std::f64::consts::FRAC_PI_2)
        } else {
            (h - 1 - (idx - (2 * w + h - 2)), 0, 0.0)
        };
        let arrival = rng.gen_range(1..=eom.horizon) as f32;
        let (x, y) = region.pixel_center(row.min(h - 1), col.min(w - 1));
        let b = OrientedBox::new(Pose::new(x, y, normalize_angle(heading)), INJECTED_EXTENT[0], INJECTED_EXTENT[1]);
        let data = out.grid.as_mut_slice();
        for_each_box_pixel(region, &b, |r, c| {
            let cell = &mut data[r * w + c];
            if arrival < *cell {
                *cell = arrival;
            }
        });
    }
    Ok(Injection { eom: out, count })
}

/// A physical predictor with optional boundary injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub model: MotionModel,
    pub inject_lambda: Option<f64>,
}

impl BaselineSpec {
    pub fn name(&self) -> String {
        match self.inject_lambda {
            Some(l) => format!("{}+poisson{l}", self.model.name()),
            None => self.model.name().to_string(),
        }
    }
}

/// Baseline prediction for one scene: every non-ego agent observed in the
/// region at the current frame is rolled out from its estimated state.
pub fn baseline_eom(scene: &Scene, region: &CriticalRegion, horizon: &Horizon, spec: &BaselineSpec, seed: u64) -> Result<EarliestOccupancyMap> {
    let t = horizon.current;
    let frame = EgoFrame::new(scene.ego_pose(t)?);
    let dt = 1.0 / scene.rate_hz as f64;
    let observed = agents_in_region(scene, region, t);
    let mut trajectories = Vec::new();
    for agent in scene.agents.iter().filter(|a| a.class != AgentClass::Ego && observed.contains(&a.id)) {
        let state = estimate_state(agent, t, dt)?;
        trajectories.push(rollout(spec.model, &state, horizon, dt, agent.extent)?);
    }
    let drivable = drivable_mask(scene, region, &frame);
    let eom = trajectory_to_eom(&trajectories, region, &frame, &drivable, horizon)?;
    match spec.inject_lambda {
        Some(l) => Ok(inject_poisson_unseen(&eom, region, l, seed)?.eom),
        None => Ok(eom),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn horizon() -> Horizon {
        Horizon::full_scale()
    }

    fn moving(v: [f64; 2], a: [f64; 2], yaw: f64, w: f64) -> KinematicState {
        KinematicState {
            position: [1.0, -2.0],
            velocity: Some(v),
            acceleration: Some(a),
            yaw,
            yaw_rate: Some(w),
            speed: Some(v[0].hypot(v[1])),
        }
    }

    fn max_gap(a: &Trajectory, b: &Trajectory) -> f64 {
        a.steps.iter().zip(&b.steps).map(|((_, p), (_, q))| (p.x - q.x).hypot(p.y - q.y)).fold(0.0, f64::max)
    }

    #[test]
    fn cv_advances_one_metre_per_step() {
        let s = moving([10.0, 0.0], [0.0, 0.0], 0.0, 0.0);
        let tr = rollout(MotionModel::Cv, &s, &horizon(), 0.1, [4.0, 2.0]).unwrap();
        assert_eq!(tr.steps.len(), 31);
        for (k, p) in &tr.steps {
            assert!((p.x - (1.0 + *k as f64)).abs() < 1e-12);
            assert_eq!(p.y, -2.0);
        }
    }

    #[test]
    fn degenerate_models_agree() {
        let yaw = 0.4f64;
        let v = [6.0 * yaw.cos(), 6.0 * yaw.sin()];
        let s = moving(v, [0.0, 0.0], yaw, 0.0);
        let h = horizon();
        let roll = |m| rollout(m, &s, &h, 0.1, [4.0, 2.0]).unwrap();
        let cv = roll(MotionModel::Cv);
        assert!(max_gap(&cv, &roll(MotionModel::Ca)) < 1e-9);
        assert!(max_gap(&cv, &roll(MotionModel::Cy)) < 1e-9);
        assert!(max_gap(&roll(MotionModel::Cy), &roll(MotionModel::Cm)) < 1e-9);
        // with a yaw rate but no speed change CM still follows the CY arc
        let s = moving(v, [0.0, 0.0], yaw, 0.3);
        let cy = rollout(MotionModel::Cy, &s, &h, 0.1, [4.0, 2.0]).unwrap();
        let cm = rollout(MotionModel::Cm, &s, &h, 0.1, [4.0, 2.0]).unwrap();
        assert!(max_gap(&cy, &cm) < 1e-9);
    }

    #[test]
    fn cy_follows_the_circle() {
        let s = KinematicState { position: [0.0, 0.0], velocity: None, acceleration: None, yaw: 0.0, yaw_rate: Some(0.5), speed: Some(5.0) };
        let h = Horizon::new(20, 20, 20).unwrap();
        let tr = rollout(MotionModel::Cy, &s, &h, 0.1, [4.0, 2.0]).unwrap();
        let (_, p) = tr.steps[20];
        // circle of radius 10 centred at (0, 10)
        assert!((p.x - 10.0 * 1f64.sin()).abs() < 1e-9);
        assert!((p.y - 10.0 * (1.0 - 1f64.cos())).abs() < 1e-9);
        assert!((p.x.hypot(p.y - 10.0) - 10.0).abs() < 1e-9);
        assert!((p.yaw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_fields_rejected() {
        let s = KinematicState { position: [0.0, 0.0], velocity: Some([1.0, 0.0]), acceleration: None, yaw: 0.0, yaw_rate: None, speed: None };
        assert!(matches!(rollout(MotionModel::Cy, &s, &horizon(), 0.1, [4.0, 2.0]), Err(Error::MissingState("yaw_rate"))));
        assert!(rollout(MotionModel::Cm, &s, &horizon(), 0.1, [4.0, 2.0]).is_err());
        assert!(rollout(MotionModel::Cv, &s, &horizon(), 0.0, [4.0, 2.0]).is_err());
    }

    #[test]
    fn cm_braking_stops() {
        let s = moving([5.0, 0.0], [-5.0, 0.0], 0.0, 0.0);
        let tr = rollout(MotionModel::Cm, &s, &horizon(), 0.1, [4.0, 2.0]).unwrap();
        let last = tr.steps.last().unwrap().1;
        // stops after 1 s having covered 2.5 m
        assert!((last.x - 3.5).abs() < 1e-9);
    }

    #[test]
    fn spline_interpolates_and_is_natural() {
        let knots = [0.0, 1.0, 2.5, 4.0];
        let vals = [0.0, 2.0, -1.0, 3.0];
        let s = NaturalSpline::new(&knots, &vals).unwrap();
        for (k, v) in knots.iter().zip(&vals) {
            assert!((s.eval(*k) - v).abs() < 1e-12);
        }
        // a straight line is reproduced exactly
        let line = NaturalSpline::new(&knots, &[1.0, 3.0, 6.0, 9.0]).unwrap();
        assert!((line.eval(3.3) - 7.6).abs() < 1e-12);
        assert!((line.derivative(0.7) - 2.0).abs() < 1e-12);
        assert!(NaturalSpline::new(&[0.0], &[1.0]).is_err());
    }

    fn grid_setup() -> (CriticalRegion, EgoFrame, Grid<u8>, Horizon) {
        let region = CriticalRegion::new(-10, 9, -5, 14, 0.5).unwrap();
        let frame = EgoFrame::new(Pose::new(0.0, 0.0, FRAC_PI_2));
        let drivable = Grid::from_fn(region.height(), region.width(), |_, c| (c >= 2) as u8);
        (region, frame, drivable, horizon())
    }

    #[test]
    fn empty_and_static_sweeps() {
        let (region, frame, drivable, h) = grid_setup();
        let e = trajectory_to_eom(&[], &region, &frame, &drivable, &h).unwrap();
        for (v, d) in e.grid.as_slice().iter().zip(drivable.as_slice()) {
            assert_eq!(*v, if *d == 1 { 30.0 } else { 0.0 });
        }
        let pose = Pose::new(0.0, 3.0, FRAC_PI_2);
        let tr = Trajectory { extent: [4.0, 2.0], steps: vec![(5, pose)] };
        let e = trajectory_to_eom(&[tr], &region, &frame, &drivable, &h).unwrap();
        let fp = frame.box_to_local(&OrientedBox::new(pose, 4.0, 2.0));
        let mut n = 0;
        for_each_box_pixel(&region, &fp, |r, c| {
            n += drivable.get(r, c) as usize;
            assert_eq!(e.grid.get(r, c), if drivable.get(r, c) == 1 { 5.0 } else { 0.0 });
        });
        assert!(n > 0);
        assert_eq!(e.grid.as_slice().iter().filter(|&&v| v == 5.0).count(), n);
    }

    #[test]
    fn crossing_sweeps_take_the_minimum() {
        let (region, frame, drivable, h) = grid_setup();
        let mk = |x0: f64, y0: f64, vx: f64, vy: f64| Trajectory {
            extent: [2.0, 1.0],
            steps: (0..=30).map(|k| (k, Pose::new(x0 + vx * k as f64, y0 + vy * k as f64, vy.atan2(vx)))).collect(),
        };
        let t1 = mk(-4.0, 6.0, 0.3, 0.0);
        let t2 = mk(2.0, 0.0, 0.0, 0.4);
        let both = trajectory_to_eom(&[t1.clone(), t2.clone()], &region, &frame, &drivable, &h).unwrap();
        let e1 = trajectory_to_eom(&[t1], &region, &frame, &drivable, &h).unwrap();
        let e2 = trajectory_to_eom(&[t2], &region, &frame, &drivable, &h).unwrap();
        let mut shared = 0;
        for i in 0..both.grid.len() {
            let (x, y, z) = (both.grid.as_slice()[i], e1.grid.as_slice()[i], e2.grid.as_slice()[i]);
            assert_eq!(x, y.min(z));
            if y < 30.0 && z < 30.0 && y > 0.0 {
                shared += 1;
            }
        }
        assert!(shared > 0);
    }

    #[test]
    fn injection_cases() {
        let (region, _, _, h) = grid_setup();
        let base = EarliestOccupancyMap::filled(region.height(), region.width(), 30.0, h.future);
        assert_eq!(inject_poisson_unseen(&base, &region, 0.0, 3).unwrap().eom, base);
        let a = inject_poisson_unseen(&base, &region, 2.0, 9).unwrap();
        assert_eq!(a, inject_poisson_unseen(&base, &region, 2.0, 9).unwrap());
        assert!(a.eom.grid.as_slice().iter().all(|&v| v <= 30.0 && v >= 1.0));
        let total: usize = (0..2000).map(|s| inject_poisson_unseen(&base, &region, 2.0, s).unwrap().count).sum();
        let mean = total as f64 / 2000.0;
        assert!((mean - 2.0).abs() < 0.15, "{mean}");
        assert!(inject_poisson_unseen(&base, &region, -1.0, 0).is_err());
    }

    #[test]
    fn state_estimation_from_history() {
        let mut t = AgentTrack::new("v", AgentClass::Vehicle, 4.0, 2.0);
        // x = t² / 2 metres per (0.1 s)², yaw growing 0.01 rad per step
        for k in 0..=10 {
            let kf = k as f64;
            t.poses.insert(k, Pose::new(0.5 * kf * kf, 0.0, 0.01 * kf));
        }
        let s = estimate_state(&t, 10, 0.1).unwrap();
        assert!((s.velocity.unwrap()[0] - 95.0).abs() < 1e-9);
        assert!((s.acceleration.unwrap()[0] - 100.0).abs() < 1e-9);
        assert!((s.yaw_rate.unwrap() - 0.1).abs() < 1e-9);
        let s = estimate_state(&t, 0, 0.1).unwrap();
        assert_eq!(s.velocity, Some([0.0, 0.0]));
        assert!(estimate_state(&t, 11, 0.1).is_err());
    }
}
