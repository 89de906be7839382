//! Ego-centric multi-channel history rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, EgoFrame, OrientedBox, Pose};
use crate::grid::Grid;
use crate::scene::{AgentClass, CriticalRegion, Horizon, Scene};

/// Semantic raster channels, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Drivable = 0,
    Lanes = 1,
    EgoHistory = 2,
    VehicleHistory = 3,
    PedestrianHistory = 4,
}

impl Channel {
    pub const COUNT: usize = 5;
    pub const ALL: [Channel; 5] = [
        Channel::Drivable,
        Channel::Lanes,
        Channel::EgoHistory,
        Channel::VehicleHistory,
        Channel::PedestrianHistory,
    ];
}

/// `channels × h × w` image with values in `[0, 1]`; the ego heading points
/// toward row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub region: CriticalRegion,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn zeros(region: CriticalRegion) -> Self {
        Self {
            region,
            data: vec![0.0; Channel::COUNT * region.height() * region.width()],
        }
    }

    pub fn channels(&self) -> usize {
        Channel::COUNT
    }

    pub fn height(&self) -> usize {
        self.region.height()
    }

    pub fn width(&self) -> usize {
        self.region.width()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: Channel) -> &[f32] {
        let n = self.height() * self.width();
        &self.data[c as usize * n..(c as usize + 1) * n]
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut [f32] {
        let n = self.height() * self.width();
        &mut self.data[c as usize * n..(c as usize + 1) * n]
    }

    pub fn get(&self, c: Channel, row: usize, col: usize) -> f32 {
        self.channel(c)[row * self.width() + col]
    }

    pub fn channel_grid(&self, c: Channel) -> Grid<f32> {
        Grid::from_vec(self.height(), self.width(), self.channel(c).to_vec()).expect("channel size")
    }
}

/// Nearest pixel `(row, col)` of a world point in the region anchored at
/// `ego_pose`. Indices outside the grid are returned unchanged.
pub fn world_to_pixel(point: (f64, f64), region: &CriticalRegion, ego_pose: &Pose) -> (i64, i64) {
    let (x, y) = EgoFrame::new(*ego_pose).to_local(point.0, point.1);
    region.local_to_pixel(x, y)
}

/// Calls `f(row, col)` for every pixel whose center lies inside `local_box`
/// (a box already expressed in the ego frame).
pub fn for_each_box_pixel(region: &CriticalRegion, local_box: &OrientedBox, mut f: impl FnMut(usize, usize)) {
    let Some((r0, r1, c0, c1)) = region.pixel_window(local_box) else {
        return;
    };
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (x, y) = region.pixel_center(row, col);
            if local_box.contains(x, y) {
                f(row, col);
            }
        }
    }
}

/// 1 where the pixel center lies inside any drivable polygon.
pub fn drivable_mask(scene: &Scene, region: &CriticalRegion, frame: &EgoFrame) -> Grid<u8> {
    Grid::from_fn(region.height(), region.width(), |row, col| {
        let (lx, ly) = region.pixel_center(row, col);
        let (wx, wy) = frame.to_world(lx, ly);
        scene.is_drivable(wx, wy) as u8
    })
}

/// Builds the network input for the current frame of `horizon`.
///
/// History frames are sampled every `rate_hz / history_hz` scene frames from
/// `t - H` to `t`. An agent box drawn in the `a`-th oldest of `F` frames has
/// intensity `(a + 1) / F`; newer frames overwrite older ones.
pub fn rasterize_history(
    scene: &Scene,
    region: &CriticalRegion,
    horizon: &Horizon,
    history_hz: u32,
) -> Result<RasterImage> {
    if history_hz == 0 || scene.rate_hz % history_hz != 0 {
        return Err(Error::RateMismatch { src: history_hz, dst: scene.rate_hz });
    }
    let t = horizon.current;
    let frame = EgoFrame::new(scene.ego_pose(t)?);
    let mut img = RasterImage::zeros(*region);
    let w = region.width();

    let drivable = drivable_mask(scene, region, &frame);
    for (dst, &src) in img.channel_mut(Channel::Drivable).iter_mut().zip(drivable.as_slice()) {
        *dst = src as f32;
    }

    let lanes = img.channel_mut(Channel::Lanes);
    let half = 0.5 * region.resolution;
    for lane in &scene.lanes {
        for seg in lane.0.windows(2) {
            let a = frame.to_local(seg[0][0], seg[0][1]);
            let b = frame.to_local(seg[1][0], seg[1][1]);
            let (a, b) = ([a.0, a.1], [b.0, b.1]);
            let (bx0, bx1) = (a[0].min(b[0]) - half, a[0].max(b[0]) + half);
            let (by0, by1) = (a[1].min(b[1]) - half, a[1].max(b[1]) + half);
            let (r0, c0) = region.local_to_pixel(bx0, by1);
            let (r1, c1) = region.local_to_pixel(bx1, by0);
            let r0 = r0.max(0);
            let c0 = c0.max(0);
            let r1 = r1.min(region.height() as i64 - 1);
            let c1 = c1.min(w as i64 - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let (x, y) = region.pixel_center(row as usize, col as usize);
                    if point_segment_distance([x, y], a, b) <= half {
                        lanes[row as usize * w + col as usize] = 1.0;
                    }
                }
            }
        }
    }

    let step = (scene.rate_hz / history_hz) as i64;
    let frames: Vec<i64> = (0..=horizon.history as i64 / step).rev().map(|j| t - j * step).collect();
    let count = frames.len() as f32;
    for (rank, &ts) in frames.iter().enumerate() {
        let value = (rank + 1) as f32 / count;
        for agent in &scene.agents {
            let channel = match agent.class {
                AgentClass::Ego => Channel::EgoHistory,
                AgentClass::Vehicle => Channel::VehicleHistory,
                AgentClass::Pedestrian => Channel::PedestrianHistory,
            };
            let Some(fp) = agent.footprint(ts) else { continue };
            let local = frame.box_to_local(&fp);
            let data = img.channel_mut(channel);
            for_each_box_pixel(region, &local, |r, c| data[r * w + c] = value);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;
    use crate::geometry::Polygon;
    use crate::scene::{AgentTrack, Lane};

    fn region() -> CriticalRegion {
        CriticalRegion::new(-20, 19, -10, 29, 0.5).unwrap()
    }

    fn scene(agents: Vec<AgentTrack>) -> Scene {
        let mut ego = AgentTrack::new("ego", AgentClass::Ego, 4.5, 2.0);
        for t in 0..=50 {
            ego.poses.insert(t, Pose::new(0.0, 0.0, 0.0));
        }
        let mut all = vec![ego];
        all.extend(agents);
        Scene {
            id: "r".into(),
            rate_hz: 10,
            drivable: vec![Polygon::rect(-50.0, -3.5, 50.0, 3.5)],
            lanes: vec![Lane(vec![[-50.0, -1.75], [50.0, -1.75]])],
            agents: all,
            ego_id: "ego".into(),
        }
    }

    #[test]
    fn pixel_mapping() {
        let r = CriticalRegion::full_scale();
        let ego = Pose::new(3.0, 4.0, 0.3);
        assert_eq!(world_to_pixel((3.0, 4.0), &r, &ego), (399, 250));
        // 1 m ahead is 10 rows up
        let ahead = (3.0 + 0.3f64.cos(), 4.0 + 0.3f64.sin());
        assert_eq!(world_to_pixel(ahead, &r, &ego), (389, 250));
        // ego facing +y: its left is world -x
        let ego = Pose::new(0.0, 0.0, FRAC_PI_2);
        assert_eq!(world_to_pixel((-2.0, 0.0), &r, &ego), (399, 230));
    }

    #[test]
    fn ego_only_scene_has_empty_vehicle_channel() {
        let s = scene(vec![]);
        let img = rasterize_history(&s, &region(), &Horizon::full_scale(), 2).unwrap();
        assert!(img.channel(Channel::VehicleHistory).iter().all(|&v| v == 0.0));
        assert!(img.channel(Channel::EgoHistory).iter().any(|&v| v == 1.0));
        assert!(img.channel(Channel::Lanes).iter().any(|&v| v == 1.0));
        assert!(img.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn static_vehicle_pixel_count_matches_brute_force() {
        let mut v = AgentTrack::new("v", AgentClass::Vehicle, 4.0, 2.0);
        for t in 0..=50 {
            v.poses.insert(t, Pose::new(10.0, 0.0, 0.0));
        }
        let s = scene(vec![v]);
        let r = region();
        let img = rasterize_history(&s, &r, &Horizon::full_scale(), 2).unwrap();
        let set = img.channel(Channel::VehicleHistory).iter().filter(|&&v| v > 0.0).count();
        // oracle: the box spans local y in [8, 12), x in [-1, 1); count lattice points
        let mut brute = 0;
        for px in r.l..=r.p {
            for py in r.m..=r.k {
                let (x, y) = (px as f64 * 0.5, py as f64 * 0.5);
                if (8.0..12.0).contains(&y) && (-1.0..1.0).contains(&x) {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 32);
        assert_eq!(set, brute);
    }

    #[test]
    fn fading_by_frame_rank() {
        let v = AgentTrack::new("v", AgentClass::Vehicle, 4.0, 2.0).with_pose(0, Pose::new(10.0, 0.0, 0.0));
        let s = scene(vec![v]);
        let img = rasterize_history(&s, &region(), &Horizon::full_scale(), 2).unwrap();
        let vals: Vec<f32> = img.channel(Channel::VehicleHistory).iter().copied().filter(|&v| v > 0.0).collect();
        assert!(!vals.is_empty());
        assert!(vals.iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn newer_frames_overwrite() {
        let mut v = AgentTrack::new("v", AgentClass::Vehicle, 4.0, 2.0);
        for t in 0..=20 {
            v.poses.insert(t, Pose::new(5.0 + 0.05 * t as f64, 0.0, 0.0));
        }
        let s = scene(vec![v]);
        let img = rasterize_history(&s, &region(), &Horizon::full_scale(), 2).unwrap();
        let max = img.channel(Channel::VehicleHistory).iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn missing_ego_anchor_is_an_error() {
        let mut s = scene(vec![]);
        s.agents[0].poses.remove(&20);
        assert!(matches!(
            rasterize_history(&s, &region(), &Horizon::full_scale(), 2),
            Err(Error::NoEgoAnchor { .. })
        ));
        assert!(rasterize_history(&scene(vec![]), &region(), &Horizon::full_scale(), 3).is_err());
    }

    #[test]
    fn rotating_the_world_leaves_the_raster_unchanged() {
        let mut v = AgentTrack::new("v", AgentClass::Vehicle, 4.3, 1.9);
        for t in 0..=50 {
            v.poses.insert(t, Pose::new(8.0 + 0.4 * t as f64, 1.2, 0.1));
        }
        let mut base = scene(vec![v]);
        // keep map edges off the pixel lattice
        base.drivable = vec![Polygon::rect(-50.0, -3.6, 50.0, 3.6)];
        base.lanes = vec![Lane(vec![[-50.0, -1.8], [50.0, -1.8]])];
        let r = region();
        let img0 = rasterize_history(&base, &r, &Horizon::full_scale(), 2).unwrap();
        for theta in [0.4, PI / 3.0, -2.0] {
            let (c, s) = (f64::cos(theta), f64::sin(theta));
            let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
            let mut sc = base.clone();
            for a in &mut sc.agents {
                for p in a.poses.values_mut() {
                    let q = rot([p.x, p.y]);
                    *p = Pose::new(q[0], q[1], p.yaw + theta);
                }
            }
            for poly in &mut sc.drivable {
                for p in &mut poly.0 {
                    *p = rot(*p);
                }
            }
            for lane in &mut sc.lanes {
                for p in &mut lane.0 {
                    *p = rot(*p);
                }
            }
            let img = rasterize_history(&sc, &r, &Horizon::full_scale(), 2).unwrap();
            let n = img.as_slice().len();
            let differing = img.as_slice().iter().zip(img0.as_slice()).filter(|(a, b)| a != b).count();
            // only pixel centers sitting on an edge may flip under round-off
            assert!(differing * 200 < n, "theta {theta}: {differing} differing");
        }
    }
}
