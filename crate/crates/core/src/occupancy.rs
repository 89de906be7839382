//! Ground truth: per-timestep occupancy, the earliest occupancy map and the
//! unseen mask, all on the pixel grid frozen at the ego pose of frame `t`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::EgoFrame;
use crate::grid::Grid;
use crate::raster::{drivable_mask, for_each_box_pixel};
use crate::scene::{unseen_agent_ids, AgentClass, CriticalRegion, Horizon, Scene};

/// Binary occupancy at frame `t + dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub grid: Grid<u8>,
    pub dt: usize,
}

/// Per-pixel first occupied timestep in `[0, T]`, `T` meaning "not within
/// the horizon". Integral for ground truth, real-valued for predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EarliestOccupancyMap {
    pub grid: Grid<f32>,
    pub horizon: usize,
}

impl EarliestOccupancyMap {
    pub fn new(grid: Grid<f32>, horizon: usize) -> Self {
        Self { grid, horizon }
    }

    pub fn filled(h: usize, w: usize, value: f32, horizon: usize) -> Self {
        Self::new(Grid::filled(h, w, value), horizon)
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    /// True when every value lies in `[0, T]`.
    pub fn in_range(&self) -> bool {
        let t = self.horizon as f32;
        self.grid.as_slice().iter().all(|&v| (0.0..=t).contains(&v))
    }
}

/// Pixels swept by unseen vehicles during the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenMask {
    pub grid: Grid<u8>,
}

impl UnseenMask {
    pub fn count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyConfig {
    /// Count the ego vehicle's own footprint as occupied.
    pub include_ego: bool,
}

fn counts_as_obstacle(class: AgentClass, cfg: &OccupancyConfig) -> bool {
    class != AgentClass::Ego || cfg.include_ego
}

/// Occupancy at frame `t + dt`: a pixel is 1 when its center is inside an
/// agent box or outside the drivable area.
pub fn occupancy_at(
    scene: &Scene,
    region: &CriticalRegion,
    horizon: &Horizon,
    dt: usize,
    cfg: &OccupancyConfig,
) -> Result<OccupancyGrid> {
    let frame = EgoFrame::new(scene.ego_pose(horizon.current)?);
    let mut grid = drivable_mask(scene, region, &frame).map(|d| 1 - d);
    let w = region.width();
    let ts = horizon.current + dt as i64;
    for agent in scene.agents.iter().filter(|a| counts_as_obstacle(a.class, cfg)) {
        if let Some(fp) = agent.footprint(ts) {
            let data = grid.as_mut_slice();
            for_each_box_pixel(region, &frame.box_to_local(&fp), |r, c| data[r * w + c] = 1);
        }
    }
    Ok(OccupancyGrid { grid, dt })
}

/// The earliest occupancy map over `dt ∈ {0, …, T-1}` with sentinel `T`.
///
/// Agent footprints are stamped with a running minimum instead of building
/// all `T` occupancy grids.
pub fn earliest_occupancy(
    scene: &Scene,
    region: &CriticalRegion,
    horizon: &Horizon,
    cfg: &OccupancyConfig,
) -> Result<EarliestOccupancyMap> {
    let frame = EgoFrame::new(scene.ego_pose(horizon.current)?);
    let t_max = horizon.future as f32;
    let mut grid = drivable_mask(scene, region, &frame).map(|d| if d == 1 { t_max } else { 0.0 });
    let w = region.width();
    for agent in scene.agents.iter().filter(|a| counts_as_obstacle(a.class, cfg)) {
        for dt in 0..horizon.future {
            let Some(fp) = agent.footprint(horizon.current + dt as i64) else { continue };
            let value = dt as f32;
            let data = grid.as_mut_slice();
            for_each_box_pixel(region, &frame.box_to_local(&fp), |r, c| {
                let cell = &mut data[r * w + c];
                if value < *cell {
                    *cell = value;
                }
            });
        }
    }
    Ok(EarliestOccupancyMap::new(grid, horizon.future))
}

/// Pixels covered by any unseen vehicle at some `dt ∈ (0, T]`.
pub fn unseen_mask(scene: &Scene, region: &CriticalRegion, horizon: &Horizon) -> Result<UnseenMask> {
    let frame = EgoFrame::new(scene.ego_pose(horizon.current)?);
    let ids = unseen_agent_ids(scene, region, horizon)?;
    let mut grid = Grid::filled(region.height(), region.width(), 0u8);
    let w = region.width();
    for agent in scene.agents.iter().filter(|a| ids.contains(&a.id)) {
        for dt in 1..=horizon.future as i64 {
            let Some(fp) = agent.footprint(horizon.current + dt) else { continue };
            let data = grid.as_mut_slice();
            for_each_box_pixel(region, &frame.box_to_local(&fp), |r, c| data[r * w + c] = 1);
        }
    }
    Ok(UnseenMask { grid })
}
