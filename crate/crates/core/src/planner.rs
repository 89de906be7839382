//! Filtering candidate ego trajectories against a predicted earliest
//! occupancy map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pose};
use crate::grid::Grid;
use crate::raster::for_each_box_pixel;
use crate::scene::CriticalRegion;

/// Pixels covered by the ego at one future step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub dt: usize,
    /// `(row, col)` pixels.
    pub footprint: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTrajectory {
    pub id: String,
    pub steps: Vec<CandidateStep>,
}

impl CandidateTrajectory {
    /// Rasterizes ego boxes given as poses in the region's local frame.
    pub fn from_local_poses(id: impl Into<String>, region: &CriticalRegion, poses: &[(usize, Pose)], extent: [f64; 2]) -> Self {
        let steps = poses
            .iter()
            .map(|&(dt, pose)| {
                let mut footprint = Vec::new();
                for_each_box_pixel(region, &OrientedBox::new(pose, extent[0], extent[1]), |r, c| {
                    footprint.push([r as i64, c as i64])
                });
                CandidateStep { dt, footprint }
            })
            .collect();
        Self { id: id.into(), steps }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let mut prev = 0;
        for s in &self.steps {
            if s.dt <= prev || s.dt > horizon {
                return Err(Error::Config(format!(
                    "candidate `{}`: steps must increase strictly within (0, {horizon}], got {}",
                    self.id, s.dt
                )));
            }
            prev = s.dt;
        }
        Ok(())
    }
}

/// First cell where the ego would arrive no earlier than the predicted
/// occupancy (inflated by the margin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub dt: usize,
    pub row: usize,
    pub col: usize,
    pub predicted: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    pub id: String,
    pub conflict: Conflict,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub safe: Vec<String>,
    #[serde(rename = "unsafe")]
    pub unsafe_: Vec<Rejected>,
}

/// The earliest conflict of one candidate, if any: a footprint cell `c` at
/// step `dt` with `P(c) ≤ dt + margin`.
pub fn first_conflict(candidate: &CandidateTrajectory, pred: &Grid<f32>, horizon: usize, margin: f64) -> Result<Option<Conflict>> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config("margin must be non-negative".into()));
    }
    candidate.validate(horizon)?;
    let (h, w) = (pred.height(), pred.width());
    let mut found = None;
    for step in &candidate.steps {
        for &[row, col] in &step.footprint {
            let p = pred.try_get(row, col).ok_or(Error::OutOfBounds { row, col, h, w })?;
            if found.is_none() && p as f64 <= step.dt as f64 + margin {
                found = Some(Conflict { dt: step.dt, row: row as usize, col: col as usize, predicted: p });
            }
        }
    }
    Ok(found)
}

/// Splits candidates into safe ones and unsafe ones with evidence.
pub fn filter_safe(candidates: &[CandidateTrajectory], pred: &Grid<f32>, horizon: usize, margin: f64) -> Result<FilterOutcome> {
    let mut out = FilterOutcome::default();
    for c in candidates {
        match first_conflict(c, pred, horizon, margin)? {
            None => out.safe.push(c.id.clone()),
            Some(conflict) => out.unsafe_.push(Rejected { id: c.id.clone(), conflict }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(id: &str, col: i64, rows: std::ops::Range<i64>) -> CandidateTrajectory {
        let steps = rows.enumerate().map(|(i, r)| CandidateStep { dt: i + 1, footprint: vec![[r, col], [r, col + 1]] }).collect();
        CandidateTrajectory { id: id.into(), steps }
    }

    #[test]
    fn free_map_is_safe() {
        let p = Grid::filled(20, 20, 30.0f32);
        let out = filter_safe(&[straight("a", 3, 0..20)], &p, 30, 0.0).unwrap();
        assert_eq!(out.safe, vec!["a".to_string()]);
    }

    #[test]
    fn late_arrival_conflicts_with_evidence() {
        let mut p = Grid::filled(20, 20, 30.0f32);
        p.set(9, 4, 5.0);
        let out = filter_safe(&[straight("a", 3, 0..20)], &p, 30, 0.0).unwrap();
        assert_eq!(out.unsafe_[0].conflict, Conflict { dt: 10, row: 9, col: 4, predicted: 5.0 });
        // the ego clears the cell before it is occupied
        let mut p = Grid::filled(20, 20, 30.0f32);
        p.set(2, 3, 5.0);
        assert!(first_conflict(&straight("a", 3, 0..20), &p, 30, 0.0).unwrap().is_none());
        assert!(first_conflict(&straight("a", 3, 0..20), &p, 30, 2.0).unwrap().is_some());
    }

    #[test]
    fn bad_candidates_rejected() {
        let p = Grid::filled(5, 5, 30.0f32);
        assert!(matches!(first_conflict(&straight("a", 4, 0..3), &p, 30, 0.0), Err(Error::OutOfBounds { .. })));
        let mut c = straight("a", 0, 0..3);
        c.steps[1].dt = 1;
        assert!(first_conflict(&c, &p, 30, 0.0).is_err());
        assert!(first_conflict(&straight("a", 0, 0..3), &p, 2, 0.0).is_err());
        assert!(first_conflict(&straight("a", 0, 0..3), &p, 30, -1.0).is_err());
    }

    #[test]
    fn earlier_maps_and_larger_margins_shrink_the_safe_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let p = Grid::from_fn(8, 8, |_, _| rng.gen_range(0.0..=30.0f32));
            let q = Grid::from_vec(8, 8, p.as_slice().iter().map(|v| v - rng.gen_range(0.0..3.0f32)).collect()).unwrap();
            let cands: Vec<_> = (0..5)
                .map(|i| {
                    let steps = (1..=rng.gen_range(1..6))
                        .map(|dt| CandidateStep { dt: dt * 3, footprint: vec![[rng.gen_range(0..8), rng.gen_range(0..8)]] })
                        .collect();
                    CandidateTrajectory { id: i.to_string(), steps }
                })
                .collect();
            let safe_p = filter_safe(&cands, &p, 30, 0.0).unwrap().safe;
            let safe_q = filter_safe(&cands, &q, 30, 0.0).unwrap().safe;
            assert!(safe_q.iter().all(|id| safe_p.contains(id)));
            let safe_m = filter_safe(&cands, &p, 30, 1.5).unwrap().safe;
            assert!(safe_m.iter().all(|id| safe_p.contains(id)));
        }
    }

    #[test]
    fn footprints_from_poses() {
        let region = CriticalRegion::new(-10, 9, -5, 14, 0.5).unwrap();
        let c = CandidateTrajectory::from_local_poses("go", &region, &[(1, Pose::new(0.0, 1.0, std::f64::consts::FRAC_PI_2))], [4.0, 2.0]);
        // 2 m wide, 4 m long at 0.5 m pixels
        assert_eq!(c.steps[0].footprint.len(), 4 * 8);
    }
}
