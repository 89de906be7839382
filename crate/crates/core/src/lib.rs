//! Earliest occupancy maps: ground truth from scenes, a U-Net predictor with
//! safety-aware losses, physical baselines, metrics and a trajectory filter.

pub mod baselines;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod occupancy;
pub mod planner;
pub mod raster;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use baselines::{baseline_eom, BaselineSpec, MotionModel};
pub use error::{Error, Result};
pub use geometry::{EgoFrame, OrientedBox, Pose};
pub use grid::Grid;
pub use losses::{LossTerms, LossWeights};
pub use metrics::{EvalReport, MetricsConfig};
pub use net::{NetConfig, Network, OutputHead};
pub use occupancy::{earliest_occupancy, unseen_mask, EarliestOccupancyMap, OccupancyConfig, UnseenMask};
pub use planner::{filter_safe, CandidateTrajectory, FilterOutcome};
pub use raster::{rasterize_history, Channel, RasterImage};
pub use scene::{synth_generate, AgentClass, AgentTrack, CriticalRegion, GeneratorConfig, Horizon, Scene};
pub use trainer::{evaluate, train, Ablation, Dataset, DatasetSpec, Predictor, RunConfig};
