use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use eom_core::{CriticalRegion, Horizon, MotionModel};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "eom", version, about = "Earliest occupancy map pipeline")]
pub struct Cli {
    /// Print only machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes, one JSON file each.
    GenScenes(GenScenes),
    /// Render network input rasters for a scene directory.
    Rasterize(Rasterize),
    /// Compute ground-truth earliest occupancy, unseen and drivable masks.
    Gt(Gt),
    /// Predict with a physical motion model.
    Baseline(Baseline),
    /// Train the network on a synthetic dataset.
    Train(Train),
    /// Score predictions against ground truth.
    Eval(Eval),
    /// Split candidate ego trajectories into safe and unsafe.
    Filter(Filter),
    /// Export a grid file as a PGM image.
    Viz(Viz),
}

/// Region and timeline. Defaults are full scale; `--desk` switches to the
/// 100x100 region at 0.5 m/px.
#[derive(Debug, Clone, Args)]
pub struct Geometry {
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub resolution_m_per_px: Option<f64>,
    /// Half-width of the region.
    #[arg(long)]
    pub side_m: Option<f64>,
    #[arg(long)]
    pub ahead_m: Option<f64>,
    #[arg(long)]
    pub behind_m: Option<f64>,
    /// History length `H` in frames.
    #[arg(long)]
    pub history_frames: Option<usize>,
    /// Prediction horizon `T` in frames.
    #[arg(long)]
    pub future_frames: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub rate_hz: u32,
    /// Sampling rate of history frames in the raster.
    #[arg(long, default_value_t = 2)]
    pub history_hz: u32,
}

impl Geometry {
    pub fn region(&self) -> Result<CriticalRegion, CliError> {
        let preset = if self.desk { CriticalRegion::desk() } else { CriticalRegion::full_scale() };
        if self.resolution_m_per_px.is_none() && self.side_m.is_none() && self.ahead_m.is_none() && self.behind_m.is_none() {
            return Ok(preset);
        }
        let res = self.resolution_m_per_px.unwrap_or(preset.resolution);
        if !(res > 0.0 && res.is_finite()) {
            return Err(CliError::Usage("--resolution-m-per-px must be positive".into()));
        }
        let px = |m: Option<f64>, default: f64, name: &str| -> Result<i32, CliError> {
            let m = m.unwrap_or(default);
            let n = (m / res).round();
            if !(n >= 1.0 && n < 1e5) {
                return Err(CliError::Usage(format!("--{name} must cover at least one pixel")));
            }
            Ok(n as i32)
        };
        let side = px(self.side_m, 25.0, "side-m")?;
        let ahead = px(self.ahead_m, 40.0, "ahead-m")?;
        let behind = px(self.behind_m, 10.0, "behind-m")?;
        CriticalRegion::new(-side, side - 1, -behind, ahead - 1, res).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn horizon(&self) -> Result<Horizon, CliError> {
        let d = Horizon::full_scale();
        let h = self.history_frames.unwrap_or(d.history);
        Horizon::new(h, self.future_frames.unwrap_or(d.future), h as i64).map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
pub struct GenScenes {
    /// Number of scenes.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability that a scene receives unseen vehicles.
    #[arg(long)]
    pub unseen_prob: Option<f64>,
    #[command(flatten)]
    pub geometry: Geometry,
}

#[derive(Debug, Args)]
pub struct Rasterize {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub geometry: Geometry,
}

#[derive(Debug, Args)]
pub struct Gt {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Count the ego's own footprint as occupied.
    #[arg(long)]
    pub include_ego: bool,
    #[command(flatten)]
    pub geometry: Geometry,
}

#[derive(Debug, Args)]
pub struct Baseline {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// cv, ca, cm or cy.
    #[arg(long)]
    pub model: MotionModel,
    /// Mean number of injected random vehicles per scene.
    #[arg(long)]
    pub inject_lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub geometry: Geometry,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Run directory.
    #[arg(long, env = "EOM_RUN_DIR")]
    pub out: PathBuf,
    /// Full run configuration as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds weight init and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seeds scene generation.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub no_hard: bool,
    #[arg(long)]
    pub no_soft: bool,
    #[arg(long)]
    pub no_unseen: bool,
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Directory written by `gt`.
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Directory of `<scene>.eom.grid` predictions.
    #[arg(long, conflicts_with = "checkpoint")]
    pub pred_dir: Option<PathBuf>,
    /// Network checkpoint; needs `--scenes`.
    #[arg(long, requires = "scenes")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Label of the predictor in the report.
    #[arg(long)]
    pub name: Option<String>,
    /// Writes report.csv and report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 31.0)]
    pub aggressiveness_constant: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.3, 0.5, 0.7])]
    pub iou_thresholds: Vec<f64>,
    #[command(flatten)]
    pub geometry: Geometry,
}

#[derive(Debug, Args)]
pub struct Filter {
    /// Predicted earliest occupancy grid file.
    #[arg(long)]
    pub eom: PathBuf,
    /// JSON array of candidate trajectories.
    #[arg(long)]
    pub trajs: PathBuf,
    /// Safety margin added to each arrival step.
    #[arg(long, visible_alias = "margin", default_value_t = 0.0)]
    pub margin_steps: f64,
    #[arg(long, default_value_t = 30)]
    pub horizon_steps: usize,
}

#[derive(Debug, Args)]
pub struct Viz {
    /// A grid file (f32 maps or u8 masks).
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Value drawn white in f32 maps.
    #[arg(long, default_value_t = 30.0)]
    pub max_value: f32,
}
