//! Dataset assembly, the training loop and the evaluation harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_eom, BaselineSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{write_atomic, write_json};
use crate::losses::{total_loss, LossTerms, LossWeights};
use crate::metrics::{scene_row, EvalReport, MetricsConfig};
use crate::net::{batch_rasters, Mode, NetConfig, Network};
use crate::occupancy::{earliest_occupancy, unseen_mask, OccupancyConfig};
use crate::raster::{rasterize_history, Channel, RasterImage};
use crate::scene::{synth_generate, CriticalRegion, GeneratorConfig, Horizon, Scene};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, Graph, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// `scenes` is ignored; the split sizes decide how many are generated.
    pub generator: GeneratorConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    /// Sampling rate of the history frames in the raster input.
    pub history_hz: u32,
}

impl DatasetSpec {
    pub fn desk() -> Self {
        Self { generator: GeneratorConfig::default(), train_scenes: 2000, val_scenes: 400, seed: 2021, history_hz: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if self.history_hz == 0 {
            return Err(Error::Config("history_hz must be positive".into()));
        }
        let mut g = self.generator.clone();
        g.scenes = 1;
        g.validate()
    }

    /// Generates both splits from one stream: the first `train_scenes`
    /// scenes train, the rest validate.
    pub fn generate(&self) -> Result<(Vec<Scene>, Vec<Scene>)> {
        self.validate()?;
        let mut g = self.generator.clone();
        g.scenes = self.train_scenes + self.val_scenes;
        let mut scenes = synth_generate(&g, self.seed)?;
        let val = scenes.split_off(self.train_scenes);
        Ok((scenes, val))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_hard: bool,
    pub no_soft: bool,
    pub no_unseen: bool,
    pub no_attention: bool,
}

impl Ablation {
    pub fn loss_terms(&self) -> LossTerms {
        LossTerms { hard: !self.no_hard, soft: !self.no_soft, unseen: !self.no_unseen, per_pixel_mean: false }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_hard, "no-hard"),
            (self.no_soft, "no-soft"),
            (self.no_unseen, "no-unseen"),
            (self.no_attention, "no-attention"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds weight init and batch shuffling.
    pub seed: u64,
    pub ablation: Ablation,
    pub metrics: MetricsConfig,
    /// Weight of the newest batch in the running normalization statistics.
    pub norm_momentum: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSpec::desk(),
            // narrow enough for 30 epochs on one core
            net: NetConfig { base_channels: 4, ..NetConfig::default() },
            loss: LossWeights::default(),
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            seed: 7,
            ablation: Ablation::default(),
            metrics: MetricsConfig::default(),
            norm_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.effective_net().validate()?;
        self.loss.validate()?;
        self.metrics.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("norm_momentum must lie in [0, 1]".into()));
        }
        let future = self.dataset.generator.horizon.future;
        if self.metrics.horizon != future {
            return Err(Error::Config(format!("metrics horizon {} differs from the dataset horizon {future}", self.metrics.horizon)));
        }
        if (self.net.output_scale - future as f64).abs() > 1e-9 {
            return Err(Error::Config(format!("output scale {} differs from the horizon {future}", self.net.output_scale)));
        }
        let r = &self.dataset.generator.region;
        self.net.check_input(r.height(), r.width())
    }

    /// The network configuration with the attention ablation applied.
    pub fn effective_net(&self) -> NetConfig {
        let mut net = self.net.clone();
        if self.ablation.no_attention {
            net.attention_enabled = false;
        }
        net
    }
}

/// One scene with everything training and evaluation need.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub raster: RasterImage,
    pub eom: Grid<f32>,
    pub unseen: Grid<u8>,
    pub drivable: Grid<u8>,
}

impl Sample {
    pub fn build(scene: Scene, region: &CriticalRegion, horizon: &Horizon, history_hz: u32) -> Result<Self> {
        let raster = rasterize_history(&scene, region, horizon, history_hz)?;
        let eom = earliest_occupancy(&scene, region, horizon, &OccupancyConfig::default())?.grid;
        let unseen = unseen_mask(&scene, region, horizon)?.grid;
        let drivable = raster.channel_grid(Channel::Drivable).map(|v| (v > 0.5) as u8);
        Ok(Self { scene, raster, eom, unseen, drivable })
    }

    pub fn id(&self) -> &str {
        &self.scene.id
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub region: CriticalRegion,
    pub horizon: Horizon,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<Scene>, region: &CriticalRegion, horizon: &Horizon, history_hz: u32) -> Result<Self> {
        let samples = scenes.into_iter().map(|s| Sample::build(s, region, horizon, history_hz)).collect::<Result<_>>()?;
        Ok(Self { region: *region, horizon: *horizon, samples })
    }

    /// Generates and precomputes both splits of `spec`.
    pub fn splits(spec: &DatasetSpec) -> Result<(Self, Self)> {
        let (train, val) = spec.generate()?;
        let (r, h) = (&spec.generator.region, &spec.generator.horizon);
        Ok((Self::from_scenes(train, r, h, spec.history_hz)?, Self::from_scenes(val, r, h, spec.history_hz)?))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One optimizer step. Term columns hold the weighted contribution to the
/// total, so a disabled term logs exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub rec: f64,
    pub hard: f64,
    pub soft: f64,
    pub unseen: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub seconds: f64,
}

pub struct Trained {
    pub network: Network<f32>,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub net: NetConfig,
    pub run: RunConfig,
}

/// Trains on `data`. With a run directory, writes `config.json`, `log.csv`
/// and `checkpoints/epoch_N` after each epoch.
pub fn train(config: &RunConfig, data: &Dataset, run_dir: Option<&Path>) -> Result<Trained> {
    train_with(config, data, run_dir, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &RunConfig,
    data: &Dataset,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let net_cfg = config.effective_net();
    let mut net = Network::<f32>::new(net_cfg.clone(), config.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &net.params);
    let terms = config.ablation.loss_terms();
    let (h, w) = (data.region.height(), data.region.width());
    if let Some(dir) = run_dir {
        write_json(config, &dir.join("config.json"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.samples[i]).collect();
            let rasters: Vec<&RasterImage> = samples.iter().map(|s| &s.raster).collect();
            let (x, shape) = batch_rasters::<f32>(&rasters)?;
            let n = samples.len();
            let target: Vec<f32> = samples.iter().flat_map(|s| s.eom.as_slice().iter().copied()).collect();
            let mask: Vec<f32> = samples.iter().flat_map(|s| s.unseen.as_slice().iter().map(|&m| m as f32)).collect();

            let mut g = Graph::<f32>::new();
            let input = g.constant(x, shape)?;
            let fwd = net.forward(&mut g, input, Mode::Train)?;
            let target = g.constant(target, [n, 1, h, w])?;
            let mask = g.constant(mask, [n, 1, h, w])?;
            let parts = total_loss(&mut g, fwd.output, target, mask, &config.loss, &terms)?;
            let value = |v| g.value(v)[0] as f64;
            let row = LogRow {
                epoch,
                step,
                rec: value(parts.rec),
                hard: if terms.hard { config.loss.hard_weight * value(parts.hard) } else { 0.0 },
                soft: if terms.soft { value(parts.soft) } else { 0.0 },
                unseen: if terms.unseen { config.loss.unseen_weight * value(parts.unseen) } else { 0.0 },
                total: value(parts.total),
            };
            if !row.total.is_finite() {
                let pred = g.value(fwd.output);
                let finite = pred.iter().filter(|v| v.is_finite()).count();
                let dump = NonFiniteDump {
                    step,
                    epoch,
                    scenes: samples.iter().map(|s| s.id().to_string()).collect(),
                    loss: row,
                    finite_predictions: finite,
                    predictions: pred.len(),
                };
                let mut detail = format!("scenes {:?}, {finite}/{} finite predictions", dump.scenes, dump.predictions);
                if let Some(dir) = run_dir {
                    let path = dir.join(format!("nonfinite_step_{step}.json"));
                    write_json(&dump, &path)?;
                    detail.push_str(&format!(", dump at {}", path.display()));
                }
                return Err(Error::NonFinite { step, detail });
            }
            let mut grads = g.backward(parts.total)?;
            let grads: Vec<Option<Vec<f32>>> = fwd.param_vars.iter().map(|&v| grads.take(v)).collect();
            adam.update(&mut net.params, &grads)?;
            net.update_running_stats(&fwd.batch_stats, config.norm_momentum)?;
            sum += row.total;
            steps += 1;
            log.push(row);
        }
        let summary = EpochSummary { epoch, steps, mean_total: sum / steps as f64, seconds: started.elapsed().as_secs_f64() };
        if let Some(dir) = run_dir {
            write_atomic(&dir.join("log.csv"), log_csv(&log)?.as_bytes())?;
            save_network(&net, &dir.join("checkpoints").join(format!("epoch_{epoch}")), epoch, config)?;
        }
        on_epoch(&summary);
        epochs.push(summary);
    }
    Ok(Trained { network: net, log, epochs })
}

#[derive(Debug, Serialize)]
struct NonFiniteDump {
    step: usize,
    epoch: usize,
    scenes: Vec<String>,
    loss: LogRow,
    finite_predictions: usize,
    predictions: usize,
}

/// `step,epoch,L_rec,L_h,L_s,L_u,total`.
pub fn log_csv(rows: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["step", "epoch", "L_rec", "L_h", "L_s", "L_u", "total"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            r.rec.to_string(),
            r.hard.to_string(),
            r.soft.to_string(),
            r.unseen.to_string(),
            r.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}

pub fn save_network(net: &Network<f32>, path: &Path, epoch: usize, run: &RunConfig) -> Result<()> {
    let meta = CheckpointMeta { epoch, net: net.config.clone(), run: run.clone() };
    let ckpt = Checkpoint { params: net.params.clone(), buffers: net.buffers.clone(), meta: serde_json::to_string(&meta)? };
    write_checkpoint(path, &ckpt)
}

pub fn load_network(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let ckpt = read_checkpoint::<f32>(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)?;
    let net = Network::from_parts(meta.net.clone(), ckpt.params, ckpt.buffers)?;
    Ok((net, meta))
}

/// Path of the last epoch checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("epoch_")).and_then(|s| s.parse().ok()) else { continue };
        if best.as_ref().map_or(true, |(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::Empty("checkpoints"))
}

pub enum Predictor<'a> {
    Network { name: String, net: &'a Network<f32> },
    Baseline { spec: BaselineSpec, seed: u64 },
    /// `P := E`.
    Oracle,
    /// The same value everywhere.
    Constant(f32),
}

impl Predictor<'_> {
    pub fn name(&self) -> String {
        match self {
            Self::Network { name, .. } => name.clone(),
            Self::Baseline { spec, .. } => spec.name(),
            Self::Oracle => "ground-truth-oracle".into(),
            Self::Constant(v) => format!("constant-{v}"),
        }
    }
}

const EVAL_BATCH: usize = 8;

/// Runs `predictor` on every sample and pools the metrics.
pub fn evaluate(predictor: &Predictor<'_>, data: &Dataset, metrics: &MetricsConfig) -> Result<EvalReport> {
    metrics.validate()?;
    if metrics.horizon != data.horizon.future {
        return Err(Error::Config(format!("metrics horizon {} differs from the dataset horizon {}", metrics.horizon, data.horizon.future)));
    }
    let mut rows = Vec::with_capacity(data.len());
    match predictor {
        Predictor::Network { net, .. } => {
            for chunk in data.samples.chunks(EVAL_BATCH) {
                let rasters: Vec<&RasterImage> = chunk.iter().map(|s| &s.raster).collect();
                for (s, p) in chunk.iter().zip(net.predict(&rasters)?) {
                    rows.push(scene_row(s.id(), &p.grid, &s.eom, &s.unseen, &s.drivable, metrics)?);
                }
            }
        }
        _ => {
            for (i, s) in data.samples.iter().enumerate() {
                let pred = match predictor {
                    Predictor::Baseline { spec, seed } => {
                        baseline_eom(&s.scene, &data.region, &data.horizon, spec, seed.wrapping_add(i as u64))?.grid
                    }
                    Predictor::Oracle => s.eom.clone(),
                    Predictor::Constant(v) => Grid::filled(s.eom.height(), s.eom.width(), *v),
                    Predictor::Network { .. } => unreachable!(),
                };
                rows.push(scene_row(s.id(), &pred, &s.eom, &s.unseen, &s.drivable, metrics)?);
            }
        }
    }
    EvalReport::from_rows(&predictor.name(), rows, metrics)
}

/// Ground truth for one scene as stored on disk.
pub struct GroundTruth<'a> {
    pub eom: &'a Grid<f32>,
    pub unseen: &'a Grid<u8>,
    pub drivable: &'a Grid<u8>,
}

/// Scores precomputed predictions keyed by scene id. The id sets must match.
pub fn evaluate_maps(
    name: &str,
    preds: &BTreeMap<String, Grid<f32>>,
    truth: &BTreeMap<String, GroundTruth<'_>>,
    metrics: &MetricsConfig,
) -> Result<EvalReport> {
    metrics.validate()?;
    if let Some(id) = preds.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::Scene(format!("prediction for scene `{id}` has no ground truth")));
    }
    if let Some(id) = truth.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::Scene(format!("scene `{id}` has no prediction")));
    }
    let rows = truth
        .iter()
        .map(|(id, gt)| scene_row(id, &preds[id], gt.eom, gt.unseen, gt.drivable, metrics))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(name, rows, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::MotionModel;

    fn tiny_config() -> RunConfig {
        let mut gen = GeneratorConfig::default();
        gen.region = CriticalRegion::new(-8, 7, -4, 11, 2.0).unwrap();
        gen.horizon = Horizon::new(10, 10, 10).unwrap();
        RunConfig {
            dataset: DatasetSpec { generator: gen, train_scenes: 4, val_scenes: 3, seed: 3, history_hz: 2 },
            net: NetConfig { base_channels: 2, dilation_rates: vec![2], output_scale: 10.0, ..NetConfig::default() },
            batch_size: 2,
            epochs: 2,
            metrics: MetricsConfig { horizon: 10, aggressiveness_constant: 11.0, ..MetricsConfig::default() },
            ..RunConfig::desk()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.validate().unwrap();
        c.dataset.val_scenes = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.metrics.horizon = 30;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.dataset.generator.region = CriticalRegion::new(-8, 6, -4, 11, 2.0).unwrap();
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&tiny_config()).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), tiny_config());
    }

    #[test]
    fn overfits_one_scene() {
        let mut c = tiny_config();
        c.dataset.train_scenes = 1;
        c.batch_size = 1;
        c.epochs = 200;
        c.lr = 3e-3;
        let (train_set, _) = Dataset::splits(&c.dataset).unwrap();
        let out = train(&c, &train_set, None).unwrap();
        let totals: Vec<f64> = out.log.iter().map(|r| r.total).collect();
        let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let smoothed: Vec<f64> = totals.chunks(40).map(window).collect();
        assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
    }

    #[test]
    fn training_is_deterministic_and_writes_a_run_dir() {
        let c = tiny_config();
        let (train_set, val) = Dataset::splits(&c.dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&c, &train_set, Some(dir.path())).unwrap();
        let b = train(&c, &train_set, None).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.log, b.log);
        assert!(dir.path().join("config.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + a.log.len());
        let latest = latest_checkpoint(dir.path()).unwrap();
        assert!(latest.ends_with("epoch_2"));
        let (loaded, meta) = load_network(&latest).unwrap();
        assert_eq!(loaded, a.network);
        assert_eq!(meta.epoch, 2);

        let p = Predictor::Network { name: "net".into(), net: &loaded };
        let r1 = evaluate(&p, &val, &c.metrics).unwrap();
        let r2 = evaluate(&p, &val, &c.metrics).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn ablation_zeroes_logged_terms() {
        let mut c = tiny_config();
        c.ablation.no_hard = true;
        c.ablation.no_unseen = true;
        c.epochs = 1;
        let (train_set, _) = Dataset::splits(&c.dataset).unwrap();
        let out = train(&c, &train_set, None).unwrap();
        for r in &out.log {
            assert_eq!(r.hard, 0.0);
            assert_eq!(r.unseen, 0.0);
            assert!((r.total - (r.rec + r.soft)).abs() <= 1e-3 * r.total.abs().max(1.0));
        }
        assert_eq!(c.ablation.label(), "no-hard+no-unseen");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut c = tiny_config();
        c.epochs = 1;
        let (mut train_set, _) = Dataset::splits(&c.dataset).unwrap();
        train_set.samples[0].eom.set(0, 0, f32::NAN);
        train_set.samples.truncate(1);
        let dir = tempfile::tempdir().unwrap();
        match train(&c, &train_set, Some(dir.path())) {
            Err(Error::NonFinite { step: 1, detail }) => assert!(detail.contains(train_set.samples[0].id())),
            other => panic!("{:?}", other.map(|t| t.log)),
        }
        assert!(dir.path().join("nonfinite_step_1.json").exists());
    }

    #[test]
    fn reference_predictors() {
        let c = tiny_config();
        let (_, val) = Dataset::splits(&c.dataset).unwrap();
        let oracle = evaluate(&Predictor::Oracle, &val, &c.metrics).unwrap();
        assert_eq!(oracle.missing_rate, 0.0);
        assert_eq!(oracle.mse, 0.0);
        let zeros = evaluate(&Predictor::Constant(0.0), &val, &c.metrics).unwrap();
        assert_eq!(zeros.missing_rate, 0.0);
        assert_eq!(zeros.aggressiveness, 11.0);

        // P = T is late exactly where E < T
        let all_t = evaluate(&Predictor::Constant(10.0), &val, &c.metrics).unwrap();
        let (mut below, mut total) = (0usize, 0usize);
        for s in &val.samples {
            below += s.eom.as_slice().iter().filter(|&&e| e < 10.0).count();
            total += s.eom.len();
        }
        assert!((all_t.missing_rate - 100.0 * below as f64 / total as f64).abs() < 1e-12);

        let spec = BaselineSpec { model: MotionModel::Cv, inject_lambda: None };
        let cv = evaluate(&Predictor::Baseline { spec, seed: 1 }, &val, &c.metrics).unwrap();
        assert!(cv.missing_rate.is_finite() && cv.aggressiveness.is_finite());
        assert_eq!(cv.unseen_scenes, val.samples.iter().filter(|s| s.unseen.as_slice().contains(&1)).count());
    }

    #[test]
    fn map_evaluation_requires_matching_ids() {
        let c = tiny_config();
        let (_, val) = Dataset::splits(&c.dataset).unwrap();
        let truth: BTreeMap<String, GroundTruth<'_>> = val
            .samples
            .iter()
            .map(|s| (s.id().to_string(), GroundTruth { eom: &s.eom, unseen: &s.unseen, drivable: &s.drivable }))
            .collect();
        let mut preds: BTreeMap<String, Grid<f32>> = val.samples.iter().map(|s| (s.id().to_string(), s.eom.clone())).collect();
        assert_eq!(evaluate_maps("gt", &preds, &truth, &c.metrics).unwrap().missing_rate, 0.0);
        let first = preds.keys().next().unwrap().clone();
        let g = preds.remove(&first).unwrap();
        preds.insert("bogus".into(), g);
        let err = evaluate_maps("gt", &preds, &truth, &c.metrics).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }
}
