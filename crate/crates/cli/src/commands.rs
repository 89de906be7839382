use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eom_core::io::{
    decode_grid, encode_mask_pgm, encode_pgm, encode_raster_ppm, grid_dtype, read_grid, read_json, write_atomic, write_grid,
    write_json,
};
use eom_core::metrics::summary_csv;
use eom_core::planner::filter_safe;
use eom_core::trainer::{evaluate, evaluate_maps, load_network, train_with, GroundTruth};
use eom_core::{
    baseline_eom, earliest_occupancy, rasterize_history, synth_generate, unseen_mask, BaselineSpec, CandidateTrajectory,
    Dataset, Error, EvalReport, GeneratorConfig, Grid, MetricsConfig, OccupancyConfig, Predictor, RunConfig, Scene,
};
use serde_json::json;

use crate::args::{self, Cli, Command};
use crate::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

const EOM_SUFFIX: &str = ".eom.grid";
const UNSEEN_SUFFIX: &str = ".unseen.grid";
const DRIVABLE_SUFFIX: &str = ".drivable.grid";

pub fn run(cli: Cli) -> Result<()> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::GenScenes(a) => gen_scenes(a, &out),
        Command::Rasterize(a) => rasterize(a, &out),
        Command::Gt(a) => gt(a, &out),
        Command::Baseline(a) => baseline(a, &out),
        Command::Train(a) => train(a, &out),
        Command::Eval(a) => eval(a, &out),
        Command::Filter(a) => filter(a, &out),
        Command::Viz(a) => viz(a, &out),
    }
}

struct Output {
    json: bool,
}

impl Output {
    /// JSON on stdout with `--json`, otherwise the human line.
    fn emit(&self, value: serde_json::Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", human());
        }
    }

    fn progress(&self, msg: &str) {
        eprintln!("{msg}");
    }
}

fn gen_scenes(a: args::GenScenes, out: &Output) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let mut config = GeneratorConfig {
        scenes: a.n,
        region: a.geometry.region()?,
        horizon: a.geometry.horizon()?,
        rate_hz: a.geometry.rate_hz,
        ..GeneratorConfig::default()
    };
    if let Some(p) = a.unseen_prob {
        config.unseen_spawn_prob = p;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = synth_generate(&config, a.seed)?;
    for s in &scenes {
        write_json(s, &a.out.join(format!("{}.json", s.id)))?;
    }
    out.emit(json!({ "scenes": scenes.len(), "out": a.out }), || format!("wrote {} scenes to {}", scenes.len(), a.out.display()));
    Ok(())
}

/// Scene files of a directory in name order.
fn read_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths = list_dir(dir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")).collect::<Vec<_>>();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("scene directory").into());
    }
    paths
        .iter()
        .map(|p| {
            let s: Scene = read_json(p)?;
            s.validate()?;
            Ok(s)
        })
        .collect()
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    Ok(out)
}

/// `<scene>.<suffix>` grids of a directory keyed by scene id.
fn read_grid_dir<T: eom_core::io::GridElement>(dir: &Path, suffix: &str) -> Result<BTreeMap<String, Grid<T>>> {
    let mut out = BTreeMap::new();
    for p in list_dir(dir)? {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_suffix(suffix) {
            out.insert(id.to_string(), read_grid(&p)?);
        }
    }
    Ok(out)
}

fn rasterize(a: args::Rasterize, out: &Output) -> Result<()> {
    let (region, horizon) = (a.geometry.region()?, a.geometry.horizon()?);
    let scenes = read_scene_dir(&a.scenes)?;
    for s in &scenes {
        let img = rasterize_history(s, &region, &horizon, a.geometry.history_hz)?;
        // channels stacked along rows
        let stacked = Grid::from_vec(img.channels() * img.height(), img.width(), img.as_slice().to_vec())?;
        write_grid(&stacked, &a.out.join(format!("{}.raster.grid", s.id)))?;
        write_atomic(&a.out.join(format!("{}.ppm", s.id)), &encode_raster_ppm(&img))?;
    }
    out.emit(json!({ "rasters": scenes.len(), "out": a.out }), || format!("wrote {} rasters to {}", scenes.len(), a.out.display()));
    Ok(())
}

fn gt(a: args::Gt, out: &Output) -> Result<()> {
    let (region, horizon) = (a.geometry.region()?, a.geometry.horizon()?);
    let cfg = OccupancyConfig { include_ego: a.include_ego };
    let scenes = read_scene_dir(&a.scenes)?;
    let mut unseen_scenes = 0;
    for s in &scenes {
        let eom = earliest_occupancy(s, &region, &horizon, &cfg)?;
        let mask = unseen_mask(s, &region, &horizon)?;
        let frame = eom_core::EgoFrame::new(s.ego_pose(horizon.current)?);
        let drivable = eom_core::raster::drivable_mask(s, &region, &frame);
        unseen_scenes += usize::from(!mask.is_empty());
        write_grid(&eom.grid, &a.out.join(format!("{}{EOM_SUFFIX}", s.id)))?;
        write_grid(&mask.grid, &a.out.join(format!("{}{UNSEEN_SUFFIX}", s.id)))?;
        write_grid(&drivable, &a.out.join(format!("{}{DRIVABLE_SUFFIX}", s.id)))?;
    }
    out.emit(json!({ "scenes": scenes.len(), "unseen_scenes": unseen_scenes, "out": a.out }), || {
        format!("wrote ground truth for {} scenes ({unseen_scenes} with unseen vehicles) to {}", scenes.len(), a.out.display())
    });
    Ok(())
}

fn baseline(a: args::Baseline, out: &Output) -> Result<()> {
    if let Some(l) = a.inject_lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::Usage("--inject-lambda must be non-negative".into()));
        }
    }
    let (region, horizon) = (a.geometry.region()?, a.geometry.horizon()?);
    let spec = BaselineSpec { model: a.model, inject_lambda: a.inject_lambda };
    let scenes = read_scene_dir(&a.scenes)?;
    for (i, s) in scenes.iter().enumerate() {
        let pred = baseline_eom(s, &region, &horizon, &spec, a.seed.wrapping_add(i as u64))?;
        write_grid(&pred.grid, &a.out.join(format!("{}{EOM_SUFFIX}", s.id)))?;
    }
    out.emit(json!({ "predictor": spec.name(), "scenes": scenes.len(), "out": a.out }), || {
        format!("wrote {} predictions for {} to {}", scenes.len(), spec.name(), a.out.display())
    });
    Ok(())
}

fn train(a: args::Train, out: &Output) -> Result<()> {
    let mut c: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::desk(),
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.data_seed {
        c.dataset.seed = v;
    }
    if let Some(v) = a.n_train {
        c.dataset.train_scenes = v;
    }
    if let Some(v) = a.n_val {
        c.dataset.val_scenes = v;
    }
    if let Some(v) = a.base_channels {
        c.net.base_channels = v;
    }
    c.ablation.no_hard |= a.no_hard;
    c.ablation.no_soft |= a.no_soft;
    c.ablation.no_unseen |= a.no_unseen;
    c.ablation.no_attention |= a.no_attention;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    out.progress(&format!("generating {} + {} scenes", c.dataset.train_scenes, c.dataset.val_scenes));
    let (train_set, val) = Dataset::splits(&c.dataset)?;
    let trained = train_with(&c, &train_set, Some(&a.out), |s| {
        out.progress(&format!("epoch {:>3}  loss {:.4e}  {:.1}s", s.epoch, s.mean_total, s.seconds));
    })?;
    let name = format!("network-{}", c.ablation.label());
    let reports = vec![
        evaluate(&Predictor::Network { name, net: &trained.network }, &val, &c.metrics)?,
        evaluate(&Predictor::Oracle, &val, &c.metrics)?,
    ];
    write_reports(&reports, &c.metrics, &a.out)?;
    emit_reports(&reports, out);
    Ok(())
}

fn write_reports(reports: &[EvalReport], metrics: &MetricsConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.csv"), summary_csv(reports, &metrics.thresholds)?.as_bytes())?;
    write_json(reports, &dir.join("report.json"))?;
    Ok(())
}

fn emit_reports(reports: &[EvalReport], out: &Output) {
    if out.json {
        let summary: Vec<_> = reports
            .iter()
            .map(|r| {
                json!({
                    "predictor": r.predictor,
                    "missing_rate": r.missing_rate,
                    "aggressiveness": r.aggressiveness,
                    "unseen_recall": r.unseen_recall,
                    "unseen_scenes": r.unseen_scenes,
                    "mse": r.mse,
                    "mse_drivable": r.mse_drivable,
                })
            })
            .collect();
        println!("{}", serde_json::Value::Array(summary));
    } else {
        for (i, r) in reports.iter().enumerate() {
            let table = r.table();
            // one header for the whole table
            let text = if i == 0 { table.as_str() } else { table.split_once('\n').map_or("", |(_, rest)| rest) };
            print!("{text}");
        }
    }
}

fn eval(a: args::Eval, out: &Output) -> Result<()> {
    if a.pred_dir.is_some() == a.checkpoint.is_some() {
        return Err(CliError::Usage("give exactly one of --pred-dir or --checkpoint".into()));
    }
    let horizon = a.geometry.horizon()?;
    let metrics = MetricsConfig {
        aggressiveness_constant: a.aggressiveness_constant,
        thresholds: a.iou_thresholds.clone(),
        horizon: horizon.future,
    };
    metrics.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let eoms = read_grid_dir::<f32>(&a.gt_dir, EOM_SUFFIX)?;
    let unseen = read_grid_dir::<u8>(&a.gt_dir, UNSEEN_SUFFIX)?;
    let drivable = read_grid_dir::<u8>(&a.gt_dir, DRIVABLE_SUFFIX)?;
    if eoms.is_empty() {
        return Err(Error::Empty("ground-truth directory").into());
    }
    let mut truth = BTreeMap::new();
    for (id, eom) in &eoms {
        let missing = |what: &str| Error::Scene(format!("ground truth for `{id}` has no {what} mask"));
        let m = unseen.get(id).ok_or_else(|| missing("unseen"))?;
        let d = drivable.get(id).ok_or_else(|| missing("drivable"))?;
        truth.insert(id.clone(), GroundTruth { eom, unseen: m, drivable: d });
    }

    let (name, preds) = match (&a.pred_dir, &a.checkpoint) {
        (Some(dir), None) => {
            let name = a.name.clone().unwrap_or_else(|| dir.file_name().map_or("predictions".into(), |n| n.to_string_lossy().into_owned()));
            (name, read_grid_dir::<f32>(dir, EOM_SUFFIX)?)
        }
        (None, Some(ckpt)) => {
            let region = a.geometry.region()?;
            let scenes_dir = a.scenes.as_ref().ok_or_else(|| CliError::Usage("--checkpoint needs --scenes".into()))?;
            let (net, _) = load_network(ckpt)?;
            let mut preds = BTreeMap::new();
            for s in read_scene_dir(scenes_dir)? {
                let img = rasterize_history(&s, &region, &horizon, a.geometry.history_hz)?;
                let p = net.predict(&[&img])?.remove(0);
                preds.insert(s.id, p.grid);
            }
            (a.name.clone().unwrap_or_else(|| "network".into()), preds)
        }
        _ => return Err(CliError::Usage("give exactly one of --pred-dir or --checkpoint".into())),
    };
    let oracle: BTreeMap<String, Grid<f32>> = eoms.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let reports = vec![
        evaluate_maps(&name, &preds, &truth, &metrics)?,
        evaluate_maps("ground-truth-oracle", &oracle, &truth, &metrics)?,
    ];
    if let Some(dir) = &a.out {
        write_reports(&reports, &metrics, dir)?;
    }
    emit_reports(&reports, out);
    Ok(())
}

fn filter(a: args::Filter, out: &Output) -> Result<()> {
    let pred = read_grid::<f32>(&a.eom)?;
    let cands: Vec<CandidateTrajectory> = read_json(&a.trajs)?;
    if !(a.margin_steps >= 0.0 && a.margin_steps.is_finite()) {
        return Err(CliError::Usage("--margin-steps must be non-negative".into()));
    }
    let outcome = filter_safe(&cands, &pred, a.horizon_steps, a.margin_steps)?;
    out.emit(serde_json::to_value(&outcome).map_err(Error::from)?, || {
        let mut s = format!("safe: {}", outcome.safe.join(", "));
        for r in &outcome.unsafe_ {
            let c = r.conflict;
            s.push_str(&format!("\nunsafe: {} (step {} at row {} col {}, predicted {})", r.id, c.dt, c.row, c.col, c.predicted));
        }
        s
    });
    Ok(())
}

fn viz(a: args::Viz, out: &Output) -> Result<()> {
    let bytes = std::fs::read(&a.grid).map_err(|e| Error::io(&a.grid, e))?;
    let image = match grid_dtype(&bytes)? {
        "u8" => encode_mask_pgm(&decode_grid::<u8>(&bytes)?),
        _ => {
            if !(a.max_value > 0.0) {
                return Err(CliError::Usage("--max-value must be positive".into()));
            }
            encode_pgm(&decode_grid::<f32>(&bytes)?, a.max_value)
        }
    };
    write_atomic(&a.out, &image)?;
    out.emit(json!({ "out": a.out }), || format!("wrote {}", a.out.display()));
    Ok(())
}
