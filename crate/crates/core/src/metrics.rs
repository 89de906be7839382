//! Evaluation metrics: missing rate, aggressiveness, unseen IoU and recall,
//! and MSE. Pooled quantities accumulate in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Constant `C` in the aggressiveness metric.
    pub aggressiveness_constant: f64,
    /// IoU thresholds `α` for unseen recall.
    pub thresholds: Vec<f64>,
    pub horizon: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { aggressiveness_constant: 31.0, thresholds: vec![0.3, 0.5, 0.7], horizon: 30 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aggressiveness_constant <= self.horizon as f64 {
            return Err(Error::Config(format!(
                "aggressiveness constant {} must exceed the horizon {}",
                self.aggressiveness_constant, self.horizon
            )));
        }
        if self.thresholds.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// A prediction paired with its ground truth.
pub type Pair<'a> = (&'a Grid<f32>, &'a Grid<f32>);

fn check_pairs(pairs: &[Pair<'_>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty("prediction/target pairs"));
    }
    for (p, e) in pairs {
        p.ensure_same_shape(e)?;
    }
    Ok(())
}

/// Percentage of pixels with `P > E`, pooled over scenes.
pub fn missing_rate(pairs: &[Pair<'_>]) -> Result<f64> {
    check_pairs(pairs)?;
    let (mut late, mut total) = (0u64, 0u64);
    for (p, e) in pairs {
        late += p.as_slice().iter().zip(e.as_slice()).filter(|(p, e)| p > e).count() as u64;
        total += p.len() as u64;
    }
    if total == 0 {
        return Err(Error::Empty("pixels"));
    }
    Ok(100.0 * late as f64 / total as f64)
}

/// Mean of `C − P` over pixels with `E ≠ 0`, pooled over scenes.
pub fn aggressiveness(pairs: &[Pair<'_>], constant: f64) -> Result<f64> {
    check_pairs(pairs)?;
    let (mut sum, mut count) = (0.0f64, 0u64);
    for (p, e) in pairs {
        for (&p, &e) in p.as_slice().iter().zip(e.as_slice()) {
            if e != 0.0 {
                sum += constant - p as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(sum / count as f64)
}

/// `|M ∩ {0 < P < T}| / |M|`.
pub fn unseen_iou(pred: &Grid<f32>, mask: &Grid<u8>, horizon: usize) -> Result<f64> {
    pred.ensure_same_shape(mask)?;
    let t = horizon as f32;
    let (mut hit, mut total) = (0u64, 0u64);
    for (&p, &m) in pred.as_slice().iter().zip(mask.as_slice()) {
        if m != 0 {
            total += 1;
            if p > 0.0 && p < t {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("unseen mask"));
    }
    Ok(hit as f64 / total as f64)
}

/// Percentage of scenes with IoU strictly above each threshold.
pub fn unseen_recall(ious: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if ious.is_empty() {
        return Err(Error::Empty("scenes with unseen vehicles"));
    }
    Ok(thresholds
        .iter()
        .map(|&a| 100.0 * ious.iter().filter(|&&iou| iou > a).count() as f64 / ious.len() as f64)
        .collect())
}

/// Mean of `(P − E)²` over all pixels of all scenes.
pub fn mse(pairs: &[Pair<'_>]) -> Result<f64> {
    check_pairs(pairs)?;
    let (mut sum, mut count) = (0.0f64, 0u64);
    for (p, e) in pairs {
        for (&p, &e) in p.as_slice().iter().zip(e.as_slice()) {
            sum += (p as f64 - e as f64).powi(2);
        }
        count += p.len() as u64;
    }
    if count == 0 {
        return Err(Error::Empty("pixels"));
    }
    Ok(sum / count as f64)
}

/// [`mse`] restricted to pixels set in the per-scene drivable masks.
pub fn mse_drivable(pairs: &[Pair<'_>], drivable: &[&Grid<u8>]) -> Result<f64> {
    check_pairs(pairs)?;
    if drivable.len() != pairs.len() {
        return Err(Error::Shape(format!("{} drivable masks for {} scenes", drivable.len(), pairs.len())));
    }
    let (mut sum, mut count) = (0.0f64, 0u64);
    for ((p, e), d) in pairs.iter().zip(drivable) {
        p.ensure_same_shape(d)?;
        for ((&p, &e), &d) in p.as_slice().iter().zip(e.as_slice()).zip(d.as_slice()) {
            if d != 0 {
                sum += (p as f64 - e as f64).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(sum / count as f64)
}

/// Per-scene sufficient statistics; pooled metrics are computed from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: String,
    pub pixels: u64,
    pub late_pixels: u64,
    pub evaluable_pixels: u64,
    /// `Σ (C − P)` over evaluable pixels.
    pub aggressiveness_sum: f64,
    pub squared_error_sum: f64,
    pub drivable_pixels: u64,
    pub drivable_squared_error_sum: f64,
    pub unseen_pixels: u64,
    pub unseen_iou: Option<f64>,
}

impl SceneRow {
    pub fn missing_rate(&self) -> f64 {
        100.0 * self.late_pixels as f64 / self.pixels.max(1) as f64
    }

    pub fn aggressiveness(&self) -> Option<f64> {
        (self.evaluable_pixels > 0).then(|| self.aggressiveness_sum / self.evaluable_pixels as f64)
    }

    pub fn mse(&self) -> f64 {
        self.squared_error_sum / self.pixels.max(1) as f64
    }
}

/// Builds per-scene rows for [`EvalReport::from_rows`].
pub fn scene_row(
    scene: &str,
    pred: &Grid<f32>,
    target: &Grid<f32>,
    unseen: &Grid<u8>,
    drivable: &Grid<u8>,
    config: &MetricsConfig,
) -> Result<SceneRow> {
    pred.ensure_same_shape(target)?;
    pred.ensure_same_shape(unseen)?;
    pred.ensure_same_shape(drivable)?;
    let c = config.aggressiveness_constant;
    let mut row = SceneRow {
        scene: scene.to_string(),
        pixels: pred.len() as u64,
        late_pixels: 0,
        evaluable_pixels: 0,
        aggressiveness_sum: 0.0,
        squared_error_sum: 0.0,
        drivable_pixels: 0,
        drivable_squared_error_sum: 0.0,
        unseen_pixels: unseen.as_slice().iter().filter(|&&m| m != 0).count() as u64,
        unseen_iou: None,
    };
    for i in 0..pred.len() {
        let (p, e) = (pred.as_slice()[i], target.as_slice()[i]);
        if p > e {
            row.late_pixels += 1;
        }
        if e != 0.0 {
            row.evaluable_pixels += 1;
            row.aggressiveness_sum += c - p as f64;
        }
        let sq = (p as f64 - e as f64).powi(2);
        row.squared_error_sum += sq;
        if drivable.as_slice()[i] != 0 {
            row.drivable_pixels += 1;
            row.drivable_squared_error_sum += sq;
        }
    }
    if row.unseen_pixels > 0 {
        row.unseen_iou = Some(unseen_iou(pred, unseen, config.horizon)?);
    }
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub alpha: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    /// Percent.
    pub missing_rate: f64,
    pub aggressiveness: f64,
    /// Empty when no scene contains unseen vehicles.
    pub unseen_recall: Vec<RecallAt>,
    pub unseen_scenes: usize,
    pub mse: f64,
    pub mse_drivable: Option<f64>,
    pub scenes: Vec<SceneRow>,
}

impl EvalReport {
    pub fn from_rows(predictor: &str, rows: Vec<SceneRow>, config: &MetricsConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("evaluation scenes"));
        }
        let pixels: u64 = rows.iter().map(|r| r.pixels).sum();
        let late: u64 = rows.iter().map(|r| r.late_pixels).sum();
        let evaluable: u64 = rows.iter().map(|r| r.evaluable_pixels).sum();
        if evaluable == 0 {
            return Err(Error::NoEvaluablePixels);
        }
        let aggr: f64 = rows.iter().map(|r| r.aggressiveness_sum).sum();
        let sq: f64 = rows.iter().map(|r| r.squared_error_sum).sum();
        let dpix: u64 = rows.iter().map(|r| r.drivable_pixels).sum();
        let dsq: f64 = rows.iter().map(|r| r.drivable_squared_error_sum).sum();
        let ious: Vec<f64> = rows.iter().filter_map(|r| r.unseen_iou).collect();
        let unseen_recall = if ious.is_empty() {
            Vec::new()
        } else {
            unseen_recall(&ious, &config.thresholds)?
                .into_iter()
                .zip(&config.thresholds)
                .map(|(percent, &alpha)| RecallAt { alpha, percent })
                .collect()
        };
        Ok(Self {
            predictor: predictor.to_string(),
            missing_rate: 100.0 * late as f64 / pixels as f64,
            aggressiveness: aggr / evaluable as f64,
            unseen_recall,
            unseen_scenes: ious.len(),
            mse: sq / pixels as f64,
            mse_drivable: (dpix > 0).then(|| dsq / dpix as f64),
            scenes: rows,
        })
    }

    /// Unseen recall at `alpha`, if any scene had unseen vehicles.
    pub fn recall_at(&self, alpha: f64) -> Option<f64> {
        self.unseen_recall.iter().find(|r| (r.alpha - alpha).abs() < 1e-12).map(|r| r.percent)
    }

    /// One row per scene followed by a summary row named `ALL`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["scene", "pixels", "late_pixels", "missing_rate", "aggressiveness", "unseen_iou", "mse", "mse_drivable"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.scenes {
            let dmse = (r.drivable_pixels > 0).then(|| r.drivable_squared_error_sum / r.drivable_pixels as f64);
            w.write_record([
                r.scene.clone(),
                r.pixels.to_string(),
                r.late_pixels.to_string(),
                r.missing_rate().to_string(),
                opt(r.aggressiveness()),
                opt(r.unseen_iou),
                r.mse().to_string(),
                opt(dmse),
            ])
            .map_err(csv_err)?;
        }
        let pixels: u64 = self.scenes.iter().map(|r| r.pixels).sum();
        let late: u64 = self.scenes.iter().map(|r| r.late_pixels).sum();
        w.write_record([
            "ALL".to_string(),
            pixels.to_string(),
            late.to_string(),
            self.missing_rate.to_string(),
            self.aggressiveness.to_string(),
            String::new(),
            self.mse.to_string(),
            opt(self.mse_drivable),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Summary laid out like a results table.
    pub fn table(&self) -> String {
        let mut head = format!("{:<24} {:>8} {:>8}", "predictor", "MR(%)", "Aggr");
        let mut line = format!("{:<24} {:>8.2} {:>8.2}", self.predictor, self.missing_rate, self.aggressiveness);
        for r in &self.unseen_recall {
            head.push_str(&format!(" {:>8}", format!("UR{}", r.alpha)));
            line.push_str(&format!(" {:>8.2}", r.percent));
        }
        head.push_str(&format!(" {:>8}", "MSE"));
        line.push_str(&format!(" {:>8.2}", self.mse));
        format!("{head}\n{line}\n")
    }
}

/// One summary row per report: predictor, MR, aggressiveness, UR at each
/// threshold, MSE and drivable MSE.
pub fn summary_csv(reports: &[EvalReport], thresholds: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    let mut head = vec!["predictor".to_string(), "missing_rate".into(), "aggressiveness".into()];
    head.extend(thresholds.iter().map(|a| format!("unseen_recall_{a}")));
    head.extend(["unseen_scenes".into(), "mse".into(), "mse_drivable".into()]);
    w.write_record(&head).map_err(csv_err)?;
    for r in reports {
        let mut rec = vec![r.predictor.clone(), r.missing_rate.to_string(), r.aggressiveness.to_string()];
        rec.extend(thresholds.iter().map(|&a| r.recall_at(a).map(|v| v.to_string()).unwrap_or_default()));
        rec.push(r.unseen_scenes.to_string());
        rec.push(r.mse.to_string());
        rec.push(r.mse_drivable.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
