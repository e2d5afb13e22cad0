use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{extract_features, FeatureRow, Pooling, SiteSource, TileTransform};
use crate::metrics::{cross_validated_predictions, r2, spearman};
use crate::model::ConvNet;
use crate::plot::{LineChart, Series};
use crate::raster::RasterTile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub repetitions: usize,
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
    /// Seed for fold assignment; shared by every cell so that an identity
    /// transform reproduces the baseline exactly.
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            folds: 5,
            lambda_grid: crate::head::default_lambda_grid(),
            seed: 0,
        }
    }
}

/// Out-of-fold R² and Spearman per repetition at one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: f64,
    pub pooling: Pooling,
    pub r2: Vec<f64>,
    pub spearman: Vec<f64>,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub family: String,
    pub param_name: String,
    /// Unperturbed scores as `(pooling, r2, spearman)`.
    pub baseline: Vec<(Pooling, f64, f64)>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn curve(&self, pooling: Pooling) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| p.pooling == pooling).collect()
    }

    pub fn baseline_r2(&self, pooling: Pooling) -> Option<f64> {
        self.baseline.iter().find(|b| b.0 == pooling).map(|b| b.1)
    }

    /// `family,param,pooling,metric,mean,std,values` with `;`-joined values.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["family", "param", "pooling", "metric", "mean", "std", "values"])?;
        for (pooling, r, s) in &self.baseline {
            for (metric, v) in [("r2", r), ("spearman", s)] {
                w.write_record([
                    self.family.as_str(),
                    "baseline",
                    pooling.name(),
                    metric,
                    &format!("{v:.6}"),
                    "0.000000",
                    &format!("{v:.6}"),
                ])?;
            }
        }
        for p in &self.points {
            for (metric, v) in [("r2", &p.r2), ("spearman", &p.spearman)] {
                let values: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                w.write_record([
                    self.family.clone(),
                    format!("{}", p.param),
                    p.pooling.name().to_string(),
                    metric.to_string(),
                    format!("{:.6}", mean(v)),
                    format!("{:.6}", std_dev(v)),
                    values.join(";"),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// R² against the swept parameter, one line per pooling with ±std bands
    /// and dashed baselines.
    pub fn to_svg(&self, log_x: bool) -> String {
        let mut series = Vec::new();
        for pooling in Pooling::BOTH {
            let curve = self.curve(pooling);
            if curve.is_empty() {
                continue;
            }
            series.push(Series {
                name: pooling.name().to_string(),
                points: curve.iter().map(|p| (p.param, mean(&p.r2), std_dev(&p.r2))).collect(),
                dashed: false,
            });
            if let Some(b) = self.baseline_r2(pooling) {
                let (lo, hi) = (curve.first().unwrap().param, curve.last().unwrap().param);
                series.push(Series {
                    name: format!("{} baseline", pooling.name()),
                    points: vec![(lo, b, 0.0), (hi, b, 0.0)],
                    dashed: true,
                });
            }
        }
        LineChart {
            title: format!("{} sweep", self.family),
            x_label: self.param_name.clone(),
            y_label: "R²".into(),
            log_x,
            series,
            markers: Vec::new(),
        }
        .to_svg()
    }
}

fn score(rows: &[FeatureRow], cfg: &SweepConfig) -> Result<(f64, f64)> {
    let pred = cross_validated_predictions(rows, &cfg.lambda_grid, cfg.folds, cfg.seed)?;
    let y: Vec<f64> = rows.iter().map(|r| r.wealth_index).collect();
    Ok((r2(&y, &pred)?, spearman(&y, &pred)?))
}

/// Scores both poolings on `sites` with every tile passed through
/// `transform` (or unchanged when `None`). The ridge head is refit on the
/// transformed features.
pub fn evaluate_transform(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    transform: Option<&TileTransform>,
    cfg: &SweepConfig,
) -> Result<Vec<(Pooling, f64, f64)>> {
    let (center, pooled) = extract_features(net, source, sites, transform)?;
    let (r_c, s_c) = score(&center, cfg)?;
    let (r_g, s_g) = score(&pooled, cfg)?;
    Ok(vec![(Pooling::Center, r_c, s_c), (Pooling::Grid3, r_g, s_g)])
}

/// A parameterised transform: `(param, repetition_seed, site_pos, tile_index, tile)`.
pub type ParamTransform<'a> = dyn Fn(f64, u64, usize, usize, &RasterTile) -> Result<RasterTile> + Sync + 'a;

/// Runs `transform` at each value of `params` for `repetitions` seeds and
/// collects out-of-fold scores for both poolings.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_sweep(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    family: &str,
    param_name: &str,
    params: &[f64],
    transform: &ParamTransform,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.repetitions == 0 {
        return Err(Error::invalid("sweep needs at least one repetition"));
    }
    let baseline = evaluate_transform(net, source, sites, None, cfg)?;
    let mut points = Vec::new();
    for &param in params {
        let mut reps: Vec<Vec<(Pooling, f64, f64)>> = Vec::new();
        for rep in 0..cfg.repetitions {
            let rep_seed = crate::seeds::derive(cfg.seed, family, rep as u64);
            let f = |pos: usize, t: usize, tile: &RasterTile| transform(param, rep_seed, pos, t, tile);
            reps.push(evaluate_transform(net, source, sites, Some(&f), cfg)?);
            log::info!("{family} {param_name}={param} rep {rep}: {:?}", reps.last().unwrap());
        }
        for (k, pooling) in Pooling::BOTH.iter().enumerate() {
            points.push(SweepPoint {
                param,
                pooling: *pooling,
                r2: reps.iter().map(|r| r[k].1).collect(),
                spearman: reps.iter().map(|r| r[k].2).collect(),
            });
        }
    }
    Ok(SweepResult {
        family: family.to_string(),
        param_name: param_name.to_string(),
        baseline,
        points,
    })
}
