//! Ridge-regression wealth head over CNN features.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::r2;
use crate::model::ConvNet;
use crate::raster::RasterTile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub site_id: usize,
    pub features: Vec<f64>,
    pub wealth_index: f64,
    pub phase: u32,
}

/// Feature pooling over a site's 3×3 tile neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pooling {
    /// Center tile only.
    #[serde(rename = "1x1")]
    Center,
    /// Mean over all nine tiles.
    #[serde(rename = "3x3")]
    Grid3,
}

impl Pooling {
    pub const BOTH: [Pooling; 2] = [Pooling::Center, Pooling::Grid3];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Center => "1x1",
            Pooling::Grid3 => "3x3",
        }
    }
}

/// Sites with nine row-major tiles each (index 4 is the center).
pub trait SiteSource: Sync {
    fn site_count(&self) -> usize;
    fn tile(&self, site: usize, index: usize) -> RasterTile;
    fn site_id(&self, site: usize) -> usize;
    fn wealth(&self, site: usize) -> f64;
    fn phase(&self, site: usize) -> u32;
}

/// Per-tile transform applied before feature extraction; receives the site
/// position in `sites` and the tile index.
pub type TileTransform<'a> = dyn Fn(usize, usize, &RasterTile) -> Result<RasterTile> + Sync + 'a;

/// Center-tile and 3×3-pooled feature rows for `sites`, in input order.
pub fn extract_features(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    transform: Option<&TileTransform>,
) -> Result<(Vec<FeatureRow>, Vec<FeatureRow>)> {
    use rayon::prelude::*;
    let per_site: Vec<(FeatureRow, FeatureRow)> = sites
        .par_iter()
        .enumerate()
        .map(|(pos, &site)| {
            let tiles = (0..9)
                .map(|t| {
                    let tile = source.tile(site, t);
                    let tile = match transform {
                        Some(f) => f(pos, t, &tile)?,
                        None => tile,
                    };
                    let (feat, _) = net.forward(&tile)?;
                    Ok(feat.iter().map(|&v| v as f64).collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let row = |features: Vec<f64>| FeatureRow {
                site_id: source.site_id(site),
                features,
                wealth_index: source.wealth(site),
                phase: source.phase(site),
            };
            Ok((row(tiles[4].clone()), row(pool_features(&tiles)?)))
        })
        .collect::<Result<_>>()?;
    Ok(per_site.into_iter().unzip())
}

/// Fitted linear model in raw feature space. The intercept is not penalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_dim: usize,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub cv_folds: usize,
    /// Mean validation R² for each grid value.
    #[serde(default)]
    pub cv_scores: Vec<f64>,
}

/// 13 log-spaced values from 1e-4 to 1e2.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-4.0 + i as f64 * 0.5)).collect()
}

pub const DEFAULT_FOLDS: usize = 5;

/// Component-wise mean of the nine per-tile feature vectors of a 3×3
/// neighbourhood.
pub fn pool_features(per_tile: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_tile.len() != 9 {
        return Err(Error::shape("9 feature vectors", per_tile.len()));
    }
    let d = per_tile[0].len();
    if let Some(bad) = per_tile.iter().find(|v| v.len() != d) {
        return Err(Error::shape(d, bad.len()));
    }
    let mut out = vec![0.0; d];
    for v in per_tile {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= 9.0);
    Ok(out)
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[&[f64]]) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn matrix(&self, x: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), self.mean.len(), |i, j| (x[i][j] - self.mean[j]) / self.scale[j])
    }
}

/// Gram matrix and moment vector of a standardised training fold.
struct Normal {
    std: Standardizer,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    y_mean: f64,
    xs: DMatrix<f64>,
    yc: DVector<f64>,
}

impl Normal {
    fn new(x: &[&[f64]], y: &[f64]) -> Self {
        let std = Standardizer::fit(x);
        let xs = std.matrix(x);
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let gram = xs.transpose() * &xs;
        let xty = xs.transpose() * &yc;
        Self {
            std,
            gram,
            xty,
            y_mean,
            xs,
            yc,
        }
    }

    fn solve(&self, lambda: f64) -> Result<(Vec<f64>, f64)> {
        let d = self.gram.nrows();
        let mut a = self.gram.clone();
        for i in 0..d {
            a[(i, i)] += lambda;
        }
        let w = match a.clone().cholesky() {
            Some(ch) => ch.solve(&self.xty),
            // Rank-deficient at λ = 0: minimum-norm least squares.
            None => self
                .xs
                .clone()
                .svd(true, true)
                .solve(&self.yc, 1e-12)
                .map_err(|e| Error::numeric(format!("ridge solve failed: {e}")))?,
        };
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("ridge solution is not finite"));
        }
        let weights: Vec<f64> = w.iter().zip(&self.std.scale).map(|(w, s)| w / s).collect();
        let intercept = self.y_mean - weights.iter().zip(&self.std.mean).map(|(w, m)| w * m).sum::<f64>();
        Ok((weights, intercept))
    }
}

fn check_rows(rows: &[FeatureRow]) -> Result<usize> {
    let d = rows.first().ok_or_else(|| Error::invalid("no feature rows"))?.features.len();
    for r in rows {
        if r.features.len() != d {
            return Err(Error::shape(d, r.features.len()));
        }
        if !r.wealth_index.is_finite() || r.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry in row for site {}", r.site_id)));
        }
    }
    let y0 = rows[0].wealth_index;
    if rows.iter().all(|r| r.wealth_index == y0) {
        return Err(Error::invalid("wealth labels are constant; regression is degenerate"));
    }
    Ok(d)
}

/// Ridge fit at a fixed `lambda` on features standardised over `rows`.
pub fn fit_ridge_fixed(rows: &[FeatureRow], lambda: f64) -> Result<RidgeModel> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let d = check_rows(rows)?;
    let x: Vec<&[f64]> = rows.iter().map(|r| r.features.as_slice()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.wealth_index).collect();
    let (weights, intercept) = Normal::new(&x, &y).solve(lambda)?;
    Ok(RidgeModel {
        weights,
        intercept,
        lambda,
        feature_dim: d,
        lambda_grid: vec![lambda],
        cv_folds: 0,
        cv_scores: Vec::new(),
    })
}

/// Seeded assignment of `n` items to `folds` near-equal folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Chooses λ from `lambda_grid` by `folds`-fold cross-validated R²
/// (standardisation fitted on each training fold), then refits on all rows.
pub fn fit_ridge(rows: &[FeatureRow], lambda_grid: &[f64], folds: usize, seed: u64) -> Result<RidgeModel> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("lambda grid must be non-empty and non-negative"));
    }
    if folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if rows.len() < folds {
        return Err(Error::invalid(format!("{} rows cannot fill {folds} folds", rows.len())));
    }
    check_rows(rows)?;
    let assign = fold_assignment(rows.len(), folds, seed);
    let mut sums = vec![0.0; lambda_grid.len()];
    let mut counts = vec![0usize; lambda_grid.len()];
    for f in 0..folds {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (r, &a) in rows.iter().zip(&assign) {
            if a == f {
                val.push(r);
            } else {
                train.push(r);
            }
        }
        if train.len() < 2 || val.len() < 2 {
            continue;
        }
        let x: Vec<&[f64]> = train.iter().map(|r| r.features.as_slice()).collect();
        let y: Vec<f64> = train.iter().map(|r| r.wealth_index).collect();
        let normal = Normal::new(&x, &y);
        let y_val: Vec<f64> = val.iter().map(|r| r.wealth_index).collect();
        for (k, &lambda) in lambda_grid.iter().enumerate() {
            let (w, b) = normal.solve(lambda)?;
            let pred: Vec<f64> = val
                .iter()
                .map(|r| b + r.features.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>())
                .collect();
            // Folds with a constant label carry no R² information.
            if let Ok(score) = r2(&y_val, &pred) {
                sums[k] += score;
                counts[k] += 1;
            }
        }
    }
    let cv_scores: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NEG_INFINITY })
        .collect();
    let best = cv_scores
        .iter()
        .enumerate()
        .fold(0, |best, (k, &s)| if s > cv_scores[best] { k } else { best });
    let mut model = fit_ridge_fixed(rows, lambda_grid[best])?;
    model.lambda_grid = lambda_grid.to_vec();
    model.cv_folds = folds;
    model.cv_scores = cv_scores;
    Ok(model)
}

impl RidgeModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim {
            return Err(Error::shape(self.feature_dim, features.len()));
        }
        Ok(self.intercept + features.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>())
    }

    pub fn predict_batch(&self, rows: &[FeatureRow]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict(&r.features)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: RidgeModel = serde_json::from_str(&text)?;
        if model.weights.len() != model.feature_dim {
            return Err(Error::Data("model weights do not match feature_dim".into()));
        }
        Ok(model)
    }
}

/// Quintile groups `1..=5` by rank: the item of 0-based rank `r` gets group
/// `⌊5r/n⌋ + 1`, i.e. ranks in `((g−1)n/5, gn/5]` counted from one. Ties
/// keep input order.
pub fn quintile_assign(values: &[f64]) -> Result<Vec<u8>> {
    let n = values.len();
    if n < 5 {
        return Err(Error::invalid(format!("quintiles need at least 5 values, got {n}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut groups = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        groups[i] = (5 * rank / n) as u8 + 1;
    }
    Ok(groups)
}

/// Writes `site_id,f0..f{D-1},wealth_index,phase`.
pub fn write_feature_table(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let d = rows.first().map(|r| r.features.len()).unwrap_or(0);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["site_id".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    header.push("wealth_index".into());
    header.push("phase".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.site_id.to_string()];
        rec.extend(r.features.iter().map(|v| format!("{v:.9e}")));
        rec.push(format!("{:.9e}", r.wealth_index));
        rec.push(r.phase.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_table(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[0] != "site_id" || &header[n - 2] != "wealth_index" || &header[n - 1] != "phase" {
        return Err(Error::Data(format!("unexpected feature table header in {}", path.display())));
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("bad number `{s}` in {}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(FeatureRow {
            site_id: rec[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad site id `{}`", &rec[0])))?,
            features: (1..n - 2).map(|i| parse(&rec[i])).collect::<Result<_>>()?,
            wealth_index: parse(&rec[n - 2])?,
            phase: rec[n - 1]
                .parse()
                .map_err(|_| Error::Data(format!("bad phase `{}`", &rec[n - 1])))?,
        });
    }
    Ok(rows)
}
