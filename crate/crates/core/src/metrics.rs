//! Evaluation measures: R², Spearman rank correlation, Matthews correlation,
//! quintile confusion matrices and cross-period evaluation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{fit_ridge, fold_assignment, quintile_assign, FeatureRow};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value"));
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("y_true is constant"));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&mid_ranks(a), &mid_ranks(b))
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(tp: u64, fp: u64, fn_: u64, tn: u64) -> f64 {
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// `m[t-1][p-1]` counts items of true group `t` predicted as group `p`.
pub fn confusion(true_groups: &[u8], pred_groups: &[u8]) -> Result<[[u64; 5]; 5]> {
    if true_groups.len() != pred_groups.len() {
        return Err(Error::shape(true_groups.len(), pred_groups.len()));
    }
    let mut m = [[0u64; 5]; 5];
    for (&t, &p) in true_groups.iter().zip(pred_groups) {
        if !(1..=5).contains(&t) || !(1..=5).contains(&p) {
            return Err(Error::invalid(format!("group labels must be in 1..=5, got ({t}, {p})")));
        }
        m[t as usize - 1][p as usize - 1] += 1;
    }
    Ok(m)
}

/// MCC of the four cumulative splits `{1..=k} | {k+1..=5}` for `k = 1..=4`,
/// with the upper side as the positive class.
pub fn dichotomy_mcc(true_groups: &[u8], pred_groups: &[u8]) -> Result<[f64; 4]> {
    let m = confusion(true_groups, pred_groups)?;
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (t, row) in m.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                match (t > k, p > k) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fn_ += c,
                    (false, false) => tn += c,
                }
            }
        }
        *o = mcc(tp, fp, fn_, tn);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    pub spearman: f64,
    pub confusion: [[u64; 5]; 5],
    pub dichotomy_mcc: [f64; 4],
}

impl EvalReport {
    /// Scores continuous predictions; quintile groups are taken separately
    /// over truth and predictions.
    pub fn compute(y_true: &[f64], y_pred: &[f64]) -> Result<Self> {
        let r2 = r2(y_true, y_pred)?;
        let spearman = spearman(y_true, y_pred)?;
        let (tg, pg) = (quintile_assign(y_true)?, quintile_assign(y_pred)?);
        Ok(Self {
            r2,
            spearman,
            confusion: confusion(&tg, &pg)?,
            dichotomy_mcc: dichotomy_mcc(&tg, &pg)?,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["true_group", "pred_1", "pred_2", "pred_3", "pred_4", "pred_5"])?;
        for (t, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Out-of-fold predictions from `folds`-fold cross-validation, refitting the
/// ridge head (λ chosen by inner CV) on each training split.
pub fn cross_validated_predictions(rows: &[FeatureRow], lambda_grid: &[f64], folds: usize, seed: u64) -> Result<Vec<f64>> {
    if rows.len() < 2 * folds {
        return Err(Error::invalid(format!("{} rows are too few for {folds}-fold CV", rows.len())));
    }
    let assign = fold_assignment(rows.len(), folds, seed);
    let mut pred = vec![0.0; rows.len()];
    for f in 0..folds {
        let train: Vec<FeatureRow> = rows
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a != f)
            .map(|(r, _)| r.clone())
            .collect();
        let inner = folds.min(train.len());
        let model = fit_ridge(&train, lambda_grid, inner, seed.wrapping_add(f as u64 + 1))?;
        for (i, r) in rows.iter().enumerate() {
            if assign[i] == f {
                pred[i] = model.predict(&r.features)?;
            }
        }
    }
    Ok(pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPeriodCell {
    pub train_phase: u32,
    pub test_phase: u32,
    pub report: EvalReport,
}

/// Train-phase × test-phase grid. Off-diagonal cells train on every site of
/// one phase and test on another; diagonal cells use `folds`-fold CV.
pub fn cross_period_eval(
    rows: &[FeatureRow],
    phases: &[u32],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Vec<CrossPeriodCell>> {
    let present: BTreeSet<u32> = rows.iter().map(|r| r.phase).collect();
    if phases.is_empty() {
        return Err(Error::invalid("no phases requested"));
    }
    if let Some(p) = phases.iter().find(|p| !present.contains(p)) {
        return Err(Error::invalid(format!("phase {p} has no sites")));
    }
    let subset = |p: u32| -> Vec<FeatureRow> { rows.iter().filter(|r| r.phase == p).cloned().collect() };
    let mut cells = Vec::new();
    for &train in phases {
        let train_rows = subset(train);
        let model = if phases.len() > 1 {
            Some(fit_ridge(&train_rows, lambda_grid, folds, seed)?)
        } else {
            None
        };
        for &test in phases {
            let test_rows = subset(test);
            let y: Vec<f64> = test_rows.iter().map(|r| r.wealth_index).collect();
            let pred = if train == test {
                cross_validated_predictions(&train_rows, lambda_grid, folds, seed)?
            } else {
                model.as_ref().expect("fitted for multi-phase grids").predict_batch(&test_rows)?
            };
            cells.push(CrossPeriodCell {
                train_phase: train,
                test_phase: test,
                report: EvalReport::compute(&y, &pred)?,
            });
        }
    }
    Ok(cells)
}
