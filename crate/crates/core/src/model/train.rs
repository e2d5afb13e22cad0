//! Two-stage nightlight training: head only, then the whole network.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BackpropMode, ConvNet, Real, Unit};
use crate::error::{Error, Result};
use crate::model::tile_to_array;
use crate::raster::RasterTile;

/// Labelled training tiles. Implementations may render or decode tiles
/// lazily.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ln(1 + nightlight)` target of sample `i`.
    fn label(&self, i: usize) -> f64;

    fn input(&self, i: usize) -> Result<RasterTile>;
}

impl SampleSource for [(RasterTile, f64)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn label(&self, i: usize) -> f64 {
        self[i].1
    }

    fn input(&self, i: usize) -> Result<RasterTile> {
        Ok(self[i].0.clone())
    }
}

impl SampleSource for Vec<(RasterTile, f64)> {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn label(&self, i: usize) -> f64 {
        self[i].1
    }

    fn input(&self, i: usize) -> Result<RasterTile> {
        Ok(self[i].0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// L2 penalty on weights during fine-tuning.
    pub l2: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    /// Fraction of samples held out for validation loss.
    pub val_fraction: f64,
    /// When set, every epoch keeps all bright samples and draws dark ones so
    /// that they make up this fraction of the epoch.
    pub dark_fraction: Option<f64>,
    /// Nightlight sum below which a sample counts as dark.
    pub dark_threshold: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 20,
            stage2_epochs: 20,
            stage1_lr: 0.01,
            stage2_lr: 0.001,
            l2: 0.1,
            batch_size: 100,
            epsilon: 1e-8,
            val_fraction: 0.1,
            dark_fraction: Some(0.58),
            dark_threshold: 1.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !lr_ok(self.stage1_lr) || !lr_ok(self.stage2_lr) || !lr_ok(self.l2) {
            return Err(Error::invalid("learning rates and l2 must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if let Some(f) = self.dark_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid("dark_fraction must be in [0, 1)"));
            }
        }
        Ok(())
    }

    fn is_dark(&self, label: f64) -> bool {
        label < self.dark_threshold.ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Head,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Share of dark samples among those visited this epoch.
    pub dark_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn initial_train_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Writes `stage,epoch,train_loss,val_loss,dark_fraction,marker`; the first
/// fine-tuning row carries the marker `finetune_start`.
pub fn write_loss_history(history: &LossHistory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("stage,epoch,train_loss,val_loss,dark_fraction,marker\n");
    let mut marked = false;
    for r in &history.records {
        let stage = match r.stage {
            Stage::Init => "init",
            Stage::Head => "head",
            Stage::Finetune => "finetune",
        };
        let marker = if r.stage == Stage::Finetune && !marked {
            marked = true;
            "finetune_start"
        } else {
            ""
        };
        let val = r.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
        text.push_str(&format!(
            "{stage},{},{:.8},{val},{:.4},{marker}\n",
            r.epoch, r.train_loss, r.dark_fraction
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Indices visited in one epoch: every bright sample plus enough randomly
/// drawn dark ones to make up `dark_fraction` of the total (all dark samples
/// if there are not enough). Returned in shuffled order.
pub fn select_epoch_samples(
    pool: &[usize],
    is_dark: impl Fn(usize) -> bool,
    dark_fraction: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut chosen: Vec<usize> = match dark_fraction {
        None => pool.to_vec(),
        Some(f) => {
            let (mut dark, bright): (Vec<usize>, Vec<usize>) = pool.iter().partition(|&&i| is_dark(i));
            if bright.is_empty() {
                dark
            } else {
                let want = ((f / (1.0 - f)) * bright.len() as f64).round() as usize;
                dark.shuffle(rng);
                dark.truncate(want);
                let mut all = bright;
                all.extend(dark);
                all
            }
        }
    };
    chosen.shuffle(rng);
    chosen
}

struct Adagrad {
    accum: Vec<f64>,
    lr: f64,
    eps: f64,
}

impl Adagrad {
    fn new(n: usize, lr: f64, eps: f64) -> Self {
        Self { accum: vec![0.0; n], lr, eps }
    }

    fn step<R: Real>(&mut self, params: &mut [R], grads: &[f64]) {
        for ((p, g), a) in params.iter_mut().zip(grads).zip(self.accum.iter_mut()) {
            *a += g * g;
            let update = self.lr * g / (a.sqrt() + self.eps);
            *p = R::of(p.as_f64() - update);
        }
    }
}

fn split_train_val(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn check_finite(loss: f64, stage: Stage, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite loss {loss} in {stage:?} stage, epoch {epoch}, batch {batch}"
        )))
    }
}

fn head_mse<R: Real>(net: &ConvNet<R>, features: &Array2<f64>, labels: &[f64], idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let w: Array1<f64> = net.head.weights.mapv(|v| v.as_f64());
    let b = net.head.bias.as_f64();
    let sse: f64 = idx
        .iter()
        .map(|&i| {
            let r = features.row(i).dot(&w) + b - labels[i];
            r * r
        })
        .sum();
    Some(sse / idx.len() as f64)
}

fn full_mse<R: Real>(net: &ConvNet<R>, data: &dyn SampleSource, idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let sq: Vec<f64> = idx
        .par_iter()
        .map(|&i| -> Result<f64> {
            let x = tile_to_array::<R>(&data.input(i)?);
            let (_, out) = net.forward_array(x.view())?;
            let r = out.as_f64() - data.label(i);
            Ok(r * r)
        })
        .collect::<Result<_>>()?;
    Ok(Some(sq.iter().sum::<f64>() / idx.len() as f64))
}

/// Trains `net` on `(tile, ln(1+nightlight))` pairs: `stage1_epochs` with
/// only the head free, then `stage2_epochs` on every weight with L2 decay.
/// Loss is mean squared error.
pub fn train_two_stage<R: Real>(
    mut net: ConvNet<R>,
    data: &dyn SampleSource,
    sched: &TrainSchedule,
) -> Result<(ConvNet<R>, LossHistory)> {
    if data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    sched.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let (train, val) = split_train_val(data.len(), sched.val_fraction, &mut rng);
    let labels: Vec<f64> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut history = LossHistory::default();

    // The backbone is frozen during stage 1, so features are computed once.
    let d = net.feature_dim();
    let mut features = Array2::<f64>::zeros((data.len(), d));
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let x = tile_to_array::<R>(&data.input(i)?);
            let (f, _) = net.forward_array(x.view())?;
            Ok(f.iter().map(|v| v.as_f64()).collect())
        })
        .collect::<Result<_>>()?;
    for (i, r) in rows.into_iter().enumerate() {
        features.row_mut(i).assign(&Array1::from(r));
    }
    let dark_share = |idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().filter(|&&i| sched.is_dark(labels[i])).count() as f64 / idx.len() as f64
        }
    };
    history.records.push(EpochRecord {
        stage: Stage::Init,
        epoch: 0,
        train_loss: head_mse(&net, &features, &labels, &train).expect("non-empty train split"),
        val_loss: head_mse(&net, &features, &labels, &val),
        dark_fraction: dark_share(&train),
    });

    let mut opt = Adagrad::new(d + 1, sched.stage1_lr, sched.epsilon);
    let mut head: Vec<R> = net.head.weights.iter().copied().chain(std::iter::once(net.head.bias)).collect();
    for epoch in 1..=sched.stage1_epochs {
        let order = select_epoch_samples(&train, |i| sched.is_dark(labels[i]), sched.dark_fraction, &mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(sched.batch_size).enumerate() {
            let mut g = vec![0.0; d + 1];
            let mut batch_loss = 0.0;
            for &i in batch {
                let f = features.row(i);
                let out: f64 = f.iter().zip(&head).map(|(x, w)| x * w.as_f64()).sum::<f64>() + head[d].as_f64();
                let r = out - labels[i];
                batch_loss += r * r;
                let scale = 2.0 * r / batch.len() as f64;
                for (gj, x) in g.iter_mut().zip(f.iter()) {
                    *gj += scale * x;
                }
                g[d] += scale;
            }
            check_finite(batch_loss, Stage::Head, epoch, b)?;
            loss_sum += batch_loss;
            opt.step(&mut head, &g);
        }
        net.head.weights.iter_mut().zip(&head).for_each(|(w, v)| *w = *v);
        net.head.bias = head[d];
        history.records.push(EpochRecord {
            stage: Stage::Head,
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            val_loss: head_mse(&net, &features, &labels, &val),
            dark_fraction: dark_share(&order),
        });
    }

    let mut params = net.params_flat();
    let decay = net.decay_mask();
    let mut opt = Adagrad::new(params.len(), sched.stage2_lr, sched.epsilon);
    for epoch in 1..=sched.stage2_epochs {
        let order = select_epoch_samples(&train, |i| sched.is_dark(labels[i]), sched.dark_fraction, &mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(sched.batch_size).enumerate() {
            let n = batch.len();
            let per_sample: Vec<(f64, Vec<R>)> = batch
                .par_iter()
                .map(|&i| -> Result<(f64, Vec<R>)> {
                    let x = tile_to_array::<R>(&data.input(i)?);
                    let trace = net.trace(x.view())?;
                    let r = trace.output.as_f64() - labels[i];
                    let mut grads = net.zero_grads();
                    net.backward(
                        &trace,
                        Unit::Output,
                        R::of(2.0 * r / n as f64),
                        BackpropMode::Plain,
                        None,
                        Some(&mut grads),
                    )?;
                    Ok((r * r, grads.flat()))
                })
                .collect::<Result<_>>()?;
            let mut g = vec![0.0f64; params.len()];
            let mut batch_loss = 0.0;
            for (loss, sample_grad) in &per_sample {
                batch_loss += loss;
                for (acc, v) in g.iter_mut().zip(sample_grad) {
                    *acc += v.as_f64();
                }
            }
            check_finite(batch_loss, Stage::Finetune, epoch, b)?;
            if sched.l2 > 0.0 {
                for ((acc, p), &on) in g.iter_mut().zip(&params).zip(&decay) {
                    if on {
                        *acc += 2.0 * sched.l2 * p.as_f64();
                    }
                }
            }
            loss_sum += batch_loss;
            opt.step(&mut params, &g);
            net.set_params_flat(&params)?;
        }
        history.records.push(EpochRecord {
            stage: Stage::Finetune,
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            val_loss: full_mse(&net, data, &val)?,
            dark_fraction: dark_share(&order),
        });
    }
    Ok((net, history))
}
