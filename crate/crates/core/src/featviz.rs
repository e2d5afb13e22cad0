//! Activation maximization: gradient ascent on the input image towards a
//! chosen network unit.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{array_to_hwc, BackpropMode, ConvNet, Real, Unit};
use crate::raster::RasterTile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VizSpec {
    pub unit: Unit,
    pub steps: usize,
    /// Pixel change per step for a unit-RMS ascent direction.
    pub step_size: f64,
    pub seed: u64,
    /// Half-width of the uniform noise around mid-gray in the initial image.
    pub init_noise: f64,
    pub jitter_px: usize,
    pub smoothness_weight: f64,
    pub side: usize,
}

impl Default for VizSpec {
    fn default() -> Self {
        Self {
            unit: Unit::Output,
            steps: 512,
            step_size: 1e-2,
            seed: 0,
            init_noise: 0.1,
            jitter_px: 2,
            smoothness_weight: 1e-3,
            side: crate::raster::TILE_SIDE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VizStep {
    pub step: usize,
    /// Unit value of the proposal at this step.
    pub value: f64,
    /// Best unit value so far; this is the value of the current image.
    pub best: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizResult {
    pub image: RasterTile,
    /// Entry 0 is the random initial image.
    pub trajectory: Vec<VizStep>,
}

impl VizResult {
    pub fn initial_value(&self) -> f64 {
        self.trajectory[0].value
    }

    pub fn final_value(&self) -> f64 {
        self.trajectory.last().expect("non-empty").best
    }

    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "value", "best", "accepted"])?;
        for s in &self.trajectory {
            w.write_record([
                s.step.to_string(),
                format!("{:.9e}", s.value),
                format!("{:.9e}", s.best),
                (s.accepted as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.image.save_png(path)
    }
}

/// Circular shift by `(dy, dx)`.
fn roll<R: Real>(a: &Array3<R>, dy: isize, dx: isize) -> Array3<R> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
        a[[ch, sy, sx]]
    })
}

/// Gradient of the squared-difference total variation.
fn tv_gradient<R: Real>(a: &Array3<R>) -> Array3<R> {
    let (c, h, w) = a.dim();
    let two = R::of(2.0);
    let mut g = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = a[[ch, y, x]];
                if x + 1 < w {
                    let d = two * (v - a[[ch, y, x + 1]]);
                    g[[ch, y, x]] += d;
                    g[[ch, y, x + 1]] -= d;
                }
                if y + 1 < h {
                    let d = two * (v - a[[ch, y + 1, x]]);
                    g[[ch, y, x]] += d;
                    g[[ch, y + 1, x]] -= d;
                }
            }
        }
    }
    g
}

fn unit_value<R: Real>(net: &ConvNet<R>, x: &Array3<R>, unit: Unit) -> Result<f64> {
    let trace = net.trace(x.view())?;
    Ok(net.unit_value(&trace, unit)?.as_f64())
}

/// Ascends `spec.unit` from a seeded noise image around mid-gray. Each step rolls
/// the image by a random jitter, takes the unit gradient, subtracts the
/// smoothness penalty gradient, and moves by `step_size` along the
/// RMS-normalised direction. Proposals that lower the unit value are
/// rejected and the step shrinks; accepted steps let it grow back.
pub fn visualize_unit<R: Real>(net: &ConvNet<R>, spec: &VizSpec) -> Result<VizResult> {
    if !(spec.step_size > 0.0) || !(spec.smoothness_weight >= 0.0) || !(0.0..=0.5).contains(&spec.init_noise) || spec.side == 0 {
        return Err(Error::invalid("step size must be positive, smoothness weight non-negative, init noise in [0, 0.5]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side;
    let mut x: Array3<R> = Array3::from_shape_simple_fn((3, side, side), || R::of(0.5 + spec.init_noise * (2.0 * rng.gen::<f64>() - 1.0)));
    let mut current = unit_value(net, &x, spec.unit)?;
    if !current.is_finite() {
        return Err(Error::numeric("unit value is not finite at step 0"));
    }
    let mut trajectory = vec![VizStep {
        step: 0,
        value: current,
        best: current,
        accepted: true,
    }];
    let j = spec.jitter_px as isize;
    let tv_w = R::of(spec.smoothness_weight);
    let mut step = spec.step_size;
    for k in 1..=spec.steps {
        let (dy, dx) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
        let shifted = roll(&x, dy, dx);
        let g = net.input_gradient_array(shifted.view(), spec.unit, BackpropMode::Plain)?;
        let mut dir = roll(&g, -dy, -dx);
        if spec.smoothness_weight > 0.0 {
            dir.scaled_add(-tv_w, &tv_gradient(&x));
        }
        let rms = (dir.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / dir.len() as f64).sqrt();
        if !rms.is_finite() {
            return Err(Error::numeric(format!("ascent direction is not finite at step {k}")));
        }
        let mut accepted = false;
        let mut value = current;
        if rms > 0.0 {
            let scale = R::of(step / rms);
            let proposal = ndarray::Zip::from(&x)
                .and(&dir)
                .map_collect(|&a, &d| (a + scale * d).max(R::zero()).min(R::one()));
            value = unit_value(net, &proposal, spec.unit)?;
            if !value.is_finite() {
                return Err(Error::numeric(format!("unit value is not finite at step {k}")));
            }
            if value >= current {
                x = proposal;
                current = value;
                accepted = true;
                step = (step * 1.2).min(spec.step_size);
            } else {
                step = (step * 0.5).max(spec.step_size / 64.0);
            }
        }
        trajectory.push(VizStep {
            step: k,
            value,
            best: current,
            accepted,
        });
    }
    let pixels: Vec<f32> = array_to_hwc(&x).into_iter().map(|v| v as f32).collect();
    Ok(VizResult {
        image: RasterTile::new(side, side, pixels)?,
        trajectory,
    })
}
