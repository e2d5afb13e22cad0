//! A small fully convolutional regressor with exact reverse-mode gradients.
//!
//! The network is a stack of [`Layer`]s producing a spatial map, followed by
//! global average pooling (the feature vector) and an affine head (the scalar
//! output). Every query used by the explanation methods is answered from a
//! [`Trace`] of one forward pass.

mod checkpoint;
mod layers;
mod train;

use ndarray::{Array1, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{RasterTile, GRID_SIDE, TILE_SIDE};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParamEntry};
pub use layers::{Conv2d, Real};
pub use train::{
    select_epoch_samples, train_two_stage, write_loss_history, EpochRecord, LossHistory, SampleSource,
    Stage, TrainSchedule,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<R> {
    Conv(Conv2d<R>),
    Relu,
    AvgPool { size: usize },
}

impl<R> Layer<R> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool { .. } => "avgpool",
        }
    }
}

/// Affine map from the pooled feature vector to the scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<R> {
    pub weights: Array1<R>,
    pub bias: R,
}

/// Which scalar a gradient query differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Output,
    Feature(usize),
}

/// How ReLU layers route gradients backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackpropMode {
    Plain,
    /// Zero the signal wherever the forward activation or the incoming
    /// gradient is negative.
    Guided,
}

/// Layer widths and strides of the default backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl ArchConfig {
    /// Six 3×3 conv blocks, 8→16→32→32→64→`feature_dim`. Total stride 32, so
    /// a 224 tile ends in a 7×7 map.
    pub fn standard(feature_dim: usize) -> Self {
        Self {
            channels: vec![8, 16, 32, 32, 64, feature_dim],
            strides: vec![2, 2, 2, 2, 1, 2],
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<R = f32> {
    pub layers: Vec<Layer<R>>,
    pub head: Head<R>,
}

/// Cached forward pass.
#[derive(Debug, Clone)]
pub struct Trace<R> {
    input_hw: (usize, usize),
    /// Output of each layer, in order.
    pub activations: Vec<Array3<R>>,
    cols: Vec<Option<ndarray::Array2<R>>>,
    pub features: Array1<R>,
    pub output: R,
}

impl<R> Trace<R> {
    pub fn last_map(&self) -> &Array3<R> {
        self.activations.last().expect("non-empty network")
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<R> {
    pub conv: Vec<(ndarray::Array2<R>, Array1<R>)>,
    pub head_weights: Array1<R>,
    pub head_bias: R,
}

pub struct Backward<R> {
    pub input: Array3<R>,
    /// Gradient with respect to the output of the captured layer.
    pub captured: Option<Array3<R>>,
}

impl<R: Real> ConvNet<R> {
    pub fn new(layers: Vec<Layer<R>>, head: Head<R>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut channels = None;
        for layer in &layers {
            if let Layer::Conv(c) = layer {
                if let Some(prev) = channels {
                    if prev != c.in_channels {
                        return Err(Error::shape(prev, c.in_channels));
                    }
                } else if c.in_channels != 3 {
                    return Err(Error::shape("3 input channels", c.in_channels));
                }
                channels = Some(c.out_channels);
            }
        }
        let d = channels.unwrap_or(3);
        if head.weights.len() != d {
            return Err(Error::shape(format!("head of width {d}"), head.weights.len()));
        }
        Ok(Self { layers, head })
    }

    /// Seeded fan-in-scaled uniform initialisation, ReLU after every conv.
    pub fn standard(arch: &ArchConfig, seed: u64) -> Result<Self> {
        if arch.channels.len() != arch.strides.len() || arch.channels.is_empty() {
            return Err(Error::invalid("channels and strides must be equal-length and non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (&cout, &stride) in arch.channels.iter().zip(&arch.strides) {
            let mut conv = Conv2d::zeros(cin, cout, arch.kernel, stride, arch.kernel / 2);
            let limit = (6.0 / (cin * arch.kernel * arch.kernel) as f64).sqrt();
            conv.weight.mapv_inplace(|_| R::of(rng.gen_range(-limit..limit)));
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
            cin = cout;
        }
        let limit = 1.0 / (cin as f64).sqrt();
        let head = Head {
            weights: Array1::from_shape_fn(cin, |_| R::of(rng.gen_range(-limit..limit))),
            bias: R::zero(),
        };
        Self::new(layers, head)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weights.len()
    }

    /// Index of the last convolution's rectified output, the layer Grad-CAM
    /// reads from.
    pub fn last_conv_layer(&self) -> Option<usize> {
        let conv = self.layers.iter().rposition(|l| matches!(l, Layer::Conv(_)))?;
        match self.layers.get(conv + 1) {
            Some(Layer::Relu) => Some(conv + 1),
            _ => Some(conv),
        }
    }

    pub fn cast<S: Real>(&self) -> ConvNet<S> {
        let conv = |x: R| S::of(x.as_f64());
        ConvNet {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv2d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                        weight: c.weight.mapv(conv),
                        bias: c.bias.mapv(conv),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::AvgPool { size } => Layer::AvgPool { size: *size },
                })
                .collect(),
            head: Head {
                weights: self.head.weights.mapv(conv),
                bias: conv(self.head.bias),
            },
        }
    }

    fn check_input(&self, input: &ArrayView3<R>) -> Result<()> {
        let (c, mut h, mut w) = input.dim();
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    (h, w) = conv.output_size(h, w).ok_or_else(|| {
                        Error::invalid(format!("input too small for layer {i}"))
                    })?;
                }
                Layer::AvgPool { size } => {
                    if h < *size || w < *size {
                        return Err(Error::invalid(format!("input too small for layer {i}")));
                    }
                    (h, w) = (h / size, w / size);
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    /// Forward pass on a channel-first array of any compatible size.
    pub fn trace(&self, input: ArrayView3<R>) -> Result<Trace<R>> {
        self.check_input(&input)?;
        let (_, h, w) = input.dim();
        let mut activations: Vec<Array3<R>> = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = activations.last().map(|a| a.view()).unwrap_or_else(|| input.view());
            let (out, c) = match layer {
                Layer::Conv(conv) => {
                    let (out, c) = conv.forward(x);
                    (out, Some(c))
                }
                Layer::Relu => (x.mapv(|v| if v > R::zero() { v } else { R::zero() }), None),
                Layer::AvgPool { size } => (layers::avg_pool(&x.to_owned(), *size), None),
            };
            activations.push(out);
            cols.push(c);
        }
        let last = activations.last().expect("non-empty");
        let (_, lh, lw) = last.dim();
        let cells = R::of((lh * lw) as f64);
        let features = Array1::from_iter(last.outer_iter().map(|ch| ch.sum() / cells));
        let output = features.dot(&self.head.weights) + self.head.bias;
        Ok(Trace {
            input_hw: (h, w),
            activations,
            cols,
            features,
            output,
        })
    }

    pub fn unit_value(&self, trace: &Trace<R>, unit: Unit) -> Result<R> {
        match unit {
            Unit::Output => Ok(trace.output),
            Unit::Feature(i) => trace
                .features
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("feature index {i} out of range 0..{}", self.feature_dim()))),
        }
    }

    /// Reverse pass for `unit`. `capture` names a layer whose output gradient
    /// should be returned; `grads` accumulates parameter gradients scaled by
    /// `scale`.
    pub fn backward(
        &self,
        trace: &Trace<R>,
        unit: Unit,
        scale: R,
        mode: BackpropMode,
        capture: Option<usize>,
        mut grads: Option<&mut ParamGrads<R>>,
    ) -> Result<Backward<R>> {
        let d = self.feature_dim();
        let dfeat = match unit {
            Unit::Output => {
                if let Some(g) = grads.as_deref_mut() {
                    g.head_weights.scaled_add(scale, &trace.features);
                    g.head_bias += scale;
                }
                self.head.weights.mapv(|w| w * scale)
            }
            Unit::Feature(i) => {
                if i >= d {
                    return Err(Error::invalid(format!("feature index {i} out of range 0..{d}")));
                }
                let mut v = Array1::zeros(d);
                v[i] = scale;
                v
            }
        };
        if let Some(c) = capture {
            if c >= self.layers.len() {
                return Err(Error::invalid(format!("layer {c} out of range 0..{}", self.layers.len())));
            }
        }
        let last = trace.last_map();
        let (_, lh, lw) = last.dim();
        let cells = R::of((lh * lw) as f64);
        let mut grad = Array3::from_shape_fn(last.dim(), |(c, _, _)| dfeat[c] / cells);
        let mut captured = None;
        let mut conv_index = self.layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if capture == Some(i) {
                captured = Some(grad.clone());
            }
            let input_hw = if i == 0 {
                trace.input_hw
            } else {
                let (_, h, w) = trace.activations[i - 1].dim();
                (h, w)
            };
            grad = match layer {
                Layer::Conv(conv) => {
                    conv_index -= 1;
                    let cols = trace.cols[i].as_ref().expect("conv trace");
                    let pg = grads.as_deref_mut().map(|g| {
                        let (w, b) = &mut g.conv[conv_index];
                        (w, b)
                    });
                    conv.backward(&grad, cols, input_hw, pg)
                }
                Layer::Relu => {
                    let out = &trace.activations[i];
                    let mut g = grad;
                    ndarray::Zip::from(&mut g).and(out).for_each(|g, &a| {
                        let pass = a > R::zero() && (mode == BackpropMode::Plain || *g > R::zero());
                        if !pass {
                            *g = R::zero();
                        }
                    });
                    g
                }
                Layer::AvgPool { size } => layers::avg_pool_backward(&grad, *size, input_hw),
            };
        }
        Ok(Backward { input: grad, captured })
    }

    pub fn zero_grads(&self) -> ParamGrads<R> {
        ParamGrads {
            conv: self
                .layers
                .iter()
                .filter_map(|l| match l {
                    Layer::Conv(c) => Some((ndarray::Array2::zeros(c.weight.dim()), Array1::zeros(c.bias.len()))),
                    _ => None,
                })
                .collect(),
            head_weights: Array1::zeros(self.feature_dim()),
            head_bias: R::zero(),
        }
    }

    pub fn forward_array(&self, input: ArrayView3<R>) -> Result<(Array1<R>, R)> {
        let t = self.trace(input)?;
        Ok((t.features, t.output))
    }

    /// d(unit)/d(input) for a channel-first array.
    pub fn input_gradient_array(&self, input: ArrayView3<R>, unit: Unit, mode: BackpropMode) -> Result<Array3<R>> {
        let trace = self.trace(input)?;
        self.unit_value(&trace, unit)?;
        Ok(self.backward(&trace, unit, R::one(), mode, None, None)?.input)
    }

    /// Activations of layer `layer_id` and the gradient of `unit` with
    /// respect to them.
    pub fn layer_activations_and_gradients_array(
        &self,
        input: ArrayView3<R>,
        layer_id: usize,
        unit: Unit,
    ) -> Result<(Array3<R>, Array3<R>)> {
        if layer_id >= self.layers.len() {
            return Err(Error::invalid(format!("layer {layer_id} out of range 0..{}", self.layers.len())));
        }
        let trace = self.trace(input)?;
        let back = self.backward(&trace, unit, R::one(), BackpropMode::Plain, Some(layer_id), None)?;
        let Trace { mut activations, .. } = trace;
        Ok((activations.swap_remove(layer_id), back.captured.expect("captured layer")))
    }

    /// Flattens all parameters in checkpoint order.
    pub fn params_flat(&self) -> Vec<R> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                out.extend(c.weight.iter().copied());
                out.extend(c.bias.iter().copied());
            }
        }
        out.extend(self.head.weights.iter().copied());
        out.push(self.head.bias);
        out
    }

    pub fn set_params_flat(&mut self, params: &[R]) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::shape(expected, params.len()));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                c.weight.iter_mut().chain(c.bias.iter_mut()).for_each(|v| *v = it.next().expect("length checked"));
            }
        }
        self.head.weights.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        self.head.bias = it.next().expect("length checked");
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weight.len() + c.bias.len(),
                _ => 0,
            })
            .sum::<usize>()
            + self.feature_dim()
            + 1
    }

    /// Mask over [`Self::params_flat`]: true for weights subject to L2
    /// decay (biases are exempt).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                out.extend(std::iter::repeat_n(true, c.weight.len()));
                out.extend(std::iter::repeat_n(false, c.bias.len()));
            }
        }
        out.extend(std::iter::repeat_n(true, self.feature_dim()));
        out.push(false);
        out
    }

    /// Number of leading entries of [`Self::params_flat`] that belong to the
    /// backbone; the remainder is the head.
    pub fn backbone_param_count(&self) -> usize {
        self.param_count() - self.feature_dim() - 1
    }
}

impl<R: Real> ParamGrads<R> {
    pub fn flat(&self) -> Vec<R> {
        let mut out = Vec::new();
        for (w, b) in &self.conv {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out.extend(self.head_weights.iter().copied());
        out.push(self.head_bias);
        out
    }
}

/// Converts a tile into the channel-first layout the network consumes.
pub fn tile_to_array<R: Real>(tile: &RasterTile) -> Array3<R> {
    let (w, h) = (tile.width(), tile.height());
    let px = tile.pixels();
    let mut out = Array3::<R>::zeros((3, h, w));
    for c in 0..3 {
        let plane = out.index_axis_mut(ndarray::Axis(0), c);
        let mut plane = plane;
        for (i, v) in plane.iter_mut().enumerate() {
            *v = R::of(px[i * 3 + c] as f64);
        }
    }
    out
}

/// Back to interleaved pixel order; `(H, W, 3)`.
pub fn array_to_hwc<R: Real>(a: &Array3<R>) -> Vec<f64> {
    let (c, h, w) = a.dim();
    let mut out = vec![0.0; h * w * c];
    for ((ch, y, x), v) in a.indexed_iter() {
        out[(y * w + x) * c + ch] = v.as_f64();
    }
    out
}

fn check_tile_size(tile: &RasterTile) -> Result<()> {
    let side = tile.width();
    if !tile.is_square() || (side != TILE_SIDE && side != GRID_SIDE) {
        return Err(Error::invalid(format!(
            "unsupported tile size {}×{}; expected {TILE_SIDE} or {GRID_SIDE} square",
            tile.width(),
            tile.height()
        )));
    }
    Ok(())
}

impl<R: Real> ConvNet<R> {
    /// Features and scalar output for a 224 tile or a 672 neighbourhood.
    pub fn forward(&self, tile: &RasterTile) -> Result<(Array1<R>, R)> {
        check_tile_size(tile)?;
        self.forward_array(tile_to_array::<R>(tile).view())
    }

    pub fn trace_tile(&self, tile: &RasterTile) -> Result<Trace<R>> {
        check_tile_size(tile)?;
        self.trace(tile_to_array::<R>(tile).view())
    }

    pub fn input_gradient(&self, tile: &RasterTile, unit: Unit) -> Result<Array3<R>> {
        check_tile_size(tile)?;
        self.input_gradient_array(tile_to_array::<R>(tile).view(), unit, BackpropMode::Plain)
    }

    pub fn layer_activations_and_gradients(
        &self,
        tile: &RasterTile,
        layer_id: usize,
        unit: Unit,
    ) -> Result<(Array3<R>, Array3<R>)> {
        check_tile_size(tile)?;
        self.layer_activations_and_gradients_array(tile_to_array::<R>(tile).view(), layer_id, unit)
    }
}
