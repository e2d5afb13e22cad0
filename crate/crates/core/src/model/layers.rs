use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, NdFloat};
use num_traits::FromPrimitive;

/// Scalar type the network can run in. Production runs use `f32`;
/// gradient checks run the same code in `f64`.
pub trait Real: NdFloat + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Square-kernel convolution. Weights are stored as
/// `(out_channels, in_channels * k * k)` so the forward pass is one GEMM
/// against the unfolded input.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<R> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Array2<R>,
    pub bias: Array1<R>,
}

impl<R: Real> Conv2d<R> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    /// Weight for output channel `o`, input channel `c`, kernel offset `(ky, kx)`.
    pub fn w(&self, o: usize, c: usize, ky: usize, kx: usize) -> R {
        self.weight[[o, (c * self.kernel + ky) * self.kernel + kx]]
    }

    /// Returns the output map and the unfolded input needed by `backward`.
    pub fn forward(&self, input: ArrayView3<R>) -> (Array3<R>, Array2<R>) {
        let (_, h, w) = input.dim();
        let (ho, wo) = self.output_size(h, w).expect("validated input size");
        let cols = im2col(input, self.kernel, self.stride, self.padding, ho, wo);
        let mut out = Array2::<R>::zeros((self.out_channels, ho * wo));
        general_mat_mul(R::one(), &self.weight, &cols, R::zero(), &mut out);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out.into_shape_with_order((self.out_channels, ho, wo)).expect("contiguous");
        (out, cols)
    }

    /// Propagates `grad_out` back through the layer. Parameter gradients are
    /// accumulated into `grads` when given.
    pub fn backward(
        &self,
        grad_out: &Array3<R>,
        cols: &Array2<R>,
        input_hw: (usize, usize),
        grads: Option<(&mut Array2<R>, &mut Array1<R>)>,
    ) -> Array3<R> {
        let (_, ho, wo) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, ho * wo))
            .expect("contiguous");
        if let Some((gw, gb)) = grads {
            general_mat_mul(R::one(), &g, &cols.t(), R::one(), gw);
            for (acc, row) in gb.iter_mut().zip(g.rows()) {
                *acc += row.sum();
            }
        }
        let mut dcols = Array2::<R>::zeros(cols.dim());
        general_mat_mul(R::one(), &self.weight.t(), &g, R::zero(), &mut dcols);
        col2im(&dcols, self.in_channels, input_hw, self.kernel, self.stride, self.padding, ho, wo)
    }
}

pub(crate) fn im2col<R: Real>(
    input: ArrayView3<R>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<R> {
    let input = input.as_standard_layout();
    let (c, h, w) = input.dim();
    let src = input.as_slice().expect("standard layout");
    let mut cols = Array2::<R>::zeros((c * k * k, ho * wo));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out_row = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_line = &mut out_row[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<R: Real>(
    dcols: &Array2<R>,
    c: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<R> {
    let mut out = Array3::<R>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    let src = dcols.as_slice().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let col_row = &src[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += col_row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping average pooling with window `size`.
pub(crate) fn avg_pool<R: Real>(input: &Array3<R>, size: usize) -> Array3<R> {
    let (c, h, w) = input.dim();
    let (ho, wo) = (h / size, w / size);
    let scale = R::one() / R::of((size * size) as f64);
    Array3::from_shape_fn((c, ho, wo), |(ch, y, x)| {
        let mut s = R::zero();
        for dy in 0..size {
            for dx in 0..size {
                s += input[[ch, y * size + dy, x * size + dx]];
            }
        }
        s * scale
    })
}

pub(crate) fn avg_pool_backward<R: Real>(grad_out: &Array3<R>, size: usize, input_hw: (usize, usize)) -> Array3<R> {
    let (c, ho, wo) = grad_out.dim();
    let scale = R::one() / R::of((size * size) as f64);
    let mut out = Array3::<R>::zeros((c, input_hw.0, input_hw.1));
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = grad_out[[ch, y, x]] * scale;
                for dy in 0..size {
                    for dx in 0..size {
                        out[[ch, y * size + dy, x * size + dx]] = g;
                    }
                }
            }
        }
    }
    out
}
