//! Occlusion sensitivity, Grad-CAM, guided backpropagation and guided
//! Grad-CAM for the scalar network output.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pearson;
use crate::model::{tile_to_array, BackpropMode, ConvNet, Real, Unit};
use crate::raster::RasterTile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Occlusion,
    GradCam,
    GuidedBackprop,
    GuidedGradCam,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Occlusion, Method::GradCam, Method::GuidedBackprop, Method::GuidedGradCam];

    pub fn name(self) -> &'static str {
        match self {
            Method::Occlusion => "occlusion",
            Method::GradCam => "grad_cam",
            Method::GuidedBackprop => "guided_backprop",
            Method::GuidedGradCam => "guided_grad_cam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| Error::invalid(format!("unknown attribution method `{s}`")))
    }
}

/// A map over grid cells. Cell `(i, j)` is centered on input pixel
/// `(offset + scale * j, offset + scale * i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Array2<f64>,
    pub scale: f64,
    pub offset: f64,
    pub method: Method,
    pub signed: bool,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    method: Method,
    height: usize,
    width: usize,
    scale: f64,
    offset: f64,
    signed: bool,
    values: Vec<f64>,
}

impl AttributionMap {
    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    /// Raw grid plus alignment metadata as JSON.
    pub fn to_json(&self) -> Result<String> {
        let (height, width) = self.values.dim();
        Ok(serde_json::to_string(&MapFile {
            method: self.method,
            height,
            width,
            scale: self.scale,
            offset: self.offset,
            signed: self.signed,
            values: self.values.iter().copied().collect(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: MapFile = serde_json::from_str(text)?;
        let values = Array2::from_shape_vec((f.height, f.width), f.values)
            .map_err(|e| Error::Data(format!("attribution grid: {e}")))?;
        Ok(Self {
            values,
            scale: f.scale,
            offset: f.offset,
            method: f.method,
            signed: f.signed,
        })
    }

    /// Heat map blended over a grayscale copy of `tile`, upsampled to the
    /// tile's size. Signed maps use blue for negative and red for positive.
    pub fn overlay_png(&self, tile: &RasterTile, path: &Path) -> Result<()> {
        let (w, h) = (tile.width(), tile.height());
        let up = bilinear_upsample(&self.values, h, w);
        let peak = up.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let p = tile.get(x, y);
                let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                let v = (up[[y, x]] / peak) as f32;
                let heat = if v >= 0.0 {
                    [1.0, (2.0 * v - 1.0).clamp(0.0, 1.0), 0.0]
                } else {
                    [0.0, 0.3, 1.0]
                };
                let alpha = 0.7 * v.abs();
                let px: [u8; 3] = std::array::from_fn(|c| {
                    ((gray * (1.0 - alpha) + heat[c] * alpha) * 255.0).round().clamp(0.0, 255.0) as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub patch_px: usize,
    pub stride_px: usize,
    pub fill: [f32; 3],
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            patch_px: 16,
            stride_px: 8,
            fill: [0.5; 3],
        }
    }
}

/// `output(original) − output(occluded)` for each patch position.
pub fn occlusion_map<R: Real>(net: &ConvNet<R>, tile: &RasterTile, spec: &OcclusionSpec) -> Result<AttributionMap> {
    let (w, h) = (tile.width(), tile.height());
    let (p, s) = (spec.patch_px, spec.stride_px);
    if s == 0 || p < s || p > w || p > h {
        return Err(Error::invalid(format!(
            "occlusion patch {p} / stride {s} invalid for {w}×{h} tile"
        )));
    }
    if spec.fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid("occlusion fill outside [0, 1]"));
    }
    let input: Array3<R> = tile_to_array(tile);
    let base = net.forward_array(input.view())?.1.as_f64();
    let (rows, cols) = ((h - p) / s + 1, (w - p) / s + 1);
    let fill = spec.fill.map(|c| R::of(c as f64));
    use rayon::prelude::*;
    let values: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / cols, cell % cols);
            let mut x = input.clone();
            for c in 0..3 {
                x.index_axis_mut(Axis(0), c)
                    .slice_mut(ndarray::s![i * s..i * s + p, j * s..j * s + p])
                    .fill(fill[c]);
            }
            Ok(base - net.forward_array(x.view())?.1.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(AttributionMap {
        values: Array2::from_shape_vec((rows, cols), values).expect("grid size"),
        scale: s as f64,
        offset: (p as f64 - 1.0) / 2.0,
        method: Method::Occlusion,
        signed: true,
    })
}

/// ReLU of the gradient-weighted channel sum at `layer` (the last conv
/// block's rectified output by default).
pub fn grad_cam<R: Real>(net: &ConvNet<R>, tile: &RasterTile, layer: Option<usize>) -> Result<AttributionMap> {
    let layer = match layer {
        Some(l) => l,
        None => net.last_conv_layer().ok_or_else(|| Error::invalid("network has no conv layer"))?,
    };
    let input: Array3<R> = tile_to_array(tile);
    let (act, grad) = net.layer_activations_and_gradients_array(input.view(), layer, Unit::Output)?;
    let (c, h, w) = act.dim();
    if h * w == 0 {
        return Err(Error::invalid(format!("layer {layer} has no spatial extent")));
    }
    let mut map = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let weight = grad.index_axis(Axis(0), ch).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        map.zip_mut_with(&act.index_axis(Axis(0), ch), |m, a| *m += weight * a.as_f64());
    }
    map.mapv_inplace(|v| v.max(0.0));
    let scale = tile.width() as f64 / w as f64;
    Ok(AttributionMap {
        values: map,
        scale,
        offset: (scale - 1.0) / 2.0,
        method: Method::GradCam,
        signed: false,
    })
}

/// Guided-backprop gradient of the output with respect to the input,
/// channel-first.
pub fn guided_gradient<R: Real>(net: &ConvNet<R>, tile: &RasterTile) -> Result<Array3<R>> {
    net.input_gradient_array(tile_to_array::<R>(tile).view(), Unit::Output, BackpropMode::Guided)
}

/// Guided backprop reduced over RGB by maximum absolute value.
pub fn guided_backprop<R: Real>(net: &ConvNet<R>, tile: &RasterTile) -> Result<AttributionMap> {
    let g = guided_gradient(net, tile)?;
    Ok(AttributionMap {
        values: max_abs_channels(&g),
        scale: 1.0,
        offset: 0.0,
        method: Method::GuidedBackprop,
        signed: false,
    })
}

pub fn max_abs_channels<R: Real>(g: &Array3<R>) -> Array2<f64> {
    let (_, h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        g.index_axis(Axis(1), y)
            .index_axis(Axis(1), x)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    })
}

/// Bilinear resize with corner alignment: output corners sample input
/// corners exactly.
pub fn bilinear_upsample(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if inp == 1 || out == 1 {
            return (0, 0, 0.0);
        }
        let f = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let i0 = (f.floor() as usize).min(inp - 2);
        (i0, i0 + 1, f - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ty) = coord(y, out_h, h);
        let (x0, x1, tx) = coord(x, out_w, w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Pointwise product of two maps after upsampling Grad-CAM to pixel size.
pub fn combine_guided_grad_cam(cam: &AttributionMap, guided: &AttributionMap) -> Result<AttributionMap> {
    if guided.scale != 1.0 {
        return Err(Error::invalid("guided map must be at pixel resolution"));
    }
    let (h, w) = guided.values.dim();
    let up = bilinear_upsample(&cam.values, h, w);
    Ok(AttributionMap {
        values: up * &guided.values,
        scale: 1.0,
        offset: 0.0,
        method: Method::GuidedGradCam,
        signed: cam.signed || guided.signed,
    })
}

pub fn guided_grad_cam<R: Real>(net: &ConvNet<R>, tile: &RasterTile) -> Result<AttributionMap> {
    combine_guided_grad_cam(&grad_cam(net, tile, None)?, &guided_backprop(net, tile)?)
}

pub fn attribute<R: Real>(net: &ConvNet<R>, tile: &RasterTile, method: Method) -> Result<AttributionMap> {
    match method {
        Method::Occlusion => occlusion_map(net, tile, &OcclusionSpec::default()),
        Method::GradCam => grad_cam(net, tile, None),
        Method::GuidedBackprop => guided_backprop(net, tile),
        Method::GuidedGradCam => guided_grad_cam(net, tile),
    }
}

/// Pearson r between per-site map sums and network outputs.
pub fn attribution_output_correlation(sums: &[f64], outputs: &[f64]) -> Result<f64> {
    if sums.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 sites"));
    }
    pearson(sums, outputs)
}

/// One panel of the comparison figure.
pub struct Panel {
    pub href: String,
    pub caption: String,
}

/// Grid of image panels referenced by relative path.
pub fn panel_figure_svg(title: &str, rows: &[Vec<Panel>], panel_px: usize) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let (pad, cap) = (10, 18);
    let width = cols * (panel_px + pad) + pad;
    let height = rows.len() * (panel_px + pad + cap) + pad + 28;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, width / 2);
    for (r, row) in rows.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            let x = pad + c * (panel_px + pad);
            let y = 28 + pad + r * (panel_px + pad + cap);
            let _ = writeln!(
                out,
                r#"<image x="{x}" y="{y}" width="{panel_px}" height="{panel_px}" href="{}"/><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                p.href,
                x + panel_px / 2,
                y + panel_px + 13,
                p.caption
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, Conv2d, Head, Layer};
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tile(n: usize, seed: u64) -> RasterTile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterTile::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    /// 1×1 conv selecting channel weights `w`, no ReLU, GAP, unit head.
    fn linear_net(w: [f64; 3], bias: f64) -> ConvNet<f64> {
        let mut conv = Conv2d::zeros(3, 1, 1, 1, 0);
        for c in 0..3 {
            conv.weight[[0, c]] = w[c];
        }
        ConvNet::new(
            vec![Layer::Conv(conv)],
            Head {
                weights: Array1::from_vec(vec![1.0]),
                bias,
            },
        )
        .unwrap()
    }

    #[test]
    fn constant_model_gives_zero_occlusion() {
        let net = linear_net([0.0; 3], 2.0);
        let m = occlusion_map(&net, &random_tile(32, 1), &OcclusionSpec::default()).unwrap();
        assert_eq!(m.values.dim(), (3, 3));
        assert!(m.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn red_mean_model_matches_analytic_occlusion() {
        let net = linear_net([1.0, 0.0, 0.0], 0.0);
        let t = random_tile(40, 2);
        let spec = OcclusionSpec {
            patch_px: 8,
            stride_px: 4,
            fill: [0.5; 3],
        };
        let m = occlusion_map(&net, &t, &spec).unwrap();
        let total = 40.0 * 40.0;
        for ((i, j), v) in m.values.indexed_iter() {
            let mut red = 0.0;
            for y in i * 4..i * 4 + 8 {
                for x in j * 4..j * 4 + 8 {
                    red += t.get(x, y)[0] as f64;
                }
            }
            let want = (red / 64.0 - 0.5) * 64.0 / total;
            assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        }
    }

    #[test]
    fn occlusion_additive_model_order_free_and_noop_fill() {
        let net = linear_net([0.3, -0.2, 0.7], 0.1);
        let t = RasterTile::filled(32, 32, [0.2, 0.4, 0.9]);
        let spec = OcclusionSpec {
            patch_px: 16,
            stride_px: 16,
            fill: [0.2, 0.4, 0.9],
        };
        assert!(occlusion_map(&net, &t, &spec).unwrap().values.iter().all(|v| v.abs() < 1e-12));
        let t = random_tile(32, 3);
        let spec = OcclusionSpec {
            fill: [0.5; 3],
            ..spec
        };
        let a = occlusion_map(&net, &t, &spec).unwrap();
        // Both patches occluded together equal the sum of single occlusions.
        let mut both = tile_to_array::<f64>(&t);
        for c in 0..3 {
            both.index_axis_mut(Axis(0), c).slice_mut(ndarray::s![0..16, 0..32]).fill(0.5);
        }
        let base = net.forward_array(tile_to_array::<f64>(&t).view()).unwrap().1;
        let joint = base - net.forward_array(both.view()).unwrap().1;
        assert!((joint - (a.values[[0, 0]] + a.values[[0, 1]])).abs() < 1e-12);
    }

    #[test]
    fn occlusion_rejects_bad_spec() {
        let net = linear_net([1.0; 3], 0.0);
        let t = random_tile(16, 4);
        for spec in [
            OcclusionSpec { patch_px: 4, stride_px: 8, fill: [0.5; 3] },
            OcclusionSpec { patch_px: 32, stride_px: 8, fill: [0.5; 3] },
            OcclusionSpec { patch_px: 4, stride_px: 0, fill: [0.5; 3] },
        ] {
            assert!(occlusion_map(&net, &t, &spec).is_err());
        }
    }

    /// conv(3→1, 1×1) → ReLU → GAP → head weight `hw`.
    fn single_channel_net(w: [f64; 3], b: f64, hw: f64) -> ConvNet<f64> {
        let mut conv = Conv2d::zeros(3, 1, 1, 1, 0);
        for c in 0..3 {
            conv.weight[[0, c]] = w[c];
        }
        conv.bias[0] = b;
        ConvNet::new(
            vec![Layer::Conv(conv), Layer::Relu],
            Head {
                weights: Array1::from_vec(vec![hw]),
                bias: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_channel_grad_cam_is_scaled_activation() {
        let t = random_tile(8, 5);
        let net = single_channel_net([1.0, -1.0, 0.5], -0.1, 2.0);
        let cam = grad_cam(&net, &t, None).unwrap();
        let n = 64.0;
        // The gradient at the rectified output is hw / n everywhere.
        let weight = 2.0 / n;
        for y in 0..8 {
            for x in 0..8 {
                let p = t.get(x, y);
                let a = (p[0] as f64 - p[1] as f64 + 0.5 * p[2] as f64 - 0.1).max(0.0);
                assert!((cam.values[[y, x]] - weight * a).abs() < 1e-12);
            }
        }
        // Negative head weight: the map is ReLU of a non-positive sum.
        let neg = single_channel_net([1.0, -1.0, 0.5], -0.1, -2.0);
        assert!(grad_cam(&neg, &t, None).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_cam_channel_permutation_invariant() {
        let net = ConvNet::<f64>::standard(&ArchConfig { channels: vec![4, 6], strides: vec![2, 2], kernel: 3 }, 3).unwrap();
        let t = random_tile(16, 6);
        let a = grad_cam(&net, &t, None).unwrap();
        let mut p = net.clone();
        let perm = [3, 0, 5, 1, 4, 2];
        if let Layer::Conv(c) = &mut p.layers[2] {
            let (w, b) = (c.weight.clone(), c.bias.clone());
            for (new, &old) in perm.iter().enumerate() {
                c.weight.row_mut(new).assign(&w.row(old));
                c.bias[new] = b[old];
            }
        }
        let hw = net.head.weights.clone();
        for (new, &old) in perm.iter().enumerate() {
            p.head.weights[new] = hw[old];
        }
        let b = grad_cam(&p, &t, None).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_equals_plain_without_relu() {
        let mut conv = Conv2d::<f64>::zeros(3, 2, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        conv.weight.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let net = ConvNet::new(
            vec![Layer::Conv(conv)],
            Head { weights: Array1::from_vec(vec![0.7, -1.3]), bias: 0.0 },
        )
        .unwrap();
        let t = random_tile(12, 8);
        let guided = guided_gradient(&net, &t).unwrap();
        let plain = net.input_gradient_array(tile_to_array::<f64>(&t).view(), Unit::Output, BackpropMode::Plain).unwrap();
        for (a, b) in guided.iter().zip(plain.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(guided_backprop(&net, &t).unwrap().values, max_abs_channels(&plain));
    }

    #[test]
    fn hand_built_negative_path_is_zeroed() {
        // 1×1 image. Hidden units h1 = relu(r), h2 = relu(g); second conv
        // mixes them as o = relu(2 h1 − 3 h2); head weights [1].
        // At r = g = 0.5: o = relu(1 − 1.5) = 0 would block everything, so
        // use r = 0.9, g = 0.1: o = 1.8 − 0.3 = 1.5 > 0.
        // Plain gradient: d o/d r = 2, d o/d g = −3.
        // Guided: the signal into h2 is −3 < 0 and is zeroed, so d/dg = 0.
        let mut c1 = Conv2d::<f64>::zeros(3, 2, 1, 1, 0);
        c1.weight[[0, 0]] = 1.0;
        c1.weight[[1, 1]] = 1.0;
        let mut c2 = Conv2d::<f64>::zeros(2, 1, 1, 1, 0);
        c2.weight[[0, 0]] = 2.0;
        c2.weight[[0, 1]] = -3.0;
        let net = ConvNet::new(
            vec![Layer::Conv(c1), Layer::Relu, Layer::Conv(c2), Layer::Relu],
            Head { weights: Array1::from_vec(vec![1.0]), bias: 0.0 },
        )
        .unwrap();
        let t = RasterTile::new(1, 1, vec![0.9, 0.1, 0.4]).unwrap();
        let plain = net.input_gradient_array(tile_to_array::<f64>(&t).view(), Unit::Output, BackpropMode::Plain).unwrap();
        assert_eq!(plain.iter().copied().collect::<Vec<_>>(), vec![2.0, -3.0, 0.0]);
        let guided = guided_gradient(&net, &t).unwrap();
        assert_eq!(guided.iter().copied().collect::<Vec<_>>(), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn guided_grad_cam_identities() {
        let guided = AttributionMap {
            values: Array2::from_shape_fn((6, 6), |(y, x)| (x * y) as f64),
            scale: 1.0,
            offset: 0.0,
            method: Method::GuidedBackprop,
            signed: false,
        };
        let cam = |v: f64| AttributionMap {
            values: Array2::from_elem((2, 2), v),
            scale: 3.0,
            offset: 1.0,
            method: Method::GradCam,
            signed: false,
        };
        assert!(combine_guided_grad_cam(&cam(0.0), &guided).unwrap().values.iter().all(|v| *v == 0.0));
        assert_eq!(combine_guided_grad_cam(&cam(1.0), &guided).unwrap().values, guided.values);
        assert!(bilinear_upsample(&Array2::from_elem((3, 4), 2.5), 9, 7).iter().all(|v| (*v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_hits_corners() {
        let m = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_upsample(&m, 5, 5);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 4]], 1.0);
        assert_eq!(up[[4, 0]], 2.0);
        assert_eq!(up[[4, 4]], 3.0);
        assert!((up[[2, 2]] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn standard_net_maps_have_expected_shapes() {
        let net = ConvNet::<f32>::standard(&ArchConfig::standard(8), 2).unwrap();
        let t = random_tile(224, 9);
        let cam = grad_cam(&net, &t, None).unwrap();
        assert_eq!(cam.values.dim(), (7, 7));
        assert!(cam.values.iter().all(|v| *v >= 0.0));
        let g = guided_grad_cam(&net, &t).unwrap();
        assert_eq!(g.values.dim(), (224, 224));
        let gb = guided_backprop(&net, &t).unwrap();
        let up = bilinear_upsample(&cam.values, 224, 224);
        for ((a, b), c) in g.values.iter().zip(up.iter()).zip(gb.values.iter()) {
            assert!(a.abs() <= b * c + 1e-12);
        }
        let back = AttributionMap::from_json(&cam.to_json().unwrap()).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn correlation_examples() {
        let out = [1.0, 2.0, 4.0, 3.5];
        let sums: Vec<f64> = out.iter().map(|v| 3.0 * v).collect();
        assert!((attribution_output_correlation(&sums, &out).unwrap() - 1.0).abs() < 1e-12);
        assert!(attribution_output_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(attribution_output_correlation(&[1.0; 4], &out).is_err());
    }

    proptest! {
        #[test]
        fn correlation_matches_covariance_formula(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
            prop_assume!(va > 1e-6 && vb > 1e-6);
            let want = cov / (va * vb).sqrt();
            prop_assert!((attribution_output_correlation(&a, &b).unwrap() - want).abs() < 1e-10);
        }
    }
}
