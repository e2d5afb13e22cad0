//! Tiles, CIE L*a*b* conversion, nightlight labels and 3×3 grid assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of a model-input tile in pixels.
pub const TILE_SIDE: usize = 224;
/// Side length of a concatenated 3×3 neighbourhood.
pub const GRID_SIDE: usize = 3 * TILE_SIDE;
/// Ground sampling distance of the daytime imagery.
pub const DEFAULT_METERS_PER_PIXEL: f64 = 10.0;
/// Ground sampling distance of the nightlight raster.
pub const NIGHTLIGHT_METERS_PER_PIXEL: f64 = 750.0;
/// Per-pixel radiance below which nightlight is treated as noise.
pub const DEFAULT_NOISE_FLOOR: f64 = 0.5;

/// An sRGB image with components in `[0, 1]`, stored row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterTile {
    width: usize,
    height: usize,
    pub meters_per_pixel: f64,
    pub origin: Option<(f64, f64)>,
    pixels: Vec<f32>,
}

impl RasterTile {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("tile dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel component {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            meters_per_pixel: DEFAULT_METERS_PER_PIXEL,
            origin: None,
            pixels,
        })
    }

    /// Uniform tile of one colour.
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let rgb = rgb.map(|c| c.clamp(0.0, 1.0));
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            meters_per_pixel: DEFAULT_METERS_PER_PIXEL,
            origin: None,
            pixels,
        }
    }

    /// Builds a tile from a per-pixel closure; values are clamped into range.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            meters_per_pixel: DEFAULT_METERS_PER_PIXEL,
            origin: None,
            pixels,
        }
    }

    /// Builds a tile from 8-bit interleaved RGB, dividing by 255.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, bytes.len()));
        }
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mutable access to raw components. Callers must keep values in `[0, 1]`.
    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Component of channel `c` at `(x, y)`.
    #[inline]
    pub fn channel(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8()).expect("buffer size");
        img.save(path)?;
        Ok(())
    }

    /// Same size and metadata with new pixel data, clamped to `[0, 1]`.
    pub(crate) fn with_pixels(&self, mut pixels: Vec<f32>) -> RasterTile {
        assert_eq!(pixels.len(), self.pixels.len());
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        RasterTile {
            width: self.width,
            height: self.height,
            meters_per_pixel: self.meters_per_pixel,
            origin: self.origin,
            pixels,
        }
    }

    /// Copies out the `side × side` block at block coordinates `(row, col)`.
    pub fn block(&self, row: usize, col: usize, side: usize) -> Result<RasterTile> {
        if (row + 1) * side > self.height || (col + 1) * side > self.width {
            return Err(Error::invalid(format!(
                "block ({row}, {col}) of side {side} outside {}×{} tile",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(side * side * 3);
        for y in row * side..(row + 1) * side {
            let start = (y * self.width + col * side) * 3;
            out.extend_from_slice(&self.pixels[start..start + side * 3]);
        }
        Ok(RasterTile {
            width: side,
            height: side,
            meters_per_pixel: self.meters_per_pixel,
            origin: None,
            pixels: out,
        })
    }
}

/// One pixel in CIE L*a*b*.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabPixel {
    pub l: f32,
    pub a: f32,
    pub b: f32,
}

/// A tile in L*a*b*, same layout as the source tile.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    pub origin: Option<(f64, f64)>,
    pub pixels: Vec<LabPixel>,
}

// Linear sRGB → XYZ (D65), IEC 61966-2-1.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];
// Reference white is the image of sRGB white so that greys have a* = b* = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];
const DELTA: f64 = 6.0 / 29.0;

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple in `[0, 1]` to L*a*b*.
pub fn srgb_to_lab(rgb: [f32; 3]) -> LabPixel {
    let lin = rgb.map(|c| srgb_to_linear(c as f64));
    let xyz: [f64; 3] = std::array::from_fn(|r| {
        RGB_TO_XYZ[r][0] * lin[0] + RGB_TO_XYZ[r][1] * lin[1] + RGB_TO_XYZ[r][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    LabPixel {
        l: (116.0 * fy - 16.0) as f32,
        a: (500.0 * (fx - fy)) as f32,
        b: (200.0 * (fy - fz)) as f32,
    }
}

/// Converts one L*a*b* pixel back to sRGB, clamping out-of-gamut results.
pub fn lab_to_srgb(lab: LabPixel) -> [f32; 3] {
    let fy = (lab.l as f64 + 16.0) / 116.0;
    let fx = fy + lab.a as f64 / 500.0;
    let fz = fy - lab.b as f64 / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    std::array::from_fn(|r| {
        let lin = XYZ_TO_RGB[r][0] * xyz[0] + XYZ_TO_RGB[r][1] * xyz[1] + XYZ_TO_RGB[r][2] * xyz[2];
        linear_to_srgb(lin.max(0.0)).clamp(0.0, 1.0) as f32
    })
}

pub fn rgb_to_lab(tile: &RasterTile) -> LabImage {
    LabImage {
        width: tile.width,
        height: tile.height,
        meters_per_pixel: tile.meters_per_pixel,
        origin: tile.origin,
        pixels: tile
            .pixels
            .chunks_exact(3)
            .map(|p| srgb_to_lab([p[0], p[1], p[2]]))
            .collect(),
    }
}

pub fn lab_to_rgb(img: &LabImage) -> RasterTile {
    RasterTile {
        width: img.width,
        height: img.height,
        meters_per_pixel: img.meters_per_pixel,
        origin: img.origin,
        pixels: img.pixels.iter().flat_map(|&p| lab_to_srgb(p)).collect(),
    }
}

/// A 3×3 patch of nightlight radiance aligned with one daytime tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NightlightPatch {
    pub values: [f64; 9],
    pub meters_per_pixel: f64,
}

impl NightlightPatch {
    pub fn new(values: [f64; 9]) -> Self {
        Self {
            values,
            meters_per_pixel: NIGHTLIGHT_METERS_PER_PIXEL,
        }
    }

    /// Radiance summed after the noise floor is applied.
    pub fn floored_sum(&self, noise_floor: f64) -> Result<f64> {
        let mut sum = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "nightlight pixel {i} has invalid radiance {v}"
                )));
            }
            if v >= noise_floor {
                sum += v;
            }
        }
        Ok(sum)
    }
}

/// Regression target for nightlight training: `ln(1 + s)` where `s` is the
/// patch sum after zeroing pixels below `noise_floor`.
pub fn nightlight_label(patch: &NightlightPatch, noise_floor: f64) -> Result<f64> {
    Ok(patch.floored_sum(noise_floor)?.ln_1p())
}

/// Places nine 224×224 tiles row-major into one 672×672 tile. Index 4 is the
/// centre tile.
pub fn concat_grid(tiles: &[RasterTile]) -> Result<RasterTile> {
    if tiles.len() != 9 {
        return Err(Error::shape("9 tiles", tiles.len()));
    }
    for (i, t) in tiles.iter().enumerate() {
        if t.width != TILE_SIDE || t.height != TILE_SIDE {
            return Err(Error::shape(
                format!("{TILE_SIDE}×{TILE_SIDE} tile"),
                format!("{}×{} at grid index {i}", t.width, t.height),
            ));
        }
    }
    let mut pixels = vec![0.0f32; GRID_SIDE * GRID_SIDE * 3];
    for (idx, t) in tiles.iter().enumerate() {
        let (row, col) = (idx / 3, idx % 3);
        for y in 0..TILE_SIDE {
            let dst = ((row * TILE_SIDE + y) * GRID_SIDE + col * TILE_SIDE) * 3;
            let src = y * TILE_SIDE * 3;
            pixels[dst..dst + TILE_SIDE * 3].copy_from_slice(&t.pixels[src..src + TILE_SIDE * 3]);
        }
    }
    Ok(RasterTile {
        width: GRID_SIDE,
        height: GRID_SIDE,
        meters_per_pixel: tiles[4].meters_per_pixel,
        origin: tiles[4].origin,
        pixels,
    })
}
