use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterTile;

/// Signal-domain σ values (pixels) used by the filter sweeps.
pub const SIGMA_GRID: [f64; 11] = [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0];

/// Ratio between the upper and lower σ of the band-pass.
pub const BAND_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Low,
    High,
    Band,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Low => "low",
            FilterKind::High => "high",
            FilterKind::Band => "band",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Standard deviation of the equivalent spatial Gaussian, in pixels.
    pub sigma_px: f64,
}

/// Frequency-domain standard deviation `D = N / (2π σ)` in DFT index units.
pub fn frequency_sigma(n: usize, sigma_px: f64) -> f64 {
    n as f64 / (2.0 * PI * sigma_px)
}

/// Signed frequency index of DFT bin `k`.
fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Separable 1-D factor of the Gaussian low-pass: `exp(−u² / 2D²)`.
fn gauss_1d(n: usize, sigma_px: f64) -> Vec<f64> {
    let d = frequency_sigma(n, sigma_px);
    (0..n).map(|k| (-signed(k, n).powi(2) / (2.0 * d * d)).exp()).collect()
}

/// Transfer function `H(u, v)` as an `n × n` row-major grid.
pub fn transfer(kind: FilterKind, n: usize, sigma_px: f64) -> Result<Vec<f64>> {
    if !(sigma_px > 0.0) || !sigma_px.is_finite() {
        return Err(Error::invalid(format!("filter sigma must be positive, got {sigma_px}")));
    }
    let g = gauss_1d(n, sigma_px);
    let outer = |g: &[f64]| -> Vec<f64> { (0..n * n).map(|i| g[i / n] * g[i % n]).collect() };
    let low = outer(&g);
    Ok(match kind {
        FilterKind::Low => low,
        FilterKind::High => low.into_iter().map(|v| 1.0 - v).collect(),
        FilterKind::Band => {
            let upper = outer(&gauss_1d(n, BAND_RATIO * sigma_px));
            low.iter().zip(&upper).map(|(a, b)| (a - b).max(0.0)).collect()
        }
    })
}

fn fft_2d(data: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    fft.process(data);
    let mut col = vec![Complex::default(); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

/// Filtered channels before re-centering and clamping, as three `n × n`
/// planes.
pub fn filter_planes(tile: &RasterTile, spec: &FilterSpec) -> Result<[Vec<f64>; 3]> {
    if !tile.is_square() {
        return Err(Error::invalid("frequency filtering needs a square tile"));
    }
    let n = tile.width();
    let h = transfer(spec.kind, n, spec.sigma_px)?;
    let scale = 1.0 / (n * n) as f64;
    let px = tile.pixels();
    Ok(std::array::from_fn(|c| {
        let mut buf: Vec<Complex<f64>> = (0..n * n).map(|i| Complex::new(px[i * 3 + c] as f64, 0.0)).collect();
        fft_2d(&mut buf, n, false);
        for (v, g) in buf.iter_mut().zip(&h) {
            *v *= g;
        }
        fft_2d(&mut buf, n, true);
        buf.iter().map(|v| v.re * scale).collect()
    }))
}

/// Gaussian frequency filter. High- and band-pass outputs are shifted by
/// mid-gray, and every output is clamped to `[0, 1]`.
pub fn freq_filter(tile: &RasterTile, spec: &FilterSpec) -> Result<RasterTile> {
    let planes = filter_planes(tile, spec)?;
    let offset = if spec.kind == FilterKind::Low { 0.0 } else { 0.5 };
    let n = tile.width();
    let out = (0..n * n * 3).map(|i| (planes[i % 3][i / 3] + offset) as f32).collect();
    Ok(tile.with_pixels(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tile(n: usize, seed: u64) -> RasterTile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterTile::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    // Spatial kernel whose DFT is the Gaussian transfer, summed directly as
    // a cosine series, then applied by periodic convolution.
    fn spatial_lowpass(tile: &RasterTile, sigma: f64) -> [Vec<f64>; 3] {
        let n = tile.width();
        let d = frequency_sigma(n, sigma);
        let k1: Vec<f64> = (0..n)
            .map(|x| {
                let mut s = 0.0;
                for u in 0..n {
                    let f = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
                    s += (-f * f / (2.0 * d * d)).exp() * (2.0 * PI * f * x as f64 / n as f64).cos();
                }
                s / n as f64
            })
            .collect();
        std::array::from_fn(|c| {
            let mut out = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for dy in 0..n {
                        for dx in 0..n {
                            let v = tile.channel((x + n - dx) % n, (y + n - dy) % n, c) as f64;
                            acc += k1[dx] * k1[dy] * v;
                        }
                    }
                    out[y * n + x] = acc;
                }
            }
            out
        })
    }

    #[test]
    fn lowpass_matches_spatial_convolution() {
        let t = random_tile(32, 1);
        for sigma in [0.7, 2.0, 5.0] {
            let fft = filter_planes(&t, &FilterSpec { kind: FilterKind::Low, sigma_px: sigma }).unwrap();
            let direct = spatial_lowpass(&t, sigma);
            for c in 0..3 {
                for (a, b) in fft[c].iter().zip(&direct[c]) {
                    assert!((a - b).abs() < 1e-4, "sigma {sigma}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn lowpass_close_to_sampled_gaussian() {
        // For σ well above a pixel, the kernel is close to the sampled,
        // normalised spatial Gaussian.
        let n = 32;
        let sigma = 2.0;
        let t = random_tile(n, 2);
        let fft = filter_planes(&t, &FilterSpec { kind: FilterKind::Low, sigma_px: sigma }).unwrap();
        let w: Vec<f64> = (0..n)
            .map(|x| {
                let d = x.min(n - x) as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let z: f64 = w.iter().sum();
        for y in [0, 5, 17] {
            for x in [0, 9, 31] {
                let mut acc = 0.0;
                for dy in 0..n {
                    for dx in 0..n {
                        acc += w[dx] * w[dy] / (z * z) * t.channel((x + n - dx) % n, (y + n - dy) % n, 0) as f64;
                    }
                }
                assert!((fft[0][y * n + x] - acc).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn tiny_sigma_lowpass_is_identity() {
        let t = random_tile(64, 3);
        let out = freq_filter(&t, &FilterSpec { kind: FilterKind::Low, sigma_px: 0.01 }).unwrap();
        for (a, b) in out.pixels().iter().zip(t.pixels()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn low_plus_high_is_identity() {
        let t = random_tile(224, 4);
        for sigma in [1.0, 3.0, 12.0] {
            let lo = filter_planes(&t, &FilterSpec { kind: FilterKind::Low, sigma_px: sigma }).unwrap();
            let hi = filter_planes(&t, &FilterSpec { kind: FilterKind::High, sigma_px: sigma }).unwrap();
            for c in 0..3 {
                for i in 0..224 * 224 {
                    // LP + (HP + 0.5) − 0.5 before clamping.
                    let sum = lo[c][i] + (hi[c][i] + 0.5) - 0.5;
                    assert!((sum - t.pixels()[i * 3 + c] as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn highpass_of_constant_is_mid_gray() {
        let t = RasterTile::filled(32, 32, [0.2, 0.7, 0.9]);
        let out = freq_filter(&t, &FilterSpec { kind: FilterKind::High, sigma_px: 2.0 }).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_input() {
        let t = random_tile(16, 5);
        assert!(freq_filter(&t, &FilterSpec { kind: FilterKind::Band, sigma_px: 0.0 }).is_err());
        assert!(freq_filter(&t, &FilterSpec { kind: FilterKind::Low, sigma_px: -1.0 }).is_err());
        let rect = RasterTile::filled(16, 8, [0.5; 3]);
        assert!(freq_filter(&rect, &FilterSpec { kind: FilterKind::Low, sigma_px: 1.0 }).is_err());
    }

    proptest! {
        #[test]
        fn band_transfer_in_unit_interval(sigma in 0.05f64..50.0, n in 8usize..64) {
            for v in transfer(FilterKind::Band, n, sigma).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn outputs_stay_in_range(sigma in 0.5f64..20.0, kind in 0usize..3, seed in 0u64..50) {
            let kind = [FilterKind::Low, FilterKind::High, FilterKind::Band][kind];
            let out = freq_filter(&random_tile(16, seed), &FilterSpec { kind, sigma_px: sigma }).unwrap();
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
