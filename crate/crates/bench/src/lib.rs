//! Fixtures shared by the kernel benchmarks.

use wealthlens_core::head::FeatureRow;
use wealthlens_core::raster::RasterTile;
use wealthlens_core::synthgen::{render_tile, SceneParams};

/// Center tile of a mid-density synthetic scene.
pub fn scene_tile(seed: u64) -> RasterTile {
    let params = SceneParams {
        building_count: 600,
        road_count: 10,
        rng_seed: seed,
        ..SceneParams::default()
    };
    render_tile(&params, 4)
}

/// `n` rows of `d` deterministic pseudo-random features with a linear target.
pub fn feature_rows(n: usize, d: usize) -> Vec<FeatureRow> {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..d).map(|_| next()).collect();
            let wealth_index = features.iter().enumerate().map(|(j, v)| v * (j % 3) as f64).sum::<f64>() + 0.1 * next();
            FeatureRow {
                site_id: i,
                features,
                wealth_index,
                phase: 0,
            }
        })
        .collect()
}
