use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterTile;

/// Tile sizes used by the shuffle sweep: divisors of 224 from one pixel up
/// to half the side, plus the full side as the identity.
pub const SHUFFLE_GRID: [usize; 12] = [1, 2, 4, 7, 8, 14, 16, 28, 32, 56, 112, 224];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleSpec {
    pub tile_px: usize,
    pub rng_seed: u64,
    pub repetitions: usize,
}

impl ShuffleSpec {
    pub fn new(tile_px: usize, rng_seed: u64) -> Self {
        Self {
            tile_px,
            rng_seed,
            repetitions: 5,
        }
    }
}

/// Cuts the image into `tile_px` squares and permutes them uniformly at random.
pub fn grid_shuffle(tile: &RasterTile, spec: &ShuffleSpec) -> Result<RasterTile> {
    let (w, h) = (tile.width(), tile.height());
    let t = spec.tile_px;
    if t == 0 || w % t != 0 || h % t != 0 {
        return Err(Error::invalid(format!("shuffle tile size {t} does not divide {w}×{h}")));
    }
    let (cols, rows) = (w / t, h / t);
    let mut perm: Vec<usize> = (0..cols * rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.rng_seed));
    let src = tile.pixels();
    let mut out = vec![0.0f32; src.len()];
    // Destination cell `d` receives source cell `perm[d]`.
    for (d, &s) in perm.iter().enumerate() {
        let (dy, dx) = (d / cols * t, d % cols * t);
        let (sy, sx) = (s / cols * t, s % cols * t);
        for y in 0..t {
            let di = ((dy + y) * w + dx) * 3;
            let si = ((sy + y) * w + sx) * 3;
            out[di..di + 3 * t].copy_from_slice(&src[si..si + 3 * t]);
        }
    }
    Ok(tile.with_pixels(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_tile(side: usize) -> RasterTile {
        RasterTile::from_fn(side, side, |x, y| {
            [x as f32 / side as f32, y as f32 / side as f32, ((x * 7 + y * 3) % 11) as f32 / 10.0]
        })
    }

    fn sorted(v: &[f32]) -> Vec<f32> {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    #[test]
    fn full_side_is_identity() {
        let t = gradient_tile(224);
        assert_eq!(grid_shuffle(&t, &ShuffleSpec::new(224, 9)).unwrap(), t);
    }

    #[test]
    fn non_dividing_size_rejected() {
        let t = gradient_tile(224);
        assert!(grid_shuffle(&t, &ShuffleSpec::new(3, 0)).is_err());
        assert!(grid_shuffle(&t, &ShuffleSpec::new(0, 0)).is_err());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let t = gradient_tile(224);
        let a = grid_shuffle(&t, &ShuffleSpec::new(8, 4)).unwrap();
        assert_eq!(a, grid_shuffle(&t, &ShuffleSpec::new(8, 4)).unwrap());
        assert_ne!(a, grid_shuffle(&t, &ShuffleSpec::new(8, 5)).unwrap());
    }

    #[test]
    fn blocks_move_intact() {
        let t = gradient_tile(32);
        let s = grid_shuffle(&t, &ShuffleSpec::new(8, 1)).unwrap();
        // Every output block equals some input block.
        for r in 0..4 {
            for c in 0..4 {
                let b = s.block(r, c, 8).unwrap();
                assert!((0..16).any(|k| t.block(k / 4, k % 4, 8).unwrap().pixels() == b.pixels()));
            }
        }
    }

    proptest! {
        #[test]
        fn preserves_channel_histograms(idx in 0usize..11, seed in any::<u64>()) {
            let t = gradient_tile(224);
            let s = grid_shuffle(&t, &ShuffleSpec::new(SHUFFLE_GRID[idx], seed)).unwrap();
            for c in 0..3 {
                let a: Vec<f32> = t.pixels().iter().skip(c).step_by(3).copied().collect();
                let b: Vec<f32> = s.pixels().iter().skip(c).step_by(3).copied().collect();
                prop_assert_eq!(sorted(&a), sorted(&b));
            }
        }
    }
}
