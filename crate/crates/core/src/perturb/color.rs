use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{lab_to_srgb, srgb_to_lab, LabPixel, RasterTile};
use crate::seeds::derive;

pub const DEFAULT_SAMPLE_PER_IMAGE: usize = 1000;
const MAX_ITER: usize = 100;
const RESTARTS: usize = 4;

/// k-means clusters over (a*, b*) chromaticity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorClusterModel {
    pub k: usize,
    /// Centers as L*a*b* triples; L* is the mean lightness of the members.
    pub centers: Vec<[f64; 3]>,
    /// Within-cluster SSE for each candidate k.
    pub elbow_curve: Vec<(usize, f64)>,
}

impl ColorClusterModel {
    /// Index of the nearest center in (a*, b*).
    pub fn assign(&self, lab: LabPixel) -> usize {
        nearest(&self.ab_centers(), [lab.a as f64, lab.b as f64]).0
    }

    fn ab_centers(&self) -> Vec<[f64; 2]> {
        self.centers.iter().map(|c| [c[1], c[2]]).collect()
    }

    /// Cluster index for every pixel of `tile`.
    pub fn labels(&self, tile: &RasterTile) -> Vec<usize> {
        let centers = self.ab_centers();
        tile.pixels()
            .chunks_exact(3)
            .map(|p| {
                let lab = srgb_to_lab([p[0], p[1], p[2]]);
                nearest(&centers, [lab.a as f64, lab.b as f64]).0
            })
            .collect()
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(centers: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(*c, p)))
        .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best })
}

fn plus_plus(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[next]);
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(*p, points[next]));
        }
    }
    centers
}

/// Lloyd iterations from k-means++ seeds; returns centers, labels, SSE.
fn lloyd(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>, f64) {
    let mut centers = plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(&centers, *p);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(points) {
            sums[*l][0] += p[0];
            sums[*l][1] += p[1];
            counts[*l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if !changed {
            break;
        }
    }
    let sse = labels.iter().zip(points).map(|(l, p)| dist2(centers[*l], *p)).sum();
    (centers, labels, sse)
}

fn distinct_count(points: &[[f64; 2]], limit: usize) -> usize {
    let mut seen: Vec<[u64; 2]> = Vec::new();
    for p in points {
        let key = [p[0].to_bits(), p[1].to_bits()];
        if !seen.contains(&key) {
            seen.push(key);
            if seen.len() > limit {
                break;
            }
        }
    }
    seen.len()
}

/// Elbow rule: the interior candidate with the largest second difference
/// of SSE, or the smallest candidate when the curve is flat.
pub fn elbow(curve: &[(usize, f64)]) -> usize {
    let first = curve.first().map(|c| c.0).unwrap_or(1);
    let scale = curve.first().map(|c| c.1).unwrap_or(0.0);
    let mut best = (first, 0.0);
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if second > best.1 {
            best = (w[1].0, second);
        }
    }
    if best.1 <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
        first
    } else {
        best.0
    }
}

/// Pools up to `sample_per_image` pixels per tile and clusters their
/// (a*, b*) coordinates for each candidate k, keeping the elbow choice.
pub fn fit_color_clusters(
    corpus: &[RasterTile],
    k_candidates: std::ops::RangeInclusive<usize>,
    sample_per_image: usize,
    seed: u64,
) -> Result<ColorClusterModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if *k_candidates.start() == 0 || k_candidates.is_empty() || sample_per_image == 0 {
        return Err(Error::invalid("k candidates must be a non-empty range starting at 1 or more"));
    }
    let mut lab = Vec::new();
    for (i, tile) in corpus.iter().enumerate() {
        let px = tile.pixels();
        let n = px.len() / 3;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "color.sample", i as u64));
        let idx: Vec<usize> = if sample_per_image >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, sample_per_image).into_vec();
            v.sort_unstable();
            v
        };
        lab.extend(idx.into_iter().map(|j| srgb_to_lab([px[3 * j], px[3 * j + 1], px[3 * j + 2]])));
    }
    let points: Vec<[f64; 2]> = lab.iter().map(|p| [p.a as f64, p.b as f64]).collect();
    let distinct = distinct_count(&points, *k_candidates.end());
    if distinct < *k_candidates.start() {
        return Err(Error::invalid(format!(
            "{distinct} distinct chromaticities cannot form {} clusters",
            k_candidates.start()
        )));
    }
    let mut curve = Vec::new();
    let mut fits = Vec::new();
    for k in k_candidates {
        if k > distinct {
            // Every point can sit on its own center.
            curve.push((k, 0.0));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "color.kmeans", k as u64));
        let best = (0..RESTARTS)
            .map(|_| lloyd(&points, k, &mut rng))
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one restart");
        curve.push((k, best.2));
        fits.push((k, best));
    }
    // Unfitted candidates only serve as the right neighbour of the last fit.
    let fitted = curve.iter().take_while(|c| c.0 <= distinct).count();
    let k = elbow(&curve[..(fitted + 1).min(curve.len())]);
    let (_, (centers, labels, _)) = fits.into_iter().find(|(kk, _)| *kk == k).expect("elbow picks a fitted k");
    let mut l_sum = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (l, p) in labels.iter().zip(&lab) {
        l_sum[*l] += p.l as f64;
        counts[*l] += 1;
    }
    let centers = centers
        .iter()
        .enumerate()
        .map(|(c, ab)| [if counts[c] > 0 { l_sum[c] / counts[c] as f64 } else { 50.0 }, ab[0], ab[1]])
        .collect();
    Ok(ColorClusterModel {
        k,
        centers,
        elbow_curve: curve,
    })
}

fn ablate(tile: &RasterTile, model: &ColorClusterModel, keep: &[usize], replace: impl Fn(&[f32]) -> [f32; 3]) -> Result<RasterTile> {
    if let Some(bad) = keep.iter().find(|&&c| c >= model.k) {
        return Err(Error::invalid(format!("cluster {bad} out of range for k = {}", model.k)));
    }
    let labels = model.labels(tile);
    let mut out = tile.pixels().to_vec();
    for (px, l) in out.chunks_exact_mut(3).zip(labels) {
        if !keep.contains(&l) {
            let v = replace(px);
            px.copy_from_slice(&v);
        }
    }
    Ok(tile.with_pixels(out))
}

/// Pixels outside the `keep` clusters lose their chromaticity: a* = b* = 0
/// with L* preserved. Kept pixels are copied unchanged.
pub fn ablate_chromaticity(tile: &RasterTile, model: &ColorClusterModel, keep: &[usize]) -> Result<RasterTile> {
    ablate(tile, model, keep, |p| {
        let lab = srgb_to_lab([p[0], p[1], p[2]]);
        lab_to_srgb(LabPixel { l: lab.l, a: 0.0, b: 0.0 })
    })
}

/// Pixels outside the `keep` clusters become mid-gray.
pub fn ablate_gray(tile: &RasterTile, model: &ColorClusterModel, keep: &[usize]) -> Result<RasterTile> {
    ablate(tile, model, keep, |_| [0.5; 3])
}
