//! Procedural satellite-like scenes with a known latent wealth.
//!
//! A site is a 3×3 neighbourhood of 224 px tiles. Buildings (2–3 px
//! rectangles) and roads (anti-aliased polylines) are spread over the nine
//! tiles; latent wealth is an affine function of their counts. The scene
//! background mixes vegetation and dryland, plus dark rock outcrops that
//! share the infrastructure palette but not its shape, so colour statistics
//! alone do not reveal wealth.
//!
//! Nightlight follows `A·(exp(κ·w) − 1)·(1 + ε)`, `ε ~ U(−0.1, 0.1)`,
//! floored at zero and spread over a 3×3 radiance patch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{nightlight_label, NightlightPatch, RasterTile, TILE_SIDE};
use crate::seeds;

/// Wealth of a site with no buildings and no roads.
pub const BASELINE_WEALTH: f64 = 0.0;
/// Wealth added per building.
pub const WEALTH_PER_BUILDING: f64 = 0.0025;
/// Wealth added per road.
pub const WEALTH_PER_ROAD: f64 = 0.05;
/// Nightlight link `A·(exp(κ·w) − 1)`.
pub const LINK_SCALE: f64 = 0.25;
pub const LINK_RATE: f64 = 0.8;
/// Half-width of the multiplicative nightlight noise.
pub const NIGHTLIGHT_NOISE: f64 = 0.1;
/// How the site nightlight total is spread over the 3×3 radiance patch.
pub const PATCH_WEIGHTS: [f64; 9] = [0.075, 0.125, 0.075, 0.125, 0.2, 0.125, 0.075, 0.125, 0.075];

/// Infrastructure palette (buildings, roads and rock).
pub const DARK_BROWN: [f32; 3] = [0.40, 0.23, 0.22];
pub const VEGETATION_GREEN: [f32; 3] = [0.30, 0.47, 0.30];
pub const DRYLAND_ORANGE: [f32; 3] = [0.80, 0.60, 0.40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Buildings across the whole 3×3 neighbourhood.
    pub building_count: u32,
    /// Inclusive range of building side lengths.
    pub building_size_px: (u32, u32),
    /// Roads across the whole neighbourhood.
    pub road_count: u32,
    pub road_width_px: (f32, f32),
    pub vegetation_fraction: f64,
    /// Fraction of ground covered by dark rock outcrops.
    pub rock_fraction: f64,
    pub dryland_tint: [f32; 3],
    /// Multiplicative brightness of the whole scene.
    pub brightness: f32,
    /// Spread of the per-tile settlement weights; 0 spreads buildings evenly.
    pub clustering: f64,
    pub rng_seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            building_count: 0,
            building_size_px: (2, 3),
            road_count: 0,
            road_width_px: (1.0, 2.0),
            vegetation_fraction: 0.5,
            rock_fraction: 0.1,
            dryland_tint: DRYLAND_ORANGE,
            brightness: 1.0,
            clustering: 0.6,
            rng_seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.vegetation_fraction) || !frac(self.rock_fraction) {
            return Err(Error::invalid("fractions must lie in [0, 1]"));
        }
        if self.building_size_px.0 == 0 || self.building_size_px.0 > self.building_size_px.1 {
            return Err(Error::invalid("building size range must be positive and ordered"));
        }
        if !(self.road_width_px.0 > 0.0 && self.road_width_px.0 <= self.road_width_px.1) {
            return Err(Error::invalid("road width range must be positive and ordered"));
        }
        if !(self.brightness > 0.0) || !(self.clustering >= 0.0) {
            return Err(Error::invalid("brightness must be positive and clustering non-negative"));
        }
        Ok(())
    }
}

/// Latent wealth: affine in building and road counts.
pub fn latent_wealth(params: &SceneParams) -> f64 {
    BASELINE_WEALTH
        + WEALTH_PER_BUILDING * params.building_count as f64
        + WEALTH_PER_ROAD * params.road_count as f64
}

/// Noise-free nightlight total for a given wealth.
pub fn nightlight_link(wealth: f64) -> f64 {
    LINK_SCALE * ((LINK_RATE * wealth).exp() - 1.0)
}

/// Wealth-equivalent scale of the nightlight noise: a ±10 % multiplicative
/// perturbation moves `ln(nightlight)` by `ln(1.1)`, i.e. `ln(1.1)/κ` wealth.
pub fn wealth_noise_scale() -> f64 {
    (1.0 + NIGHTLIGHT_NOISE).ln() / LINK_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: usize,
    pub params: SceneParams,
    pub latent_wealth: f64,
    pub nightlight: NightlightPatch,
    /// Raw (unfloored) nightlight total.
    pub nightlight_sum: f64,
    /// Survey phase tag.
    pub phase: u32,
}

/// A fully rendered site.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSite {
    pub summary: SiteSummary,
    /// Row-major 3×3 grid; index 4 is the centre tile.
    pub tiles: Vec<RasterTile>,
}

impl SyntheticSite {
    pub fn latent_wealth(&self) -> f64 {
        self.summary.latent_wealth
    }

    pub fn center(&self) -> &RasterTile {
        &self.tiles[4]
    }
}

fn summarize(site_id: usize, params: &SceneParams, phase: u32) -> SiteSummary {
    let w = latent_wealth(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(params.rng_seed, "synthgen.nightlight", 0));
    let eps: f64 = rng.gen_range(-NIGHTLIGHT_NOISE..=NIGHTLIGHT_NOISE);
    let total = (nightlight_link(w) * (1.0 + eps)).max(0.0);
    let values = PATCH_WEIGHTS.map(|p| p * total);
    SiteSummary {
        site_id,
        params: params.clone(),
        latent_wealth: w,
        nightlight: NightlightPatch::new(values),
        nightlight_sum: total,
        phase,
    }
}

/// Buildings and roads assigned to each of the nine tiles.
pub fn allocate(params: &SceneParams) -> [(u32, u32); 9] {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(params.rng_seed, "synthgen.allocate", 0));
    let weights: Vec<f64> = (0..9)
        .map(|_| {
            // Box–Muller for a standard normal.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (params.clustering * z).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let cum: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.gen();
        cum.iter().position(|&c| u < c).unwrap_or(8)
    };
    let mut out = [(0u32, 0u32); 9];
    for _ in 0..params.building_count {
        out[pick(&mut rng)].0 += 1;
    }
    for _ in 0..params.road_count {
        out[pick(&mut rng)].1 += 1;
    }
    out
}

/// Smooth random field on `[0,1]`, bicubic-free: bilinear upsampling of a
/// coarse lattice with smoothstep weights.
fn low_freq_field(rng: &mut ChaCha8Rng, side: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen()).collect();
    let step = side as f32 / cells as f32;
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        let fy = y as f32 / step;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f32;
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..side {
            let fx = x as f32 / step;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f32;
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let v00 = lattice[y0 * n + x0];
            let v01 = lattice[y0 * n + x0 + 1];
            let v10 = lattice[(y0 + 1) * n + x0];
            let v11 = lattice[(y0 + 1) * n + x0 + 1];
            out[y * side + x] = (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty;
        }
    }
    out
}

/// Value below which a fraction `q` of the field lies.
fn quantile(field: &[f32], q: f64) -> f32 {
    let mut v = field.to_vec();
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    *v.select_nth_unstable_by(idx, |a, b| a.total_cmp(b)).1
}

fn blend(dst: [f32; 3], src: [f32; 3], alpha: f32) -> [f32; 3] {
    std::array::from_fn(|c| dst[c] * (1.0 - alpha) + src[c] * alpha)
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f32; 3], lightness: f32, noise: f32) -> [f32; 3] {
    let l: f32 = rng.gen_range(1.0 - lightness..=1.0 + lightness);
    rgb.map(|c| (c * l + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders tile `index` (row-major in the 3×3 grid) of a site.
pub fn render_tile(params: &SceneParams, index: usize) -> RasterTile {
    let (buildings, roads) = allocate(params)[index];
    let side = TILE_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(params.rng_seed, "synthgen.tile", index as u64));

    let veg = low_freq_field(&mut rng, side, 4);
    let veg_cut = quantile(&veg, params.vegetation_fraction);
    let rock = low_freq_field(&mut rng, side, 7);
    let rock_cut = quantile(&rock, 1.0 - params.rock_fraction);
    let green = jitter(&mut rng, VEGETATION_GREEN, 0.05, 0.0);
    let dry = jitter(&mut rng, params.dryland_tint, 0.05, 0.0);
    let stone = jitter(&mut rng, DARK_BROWN, 0.08, 0.0);

    let mut px = vec![[0.0f32; 3]; side * side];
    for (i, p) in px.iter_mut().enumerate() {
        // Narrow smoothstep transitions keep palettes mostly pure.
        let tv = ((veg_cut - veg[i]) / 0.02 + 0.5).clamp(0.0, 1.0);
        let mut c = blend(dry, green, tv);
        if params.rock_fraction > 0.0 {
            let tr = ((rock[i] - rock_cut) / 0.02 + 0.5).clamp(0.0, 1.0);
            c = blend(c, stone, tr);
        }
        *p = c;
    }

    for _ in 0..roads {
        let width: f32 = rng.gen_range(params.road_width_px.0..=params.road_width_px.1);
        let colour = jitter(&mut rng, DARK_BROWN, 0.05, 0.0);
        let s = side as f32;
        let mut pts = vec![(rng.gen_range(0.0..s), 0.0f32)];
        if rng.gen_bool(0.5) {
            pts[0] = (0.0, rng.gen_range(0.0..s));
        }
        let segments = rng.gen_range(2..=4);
        for k in 1..=segments {
            let t = k as f32 / segments as f32;
            let last = *pts.last().expect("start point");
            let target = if pts[0].1 == 0.0 {
                (last.0 + rng.gen_range(-40.0..40.0), t * s)
            } else {
                (t * s, last.1 + rng.gen_range(-40.0..40.0))
            };
            pts.push(target);
        }
        let half = width / 2.0;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let x0 = (a.0.min(b.0) - half - 1.0).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + half + 1.0).ceil() as usize).min(side - 1);
            let y0 = (a.1.min(b.1) - half - 1.0).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + half + 1.0).ceil() as usize).min(side - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance((x as f32 + 0.5, y as f32 + 0.5), a, b);
                    let alpha = (half + 0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        let p = &mut px[y * side + x];
                        *p = blend(*p, colour, alpha);
                    }
                }
            }
        }
    }

    let (lo, hi) = params.building_size_px;
    for _ in 0..buildings {
        let w = rng.gen_range(lo..=hi) as usize;
        let h = rng.gen_range(lo..=hi) as usize;
        let x0 = rng.gen_range(0..=side - w);
        let y0 = rng.gen_range(0..=side - h);
        let roof = jitter(&mut rng, DARK_BROWN, 0.15, 0.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                px[y * side + x] = roof;
            }
        }
    }

    let mut tile = RasterTile::from_fn(side, side, |x, y| {
        let p = px[y * side + x];
        let n: f32 = rng.gen_range(-0.015..=0.015);
        p.map(|c| c * params.brightness + n)
    });
    tile.origin = None;
    tile
}

pub fn generate_site_with_id(site_id: usize, params: &SceneParams, phase: u32) -> Result<SyntheticSite> {
    params.validate()?;
    Ok(SyntheticSite {
        summary: summarize(site_id, params, phase),
        tiles: (0..9).map(|i| render_tile(params, i)).collect(),
    })
}

/// Renders one site deterministically from its parameters.
pub fn generate_site(params: &SceneParams) -> Result<SyntheticSite> {
    generate_site_with_id(0, params, 0)
}

/// Ranges the default corpus draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDistribution {
    /// Building count is `max_buildings · u²`, `u ~ U(0,1)`, so poor sites
    /// dominate.
    pub max_buildings: u32,
    pub max_roads: u32,
    pub vegetation: (f64, f64),
    pub rock: (f64, f64),
    pub brightness: (f32, f32),
    pub clustering: f64,
    pub phases: u32,
}

impl Default for ParamDistribution {
    fn default() -> Self {
        Self {
            max_buildings: 2400,
            max_roads: 40,
            vegetation: (0.1, 0.9),
            rock: (0.0, 0.25),
            brightness: (0.9, 1.1),
            clustering: 0.6,
            phases: 2,
        }
    }
}

impl ParamDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng, rng_seed: u64) -> (SceneParams, u32) {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let tint_shift: f32 = rng.gen_range(-0.06..0.06);
        let params = SceneParams {
            building_count: (self.max_buildings as f64 * u * u).round() as u32,
            road_count: (self.max_roads as f64 * v * v).round() as u32,
            vegetation_fraction: rng.gen_range(self.vegetation.0..=self.vegetation.1),
            rock_fraction: rng.gen_range(self.rock.0..=self.rock.1),
            dryland_tint: [
                DRYLAND_ORANGE[0] + tint_shift,
                DRYLAND_ORANGE[1] + 0.5 * tint_shift,
                DRYLAND_ORANGE[2],
            ],
            brightness: rng.gen_range(self.brightness.0..=self.brightness.1),
            clustering: self.clustering,
            rng_seed,
            ..SceneParams::default()
        };
        let phase = rng.gen_range(0..self.phases.max(1));
        (params, phase)
    }
}

/// Site parameters and labels for a corpus; tiles are rendered on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub distribution: ParamDistribution,
    pub sites: Vec<SiteSummary>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, i: usize) -> SyntheticSite {
        let s = &self.sites[i];
        SyntheticSite {
            summary: s.clone(),
            tiles: (0..9).map(|t| render_tile(&s.params, t)).collect(),
        }
    }

    pub fn tile(&self, site: usize, index: usize) -> RasterTile {
        render_tile(&self.sites[site].params, index)
    }

    pub fn center_tile(&self, site: usize) -> RasterTile {
        self.tile(site, 4)
    }

    pub fn wealth(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.latent_wealth).collect()
    }

    /// `site_id,latent_wealth,nightlight_sum,phase,params`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, manifest_bytes(self)?).map_err(|e| Error::io(path, e))
    }
}

impl crate::head::SiteSource for Corpus {
    fn site_count(&self) -> usize {
        self.sites.len()
    }

    fn tile(&self, site: usize, index: usize) -> RasterTile {
        render_tile(&self.sites[site].params, index)
    }

    fn site_id(&self, site: usize) -> usize {
        self.sites[site].site_id
    }

    fn wealth(&self, site: usize) -> f64 {
        self.sites[site].latent_wealth
    }

    fn phase(&self, site: usize) -> u32 {
        self.sites[site].phase
    }
}

/// Tiles of selected sites rendered once and held as 8-bit RGB. Site
/// positions `0..len` index the selection.
pub struct RenderedSites {
    summaries: Vec<SiteSummary>,
    tile_indices: Vec<usize>,
    tiles: Vec<Vec<u8>>,
}

impl RenderedSites {
    /// Renders tiles `tile_indices` of every site in `sites`.
    pub fn new(corpus: &Corpus, sites: &[usize], tile_indices: &[usize]) -> Result<Self> {
        use rayon::prelude::*;
        if let Some(&bad) = sites.iter().find(|&&s| s >= corpus.len()) {
            return Err(Error::invalid(format!("site {bad} outside corpus of {}", corpus.len())));
        }
        if tile_indices.is_empty() || tile_indices.iter().any(|&t| t >= 9) {
            return Err(Error::invalid("tile indices must be non-empty and below 9"));
        }
        let jobs: Vec<(usize, usize)> = sites
            .iter()
            .flat_map(|&s| tile_indices.iter().map(move |&t| (s, t)))
            .collect();
        let tiles = jobs.par_iter().map(|&(s, t)| corpus.tile(s, t).to_rgb8()).collect();
        Ok(Self {
            summaries: sites.iter().map(|&s| corpus.sites[s].clone()).collect(),
            tile_indices: tile_indices.to_vec(),
            tiles,
        })
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    pub fn summary(&self, pos: usize) -> &SiteSummary {
        &self.summaries[pos]
    }

    /// Panics when `index` was not rendered.
    pub fn tile(&self, pos: usize, index: usize) -> RasterTile {
        let k = self
            .tile_indices
            .iter()
            .position(|&t| t == index)
            .unwrap_or_else(|| panic!("tile {index} was not rendered"));
        let bytes = &self.tiles[pos * self.tile_indices.len() + k];
        RasterTile::from_rgb8(TILE_SIDE, TILE_SIDE, bytes).expect("rendered tile size")
    }
}

impl crate::head::SiteSource for RenderedSites {
    fn site_count(&self) -> usize {
        self.len()
    }

    fn tile(&self, site: usize, index: usize) -> RasterTile {
        RenderedSites::tile(self, site, index)
    }

    fn site_id(&self, site: usize) -> usize {
        self.summaries[site].site_id
    }

    fn wealth(&self, site: usize) -> f64 {
        self.summaries[site].latent_wealth
    }

    fn phase(&self, site: usize) -> u32 {
        self.summaries[site].phase
    }
}

/// Center tiles of selected sites paired with their nightlight labels.
pub struct NightlightSamples {
    centers: RenderedSites,
    labels: Vec<f64>,
}

impl NightlightSamples {
    pub fn new(corpus: &Corpus, sites: &[usize], noise_floor: f64) -> Result<Self> {
        let centers = RenderedSites::new(corpus, sites, &[4])?;
        let labels = sites
            .iter()
            .map(|&s| nightlight_label(&corpus.sites[s].nightlight, noise_floor))
            .collect::<Result<_>>()?;
        Ok(Self { centers, labels })
    }
}

impl crate::model::SampleSource for NightlightSamples {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    fn input(&self, i: usize) -> Result<RasterTile> {
        Ok(self.centers.tile(i, 4))
    }
}

/// Draws `n_sites` i.i.d. sites. Site `i` uses a stream derived from
/// `(seed, i)`, so corpora are reproducible and prefixes are stable.
pub fn generate_corpus(n_sites: usize, distribution: &ParamDistribution, seed: u64) -> Result<Corpus> {
    if n_sites == 0 {
        return Err(Error::invalid("corpus needs at least one site"));
    }
    let sites = (0..n_sites)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "synthgen.site", i as u64));
            let render_seed = seeds::derive(seed, "synthgen.render", i as u64);
            let (params, phase) = distribution.sample(&mut rng, render_seed);
            summarize(i, &params, phase)
        })
        .collect();
    Ok(Corpus {
        seed,
        distribution: distribution.clone(),
        sites,
    })
}

/// Manifest CSV of `corpus`.
pub fn manifest_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["site_id", "latent_wealth", "nightlight_sum", "phase", "params"])?;
    for s in &corpus.sites {
        w.write_record([
            s.site_id.to_string(),
            format!("{:.6}", s.latent_wealth),
            format!("{:.6}", s.nightlight_sum),
            s.phase.to_string(),
            serde_json::to_string(&s.params)?,
        ])?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}
