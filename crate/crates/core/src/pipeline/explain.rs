use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{
    attribution_output_correlation, grad_cam, guided_backprop, guided_grad_cam, occlusion_map, panel_figure_svg,
    AttributionMap, Panel,
};
use crate::error::{Error, Result};
use crate::featviz::{visualize_unit, VizSpec};
use crate::head::{Pooling, SiteSource};
use crate::model::{ConvNet, Unit};
use crate::perturb::{
    ablate_chromaticity, ablate_gray, evaluate_transform, fit_color_clusters, freq_filter, grid_shuffle,
    perturbation_sweep, ColorClusterModel, FilterKind, FilterSpec, ShuffleSpec, SweepConfig, SweepResult,
};
use crate::plot::{LineChart, Series};
use crate::raster::{srgb_to_lab, RasterTile};
use crate::seeds;
use crate::synthgen::{Corpus, RenderedSites, DARK_BROWN};

use super::{md_table, write_json, write_text, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainMethod {
    Shuffle,
    Filter,
    Color,
    Occlusion,
    GradCam,
    GuidedBp,
    GuidedGradCam,
    Featviz,
}

impl ExplainMethod {
    pub const ALL: [ExplainMethod; 8] = [
        ExplainMethod::Shuffle,
        ExplainMethod::Filter,
        ExplainMethod::Color,
        ExplainMethod::Occlusion,
        ExplainMethod::GradCam,
        ExplainMethod::GuidedBp,
        ExplainMethod::GuidedGradCam,
        ExplainMethod::Featviz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExplainMethod::Shuffle => "shuffle",
            ExplainMethod::Filter => "filter",
            ExplainMethod::Color => "color",
            ExplainMethod::Occlusion => "occlusion",
            ExplainMethod::GradCam => "gradcam",
            ExplainMethod::GuidedBp => "guidedbp",
            ExplainMethod::GuidedGradCam => "guidedgradcam",
            ExplainMethod::Featviz => "featviz",
        }
    }

    fn is_attribution(self) -> bool {
        matches!(
            self,
            ExplainMethod::Occlusion | ExplainMethod::GradCam | ExplainMethod::GuidedBp | ExplainMethod::GuidedGradCam
        )
    }
}

impl std::str::FromStr for ExplainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
        })
    }
}

/// Shuffle sweep over tile sizes in pixels; every tile gets its own stream.
pub fn shuffle_sweep(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    grid: &[usize],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let params: Vec<f64> = grid.iter().map(|&p| p as f64).collect();
    let transform = |px: f64, rep_seed: u64, pos: usize, t: usize, tile: &RasterTile| {
        let seed = seeds::derive(rep_seed, "tile", (pos * 9 + t) as u64);
        grid_shuffle(tile, &ShuffleSpec::new(px as usize, seed))
    };
    perturbation_sweep(net, source, sites, "shuffle", "tile size (px)", &params, &transform, cfg)
}

/// Frequency-filter sweep over signal σ in pixels.
pub fn filter_sweep(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    kind: FilterKind,
    sigmas: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let transform =
        |sigma_px: f64, _: u64, _: usize, _: usize, tile: &RasterTile| freq_filter(tile, &FilterSpec { kind, sigma_px });
    perturbation_sweep(net, source, sites, &format!("{}-pass", kind.name()), "σ (px)", sigmas, &transform, cfg)
}

/// Scores for one kept cluster: `(pooling, r2, spearman)` per ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorAblationRow {
    pub cluster: usize,
    pub center_lab: [f64; 3],
    pub gray: Vec<(Pooling, f64, f64)>,
    pub chroma: Vec<(Pooling, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorAblation {
    pub model: ColorClusterModel,
    pub baseline: Vec<(Pooling, f64, f64)>,
    pub rows: Vec<ColorAblationRow>,
}

impl ColorAblation {
    pub fn row(&self, cluster: usize) -> &ColorAblationRow {
        &self.rows[cluster]
    }
}

fn r2_of(scores: &[(Pooling, f64, f64)], pooling: Pooling) -> f64 {
    scores.iter().find(|s| s.0 == pooling).map(|s| s.1).unwrap_or(f64::NAN)
}

/// For each cluster, keeps it intact and either grays or removes the
/// chromaticity of every other pixel, then refits and rescores.
pub fn color_ablation(
    net: &ConvNet<f32>,
    source: &dyn SiteSource,
    sites: &[usize],
    model: &ColorClusterModel,
    cfg: &SweepConfig,
) -> Result<ColorAblation> {
    let baseline = evaluate_transform(net, source, sites, None, cfg)?;
    let mut rows = Vec::new();
    for c in 0..model.k {
        let keep = [c];
        let gray_fn = |_: usize, _: usize, t: &RasterTile| ablate_gray(t, model, &keep);
        let chroma_fn = |_: usize, _: usize, t: &RasterTile| ablate_chromaticity(t, model, &keep);
        let gray = evaluate_transform(net, source, sites, Some(&gray_fn), cfg)?;
        let chroma = evaluate_transform(net, source, sites, Some(&chroma_fn), cfg)?;
        log::info!("color cluster {c}: gray {gray:?} chroma {chroma:?}");
        rows.push(ColorAblationRow {
            cluster: c,
            center_lab: model.centers[c],
            gray,
            chroma,
        });
    }
    Ok(ColorAblation {
        model: model.clone(),
        baseline,
        rows,
    })
}

/// `count` corpus sites spread evenly over the wealth ranking, in ascending
/// wealth order. Explicit `sites` are only sorted.
pub fn panel_sites(corpus: &Corpus, count: usize, sites: Option<&[usize]>) -> Vec<usize> {
    let by_wealth = |v: &mut Vec<usize>| {
        v.sort_by(|&a, &b| {
            corpus.sites[a]
                .latent_wealth
                .total_cmp(&corpus.sites[b].latent_wealth)
                .then(a.cmp(&b))
        })
    };
    if let Some(s) = sites {
        let mut v = s.to_vec();
        by_wealth(&mut v);
        v.dedup();
        return v;
    }
    let mut all: Vec<usize> = (0..corpus.len()).collect();
    by_wealth(&mut all);
    let n = all.len();
    let count = count.min(n);
    if count == 1 {
        return vec![all[n / 2]];
    }
    (0..count).map(|i| all[(i * (n - 1) + (count - 1) / 2) / (count - 1)]).collect()
}

fn write_sweep(result: &SweepResult, dir: &Path, stem: &str, log_x: bool) -> Result<()> {
    result.write_csv(&dir.join(format!("{stem}.csv")))?;
    write_json(&dir.join(format!("{stem}.json")), result)?;
    write_text(&dir.join(format!("{stem}.svg")), &result.to_svg(log_x))
}

fn attribution(net: &ConvNet<f32>, tile: &RasterTile, method: ExplainMethod, cfg: &RunConfig) -> Result<AttributionMap> {
    match method {
        ExplainMethod::Occlusion => occlusion_map(net, tile, &cfg.explain.occlusion),
        ExplainMethod::GradCam => grad_cam(net, tile, None),
        ExplainMethod::GuidedBp => guided_backprop(net, tile),
        ExplainMethod::GuidedGradCam => guided_grad_cam(net, tile),
        _ => Err(Error::invalid(format!("{} is not an attribution method", method.name()))),
    }
}

pub(super) fn run(
    cfg: &RunConfig,
    method: ExplainMethod,
    corpus: &Corpus,
    net: &ConvNet<f32>,
    sites: Option<&[usize]>,
    dir: &Path,
) -> Result<()> {
    use rayon::prelude::*;
    let e = &cfg.explain;
    match method {
        ExplainMethod::Shuffle | ExplainMethod::Filter | ExplainMethod::Color => {
            let cache = RenderedSites::new(corpus, &cfg.sweep_sites(), &(0..9).collect::<Vec<_>>())?;
            let pos: Vec<usize> = (0..cache.len()).collect();
            match method {
                ExplainMethod::Shuffle => {
                    let res = shuffle_sweep(net, &cache, &pos, &e.shuffle_grid, &cfg.sweep_config(e.repetitions))?;
                    write_sweep(&res, dir, "shuffle", true)
                }
                ExplainMethod::Filter => {
                    for &kind in &e.filter_kinds {
                        let res = filter_sweep(net, &cache, &pos, kind, &e.sigma_grid, &cfg.sweep_config(1))?;
                        write_sweep(&res, dir, &format!("filter_{}", kind.name()), true)?;
                    }
                    Ok(())
                }
                _ => {
                    let centers: Vec<RasterTile> = pos.iter().map(|&p| cache.tile(p, 4)).collect();
                    let model =
                        fit_color_clusters(&centers, e.k_min..=e.k_max, e.color_samples_per_image, cfg.seed_for("color"))?;
                    let res = color_ablation(net, &cache, &pos, &model, &cfg.sweep_config(1))?;
                    write_color(&res, dir)
                }
            }
        }
        ExplainMethod::Featviz => {
            let runs = (0..e.featviz_seeds)
                .into_par_iter()
                .map(|k| {
                    let spec = VizSpec {
                        unit: Unit::Output,
                        steps: e.featviz_steps,
                        seed: seeds::derive(cfg.seed, "featviz", k as u64),
                        ..VizSpec::default()
                    };
                    visualize_unit(net, &spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut summary = Vec::new();
            let mut series = Vec::new();
            for (k, r) in runs.iter().enumerate() {
                r.write_png(&dir.join(format!("seed{k}.png")))?;
                r.write_trajectory_csv(&dir.join(format!("seed{k}.csv")))?;
                summary.push(json!({ "run": k, "initial": r.initial_value(), "final": r.final_value() }));
                series.push(Series {
                    name: format!("run {k}"),
                    points: r.trajectory.iter().map(|s| (s.step as f64, s.best, 0.0)).collect(),
                    dashed: false,
                });
            }
            write_json(&dir.join("summary.json"), &summary)?;
            let chart = LineChart {
                title: "Feature visualisation".into(),
                x_label: "step".into(),
                y_label: "output (best so far)".into(),
                log_x: false,
                series,
                markers: Vec::new(),
            };
            write_text(&dir.join("trajectory.svg"), &chart.to_svg())
        }
        _ => {
            debug_assert!(method.is_attribution());
            let panels = panel_sites(corpus, e.panel_sites, sites);
            let mut figure = Vec::new();
            for &s in &panels {
                let tile = corpus.center_tile(s);
                let id = corpus.sites[s].site_id;
                let map = attribution(net, &tile, method, cfg)?;
                write_text(&dir.join(format!("site{id}.json")), &map.to_json()?)?;
                map.overlay_png(&tile, &dir.join(format!("site{id}.png")))?;
                tile.save_png(&dir.join(format!("site{id}_input.png")))?;
                figure.push(Panel {
                    href: format!("site{id}.png"),
                    caption: format!("site {id}, wealth {:.2}", corpus.sites[s].latent_wealth),
                });
            }
            let rows: Vec<Vec<Panel>> = {
                let mut rows = Vec::new();
                let mut it = figure.into_iter().peekable();
                while it.peek().is_some() {
                    rows.push(it.by_ref().take(3).collect());
                }
                rows
            };
            write_text(
                &dir.join("figure.svg"),
                &panel_figure_svg(&format!("{} (ascending wealth)", method.name()), &rows, 160),
            )?;
            let corr_sites = cfg.correlation_sites();
            let pairs = corr_sites
                .par_iter()
                .map(|&s| {
                    let tile = corpus.center_tile(s);
                    let (_, out) = net.forward(&tile)?;
                    Ok((attribution(net, &tile, method, cfg)?.sum(), out as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            let (sums, outputs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = attribution_output_correlation(&sums, &outputs)?;
            write_json(
                &dir.join("correlation.json"),
                &json!({ "method": method.name(), "sites": corr_sites.len(), "pearson": r }),
            )
        }
    }
}

fn write_color(res: &ColorAblation, dir: &Path) -> Result<()> {
    write_json(&dir.join("color.json"), res)?;
    let mut w = csv::Writer::from_path(dir.join("elbow.csv"))?;
    w.write_record(["k", "sse"])?;
    for (k, sse) in &res.model.elbow_curve {
        w.write_record([k.to_string(), format!("{sse:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    // The generator paints buildings and roads in one dark brown.
    let infra = res.model.assign(srgb_to_lab(DARK_BROWN));
    let rows: Vec<Vec<String>> = res
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                format!("{}{}", r.cluster, if r.cluster == infra { " (infrastructure)" } else { "" }),
                format!("{:.1}, {:.1}, {:.1}", r.center_lab[0], r.center_lab[1], r.center_lab[2]),
            ];
            for p in Pooling::BOTH {
                row.push(format!("{:.3}", r2_of(&r.gray, p)));
                row.push(format!("{:.3}", r2_of(&r.chroma, p)));
            }
            row
        })
        .collect();
    let mut text = format!(
        "Baseline R²: 1x1 {:.3}, 3x3 {:.3}\n\n",
        r2_of(&res.baseline, Pooling::Center),
        r2_of(&res.baseline, Pooling::Grid3)
    );
    text.push_str(&md_table(
        &["kept cluster", "L*, a*, b*", "gray 1x1", "no chroma 1x1", "gray 3x3", "no chroma 3x3"],
        &rows,
    ));
    write_text(&dir.join("color.md"), &text)
}
