//! Acceptance suite. Every criterion prints one PASS/FAIL line on stdout
//! and then asserts. Criteria 4 to 9 share one trained desk-scale model.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wealthlens_core::attribution::{attribution_output_correlation, grad_cam};
use wealthlens_core::featviz::{visualize_unit, VizSpec};
use wealthlens_core::head::{fit_ridge_fixed, quintile_assign, FeatureRow, Pooling};
use wealthlens_core::metrics::{confusion, dichotomy_mcc, mcc, r2, spearman, EvalReport};
use wealthlens_core::model::{BackpropMode, Conv2d, ConvNet, Head, Layer, Unit};
use wealthlens_core::perturb::{
    filter_planes, fit_color_clusters, mean, std_dev, FilterKind, FilterSpec, SweepResult, SIGMA_GRID,
};
use wealthlens_core::pipeline::{color_ablation, filter_sweep, shuffle_sweep, Pipeline, RunConfig};
use wealthlens_core::raster::{lab_to_rgb, rgb_to_lab, srgb_to_lab, RasterTile};
use wealthlens_core::synthgen::{Corpus, RenderedSites, DARK_BROWN};

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2} {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

struct Fixture {
    cfg: RunConfig,
    corpus: Corpus,
    net: ConvNet<f32>,
    eval_1x1: EvalReport,
    eval_3x3: EvalReport,
    sweep: RenderedSites,
    setup_secs: f64,
    _dir: tempfile::TempDir,
}

/// Default desk-scale run: 2,000 sites, D = 64, generated, trained and
/// evaluated through the pipeline stages.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg.clone()).unwrap();
        p.generate().unwrap();
        p.train().unwrap();
        p.fit_head().unwrap();
        let head = cfg.out_dir.join(p.stage_dir("fit-head").unwrap());
        let load = |name: &str| -> EvalReport {
            serde_json::from_str(&std::fs::read_to_string(head.join(name)).unwrap()).unwrap()
        };
        let corpus = p.load_corpus().unwrap();
        let net = p.load_network().unwrap();
        let sweep = RenderedSites::new(&corpus, &cfg.sweep_sites(), &(0..9).collect::<Vec<_>>()).unwrap();
        Fixture {
            eval_1x1: load("eval_1x1.json"),
            eval_3x3: load("eval_3x3.json"),
            setup_secs: start.elapsed().as_secs_f64(),
            cfg,
            corpus,
            net,
            sweep,
            _dir: dir,
        }
    })
}

fn sweep_positions(f: &Fixture) -> Vec<usize> {
    (0..f.sweep.len()).collect()
}

// Independent oracles.

fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Ridge predictions from the standardised normal equations.
fn ridge_oracle(rows: &[FeatureRow], lambda: f64, query: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].features.len();
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r.features[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (rows.iter().map(|r| (r.features[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let ybar = rows.iter().map(|r| r.wealth_index).sum::<f64>() / n;
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mu[j]) / sd[j]).collect() };
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for r in rows {
        let zi = z(&r.features);
        for i in 0..d {
            b[i] += zi[i] * (r.wealth_index - ybar);
            for j in 0..d {
                a[i][j] += zi[i] * zi[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let w = gauss_solve(a, b);
    query.iter().map(|x| ybar + z(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect()
}

fn r2_oracle(y: &[f64], p: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - m) * (a - m)).sum();
    1.0 - ss_res / ss_tot
}

/// Average rank by counting: `1 + #less + (#equal − 1)/2`.
fn rank_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mcc_oracle(truth: &[bool], pred: &[bool]) -> f64 {
    let count = |t: bool, p: bool| truth.iter().zip(pred).filter(|(a, b)| **a == t && **b == p).count() as f64;
    let (tp, tn, fp, fn_) = (count(true, true), count(false, false), count(false, true), count(true, false));
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

/// Circular convolution with a wrapped, sampled, unit-mass Gaussian.
fn spatial_gaussian(tile: &RasterTile, sigma: f64) -> [Vec<f64>; 3] {
    let n = tile.width();
    let k: Vec<f64> = (0..n)
        .map(|x| {
            (-6..=6)
                .map(|m| {
                    let d = x as f64 + (m * n as i64) as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    std::array::from_fn(|c| {
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for dy in 0..n {
                    for dx in 0..n {
                        acc += k[dx] * k[dy] * tile.channel((x + n - dx) % n, (y + n - dy) % n, c) as f64;
                    }
                }
                out[y * n + x] = acc;
            }
        }
        out
    })
}

fn random_tile(n: usize, seed: u64) -> RasterTile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterTile::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

#[test]
fn criterion_01_numeric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = [0.0f64; 5];

    for trial in 0..5 {
        let (n, d) = (30 + 10 * trial, 3 + trial);
        let rows: Vec<FeatureRow> = (0..n)
            .map(|i| {
                let features: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let wealth_index = features.iter().sum::<f64>() + rng.gen_range(-0.5..0.5);
                FeatureRow { site_id: i, features, wealth_index, phase: 0 }
            })
            .collect();
        let lambda = [1e-3, 0.1, 1.0, 10.0, 100.0][trial];
        let model = fit_ridge_fixed(&rows, lambda).unwrap();
        let query: Vec<Vec<f64>> = (0..20).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let want = ridge_oracle(&rows, lambda, &query);
        for (q, w) in query.iter().zip(&want) {
            worst[0] = worst[0].max((model.predict(q).unwrap() - w).abs());
        }
    }

    for trial in 0..20 {
        let n = 25 + trial;
        let y: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) * 0.5).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        worst[1] = worst[1].max((r2(&y, &p).unwrap() - r2_oracle(&y, &p)).abs());
        let rho = pearson_oracle(&rank_oracle(&y), &rank_oracle(&p));
        worst[1] = worst[1].max((spearman(&y, &p).unwrap() - rho).abs());
        let (tg, pg) = (quintile_assign(&y).unwrap(), quintile_assign(&p).unwrap());
        let got = dichotomy_mcc(&tg, &pg).unwrap();
        for k in 1..=4u8 {
            let t: Vec<bool> = tg.iter().map(|g| *g > k).collect();
            let q: Vec<bool> = pg.iter().map(|g| *g > k).collect();
            worst[1] = worst[1].max((got[k as usize - 1] - mcc_oracle(&t, &q)).abs());
        }
        let cm = confusion(&tg, &pg).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let direct = tg.iter().zip(&pg).filter(|(t, p)| **t == a as u8 + 1 && **p == b as u8 + 1).count();
                assert_eq!(cm[a][b], direct as u64);
            }
        }
        let (tp, fp, fn_, tn) = (rng.gen_range(0..50), rng.gen_range(0..50), rng.gen_range(0..50), rng.gen_range(0..50));
        let truth: Vec<bool> = (0..tp + fp + fn_ + tn).map(|i| i < tp || (i >= tp + fp && i < tp + fp + fn_)).collect();
        let pred: Vec<bool> = (0..tp + fp + fn_ + tn).map(|i| i < tp + fp).collect();
        worst[1] = worst[1].max((mcc(tp as u64, fp as u64, fn_ as u64, tn as u64) - mcc_oracle(&truth, &pred)).abs());
    }

    for (seed, sigma) in [(1, 1.5), (2, 2.0), (3, 3.0)] {
        let tile = random_tile(32, seed);
        let got = filter_planes(&tile, &FilterSpec { kind: FilterKind::Low, sigma_px: sigma }).unwrap();
        let want = spatial_gaussian(&tile, sigma);
        for c in 0..3 {
            for (a, b) in got[c].iter().zip(&want[c]) {
                worst[2] = worst[2].max((a - b).abs());
            }
        }
        let high = filter_planes(&tile, &FilterSpec { kind: FilterKind::High, sigma_px: sigma }).unwrap();
        for c in 0..3 {
            for i in 0..32 * 32 {
                let orig = tile.pixels()[i * 3 + c] as f64;
                worst[4] = worst[4].max((got[c][i] + high[c][i] - orig).abs());
            }
        }
    }

    let tile = random_tile(64, 9);
    let back = lab_to_rgb(&rgb_to_lab(&tile));
    for (a, b) in tile.pixels().iter().zip(back.pixels()) {
        worst[3] = worst[3].max((a - b).abs() as f64);
    }

    let ok = worst[0] <= 1e-8 && worst[1] <= 1e-10 && worst[2] <= 1e-4 && worst[3] <= 1e-3 && worst[4] <= 1e-5;
    verdict(
        1,
        "numeric oracles",
        ok,
        &format!(
            "ridge {:.1e}, metrics {:.1e}, low-pass {:.1e}, Lab {:.1e}, LP+HP {:.1e} in {:.1}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            start.elapsed().as_secs_f64()
        ),
    );
}

fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Conv2d<f64> {
    let mut c = Conv2d::zeros(in_c, out_c, k, stride, pad);
    c.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.6..0.6));
    c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.2));
    c
}

/// Conv, ReLU and average-pool layers in one small network.
fn mixed_net(seed: u64) -> ConvNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::Conv(conv(3, 4, 3, 1, 1, &mut rng)),
        Layer::Relu,
        Layer::AvgPool { size: 2 },
        Layer::Conv(conv(4, 5, 3, 2, 1, &mut rng)),
        Layer::Relu,
        Layer::Conv(conv(5, 3, 1, 1, 0, &mut rng)),
    ];
    let head = Head {
        weights: Array1::from_iter((0..3).map(|_| rng.gen_range(-1.0..1.0))),
        bias: 0.3,
    };
    ConvNet::new(layers, head).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn fd_input_error(net: &ConvNet<f64>, x: &Array3<f64>, analytic: &Array3<f64>, unit: Unit, coords: &[(usize, usize, usize)]) -> f64 {
    let h = 1e-6;
    let value = |x: &Array3<f64>| {
        let t = net.trace(x.view()).unwrap();
        net.unit_value(&t, unit).unwrap()
    };
    coords
        .iter()
        .map(|&idx| {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            rel_err((value(&p) - value(&m)) / (2.0 * h), analytic[idx])
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let net = mixed_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array3::from_shape_simple_fn((3, 12, 12), || rng.gen_range(0.0..1.0));
    let coords = |shape: (usize, usize, usize), rng: &mut ChaCha8Rng| -> Vec<(usize, usize, usize)> {
        (0..24).map(|_| (rng.gen_range(0..shape.0), rng.gen_range(0..shape.1), rng.gen_range(0..shape.2))).collect()
    };
    let mut worst = 0.0f64;
    let mut checked = Vec::new();
    for unit in [Unit::Output, Unit::Feature(1)] {
        let g = net.input_gradient_array(x.view(), unit, BackpropMode::Plain).unwrap();
        worst = worst.max(fd_input_error(&net, &x, &g, unit, &coords(x.dim(), &mut rng)));
    }
    checked.push("input".to_string());
    // Chain rule through layer k: a central difference of the output
    // equals the captured gradient dotted with the central difference of
    // the layer's activations.
    let h = 1e-6;
    for k in 0..net.layers.len() - 1 {
        let (_, grad) = net.layer_activations_and_gradients_array(x.view(), k, Unit::Output).unwrap();
        for idx in coords(x.dim(), &mut rng) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let tp = net.trace(p.view()).unwrap();
            let tm = net.trace(m.view()).unwrap();
            let numeric = (tp.output - tm.output) / (2.0 * h);
            let chained = (&tp.activations[k] - &tm.activations[k]) / (2.0 * h);
            let chained = (&chained * &grad).sum();
            worst = worst.max(rel_err(numeric, chained));
        }
        checked.push(format!("{}@{k}", net.layers[k].kind()));
    }
    let ok = worst <= 1e-3;
    verdict(
        2,
        "gradient correctness",
        ok,
        &format!(
            "max relative error {worst:.2e} over {} on 24 coordinates each in {:.1}s",
            checked.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_guided_backprop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = vec![
        Layer::Conv(conv(3, 4, 3, 1, 1, &mut rng)),
        Layer::AvgPool { size: 2 },
        Layer::Conv(conv(4, 2, 3, 2, 1, &mut rng)),
    ];
    let linear = ConvNet::new(layers, Head { weights: Array1::from_vec(vec![0.7, -1.2]), bias: 0.0 }).unwrap();
    let x = Array3::from_shape_simple_fn((3, 8, 8), || rng.gen_range(0.0..1.0));
    let plain = linear.input_gradient_array(x.view(), Unit::Output, BackpropMode::Plain).unwrap();
    let guided = linear.input_gradient_array(x.view(), Unit::Output, BackpropMode::Guided).unwrap();
    let diff = plain.iter().zip(&guided).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // One pixel, three channels all equal to 1. The first layer sums them
    // with per-unit weights [2, 1, −1]/3, so activations are [2, 1, −1].
    // The second layer weights them [3, −2, 5]. Plain gradient per input
    // channel: (3·2 − 2·1)/3 = 4/3. Guided drops unit 2 (negative
    // activation) and unit 1 (negative incoming signal): 3·2/3 = 2.
    let mut c1 = Conv2d::zeros(3, 3, 1, 1, 0);
    for (o, w) in [2.0, 1.0, -1.0].into_iter().enumerate() {
        for c in 0..3 {
            c1.weight[[o, c]] = w / 3.0;
        }
    }
    let mut c2 = Conv2d::zeros(3, 1, 1, 1, 0);
    for (c, w) in [3.0, -2.0, 5.0].into_iter().enumerate() {
        c2.weight[[0, c]] = w;
    }
    let net = ConvNet::new(
        vec![Layer::Conv(c1), Layer::Relu, Layer::Conv(c2)],
        Head { weights: Array1::from_vec(vec![1.0]), bias: 0.0 },
    )
    .unwrap();
    let one = Array3::<f64>::from_elem((3, 1, 1), 1.0);
    let out: f64 = net.forward_array(one.view()).unwrap().1;
    let p: Array3<f64> = net.input_gradient_array(one.view(), Unit::Output, BackpropMode::Plain).unwrap();
    let g: Array3<f64> = net.input_gradient_array(one.view(), Unit::Output, BackpropMode::Guided).unwrap();
    let hand_ok = (out - 4.0).abs() < 1e-12
        && p.iter().all(|v| (v - 4.0 / 3.0).abs() < 1e-12)
        && g.iter().all(|v| (v - 2.0).abs() < 1e-12);
    verdict(
        3,
        "guided backprop",
        diff <= 1e-6 && hand_ok,
        &format!("ReLU-free max difference {diff:.1e}; hand case plain {:.4}, guided {:.4}", p[[0, 0, 0]], g[[0, 0, 0]]),
    );
}

#[test]
fn criterion_04_end_to_end_pipeline() {
    let f = fixture();
    let (c, g) = (&f.eval_1x1, &f.eval_3x3);
    let ok = g.r2 >= 0.5 && g.spearman >= 0.7 && g.r2 >= c.r2 && g.spearman >= c.spearman;
    verdict(
        4,
        "end-to-end synthetic pipeline",
        ok,
        &format!(
            "{} sites, D={}: 3x3 R² {:.3} ρ {:.3}; 1x1 R² {:.3} ρ {:.3}; {:.0}s",
            f.cfg.corpus.n_sites, f.cfg.model.feature_dim, g.r2, g.spearman, c.r2, c.spearman, f.setup_secs
        ),
    );
}

fn curve_r2(res: &SweepResult, pooling: Pooling) -> Vec<(f64, f64, f64)> {
    res.curve(pooling).iter().map(|p| (p.param, mean(&p.r2), std_dev(&p.r2))).collect()
}

#[test]
fn criterion_05_grid_shuffle() {
    let f = fixture();
    let start = Instant::now();
    let cfg = f.cfg.sweep_config(5);
    let res = shuffle_sweep(&f.net, &f.sweep, &sweep_positions(f), &f.cfg.explain.shuffle_grid, &cfg).unwrap();
    let base = res.baseline_r2(Pooling::Grid3).unwrap();
    let mut curve = curve_r2(&res, Pooling::Grid3);
    curve.sort_by(|a, b| b.0.total_cmp(&a.0));
    let at_one = curve.iter().find(|p| p.0 == 1.0).unwrap().1;
    let mut monotone = true;
    let mut prev = (base, 0.0);
    for &(_, m, s) in &curve {
        let pooled = ((prev.1 * prev.1 + s * s) / 2.0).sqrt();
        monotone &= m <= prev.0 + pooled;
        prev = (m, s);
    }
    let ok = base - at_one >= 0.15 && monotone;
    let trace: Vec<String> = curve.iter().map(|p| format!("{}:{:.3}", p.0, p.1)).collect();
    verdict(
        5,
        "grid-shuffle sweep",
        ok,
        &format!(
            "3x3 baseline {base:.3}, tile 1 px {at_one:.3}, monotone {monotone} [{}] in {:.0}s",
            trace.join(" "),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_band_pass() {
    let f = fixture();
    let start = Instant::now();
    let cfg = f.cfg.sweep_config(1);
    let pos = sweep_positions(f);
    let band = filter_sweep(&f.net, &f.sweep, &pos, FilterKind::Band, &SIGMA_GRID, &cfg).unwrap();
    let low = filter_sweep(&f.net, &f.sweep, &pos, FilterKind::Low, &SIGMA_GRID, &cfg).unwrap();
    let band_curve = curve_r2(&band, Pooling::Grid3);
    let peak = band_curve.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let low_curve = curve_r2(&low, Pooling::Grid3);
    let low_large = low_curve.last().unwrap();
    let ok = (1.0..=6.0).contains(&peak.0) && low_large.1 < 0.1;
    verdict(
        6,
        "band-pass sweep",
        ok,
        &format!(
            "band peak R² {:.3} at σ={} px; low-pass R² {:.3} at σ={} px; {:.0}s",
            peak.1,
            peak.0,
            low_large.1,
            low_large.0,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_color_ablation() {
    let f = fixture();
    let start = Instant::now();
    let pos = sweep_positions(f);
    let centers: Vec<RasterTile> = pos.iter().map(|&p| f.sweep.tile(p, 4)).collect();
    let e = &f.cfg.explain;
    let model = fit_color_clusters(&centers, e.k_min..=e.k_max, e.color_samples_per_image, f.cfg.seed_for("color")).unwrap();
    let res = color_ablation(&f.net, &f.sweep, &pos, &model, &f.cfg.sweep_config(1)).unwrap();
    let r2 = |s: &[(Pooling, f64, f64)]| s.iter().find(|x| x.0 == Pooling::Grid3).unwrap().1;
    let base = r2(&res.baseline);
    // Buildings and roads share one palette colour; its cluster is the
    // infrastructure cluster.
    let dark = model.assign(srgb_to_lab(DARK_BROWN));
    let kept = r2(&res.row(dark).gray);
    let order_ok = res.rows.iter().all(|r| r2(&r.chroma) >= r2(&r.gray));
    let per: Vec<String> = res
        .rows
        .iter()
        .map(|r| format!("{}: gray {:.3} chroma {:.3}", r.cluster, r2(&r.gray), r2(&r.chroma)))
        .collect();
    verdict(
        7,
        "color ablation",
        kept >= 0.7 * base && order_ok,
        &format!(
            "k={}, infrastructure cluster {dark} keeps {:.0}% of R² {base:.3}; [{}] in {:.0}s",
            model.k,
            100.0 * kept / base,
            per.join("; "),
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_grad_cam_correlation() {
    use rayon::prelude::*;
    let f = fixture();
    let start = Instant::now();
    let pairs: Vec<(f64, f64)> = (0..200)
        .into_par_iter()
        .map(|s| {
            let tile = f.corpus.center_tile(s);
            let out = f.net.forward(&tile).unwrap().1 as f64;
            (grad_cam(&f.net, &tile, None).unwrap().sum(), out)
        })
        .collect();
    let (sums, outs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let r = attribution_output_correlation(&sums, &outs).unwrap();
    verdict(
        8,
        "Grad-CAM sum vs output",
        r >= 0.8,
        &format!("Pearson r {r:.4} on 200 sites in {:.0}s", start.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_09_feature_visualization() {
    use rayon::prelude::*;
    let f = fixture();
    let start = Instant::now();
    let runs: Vec<(f64, f64, bool)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let r = visualize_unit(&f.net, &VizSpec { seed, ..VizSpec::default() }).unwrap();
            let monotone = r.trajectory.windows(2).all(|w| w[1].best >= w[0].best);
            (r.initial_value(), r.final_value(), monotone)
        })
        .collect();
    // "At least 5× the initial value", read as an increase of four times
    // its magnitude so that non-positive starts are covered.
    let grew = runs.iter().filter(|(i, fv, _)| fv - i >= 4.0 * i.abs()).count();
    let monotone = runs.iter().all(|r| r.2);
    let detail: Vec<String> = runs.iter().map(|(i, fv, _)| format!("{i:.3}->{fv:.3}")).collect();
    verdict(
        9,
        "feature visualization",
        grew >= 9 && monotone,
        &format!(
            "{grew}/10 seeds reach 5x, monotone {monotone} [{}] in {:.0}s",
            detail.join(" "),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

#[test]
fn criterion_10_report_determinism() {
    let start = Instant::now();
    let text = r#"
seed = 5
[corpus]
n_sites = 40
[model]
feature_dim = 8
[train]
stage1_epochs = 1
stage2_epochs = 1
[explain]
sweep_sites = 20
repetitions = 2
shuffle_grid = [1, 28, 224]
sigma_grid = [2.0, 16.0]
k_max = 4
color_samples_per_image = 100
correlation_sites = 10
panel_sites = 4
featviz_seeds = 2
featviz_steps = 5
"#;
    let run = |jobs: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_toml(text).unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.jobs = jobs;
        Pipeline::new(cfg).unwrap().run_all().unwrap();
        let mut files = Vec::new();
        collect_files(dir.path(), dir.path(), &mut files);
        files.sort();
        files
    };
    let (a, b) = (run(1), run(2));
    let names_match = a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0));
    let differing: Vec<&String> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| &x.0).collect();
    let has_report = a.iter().any(|f| f.0.ends_with("report.md"));
    verdict(
        10,
        "report determinism",
        names_match && differing.is_empty() && has_report,
        &format!(
            "{} files, {} differ{} in {:.0}s",
            a.len(),
            differing.len(),
            if names_match { "" } else { ", file sets differ" },
            start.elapsed().as_secs_f64()
        ),
    );
}
