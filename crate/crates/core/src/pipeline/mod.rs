//! Stage orchestration for the command-line driver.
//!
//! Stages write into `out/<stage>/<hash>/`, where `<hash>` digests the
//! config sections the stage reads plus the hashes of its inputs. A stage
//! directory is complete once `stage.json` exists; rerunning a complete
//! stage is a no-op. Outputs are staged in a sibling `.partial` directory
//! and renamed into place.
//!
//! Seeds: the corpus uses stream `corpus`, network init `model.init`,
//! training `train`, ridge folds `head.folds`, sweeps `sweep`, colour
//! clustering `color` and feature visualisation `featviz` (index = run).

mod config;
mod explain;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::{extract_features, fit_ridge, read_feature_table, write_feature_table, FeatureRow, Pooling};
use crate::metrics::{cross_period_eval, cross_validated_predictions, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, train_two_stage, write_loss_history, ConvNet, LossHistory, Stage};
use crate::plot::{LineChart, Series};
use crate::raster::concat_grid;
use crate::synthgen::{generate_corpus, Corpus, NightlightSamples};

pub use config::{CorpusConfig, ExplainConfig, HeadConfig, ModelConfig, RunConfig, TrainConfig};
pub use explain::{color_ablation, filter_sweep, panel_sites, shuffle_sweep, ColorAblation, ColorAblationRow, ExplainMethod};

const STAMP: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

/// Completion record written last into every stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub hash: String,
    /// Output files relative to the stage directory, sorted.
    pub files: Vec<String>,
}

pub struct Pipeline {
    cfg: RunConfig,
    pool: rayon::ThreadPool,
}

fn digest(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Markdown table with a header row.
pub(crate) fn md_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { cfg, pool })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Stage key: `(hash, directory relative to out_dir)`.
    fn key(&self, stage: &str) -> Result<(String, PathBuf)> {
        let c = &self.cfg;
        let value = match stage {
            "generate" => json!({ "stage": stage, "seed": c.seed, "corpus": c.corpus }),
            "train" => json!({ "stage": stage, "up": self.hash("generate")?, "model": c.model, "train": c.train }),
            "fit-head" => json!({ "stage": stage, "up": self.hash("train")?, "head": c.head }),
            "eval-cross-period" => json!({ "stage": stage, "up": self.hash("fit-head")? }),
            "report" => {
                let mut ups = vec![self.hash("fit-head")?, self.hash("eval-cross-period")?];
                for m in ExplainMethod::ALL {
                    ups.push(self.explain_hash(m, None)?);
                }
                json!({ "stage": stage, "up": ups })
            }
            _ => return Err(Error::invalid(format!("unknown stage `{stage}`"))),
        };
        let hash = digest(&value);
        let dir = PathBuf::from(stage).join(&hash);
        Ok((hash, dir))
    }

    fn hash(&self, stage: &str) -> Result<String> {
        Ok(self.key(stage)?.0)
    }

    fn explain_key(&self, method: ExplainMethod, sites: Option<&[usize]>) -> Result<(String, PathBuf)> {
        let c = &self.cfg;
        let value = json!({
            "stage": "explain",
            "method": method.name(),
            "up": self.hash("train")?,
            "head": c.head,
            "explain": c.explain,
            "sites": sites,
        });
        let hash = digest(&value);
        Ok((hash.clone(), PathBuf::from("explain").join(method.name()).join(hash)))
    }

    fn explain_hash(&self, method: ExplainMethod, sites: Option<&[usize]>) -> Result<String> {
        Ok(self.explain_key(method, sites)?.0)
    }

    /// Directory of stage `stage` for the current config, relative to `out_dir`.
    pub fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        Ok(self.key(stage)?.1)
    }

    pub fn explain_dir(&self, method: ExplainMethod, sites: Option<&[usize]>) -> Result<PathBuf> {
        Ok(self.explain_key(method, sites)?.1)
    }

    /// Absolute directory of a completed stage, or `MissingStage`.
    fn require(&self, stage: &str, rel: &Path) -> Result<PathBuf> {
        let dir = self.cfg.out_dir.join(rel);
        if dir.join(STAMP).is_file() {
            Ok(dir)
        } else {
            Err(Error::MissingStage {
                stage: stage.to_string(),
                path: dir,
            })
        }
    }

    fn require_stage(&self, stage: &str) -> Result<PathBuf> {
        self.require(stage, &self.stage_dir(stage)?)
    }

    pub fn stamp(&self, rel: &Path) -> Result<Stamp> {
        read_json(&self.cfg.out_dir.join(rel).join(STAMP))
    }

    fn run_stage(&self, stage: &str, hash: &str, rel: &Path, body: impl FnOnce(&Path) -> Result<()> + Send) -> Result<StageOutcome> {
        let dir = self.cfg.out_dir.join(rel);
        if dir.join(STAMP).is_file() {
            log::info!("{stage}: up to date at {}", dir.display());
            return Ok(StageOutcome::UpToDate);
        }
        let partial = dir.with_extension("partial");
        for d in [&partial, &dir] {
            if d.exists() {
                std::fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        std::fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        log::info!("{stage}: running into {}", dir.display());
        self.pool.install(|| body(&partial))?;
        let mut files = Vec::new();
        list_files(&partial, &partial, &mut files)?;
        files.sort();
        let stamp = Stamp {
            stage: stage.to_string(),
            hash: hash.to_string(),
            files,
        };
        write_json(&partial.join(STAMP), &stamp)?;
        std::fs::rename(&partial, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(StageOutcome::Ran)
    }

    fn simple_stage(&self, stage: &str, body: impl FnOnce(&Path) -> Result<()> + Send) -> Result<StageOutcome> {
        let (hash, rel) = self.key(stage)?;
        self.run_stage(stage, &hash, &rel, body)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        read_json(&self.require_stage("generate")?.join("corpus.json"))
    }

    pub fn load_network(&self) -> Result<ConvNet<f32>> {
        load_checkpoint(&self.require_stage("train")?.join("model.ckpt"))
    }

    pub fn load_features(&self, pooling: Pooling) -> Result<Vec<FeatureRow>> {
        read_feature_table(&self.require_stage("fit-head")?.join(format!("features_{}.csv", pooling.name())))
    }

    /// Corpus summary, manifest and PNG previews.
    pub fn generate(&self) -> Result<StageOutcome> {
        let c = &self.cfg;
        self.simple_stage("generate", |dir| {
            let corpus = generate_corpus(c.corpus.n_sites, &c.corpus.distribution, c.seed_for("corpus"))?;
            write_json(&dir.join("corpus.json"), &corpus)?;
            corpus.write_manifest(&dir.join("manifest.csv"))?;
            let tiles = dir.join("tiles");
            std::fs::create_dir_all(&tiles).map_err(|e| Error::io(&tiles, e))?;
            for s in 0..c.corpus.preview_sites.min(corpus.len()) {
                let site = corpus.site(s);
                let id = site.summary.site_id;
                for (t, tile) in site.tiles.iter().enumerate() {
                    tile.save_png(&tiles.join(format!("site{id}_t{t}.png")))?;
                }
                concat_grid(&site.tiles)?.save_png(&tiles.join(format!("site{id}_grid.png")))?;
            }
            Ok(())
        })
    }

    /// Two-stage nightlight training on the center tiles of every site.
    pub fn train(&self) -> Result<StageOutcome> {
        let c = &self.cfg;
        let corpus = self.load_corpus()?;
        self.simple_stage("train", |dir| {
            let sites: Vec<usize> = (0..corpus.len()).collect();
            let samples = NightlightSamples::new(&corpus, &sites, c.corpus.noise_floor)?;
            let init = ConvNet::<f32>::standard(&c.arch(), c.seed_for("model.init"))?;
            let (net, history) = train_two_stage(init, &samples, &c.schedule())?;
            save_checkpoint(&net, &dir.join("model.ckpt"))?;
            write_loss_history(&history, &dir.join("loss_history.csv"))?;
            write_text(&dir.join("loss.svg"), &loss_svg(&history))?;
            write_json(
                &dir.join("summary.json"),
                &json!({
                    "initial_train_loss": history.initial_train_loss(),
                    "final_train_loss": history.final_train_loss(),
                    "epochs": history.records.len(),
                }),
            )
        })
    }

    /// Features for every site, ridge heads for both poolings and their
    /// out-of-fold evaluation.
    pub fn fit_head(&self) -> Result<StageOutcome> {
        let c = &self.cfg;
        let corpus = self.load_corpus()?;
        let net = self.load_network()?;
        self.simple_stage("fit-head", |dir| {
            let sites: Vec<usize> = (0..corpus.len()).collect();
            let (center, pooled) = extract_features(&net, &corpus, &sites, None)?;
            let mut table_i = Vec::new();
            let mut table_iii = Vec::new();
            for (pooling, rows) in [(Pooling::Center, &center), (Pooling::Grid3, &pooled)] {
                let p = pooling.name();
                write_feature_table(rows, &dir.join(format!("features_{p}.csv")))?;
                let report = fit_and_evaluate(rows, &c.head, c.seed_for("head.folds"), dir, p)?;
                table_i.push(vec![p.to_string(), format!("{:.3}", report.r2), format!("{:.3}", report.spearman)]);
                let mut row = vec![p.to_string()];
                row.extend(report.dichotomy_mcc.iter().map(|m| format!("{m:.3}")));
                table_iii.push(row);
            }
            write_text(&dir.join("table_i.md"), &md_table(&["features", "R²", "Spearman"], &table_i))?;
            write_text(
                &dir.join("table_iii.md"),
                &md_table(&["features", "1 vs 2-5", "1-2 vs 3-5", "1-3 vs 4-5", "1-4 vs 5"], &table_iii),
            )
        })
    }

    /// Train-phase × test-phase grid on the 3×3 features.
    pub fn eval_cross_period(&self) -> Result<StageOutcome> {
        let c = &self.cfg;
        let rows = self.load_features(Pooling::Grid3)?;
        self.simple_stage("eval-cross-period", |dir| {
            let phases: Vec<u32> = rows.iter().map(|r| r.phase).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let cells = cross_period_eval(&rows, &phases, &c.head.lambda_grid, c.head.folds, c.seed_for("head.folds"))?;
            write_json(&dir.join("cross_period.json"), &cells)?;
            let mut header = vec!["train \\ test".to_string()];
            header.extend(phases.iter().map(|p| format!("phase {p}")));
            let table: Vec<Vec<String>> = phases
                .iter()
                .map(|&tr| {
                    let mut row = vec![format!("phase {tr}")];
                    for &te in &phases {
                        let cell = cells.iter().find(|x| x.train_phase == tr && x.test_phase == te).expect("full grid");
                        row.push(format!("{:.3} ({:.3})", cell.report.r2, cell.report.spearman));
                    }
                    row
                })
                .collect();
            let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            write_text(&dir.join("table_ii.md"), &md_table(&header, &table))
        })
    }

    /// Runs one explanation method. `sites` overrides the attribution panel
    /// sites (corpus indices).
    pub fn explain(&self, method: ExplainMethod, sites: Option<&[usize]>) -> Result<StageOutcome> {
        let corpus = self.load_corpus()?;
        let net = self.load_network()?;
        if let Some(&bad) = sites.and_then(|s| s.iter().find(|&&i| i >= corpus.len())) {
            return Err(Error::invalid(format!("site {bad} outside corpus of {}", corpus.len())));
        }
        let (hash, rel) = self.explain_key(method, sites)?;
        self.run_stage(&format!("explain {}", method.name()), &hash, &rel, |dir| {
            explain::run(&self.cfg, method, &corpus, &net, sites, dir)
        })
    }

    /// Consolidated Markdown report over every other stage.
    pub fn report(&self) -> Result<StageOutcome> {
        let mut stages = Vec::new();
        for s in ["generate", "train", "fit-head", "eval-cross-period"] {
            stages.push((s.to_string(), self.stage_dir(s)?));
        }
        for m in ExplainMethod::ALL {
            stages.push((format!("explain {}", m.name()), self.explain_dir(m, None)?));
        }
        for (name, rel) in &stages {
            self.require(name, rel)?;
        }
        let (hash, rel) = self.key("report")?;
        let text = report::render(self, &stages)?;
        self.run_stage("report", &hash, &rel, |dir| write_text(&dir.join("report.md"), &text))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.generate()?;
        self.train()?;
        self.fit_head()?;
        self.eval_cross_period()?;
        for m in ExplainMethod::ALL {
            self.explain(m, None)?;
        }
        self.report()?;
        Ok(())
    }
}

fn fit_and_evaluate(rows: &[FeatureRow], head: &HeadConfig, seed: u64, dir: &Path, name: &str) -> Result<EvalReport> {
    let model = fit_ridge(rows, &head.lambda_grid, head.folds, seed)?;
    model.save(&dir.join(format!("ridge_{name}.json")))?;
    let pred = cross_validated_predictions(rows, &head.lambda_grid, head.folds, seed)?;
    let y: Vec<f64> = rows.iter().map(|r| r.wealth_index).collect();
    let report = EvalReport::compute(&y, &pred)?;
    write_json(&dir.join(format!("eval_{name}.json")), &report)?;
    report.write_confusion_csv(&dir.join(format!("confusion_{name}.csv")))?;
    let mut w = csv::Writer::from_path(dir.join(format!("predictions_{name}.csv")))?;
    w.write_record(["site_id", "wealth_index", "prediction"])?;
    for (r, p) in rows.iter().zip(&pred) {
        w.write_record([r.site_id.to_string(), format!("{:.6}", r.wealth_index), format!("{p:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(report)
}

/// Train and validation loss per epoch with a bar at the first fine-tuning
/// epoch.
fn loss_svg(history: &LossHistory) -> String {
    let train = history.records.iter().enumerate().map(|(i, r)| (i as f64, r.train_loss, 0.0)).collect();
    let val = history
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.val_loss.map(|v| (i as f64, v, 0.0)))
        .collect();
    let markers = history
        .records
        .iter()
        .position(|r| r.stage == Stage::Finetune)
        .map(|i| vec![(i as f64, "fine-tuning".to_string())])
        .unwrap_or_default();
    LineChart {
        title: "Nightlight training loss".into(),
        x_label: "epoch".into(),
        y_label: "MSE".into(),
        log_x: false,
        series: vec![
            Series {
                name: "train".into(),
                points: train,
                dashed: false,
            },
            Series {
                name: "validation".into(),
                points: val,
                dashed: true,
            },
        ],
        markers,
    }
    .to_svg()
}
