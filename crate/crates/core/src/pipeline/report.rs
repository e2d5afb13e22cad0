use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::head::Pooling;
use crate::perturb::{mean, SweepResult};

use super::{md_table, read_json, read_text, ExplainMethod, Pipeline};

fn link(rel: &Path) -> String {
    format!("../../{}", rel.to_string_lossy().replace('\\', "/"))
}

fn sweep_table(res: &SweepResult) -> String {
    let mut rows = Vec::new();
    let mut params: Vec<f64> = res.points.iter().map(|p| p.param).collect();
    params.dedup();
    let cell = |pooling: Pooling, param: f64| {
        res.curve(pooling)
            .into_iter()
            .find(|p| p.param == param)
            .map(|p| format!("{:.3}", mean(&p.r2)))
            .unwrap_or_default()
    };
    rows.push(vec![
        "baseline".to_string(),
        format!("{:.3}", res.baseline_r2(Pooling::Center).unwrap_or(f64::NAN)),
        format!("{:.3}", res.baseline_r2(Pooling::Grid3).unwrap_or(f64::NAN)),
    ]);
    for p in params {
        rows.push(vec![format!("{p}"), cell(Pooling::Center, p), cell(Pooling::Grid3, p)]);
    }
    md_table(&[res.param_name.as_str(), "mean R² 1x1", "mean R² 3x3"], &rows)
}

/// Markdown for the report stage. `stages` lists `(name, dir)` of every
/// input stage relative to the output directory.
pub(super) fn render(p: &Pipeline, stages: &[(String, PathBuf)]) -> Result<String> {
    let cfg = p.config();
    let out = &cfg.out_dir;
    let dir_of = |name: &str| -> PathBuf {
        stages.iter().find(|s| s.0 == name).map(|s| s.1.clone()).expect("listed stage")
    };
    let explain = |m: ExplainMethod| dir_of(&format!("explain {}", m.name()));
    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    let _ = writeln!(
        md,
        "Seed {}, {} sites, {} features per tile, {} ridge folds.\n",
        cfg.seed, cfg.corpus.n_sites, cfg.model.feature_dim, cfg.head.folds
    );

    let train = dir_of("train");
    let summary: serde_json::Value = read_json(&out.join(&train).join("summary.json"))?;
    let _ = writeln!(md, "## Nightlight training\n");
    let _ = writeln!(md, "![loss]({})\n", link(&train.join("loss.svg")));
    let _ = writeln!(
        md,
        "Train loss {:.4} at the first epoch and {:.4} at the last. The bar marks the start of fine-tuning.\n",
        summary["initial_train_loss"].as_f64().unwrap_or(f64::NAN),
        summary["final_train_loss"].as_f64().unwrap_or(f64::NAN)
    );

    let head = dir_of("fit-head");
    let _ = writeln!(md, "## Wealth estimation\n");
    md.push_str(&read_text(&out.join(&head).join("table_i.md"))?);
    let _ = writeln!(md, "\nQuintile dichotomy MCC:\n");
    md.push_str(&read_text(&out.join(&head).join("table_iii.md"))?);
    let _ = writeln!(
        md,
        "\nConfusion matrices: [1x1]({}), [3x3]({}).\n",
        link(&head.join("confusion_1x1.csv")),
        link(&head.join("confusion_3x3.csv"))
    );

    let cross = dir_of("eval-cross-period");
    let _ = writeln!(md, "## Cross-period transfer\n\nR² (Spearman), 3x3 features.\n");
    md.push_str(&read_text(&out.join(&cross).join("table_ii.md"))?);

    let shuffle = explain(ExplainMethod::Shuffle);
    let res: SweepResult = read_json(&out.join(&shuffle).join("shuffle.json"))?;
    let _ = writeln!(md, "\n## Grid shuffling\n\n![shuffle]({})\n", link(&shuffle.join("shuffle.svg")));
    md.push_str(&sweep_table(&res));

    let filter = explain(ExplainMethod::Filter);
    let _ = writeln!(md, "\n## Frequency filters\n");
    for kind in &cfg.explain.filter_kinds {
        let stem = format!("filter_{}", kind.name());
        let res: SweepResult = read_json(&out.join(&filter).join(format!("{stem}.json")))?;
        let _ = writeln!(md, "### {}\n\n![{stem}]({})\n", res.family, link(&filter.join(format!("{stem}.svg"))));
        md.push_str(&sweep_table(&res));
        md.push('\n');
    }

    let color = explain(ExplainMethod::Color);
    let _ = writeln!(md, "## Colour ablation\n");
    md.push_str(&read_text(&out.join(&color).join("color.md"))?);

    let _ = writeln!(md, "\n## Attribution\n");
    let mut corr_rows = Vec::new();
    for m in [
        ExplainMethod::Occlusion,
        ExplainMethod::GradCam,
        ExplainMethod::GuidedBp,
        ExplainMethod::GuidedGradCam,
    ] {
        let d = explain(m);
        let _ = writeln!(md, "### {}\n\n![{}]({})\n", m.name(), m.name(), link(&d.join("figure.svg")));
        let c: serde_json::Value = read_json(&out.join(&d).join("correlation.json"))?;
        corr_rows.push(vec![
            m.name().to_string(),
            c["sites"].to_string(),
            format!("{:.3}", c["pearson"].as_f64().unwrap_or(f64::NAN)),
        ]);
    }
    let _ = writeln!(md, "Correlation between summed attribution and network output:\n");
    md.push_str(&md_table(&["method", "sites", "Pearson r"], &corr_rows));

    let viz = explain(ExplainMethod::Featviz);
    let _ = writeln!(md, "\n## Feature visualisation\n\n![trajectory]({})\n", link(&viz.join("trajectory.svg")));
    let runs: Vec<serde_json::Value> = read_json(&out.join(&viz).join("summary.json"))?;
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let k = r["run"].as_u64().unwrap_or(0);
            vec![
                format!("[run {k}]({})", link(&viz.join(format!("seed{k}.png")))),
                format!("{:.4}", r["initial"].as_f64().unwrap_or(f64::NAN)),
                format!("{:.4}", r["final"].as_f64().unwrap_or(f64::NAN)),
            ]
        })
        .collect();
    md.push_str(&md_table(&["run", "initial output", "final output"], &rows));

    let _ = writeln!(md, "\n## Artifacts\n");
    for (name, rel) in stages {
        let stamp = p.stamp(rel)?;
        let _ = writeln!(md, "- {name} (`{}`)", stamp.hash);
        for f in &stamp.files {
            let _ = writeln!(md, "  - [{f}]({})", link(&rel.join(f)));
        }
    }
    Ok(md)
}
