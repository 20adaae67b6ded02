//! Markdown tables and SVG plots over a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hprobe::ablation::{AblationKind, LogitSummary};
use hprobe::probes::{Bucket, GridReport};
use hprobe::store;
use hprobe::{Error, Result};
use plotters::prelude::*;

use crate::commands::{AblationRecord, AccuracyEntry, EvalRecord, SimilarityRecord};

#[derive(Default)]
struct LayerResults {
    layer: u32,
    eval: Vec<EvalRecord>,
    similarity: Vec<SimilarityRecord>,
    ablation: Option<AblationRecord>,
    grid: Option<GridReport>,
}

fn read_opt<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        store::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn collect(run_dir: &Path) -> Result<Vec<LayerResults>> {
    let mut layers: Vec<u32> = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str()?.parse().ok())
        .collect();
    layers.sort_unstable();
    layers
        .into_iter()
        .map(|l| {
            let dir = run_dir.join(l.to_string());
            Ok(LayerResults {
                layer: l,
                eval: read_opt(&dir.join("eval.json"))?.unwrap_or_default(),
                similarity: read_opt(&dir.join("similarity.json"))?.unwrap_or_default(),
                ablation: read_opt(&dir.join("ablation.json"))?,
                grid: read_opt(&dir.join("grid.json"))?,
            })
        })
        .collect()
}

fn f3(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot: {e}"))
}

/// Writes `report.md` and its plots into `out`; returns the written paths.
pub fn render(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results = collect(run_dir)?;
    let mut md = String::new();
    let mut written = Vec::new();
    let _ = writeln!(md, "# Probe report: {}\n", run_dir.display());

    if results.iter().any(|r| !r.eval.is_empty()) {
        md.push_str("## Probe evaluation\n\n");
        md.push_str("| layer | p | bucket | pairs | tokens | distance pearson | distance mse | depth pearson | recovery |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &results {
            for e in &r.eval {
                for b in &e.report.buckets {
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                        e.layer,
                        e.p,
                        b.bucket.name(),
                        b.n_pairs,
                        b.n_tokens,
                        f3(b.distance.map(|m| m.pearson)),
                        f3(b.distance.map(|m| m.mse)),
                        f3(b.depth.map(|m| m.pearson)),
                        f3(e.recovery)
                    );
                }
            }
        }
        let path = out.join("layerwise.svg");
        layerwise_plot(&results, &path)?;
        written.push(path);
        md.push_str("\n![layerwise pearson](layerwise.svg)\n\n");
    }

    if results.iter().any(|r| !r.similarity.is_empty()) {
        md.push_str("## Cross-split stability\n\n");
        md.push_str("| layer | p | folds | B similarity | null | depth cosine | null |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for r in &results {
            for s in &r.similarity {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.3} | {:.3} ± {:.3} | {:.3} | {:.3} ± {:.3} |",
                    s.layer,
                    s.p,
                    s.report.folds,
                    s.report.mean_b_similarity,
                    s.null_b.mean,
                    s.null_b.sd,
                    s.report.mean_depth_cosine,
                    s.null_depth.mean,
                    s.null_depth.sd
                );
            }
            if let Some(s) = r.similarity.first() {
                let name = format!("similarity-{}.svg", r.layer);
                let path = out.join(&name);
                heatmap(&s.report.b_similarity, &format!("B span similarity, layer {}", r.layer), &path)?;
                written.push(path);
                let _ = writeln!(md, "\n![similarity layer {}]({name})\n", r.layer);
            }
        }
        md.push('\n');
    }

    if results.iter().any(|r| r.ablation.as_ref().is_some_and(|a| a.causal.is_some())) {
        md.push_str("## Ablation (test_exact pearson after re-fitting)\n\n");
        md.push_str("| layer | rank | kind | distance pearson | depth pearson |\n|---|---|---|---|---|\n");
        for r in &results {
            let Some(a) = &r.ablation else { continue };
            let Some(c) = &a.causal else { continue };
            for (kind, p) in &c.pearson {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.3} | {} |",
                    a.layer,
                    c.rank,
                    kind,
                    p,
                    f3(c.depth_pearson.get(kind).copied())
                );
            }
        }
        let path = out.join("ablation.svg");
        ablation_plot(&results, &path)?;
        written.push(path);
        md.push_str("\n![ablation](ablation.svg)\n\n");
    }

    if results.iter().any(|r| r.grid.is_some()) {
        md.push_str("## Grid search (best cell per p)\n\n");
        md.push_str("| layer | p | lr | steps | train mse | test mse | test pearson |\n|---|---|---|---|---|---|---|\n");
        for r in &results {
            let Some(g) = &r.grid else { continue };
            for c in g.best_per_p() {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {:.4} | {:.4} | {:.3} |",
                    g.layer, c.p, c.lr, c.steps, c.train_mse, c.test_mse, c.test_pearson
                );
            }
            let name = format!("grid-{}.svg", r.layer);
            let path = out.join(&name);
            grid_plot(g, &path)?;
            written.push(path);
            let _ = writeln!(md, "\n![grid layer {}]({name})\n", r.layer);
        }
    }

    if let Some(acc) = read_opt::<Vec<AccuracyEntry>>(&run_dir.join("accuracy.json"))? {
        md.push_str("## Accuracy after intervention\n\n");
        md.push_str("| kind | n | exact before | exact after | partial before | partial after | retention | rescue |\n");
        md.push_str("|---|---|---|---|---|---|---|---|\n");
        for e in &acc {
            let r = &e.report;
            let _ = writeln!(
                md,
                "| {} | {} | {:.2}% | {:.2}% | {:.3} | {:.3} | {:.2}% | {} |",
                e.kind,
                r.n,
                100.0 * r.exact_before,
                100.0 * r.exact_after,
                r.partial_before,
                r.partial_after,
                100.0 * r.exact_retention,
                r.inexact_rescue.map_or("n/a".into(), |x| format!("{:.2}%", 100.0 * x))
            );
        }
        md.push('\n');
    }

    if let Some(logit) = read_opt::<LogitSummary>(&run_dir.join("logit.json"))? {
        md.push_str("## Logit shifts\n\n| layer | kind | n | mean | 95% CI |\n|---|---|---|---|---|\n");
        for row in &logit.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | [{:.4}, {:.4}] |",
                row.layer, row.kind, row.n, row.mean, row.ci_low, row.ci_high
            );
        }
        md.push('\n');
    }

    let md_path = out.join("report.md");
    store::write_atomic(&md_path, md.as_bytes())?;
    written.push(md_path);
    Ok(written)
}

fn layerwise_plot(results: &[LayerResults], path: &Path) -> Result<()> {
    let series = |f: &dyn Fn(&EvalRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        results
            .iter()
            .filter_map(|r| r.eval.first().and_then(|e| f(e).map(|v| (r.layer as f64, v))))
            .collect()
    };
    let dist = series(&|e| e.report.bucket(Bucket::TestExact).distance.map(|m| m.pearson));
    let depth = series(&|e| e.report.bucket(Bucket::TestExact).depth.map(|m| m.pearson));
    let shuffled = series(&|e| e.report.bucket(Bucket::Shuffled).distance.map(|m| m.pearson));
    let xs: Vec<f64> = dist.iter().chain(&depth).map(|p| p.0).collect();
    let (x0, x1) = span(&xs);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("test_exact pearson by layer", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(x0..x1, -0.2f64..1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("layer")
        .y_desc("pearson")
        .draw()
        .map_err(plot_err)?;
    for (data, color, label) in [
        (dist, BLUE, "distance"),
        (depth, RED, "depth"),
        (shuffled, BLACK, "shuffled"),
    ] {
        chart
            .draw_series(LineSeries::new(data, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn span(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn heatmap(m: &[Vec<f64>], title: &str, path: &Path) -> Result<()> {
    let n = m.len();
    let root = SVGBackend::new(path, (420, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(30)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(plot_err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(plot_err)?;
    chart
        .draw_series(m.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &v)| {
                let t = v.clamp(0.0, 1.0);
                let c = RGBColor((255.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8, 255);
                Rectangle::new([(j, i), (j + 1, i + 1)], c.filled())
            })
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn ablation_plot(results: &[LayerResults], path: &Path) -> Result<()> {
    let rows: Vec<(u32, AblationKind, f64)> = results
        .iter()
        .filter_map(|r| r.ablation.as_ref()?.causal.as_ref().map(|c| (r.layer, c)))
        .flat_map(|(l, c)| c.pearson.iter().map(move |(k, v)| (l, *k, *v)))
        .collect();
    let n = rows.len().max(1);
    let root = SVGBackend::new(path, (720, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("test_exact distance pearson after ablation", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(44)
        .build_cartesian_2d(0..n, -0.2f64..1.05)
        .map_err(plot_err)?;
    let labels: Vec<String> = rows.iter().map(|(l, k, _)| format!("L{l} {k}")).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|i| labels.get(*i).cloned().unwrap_or_default())
        .y_desc("pearson")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, (_, k, v))| {
            let color = match k {
                AblationKind::Probe => RED,
                AblationKind::Random => BLUE,
                _ => RGBColor(120, 120, 120),
            };
            Rectangle::new([(i, 0.0), (i + 1, *v)], color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn grid_plot(g: &GridReport, path: &Path) -> Result<()> {
    let steps: Vec<f64> = g.cells.iter().map(|c| c.steps as f64).collect();
    let (x0, x1) = span(&steps);
    let ymax = g.cells.iter().map(|c| c.test_mse).fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("grid search, layer {}", g.layer), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, 0.0..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("steps")
        .y_desc("test mse")
        .draw()
        .map_err(plot_err)?;
    let mut combos: Vec<(usize, f64)> = g.cells.iter().map(|c| (c.p, c.lr)).collect();
    combos.dedup();
    for (i, (p, lr)) in combos.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = g
            .cells
            .iter()
            .filter(|c| c.p == p && c.lr == lr)
            .map(|c| (c.steps as f64, c.test_mse))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("p={p} lr={lr}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
