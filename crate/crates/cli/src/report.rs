use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cwcl::trainer::{RunMetrics, Summary};
use plotters::prelude::*;

use crate::CliError;

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub noise_kind: String,
    pub noise_rate: f64,
    pub arm: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    /// Distinct group hashes seen (more than one means mixed settings).
    pub group_hashes: Vec<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups summaries by (noise kind, rate, arm) in a stable order.
pub fn group_runs(summaries: &[Summary]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<&Summary>> = BTreeMap::new();
    for s in summaries {
        groups
            .entry((s.noise_kind.clone(), format!("{:.6}", s.noise_rate), s.arm.clone()))
            .or_default()
            .push(s);
    }
    groups
        .into_values()
        .map(|members| {
            let accs: Vec<f64> = members.iter().map(|s| s.final_test_acc_ema).collect();
            let (mean, std) = mean_std(&accs);
            let mut hashes: Vec<String> = members.iter().map(|s| s.group_hash.clone()).collect();
            hashes.sort();
            hashes.dedup();
            ReportRow {
                noise_kind: members[0].noise_kind.clone(),
                noise_rate: members[0].noise_rate,
                arm: members[0].arm.clone(),
                runs: members.len(),
                mean,
                std,
                group_hashes: hashes,
            }
        })
        .collect()
}

fn render(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>6} {:<10} {:>4}  {:>16}", "noise", "rate", "arm", "runs", "test acc (%)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>6.2} {:<10} {:>4}  {:>7.2} ± {:<6.2}{}",
            r.noise_kind,
            r.noise_rate,
            r.arm,
            r.runs,
            100.0 * r.mean,
            100.0 * r.std,
            if r.group_hashes.len() > 1 { "  (mixed configs)" } else { "" }
        );
    }
    out
}

fn plot_curves(runs: &[(PathBuf, Summary, RunMetrics)], path: &Path) -> Result<(), CliError> {
    let max_epoch = runs
        .iter()
        .filter_map(|(_, _, m)| m.last().map(|r| r.epoch))
        .max()
        .unwrap_or(0)
        + 1;
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    let draw = |e: &dyn std::fmt::Display| CliError::runtime(format!("plotting {}: {e}", path.display()));
    root.fill(&WHITE).map_err(|e| draw(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Test accuracy (EMA) per epoch", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0usize..max_epoch, 0f64..1f64)
        .map_err(|e| draw(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("accuracy")
        .draw()
        .map_err(|e| draw(&e))?;
    for (i, (dir, summary, metrics)) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let label = format!(
            "{} seed {} ({})",
            summary.arm,
            summary.seed,
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        );
        chart
            .draw_series(LineSeries::new(metrics.records.iter().map(|r| (r.epoch, r.test_acc_ema)), color.stroke_width(2)))
            .map_err(|e| draw(&e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw(&e))?;
    root.present().map_err(|e| draw(&e))
}

/// Builds the table (also written to `out/report.txt`) and `out/curves.svg`
/// from finished runs. Reads only run outputs; never trains.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::config("report needs at least one run directory"));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let summary = Summary::read(&dir.join("summary.json"))?;
        let metrics_path = dir.join("metrics.csv");
        let metrics = if metrics_path.exists() {
            RunMetrics::read_csv(&metrics_path)?
        } else {
            RunMetrics::default()
        };
        runs.push((dir.clone(), summary, metrics));
    }
    let summaries: Vec<Summary> = runs.iter().map(|(_, s, _)| s.clone()).collect();
    let rows = group_runs(&summaries);
    for r in rows.iter().filter(|r| r.group_hashes.len() > 1) {
        log::warn!(
            "group {} {:.2} {} mixes {} configurations: {}",
            r.noise_kind,
            r.noise_rate,
            r.arm,
            r.group_hashes.len(),
            r.group_hashes.join(", ")
        );
    }
    let table = render(&rows);
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("creating {}: {e}", out.display())))?;
    let tpath = out.join("report.txt");
    std::fs::write(&tpath, &table).map_err(|e| CliError::runtime(format!("writing {}: {e}", tpath.display())))?;
    plot_curves(&runs, &out.join("curves.svg"))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(arm: &str, seed: u64, acc: f64, group: &str) -> Summary {
        Summary {
            config_hash: format!("{group}-{seed}"),
            group_hash: group.into(),
            seed,
            noise_kind: "symmetric".into(),
            noise_rate: 0.4,
            arm: arm.into(),
            epochs_completed: 3,
            final_test_acc_ema: acc,
            final_test_acc_live: acc,
            best_epoch: 2,
            best_test_acc_ema: acc,
            corpus_noise_rate: 0.4,
            final_selection_noise_rate: None,
            code_version: "test".into(),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let rows = group_runs(&[summary("ce", 0, 0.5, "g"), summary("ce", 1, 0.7, "g"), summary("ce", 2, 0.6, "g")]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.6).abs() < 1e-12);
        assert!((rows[0].std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_have_zero_std_and_mixed_groups_are_flagged() {
        let rows = group_runs(&[summary("stage1", 0, 0.8, "a"), summary("stage1", 0, 0.8, "a")]);
        assert_eq!(rows[0].std, 0.0);
        let rows = group_runs(&[summary("stage1", 0, 0.8, "a"), summary("stage1", 1, 0.8, "b")]);
        assert_eq!(rows[0].group_hashes.len(), 2);
        assert!(render(&rows).contains("mixed"));
    }
}
