use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::RunRecord;
use crate::checkpoint::write_atomic;
use crate::error::Result;
use crate::model::Ablation;

/// `(run name, record)` for every `<dir>/<run>/run.json`, sorted by name.
pub fn collect_runs(dir: &Path) -> Result<Vec<(String, RunRecord)>> {
    let mut runs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let json = path.join("run.json");
        if json.is_file() {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((name, RunRecord::load(&json)?));
        }
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(runs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| format!("{v:.4}"))
}

/// One row per (run, dataset) with the run's regime and prompt mode.
pub fn results_table(runs: &[(String, RunRecord)]) -> String {
    let mut out = String::from("run,regime,prompt,ablation,dataset,dice,hd_variant,hd,count\n");
    for (name, r) in runs {
        for row in &r.final_report.rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{:.4},{},{},{}",
                r.config.regime.as_str(),
                r.config.prompt_mode.as_str(),
                r.config.ablation.label(),
                row.dataset,
                row.dice,
                r.final_report.hd_variant.label(),
                fmt_opt(row.hd),
                row.count
            );
        }
    }
    out
}

/// Dataset-mean Dice/HD per run, ordered by the canonical ablation rows.
pub fn ablation_table(runs: &[(String, RunRecord)]) -> String {
    let mut out = String::from("ablation,cnn,cba,fadapt,padapt,run,dice,hd\n");
    let rows = Ablation::table_rows();
    let rank = |a: &Ablation| rows.iter().position(|r| r == a).unwrap_or(rows.len());
    let mut sorted: Vec<&(String, RunRecord)> = runs.iter().collect();
    sorted.sort_by_key(|(n, r)| (rank(&r.config.ablation), n.clone()));
    for (name, r) in sorted {
        let a = r.config.ablation;
        let n = r.final_report.rows.len().max(1) as f64;
        let dice = r.final_report.rows.iter().map(|x| x.dice).sum::<f64>() / n;
        let hds: Vec<f64> = r.final_report.rows.iter().filter_map(|x| x.hd).collect();
        let hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{name},{dice:.4},{}",
            a.label(),
            a.cnn_branch as u8,
            a.cba as u8,
            a.feature_adapters as u8,
            a.position_adapter as u8,
            fmt_opt(hd)
        );
    }
    out
}

/// Writes `results.csv` and `ablation.csv` into `dir`.
pub fn write_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = collect_runs(dir)?;
    let results = dir.join("results.csv");
    let ablation = dir.join("ablation.csv");
    write_atomic(&results, results_table(&runs).as_bytes())?;
    write_atomic(&ablation, ablation_table(&runs).as_bytes())?;
    Ok(vec![results, ablation])
}
