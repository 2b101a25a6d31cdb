use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::model::ModelParams;
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub hm: Option<f64>,
    pub baseline_base_accuracy: Option<f64>,
    pub baseline_novel_accuracy: Option<f64>,
    pub baseline_hm: Option<f64>,
    /// Share of bank records now classified correctly.
    pub correction_rate: Option<f64>,
    pub pair_confusion_before: Option<f64>,
    pub pair_confusion_after: Option<f64>,
    pub bank_records: usize,
    pub training_samples: usize,
    pub samples_with_reps: usize,
    pub inference_alpha: f64,
    pub loss_curve: Vec<f64>,
    pub category_names: Vec<String>,
    /// Test counts `[true][predicted]` for the frozen baseline.
    pub confusion_before: Vec<Vec<usize>>,
    pub confusion_after: Vec<Vec<usize>>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub bank_checksum_before: String,
    pub bank_checksum_after: String,
    pub warnings: Vec<String>,
    pub config: TrainConfig,
}

impl Report {
    /// True when the frozen encoder and the bank were left untouched.
    pub fn inputs_unchanged(&self) -> bool {
        self.encoder_checksum_before == self.encoder_checksum_after && self.bank_checksum_before == self.bank_checksum_after
    }

    pub fn summary(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "seed {}: base {} -> {}, novel {} -> {}, HM {} -> {}, correction {}, pair confusion {} -> {}",
            self.seed,
            pct(self.baseline_base_accuracy),
            pct(self.base_accuracy),
            pct(self.baseline_novel_accuracy),
            pct(self.novel_accuracy),
            pct(self.baseline_hm),
            pct(self.hm),
            pct(self.correction_rate),
            pct(self.pair_confusion_before),
            pct(self.pair_confusion_after),
        )
    }
}

/// What a run directory was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub world: Option<String>,
    pub bank: Option<String>,
    pub train: TrainConfig,
}

/// Header row of names, then one row per true category.
pub fn heatmap_csv(matrix: &[Vec<usize>], names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (row, n) in matrix.iter().zip(names) {
        out.push_str(n);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_heatmap_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
    let bad = |m: String| TrainError::Contract(format!("heatmap csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut matrix = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let name = cells.next().unwrap_or_default();
        if names.get(i).map(String::as_str) != Some(name) {
            return Err(bad(format!("row {i} is labelled {name:?}")));
        }
        let row = cells
            .map(|c| c.parse::<usize>().map_err(|e| bad(format!("row {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != names.len() {
            return Err(bad(format!("row {i} has {} cells", row.len())));
        }
        matrix.push(row);
    }
    if matrix.len() != names.len() {
        return Err(bad(format!("{} rows for {} columns", matrix.len(), names.len())));
    }
    Ok((names, matrix))
}

/// Binary 8-bit greyscale image, one pixel per cell, scaled so the largest
/// count is 255.
pub fn heatmap_pgm(matrix: &[Vec<usize>]) -> Vec<u8> {
    let n = matrix.len();
    let max = matrix.iter().flatten().copied().max().unwrap_or(0);
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    for row in matrix {
        for &v in row {
            out.push(if max == 0 { 0 } else { (v as f64 * 255.0 / max as f64).round() as u8 });
        }
    }
    out
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|source| TrainError::Io { path, source })
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn write_heatmap(stem: &Path, matrix: &[Vec<usize>], names: &[String]) -> Result<()> {
    if matrix.len() != names.len() || matrix.iter().any(|r| r.len() != names.len()) {
        return Err(TrainError::Contract(format!(
            "heatmap needs a square matrix matching {} names",
            names.len()
        )));
    }
    let with_ext = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    write(with_ext(".csv"), heatmap_csv(matrix, names).as_bytes())?;
    write(with_ext(".pgm"), &heatmap_pgm(matrix))
}

/// config.json, report.json, loss_curve.csv, heatmap_{before,after}.{csv,pgm}
/// and checkpoint.bin.
pub fn write_run_dir(dir: &Path, run: &RunConfig, model: &ModelParams, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(dir.join("config.json"), serde_json::to_string_pretty(run)?.as_bytes())?;
    write(dir.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{},{l}\n", i + 1));
    }
    write(dir.join("loss_curve.csv"), curve.as_bytes())?;
    write_heatmap(&dir.join("heatmap_before"), &report.confusion_before, &report.category_names)?;
    write_heatmap(&dir.join("heatmap_after"), &report.confusion_after, &report.category_names)?;
    model.save(&dir.join("checkpoint.bin"))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
