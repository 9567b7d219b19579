use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backtest::BaselineBand;
use crate::learners::LearnerKind;
use crate::market_data::DecisionLabel;

use super::config::{ClusterKey, Source};
use super::PipelineError;

/// Scores of a cell that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub apc: f64,
    pub baseline: BaselineBand,
    /// `confusion[true][predicted]` by label code.
    pub confusion: [[usize; 3]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub market_id: String,
    pub cluster: ClusterKey,
    pub source: Source,
    pub learner: LearnerKind,
    pub test_fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// `Err` carries the reason the cell was skipped.
    pub outcome: Result<CellScores, String>,
}

impl ReportRow {
    pub fn scores(&self) -> Option<&CellScores> {
        self.outcome.as_ref().ok()
    }

    pub fn apc(&self) -> Option<f64> {
        self.scores().map(|s| s.apc)
    }

    pub fn beats_p97_5(&self) -> Option<bool> {
        self.scores().map(|s| s.apc > s.baseline.p97_5)
    }

    pub fn skip_reason(&self) -> Option<&str> {
        self.outcome.as_ref().err().map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// Market ids in config order; each gets a figure file even without rows.
    pub markets: Vec<String>,
    /// Config echo, seeds, version, wall time, leakage modes and per-market
    /// preprocessing details.
    pub meta: serde_json::Value,
}

pub const REPORT_FILE: &str = "report.csv";
pub const META_FILE: &str = "report_meta.json";

fn report_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "market",
        "cluster",
        "source",
        "learner",
        "test_fraction",
        "seed",
        "n_train",
        "n_test",
        "apc",
        "baseline_mean",
        "baseline_p2_5",
        "baseline_p97_5",
        "beats_p97_5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in DecisionLabel::ALL {
        for p in DecisionLabel::ALL {
            h.push(format!("{t}_as_{p}"));
        }
    }
    h.push("skip_reason".into());
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_record(r: &ReportRow) -> Vec<String> {
    let s = r.scores();
    let mut rec = vec![
        r.market_id.clone(),
        r.cluster.to_string(),
        r.source.to_string(),
        r.learner.name().to_string(),
        r.test_fraction.to_string(),
        r.seed.to_string(),
        r.n_train.to_string(),
        r.n_test.to_string(),
        opt(s.map(|s| s.apc)),
        opt(s.map(|s| s.baseline.mean)),
        opt(s.map(|s| s.baseline.p2_5)),
        opt(s.map(|s| s.baseline.p97_5)),
        opt(r.beats_p97_5()),
    ];
    for t in 0..3 {
        for p in 0..3 {
            rec.push(opt(s.map(|s| s.confusion[t][p])));
        }
    }
    rec.push(r.skip_reason().unwrap_or_default().to_string());
    rec
}

/// `report.csv` contents: one line per row, header only when empty.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(report_header())?;
    for r in rows {
        wtr.write_record(report_record(r))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Plot data for one market: per (cluster, source, learner), the APC and
/// baseline band averaged over the test fractions that ran.
pub fn write_figure_csv<W: std::io::Write>(market: &str, rows: &[ReportRow], out: W) -> csv::Result<()> {
    type Key = (ClusterKey, Source, usize);
    let mut learner_order: Vec<LearnerKind> = Vec::new();
    let mut groups: BTreeMap<Key, (LearnerKind, Vec<&CellScores>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.market_id == market) {
        let li = match learner_order.iter().position(|&k| k == r.learner) {
            Some(i) => i,
            None => {
                learner_order.push(r.learner);
                learner_order.len() - 1
            }
        };
        let entry = groups
            .entry((r.cluster, r.source, li))
            .or_insert_with(|| (r.learner, Vec::new()));
        if let Some(s) = r.scores() {
            entry.1.push(s);
        }
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "cluster",
        "source",
        "learner",
        "apc",
        "baseline_mean",
        "baseline_p2_5",
        "baseline_p97_5",
    ])?;
    for ((cluster, source, _), (learner, scores)) in &groups {
        let avg = |f: &dyn Fn(&CellScores) -> f64| {
            (!scores.is_empty()).then(|| scores.iter().map(|s| f(s)).sum::<f64>() / scores.len() as f64)
        };
        wtr.write_record([
            cluster.to_string(),
            source.to_string(),
            learner.name().to_string(),
            opt(avg(&|s| s.apc)),
            opt(avg(&|s| s.baseline.mean)),
            opt(avg(&|s| s.baseline.p2_5)),
            opt(avg(&|s| s.baseline.p97_5)),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn figure_file_name(market: &str) -> String {
    format!("figure_{market}.csv")
}

/// Writes `report.csv`, `report_meta.json` and one `figure_<market>.csv`
/// per market into `out_dir`, creating it if needed. Returns the paths.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Output {
        path: path.display().to_string(),
        source: e,
    };
    let csv_io = |path: &Path, e: csv::Error| PipelineError::Output {
        path: path.display().to_string(),
        source: e.into(),
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut written = Vec::new();

    let path = out_dir.join(REPORT_FILE);
    let f = fs::File::create(&path).map_err(|e| io(&path, e))?;
    write_report_csv(&report.rows, f).map_err(|e| csv_io(&path, e))?;
    written.push(path);

    let path = out_dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(&report.meta).expect("metadata serialises");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    written.push(path);

    for m in &report.markets {
        let path = out_dir.join(figure_file_name(m));
        let f = fs::File::create(&path).map_err(|e| io(&path, e))?;
        write_figure_csv(m, &report.rows, f).map_err(|e| csv_io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
