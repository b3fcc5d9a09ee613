//! Sweep result tables and their files: one JSON document with everything,
//! one CSV per table and a plain-text summary.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{Coverage, Future, Past};
use crate::error::{Error, Result};
use crate::metrics::WerStats;

pub const RESULTS_JSON: &str = "results.json";
pub const WER_GRID_CSV: &str = "wer_grid.csv";
pub const LATENCY_CSV: &str = "latency.csv";
pub const RESCORE_CSV: &str = "rescore.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerCell {
    pub past: Past,
    pub future: Future,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub wer: f64,
    pub coverage: Coverage,
}

impl WerCell {
    pub fn new(past: Past, future: Future, s: &WerStats, coverage: Coverage) -> Self {
        Self {
            past,
            future,
            substitutions: s.substitutions,
            deletions: s.deletions,
            insertions: s.insertions,
            ref_len: s.ref_len,
            wer: s.wer(),
            coverage,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub past: Past,
    pub future: Future,
    pub wer: f64,
    /// Partial-result word latency pooled over all matched words.
    pub prwl_ms: Option<f64>,
    /// Final-hypothesis emission time minus word end, pooled likewise.
    pub mean_emission_delay_ms: Option<f64>,
    pub matched_words: usize,
    pub deleted_words: usize,
    pub early_words: usize,
    pub coverage: Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreCell {
    pub past: Past,
    pub first_pass: Future,
    pub second_pass: Future,
    pub utterances: usize,
    pub ref_len: usize,
    pub first_pass_errors: usize,
    pub rescored_errors: usize,
    pub first_pass_wer: f64,
    pub rescored_wer: f64,
    /// Utterances whose best hypothesis changed.
    pub changed_best: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    /// Mean batch loss over the final tenth of training.
    pub final_loss: Option<f64>,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub name: String,
    pub seed: u64,
    pub train: TrainSummary,
    pub wer_grid: Vec<WerCell>,
    pub latency: Vec<LatencyRow>,
    pub rescore: Vec<RescoreCell>,
    pub warnings: Vec<String>,
    pub checks: Vec<CheckResult>,
}

impl SweepResults {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn wer_at(&self, past: &Past, future: &Future) -> Option<f64> {
        self.wer_grid.iter().find(|c| c.past == *past && c.future == *future).map(|c| c.wer)
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("csv: {e}")))
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Invalid(format!("csv: {e}")))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn ms(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

pub fn summary(r: &SweepResults) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (seed {})", r.name, r.seed);
    match (r.train.first_loss, r.train.final_loss) {
        (Some(a), Some(b)) => {
            let _ = writeln!(s, "training: {} steps, loss {a:.3} -> {b:.3}", r.train.steps);
        }
        _ => {
            let _ = writeln!(s, "training: skipped (loaded checkpoint)");
        }
    }

    let mut futures: Vec<Future> = Vec::new();
    let mut pasts: Vec<Past> = Vec::new();
    for c in &r.wer_grid {
        if !futures.contains(&c.future) {
            futures.push(c.future);
        }
        if !pasts.contains(&c.past) {
            pasts.push(c.past);
        }
    }
    let _ = writeln!(s, "\nWER by look-back (rows) and look-ahead (columns)");
    let _ = write!(s, "{:<14}", "");
    for f in &futures {
        let _ = write!(s, "{:>14}", f.to_string());
    }
    let _ = writeln!(s);
    for p in &pasts {
        let _ = write!(s, "{:<14}", p.to_string());
        for f in &futures {
            let cell = r.wer_at(p, f).map_or_else(|| "-".into(), pct);
            let _ = write!(s, "{cell:>14}");
        }
        let _ = writeln!(s);
    }

    if !r.latency.is_empty() {
        let _ = writeln!(s, "\nlatency (streaming greedy decode)");
        let _ = writeln!(s, "{:<34}{:>10}{:>12}{:>14}{:>10}", "setting", "WER", "PRWL ms", "emission ms", "deleted");
        for l in &r.latency {
            let name = format!("past={} future={}", l.past, l.future);
            let _ = writeln!(
                s,
                "{name:<34}{:>10}{:>12}{:>14}{:>10}",
                pct(l.wer),
                ms(l.prwl_ms),
                ms(l.mean_emission_delay_ms),
                l.deleted_words
            );
        }
    }

    if !r.rescore.is_empty() {
        let _ = writeln!(s, "\nsecond-pass rescoring of n-best lists");
        let _ = writeln!(s, "{:<16}{:<16}{:>12}{:>12}{:>10}", "first pass", "second pass", "first WER", "rescored", "changed");
        for c in &r.rescore {
            let _ = writeln!(
                s,
                "{:<16}{:<16}{:>12}{:>12}{:>10}",
                c.first_pass.to_string(),
                c.second_pass.to_string(),
                pct(c.first_pass_wer),
                pct(c.rescored_wer),
                c.changed_best
            );
        }
    }

    for w in &r.warnings {
        let _ = writeln!(s, "\nwarning: {w}");
    }
    let _ = writeln!(s, "\nself-checks");
    for c in &r.checks {
        let _ = writeln!(s, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

pub fn write_results(dir: &Path, r: &SweepResults) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESULTS_JSON), serde_json::to_string_pretty(r)?)?;
    std::fs::write(dir.join(WER_GRID_CSV), to_csv(&r.wer_grid)?)?;
    std::fs::write(dir.join(LATENCY_CSV), to_csv(&r.latency)?)?;
    std::fs::write(dir.join(RESCORE_CSV), to_csv(&r.rescore)?)?;
    std::fs::write(dir.join(SUMMARY_TXT), summary(r))?;
    Ok(())
}

/// Reads the JSON document and checks that every CSV table parses back to
/// the same rows.
pub fn read_results(dir: &Path) -> Result<SweepResults> {
    let r: SweepResults = serde_json::from_str(&std::fs::read_to_string(dir.join(RESULTS_JSON))?)?;
    let grid: Vec<WerCell> = from_csv(&std::fs::read_to_string(dir.join(WER_GRID_CSV))?)?;
    let latency: Vec<LatencyRow> = from_csv(&std::fs::read_to_string(dir.join(LATENCY_CSV))?)?;
    let rescore: Vec<RescoreCell> = from_csv(&std::fs::read_to_string(dir.join(RESCORE_CSV))?)?;
    if grid != r.wer_grid || latency != r.latency || rescore != r.rescore {
        return Err(Error::Invalid(format!("CSV tables in {} disagree with {RESULTS_JSON}", dir.display())));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::masking::{FuturePolicy, PastPolicy};

    fn sample(x: f64, n: usize) -> SweepResults {
        let p = Past(PastPolicy::Unlimited);
        let f = Future::chunk(4);
        let stats = WerStats { substitutions: n, deletions: 1, insertions: 0, ref_len: 40 };
        SweepResults {
            name: "t".into(),
            seed: 3,
            train: TrainSummary { steps: 10, first_loss: Some(9.0 + x), final_loss: Some(x), trained: true },
            wer_grid: vec![
                WerCell::new(p, f, &stats, Coverage::Trained),
                WerCell::new(Past(PastPolicy::Fixed(12)), Future::chunk(1_000_000), &stats, Coverage::Interpolated),
            ],
            latency: vec![
                LatencyRow {
                    past: p,
                    future: Future(FuturePolicy::Fixed(2), None),
                    wer: x / 7.0,
                    prwl_ms: Some(x * 13.0 - 40.0),
                    mean_emission_delay_ms: None,
                    matched_words: n,
                    deleted_words: 2,
                    early_words: 1,
                    coverage: Coverage::Extrapolated,
                },
            ],
            rescore: vec![RescoreCell {
                past: p,
                first_pass: Future::chunk(1),
                second_pass: f,
                utterances: 5,
                ref_len: 20,
                first_pass_errors: n,
                rescored_errors: n / 2,
                first_pass_wer: n as f64 / 20.0,
                rescored_wer: (n / 2) as f64 / 20.0,
                changed_best: 1,
            }],
            warnings: vec!["w, with \"quotes\"".into()],
            checks: vec![CheckResult { name: "c".into(), passed: true, detail: "fine".into() }],
        }
    }

    proptest! {
        #[test]
        fn result_files_round_trip(x in -1e6f64..1e6, n in 0usize..50) {
            let r = sample(x, n);
            let dir = tempfile::tempdir().unwrap();
            write_results(dir.path(), &r).unwrap();
            prop_assert_eq!(read_results(dir.path()).unwrap(), r.clone());
            prop_assert_eq!(from_csv::<WerCell>(&to_csv(&r.wer_grid).unwrap()).unwrap(), r.wer_grid);
        }
    }

    #[test]
    fn tampered_csv_is_detected() {
        let r = sample(0.25, 3);
        let dir = tempfile::tempdir().unwrap();
        write_results(dir.path(), &r).unwrap();
        let path = dir.path().join(WER_GRID_CSV);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen(",40,", ",41,", 1)).unwrap();
        assert!(read_results(dir.path()).is_err());
    }

    #[test]
    fn summary_lays_out_the_grid() {
        let s = summary(&sample(0.5, 4));
        assert!(s.contains("chunk:240ms"));
        assert!(s.contains("fixed:720ms"));
        assert!(s.contains("12.50%"));
        assert!(s.contains("[ok] c"));
    }
}
