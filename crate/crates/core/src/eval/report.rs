//! JSON and CSV emission of evaluation and benchmark reports.
//!
//! An evaluation report directory holds `eval.json`, `eval.csv` (one row per
//! method and metric) and `length_buckets.csv`. A benchmark directory holds
//! `bench.json`, `bench.csv` and `iterations.csv`; the last one carries no
//! timings and is identical between runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::bench::BenchReport;
use super::{EditCounts, ErrorBreakdown, EvalReport, LengthBucket};

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    method: String,
    metric: String,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BucketRow {
    length_bucket: String,
    wer: f64,
    sub: f64,
    del: f64,
    ins: f64,
    lo: usize,
    hi: usize,
    utterances: usize,
    ref_tokens: usize,
    sub_count: usize,
    del_count: usize,
    ins_count: usize,
    method: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IterationRow {
    method: String,
    iter_mean: f64,
    iter_min: usize,
    iter_max: usize,
    iter_total: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(path: &Path, rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.into_inner().map_err(|e| Error::io(path, e.into_error()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    write_file(path, (text + "\n").as_bytes())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::io(path, e.into()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn eval_metrics(r: &EvalReport) -> Vec<MetricRow> {
    let o = &r.overall;
    [
        ("utterances", o.utterances as f64),
        ("ref_tokens", o.ref_tokens as f64),
        ("sub_count", o.counts.sub as f64),
        ("del_count", o.counts.del as f64),
        ("ins_count", o.counts.ins as f64),
        ("wer", o.wer),
        ("sub", o.sub),
        ("del", o.del),
        ("ins", o.ins),
        ("bucket_width", r.bucket_width as f64),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow {
        method: r.method.clone(),
        metric: metric.into(),
        value,
    })
    .collect()
}

pub fn emit_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("eval.json"), report)?;
    let path = dir.join("eval.csv");
    write_file(&path, &csv_bytes(&path, &eval_metrics(report))?)?;
    let rows: Vec<BucketRow> = report
        .buckets
        .iter()
        .map(|b| BucketRow {
            length_bucket: b.label(),
            wer: b.errors.wer,
            sub: b.errors.sub,
            del: b.errors.del,
            ins: b.errors.ins,
            lo: b.lo,
            hi: b.hi,
            utterances: b.errors.utterances,
            ref_tokens: b.errors.ref_tokens,
            sub_count: b.errors.counts.sub,
            del_count: b.errors.counts.del,
            ins_count: b.errors.counts.ins,
            method: report.method.clone(),
        })
        .collect();
    let path = dir.join("length_buckets.csv");
    write_file(&path, &csv_bytes(&path, &rows)?)
}

/// Rebuilds an evaluation report from the CSV files of `dir`.
pub fn read_eval_csv(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("eval.csv");
    let rows: Vec<MetricRow> = read_csv(&path)?;
    let method = rows
        .first()
        .map(|r| r.method.clone())
        .ok_or_else(|| Error::invalid(format!("{}: no rows", path.display())))?;
    let metrics: BTreeMap<String, f64> = rows.into_iter().map(|r| (r.metric, r.value)).collect();
    let get = |k: &str| {
        metrics
            .get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("{}: missing metric {k}", path.display())))
    };
    let count = |k: &str| get(k).map(|v| v as usize);
    let overall = ErrorBreakdown {
        utterances: count("utterances")?,
        ref_tokens: count("ref_tokens")?,
        counts: EditCounts {
            sub: count("sub_count")?,
            del: count("del_count")?,
            ins: count("ins_count")?,
        },
        wer: get("wer")?,
        sub: get("sub")?,
        del: get("del")?,
        ins: get("ins")?,
    };
    let buckets = read_csv::<BucketRow>(&dir.join("length_buckets.csv"))?
        .into_iter()
        .map(|b| LengthBucket {
            lo: b.lo,
            hi: b.hi,
            errors: ErrorBreakdown {
                utterances: b.utterances,
                ref_tokens: b.ref_tokens,
                counts: EditCounts {
                    sub: b.sub_count,
                    del: b.del_count,
                    ins: b.ins_count,
                },
                wer: b.wer,
                sub: b.sub,
                del: b.del,
                ins: b.ins,
            },
        })
        .collect();
    Ok(EvalReport {
        method,
        overall,
        bucket_width: count("bucket_width")?,
        buckets,
    })
}

pub fn emit_bench_report(report: &BenchReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_json(&dir.join("bench.json"), report)?;
    let mut metrics = Vec::new();
    for m in &report.methods {
        let mut push = |metric: &str, value: f64| {
            metrics.push(MetricRow {
                method: m.method.clone(),
                metric: metric.into(),
                value,
            })
        };
        push("mean_ms", m.mean_ms);
        push("median_ms", m.median_ms);
        push("iter_mean", m.iterations.mean);
        push("iter_min", m.iterations.min as f64);
        push("iter_max", m.iterations.max as f64);
        if let Some(s) = m.speedup_vs_ar {
            push("speedup_vs_ar", s);
        }
    }
    let path = dir.join("bench.csv");
    write_file(&path, &csv_bytes(&path, &metrics)?)?;
    let iterations: Vec<IterationRow> = report
        .methods
        .iter()
        .map(|m| IterationRow {
            method: m.method.clone(),
            iter_mean: m.iterations.mean,
            iter_min: m.iterations.min,
            iter_max: m.iterations.max,
            iter_total: m.iterations.total,
        })
        .collect();
    let path = dir.join("iterations.csv");
    write_file(&path, &csv_bytes(&path, &iterations)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::corpus_eval;

    #[test]
    fn json_csv_json_round_trip() {
        let pairs = vec![
            (vec![1, 2, 3], vec![1, 3]),
            (vec![4; 7], vec![4, 4, 5, 4, 4, 4, 4, 9]),
            (vec![2; 13], vec![2; 11]),
        ];
        let report = corpus_eval("ctc", &pairs, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_eval_report(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("eval.json")).unwrap();
        let from_json: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(from_json, report);
        assert_eq!(read_eval_csv(dir.path()).unwrap(), report);
        let header = std::fs::read_to_string(dir.path().join("length_buckets.csv")).unwrap();
        assert!(header.starts_with("length_bucket,wer,sub,del,ins,"));
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let report = corpus_eval("ctc", &[(vec![1], vec![1])], 5).unwrap();
        let err = emit_eval_report(&report, &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }
}
