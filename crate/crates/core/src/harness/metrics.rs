use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, RunResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub classes_learned: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_macro_acc: f64,
    pub std_macro_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub tasks: Vec<TaskSummary>,
    pub final_avg_mean: f64,
    pub final_avg_std: f64,
}

/// Mean and sample standard deviation (divisor `n - 1`, zero for one value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(results: &[RunResult]) -> Result<Summary> {
    let first = results.first().ok_or_else(|| Error::Config("no runs to aggregate".into()))?;
    for r in results {
        let same = r.tasks.len() == first.tasks.len()
            && r.tasks.iter().zip(&first.tasks).all(|(a, b)| a.classes_learned == b.classes_learned);
        if !same {
            return Err(Error::Config(format!("run {} has a different task structure from run {}", r.run, first.run)));
        }
    }
    let tasks = (0..first.tasks.len())
        .map(|t| {
            let acc: Vec<f64> = results.iter().map(|r| r.tasks[t].task_acc).collect();
            let mac: Vec<f64> = results.iter().map(|r| r.tasks[t].macro_acc).collect();
            let (mean_acc, std_acc) = mean_std(&acc);
            let (mean_macro_acc, std_macro_acc) = mean_std(&mac);
            TaskSummary {
                task: t,
                classes_learned: first.tasks[t].classes_learned,
                mean_acc,
                std_acc,
                mean_macro_acc,
                std_macro_acc,
            }
        })
        .collect();
    let finals: Vec<f64> = results.iter().map(|r| r.final_avg_acc).collect();
    let (final_avg_mean, final_avg_std) = mean_std(&finals);
    Ok(Summary { runs: results.len(), tasks, final_avg_mean, final_avg_std })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub json: bool,
}

impl Default for Formats {
    fn default() -> Self {
        Formats { csv: true, json: true }
    }
}

/// Shortest round-trip decimal, zero-padded to at least six significant
/// digits.
fn fmt_num(v: f64) -> String {
    let mut s = v.to_string();
    if !v.is_finite() {
        return s;
    }
    let sig = s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len();
    if sig < 6 {
        if !s.contains('.') {
            s.push('.');
        }
        let pad = if v == 0.0 { 6 } else { 6 - sig };
        s.extend(std::iter::repeat_n('0', pad));
    }
    s
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Writes `runs.csv`, `summary.csv`, `per_class.csv` and `summary.json`
/// under `out_dir`. Training seconds are written only when `timings` is set.
/// Every file is rendered before the first one is written.
pub fn emit_metrics(
    results: &[RunResult],
    summary: &Summary,
    out_dir: &Path,
    formats: Formats,
    timings: bool,
) -> Result<Vec<PathBuf>> {
    let mut sorted: Vec<&RunResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.run);
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if formats.csv {
        let runs = sorted.iter().flat_map(|r| {
            r.tasks.iter().map(move |t| {
                vec![
                    r.run.to_string(),
                    t.task.to_string(),
                    t.classes_learned.to_string(),
                    fmt_num(t.task_acc),
                    if timings { fmt_num(t.train_seconds) } else { String::new() },
                ]
            })
        });
        files.push(("runs.csv", csv_bytes(&["run", "task", "classes_learned", "task_acc", "train_seconds"], runs)?));
        let tasks = summary.tasks.iter().map(|t| {
            vec![t.task.to_string(), t.classes_learned.to_string(), fmt_num(t.mean_acc), fmt_num(t.std_acc)]
        });
        files.push(("summary.csv", csv_bytes(&["task", "classes_learned", "mean_acc", "std_acc"], tasks)?));
        let per_class = sorted.iter().flat_map(|r| {
            r.tasks.iter().flat_map(move |t| {
                t.per_class.iter().map(move |c| {
                    vec![
                        r.run.to_string(),
                        t.task.to_string(),
                        c.class.clone(),
                        c.n_test.to_string(),
                        fmt_num(c.accuracy),
                    ]
                })
            })
        });
        files.push(("per_class.csv", csv_bytes(&["run", "task", "class", "n_test", "accuracy"], per_class)?));
    }
    if formats.json {
        let mut bytes = serde_json::to_vec_pretty(summary)?;
        bytes.push(b'\n');
        files.push(("summary.json", bytes));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out_dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TaskRecord;

    fn result(run: usize, accs: &[f64]) -> RunResult {
        let tasks: Vec<TaskRecord> = accs
            .iter()
            .enumerate()
            .map(|(t, &a)| TaskRecord {
                task: t,
                classes_learned: t + 2,
                task_acc: a,
                macro_acc: a,
                per_class: vec![],
                train_seconds: 0.5,
            })
            .collect();
        let final_avg_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        RunResult { run, seed: run as u64, class_order: vec![], tasks, final_avg_acc }
    }

    #[test]
    fn numbers_keep_six_significant_digits() {
        assert_eq!(fmt_num(1.0), "1.00000");
        assert_eq!(fmt_num(0.9), "0.900000");
        assert_eq!(fmt_num(0.0), "0.000000");
        assert_eq!(fmt_num(0.123456789), "0.123456789");
        assert_eq!(fmt_num(-0.25), "-0.250000");
        for v in [1.0, 0.9, 0.0, 1.0 / 3.0, 2.5e-7] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn two_point_statistics() {
        let s = aggregate(&[result(0, &[0.90]), result(1, &[0.94])]).unwrap();
        assert!((s.final_avg_mean - 0.92).abs() < 1e-12);
        assert!((s.final_avg_std - 0.028284271247461926).abs() < 1e-12);
    }

    #[test]
    fn single_run_has_zero_std() {
        let s = aggregate(&[result(0, &[0.5, 0.7, 0.9])]).unwrap();
        assert!(s.tasks.iter().all(|t| t.std_acc == 0.0));
        assert_eq!(s.final_avg_std, 0.0);
    }

    #[test]
    fn mismatched_structure_is_rejected() {
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[result(0, &[0.5, 0.6]), result(1, &[0.5])]).is_err());
    }

    #[test]
    fn emitted_files_parse_and_round_trip() {
        let results = vec![result(1, &[0.5, 0.6, 0.7]), result(0, &[0.8, 0.7, 0.6])];
        let summary = aggregate(&results).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_metrics(&results, &summary, dir.path(), Formats::default(), false).unwrap();

        let mut rd = csv::Reader::from_path(dir.path().join("runs.csv")).unwrap();
        assert_eq!(
            rd.headers().unwrap(),
            vec!["run", "task", "classes_learned", "task_acc", "train_seconds"]
        );
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 6);
        assert_eq!(&rows[0][0], "0");
        assert_eq!(&rows[0][4], "");
        assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.8);

        let mut rd = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        assert_eq!(rd.headers().unwrap(), vec!["task", "classes_learned", "mean_acc", "std_acc"]);
        assert_eq!(rd.records().count(), 3);

        let back: Summary =
            serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back, summary);

        emit_metrics(&results, &summary, dir.path(), Formats::default(), true).unwrap();
        let text = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",0.500000"));
    }

    #[test]
    fn unwritable_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        let s = aggregate(&[result(0, &[0.5])]).unwrap();
        assert!(emit_metrics(&[result(0, &[0.5])], &s, &file.join("sub"), Formats::default(), false).is_err());
    }
}
