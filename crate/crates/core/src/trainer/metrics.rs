//! Per-step metrics, the run's `metrics.csv`, and export of one CSV per
//! plotted quantity.
//!
//! Exported files and columns:
//!
//! | file                     | columns |
//! |--------------------------|---------|
//! | `training_reward.csv`    | step, epoch, algorithm, mean_reward, mean_total_reward, all_fail_fraction, injections |
//! | `reward_std.csv`         | step, epoch, algorithm, reward_std |
//! | `eval_success.csv`       | step, epoch, algorithm, in_domain_standard, in_domain_hard, out_of_domain_standard, out_of_domain_hard |
//! | `rollout_throughput.csv` | step, epoch, iteration, n_envs, batch_vtime_ms, rollout_vtime_ms, cumulative_vtime_ms |
//!
//! Only virtual time is recorded, so reruns produce byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EXPORT_DIR: &str = "export";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub algorithm: String,
    /// Mean task success (trajectory reward) over freshly sampled trajectories.
    pub mean_reward: f64,
    /// Mean of trajectory reward plus format penalties, the quantity that
    /// advantages are computed from.
    pub mean_total_reward: f64,
    /// Mean within-group population std of the rewards used for advantages.
    pub reward_std: f64,
    /// Fraction of groups in which every fresh trajectory failed.
    pub all_fail_fraction: f64,
    /// Replay injections in this iteration.
    pub injections: u64,
    pub replay_size: usize,
    pub loss: f64,
    pub mean_ratio: f64,
    pub n_envs: usize,
    pub batch_vtime_ms: f64,
    pub rollout_vtime_ms: u64,
    pub cumulative_vtime_ms: u64,
    pub eval_in_domain_standard: Option<f64>,
    pub eval_in_domain_hard: Option<f64>,
    pub eval_out_of_domain_standard: Option<f64>,
    pub eval_out_of_domain_hard: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 20] = [
    "step",
    "epoch",
    "iteration",
    "algorithm",
    "mean_reward",
    "mean_total_reward",
    "reward_std",
    "all_fail_fraction",
    "injections",
    "replay_size",
    "loss",
    "mean_ratio",
    "n_envs",
    "batch_vtime_ms",
    "rollout_vtime_ms",
    "cumulative_vtime_ms",
    "eval_in_domain_standard",
    "eval_in_domain_hard",
    "eval_out_of_domain_standard",
    "eval_out_of_domain_hard",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Record {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Rewrites `path` with a header and `rows`.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends rows to an existing metrics file.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(METRICS_COLUMNS) {
        return Err(Error::Record {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

type Extract = fn(&MetricsRow) -> Vec<String>;

/// Export targets: file name, header, per-row extractor, and whether rows
/// without that quantity are skipped.
pub fn export_schema() -> Vec<(&'static str, Vec<&'static str>, Extract, bool)> {
    vec![
        (
            "training_reward.csv",
            vec![
                "step",
                "epoch",
                "algorithm",
                "mean_reward",
                "mean_total_reward",
                "all_fail_fraction",
                "injections",
            ],
            |r| {
                vec![
                    r.step.to_string(),
                    r.epoch.to_string(),
                    r.algorithm.clone(),
                    r.mean_reward.to_string(),
                    r.mean_total_reward.to_string(),
                    r.all_fail_fraction.to_string(),
                    r.injections.to_string(),
                ]
            },
            false,
        ),
        (
            "reward_std.csv",
            vec!["step", "epoch", "algorithm", "reward_std"],
            |r| {
                vec![
                    r.step.to_string(),
                    r.epoch.to_string(),
                    r.algorithm.clone(),
                    r.reward_std.to_string(),
                ]
            },
            false,
        ),
        (
            "eval_success.csv",
            vec![
                "step",
                "epoch",
                "algorithm",
                "in_domain_standard",
                "in_domain_hard",
                "out_of_domain_standard",
                "out_of_domain_hard",
            ],
            |r| {
                vec![
                    r.step.to_string(),
                    r.epoch.to_string(),
                    r.algorithm.clone(),
                    opt(r.eval_in_domain_standard),
                    opt(r.eval_in_domain_hard),
                    opt(r.eval_out_of_domain_standard),
                    opt(r.eval_out_of_domain_hard),
                ]
            },
            true,
        ),
        (
            "rollout_throughput.csv",
            vec![
                "step",
                "epoch",
                "iteration",
                "n_envs",
                "batch_vtime_ms",
                "rollout_vtime_ms",
                "cumulative_vtime_ms",
            ],
            |r| {
                vec![
                    r.step.to_string(),
                    r.epoch.to_string(),
                    r.iteration.to_string(),
                    r.n_envs.to_string(),
                    r.batch_vtime_ms.to_string(),
                    r.rollout_vtime_ms.to_string(),
                    r.cumulative_vtime_ms.to_string(),
                ]
            },
            false,
        ),
    ]
}

fn has_eval(r: &MetricsRow) -> bool {
    [
        r.eval_in_domain_standard,
        r.eval_in_domain_hard,
        r.eval_out_of_domain_standard,
        r.eval_out_of_domain_hard,
    ]
    .iter()
    .any(Option::is_some)
}

/// Writes the export CSVs into `<run_dir>/export` and returns their paths.
/// A run directory without metrics yields header-only files.
pub fn export_metrics(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        return Err(Error::MissingRun(run_dir.to_path_buf()));
    }
    let metrics = run_dir.join(METRICS_FILE);
    let rows = if metrics.exists() {
        read_metrics(&metrics)?
    } else {
        Vec::new()
    };
    let out_dir = run_dir.join(EXPORT_DIR);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut written = Vec::new();
    for (name, header, extract, eval_only) in export_schema() {
        let path = out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for r in rows.iter().filter(|r| !eval_only || has_eval(r)) {
            w.write_record(extract(r)).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            epoch: 0,
            iteration: 0,
            algorithm: "arpo".into(),
            mean_reward: 0.25,
            mean_total_reward: -0.5,
            reward_std: 0.4330127018922193,
            all_fail_fraction: 0.5,
            injections: 3,
            replay_size: 7,
            loss: -0.01,
            mean_ratio: 1.0,
            n_envs: 256,
            batch_vtime_ms: 247200.0,
            rollout_vtime_ms: 247200,
            cumulative_vtime_ms: 247200 * (step + 1),
            eval_in_domain_standard: (step == 9).then_some(0.5),
            eval_in_domain_hard: (step == 9).then_some(0.375),
            eval_out_of_domain_standard: None,
            eval_out_of_domain_hard: None,
        }
    }

    #[test]
    fn metrics_round_trip_with_empty_eval_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let rows: Vec<_> = (0..10).map(row).collect();
        write_metrics(&path, &rows[..4]).unwrap();
        append_metrics(&path, &rows[4..]).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(",,,,"));
    }

    #[test]
    fn export_golden_columns() {
        let dir = tempfile::tempdir().unwrap();
        let written = export_metrics(dir.path()).unwrap();
        let headers: Vec<String> = written
            .iter()
            .map(|p| std::fs::read_to_string(p).unwrap())
            .collect();
        assert_eq!(
            headers,
            vec![
                "step,epoch,algorithm,mean_reward,mean_total_reward,all_fail_fraction,injections\n",
                "step,epoch,algorithm,reward_std\n",
                "step,epoch,algorithm,in_domain_standard,in_domain_hard,out_of_domain_standard,out_of_domain_hard\n",
                "step,epoch,iteration,n_envs,batch_vtime_ms,rollout_vtime_ms,cumulative_vtime_ms\n",
            ]
        );

        let rows: Vec<_> = (0..10).map(row).collect();
        write_metrics(&dir.path().join(METRICS_FILE), &rows).unwrap();
        let written = export_metrics(dir.path()).unwrap();
        let lines = |i: usize| std::fs::read_to_string(&written[i]).unwrap().lines().count();
        assert_eq!((lines(0), lines(1), lines(2), lines(3)), (11, 11, 2, 11));
        let eval = std::fs::read_to_string(&written[2]).unwrap();
        assert_eq!(eval.lines().nth(1).unwrap(), "9,0,arpo,0.5,0.375,,");
    }

    #[test]
    fn missing_run_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = export_metrics(&dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, Error::MissingRun(_)));
    }
}
