//! Valuable-task filtering: probe every candidate with the baseline policy
//! and keep the tasks it solves at least `keep_threshold` times.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::Policy;
use crate::env::{Task, DEFAULT_MAX_STEPS};
use crate::error::{Error, Result};
use crate::records::{read_jsonl, write_jsonl};
use crate::rollout::{run_episodes, LatencyModel, RolloutConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProbeReport {
    pub task_id: u32,
    pub n_rollouts: usize,
    pub n_successes: usize,
    pub kept: bool,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_rollouts: usize,
    pub keep_threshold: usize,
    pub temperature: f64,
    pub n_envs: usize,
    pub max_steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_rollouts: 16,
            keep_threshold: 1,
            temperature: 1.0,
            n_envs: 256,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl ProbeConfig {
    fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            n_envs: self.n_envs,
            group_size: self.n_rollouts.max(2),
            max_steps: self.max_steps,
            rollout_temperature: self.temperature,
            latency: LatencyModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 {
            return Err(Error::config("n_rollouts must be at least 1"));
        }
        self.rollout().validate()
    }
}

fn report(task_id: u32, rewards: Vec<f64>, keep_threshold: usize) -> TaskProbeReport {
    let n_successes = rewards.iter().filter(|&&r| r == 1.0).count();
    TaskProbeReport {
        task_id,
        n_rollouts: rewards.len(),
        n_successes,
        kept: n_successes >= keep_threshold,
        rewards,
    }
}

/// Probes a single task. Identical to that task's report from
/// [`select_tasks`] over a one-task set with the same seed.
pub fn probe_task(task: &Task, policy: &dyn Policy, config: &ProbeConfig, seed: u64) -> Result<TaskProbeReport> {
    let (_, mut reports) = select_tasks(std::slice::from_ref(task), policy, config, seed)?;
    Ok(reports.pop().expect("one report per task"))
}

/// Probes every task (concurrently through the rollout engine) and returns
/// the kept tasks in input order plus one report per input task.
/// An empty selection is not an error; the trainer refuses it later.
pub fn select_tasks(
    tasks: &[Task],
    policy: &dyn Policy,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(Vec<Task>, Vec<TaskProbeReport>)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::usage("task selection needs a non-empty task set"));
    }
    let n = config.n_rollouts;
    let (trajectories, _) = run_episodes(tasks, n, policy, &config.rollout(), seed)?;
    let reports: Vec<TaskProbeReport> = tasks
        .iter()
        .zip(trajectories.chunks(n))
        .map(|(task, group)| {
            let rewards = group.iter().map(|t| t.reward.trajectory_reward).collect();
            report(task.task_id, rewards, config.keep_threshold)
        })
        .collect();
    let selected = tasks
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.kept)
        .map(|(t, _)| t.clone())
        .collect();
    Ok((selected, reports))
}

/// Re-applies a different threshold to existing reports without re-probing.
pub fn rethreshold(reports: &[TaskProbeReport], keep_threshold: usize) -> Vec<TaskProbeReport> {
    reports
        .iter()
        .map(|r| report(r.task_id, r.rewards.clone(), keep_threshold))
        .collect()
}

pub fn write_reports(path: &Path, reports: &[TaskProbeReport]) -> Result<()> {
    write_jsonl(path, reports)
}

pub fn read_reports(path: &Path) -> Result<Vec<TaskProbeReport>> {
    read_jsonl(path)
}
