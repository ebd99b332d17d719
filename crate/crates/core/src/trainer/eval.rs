//! Success-rate evaluation under the lenient and strict protocols.
//!
//! Both protocols score the same episodes. The standard protocol rewrites the
//! last action of a step-capped episode to FAIL, which turns every step-capped
//! episode on an infeasible task into a success. The hard protocol scores
//! episodes as played.

use serde::{Deserialize, Serialize};

use crate::agent::Policy;
use crate::env::{DomainTag, Task, Termination};
use crate::error::Result;
use crate::rollout::{run_episodes, LatencyModel, RolloutConfig};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    Hard,
}

/// Task success of one evaluation episode under `protocol`.
pub fn episode_success(task: &Task, trajectory: &Trajectory, protocol: Protocol) -> bool {
    match (protocol, trajectory.termination) {
        (Protocol::Standard, Termination::StepCap) => !task.feasible,
        _ => trajectory.is_success(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub temperature: f64,
    pub max_steps: usize,
    pub n_envs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: u32,
    pub domain_tag: DomainTag,
    pub feasible: bool,
    pub episodes: usize,
    pub standard_successes: usize,
    pub hard_successes: usize,
}

impl TaskEval {
    pub fn successes(&self, protocol: Protocol) -> usize {
        match protocol {
            Protocol::Standard => self.standard_successes,
            Protocol::Hard => self.hard_successes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
}

impl EvalReport {
    /// Mean success over all episodes of the tasks that pass `filter`;
    /// `None` when no task does.
    pub fn success_rate_where(&self, protocol: Protocol, filter: impl Fn(&TaskEval) -> bool) -> Option<f64> {
        let (hits, total) = self
            .per_task
            .iter()
            .filter(|t| filter(t))
            .fold((0, 0), |(h, n), t| (h + t.successes(protocol), n + t.episodes));
        (total > 0).then(|| hits as f64 / total as f64)
    }

    pub fn success_rate(&self, protocol: Protocol) -> Option<f64> {
        self.success_rate_where(protocol, |_| true)
    }

    pub fn domain_success(&self, protocol: Protocol, domain: DomainTag) -> Option<f64> {
        self.success_rate_where(protocol, |t| t.domain_tag == domain)
    }
}

/// Plays `episodes_per_task` episodes per task and scores them under both
/// protocols.
pub fn evaluate(policy: &dyn Policy, tasks: &[Task], config: &EvalConfig, seed: u64) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Ok(EvalReport::default());
    }
    let rollout = RolloutConfig {
        n_envs: config.n_envs,
        group_size: config.episodes_per_task.max(2),
        max_steps: config.max_steps,
        rollout_temperature: config.temperature,
        latency: LatencyModel::default(),
    };
    let n = config.episodes_per_task;
    let (trajectories, _) = run_episodes(tasks, n, policy, &rollout, seed)?;
    let per_task = tasks
        .iter()
        .zip(trajectories.chunks(n))
        .map(|(task, episodes)| {
            let count = |p| episodes.iter().filter(|t| episode_success(task, t, p)).count();
            TaskEval {
                task_id: task.task_id,
                domain_tag: task.domain_tag,
                feasible: task.feasible,
                episodes: n,
                standard_successes: count(Protocol::Standard),
                hard_successes: count(Protocol::Hard),
            }
        })
        .collect();
    Ok(EvalReport { per_task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ScriptedPolicy;
    use crate::env::{generate_task_suite, SuiteSpec};

    fn cfg() -> EvalConfig {
        EvalConfig {
            episodes_per_task: 8,
            temperature: 0.6,
            max_steps: 15,
            n_envs: 64,
        }
    }

    #[test]
    fn never_finishing_policy_games_the_standard_protocol() {
        let tasks: Vec<Task> = (0..6).map(Task::infeasible).collect();
        let r = evaluate(&ScriptedPolicy::NeverFinish, &tasks, &cfg(), 0).unwrap();
        assert_eq!(r.success_rate(Protocol::Standard), Some(1.0));
        assert_eq!(r.success_rate(Protocol::Hard), Some(0.0));
    }

    #[test]
    fn oracle_scores_full_marks_on_both() {
        let tasks = generate_task_suite(&SuiteSpec::new(2, 8, 3, 2..=6)).unwrap();
        let r = evaluate(&ScriptedPolicy::Oracle, &tasks, &cfg(), 0).unwrap();
        assert_eq!(r.success_rate(Protocol::Standard), Some(1.0));
        assert_eq!(r.success_rate(Protocol::Hard), Some(1.0));
    }

    #[test]
    fn hard_never_exceeds_standard_per_task() {
        let tasks = generate_task_suite(&SuiteSpec::new(3, 10, 6, 1..=4)).unwrap();
        for policy in [ScriptedPolicy::Uniform, ScriptedPolicy::NoisyOracle { noise: 0.6 }] {
            let r = evaluate(&policy, &tasks, &cfg(), 1).unwrap();
            for t in &r.per_task {
                assert!(t.hard_successes <= t.standard_successes);
                if t.feasible {
                    assert_eq!(t.hard_successes, t.standard_successes);
                }
            }
        }
    }

    #[test]
    fn domain_split() {
        let tasks = generate_task_suite(&SuiteSpec::new(4, 16, 0, 2..=3)).unwrap();
        let r = evaluate(&ScriptedPolicy::Oracle, &tasks, &cfg(), 0).unwrap();
        assert_eq!(r.domain_success(Protocol::Hard, DomainTag::InDomain), Some(1.0));
        assert_eq!(r.domain_success(Protocol::Hard, DomainTag::OutOfDomain), Some(1.0));
        assert_eq!(EvalReport::default().success_rate(Protocol::Hard), None);
    }
}
