//! Group-relative advantages and the clipped token-level surrogate.
//!
//! For a group of `G` trajectories with total rewards `r_i`, every token of
//! trajectory `i` gets the advantage `(r_i - mean) / std` (population std).
//! The loss is
//!
//! ```text
//! L = -(1/G) Σ_i (1/|o_i|) Σ_t min(ρ_t A_i, clip(ρ_t, 1 - eps_low, 1 + eps_high) A_i)
//! ```
//!
//! with `ρ_t = exp(log π_θ - log π_old)`. There is no KL term, entropy bonus
//! or value function.

use serde::{Deserialize, Serialize};

use crate::env::Task;
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::policy::PolicyParams;
use crate::trajectory::Trajectory;

/// Temperature at which importance ratios are evaluated, for both sides.
pub const RATIO_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub sigma_floor: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.3,
            sigma_floor: 1e-8,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0 && self.sigma_floor >= 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "clip config needs 0 < eps_low <= eps_high < 1, got {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Mean, population standard deviation and normalized advantages. Groups whose
/// spread falls below `sigma_floor` carry no ranking information and get
/// all-zero advantages.
pub fn compute_advantages(rewards: &[f64], sigma_floor: f64) -> Result<GroupStats> {
    if rewards.len() < 2 {
        return Err(Error::usage(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let advantages = if std < sigma_floor {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(GroupStats {
        mean,
        std,
        advantages,
    })
}

/// Lifecycle of a group. Replay injection is only legal while `Collected`;
/// the loss is only defined once `Advantaged`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupPhase {
    Collected,
    Advantaged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub task_id: u32,
    pub trajectories: Vec<Trajectory>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    pub phase: GroupPhase,
    /// Slot overwritten by replay injection, if any.
    pub injected_slot: Option<usize>,
}

impl RolloutGroup {
    pub fn new(task_id: u32, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::usage(format!(
                "task {task_id}: group of {} trajectories (need at least 2)",
                trajectories.len()
            )));
        }
        if let Some(t) = trajectories.iter().find(|t| t.task_id != task_id) {
            return Err(Error::usage(format!(
                "group for task {task_id} contains a trajectory of task {}",
                t.task_id
            )));
        }
        Ok(RolloutGroup {
            task_id,
            trajectories,
            mean: 0.0,
            std: 0.0,
            advantages: Vec::new(),
            phase: GroupPhase::Collected,
            injected_slot: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Total rewards (task reward plus format penalties).
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward.total).collect()
    }

    /// Every member failed the task (format penalties are ignored here).
    pub fn all_failed(&self) -> bool {
        self.trajectories.iter().all(|t| t.reward.trajectory_reward == 0.0)
    }

    pub fn compute_advantages(&mut self, sigma_floor: f64) -> Result<()> {
        if self.phase != GroupPhase::Collected {
            return Err(Error::usage(format!(
                "task {}: advantages already computed",
                self.task_id
            )));
        }
        let stats = compute_advantages(&self.rewards(), sigma_floor)?;
        self.mean = stats.mean;
        self.std = stats.std;
        self.advantages = stats.advantages;
        self.phase = GroupPhase::Advantaged;
        Ok(())
    }

    pub(crate) fn require_phase(&self, phase: GroupPhase) -> Result<()> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "task {}: group is {:?}, operation needs {:?}",
                self.task_id, self.phase, phase
            )))
        }
    }
}

/// `min(ρA, clip(ρ, 1 - eps_low, 1 + eps_high) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_term`] with respect to the ratio: `A` while the
/// unclipped branch is active, zero once the clip binds.
pub fn clipped_term_slope(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    if ratio * advantage <= clipped * advantage {
        advantage
    } else {
        0.0
    }
}

/// Value and per-token backward weights of `scale · (1/n) Σ_t term_t`, where
/// the weights are derivatives with respect to the new log-probabilities.
pub fn surrogate_terms(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantage: f64,
    clip: &ClipConfig,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if new_logprobs.len() != old_logprobs.len() || new_logprobs.is_empty() {
        return Err(Error::usage(format!(
            "token count mismatch: {} current vs {} behavior log-probabilities",
            new_logprobs.len(),
            old_logprobs.len()
        )));
    }
    let ratios: Vec<f64> = new_logprobs
        .iter()
        .zip(old_logprobs)
        .map(|(n, o)| (n - o).exp())
        .collect();
    Ok(surrogate_from_ratios(&ratios, advantage, clip, scale))
}

/// Same as [`surrogate_terms`] with the ratios given directly; the objective
/// depends on nothing else.
pub fn surrogate_from_ratios(ratios: &[f64], advantage: f64, clip: &ClipConfig, scale: f64) -> (f64, Vec<f64>) {
    let inv_len = 1.0 / ratios.len() as f64;
    let mut value = 0.0;
    let weights = ratios
        .iter()
        .map(|&r| {
            value += clipped_term(r, advantage, clip);
            // d term / d log π = slope · ρ
            scale * inv_len * clipped_term_slope(r, advantage, clip) * r
        })
        .collect();
    (scale * inv_len * value, weights)
}

/// One trajectory with its task and (broadcast) advantage.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub task: &'a Task,
    pub trajectory: &'a Trajectory,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    /// Per-trajectory, per-token weights `w` such that the gradient of
    /// `Σ w · log π_θ` equals the gradient of the loss.
    pub weights: Vec<Vec<f64>>,
    pub gradient: Vec<f64>,
    /// Mean ratio over the tokens of trajectories with a nonzero advantage
    /// (diagnostic; 1 when there are none).
    pub mean_ratio: f64,
}

/// Loss averaged over the given trajectories (each normalized by its own
/// token count), together with its exact gradient. Behavior log-probabilities
/// stored on each trajectory act as π_old.
pub fn minibatch_surrogate(
    params: &PolicyParams,
    items: &[LossItem<'_>],
    clip: &ClipConfig,
) -> Result<SurrogateOutput> {
    if items.is_empty() {
        return Err(Error::usage("empty minibatch"));
    }
    let scale = -1.0 / items.len() as f64;
    let mut gradient = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut weights = Vec::with_capacity(items.len());
    let mut ratio_sum = 0.0;
    let mut token_total = 0usize;
    for item in items {
        let old = item.trajectory.behavior_logprobs();
        if old.len() != item.trajectory.token_count {
            return Err(Error::usage(format!(
                "task {}: {} behavior log-probabilities for {} tokens",
                item.trajectory.task_id,
                old.len(),
                item.trajectory.token_count
            )));
        }
        if item.advantage == 0.0 {
            // contributes exactly zero; still counted in the normalization
            weights.push(vec![0.0; old.len()]);
            continue;
        }
        let mut item_loss = 0.0;
        let mut item_weights = Vec::new();
        let new = params.weighted_backward(
            item.task,
            item.trajectory,
            RATIO_TEMPERATURE,
            &mut gradient,
            |new| {
                let (value, w) = surrogate_terms(new, &old, item.advantage, clip, scale)?;
                item_loss = value;
                item_weights = w.clone();
                Ok(w)
            },
        )?;
        ratio_sum += new.iter().zip(&old).map(|(n, o)| (n - o).exp()).sum::<f64>();
        token_total += new.len();
        loss += item_loss;
        weights.push(item_weights);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("surrogate loss is {loss}")));
    }
    Ok(SurrogateOutput {
        loss,
        weights,
        gradient,
        mean_ratio: if token_total == 0 {
            1.0
        } else {
            ratio_sum / token_total as f64
        },
    })
}

/// The clipped surrogate of one group: `-(1/G) Σ_i (1/|o_i|) Σ_t min(...)`.
pub fn surrogate_loss(
    params: &PolicyParams,
    task: &Task,
    group: &RolloutGroup,
    clip: &ClipConfig,
) -> Result<SurrogateOutput> {
    group.require_phase(GroupPhase::Advantaged)?;
    if task.task_id != group.task_id {
        return Err(Error::usage(format!(
            "group for task {} scored against task {}",
            group.task_id, task.task_id
        )));
    }
    let items: Vec<LossItem<'_>> = group
        .trajectories
        .iter()
        .zip(&group.advantages)
        .map(|(trajectory, &advantage)| LossItem {
            task,
            trajectory,
            advantage,
        })
        .collect();
    minibatch_surrogate(params, &items, clip)
}

/// Running sum of minibatch gradients.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        GradAccumulator {
            sum: vec![0.0; len],
            count: 0,
        }
    }

    pub fn add(&mut self, gradient: &[f64]) {
        debug_assert_eq!(gradient.len(), self.sum.len());
        self.sum.iter_mut().zip(gradient).for_each(|(s, g)| *s += g);
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Averaged gradient; resets the accumulator.
    pub fn take_mean(&mut self) -> Option<Vec<f64>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mean = self.sum.iter().map(|s| s / n).collect();
        self.sum.iter_mut().for_each(|s| *s = 0.0);
        self.count = 0;
        Some(mean)
    }
}

/// Averages the minibatch gradients and applies a single optimizer step.
pub fn accumulate_and_step(
    params: &mut PolicyParams,
    minibatch_gradients: &[Vec<f64>],
    config: &AdamWConfig,
    state: &mut AdamState,
) -> Result<()> {
    let mut acc = GradAccumulator::new(params.len());
    for g in minibatch_gradients {
        if g.len() != params.len() {
            return Err(Error::usage("minibatch gradient has the wrong length"));
        }
        acc.add(g);
    }
    let mean = acc
        .take_mean()
        .ok_or_else(|| Error::usage("no minibatches to accumulate"))?;
    optimizer_step(params, &mean, config, state)
}
