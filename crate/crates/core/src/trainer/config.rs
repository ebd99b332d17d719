use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::DEFAULT_MAX_STEPS;
use crate::error::{Error, Result};
use crate::grpo::ClipConfig;
use crate::optim::AdamWConfig;
use crate::policy::PolicyShape;
use crate::replay::DEFAULT_CAPACITY_PER_TASK;
use crate::rollout::{LatencyModel, RolloutConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Arpo,
    RejectSft,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Arpo => "arpo",
            Algorithm::RejectSft => "reject_sft",
        }
    }
}

/// How the baseline policy is produced: behavior cloning of a noisy scripted
/// demonstrator on a task suite disjoint from training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub min_goal_len: usize,
    pub max_goal_len: usize,
    pub demo_noise: f64,
    pub demos_per_task: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            seed: 1_000_003,
            n_tasks: 2048,
            min_goal_len: 1,
            max_goal_len: 6,
            demo_noise: 0.375,
            demos_per_task: 1,
            steps: 1000,
            batch_size: 32,
            learning_rate: 3e-3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_tasks > 0
            && self.min_goal_len >= 1
            && self.min_goal_len <= self.max_goal_len
            && (0.0..=1.0).contains(&self.demo_noise)
            && self.demos_per_task > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid baseline settings {self:?}")))
        }
    }
}

/// Every training knob, as flat named keys. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub epochs: usize,
    /// Tasks per rollout batch; a smaller task set is repeated to fill it.
    pub rollout_batch_tasks: usize,
    pub group_size: usize,
    /// Trajectories per minibatch.
    pub minibatch_size: usize,
    /// Minibatches averaged into one optimizer step.
    pub grad_accumulation: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub sigma_floor: f64,
    pub rollout_temperature: f64,
    pub eval_temperature: f64,
    pub eval_episodes_per_task: usize,
    pub replay_capacity_per_task: usize,
    pub n_envs: usize,
    pub max_steps: usize,
    pub os_delay_per_step: u64,
    pub infer_base_cost: u64,
    pub infer_per_item_cost: u64,
    pub embed: usize,
    pub hidden: usize,
    /// Run evaluation at the end of every epoch.
    pub evaluate_each_epoch: bool,
    pub baseline: BaselineConfig,
}

/// Learning rate suited to billion-parameter policies; selectable via config.
pub const LARGE_MODEL_LEARNING_RATE: f64 = 1e-6;

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let clip = ClipConfig::default();
        let latency = LatencyModel::default();
        let shape = PolicyShape::default();
        TrainConfig {
            algorithm: Algorithm::Arpo,
            seed: 0,
            epochs: 15,
            rollout_batch_tasks: 32,
            group_size: 8,
            minibatch_size: 8,
            grad_accumulation: 4,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            eps_low: clip.eps_low,
            eps_high: clip.eps_high,
            sigma_floor: clip.sigma_floor,
            rollout_temperature: 1.0,
            eval_temperature: 0.6,
            eval_episodes_per_task: 8,
            replay_capacity_per_task: DEFAULT_CAPACITY_PER_TASK,
            n_envs: 256,
            max_steps: DEFAULT_MAX_STEPS,
            os_delay_per_step: latency.os_delay_per_step,
            infer_base_cost: latency.infer_base_cost,
            infer_per_item_cost: latency.infer_per_item_cost,
            embed: shape.embed,
            hidden: shape.hidden,
            evaluate_each_epoch: true,
            baseline: BaselineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn clip(&self) -> ClipConfig {
        ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            sigma_floor: self.sigma_floor,
        }
    }

    pub fn latency(&self) -> LatencyModel {
        LatencyModel {
            os_delay_per_step: self.os_delay_per_step,
            infer_base_cost: self.infer_base_cost,
            infer_per_item_cost: self.infer_per_item_cost,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            n_envs: self.n_envs,
            group_size: self.group_size,
            max_steps: self.max_steps,
            rollout_temperature: self.rollout_temperature,
            latency: self.latency(),
        }
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            embed: self.embed,
            hidden: self.hidden,
        }
    }

    pub fn replay_enabled(&self) -> bool {
        self.algorithm == Algorithm::Arpo
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("rollout_batch_tasks", self.rollout_batch_tasks),
            ("minibatch_size", self.minibatch_size),
            ("grad_accumulation", self.grad_accumulation),
            ("eval_episodes_per_task", self.eval_episodes_per_task),
            ("embed", self.embed),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.eval_temperature > 0.0) {
            return Err(Error::config("eval_temperature must be positive"));
        }
        self.optimizer().validate()?;
        self.clip().validate()?;
        self.rollout().validate()?;
        self.baseline.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}
