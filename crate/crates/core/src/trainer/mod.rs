//! The training loop (GRPO, ARPO and reject-sampling fine-tuning), its run
//! directory, evaluation hooks and checkpoints.
//!
//! One iteration: snapshot the policy, roll out a batch of tasks, (ARPO only)
//! cache fresh successes and inject into all-fail groups, compute group
//! advantages, then take optimizer steps over shuffled minibatches with
//! gradient accumulation. Every random stream is derived from the master seed
//! and (epoch, iteration, purpose), which makes resumption exact.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod sft;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{derive_seed, Policy};
use crate::env::Task;
use crate::error::{Error, Result};
use crate::grpo::{minibatch_surrogate, GroupPhase, LossItem, RolloutGroup};
use crate::optim::{optimizer_step, AdamState};
use crate::policy::PolicyParams;
use crate::records::{append_jsonl, read_jsonl, write_jsonl};
use crate::replay::{InsertOutcome, Injection, ReplayBuffer};
use crate::rollout::run_epoch;

use checkpoint::{checkpoint_path, latest_checkpoint, save_params, Checkpoint};
use config::{Algorithm, TrainConfig};
use eval::{evaluate, EvalConfig, EvalReport, Protocol};
use metrics::{append_metrics, read_metrics, write_metrics, MetricsRow, METRICS_FILE};
use sft::likelihood_loss;

const STREAM_ORDER: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_INJECT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Replay-buffer interactions, recorded so that runs of different algorithms
/// can be compared call by call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Insert {
        epoch: usize,
        iteration: usize,
        task_id: u32,
        outcome: InsertOutcome,
    },
    Inject {
        epoch: usize,
        iteration: usize,
        injection: Injection,
    },
}

impl AuditEvent {
    fn epoch(&self) -> usize {
        match self {
            AuditEvent::Insert { epoch, .. } | AuditEvent::Inject { epoch, .. } => *epoch,
        }
    }
}

/// Statistics of one rollout batch, shared by all optimizer steps it feeds.
#[derive(Clone, Debug, PartialEq)]
struct BatchStats {
    mean_reward: f64,
    mean_total_reward: f64,
    reward_std: f64,
    all_fail_fraction: f64,
    injections: u64,
    batch_vtime_ms: f64,
    rollout_vtime_ms: u64,
}

pub struct Trainer {
    config: TrainConfig,
    tasks: Vec<Task>,
    held_out: Vec<Task>,
    behavior: PolicyParams,
    params: PolicyParams,
    adam: AdamState,
    replay: ReplayBuffer,
    epochs_done: usize,
    step: u64,
    cumulative_vtime_ms: u64,
    audit: Vec<AuditEvent>,
}

impl Trainer {
    /// Starts from `baseline`, which also serves as the frozen behavior
    /// policy for reject sampling.
    pub fn new(config: TrainConfig, tasks: Vec<Task>, held_out: Vec<Task>, baseline: PolicyParams) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::usage("training needs a non-empty task set"));
        }
        for t in tasks.iter().chain(&held_out) {
            t.validate()?;
        }
        if baseline.shape != config.shape() {
            return Err(Error::config(format!(
                "baseline shape {:?} differs from configured {:?}",
                baseline.shape,
                config.shape()
            )));
        }
        let adam = AdamState::new(baseline.len());
        let replay = ReplayBuffer::new(config.replay_capacity_per_task);
        Ok(Trainer {
            config,
            tasks,
            held_out,
            behavior: baseline.clone(),
            params: baseline,
            adam,
            replay,
            epochs_done: 0,
            step: 0,
            cumulative_vtime_ms: 0,
            audit: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    fn stream(&self, keys: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, keys))
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes_per_task: self.config.eval_episodes_per_task,
            temperature: self.config.eval_temperature,
            max_steps: self.config.max_steps,
            n_envs: self.config.n_envs,
        }
    }

    /// Evaluates the current policy on the training tasks and the held-out
    /// tasks with the stream of `epoch`.
    pub fn evaluate_current(&self, epoch: usize) -> Result<(EvalReport, EvalReport)> {
        let seed = derive_seed(self.config.seed, &[epoch as u64, STREAM_EVAL]);
        let mut unique = self.tasks.clone();
        unique.sort_by_key(|t| t.task_id);
        unique.dedup_by_key(|t| t.task_id);
        let cfg = self.eval_config();
        Ok((
            evaluate(&self.params, &unique, &cfg, seed)?,
            evaluate(&self.params, &self.held_out, &cfg, derive_seed(seed, &[1]))?,
        ))
    }

    /// Runs one epoch and returns its metrics rows.
    pub fn run_epoch(&mut self) -> Result<Vec<MetricsRow>> {
        if self.is_finished() {
            return Err(Error::usage("all configured epochs are done"));
        }
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        order.shuffle(&mut self.stream(&[epoch as u64, STREAM_ORDER]));
        let b = self.config.rollout_batch_tasks;
        let iterations = self.tasks.len().div_ceil(b);
        let mut rows = Vec::new();
        let mut positives = 0;
        for iteration in 0..iterations {
            let batch: Vec<Task> = (0..b)
                .map(|k| self.tasks[order[(iteration * b + k) % order.len()]].clone())
                .collect();
            let (r, p) = self.iteration(epoch, iteration, &batch)?;
            rows.extend(r);
            positives += p;
        }
        if self.config.algorithm == Algorithm::RejectSft && positives == 0 {
            return Err(Error::usage(format!(
                "reject sampling found no successful trajectory in epoch {epoch}"
            )));
        }
        if self.config.evaluate_each_epoch {
            let (in_domain, held_out) = self.evaluate_current(epoch)?;
            if let Some(last) = rows.last_mut() {
                last.eval_in_domain_standard = in_domain.success_rate(Protocol::Standard);
                last.eval_in_domain_hard = in_domain.success_rate(Protocol::Hard);
                last.eval_out_of_domain_standard = held_out.success_rate(Protocol::Standard);
                last.eval_out_of_domain_hard = held_out.success_rate(Protocol::Hard);
            }
        }
        self.epochs_done += 1;
        Ok(rows)
    }

    fn iteration(&mut self, epoch: usize, iteration: usize, batch: &[Task]) -> Result<(Vec<MetricsRow>, usize)> {
        let keys = [epoch as u64, iteration as u64];
        let snapshot = self.params.clone();
        let policy: &dyn Policy = match self.config.algorithm {
            Algorithm::RejectSft => &self.behavior,
            _ => &snapshot,
        };
        let rollout_seed = derive_seed(self.config.seed, &[keys[0], keys[1], STREAM_ROLLOUT]);
        let (groups, report) = run_epoch(batch, policy, &self.config.rollout(), rollout_seed)?;
        self.cumulative_vtime_ms += report.per_epoch_vtime;

        let n_fresh = (groups.len() * self.config.group_size) as f64;
        let fresh = groups.iter().flat_map(|g| &g.trajectories);
        let mean_reward = fresh.clone().map(|t| t.reward.trajectory_reward).sum::<f64>() / n_fresh;
        let mean_total_reward = fresh.map(|t| t.reward.total).sum::<f64>() / n_fresh;
        let all_fail_fraction =
            groups.iter().filter(|g| g.all_failed()).count() as f64 / groups.len() as f64;

        let mut injections = 0;
        let groups = if self.config.replay_enabled() {
            let mut rng = self.stream(&[keys[0], keys[1], STREAM_INJECT]);
            let mut out = Vec::with_capacity(groups.len());
            for group in groups {
                for t in &group.trajectories {
                    let outcome = self.replay.insert(t);
                    self.audit.push(AuditEvent::Insert {
                        epoch,
                        iteration,
                        task_id: t.task_id,
                        outcome,
                    });
                }
                let (group, injection) = self.replay.maybe_inject(group, &mut rng)?;
                if let Some(injection) = injection {
                    injections += 1;
                    self.audit.push(AuditEvent::Inject {
                        epoch,
                        iteration,
                        injection,
                    });
                }
                out.push(group);
            }
            out
        } else {
            groups
        };
        let mut groups = groups;
        for g in &mut groups {
            g.compute_advantages(self.config.sigma_floor)?;
        }
        let stats = BatchStats {
            mean_reward,
            mean_total_reward,
            reward_std: groups.iter().map(|g| g.std).sum::<f64>() / groups.len() as f64,
            all_fail_fraction,
            injections,
            batch_vtime_ms: report.per_batch_vtime(),
            rollout_vtime_ms: report.per_epoch_vtime,
        };

        let mut shuffle = self.stream(&[keys[0], keys[1], STREAM_SHUFFLE]);
        match self.config.algorithm {
            Algorithm::RejectSft => {
                let mut items: Vec<(usize, usize)> = Vec::new();
                for (gi, g) in groups.iter().enumerate() {
                    for (ti, t) in g.trajectories.iter().enumerate() {
                        if t.is_success() {
                            items.push((gi, ti));
                        }
                    }
                }
                items.shuffle(&mut shuffle);
                let rows = self.optimize(epoch, iteration, &stats, &items, |params, mb| {
                    let corpus: Vec<_> = mb
                        .iter()
                        .map(|&(gi, ti)| (&batch[gi], &groups[gi].trajectories[ti]))
                        .collect();
                    let (loss, grad) = likelihood_loss(params, &corpus)?;
                    Ok((loss, grad, 1.0))
                })?;
                Ok((rows, items.len()))
            }
            Algorithm::Grpo | Algorithm::Arpo => {
                let mut items = training_items(&groups)?;
                items.shuffle(&mut shuffle);
                let clip = self.config.clip();
                let rows = self.optimize(epoch, iteration, &stats, &items, |params, mb| {
                    let loss_items: Vec<LossItem<'_>> = mb
                        .iter()
                        .map(|&(gi, ti)| LossItem {
                            task: &batch[gi],
                            trajectory: &groups[gi].trajectories[ti],
                            advantage: groups[gi].advantages[ti],
                        })
                        .collect();
                    let out = minibatch_surrogate(params, &loss_items, &clip)?;
                    Ok((out.loss, out.gradient, out.mean_ratio))
                })?;
                Ok((rows, items.len()))
            }
        }
    }

    /// Minibatches of `minibatch_size` items; every `grad_accumulation`
    /// minibatches (or fewer, at the end) make one optimizer step.
    fn optimize<F>(
        &mut self,
        epoch: usize,
        iteration: usize,
        stats: &BatchStats,
        items: &[(usize, usize)],
        mut minibatch: F,
    ) -> Result<Vec<MetricsRow>>
    where
        F: FnMut(&PolicyParams, &[(usize, usize)]) -> Result<(f64, Vec<f64>, f64)>,
    {
        let per_step = self.config.minibatch_size * self.config.grad_accumulation;
        let optimizer = self.config.optimizer();
        let mut rows = Vec::new();
        for chunk in items.chunks(per_step) {
            let mut grad = vec![0.0; self.params.len()];
            let (mut loss, mut ratio, mut n) = (0.0, 0.0, 0.0);
            for mb in chunk.chunks(self.config.minibatch_size) {
                let (l, g, r) = minibatch(&self.params, mb)?;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                loss += l;
                ratio += r;
                n += 1.0;
            }
            grad.iter_mut().for_each(|g| *g /= n);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, iteration {iteration}, step {}",
                    self.step + 1
                )));
            }
            optimizer_step(&mut self.params, &grad, &optimizer, &mut self.adam)?;
            self.step += 1;
            rows.push(MetricsRow {
                step: self.step,
                epoch,
                iteration,
                algorithm: self.config.algorithm.name().to_string(),
                mean_reward: stats.mean_reward,
                mean_total_reward: stats.mean_total_reward,
                reward_std: stats.reward_std,
                all_fail_fraction: stats.all_fail_fraction,
                injections: stats.injections,
                replay_size: self.replay.total_len(),
                loss: loss / n,
                mean_ratio: ratio / n,
                n_envs: self.config.n_envs,
                batch_vtime_ms: stats.batch_vtime_ms,
                rollout_vtime_ms: stats.rollout_vtime_ms,
                cumulative_vtime_ms: self.cumulative_vtime_ms,
                eval_in_domain_standard: None,
                eval_in_domain_hard: None,
                eval_out_of_domain_standard: None,
                eval_out_of_domain_hard: None,
            });
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_toml(),
            seed: self.config.seed,
            epochs_done: self.epochs_done,
            step: self.step,
            cumulative_vtime_ms: self.cumulative_vtime_ms,
            params: self.params.clone(),
            behavior: self.behavior.clone(),
            adam: self.adam.clone(),
            replay: self.replay.clone(),
        }
    }

    /// Continues from a checkpoint. The configuration must match the one that
    /// wrote it, except that `epochs` may be raised.
    pub fn resume(config: TrainConfig, tasks: Vec<Task>, held_out: Vec<Task>, ckpt: Checkpoint) -> Result<Self> {
        let saved = TrainConfig::from_toml(&ckpt.config_text)?;
        let comparable = TrainConfig {
            epochs: config.epochs,
            ..saved
        };
        if comparable != config {
            return Err(Error::config("checkpoint was written with a different configuration"));
        }
        if ckpt.epochs_done > config.epochs {
            return Err(Error::config(format!(
                "checkpoint has {} epochs, configuration asks for {}",
                ckpt.epochs_done, config.epochs
            )));
        }
        let mut t = Trainer::new(config, tasks, held_out, ckpt.behavior)?;
        if ckpt.params.shape != t.params.shape {
            return Err(Error::config("checkpoint parameters have the wrong shape"));
        }
        t.params = ckpt.params;
        t.adam = ckpt.adam;
        t.replay = ckpt.replay;
        t.epochs_done = ckpt.epochs_done;
        t.step = ckpt.step;
        t.cumulative_vtime_ms = ckpt.cumulative_vtime_ms;
        Ok(t)
    }
}

/// All (group, trajectory) pairs of groups whose advantages are computed.
/// Groups still in the collected phase are refused.
pub fn training_items(groups: &[RolloutGroup]) -> Result<Vec<(usize, usize)>> {
    let mut items = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        g.require_phase(GroupPhase::Advantaged)?;
        items.extend((0..g.len()).map(|ti| (gi, ti)));
    }
    Ok(items)
}

pub const AUDIT_FILE: &str = "replay_audit.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_PARAMS_FILE: &str = "final.params";

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs_done: usize,
    pub steps: u64,
}

/// Trains inside `run_dir`, writing `config.toml`, `metrics.csv`, the replay
/// audit log and one checkpoint per epoch. With `resume`, continues from the
/// newest checkpoint and drops any metrics written after it.
pub fn train_in_dir(
    run_dir: &Path,
    config: TrainConfig,
    tasks: Vec<Task>,
    held_out: Vec<Task>,
    baseline: PolicyParams,
    resume: bool,
) -> Result<RunSummary> {
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics = run_dir.join(METRICS_FILE);
    let audit = run_dir.join(AUDIT_FILE);
    let latest = if resume { latest_checkpoint(&ckpt_dir)? } else { None };
    let mut trainer = match latest {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let t = Trainer::resume(config, tasks, held_out, ckpt)?;
            let rows: Vec<MetricsRow> = if metrics.exists() {
                read_metrics(&metrics)?
                    .into_iter()
                    .filter(|r| r.step <= t.step)
                    .collect()
            } else {
                Vec::new()
            };
            write_metrics(&metrics, &rows)?;
            let events: Vec<AuditEvent> = if audit.exists() {
                read_jsonl::<AuditEvent>(&audit)?
                    .into_iter()
                    .filter(|e| e.epoch() < t.epochs_done)
                    .collect()
            } else {
                Vec::new()
            };
            write_jsonl(&audit, &events)?;
            t
        }
        None => {
            let t = Trainer::new(config, tasks, held_out, baseline)?;
            write_metrics(&metrics, &[])?;
            write_jsonl::<AuditEvent>(&audit, &[])?;
            t
        }
    };
    let cfg_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, trainer.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    while !trainer.is_finished() {
        let audit_start = trainer.audit.len();
        let rows = trainer.run_epoch()?;
        append_metrics(&metrics, &rows)?;
        append_jsonl(&audit, &trainer.audit[audit_start..])?;
        trainer.checkpoint().save(&checkpoint_path(&ckpt_dir, trainer.epochs_done))?;
    }
    save_params(&run_dir.join(FINAL_PARAMS_FILE), &trainer.params)?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        epochs_done: trainer.epochs_done,
        steps: trainer.step,
    })
}

#[cfg(test)]
mod tests;
