//! Parallel rollout: logical environment workers feed a central batched
//! inference service, scheduled over a virtual clock.
//!
//! Episodes run in batches of `n_envs` (one episode per worker). Inside a
//! batch every worker alternates between waiting for an action and executing
//! it (`os_delay_per_step`); environment delays on different workers overlap.
//! The service is greedy: whenever it is free it takes every pending request
//! and charges `infer_base_cost + infer_per_item_cost * batch_size`.
//!
//! Every episode samples from its own RNG stream derived from the epoch seed
//! and its position in the workload, so the trajectories are the same for any
//! worker count or schedule; only the time accounting changes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{derive_seed, rollout_episode, EpisodeRunner, Policy, StepContext};
use crate::env::{Observation, Task, DEFAULT_MAX_STEPS};
use crate::error::{Error, Result};
use crate::grpo::RolloutGroup;
use crate::policy::{HiddenState, PolicyParams};
use crate::trajectory::{StepRecord, TokenStep, Trajectory};

/// Virtual-millisecond cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub os_delay_per_step: u64,
    pub infer_base_cost: u64,
    pub infer_per_item_cost: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            os_delay_per_step: 1500,
            infer_base_cost: 900,
            infer_per_item_cost: 55,
        }
    }
}

impl LatencyModel {
    pub fn batch_cost(&self, batch_size: usize) -> u64 {
        self.infer_base_cost + self.infer_per_item_cost * batch_size as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub n_envs: usize,
    pub group_size: usize,
    pub max_steps: usize,
    pub rollout_temperature: f64,
    pub latency: LatencyModel,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            n_envs: 256,
            group_size: 8,
            max_steps: DEFAULT_MAX_STEPS,
            rollout_temperature: 1.0,
            latency: LatencyModel::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 {
            return Err(Error::config("n_envs must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        if !(self.rollout_temperature > 0.0) {
            return Err(Error::config("rollout temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub n_envs: usize,
    pub episodes: usize,
    /// Virtual duration of each batch of episodes.
    pub batch_times: Vec<u64>,
    pub per_epoch_vtime: u64,
    pub inference_calls: u64,
    pub inference_items: u64,
    pub max_batch_occupancy: usize,
}

impl ThroughputReport {
    /// Mean virtual time of one batch.
    pub fn per_batch_vtime(&self) -> f64 {
        if self.batch_times.is_empty() {
            0.0
        } else {
            self.batch_times.iter().sum::<u64>() as f64 / self.batch_times.len() as f64
        }
    }

    pub fn mean_batch_occupancy(&self) -> f64 {
        if self.inference_calls == 0 {
            0.0
        } else {
            self.inference_items as f64 / self.inference_calls as f64
        }
    }
}

/// Seed of episode `index` within a workload seeded by `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// The centralized policy-evaluation service and its cost accounting.
pub struct InferenceService<'p> {
    policy: &'p dyn Policy,
    latency: LatencyModel,
    pub calls: u64,
    pub items: u64,
    pub max_batch: usize,
}

impl<'p> InferenceService<'p> {
    pub fn new(policy: &'p dyn Policy, latency: LatencyModel) -> Self {
        InferenceService {
            policy,
            latency,
            calls: 0,
            items: 0,
            max_batch: 0,
        }
    }

    /// Evaluates a batch of requests, each with its own RNG stream. Results are
    /// exactly what per-request calls would return. Returns the virtual cost.
    pub fn batched_infer(
        &mut self,
        requests: &[StepContext<'_>],
        temperature: f64,
        rngs: &mut [&mut ChaCha8Rng],
    ) -> Result<(Vec<TokenStep>, u64)> {
        if requests.is_empty() || requests.len() != rngs.len() {
            return Err(Error::usage(format!(
                "batched inference with {} requests and {} rng streams",
                requests.len(),
                rngs.len()
            )));
        }
        let out = requests
            .iter()
            .zip(rngs.iter_mut())
            .map(|(ctx, rng)| self.policy.act(ctx, temperature, rng))
            .collect::<Result<Vec<_>>>()?;
        self.calls += 1;
        self.items += requests.len() as u64;
        self.max_batch = self.max_batch.max(requests.len());
        Ok((out, self.latency.batch_cost(requests.len())))
    }
}

impl PolicyParams {
    /// Batched form of [`PolicyParams::sample_step`].
    pub fn batched_sample(
        &self,
        requests: &[(HiddenState, f64)],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<Vec<TokenStep>> {
        if requests.len() != rngs.len() {
            return Err(Error::usage("one rng stream per request required"));
        }
        requests
            .iter()
            .zip(rngs.iter_mut())
            .map(|((hidden, t), rng)| self.sample_step(hidden, *t, rng))
            .collect()
    }
}

struct Slot<'t> {
    episode: usize,
    runner: EpisodeRunner,
    rng: ChaCha8Rng,
    task: &'t Task,
    /// Virtual time at which the worker's next request is submitted, or at
    /// which it finished.
    ready_at: u64,
}

/// Runs `G` episodes for every task on the virtual clock.
pub fn run_epoch(
    tasks: &[Task],
    policy: &dyn Policy,
    config: &RolloutConfig,
    seed: u64,
) -> Result<(Vec<RolloutGroup>, ThroughputReport)> {
    config.validate()?;
    let (trajectories, report) = run_episodes(tasks, config.group_size, policy, config, seed)?;
    let groups = collect_groups(tasks, config.group_size, trajectories.into_iter())?;
    Ok((groups, report))
}

/// Runs `per_task` episodes for every task on the virtual clock and returns
/// them task-major. `config.group_size` is ignored.
pub fn run_episodes(
    tasks: &[Task],
    per_task: usize,
    policy: &dyn Policy,
    config: &RolloutConfig,
    seed: u64,
) -> Result<(Vec<Trajectory>, ThroughputReport)> {
    RolloutConfig {
        group_size: 2,
        ..*config
    }
    .validate()?;
    if tasks.is_empty() || per_task == 0 {
        return Err(Error::usage("rollout needs at least one task and one episode per task"));
    }
    let g = per_task;
    let total = tasks.len() * g;
    let mut finished: Vec<Option<Trajectory>> = vec![None; total];
    let mut service = InferenceService::new(policy, config.latency);
    let mut report = ThroughputReport {
        n_envs: config.n_envs,
        episodes: total,
        ..ThroughputReport::default()
    };
    let os_delay = config.latency.os_delay_per_step;

    for batch_start in (0..total).step_by(config.n_envs) {
        let batch_end = (batch_start + config.n_envs).min(total);
        let mut slots = (batch_start..batch_end)
            .map(|e| {
                let task = &tasks[e / g];
                let s = episode_seed(seed, e);
                Ok(Slot {
                    episode: e,
                    runner: EpisodeRunner::start(task, s, Some(config.max_steps))?,
                    rng: ChaCha8Rng::seed_from_u64(s),
                    task,
                    ready_at: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut service_free = 0u64;
        loop {
            let live: Vec<usize> = (0..slots.len()).filter(|&i| !slots[i].runner.is_done()).collect();
            let Some(earliest) = live.iter().map(|&i| slots[i].ready_at).min() else {
                break;
            };
            let start = service_free.max(earliest);
            let batch: Vec<usize> = live.into_iter().filter(|&i| slots[i].ready_at <= start).collect();

            let tokens = {
                let mut contexts = Vec::with_capacity(batch.len());
                let mut rngs = Vec::with_capacity(batch.len());
                let mut rest: &mut [Slot<'_>] = &mut slots;
                let mut base = 0;
                for &i in &batch {
                    let (_, tail) = std::mem::take(&mut rest).split_at_mut(i - base);
                    let (slot, after) = tail.split_first_mut().expect("index in range");
                    contexts.push(slot.runner.context());
                    rngs.push(&mut slot.rng);
                    rest = after;
                    base = i + 1;
                }
                let (tokens, cost) =
                    service.batched_infer(&contexts, config.rollout_temperature, &mut rngs)?;
                service_free = start + cost;
                tokens
            };
            for (&i, t) in batch.iter().zip(tokens) {
                slots[i].runner.apply(t)?;
                slots[i].ready_at = service_free + os_delay;
            }
        }
        let batch_time = slots.iter().map(|s| s.ready_at).max().unwrap_or(0);
        report.batch_times.push(batch_time);
        report.per_epoch_vtime += batch_time;
        for slot in slots {
            finished[slot.episode] = Some(slot.runner.finish(policy.version())?);
            debug_assert_eq!(slot.task.task_id, tasks[slot.episode / g].task_id);
        }
    }
    report.inference_calls = service.calls;
    report.inference_items = service.items;
    report.max_batch_occupancy = service.max_batch;
    let trajectories = finished.into_iter().map(|t| t.expect("episode ran")).collect();
    Ok((trajectories, report))
}

fn collect_groups(
    tasks: &[Task],
    g: usize,
    trajectories: impl Iterator<Item = Trajectory>,
) -> Result<Vec<RolloutGroup>> {
    let mut all: Vec<Trajectory> = trajectories.collect();
    let mut groups = Vec::with_capacity(tasks.len());
    for task in tasks.iter().rev() {
        let members = all.split_off(all.len() - g);
        groups.push(RolloutGroup::new(task.task_id, members)?);
    }
    groups.reverse();
    Ok(groups)
}

/// One group for one task, played serially. Identical to the task's group in
/// a single-task [`run_epoch`] with the same seed.
pub fn run_group(task: &Task, policy: &dyn Policy, config: &RolloutConfig, seed: u64) -> Result<RolloutGroup> {
    config.validate()?;
    let trajectories = (0..config.group_size)
        .map(|e| {
            let s = episode_seed(seed, e);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rollout_episode(
                policy,
                task,
                s,
                config.rollout_temperature,
                Some(config.max_steps),
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::new(task.task_id, trajectories)
}

struct Request<'t> {
    task: &'t Task,
    history: Vec<StepRecord>,
    current: Observation,
    rng: ChaCha8Rng,
    reply: mpsc::Sender<Result<(TokenStep, ChaCha8Rng)>>,
}

/// Same workload as [`run_epoch`] on real OS threads: `n_envs` worker threads
/// and one inference thread that drains every pending request per batch.
/// Produces the same groups; reports batch statistics but no virtual time.
pub fn run_epoch_threaded(
    tasks: &[Task],
    policy: &dyn Policy,
    config: &RolloutConfig,
    seed: u64,
) -> Result<(Vec<RolloutGroup>, ThroughputReport)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::usage("run_epoch needs at least one task"));
    }
    let g = config.group_size;
    let total = tasks.len() * g;
    let next = AtomicUsize::new(0);
    let temperature = config.rollout_temperature;
    let (req_tx, req_rx) = mpsc::channel::<Request<'_>>();

    let (results, stats) = std::thread::scope(|scope| {
        let service = scope.spawn(move || {
            let mut calls = 0u64;
            let mut items = 0u64;
            let mut max_batch = 0usize;
            while let Ok(first) = req_rx.recv() {
                let mut batch = vec![first];
                while let Ok(more) = req_rx.try_recv() {
                    batch.push(more);
                }
                calls += 1;
                items += batch.len() as u64;
                max_batch = max_batch.max(batch.len());
                for mut req in batch {
                    let ctx = StepContext {
                        task: req.task,
                        history: &req.history,
                        current: &req.current,
                    };
                    let out = policy.act(&ctx, temperature, &mut req.rng).map(|t| (t, req.rng));
                    // a worker that hung up has already failed
                    let _ = req.reply.send(out);
                }
            }
            (calls, items, max_batch)
        });

        let workers: Vec<_> = (0..config.n_envs.min(total))
            .map(|_| {
                let req_tx = req_tx.clone();
                let next = &next;
                scope.spawn(move || -> Result<Vec<(usize, Trajectory)>> {
                    let mut done = Vec::new();
                    let (reply_tx, reply_rx) = mpsc::channel();
                    loop {
                        let e = next.fetch_add(1, Ordering::SeqCst);
                        if e >= total {
                            return Ok(done);
                        }
                        let task = &tasks[e / g];
                        let s = episode_seed(seed, e);
                        let mut runner = EpisodeRunner::start(task, s, Some(config.max_steps))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        while !runner.is_done() {
                            let ctx = runner.context();
                            req_tx
                                .send(Request {
                                    task,
                                    history: ctx.history.to_vec(),
                                    current: ctx.current.clone(),
                                    rng,
                                    reply: reply_tx.clone(),
                                })
                                .map_err(|_| Error::usage("inference service stopped"))?;
                            let (tokens, back) = reply_rx
                                .recv()
                                .map_err(|_| Error::usage("inference service stopped"))??;
                            rng = back;
                            runner.apply(tokens)?;
                        }
                        done.push((e, runner.finish(policy.version())?));
                    }
                })
            })
            .collect();
        drop(req_tx);
        let mut results = Vec::new();
        for w in workers {
            match w.join() {
                Ok(r) => results.push(r),
                Err(_) => results.push(Err(Error::usage("rollout worker panicked"))),
            }
        }
        let stats = service.join().unwrap_or((0, 0, 0));
        (results, stats)
    });

    let mut finished: Vec<Option<Trajectory>> = vec![None; total];
    for r in results {
        for (e, t) in r? {
            finished[e] = Some(t);
        }
    }
    let trajectories = finished
        .into_iter()
        .map(|t| t.ok_or_else(|| Error::usage("episode missing from threaded rollout")))
        .collect::<Result<Vec<_>>>()?;
    let groups = collect_groups(tasks, g, trajectories.into_iter())?;
    let report = ThroughputReport {
        n_envs: config.n_envs,
        episodes: total,
        inference_calls: stats.0,
        inference_items: stats.1,
        max_batch_occupancy: stats.2,
        ..ThroughputReport::default()
    };
    Ok((groups, report))
}
