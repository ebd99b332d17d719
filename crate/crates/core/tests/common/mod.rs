//! Helpers shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arpo::agent::{rollout_episode, ScriptedPolicy};
use arpo::env::{generate_task_suite, SuiteSpec, Task};
use arpo::grpo::{minibatch_surrogate, ClipConfig, LossItem, RolloutGroup};
use arpo::policy::{PolicyParams, PolicyShape};
use arpo::replay::ReplayBuffer;
use arpo::trajectory::{Origin, Trajectory};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that coordinates with an
/// essentially zero gradient are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub const SMALL_SHAPE: PolicyShape = PolicyShape { embed: 6, hidden: 5 };

/// Initialization plus a uniform perturbation, so that no tensor is near zero.
pub fn random_params(seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(SMALL_SHAPE, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for v in &mut p.data {
        *v += rng.gen_range(-0.15..0.15);
    }
    p
}

pub fn random_task(seed: u64) -> Task {
    let mut tasks = generate_task_suite(&SuiteSpec::new(seed, 3, 1, 1..=4)).unwrap();
    let i = (seed % tasks.len() as u64) as usize;
    tasks.swap_remove(i)
}

/// A trajectory of `task`, alternating between the learned policy and scripted
/// ones so that malformed, meta and primitive tokens all show up.
pub fn any_trajectory(params: &PolicyParams, task: &Task, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = Some(6);
    match seed % 3 {
        0 => rollout_episode(params, task, seed, 1.0, cap, &mut rng).unwrap(),
        1 => rollout_episode(&ScriptedPolicy::Uniform, task, seed, 1.0, cap, &mut rng).unwrap(),
        _ => rollout_episode(&ScriptedPolicy::NoisyOracle { noise: 0.5 }, task, seed, 1.0, cap, &mut rng).unwrap(),
    }
}

/// Max relative error between `analytic` and central differences of `f` over
/// up to `n_nonzero` coordinates with a nonzero analytic gradient plus
/// `n_zero` coordinates without one.
pub fn fd_check(
    params: &PolicyParams,
    analytic: &[f64],
    f: impl Fn(&PolicyParams) -> f64,
    n_nonzero: usize,
    n_zero: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let (nonzero, zero): (Vec<usize>, Vec<usize>) = (0..analytic.len()).partition(|&i| analytic[i] != 0.0);
    let mut coords = Vec::new();
    for (pool, n) in [(&nonzero, n_nonzero), (&zero, n_zero)] {
        for _ in 0..n.min(pool.len()) {
            coords.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &i in &coords {
        let x = params.data[i];
        probe.data[i] = x + FD_STEP;
        let up = f(&probe);
        probe.data[i] = x - FD_STEP;
        let down = f(&probe);
        probe.data[i] = x;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    (worst, coords.len())
}

/// Gradient of Σ w_t log π(token_t) for one random instance.
pub fn policy_gradient_instance(seed: u64) -> (f64, usize) {
    let params = random_params(seed);
    let task = random_task(seed);
    let traj = any_trajectory(&params, &task, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let temperature = [1.0, 0.6, 1.7][(seed % 3) as usize];
    let weights: Vec<f64> = (0..traj.token_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = params.backward(&task, &traj, &weights, temperature).unwrap();
    let objective = |p: &PolicyParams| {
        let lp = p.trajectory_logprobs(&task, &traj, temperature).unwrap();
        lp.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>()
    };
    fd_check(&params, &analytic, objective, 40, 10, &mut rng)
}

/// Keeps every importance ratio at least this far from a clip boundary so
/// the finite-difference step never crosses a kink.
const KINK_MARGIN: f64 = 5e-3;

/// Gradient of the clipped surrogate over a small group for one random
/// instance. Behavior log-probabilities are offset from the current ones so
/// that ratios fall on both sides of the clip range.
pub fn surrogate_gradient_instance(seed: u64) -> (f64, usize) {
    let params = random_params(seed);
    let task = random_task(seed);
    let clip = ClipConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(17) + 3);
    let bounds = [1.0 - clip.eps_low, 1.0 + clip.eps_high];
    let mut trajectories = Vec::new();
    for k in 0..4 {
        let mut t = any_trajectory(&params, &task, seed * 10 + k);
        let current = params.trajectory_logprobs(&task, &t, 1.0).unwrap();
        for (s, step) in t.steps.iter_mut().enumerate() {
            for j in 0..2 {
                let offset = loop {
                    let d: f64 = rng.gen_range(-0.5..0.5);
                    if bounds.iter().all(|b| ((-d).exp() - b).abs() > KINK_MARGIN) {
                        break d;
                    }
                };
                step.tokens.logprob_untempered[j] = current[2 * s + j] + offset;
            }
        }
        trajectories.push(t);
    }
    let advantages: Vec<f64> = (0..trajectories.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let items: Vec<LossItem<'_>> = trajectories
        .iter()
        .zip(&advantages)
        .map(|(trajectory, &advantage)| LossItem {
            task: &task,
            trajectory,
            advantage,
        })
        .collect();
    let out = minibatch_surrogate(&params, &items, &clip).unwrap();
    let objective = |p: &PolicyParams| minibatch_surrogate(p, &items, &clip).unwrap().loss;
    fd_check(&params, &out.gradient, objective, 40, 10, &mut rng)
}

/// Outcome of a randomized replay simulation.
#[derive(Debug, Default)]
pub struct ReplaySim {
    pub events: usize,
    pub injections: usize,
    pub guarded_groups: usize,
    pub evictions: u64,
}

/// Drives a buffer through `events` collect/insert/inject rounds on random
/// tasks with random per-task success rates and checks every invariant after
/// each round against a shadow FIFO model.
pub fn replay_simulation(events: usize, capacity: usize, seed: u64) -> Result<ReplaySim, String> {
    let n_tasks = 12u32;
    let tasks: Vec<Task> = generate_task_suite(&SuiteSpec::new(seed, n_tasks as usize, 0, 1..=2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut template_rng = ChaCha8Rng::seed_from_u64(0);
    let win: Vec<Trajectory> = tasks
        .iter()
        .map(|t| rollout_episode(&ScriptedPolicy::Oracle, t, 0, 1.0, None, &mut template_rng).unwrap())
        .collect();
    let lose: Vec<Trajectory> = tasks
        .iter()
        .map(|t| rollout_episode(&ScriptedPolicy::NeverFinish, t, 0, 1.0, Some(2), &mut template_rng).unwrap())
        .collect();
    // success probability per task; some tasks almost never succeed
    let p: Vec<f64> = (0..n_tasks).map(|i| [0.0, 0.02, 0.1, 0.3, 0.7][i as usize % 5]).collect();

    let mut buffer = ReplayBuffer::new(capacity);
    let mut shadow: BTreeMap<u32, VecDeque<u64>> = BTreeMap::new();
    let mut sim = ReplaySim::default();
    let mut next_id = 0u64;
    for event in 0..events {
        let task = rng.gen_range(0..n_tasks);
        let g = [2, 4, 8][rng.gen_range(0..3)];
        let members: Vec<Trajectory> = (0..g)
            .map(|_| {
                let mut t = if rng.gen_bool(p[task as usize]) {
                    win[task as usize].clone()
                } else {
                    lose[task as usize].clone()
                };
                t.seed = next_id;
                next_id += 1;
                t
            })
            .collect();
        let group = RolloutGroup::new(task, members).map_err(|e| e.to_string())?;
        for t in &group.trajectories {
            buffer.insert(t);
            if t.is_success() && capacity > 0 {
                let q = shadow.entry(task).or_default();
                q.push_back(t.seed);
                if q.len() > capacity {
                    q.pop_front();
                }
            }
        }
        let before = group.clone();
        let had_success_cached = shadow.get(&task).is_some_and(|q| !q.is_empty());
        let (after, injection) = buffer.maybe_inject(group, &mut rng).map_err(|e| e.to_string())?;

        if !before.all_failed() && after != before {
            return Err(format!("event {event}: group with a success was modified"));
        }
        if after.trajectories.iter().any(|t| t.task_id != task) {
            return Err(format!("event {event}: injection mixed tasks"));
        }
        if before.all_failed() && had_success_cached {
            sim.guarded_groups += 1;
            if !after.trajectories.iter().any(Trajectory::is_success) {
                return Err(format!("event {event}: all-fail group of task {task} left without a success"));
            }
            let changed: Vec<usize> = (0..g).filter(|&i| after.trajectories[i] != before.trajectories[i]).collect();
            if changed.len() != 1 || after.trajectories[changed[0]].origin != Origin::Replayed {
                return Err(format!("event {event}: expected exactly one replayed slot, got {changed:?}"));
            }
        }
        if injection.is_some() {
            sim.injections += 1;
        }
        for id in buffer.task_ids() {
            let entries: Vec<_> = buffer.entries(id).collect();
            if entries.len() > capacity {
                return Err(format!("event {event}: task {id} holds {} > {capacity}", entries.len()));
            }
            if entries.iter().any(|e| !e.trajectory.is_success()) {
                return Err(format!("event {event}: a failure was cached"));
            }
            if entries.windows(2).any(|w| w[0].inserted_at >= w[1].inserted_at) {
                return Err(format!("event {event}: queue of task {id} out of insertion order"));
            }
            let seeds: Vec<u64> = entries.iter().map(|e| e.trajectory.seed).collect();
            let expected: Vec<u64> = shadow.get(&id).map(|q| q.iter().copied().collect()).unwrap_or_default();
            if seeds != expected {
                return Err(format!("event {event}: task {id} holds {seeds:?}, FIFO model says {expected:?}"));
            }
        }
        sim.events += 1;
    }
    sim.evictions = buffer.eviction_count;
    Ok(sim)
}
