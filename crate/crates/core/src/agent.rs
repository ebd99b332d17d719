//! The acting interface shared by the learned policy and scripted policies,
//! and the single-episode driver used everywhere an episode is played out.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    parse_action, Environment, Observation, Task, Verb, ARG_COUNT, NO_ARG, VERB_COUNT,
};
use crate::error::{Error, Result};
use crate::policy::{sample_index, PolicyParams};
use crate::trajectory::{Origin, StepRecord, TokenStep, Trajectory};

/// Everything a policy may condition on at one decision point.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub task: &'a Task,
    pub history: &'a [StepRecord],
    pub current: &'a Observation,
}

pub trait Policy: Sync {
    /// Version stamped on every trajectory this policy generates.
    fn version(&self) -> u64;

    fn act(&self, ctx: &StepContext<'_>, temperature: f64, rng: &mut ChaCha8Rng) -> Result<TokenStep>;
}

impl Policy for PolicyParams {
    fn version(&self) -> u64 {
        self.version
    }

    fn act(&self, ctx: &StepContext<'_>, temperature: f64, rng: &mut ChaCha8Rng) -> Result<TokenStep> {
        let hidden = self.encode_history(ctx.task, ctx.history, ctx.current);
        self.sample_step(&hidden, temperature, rng)
    }
}

/// The action that makes progress on `task` from the screen `obs`.
pub fn oracle_tokens(task: &Task, obs: &Observation) -> (usize, usize) {
    if !task.feasible {
        return (Verb::Fail.index(), NO_ARG);
    }
    match task.goal_spec.get(obs.progress()) {
        Some(item) => item.tokens(),
        None => (Verb::Finish.index(), NO_ARG),
    }
}

/// Hand-written policies used as probes, demonstrators and test fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScriptedPolicy {
    /// Always the progress-making action.
    Oracle,
    /// The oracle action with probability `1 - noise`, otherwise a uniformly
    /// random well-formed action.
    NoisyOracle { noise: f64 },
    /// Uniform over all token pairs.
    Uniform,
    /// Waits forever.
    NeverFinish,
}

impl ScriptedPolicy {
    /// Exact (verb, argument | verb) probabilities at one decision point.
    fn token_probs(&self, task: &Task, obs: &Observation) -> (Vec<f64>, Vec<Vec<f64>>) {
        let uniform_verb = vec![1.0 / VERB_COUNT as f64; VERB_COUNT];
        let uniform_arg = vec![vec![1.0 / ARG_COUNT as f64; ARG_COUNT]; VERB_COUNT];
        let (ov, oa) = oracle_tokens(task, obs);
        let point = |v: usize, a: usize| {
            let mut verb = vec![0.0; VERB_COUNT];
            verb[v] = 1.0;
            let mut args = uniform_arg.clone();
            args[v] = vec![0.0; ARG_COUNT];
            args[v][a] = 1.0;
            (verb, args)
        };
        match *self {
            ScriptedPolicy::Oracle => point(ov, oa),
            ScriptedPolicy::NeverFinish => point(Verb::Wait.index(), NO_ARG),
            ScriptedPolicy::Uniform => (uniform_verb, uniform_arg),
            ScriptedPolicy::NoisyOracle { noise } => {
                // mixture of the oracle pair and a uniform draw over the
                // parseable pairs: every primitive on every widget, plus the
                // argument-free meta actions
                let valid = |v: usize, a: usize| parse_action(v, a).is_ok();
                let n_valid = (0..VERB_COUNT)
                    .flat_map(|v| (0..ARG_COUNT).map(move |a| (v, a)))
                    .filter(|&(v, a)| valid(v, a))
                    .count() as f64;
                let joint = |v: usize, a: usize| {
                    let base = if valid(v, a) { noise / n_valid } else { 0.0 };
                    base + if (v, a) == (ov, oa) { 1.0 - noise } else { 0.0 }
                };
                let verb: Vec<f64> = (0..VERB_COUNT)
                    .map(|v| (0..ARG_COUNT).map(|a| joint(v, a)).sum())
                    .collect();
                let args = (0..VERB_COUNT)
                    .map(|v| {
                        if verb[v] > 0.0 {
                            (0..ARG_COUNT).map(|a| joint(v, a) / verb[v]).collect()
                        } else {
                            uniform_arg[v].clone()
                        }
                    })
                    .collect();
                (verb, args)
            }
        }
    }
}

impl Policy for ScriptedPolicy {
    fn version(&self) -> u64 {
        0
    }

    fn act(&self, ctx: &StepContext<'_>, temperature: f64, rng: &mut ChaCha8Rng) -> Result<TokenStep> {
        // Scripted policies ignore temperature; their probabilities are fixed.
        let (verb_p, arg_p) = self.token_probs(ctx.task, ctx.current);
        let verb = sample_index(&verb_p, rng);
        let arg = sample_index(&arg_p[verb], rng);
        let lp = [verb_p[verb].ln(), arg_p[verb][arg].ln()];
        Ok(TokenStep {
            verb_token: verb,
            arg_token: arg,
            logprob_behavior: lp,
            logprob_untempered: lp,
            temperature,
        })
    }
}

/// Per-episode driver: owns the environment and the transcript so far. The
/// episode's RNG stream is held by the caller so that batched schedulers can
/// lend it to the inference service.
#[derive(Clone, Debug)]
pub struct EpisodeRunner {
    env: Environment,
    steps: Vec<StepRecord>,
    current: Observation,
}

impl EpisodeRunner {
    pub fn start(task: &Task, seed: u64, step_cap: Option<usize>) -> Result<Self> {
        let cap = step_cap.unwrap_or(task.max_steps);
        let (env, current) = Environment::reset_with_cap(task, seed, cap)?;
        Ok(EpisodeRunner {
            env,
            steps: Vec::new(),
            current,
        })
    }

    pub fn is_done(&self) -> bool {
        self.env.is_terminal()
    }

    pub fn context(&self) -> StepContext<'_> {
        StepContext {
            task: self.env.task(),
            history: &self.steps,
            current: &self.current,
        }
    }

    /// Applies one policy output to the environment.
    pub fn apply(&mut self, tokens: TokenStep) -> Result<bool> {
        let parsed = parse_action(tokens.verb_token, tokens.arg_token);
        let (next, done) = self.env.step(&parsed)?;
        let observation = std::mem::replace(&mut self.current, next);
        self.steps.push(StepRecord {
            observation,
            tokens,
            parsed,
        });
        Ok(done)
    }

    /// Advances one step with `policy`, drawing from this episode's stream.
    pub fn advance(&mut self, policy: &dyn Policy, temperature: f64, rng: &mut ChaCha8Rng) -> Result<bool> {
        let tokens = policy.act(&self.context(), temperature, rng)?;
        self.apply(tokens)
    }

    pub fn finish(self, behavior_version: u64) -> Result<Trajectory> {
        let reward = self.env.terminal_reward()?;
        let termination = self
            .env
            .termination()
            .ok_or_else(|| Error::usage("episode not terminated"))?;
        Ok(Trajectory {
            task_id: self.env.task().task_id,
            seed: self.env.seed(),
            token_count: 2 * self.steps.len(),
            steps: self.steps,
            reward,
            termination,
            origin: Origin::Fresh,
            behavior_version,
        })
    }
}

/// Plays one full episode serially.
pub fn rollout_episode(
    policy: &dyn Policy,
    task: &Task,
    seed: u64,
    temperature: f64,
    step_cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut runner = EpisodeRunner::start(task, seed, step_cap)?;
    while !runner.is_done() {
        runner.advance(policy, temperature, rng)?;
    }
    runner.finish(policy.version())
}

/// Derives independent stream seeds from a base seed and a sequence of keys
/// (splitmix64 finalizer applied per key).
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    let mut x = base;
    for &k in keys {
        x ^= k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
