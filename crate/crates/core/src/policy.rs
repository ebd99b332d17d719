//! Sequence policy: pooled history embeddings, a two-layer tanh MLP and two
//! softmax heads (verb, then argument conditioned on the verb). Gradients are
//! derived by hand.
//!
//! The history encoding is the sum of position-tagged embedding rows for
//!
//! - the instruction: each goal interaction tagged by its offset from the
//!   progress shown on screen (completed items share a "done" tag), plus a
//!   status row (in progress / complete / infeasible request);
//! - the current screen;
//! - every earlier screen and every earlier token, tagged by step index;
//! - the current step index.
//!
//! Nothing is truncated: every earlier observation and token contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    Observation, Task, ARG_COUNT, INTERACTION_COUNT, MAX_GOAL_LEN, MAX_STEPS_LIMIT, OBS_LEN,
    OBS_VALUE_COUNT, VERB_COUNT,
};
use crate::error::{Error, Result};
use crate::trajectory::{StepRecord, TokenStep, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        PolicyShape {
            embed: 32,
            hidden: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, r: usize) -> usize {
        debug_assert!(r < self.rows, "{}: row {r} of {}", self.name, self.rows);
        self.offset + r * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

const STATUS_IN_PROGRESS: usize = 0;
const STATUS_COMPLETE: usize = 1;
const STATUS_INFEASIBLE: usize = 2;
/// Instruction tag for goal items already completed.
const DONE_SLOT: usize = MAX_GOAL_LEN;

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub shape: PolicyShape,
    pub instr: Tensor,
    pub instr_status: Tensor,
    pub cur_obs: Tensor,
    pub hist_obs: Tensor,
    pub hist_verb: Tensor,
    pub hist_arg: Tensor,
    pub step_pos: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub verb_w: Tensor,
    pub verb_b: Tensor,
    pub arg_w: Tensor,
    pub arg_b: Tensor,
    pub arg_verb: Tensor,
    pub total: usize,
}

impl Layout {
    pub fn new(shape: PolicyShape) -> Self {
        let (d, h) = (shape.embed, shape.hidden);
        let mut offset = 0;
        let mut next = |name, rows: usize, cols: usize| {
            let t = Tensor {
                name,
                offset,
                rows,
                cols,
            };
            offset += rows * cols;
            t
        };
        let instr = next("instr", (MAX_GOAL_LEN + 1) * INTERACTION_COUNT, d);
        let instr_status = next("instr_status", 3, d);
        let cur_obs = next("cur_obs", OBS_LEN * OBS_VALUE_COUNT, d);
        let hist_obs = next("hist_obs", MAX_STEPS_LIMIT * OBS_LEN * OBS_VALUE_COUNT, d);
        let hist_verb = next("hist_verb", MAX_STEPS_LIMIT * VERB_COUNT, d);
        let hist_arg = next("hist_arg", MAX_STEPS_LIMIT * ARG_COUNT, d);
        let step_pos = next("step_pos", MAX_STEPS_LIMIT + 1, d);
        let w1 = next("w1", h, d);
        let b1 = next("b1", 1, h);
        let w2 = next("w2", h, h);
        let b2 = next("b2", 1, h);
        let verb_w = next("verb_w", VERB_COUNT, h);
        let verb_b = next("verb_b", 1, VERB_COUNT);
        let arg_w = next("arg_w", ARG_COUNT, h);
        let arg_b = next("arg_b", 1, ARG_COUNT);
        let arg_verb = next("arg_verb", VERB_COUNT, ARG_COUNT);
        Layout {
            shape,
            instr,
            instr_status,
            cur_obs,
            hist_obs,
            hist_verb,
            hist_arg,
            step_pos,
            w1,
            b1,
            w2,
            b2,
            verb_w,
            verb_b,
            arg_w,
            arg_b,
            arg_verb,
            total: offset,
        }
    }

    pub fn tensors(&self) -> [Tensor; 16] {
        [
            self.instr,
            self.instr_status,
            self.cur_obs,
            self.hist_obs,
            self.hist_verb,
            self.hist_arg,
            self.step_pos,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.verb_w,
            self.verb_b,
            self.arg_w,
            self.arg_b,
            self.arg_verb,
        ]
    }

    /// Tensor containing flat index `i`.
    pub fn locate(&self, i: usize) -> Option<Tensor> {
        self.tensors().into_iter().find(|t| t.range().contains(&i))
    }

    fn is_embedding(&self, t: &Tensor) -> bool {
        t.offset < self.w1.offset
    }
}

/// All learnable parameters, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub data: Vec<f64>,
    pub version: u64,
}

/// Pooled history encoding plus the embedding rows that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub pooled: Vec<f64>,
    rows: Vec<usize>,
}

/// Per-step action distribution: verb probabilities and, for each verb, the
/// argument probabilities conditioned on it.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub verb: Vec<f64>,
    pub arg_given_verb: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Activations {
    z1: Vec<f64>,
    z2: Vec<f64>,
    verb_logits: Vec<f64>,
    /// Argument logits before the verb-conditioning row is added.
    arg_base: Vec<f64>,
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// log softmax(logits / temperature), numerically stable.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Inverse-CDF draw; never returns a zero-probability index.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Wᵀ y for a row-major `W` with `y.len()` rows.
fn matvec_t_add(out: &mut [f64], w: &[f64], y: &[f64]) {
    let cols = out.len();
    for (row, &yi) in w.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

fn outer_add(grad: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &yi) in grad.chunks_exact_mut(cols).zip(y) {
        if yi != 0.0 {
            for (g, &xj) in row.iter_mut().zip(x) {
                *g += yi * xj;
            }
        }
    }
}

impl PolicyParams {
    /// Random initialization: small embeddings, fan-in scaled weights and
    /// near-zero heads so the initial policy is close to uniform.
    pub fn init(shape: PolicyShape, seed: u64) -> Self {
        let layout = Layout::new(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total];
        for t in layout.tensors() {
            let scale = if layout.is_embedding(&t) {
                0.05
            } else if t.name.starts_with('b') || t.name.ends_with("_b") {
                0.0
            } else if t == layout.w1 || t == layout.w2 {
                1.0 / (t.cols as f64).sqrt()
            } else {
                0.01
            };
            for v in &mut data[t.range()] {
                *v = if scale == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-scale..scale)
                };
            }
        }
        PolicyParams {
            shape,
            data,
            version: 0,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Pools the full history preceding `current`.
    pub fn encode_history(
        &self,
        task: &Task,
        prefix: &[StepRecord],
        current: &Observation,
    ) -> HiddenState {
        let layout = self.layout();
        let d = self.shape.embed;
        let mut rows = Vec::with_capacity(16 + prefix.len() * (OBS_LEN + 2));

        let goal = &task.goal_spec;
        if task.feasible {
            let progress = current.progress().min(goal.len());
            for (j, item) in goal.iter().enumerate() {
                let slot = if j < progress { DONE_SLOT } else { j - progress };
                rows.push(layout.instr.row(slot * INTERACTION_COUNT + item.index()));
            }
            let status = if progress == goal.len() {
                STATUS_COMPLETE
            } else {
                STATUS_IN_PROGRESS
            };
            rows.push(layout.instr_status.row(status));
        } else {
            rows.push(layout.instr_status.row(STATUS_INFEASIBLE));
        }

        let obs_value = |v: u8| (v as usize).min(OBS_VALUE_COUNT - 1);
        for (e, &v) in current.widget_states.iter().enumerate() {
            rows.push(layout.cur_obs.row(e * OBS_VALUE_COUNT + obs_value(v)));
        }
        let last_pos = MAX_STEPS_LIMIT - 1;
        for (t, rec) in prefix.iter().enumerate() {
            let t = t.min(last_pos);
            for (e, &v) in rec.observation.widget_states.iter().enumerate() {
                rows.push(
                    layout
                        .hist_obs
                        .row((t * OBS_LEN + e) * OBS_VALUE_COUNT + obs_value(v)),
                );
            }
            rows.push(layout.hist_verb.row(t * VERB_COUNT + rec.tokens.verb_token));
            rows.push(layout.hist_arg.row(t * ARG_COUNT + rec.tokens.arg_token));
        }
        rows.push(layout.step_pos.row(prefix.len().min(MAX_STEPS_LIMIT)));

        let mut pooled = vec![0.0; d];
        for &r in &rows {
            for (p, &v) in pooled.iter_mut().zip(&self.data[r..r + d]) {
                *p += v;
            }
        }
        HiddenState { pooled, rows }
    }

    fn activations(&self, hidden: &HiddenState) -> Activations {
        let l = self.layout();
        let p = &self.data;
        let h = self.shape.hidden;
        let mut z1 = p[l.b1.range()].to_vec();
        matvec_add(&mut z1, &p[l.w1.range()], &hidden.pooled);
        z1.iter_mut().for_each(|v| *v = v.tanh());
        let mut z2 = p[l.b2.range()].to_vec();
        matvec_add(&mut z2, &p[l.w2.range()], &z1);
        z2.iter_mut().for_each(|v| *v = v.tanh());
        debug_assert_eq!(z2.len(), h);
        let mut verb_logits = p[l.verb_b.range()].to_vec();
        matvec_add(&mut verb_logits, &p[l.verb_w.range()], &z2);
        let mut arg_base = p[l.arg_b.range()].to_vec();
        matvec_add(&mut arg_base, &p[l.arg_w.range()], &z2);
        Activations {
            z1,
            z2,
            verb_logits,
            arg_base,
        }
    }

    fn arg_logits(&self, act: &Activations, verb: usize) -> Vec<f64> {
        let l = self.layout();
        let cond = &self.data[l.arg_verb.row(verb)..l.arg_verb.row(verb) + ARG_COUNT];
        act.arg_base.iter().zip(cond).map(|(a, c)| a + c).collect()
    }

    pub fn action_distribution(
        &self,
        hidden: &HiddenState,
        temperature: f64,
    ) -> Result<ActionDistribution> {
        check_temperature(temperature)?;
        let act = self.activations(hidden);
        Ok(ActionDistribution {
            verb: softmax(&act.verb_logits, temperature),
            arg_given_verb: (0..VERB_COUNT)
                .map(|v| softmax(&self.arg_logits(&act, v), temperature))
                .collect(),
        })
    }

    /// Samples a (verb, argument) pair at `temperature` and records its
    /// log-probabilities under both the tempered and the temperature-1
    /// distributions.
    pub fn sample_step(
        &self,
        hidden: &HiddenState,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenStep> {
        check_temperature(temperature)?;
        let act = self.activations(hidden);
        let verb_lp = log_softmax(&act.verb_logits, temperature);
        let verb_probs: Vec<f64> = verb_lp.iter().map(|l| l.exp()).collect();
        let verb = sample_index(&verb_probs, rng);
        let arg_logits = self.arg_logits(&act, verb);
        let arg_lp = log_softmax(&arg_logits, temperature);
        let arg_probs: Vec<f64> = arg_lp.iter().map(|l| l.exp()).collect();
        let arg = sample_index(&arg_probs, rng);
        let untempered = if temperature == 1.0 {
            [verb_lp[verb], arg_lp[arg]]
        } else {
            [
                log_softmax(&act.verb_logits, 1.0)[verb],
                log_softmax(&arg_logits, 1.0)[arg],
            ]
        };
        Ok(TokenStep {
            verb_token: verb,
            arg_token: arg,
            logprob_behavior: [verb_lp[verb], arg_lp[arg]],
            logprob_untempered: untempered,
            temperature,
        })
    }

    /// Teacher-forced per-token log-probabilities, interleaved verb/argument.
    pub fn trajectory_logprobs(
        &self,
        task: &Task,
        trajectory: &Trajectory,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        check_temperature(temperature)?;
        Ok(self.forward_pass(task, trajectory, temperature).logprobs)
    }

    fn forward_pass(&self, task: &Task, trajectory: &Trajectory, temperature: f64) -> Pass {
        let mut steps = Vec::with_capacity(trajectory.steps.len());
        let mut logprobs = Vec::with_capacity(2 * trajectory.steps.len());
        for (k, rec) in trajectory.steps.iter().enumerate() {
            let hidden = self.encode_history(task, &trajectory.steps[..k], &rec.observation);
            let act = self.activations(&hidden);
            let verb_lp = log_softmax(&act.verb_logits, temperature);
            let arg_lp = log_softmax(&self.arg_logits(&act, rec.tokens.verb_token), temperature);
            logprobs.push(verb_lp[rec.tokens.verb_token]);
            logprobs.push(arg_lp[rec.tokens.arg_token]);
            steps.push(StepCache {
                hidden,
                act,
                verb_lp,
                arg_lp,
            });
        }
        Pass {
            steps,
            logprobs,
            temperature,
        }
    }

    /// Gradient of Σ_t weight_t · log π(token_t) with respect to all parameters.
    pub fn backward(
        &self,
        task: &Task,
        trajectory: &Trajectory,
        weights: &[f64],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.len()];
        self.weighted_backward(task, trajectory, temperature, &mut grad, |_| {
            Ok(weights.to_vec())
        })?;
        Ok(grad)
    }

    /// Runs one teacher-forced pass, lets `weigh` turn the per-token
    /// log-probabilities into per-token weights, and accumulates the gradient
    /// of Σ weight_t · log π(token_t) into `grad`. Returns the log-probabilities.
    pub fn weighted_backward<F>(
        &self,
        task: &Task,
        trajectory: &Trajectory,
        temperature: f64,
        grad: &mut [f64],
        weigh: F,
    ) -> Result<Vec<f64>>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        check_temperature(temperature)?;
        if grad.len() != self.len() {
            return Err(Error::usage(format!(
                "gradient buffer has {} entries, parameters have {}",
                grad.len(),
                self.len()
            )));
        }
        let pass = self.forward_pass(task, trajectory, temperature);
        let weights = weigh(&pass.logprobs)?;
        if weights.len() != trajectory.token_count || weights.len() != pass.logprobs.len() {
            return Err(Error::usage(format!(
                "task {}: {} weights for {} tokens",
                trajectory.task_id,
                weights.len(),
                pass.logprobs.len()
            )));
        }
        let l = self.layout();
        let p = &self.data;
        let (d, h) = (self.shape.embed, self.shape.hidden);
        let inv_t = 1.0 / pass.temperature;
        let mut dz2 = vec![0.0; h];
        let mut dz1 = vec![0.0; h];
        let mut dh = vec![0.0; d];
        for (k, (cache, rec)) in pass.steps.iter().zip(&trajectory.steps).enumerate() {
            let (wv, wa) = (weights[2 * k], weights[2 * k + 1]);
            if wv == 0.0 && wa == 0.0 {
                continue;
            }
            let verb = rec.tokens.verb_token;
            let arg = rec.tokens.arg_token;
            // d log softmax(x/T)[i] / dx = (onehot_i - p) / T
            let dverb: Vec<f64> = cache
                .verb_lp
                .iter()
                .enumerate()
                .map(|(i, lp)| wv * inv_t * ((i == verb) as u8 as f64 - lp.exp()))
                .collect();
            let darg: Vec<f64> = cache
                .arg_lp
                .iter()
                .enumerate()
                .map(|(i, lp)| wa * inv_t * ((i == arg) as u8 as f64 - lp.exp()))
                .collect();

            let z2 = &cache.act.z2;
            let z1 = &cache.act.z1;
            outer_add(&mut grad[l.verb_w.range()], &dverb, z2);
            grad[l.verb_b.range()]
                .iter_mut()
                .zip(&dverb)
                .for_each(|(g, v)| *g += v);
            outer_add(&mut grad[l.arg_w.range()], &darg, z2);
            grad[l.arg_b.range()]
                .iter_mut()
                .zip(&darg)
                .for_each(|(g, v)| *g += v);
            let row = l.arg_verb.row(verb);
            grad[row..row + ARG_COUNT]
                .iter_mut()
                .zip(&darg)
                .for_each(|(g, v)| *g += v);

            dz2.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&mut dz2, &p[l.verb_w.range()], &dverb);
            matvec_t_add(&mut dz2, &p[l.arg_w.range()], &darg);
            let da2: Vec<f64> = dz2
                .iter()
                .zip(z2)
                .map(|(g, z)| g * (1.0 - z * z))
                .collect();
            outer_add(&mut grad[l.w2.range()], &da2, z1);
            grad[l.b2.range()]
                .iter_mut()
                .zip(&da2)
                .for_each(|(g, v)| *g += v);

            dz1.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&mut dz1, &p[l.w2.range()], &da2);
            let da1: Vec<f64> = dz1
                .iter()
                .zip(z1)
                .map(|(g, z)| g * (1.0 - z * z))
                .collect();
            outer_add(&mut grad[l.w1.range()], &da1, &cache.hidden.pooled);
            grad[l.b1.range()]
                .iter_mut()
                .zip(&da1)
                .for_each(|(g, v)| *g += v);

            dh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&mut dh, &p[l.w1.range()], &da1);
            for &r in &cache.hidden.rows {
                grad[r..r + d]
                    .iter_mut()
                    .zip(&dh)
                    .for_each(|(g, v)| *g += v);
            }
        }
        Ok(pass.logprobs)
    }
}

struct StepCache {
    hidden: HiddenState,
    act: Activations,
    verb_lp: Vec<f64>,
    arg_lp: Vec<f64>,
}

struct Pass {
    steps: Vec<StepCache>,
    logprobs: Vec<f64>,
    temperature: f64,
}
