//! Synthetic multi-turn "desktop" environment.
//!
//! The screen is a row of [`WIDGET_COUNT`] widgets plus a progress indicator.
//! A task asks for an ordered run of primitive interactions followed by
//! `FINISH`; infeasible tasks are solved only by answering `FAIL`. Rewards are
//! sparse and terminal, and every unparseable response costs a format penalty.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WIDGET_COUNT: usize = 6;
/// Widgets plus the trailing progress indicator.
pub const OBS_LEN: usize = WIDGET_COUNT + 1;
pub const MAX_GOAL_LEN: usize = 8;
pub const MAX_STEPS_LIMIT: usize = 16;
pub const DEFAULT_MAX_STEPS: usize = 15;

pub const VERB_COUNT: usize = 9;
pub const ARG_COUNT: usize = WIDGET_COUNT + 1;
/// Argument token carried by meta-actions.
pub const NO_ARG: usize = WIDGET_COUNT;
pub const PRIMITIVE_KINDS: usize = 5;
/// Number of distinct (primitive kind, widget) interactions.
pub const INTERACTION_COUNT: usize = PRIMITIVE_KINDS * WIDGET_COUNT;
/// Upper bound (exclusive) of any observation entry.
pub const OBS_VALUE_COUNT: usize = MAX_GOAL_LEN + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verb {
    ClickL,
    ClickR,
    Scroll,
    TypeText,
    Hotkey,
    Wait,
    Finish,
    Fail,
    CallUser,
}

impl Verb {
    pub const ALL: [Verb; VERB_COUNT] = [
        Verb::ClickL,
        Verb::ClickR,
        Verb::Scroll,
        Verb::TypeText,
        Verb::Hotkey,
        Verb::Wait,
        Verb::Finish,
        Verb::Fail,
        Verb::CallUser,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Verb> {
        Verb::ALL.get(index).copied()
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Verb::Wait | Verb::Finish | Verb::Fail | Verb::CallUser)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Verb::ClickL => "CLICK_L",
            Verb::ClickR => "CLICK_R",
            Verb::Scroll => "SCROLL",
            Verb::TypeText => "TYPE_TEXT",
            Verb::Hotkey => "HOTKEY",
            Verb::Wait => "WAIT",
            Verb::Finish => "FINISH",
            Verb::Fail => "FAIL",
            Verb::CallUser => "CALL_USER",
        };
        f.write_str(name)
    }
}

/// A primitive interaction with one widget (or text slot for `TYPE_TEXT` and
/// `HOTKEY`). Goal specifications are ordered lists of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub kind: Verb,
    pub widget: u8,
}

impl Interaction {
    pub fn new(kind: Verb, widget: usize) -> Self {
        debug_assert!(!kind.is_meta() && widget < WIDGET_COUNT);
        Interaction {
            kind,
            widget: widget as u8,
        }
    }

    /// Dense index in `0..INTERACTION_COUNT`.
    pub fn index(self) -> usize {
        self.kind.index() * WIDGET_COUNT + self.widget as usize
    }

    pub fn from_index(index: usize) -> Self {
        Interaction::new(Verb::ALL[index / WIDGET_COUNT], index % WIDGET_COUNT)
    }

    pub fn tokens(self) -> (usize, usize) {
        (self.kind.index(), self.widget as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: Verb,
    pub argument: Option<u8>,
}

impl Action {
    pub fn meta(kind: Verb) -> Self {
        debug_assert!(kind.is_meta());
        Action {
            kind,
            argument: None,
        }
    }

    pub fn interaction(self) -> Option<Interaction> {
        self.argument.map(|w| Interaction {
            kind: self.kind,
            widget: w,
        })
    }
}

/// A (verb, argument) token pair that does not conform to the action schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub verb_token: usize,
    pub arg_token: usize,
}

pub type Parsed = std::result::Result<Action, ParseFailure>;

/// Parses a verb/argument token pair. Meta-actions must pair with [`NO_ARG`];
/// primitives need an in-range argument.
pub fn parse_action(verb_token: usize, arg_token: usize) -> Parsed {
    let failure = ParseFailure {
        verb_token,
        arg_token,
    };
    let verb = Verb::from_index(verb_token).ok_or(failure)?;
    match (verb.is_meta(), arg_token) {
        (true, NO_ARG) => Ok(Action::meta(verb)),
        (false, a) if a < WIDGET_COUNT => Ok(Action {
            kind: verb,
            argument: Some(a as u8),
        }),
        _ => Err(failure),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    InDomain,
    OutOfDomain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u32,
    pub feasible: bool,
    pub goal_spec: Vec<Interaction>,
    pub domain_tag: DomainTag,
    pub max_steps: usize,
}

impl Task {
    pub fn feasible(task_id: u32, goal_spec: Vec<Interaction>) -> Self {
        Task {
            task_id,
            feasible: true,
            goal_spec,
            domain_tag: DomainTag::InDomain,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn infeasible(task_id: u32) -> Self {
        Task {
            task_id,
            feasible: false,
            goal_spec: Vec::new(),
            domain_tag: DomainTag::InDomain,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.task_id;
        if self.max_steps == 0 || self.max_steps > MAX_STEPS_LIMIT {
            return Err(Error::config(format!(
                "task {id}: max_steps {} outside 1..={MAX_STEPS_LIMIT}",
                self.max_steps
            )));
        }
        if self.feasible {
            let len = self.goal_spec.len();
            if len == 0 || len > MAX_GOAL_LEN {
                return Err(Error::config(format!(
                    "task {id}: goal length {len} outside 1..={MAX_GOAL_LEN}"
                )));
            }
            // FINISH needs a step of its own.
            if len >= self.max_steps {
                return Err(Error::config(format!(
                    "task {id}: goal length {len} leaves no step for FINISH within {} steps",
                    self.max_steps
                )));
            }
        } else if !self.goal_spec.is_empty() {
            return Err(Error::config(format!(
                "task {id}: infeasible task carries a goal"
            )));
        }
        for item in &self.goal_spec {
            if item.kind.is_meta() || item.widget as usize >= WIDGET_COUNT {
                return Err(Error::config(format!(
                    "task {id}: invalid goal interaction {} {}",
                    item.kind, item.widget
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Echo {
    Action(Action),
    Malformed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: usize,
    /// `WIDGET_COUNT` widget states followed by the progress indicator.
    pub widget_states: Vec<u8>,
    pub last_action_echo: Option<Echo>,
}

impl Observation {
    pub fn progress(&self) -> usize {
        self.widget_states[WIDGET_COUNT] as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finish,
    Fail,
    CallUser,
    StepCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub trajectory_reward: f64,
    pub format_penalty_total: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(success: bool, parse_failures: usize) -> Self {
        let trajectory_reward = if success { 1.0 } else { 0.0 };
        let format_penalty_total = -(parse_failures as f64);
        RewardBreakdown {
            trajectory_reward,
            format_penalty_total,
            total: trajectory_reward + format_penalty_total,
        }
    }

    pub fn is_success(&self) -> bool {
        self.trajectory_reward == 1.0
    }
}

/// Length of the longest suffix of `history` that is a prefix of `goal`.
fn goal_progress(history: &[Interaction], goal: &[Interaction]) -> usize {
    (0..=goal.len().min(history.len()))
        .rev()
        .find(|&k| history[history.len() - k..] == goal[..k])
        .unwrap_or(0)
}

/// One episode of one task. Single-owner state machine.
#[derive(Clone, Debug)]
pub struct Environment {
    task: Task,
    seed: u64,
    step_cap: usize,
    widgets: [u8; WIDGET_COUNT],
    interactions: Vec<Interaction>,
    progress: usize,
    step_index: usize,
    parse_failures: usize,
    last: Option<Echo>,
    end: Option<Termination>,
}

impl Environment {
    /// Starts an episode. The transition function is deterministic, so the
    /// episode is a pure function of the task, the seed and the actions.
    pub fn reset(task: &Task, seed: u64) -> Result<(Self, Observation)> {
        Self::reset_with_cap(task, seed, task.max_steps)
    }

    /// Like [`Environment::reset`] with the step limit lowered to `cap`.
    pub fn reset_with_cap(task: &Task, seed: u64, cap: usize) -> Result<(Self, Observation)> {
        task.validate()?;
        if cap == 0 {
            return Err(Error::config("step cap must be positive"));
        }
        let env = Environment {
            task: task.clone(),
            seed,
            step_cap: cap.min(task.max_steps),
            widgets: [0; WIDGET_COUNT],
            interactions: Vec::new(),
            progress: 0,
            step_index: 0,
            parse_failures: 0,
            last: None,
            end: None,
        };
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_terminal(&self) -> bool {
        self.end.is_some()
    }

    pub fn termination(&self) -> Option<Termination> {
        self.end
    }

    pub fn parse_failures(&self) -> usize {
        self.parse_failures
    }

    pub fn observation(&self) -> Observation {
        let mut widget_states = Vec::with_capacity(OBS_LEN);
        widget_states.extend_from_slice(&self.widgets);
        widget_states.push(self.progress as u8);
        Observation {
            step_index: self.step_index,
            widget_states,
            last_action_echo: self.last,
        }
    }

    /// Executes one response. A parse failure consumes the step without
    /// touching the screen and is charged at scoring time.
    pub fn step(&mut self, parsed: &Parsed) -> Result<(Observation, bool)> {
        if self.end.is_some() {
            return Err(Error::usage(format!(
                "task {}: step on a terminated episode",
                self.task.task_id
            )));
        }
        match parsed {
            Err(_) => {
                self.parse_failures += 1;
                self.last = Some(Echo::Malformed);
            }
            Ok(action) => {
                self.last = Some(Echo::Action(*action));
                match action.kind {
                    Verb::Wait => {}
                    Verb::Finish => self.end = Some(Termination::Finish),
                    Verb::Fail => self.end = Some(Termination::Fail),
                    Verb::CallUser => self.end = Some(Termination::CallUser),
                    _ => {
                        let item = action
                            .interaction()
                            .ok_or_else(|| Error::usage("primitive action without argument"))?;
                        self.widgets[item.widget as usize] = item.kind.index() as u8 + 1;
                        self.interactions.push(item);
                        self.progress = goal_progress(&self.interactions, &self.task.goal_spec);
                    }
                }
            }
        }
        self.step_index += 1;
        if self.end.is_none() && self.step_index >= self.step_cap {
            self.end = Some(Termination::StepCap);
        }
        Ok((self.observation(), self.end.is_some()))
    }

    pub fn terminal_reward(&self) -> Result<RewardBreakdown> {
        let end = self.end.ok_or_else(|| {
            Error::usage(format!(
                "task {}: reward requested before termination",
                self.task.task_id
            ))
        })?;
        let success = match end {
            Termination::Finish => {
                self.task.feasible && self.progress == self.task.goal_spec.len()
            }
            Termination::Fail => !self.task.feasible,
            Termination::CallUser | Termination::StepCap => false,
        };
        Ok(RewardBreakdown::new(success, self.parse_failures))
    }
}

/// Parameters of a generated task suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub seed: u64,
    pub n_feasible: usize,
    pub n_infeasible: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of tasks tagged in-domain; the rest are held out.
    pub in_domain_fraction: f64,
    pub max_steps: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            seed: 7,
            n_feasible: 32,
            n_infeasible: 4,
            min_len: 2,
            max_len: 6,
            in_domain_fraction: 0.25,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl SuiteSpec {
    pub fn new(seed: u64, n_feasible: usize, n_infeasible: usize, lengths: RangeInclusive<usize>) -> Self {
        SuiteSpec {
            seed,
            n_feasible,
            n_infeasible,
            min_len: *lengths.start(),
            max_len: *lengths.end(),
            ..SuiteSpec::default()
        }
    }
}

/// Generates a deterministic suite: feasible tasks first (goal lengths uniform
/// over the difficulty range), then infeasible ones; domain tags come from a
/// seeded permutation.
pub fn generate_task_suite(spec: &SuiteSpec) -> Result<Vec<Task>> {
    let total = spec.n_feasible + spec.n_infeasible;
    if total == 0 {
        return Err(Error::config("task suite would be empty"));
    }
    if spec.n_feasible > 0 && (spec.min_len == 0 || spec.min_len > spec.max_len) {
        return Err(Error::config(format!(
            "invalid difficulty range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.in_domain_fraction) {
        return Err(Error::config("in_domain_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tasks = Vec::with_capacity(total);
    for id in 0..spec.n_feasible {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let goal_spec = (0..len)
            .map(|_| Interaction::from_index(rng.gen_range(0..INTERACTION_COUNT)))
            .collect();
        tasks.push(Task {
            task_id: id as u32,
            feasible: true,
            goal_spec,
            domain_tag: DomainTag::OutOfDomain,
            max_steps: spec.max_steps,
        });
    }
    for id in spec.n_feasible..total {
        tasks.push(Task {
            task_id: id as u32,
            domain_tag: DomainTag::OutOfDomain,
            max_steps: spec.max_steps,
            ..Task::infeasible(0)
        });
    }
    let n_in = (total as f64 * spec.in_domain_fraction).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_in] {
        tasks[i].domain_tag = DomainTag::InDomain;
    }
    for task in &tasks {
        task.validate()?;
    }
    Ok(tasks)
}

pub fn write_suite(path: &Path, tasks: &[Task]) -> Result<()> {
    crate::records::write_jsonl(path, tasks)
}

pub fn read_suite(path: &Path) -> Result<Vec<Task>> {
    let tasks: Vec<Task> = crate::records::read_jsonl(path)?;
    for task in &tasks {
        task.validate()?;
    }
    Ok(tasks)
}

/// Serializes tasks as line-delimited records to any writer.
pub fn write_suite_to<W: Write>(out: W, tasks: &[Task]) -> std::io::Result<()> {
    crate::records::write_jsonl_to(out, tasks)
}

pub fn read_suite_from<R: BufRead>(input: R) -> Result<Vec<Task>> {
    crate::records::read_jsonl_from(input, Path::new("<stream>"))
}
