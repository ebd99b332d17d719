use serde::{Deserialize, Serialize};

use crate::env::{Observation, Parsed, RewardBreakdown, Termination};

/// One emitted (verb, argument) token pair with its behavior log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub verb_token: usize,
    pub arg_token: usize,
    /// Log-probabilities under the sampling temperature's distribution.
    pub logprob_behavior: [f64; 2],
    /// Log-probabilities under the temperature-1 distribution; these are the
    /// denominators of the importance ratios.
    pub logprob_untempered: [f64; 2],
    pub temperature: f64,
}

impl TokenStep {
    /// A token pair emitted with certainty (scripted policies).
    pub fn certain(verb_token: usize, arg_token: usize, temperature: f64) -> Self {
        TokenStep {
            verb_token,
            arg_token,
            logprob_behavior: [0.0; 2],
            logprob_untempered: [0.0; 2],
            temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Observation the tokens were conditioned on.
    pub observation: Observation,
    pub tokens: TokenStep,
    pub parsed: Parsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Fresh,
    Replayed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u32,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub reward: RewardBreakdown,
    pub termination: Termination,
    /// Two tokens per step.
    pub token_count: usize,
    pub origin: Origin,
    pub behavior_version: u64,
}

impl Trajectory {
    pub fn is_success(&self) -> bool {
        self.reward.is_success()
    }

    /// Untempered behavior log-probabilities, interleaved verb/argument.
    pub fn behavior_logprobs(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.tokens.logprob_untempered)
            .collect()
    }

    /// Sampling-temperature behavior log-probabilities, interleaved.
    pub fn tempered_logprobs(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.tokens.logprob_behavior)
            .collect()
    }

    pub fn parse_failures(&self) -> usize {
        self.steps.iter().filter(|s| s.parsed.is_err()).count()
    }
}
