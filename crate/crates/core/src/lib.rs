//! Group-relative policy optimization with per-task success replay, valuable
//! task selection and a batched rollout engine, trained against a synthetic
//! multi-turn desktop environment.

pub mod agent;
pub mod codec;
pub mod env;
pub mod error;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod records;
pub mod replay;
pub mod rollout;
pub mod selection;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
