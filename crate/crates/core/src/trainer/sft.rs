//! Supervised likelihood training: behavior cloning for the baseline and the
//! reject-sampling fine-tuning comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{derive_seed, rollout_episode, ScriptedPolicy};
use crate::env::{generate_task_suite, SuiteSpec, Task};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, AdamState, AdamWConfig};
use crate::policy::{PolicyParams, PolicyShape};
use crate::trajectory::Trajectory;

use super::config::BaselineConfig;

/// Negative log-likelihood averaged over trajectories, each normalized by its
/// token count, with its gradient.
pub fn likelihood_loss(params: &PolicyParams, corpus: &[(&Task, &Trajectory)]) -> Result<(f64, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::usage("empty likelihood corpus"));
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let b = corpus.len() as f64;
    for (task, traj) in corpus {
        let n = traj.token_count.max(1) as f64;
        let lp = params.weighted_backward(task, traj, 1.0, &mut grad, |lp| {
            Ok(vec![-1.0 / (b * n); lp.len()])
        })?;
        loss -= lp.iter().sum::<f64>() / (b * n);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("likelihood loss is {loss}")));
    }
    Ok((loss, grad))
}

/// The demonstration suite used for behavior cloning. Seeded separately from
/// every training suite and with disjoint task ids.
pub fn pretraining_suite(config: &BaselineConfig) -> Result<Vec<Task>> {
    let n_infeasible = config.n_tasks / 8;
    let mut tasks = generate_task_suite(&SuiteSpec::new(
        config.seed,
        config.n_tasks - n_infeasible,
        n_infeasible,
        config.min_goal_len..=config.max_goal_len,
    ))?;
    for t in &mut tasks {
        t.task_id += 1_000_000;
    }
    Ok(tasks)
}

/// Behavior-clones a noisy scripted demonstrator. The result is version 0.
pub fn pretrain_baseline(config: &BaselineConfig, shape: PolicyShape) -> Result<PolicyParams> {
    config.validate()?;
    let tasks = pretraining_suite(config)?;
    let demonstrator = ScriptedPolicy::NoisyOracle {
        noise: config.demo_noise,
    };
    let mut demos = Vec::with_capacity(tasks.len() * config.demos_per_task);
    for (i, task) in tasks.iter().enumerate() {
        for k in 0..config.demos_per_task {
            let seed = derive_seed(config.seed, &[i as u64, k as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            demos.push((task, rollout_episode(&demonstrator, task, seed, 1.0, None, &mut rng)?));
        }
    }
    let mut params = PolicyParams::init(shape, derive_seed(config.seed, &[u64::MAX]));
    let adam = AdamWConfig {
        learning_rate: config.learning_rate,
        ..AdamWConfig::default()
    };
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u64::MAX - 1]));
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut cursor = order.len();
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (task, traj) = &demos[order[cursor]];
            batch.push((*task, traj));
            cursor += 1;
        }
        let (_, grad) = likelihood_loss(&params, &batch)?;
        optimizer_step(&mut params, &grad, &adam, &mut state)?;
    }
    params.version = 0;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trajectory_loss_is_mean_negative_logprob() {
        let tasks = generate_task_suite(&SuiteSpec::new(1, 1, 0, 3..=3)).unwrap();
        let params = PolicyParams::init(PolicyShape::default(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rollout_episode(&params, &tasks[0], 0, 1.0, None, &mut rng).unwrap();
        let lp = params.trajectory_logprobs(&tasks[0], &t, 1.0).unwrap();
        let (loss, _) = likelihood_loss(&params, &[(&tasks[0], &t)]).unwrap();
        let expected = -lp.iter().sum::<f64>() / lp.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
        assert!(likelihood_loss(&params, &[]).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_improves_on_demos() {
        let config = BaselineConfig {
            n_tasks: 8,
            steps: 10,
            batch_size: 8,
            ..BaselineConfig::default()
        };
        let a = pretrain_baseline(&config, PolicyShape::default()).unwrap();
        let b = pretrain_baseline(&config, PolicyShape::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.version, 0);
        let untrained = PolicyParams::init(PolicyShape::default(), derive_seed(config.seed, &[u64::MAX]));
        let tasks = pretraining_suite(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let demos: Vec<_> = tasks
            .iter()
            .map(|t| rollout_episode(&ScriptedPolicy::Oracle, t, 0, 1.0, None, &mut rng).unwrap())
            .collect();
        let corpus: Vec<_> = tasks.iter().zip(&demos).collect();
        let before = likelihood_loss(&untrained, &corpus).unwrap().0;
        let after = likelihood_loss(&a, &corpus).unwrap().0;
        assert!(after < before, "{after} >= {before}");
    }
}
