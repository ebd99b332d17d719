//! Randomized and exhaustive checks of the invariants each module promises.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use arpo::agent::{rollout_episode, ScriptedPolicy};
use arpo::env::{
    generate_task_suite, parse_action, Environment, Interaction, Parsed, SuiteSpec, Task, Termination, Verb,
    NO_ARG, WIDGET_COUNT,
};
use arpo::grpo::{clipped_term, compute_advantages, minibatch_surrogate, ClipConfig, LossItem};
use arpo::rollout::{run_episodes, RolloutConfig};
use arpo::selection::{rethreshold, select_tasks, ProbeConfig};

use common::{random_params, random_task, replay_simulation};

// ---------------------------------------------------------------- advantages

fn reward_vec() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![Just(2usize), Just(4), Just(8)].prop_flat_map(|g| {
        prop::collection::vec(
            prop_oneof![
                prop::sample::select(vec![-2.0, -1.0, 0.0, 1.0]),
                -3.0..2.0f64,
            ],
            g,
        )
    })
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in reward_vec()) {
        let s = compute_advantages(&rewards, 1e-8).unwrap();
        let n = rewards.len() as f64;
        if s.std >= 1e-8 {
            let mean = s.advantages.iter().sum::<f64>() / n;
            let var = s.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9, "mean {mean}");
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
        } else {
            prop_assert!(s.advantages.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn advantages_ignore_shift_and_positive_scale(
        rewards in reward_vec(),
        shift in -50.0..50.0f64,
        scale in 0.01..100.0f64,
    ) {
        let base = compute_advantages(&rewards, 1e-8).unwrap();
        prop_assume!(base.std > 1e-3);
        let moved: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        for other in [moved, scaled] {
            let a = compute_advantages(&other, 1e-8).unwrap().advantages;
            for (x, y) in a.iter().zip(&base.advantages) {
                prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }
}

// ---------------------------------------------------------------- clipping

#[test]
fn clipping_grid_matches_closed_form() {
    for clip in [ClipConfig::default(), ClipConfig { eps_low: 0.2, eps_high: 0.2, sigma_floor: 1e-8 }] {
        for i in 1..=20 {
            let rho = i as f64 / 10.0;
            for adv in [-2.0, -1.0, 1.0, 2.0] {
                let expected = if adv > 0.0 {
                    (rho * adv).min((1.0 + clip.eps_high) * adv)
                } else {
                    (rho * adv).min((1.0 - clip.eps_low) * adv)
                };
                assert_eq!(clipped_term(rho, adv, &clip), expected, "rho {rho} adv {adv}");
            }
        }
    }
}

#[test]
fn loss_depends_only_on_ratios_and_advantages() {
    let params = random_params(5);
    let task = random_task(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trajectories: Vec<_> = (0..3)
        .map(|_| rollout_episode(&params, &task, 0, 0.7, Some(6), &mut rng).unwrap())
        .collect();
    let clip = ClipConfig::default();
    let loss = |ts: &[arpo::trajectory::Trajectory]| {
        let items: Vec<_> = ts
            .iter()
            .zip([1.5, -0.5, -1.0])
            .map(|(trajectory, advantage)| LossItem { task: &task, trajectory, advantage })
            .collect();
        minibatch_surrogate(&params, &items, &clip).unwrap()
    };
    let reference = loss(&trajectories);
    // Everything about the sampling distribution except the ratio
    // denominators is changed; no reference-policy term may notice.
    let mut mutated = trajectories.clone();
    for t in &mut mutated {
        t.behavior_version += 17;
        for s in &mut t.steps {
            s.tokens.logprob_behavior = [-9.0, -0.25];
            s.tokens.temperature = 0.3;
        }
    }
    let other = loss(&mutated);
    assert_eq!(other.loss.to_bits(), reference.loss.to_bits());
    assert_eq!(other.gradient, reference.gradient);
}

// ---------------------------------------------------------------- replay

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn replay_invariants_hold_under_random_traffic(capacity in 0usize..6, seed in any::<u64>()) {
        let sim = replay_simulation(400, capacity, seed);
        prop_assert!(sim.is_ok(), "{:?}", sim.err());
    }
}

// ---------------------------------------------------------------- environment

/// Token pairs used by the exhaustive enumeration: every goal interaction, one
/// stray interaction, all meta-actions and two malformed pairs.
fn alphabet(task: &Task) -> Vec<(usize, usize)> {
    let mut a: Vec<(usize, usize)> = task.goal_spec.iter().map(|i| i.tokens()).collect();
    let stray = (0..WIDGET_COUNT)
        .map(|w| Interaction::new(Verb::Hotkey, w))
        .find(|i| !task.goal_spec.contains(i))
        .unwrap();
    a.push(stray.tokens());
    for v in [Verb::Wait, Verb::Finish, Verb::Fail, Verb::CallUser] {
        a.push((v.index(), NO_ARG));
    }
    a.push((Verb::Finish.index(), 0));
    a.push((Verb::ClickL.index(), NO_ARG));
    a.sort();
    a.dedup();
    a
}

/// Independent statement of the completion rule.
fn expected_success(task: &Task, actions: &[Parsed], end: Termination) -> bool {
    if !task.feasible {
        return end == Termination::Fail;
    }
    let history: Vec<Interaction> = actions
        .iter()
        .filter_map(|p| p.as_ref().ok().and_then(|a| a.interaction()))
        .collect();
    end == Termination::Finish && history.ends_with(&task.goal_spec)
}

struct Enumeration {
    leaves: usize,
    successes: usize,
}

fn enumerate(task: &Task, env: &Environment, prefix: &mut Vec<(usize, usize)>, out: &mut Enumeration) {
    for &(v, a) in &alphabet(task) {
        let mut next = env.clone();
        let parsed = parse_action(v, a);
        next.step(&parsed).unwrap();
        prefix.push((v, a));
        if next.is_terminal() {
            let reward = next.terminal_reward().unwrap();
            let actions: Vec<Parsed> = prefix.iter().map(|&(v, a)| parse_action(v, a)).collect();
            let malformed = actions.iter().filter(|p| p.is_err()).count();
            let end = next.termination().unwrap();
            assert_eq!(reward.is_success(), expected_success(task, &actions, end), "{task:?} {prefix:?}");
            assert_eq!(reward.format_penalty_total, -(malformed as f64));
            assert_eq!(reward.total, reward.trajectory_reward + reward.format_penalty_total);
            // replaying the same actions from reset gives the same transcript
            let (mut again, _) = Environment::reset(task, 99).unwrap();
            let mut last = None;
            for p in &actions {
                last = Some(again.step(p).unwrap().0);
            }
            assert_eq!(last.unwrap(), next.observation());
            assert_eq!(again.terminal_reward().unwrap(), reward);
            out.leaves += 1;
            out.successes += reward.is_success() as usize;
        } else {
            enumerate(task, &next, prefix, out);
        }
        prefix.pop();
    }
}

fn small_task() -> impl Strategy<Value = Task> {
    // three interactions only, so goals repeat items and overlap themselves
    let pool = vec![
        Interaction::new(Verb::ClickL, 0),
        Interaction::new(Verb::ClickL, 1),
        Interaction::new(Verb::TypeText, 0),
    ];
    (3usize..=4, any::<bool>()).prop_flat_map(move |(max_steps, feasible)| {
        let len = 1..max_steps.min(4);
        prop::collection::vec(prop::sample::select(pool.clone()), len).prop_map(move |goal| {
            let mut t = if feasible { Task::feasible(0, goal) } else { Task::infeasible(0) };
            t.max_steps = max_steps;
            t
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reward_is_sound_over_every_action_sequence(task in small_task()) {
        let (env, _) = Environment::reset(&task, 99).unwrap();
        let mut out = Enumeration { leaves: 0, successes: 0 };
        enumerate(&task, &env, &mut Vec::new(), &mut out);
        prop_assert!(out.leaves > 0);
        prop_assert!(out.successes > 0, "some sequence must solve {:?}", task);
    }
}

// ---------------------------------------------------------------- policy

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distributions_sum_to_one(seed in 0u64..1000, temperature in 0.2..3.0f64) {
        let params = random_params(seed);
        let task = random_task(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rollout_episode(&ScriptedPolicy::Uniform, &task, seed, 1.0, Some(6), &mut rng).unwrap();
        for k in 0..t.steps.len() {
            let h = params.encode_history(&task, &t.steps[..k], &t.steps[k].observation);
            let d = params.action_distribution(&h, temperature).unwrap();
            prop_assert!((d.verb.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for row in &d.arg_given_verb {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn teacher_forcing_reproduces_sampling(seed in 0u64..1000, temperature in 0.3..2.0f64) {
        let params = random_params(seed);
        let task = random_task(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rollout_episode(&params, &task, seed, temperature, None, &mut rng).unwrap();
        let tempered = params.trajectory_logprobs(&task, &t, temperature).unwrap();
        let plain = params.trajectory_logprobs(&task, &t, 1.0).unwrap();
        for (a, b) in tempered.iter().zip(t.tempered_logprobs()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in plain.iter().zip(t.behavior_logprobs()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn first_step_reaches_every_later_decision() {
    let params = random_params(8);
    let task = Task::infeasible(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = rollout_episode(&ScriptedPolicy::NeverFinish, &task, 0, 1.0, Some(12), &mut rng).unwrap();
    let mut edited = t.clone();
    edited.steps[0].tokens.verb_token = Verb::Scroll.index();
    edited.steps[0].tokens.arg_token = 2;
    for k in 1..t.steps.len() {
        let a = params.encode_history(&task, &t.steps[..k], &t.steps[k].observation);
        let b = params.encode_history(&task, &edited.steps[..k], &edited.steps[k].observation);
        let da = params.action_distribution(&a, 1.0).unwrap();
        let db = params.action_distribution(&b, 1.0).unwrap();
        assert_ne!(da.verb, db.verb, "step {k} does not see step 0");
    }
}

// ---------------------------------------------------------------- rollout

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn worker_count_changes_time_not_trajectories(n_envs in 1usize..40, per_task in 1usize..5, seed in 0u64..100) {
        let tasks = generate_task_suite(&SuiteSpec::new(seed, 4, 1, 1..=4)).unwrap();
        let mut params = random_params(seed);
        params.version = seed + 3;
        let cfg = |n| RolloutConfig { n_envs: n, max_steps: 8, ..RolloutConfig::default() };
        let (serial, _) = run_episodes(&tasks, per_task, &params, &cfg(1), seed).unwrap();
        let (wide, report) = run_episodes(&tasks, per_task, &params, &cfg(n_envs), seed).unwrap();
        prop_assert_eq!(&serial, &wide);
        prop_assert!(wide.iter().all(|t| t.behavior_version == params.version));
        prop_assert!(report.max_batch_occupancy <= n_envs.min(tasks.len() * per_task));
    }

    #[test]
    fn more_workers_never_slow_an_epoch(n in 1usize..12, k in 2usize..5, seed in 0u64..100) {
        let tasks = generate_task_suite(&SuiteSpec::new(seed, 6, 2, 1..=6)).unwrap();
        let policy = ScriptedPolicy::NoisyOracle { noise: 0.4 };
        let time = |n_envs| {
            let cfg = RolloutConfig { n_envs, ..RolloutConfig::default() };
            run_episodes(&tasks, 4, &policy, &cfg, seed).unwrap().1.per_epoch_vtime
        };
        prop_assert!(time(n * k) <= time(n));
    }
}

// ---------------------------------------------------------------- selection

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn selection_is_a_monotone_subset(seed in 0u64..1000, noise in 0.2..0.95f64) {
        let tasks = generate_task_suite(&SuiteSpec::new(seed, 6, 2, 2..=6)).unwrap();
        let cfg = ProbeConfig { n_rollouts: 6, ..ProbeConfig::default() };
        let (selected, reports) = select_tasks(&tasks, &ScriptedPolicy::NoisyOracle { noise }, &cfg, seed).unwrap();
        prop_assert_eq!(
            reports.iter().map(|r| r.task_id).collect::<Vec<_>>(),
            tasks.iter().map(|t| t.task_id).collect::<Vec<_>>()
        );
        prop_assert!(selected.iter().all(|s| tasks.contains(s)));
        let kept = |k| rethreshold(&reports, k).iter().filter(|r| r.kept).map(|r| r.task_id).collect::<Vec<_>>();
        for k in 1..=6 {
            let (loose, strict) = (kept(k), kept(k + 1));
            prop_assert!(strict.iter().all(|id| loose.contains(id)));
        }
    }
}
