use super::*;
use crate::env::{generate_task_suite, SuiteSpec};
use crate::grpo::RolloutGroup;
use crate::policy::PolicyShape;
use crate::replay::tests::stub;

fn tiny(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        seed: 3,
        epochs: 3,
        rollout_batch_tasks: 4,
        group_size: 4,
        minibatch_size: 4,
        grad_accumulation: 2,
        eval_episodes_per_task: 2,
        n_envs: 16,
        embed: 8,
        hidden: 8,
        ..TrainConfig::default()
    }
}

fn suite() -> (Vec<Task>, Vec<Task>) {
    let all = generate_task_suite(&SuiteSpec::new(40, 10, 2, 1..=3)).unwrap();
    all.into_iter().partition(|t| t.task_id % 3 != 0)
}

fn baseline(config: &TrainConfig) -> PolicyParams {
    PolicyParams::init(config.shape(), 99)
}

fn run(config: &TrainConfig) -> (Vec<MetricsRow>, Trainer) {
    let (tasks, held_out) = suite();
    let mut t = Trainer::new(config.clone(), tasks, held_out, baseline(config)).unwrap();
    let mut rows = Vec::new();
    while !t.is_finished() {
        rows.extend(t.run_epoch().unwrap());
    }
    (rows, t)
}

fn without_algorithm(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter()
        .map(|r| MetricsRow {
            algorithm: String::new(),
            ..r.clone()
        })
        .collect()
}

#[test]
fn step_accounting() {
    let (rows, t) = run(&tiny(Algorithm::Grpo));
    // 8 tasks -> 2 iterations of 4 tasks x 4 trajectories = 16 items,
    // 8 per optimizer step -> 2 steps per iteration
    assert_eq!(rows.len(), 3 * 2 * 2);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    assert_eq!(t.params().version, 12);
    let evals: Vec<_> = rows.iter().filter(|r| r.eval_in_domain_hard.is_some()).map(|r| r.step).collect();
    assert_eq!(evals, vec![4, 8, 12]);
    for r in &rows {
        assert!(r.eval_in_domain_hard <= r.eval_in_domain_standard);
        assert!(r.eval_out_of_domain_hard <= r.eval_out_of_domain_standard);
    }
}

#[test]
fn arpo_without_capacity_is_grpo() {
    let (grpo, _) = run(&tiny(Algorithm::Grpo));
    let mut c = tiny(Algorithm::Arpo);
    c.replay_capacity_per_task = 0;
    let (arpo, t) = run(&c);
    assert_eq!(without_algorithm(&grpo), without_algorithm(&arpo));
    assert!(t.audit().iter().all(|e| matches!(e, AuditEvent::Insert { outcome: InsertOutcome::Ignored, .. })));
}

#[test]
fn arpo_diverges_only_through_injection() {
    let (grpo, _) = run(&tiny(Algorithm::Grpo));
    let (arpo, t) = run(&tiny(Algorithm::Arpo));
    let first_injection = t.audit().iter().find_map(|e| match e {
        AuditEvent::Inject { epoch, iteration, .. } => Some((*epoch, *iteration)),
        _ => None,
    });
    // every row before the first injected batch is identical apart from
    // the replay bookkeeping columns
    for (g, a) in grpo.iter().zip(&arpo) {
        if Some((a.epoch, a.iteration)) == first_injection {
            break;
        }
        let strip = |r: &MetricsRow| MetricsRow {
            algorithm: String::new(),
            replay_size: 0,
            ..r.clone()
        };
        assert_eq!(strip(g), strip(a));
    }
    let injections: u64 = arpo.iter().map(|r| r.injections).max().unwrap_or(0);
    assert_eq!(first_injection.is_some(), injections > 0);
}

#[test]
fn resume_is_bit_exact() {
    let config = tiny(Algorithm::Arpo);
    let (full, _) = run(&config);
    let (tasks, held_out) = suite();
    let mut t = Trainer::new(config.clone(), tasks.clone(), held_out.clone(), baseline(&config)).unwrap();
    let first = t.run_epoch().unwrap();
    let bytes = t.checkpoint().to_bytes();
    drop(t);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut t = Trainer::resume(config.clone(), tasks.clone(), held_out.clone(), ckpt).unwrap();
    let mut rows = first;
    while !t.is_finished() {
        rows.extend(t.run_epoch().unwrap());
    }
    assert_eq!(rows, full);

    let other = TrainConfig {
        learning_rate: 1e-4,
        ..config
    };
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(Trainer::resume(other, tasks, held_out, ckpt), Err(Error::Config(_))));
}

#[test]
fn unadvantaged_groups_are_refused() {
    let g = RolloutGroup::new(1, vec![stub(1, true, 0), stub(1, false, 1)]).unwrap();
    assert!(matches!(training_items(&[g.clone()]), Err(Error::Usage(_))));
    let mut g = g;
    g.compute_advantages(1e-8).unwrap();
    assert_eq!(training_items(&[g]).unwrap(), vec![(0, 0), (0, 1)]);
}

#[test]
fn empty_task_set_is_refused() {
    let c = tiny(Algorithm::Grpo);
    assert!(matches!(Trainer::new(c.clone(), vec![], vec![], baseline(&c)), Err(Error::Usage(_))));
    let wrong = PolicyParams::init(PolicyShape::default(), 0);
    let (tasks, _) = suite();
    assert!(matches!(Trainer::new(c, tasks, vec![], wrong), Err(Error::Config(_))));
}

#[test]
fn reject_sampling_needs_a_success() {
    let c = tiny(Algorithm::RejectSft);
    let mut waiter = baseline(&c);
    let l = waiter.layout();
    waiter.data[l.verb_b.offset + crate::env::Verb::Wait.index()] = 60.0;
    let (tasks, held_out) = suite();
    let mut t = Trainer::new(c, tasks, held_out, waiter).unwrap();
    match t.run_epoch() {
        Err(Error::Usage(m)) => assert!(m.contains("no successful trajectory")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reject_sampling_raises_likelihood_of_its_corpus() {
    let mut c = tiny(Algorithm::RejectSft);
    c.epochs = 4;
    let demo = config::BaselineConfig {
        n_tasks: 16,
        max_goal_len: 3,
        demo_noise: 0.5,
        demos_per_task: 4,
        steps: 40,
        batch_size: 16,
        ..config::BaselineConfig::default()
    };
    let behavior = sft::pretrain_baseline(&demo, c.shape()).unwrap();
    let (tasks, held_out) = suite();
    // held-out positives of the behavior policy
    let (probe, _) = crate::rollout::run_episodes(&tasks, 8, &behavior, &c.rollout(), 1234).unwrap();
    let positives: Vec<_> = probe
        .iter()
        .filter(|t| t.is_success())
        .map(|t| (tasks.iter().find(|k| k.task_id == t.task_id).unwrap(), t))
        .collect();
    assert!(positives.len() >= 4);
    let before = likelihood_loss(&behavior, &positives).unwrap().0;

    let mut t = Trainer::new(c, tasks.clone(), held_out, behavior).unwrap();
    let mut rows = Vec::new();
    let mut losses = vec![before];
    while !t.is_finished() {
        rows.extend(t.run_epoch().unwrap());
        losses.push(likelihood_loss(t.params(), &positives).unwrap().0);
    }
    assert!(rows.len() >= 4, "{} steps", rows.len());
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    // the behavior policy is frozen, so rollout statistics do not drift with training
    assert!(rows.iter().all(|r| r.injections == 0 && r.replay_size == 0));
}

#[test]
fn run_directory_is_reproducible_and_resumable() {
    let config = tiny(Algorithm::Arpo);
    let (tasks, held_out) = suite();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let s = train_in_dir(dir.path(), config.clone(), tasks.clone(), held_out.clone(), baseline(&config), false).unwrap();
        assert_eq!(s.epochs_done, 3);
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
    assert_eq!(read(a.path(), AUDIT_FILE), read(b.path(), AUDIT_FILE));

    // lose the last epoch, then resume
    let ckpts = b.path().join(CHECKPOINT_DIR);
    std::fs::remove_file(checkpoint::checkpoint_path(&ckpts, 3)).unwrap();
    train_in_dir(b.path(), config.clone(), tasks, held_out, baseline(&config), true).unwrap();
    assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
    assert_eq!(read(a.path(), AUDIT_FILE), read(b.path(), AUDIT_FILE));
    assert_eq!(
        read(a.path(), FINAL_PARAMS_FILE),
        read(b.path(), FINAL_PARAMS_FILE)
    );
}
