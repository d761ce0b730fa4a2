use dwmt_core::data::{make_tasks, DifficultySpec, TaskDataset, TaskSpec};
use dwmt_core::losses::cross_entropy;
use dwmt_core::net::degenerate_single_task;
use dwmt_core::trainer::{Strategy, Trainer, TrainerConfig, TrainingTrace};
use dwmt_core::{LossConfig, MultiTaskNet, NetConfig};

fn net_for(spec: &DifficultySpec, seed: u64) -> MultiTaskNet {
    let cfg = NetConfig {
        input_dim: spec.input_dim,
        classes_per_task: spec.classes_per_task(),
        ..Default::default()
    };
    MultiTaskNet::new(cfg, seed).unwrap()
}

fn run(
    spec: &DifficultySpec,
    data: &TaskDataset,
    strategy: Strategy,
    steps: usize,
    seed: u64,
) -> (Trainer, TrainingTrace) {
    let cfg = TrainerConfig {
        strategy,
        steps,
        seed,
        ..Default::default()
    };
    let mut tr = Trainer::new(net_for(spec, seed), cfg, true).unwrap();
    let trace = tr.train(data).unwrap();
    (tr, trace)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn full_loss(net: &MultiTaskNet, data: &TaskDataset, task: usize) -> f64 {
    let d = &data.tasks[task];
    let z = net.forward_shared(&d.inputs).unwrap();
    let (logits, _) = net.forward_task(&z, task).unwrap();
    cross_entropy(&logits, &d.labels).unwrap()
}

fn two_task(first: TaskSpec, second: TaskSpec) -> DifficultySpec {
    DifficultySpec {
        tasks: vec![first, second],
        ..Default::default()
    }
}

#[test]
fn harder_task_converges_to_higher_loss() {
    let hard = TaskSpec {
        classes: 8,
        sigma: 2.0,
        noise: 0.2,
        samples: 2048,
    };
    let easy = TaskSpec {
        classes: 8,
        sigma: 0.3,
        noise: 0.0,
        samples: 2048,
    };
    let spec = two_task(hard, easy);
    let data = make_tasks(&spec, 5).unwrap();
    let (hard_run, _) = run(&spec, &data, Strategy::SingleTask(0), 400, 1);
    let (easy_run, _) = run(&spec, &data, Strategy::SingleTask(1), 400, 1);
    let (lh, le) = (
        full_loss(&hard_run.net, &data, 0),
        full_loss(&easy_run.net, &data, 1),
    );
    assert!(lh > le, "hard {lh} vs easy {le}");
}

#[test]
fn pretrained_trunk_transfers_to_other_task() {
    let a = TaskSpec {
        classes: 8,
        sigma: 0.5,
        noise: 0.0,
        samples: 2048,
    };
    let b = TaskSpec {
        classes: 8,
        sigma: 0.8,
        noise: 0.0,
        samples: 2048,
    };
    let spec = two_task(a, b);
    let data = make_tasks(&spec, 11).unwrap();
    let (pre, _) = run(&spec, &data, Strategy::SingleTask(0), 400, 2);

    // Same task-B branch on top of either trunk.
    let fresh = net_for(&spec, 3);
    let mut transferred = fresh.clone();
    for (name, value) in pre.net.params().iter() {
        if name.starts_with("trunk.") {
            *transferred.params_mut().get_mut(name).unwrap() = value.clone();
        }
    }
    let short = |net: MultiTaskNet| {
        let cfg = TrainerConfig {
            strategy: Strategy::SingleTask(1),
            steps: 30,
            seed: 4,
            ..Default::default()
        };
        let mut tr = Trainer::new(net, cfg, false).unwrap();
        let trace = tr.train(&data).unwrap();
        trace.rows.iter().map(|r| r.losses[1]).sum::<f64>() / trace.len() as f64
    };
    let (with_pre, with_fresh) = (short(transferred), short(fresh));
    assert!(
        with_pre < with_fresh,
        "pretrained {with_pre} vs random {with_fresh}"
    );
}

#[test]
fn same_seed_gives_identical_traces() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let (a, ta) = run(&spec, &data, Strategy::DynamicOurs, 80, 9);
    let (b, tb) = run(&spec, &data, Strategy::DynamicOurs, 80, 9);
    assert_eq!(ta, tb);
    assert_eq!(a.net, b.net);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    ta.write_csv(&mut ca, 3, None).unwrap();
    tb.write_csv(&mut cb, 3, None).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn single_task_matches_one_hot_fixed_weights() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let (a, ta) = run(&spec, &data, Strategy::SingleTask(0), 60, 2);
    let (b, tb) = run(
        &spec,
        &data,
        Strategy::FixedWeights(vec![1.0, 0.0, 0.0]),
        60,
        2,
    );
    assert_eq!(a.net, b.net);
    assert_eq!(a.bank, b.bank);
    assert_eq!(ta, tb);
}

#[test]
fn single_task_view_loss_equals_one_hot_total() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let net = net_for(&spec, 0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let batches = data.sample_batches(&mut rng, 16).unwrap();
    let cfg = LossConfig::default();
    let view = degenerate_single_task(&net, 2).unwrap();
    let total =
        dwmt_core::net::multitask_pass(&net, &batches, &[0.0, 0.0, 1.0], None, &cfg, None).unwrap();
    assert_eq!(view.loss(&batches, None, &cfg).unwrap(), total.total);
}

#[test]
fn dynamic_weights_follow_hardest_task() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let (_, trace) = run(&spec, &data, Strategy::DynamicOurs, 200, 0);
    let rows = &trace.rows[1..];
    let agree = rows
        .iter()
        .filter(|r| argmax(&r.weights) == argmax(&r.smoothed))
        .count();
    assert!(
        agree as f64 / rows.len() as f64 >= 0.9,
        "agreement {agree}/{}",
        rows.len()
    );
    assert!(trace
        .rows
        .iter()
        .all(|r| (r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9));
}

#[test]
fn naive_weights_avoid_hardest_task() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let (_, trace) = run(&spec, &data, Strategy::NaiveDynamic, 200, 0);
    let rows = &trace.rows[1..];
    let maximal = rows.iter().filter(|r| argmax(&r.weights) == 1).count();
    assert!(
        maximal * 2 < rows.len(),
        "hard task maximal on {maximal}/{} steps",
        rows.len()
    );
}

#[test]
fn zero_weight_tasks_do_not_move_their_branches() {
    let spec = DifficultySpec::default();
    let data = make_tasks(&spec, 0).unwrap();
    let (tr, _) = run(
        &spec,
        &data,
        Strategy::FixedWeights(vec![0.0, 1.0, 0.0]),
        20,
        3,
    );
    let start = net_for(&spec, 3);
    for (name, value) in start.params().iter() {
        let moved = tr.net.params().get(name).unwrap() != value;
        let expect = name.starts_with("trunk.") || name.starts_with("branch.1.");
        assert_eq!(moved, expect, "{name}");
    }
}
