//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::time::Instant;

use dwmt_core::data::{make_tasks, DifficultySpec, TaskDataset};
use dwmt_core::gradcheck::{grad_check, Objective, TapeObjective};
use dwmt_core::metrics::{
    balanced_pairs, best_verification, rank_k_identification, val_at_far, verify_pairs,
    EmbeddingSet, Modality, Pair,
};
use dwmt_core::net::multitask_pass;
use dwmt_core::trainer::{Strategy, Trainer, TrainerConfig, TrainingTrace};
use dwmt_core::weights::{
    closed_form_psi, generate_weights, psi_gradient, two_task_weight_ratio, weight_loss_l4, BIAS,
    PSI,
};
use dwmt_core::{
    CenterBank, LossConfig, MultiTaskNet, NetConfig, ParamStore, Result, TaskBatch, Tensor,
    WeightGenerator, WeightGradMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const HARD_TASK: usize = 1;
const BURN_IN: usize = 50;

type Outcome = std::result::Result<String, String>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut ps = ParamStore::new();
    for (n, t) in entries {
        ps.insert(n, t);
    }
    ps
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

// ---- criterion 1 ----

struct Composite {
    config: NetConfig,
    batches: Vec<TaskBatch>,
    weights: Vec<f64>,
    bank: CenterBank,
    loss: LossConfig,
}

impl Objective for Composite {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        let net = MultiTaskNet::from_params(self.config.clone(), params)?;
        Ok(multitask_pass(
            &net,
            &self.batches,
            &self.weights,
            Some(&self.bank),
            &self.loss,
            None,
        )?
        .total)
    }

    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        let net = MultiTaskNet::from_params(self.config.clone(), params)?;
        Ok(multitask_pass(
            &net,
            &self.batches,
            &self.weights,
            Some(&self.bank),
            &self.loss,
            Some(params),
        )?
        .total)
    }
}

struct ExactGenerator {
    z: Vec<f64>,
    losses: Vec<f64>,
}

impl Objective for ExactGenerator {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        let gen = WeightGenerator::from_params(params)?;
        weight_loss_l4(&generate_weights(&self.z, &gen)?, &self.losses, 1e-8)
    }

    fn value_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        let gen = WeightGenerator::from_params(params)?;
        let g = psi_gradient(&self.z, &gen, &self.losses, WeightGradMode::ExactL4, 1e-8)?;
        params.zero_grad();
        params.accumulate_grad(PSI, &g.psi)?;
        params.accumulate_grad(BIAS, &g.bias)?;
        self.value(params)
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let eps = 1e-6;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..=6);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(1..=5);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let ps = store(vec![
            ("logits", uniform(&mut rng, b, k)),
            ("emb", uniform(&mut rng, b, d)),
            ("centers", uniform(&mut rng, k, d)),
        ]);

        let ce = TapeObjective(|g: &mut dwmt_core::Graph, p: &ParamStore| {
            let l = g.param(p, "logits")?;
            g.cross_entropy(l, &labels)
        });
        let center = TapeObjective(|g: &mut dwmt_core::Graph, p: &ParamStore| {
            let e = g.param(p, "emb")?;
            let c = g.param(p, "centers")?;
            g.center_loss(e, c, &labels)
        });
        let alpha = rng.random_range(0.001..1.0);
        let verification = TapeObjective(|g: &mut dwmt_core::Graph, p: &ParamStore| {
            let l = g.param(p, "logits")?;
            let e = g.param(p, "emb")?;
            let c = g.param(p, "centers")?;
            let ce = g.cross_entropy(l, &labels)?;
            let lc = g.center_loss(e, c, &labels)?;
            let lc = g.scale(lc, alpha);
            g.add(ce, lc)
        });
        for (slot, obj) in [&ce as &dyn Objective, &center, &verification]
            .into_iter()
            .enumerate()
        {
            worst[slot] = worst[slot].max(grad_check(obj, &ps, eps).map_err(|e| e.to_string())?);
        }

        let classes: Vec<usize> = (0..3).map(|_| rng.random_range(2..=4)).collect();
        let config = NetConfig {
            input_dim: 3,
            trunk_layers: vec![4, 3],
            branch_hidden: 3,
            embed_dim: 2,
            classes_per_task: classes.clone(),
            activation: dwmt_core::Activation::Tanh,
        };
        let net = MultiTaskNet::new(config.clone(), seed).unwrap();
        let batches: Vec<TaskBatch> = (0..3)
            .map(|t| TaskBatch {
                task: t,
                inputs: uniform(&mut rng, 3, 3),
                labels: (0..3).map(|_| rng.random_range(0..classes[t])).collect(),
            })
            .collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let composite = Composite {
            config,
            batches,
            weights: raw.iter().map(|v| v / s).collect(),
            bank: CenterBank::from_centers(uniform(&mut rng, classes[0], 2), 0.5).unwrap(),
            loss: LossConfig {
                alpha: 0.3,
                ..Default::default()
            },
        };
        worst[3] =
            worst[3].max(grad_check(&composite, net.params(), eps).map_err(|e| e.to_string())?);

        let t = rng.random_range(2..=4);
        let dz = rng.random_range(1..=5);
        let gen = WeightGenerator::from_parts(
            uniform(&mut rng, t, dz),
            uniform(&mut rng, 1, t).reshape(&[t]).unwrap(),
        )
        .unwrap();
        let obj = ExactGenerator {
            z: (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect(),
            losses: (0..t).map(|_| rng.random_range(0.1..4.0)).collect(),
        };
        worst[4] =
            worst[4].max(grad_check(&obj, &gen.to_params(), eps).map_err(|e| e.to_string())?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let names = [
        "cross-entropy",
        "center",
        "verification",
        "composite",
        "generator",
    ];
    let detail = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if worst.iter().all(|&w| w < 1e-5) && elapsed < 60.0 {
        Ok(format!("{detail}; {elapsed:.2} s"))
    } else {
        Err(format!("{detail}; {elapsed:.2} s"))
    }
}

// ---- criteria 2 and 3 ----

fn paper_step(gen: &WeightGenerator, z: &[f64], losses: &[f64], eta: f64) -> WeightGenerator {
    let g = psi_gradient(z, gen, losses, WeightGradMode::PaperSimplified, 1e-8).unwrap();
    let mut next = gen.clone();
    next.descend(&g, eta).unwrap();
    next
}

fn two_task_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let l = [rng.random_range(0.1..5.0), rng.random_range(0.1..5.0)];
        let mut gen = WeightGenerator::zeros(2, d).unwrap();
        gen.train_bias = false;
        let w = generate_weights(&z, &paper_step(&gen, &z, &l, 1.0)).unwrap();
        let zz: f64 = z.iter().map(|v| v * v).sum();
        let ratio = two_task_weight_ratio(l[0], l[1], 1.0, 1.0, zz).unwrap();
        worst = worst.max((w[0] / w[1] - ratio).abs() / ratio.max(1.0));
    }
    let mut gen = WeightGenerator::zeros(2, 1).unwrap();
    gen.train_bias = false;
    let w = generate_weights(&[2.0], &paper_step(&gen, &[2.0], &[2.0, 1.0], 1.0)).unwrap();
    let worked = w[0] / w[1];
    let closed = two_task_weight_ratio(2.0, 1.0, 1.0, 1.0, 4.0).unwrap();
    let detail = format!("max deviation {worst:.1e}; L=(2,1), ZZᵀ=4 gives {worked:.6}");
    if worst < 1e-9 && (worked - 0.5f64.exp()).abs() < 1e-9 && (closed - 1.648721).abs() < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn replay() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let t = rng.random_range(2..=4);
        let d = rng.random_range(1..=6);
        let eta = rng.random_range(0.05..1.0);
        let train_bias = seed % 2 == 0;
        let history: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
            .map(|_| {
                (
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..t).map(|_| rng.random_range(0.1..3.0)).collect(),
                )
            })
            .collect();
        let mut gen = WeightGenerator::zeros(t, d).unwrap();
        gen.train_bias = train_bias;
        for (z, l) in &history {
            gen = paper_step(&gen, z, l, eta);
        }
        let cf = closed_form_psi(&history, eta, t, d, 1e-8, train_bias).unwrap();
        worst = worst
            .max(cf.psi.max_abs_diff(gen.psi()).unwrap())
            .max(cf.bias.max_abs_diff(gen.bias()).unwrap());
    }
    let detail = format!("max |Δψ| {worst:.1e} over 40 histories of 50 steps");
    if worst < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criteria 4, 5, 7, 9 ----

struct SeedRuns {
    ours: TrainingTrace,
    naive: TrainingTrace,
    acc_ours: f64,
    acc_naive: f64,
    acc_single: f64,
}

fn run(data: &TaskDataset, strategy: Strategy, seed: u64) -> (Trainer, TrainingTrace) {
    let net_cfg = NetConfig {
        input_dim: data.spec.input_dim,
        classes_per_task: data.spec.classes_per_task(),
        ..Default::default()
    };
    let cfg = TrainerConfig {
        strategy,
        seed,
        ..Default::default()
    };
    let mut tr = Trainer::new(MultiTaskNet::new(net_cfg, seed).unwrap(), cfg, true).unwrap();
    let trace = tr.train(data).unwrap();
    (tr, trace)
}

fn seed_runs(seed: u64) -> SeedRuns {
    let data = make_tasks(&DifficultySpec::default(), seed).unwrap();
    let (ours_tr, ours) = run(&data, Strategy::DynamicOurs, seed);
    let (naive_tr, naive) = run(&data, Strategy::NaiveDynamic, seed);
    let (single_tr, _) = run(&data, Strategy::SingleTask(HARD_TASK), seed);
    SeedRuns {
        acc_ours: ours_tr.accuracies(&data).unwrap()[HARD_TASK],
        acc_naive: naive_tr.accuracies(&data).unwrap()[HARD_TASK],
        acc_single: single_tr.accuracies(&data).unwrap()[HARD_TASK],
        ours,
        naive,
    }
}

fn fraction(trace: &TrainingTrace, pred: impl Fn(&dwmt_core::trainer::TraceRow) -> bool) -> f64 {
    let rows = &trace.rows[BURN_IN..];
    rows.iter().filter(|r| pred(r)).count() as f64 / rows.len() as f64
}

fn hard_task_dominance(runs: &[SeedRuns], elapsed: f64) -> Outcome {
    let agree: Vec<f64> = runs
        .iter()
        .map(|r| fraction(&r.ours, |row| argmax(&row.weights) == argmax(&row.smoothed)))
        .collect();
    let detail = format!("agreement after step {BURN_IN} per seed {agree:.3?}; {elapsed:.1} s");
    if agree.iter().all(|&a| a >= 0.9) && elapsed < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn naive_failure(runs: &[SeedRuns]) -> Outcome {
    let minimal: Vec<f64> = runs
        .iter()
        .map(|r| fraction(&r.naive, |row| argmin(&row.weights) == HARD_TASK))
        .collect();
    let acc: Vec<(f64, f64)> = runs.iter().map(|r| (r.acc_naive, r.acc_ours)).collect();
    let detail = format!("hard task minimal {minimal:.3?}; hard accuracy (naive, ours) {acc:.3?}");
    if minimal.iter().all(|&m| m >= 0.9) && acc.iter().all(|(n, o)| n < o) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn multitask_benefit(runs: &[SeedRuns]) -> Outcome {
    let acc: Vec<(f64, f64, f64)> = runs
        .iter()
        .map(|r| (r.acc_ours, r.acc_single, r.acc_naive))
        .collect();
    let detail = format!("hard accuracy (ours, single, naive) {acc:.3?}");
    if acc.iter().all(|&(o, s, n)| o >= s - 0.01 && o > n) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn csv_bytes(trace: &TrainingTrace) -> Vec<u8> {
    let mut out = Vec::new();
    trace.write_csv(&mut out, 3, Some("seed=0")).unwrap();
    out
}

fn simplex_and_determinism(runs: &[SeedRuns]) -> Outcome {
    let worst = runs
        .iter()
        .flat_map(|r| r.ours.rows.iter().chain(&r.naive.rows))
        .map(|row| (row.weights.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let data = make_tasks(&DifficultySpec::default(), 0).unwrap();
    let again = csv_bytes(&run(&data, Strategy::DynamicOurs, 0).1);
    let identical = again == csv_bytes(&runs[0].ours);
    let detail = format!("max |Σw − 1| {worst:.1e}; rerun byte-identical: {identical}");
    if worst < 1e-9 && identical {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 6 ----

fn single_task_degeneration() -> Outcome {
    let data = make_tasks(&DifficultySpec::default(), 7).unwrap();
    let (a, ta) = run(&data, Strategy::SingleTask(0), 7);
    let (b, tb) = run(&data, Strategy::FixedWeights(vec![1.0, 0.0, 0.0]), 7);
    let bits = |ps: &ParamStore| -> Vec<u64> {
        ps.iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let same_params = bits(&a.checkpoint_params()) == bits(&b.checkpoint_params());
    let same_trace = csv_bytes(&ta) == csv_bytes(&tb);
    let detail = format!(
        "{} steps; parameters bit-identical: {same_params}; traces identical: {same_trace}",
        ta.len()
    );
    if same_params && same_trace {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 8 ----

fn exhaustive_accuracy(pairs: &[Pair], dist: &[f64]) -> f64 {
    // Every achievable accept set is a prefix of the sorted distances, so
    // trying each distance, each distance nudged up, and zero covers them all.
    let mut candidates = vec![0.0];
    for &d in dist {
        candidates.push(d);
        candidates.push(d + 1e-9);
    }
    candidates
        .iter()
        .map(|&t| {
            pairs
                .iter()
                .zip(dist)
                .filter(|(p, &d)| (d < t) == p.same)
                .count() as f64
                / pairs.len() as f64
        })
        .fold(0.0, f64::max)
}

fn exhaustive_val(pairs: &[Pair], dist: &[f64], far: f64) -> f64 {
    let same = pairs.iter().filter(|p| p.same).count() as f64;
    let diff = pairs.len() as f64 - same;
    let mut best = 0.0f64;
    for &t in dist {
        let ta = pairs
            .iter()
            .zip(dist)
            .filter(|(p, &d)| p.same && d <= t)
            .count() as f64;
        let fa = pairs
            .iter()
            .zip(dist)
            .filter(|(p, &d)| !p.same && d <= t)
            .count() as f64;
        if fa / diff <= far {
            best = best.max(ta / same);
        }
    }
    best
}

fn exhaustive_rank(gallery: &EmbeddingSet, probes: &EmbeddingSet, k: usize) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut hits = 0;
    for p in 0..probes.len() {
        let q = unit(probes.vectors().row(p));
        let d: Vec<f64> = (0..gallery.len())
            .map(|g| dist(&q, &unit(gallery.vectors().row(g))))
            .collect();
        // Position of gallery entry g = number of entries ahead of it.
        let position = |g: usize| {
            (0..gallery.len())
                .filter(|&h| d[h] < d[g] || (d[h] == d[g] && h < g))
                .count()
        };
        let best = (0..gallery.len())
            .filter(|&g| gallery.labels()[g] == probes.labels()[p])
            .map(position)
            .min()
            .unwrap();
        if best < k {
            hits += 1;
        }
    }
    hits as f64 / probes.len() as f64
}

fn handcrafted_sets() -> Vec<(EmbeddingSet, EmbeddingSet)> {
    let angles = |a: &[f64]| a.iter().map(|t| vec![t.cos(), t.sin()]).collect::<Vec<_>>();
    let mut sets = Vec::new();
    let g = angles(&[0.0, 0.9, 1.7, 2.6, 3.5, 4.4]);
    let p = angles(&[0.35, 1.2, 2.1, 3.05, 4.0]);
    sets.push((
        EmbeddingSet::single_modality(
            Tensor::from_rows(&g).unwrap(),
            vec![0, 1, 2, 3, 4, 0],
            Modality::A,
        )
        .unwrap(),
        EmbeddingSet::single_modality(
            Tensor::from_rows(&p).unwrap(),
            vec![0, 2, 1, 3, 4],
            Modality::B,
        )
        .unwrap(),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [8usize, 12, 20] {
        let ids: Vec<u64> = (0..n).map(|i| (i % 4) as u64).collect();
        let g = EmbeddingSet::single_modality(uniform(&mut rng, n, 3), ids.clone(), Modality::A)
            .unwrap();
        let p = EmbeddingSet::single_modality(
            uniform(&mut rng, n / 2, 3),
            ids[..n / 2].to_vec(),
            Modality::B,
        )
        .unwrap();
        sets.push((g, p));
    }
    sets
}

fn metric_oracles() -> Outcome {
    let mut mismatches = Vec::new();
    for (s, (gallery, probes)) in handcrafted_sets().into_iter().enumerate() {
        let pairs: Vec<Pair> = (0..gallery.len())
            .flat_map(|i| (i + 1..gallery.len()).map(move |j| (i, j)))
            .map(|(i, j)| Pair {
                i,
                j,
                same: gallery.labels()[i] == gallery.labels()[j],
            })
            .collect();
        let dist: Vec<f64> = pairs.iter().map(|p| gallery.distance(p.i, p.j)).collect();
        let (threshold, acc) = best_verification(&pairs, &gallery).unwrap();
        if acc != exhaustive_accuracy(&pairs, &dist)
            || verify_pairs(&pairs, &gallery, threshold).unwrap() != acc
        {
            mismatches.push(format!("set {s}: verification"));
        }
        for far in [0.0, 0.1, 0.25, 0.5, 1.0] {
            if val_at_far(&pairs, &gallery, far).unwrap().val != exhaustive_val(&pairs, &dist, far)
            {
                mismatches.push(format!("set {s}: VAL@FAR={far}"));
            }
        }
        for k in 1..=gallery.len() + 1 {
            if rank_k_identification(&gallery, &probes, k).unwrap()
                != exhaustive_rank(&gallery, &probes, k)
            {
                mismatches.push(format!("set {s}: rank-{k}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 400;
    let ids: Vec<u64> = (0..n).map(|_| rng.random_range(0..20)).collect();
    let modality = (0..n)
        .map(|i| if i % 2 == 0 { Modality::A } else { Modality::B })
        .collect();
    let random = EmbeddingSet::new(uniform(&mut rng, n, 16), ids, modality).unwrap();
    let pairs = balanced_pairs(&random, 1000, 5).unwrap();
    let (_, chance) = best_verification(&pairs, &random).unwrap();
    let detail = format!(
        "{} oracle mismatches; random-embedding accuracy {chance:.3}",
        mismatches.len()
    );
    if mismatches.is_empty() && (chance - 0.5).abs() <= 0.05 {
        Ok(detail)
    } else {
        Err(format!("{detail} {mismatches:?}"))
    }
}

fn main() {
    let start = Instant::now();
    let runs: Vec<SeedRuns> = std::thread::scope(|s| {
        let handles: Vec<_> = SEEDS
            .iter()
            .map(|&seed| s.spawn(move || seed_runs(seed)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let training_time = start.elapsed().as_secs_f64();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 gradient fidelity", gradient_fidelity()),
        ("2 two-task weight ratio", two_task_oracle()),
        ("3 closed-form replay", replay()),
        (
            "4 hard-task dominance",
            hard_task_dominance(&runs, training_time),
        ),
        ("5 naive failure mode", naive_failure(&runs)),
        ("6 single-task degeneration", single_task_degeneration()),
        ("7 simplex and determinism", simplex_and_determinism(&runs)),
        ("8 metric oracles", metric_oracles()),
        ("9 multi-task benefit", multitask_benefit(&runs)),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
