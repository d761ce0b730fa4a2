use std::io::Write;
use std::path::PathBuf;

use dwmt_core::checkpoint::write_checkpoint;
use dwmt_core::data::{make_tasks, TaskDataset};
use dwmt_core::metrics::{
    balanced_pairs, best_verification, rank_k_identification, val_at_far, EmbeddingSet, Modality,
};
use dwmt_core::trainer::Trainer;
use dwmt_core::MultiTaskNet;
use serde::Serialize;

use crate::config::{ExperimentConfig, StrategyName};
use crate::failure::{CliResult, Failure};
use crate::output::{write_json, write_with};
use crate::ConfigArgs;

#[derive(clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Overrides `strategy`.
    #[arg(long, value_enum)]
    strategy: Option<StrategyName>,
    /// Overrides `fixed_weights`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Overrides `single_task` (0-based).
    #[arg(long)]
    task: Option<usize>,
    /// Overrides `steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct VerificationReport {
    task: usize,
    samples: usize,
    pairs: usize,
    accuracy: f64,
    threshold: f64,
    val_at_far_0_001: Option<f64>,
    val_at_far_0_01: Option<f64>,
    rank_1: f64,
    rank_10: f64,
}

#[derive(Serialize)]
struct Summary {
    run_name: String,
    config_hash: String,
    seed: u64,
    strategy: &'static str,
    steps: usize,
    param_count: usize,
    single_task_degeneration: bool,
    degenerate_task: Option<usize>,
    final_losses: Vec<f64>,
    final_smoothed_losses: Vec<f64>,
    final_weights: Vec<f64>,
    train_accuracy: Vec<f64>,
    verification: VerificationReport,
}

/// Embeds the first `eval_samples` rows of task 0 and scores them with the
/// first half as gallery (modality A) and the second half as probes
/// (modality B). Identities are the noise-free labels.
fn verification_report(
    net: &MultiTaskNet,
    data: &TaskDataset,
    cfg: &ExperimentConfig,
) -> CliResult<VerificationReport> {
    let task = &data.tasks[0];
    let n = cfg.eval_samples.min(task.labels.len());
    let idx: Vec<usize> = (0..n).collect();
    let x = task.inputs.gather_rows(&idx)?;
    let (_, emb) = net.forward_task(&net.forward_shared(&x)?, 0)?;
    let labels: Vec<u64> = task.clean_labels[..n].iter().map(|&y| y as u64).collect();
    let modality = (0..n)
        .map(|i| if i < n / 2 { Modality::A } else { Modality::B })
        .collect();
    let set = EmbeddingSet::new(emb, labels, modality)?;
    let pairs = balanced_pairs(&set, cfg.eval_pairs, cfg.seed)?;
    let (threshold, accuracy) = best_verification(&pairs, &set)?;
    let val = |far| -> CliResult<Option<f64>> {
        let r = val_at_far(&pairs, &set, far)?;
        Ok(r.satisfied.then_some(r.val))
    };
    let (gallery, probes) = (set.select(Modality::A)?, set.select(Modality::B)?);
    Ok(VerificationReport {
        task: 0,
        samples: n,
        pairs: pairs.len(),
        accuracy,
        threshold,
        val_at_far_0_001: val(0.001)?,
        val_at_far_0_01: val(0.01)?,
        rank_1: rank_k_identification(&gallery, &probes, 1)?,
        rank_10: rank_k_identification(&gallery, &probes, 10)?,
    })
}

pub fn run(args: TrainArgs) -> CliResult {
    let mut cfg = args.config.load()?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(w) = args.weights {
        cfg.fixed_weights = Some(w);
    }
    if let Some(t) = args.task {
        cfg.single_task = t;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    cfg.validate()
        .map_err(|(key, msg)| Failure::input(format!("{key}: {msg}")))?;

    let hash = cfg.hash();
    let data = make_tasks(&cfg.difficulty_spec(), cfg.seed)?;
    let net = MultiTaskNet::new(cfg.net_config(), cfg.seed)?;
    let mut trainer = Trainer::new(net, cfg.trainer_config(), cfg.center_loss)?;
    let trace = trainer.train(&data)?;

    let tag = format!("config_hash={hash} seed={}", cfg.seed);
    let trace_path = cfg.out_dir.join("trace.csv");
    write_with(&trace_path, |w| {
        Ok(trace.write_csv(w, cfg.tasks(), Some(&tag))?)
    })?;
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    write_with(&ckpt_path, |w| {
        Ok(write_checkpoint(w, &trainer.checkpoint_params())?)
    })?;

    let last = trace.rows.last();
    let degenerate = cfg.degenerate_task();
    let summary = Summary {
        run_name: cfg.run_name.clone(),
        config_hash: hash,
        seed: cfg.seed,
        strategy: crate::strategy_label(cfg.strategy),
        steps: trace.len(),
        param_count: cfg.net_config().param_count(),
        single_task_degeneration: degenerate.is_some(),
        degenerate_task: degenerate,
        final_losses: last.map(|r| r.losses.clone()).unwrap_or_default(),
        final_smoothed_losses: last.map(|r| r.smoothed.clone()).unwrap_or_default(),
        final_weights: last.map(|r| r.weights.clone()).unwrap_or_default(),
        train_accuracy: trainer.accuracies(&data)?,
        verification: verification_report(&trainer.net, &data, &cfg)?,
    };
    let summary_path = cfg.out_dir.join("summary.json");
    write_json(&summary_path, &summary)?;

    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} steps={}", summary.steps);
    if let Some(t) = degenerate {
        let _ = writeln!(
            out,
            "single-task degeneration: only task index {t} is trained"
        );
    }
    let _ = writeln!(out, "final weights {:?}", summary.final_weights);
    let _ = writeln!(out, "train accuracy {:?}", summary.train_accuracy);
    let _ = writeln!(out, "wrote {}", cfg.out_dir.display());
    Ok(())
}
