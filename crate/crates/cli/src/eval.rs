use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dwmt_core::metrics::{
    balanced_pairs, best_verification, rank_k_identification, read_embeddings_csv, read_pairs_csv,
    val_at_far, EmbeddingSet, Modality,
};
use serde::Serialize;

use crate::failure::{CliResult, Failure};
use crate::output::{sha256_hex, write_json};

#[derive(clap::Args)]
pub struct EvalArgs {
    /// CSV with rows `id,modality,v_0,..`.
    #[arg(long)]
    embeddings: PathBuf,
    /// CSV with rows `i,j,same`; balanced random pairs when omitted.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Number of random pairs when no pairs file is given.
    #[arg(long, default_value_t = 1000)]
    pair_count: usize,
    /// Seed for random pair sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use every embedding as both gallery and probe. Otherwise modality A
    /// is the gallery and modality B the probes.
    #[arg(long)]
    self_gallery: bool,
    /// Machine-readable summary path.
    #[arg(long, default_value = "eval_summary.json")]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvalSummary {
    input_hash: String,
    seed: u64,
    embeddings: usize,
    pairs: usize,
    verification_accuracy: f64,
    threshold: f64,
    val_at_far_0_001: Option<f64>,
    val_at_far_0_01: Option<f64>,
    rank_1: Option<f64>,
    rank_10: Option<f64>,
}

fn read(path: &PathBuf) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn located(path: &Path) -> impl Fn(dwmt_core::Error) -> Failure + '_ {
    move |e| match e {
        dwmt_core::Error::Parse { line, msg } => {
            Failure::input(format!("{}:{line}: {msg}", path.display()))
        }
        other => Failure::input(format!("{}: {other}", path.display())),
    }
}

pub fn run(args: EvalArgs) -> CliResult {
    let emb_bytes = read(&args.embeddings)?;
    let set =
        read_embeddings_csv(BufReader::new(&emb_bytes[..])).map_err(located(&args.embeddings))?;

    let mut hashed = emb_bytes.clone();
    let pairs = match &args.pairs {
        Some(p) => {
            let bytes = read(p)?;
            hashed.extend_from_slice(&bytes);
            read_pairs_csv(BufReader::new(&bytes[..])).map_err(located(p))?
        }
        None => balanced_pairs(&set, args.pair_count, args.seed)?,
    };
    hashed.extend_from_slice(
        format!("pairs={} self={}", args.pair_count, args.self_gallery).as_bytes(),
    );

    let (threshold, accuracy) = best_verification(&pairs, &set)?;
    let has_both = pairs.iter().any(|p| p.same) && pairs.iter().any(|p| !p.same);
    let val = |far| -> CliResult<Option<f64>> {
        if !has_both {
            return Ok(None);
        }
        let r = val_at_far(&pairs, &set, far)?;
        Ok(r.satisfied.then_some(r.val))
    };
    let roles: Option<(EmbeddingSet, EmbeddingSet)> = if args.self_gallery {
        Some((set.clone(), set.clone()))
    } else if set.modality().contains(&Modality::A) && set.modality().contains(&Modality::B) {
        Some((set.select(Modality::A)?, set.select(Modality::B)?))
    } else {
        None
    };
    let rank = |k| -> CliResult<Option<f64>> {
        match &roles {
            Some((g, p)) => Ok(Some(rank_k_identification(g, p, k)?)),
            None => Ok(None),
        }
    };
    let summary = EvalSummary {
        input_hash: sha256_hex(&hashed)[..16].to_string(),
        seed: args.seed,
        embeddings: set.len(),
        pairs: pairs.len(),
        verification_accuracy: accuracy,
        threshold,
        val_at_far_0_001: val(0.001)?,
        val_at_far_0_01: val(0.01)?,
        rank_1: rank(1)?,
        rank_10: rank(10)?,
    };
    write_json(&args.out, &summary)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "# eval input_hash={} seed={}",
        summary.input_hash, summary.seed
    );
    println!(
        "verification accuracy {accuracy:.4} (threshold {threshold:.6}, {} pairs)",
        pairs.len()
    );
    println!("VAL@FAR=0.001 {}", show(summary.val_at_far_0_001));
    println!("VAL@FAR=0.01 {}", show(summary.val_at_far_0_01));
    if roles.is_none() {
        println!("rank metrics skipped: one modality only (use --self-gallery)");
    }
    println!("Rank-1 {}", show(summary.rank_1));
    println!("Rank-10 {}", show(summary.rank_10));
    Ok(())
}
