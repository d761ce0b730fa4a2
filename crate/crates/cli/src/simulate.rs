use std::fmt::Write as _;

use dwmt_core::weights::{closed_form_psi, generate_weights, psi_gradient, two_task_weight_ratio};
use dwmt_core::{WeightGenerator, WeightGradMode};

use crate::failure::{CliResult, Failure};

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Paper,
    Exact,
    Both,
}

#[derive(clap::Args)]
pub struct SimulateArgs {
    /// Frozen task losses, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    losses: Vec<f64>,
    /// Squared norm of the shared feature `z`.
    #[arg(long, default_value_t = 1.0)]
    zz: f64,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Paper)]
    mode: ModeArg,
    /// Generator learning rate.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
}

fn fmt_row(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, ",{v:.9}");
    }
}

/// Iterates the generator from zero with a one-dimensional `z = √zz` and a
/// frozen bias, returning the weights before each step and after the last.
fn trajectory(
    losses: &[f64],
    z: f64,
    steps: usize,
    eta: f64,
    mode: WeightGradMode,
) -> CliResult<Vec<Vec<f64>>> {
    let mut gen = WeightGenerator::zeros(losses.len(), 1)?;
    gen.train_bias = false;
    let mut rows = vec![generate_weights(&[z], &gen)?];
    for _ in 0..steps {
        let g = psi_gradient(&[z], &gen, losses, mode, 0.0)?;
        gen.descend(&g, eta)?;
        rows.push(generate_weights(&[z], &gen)?);
    }
    Ok(rows)
}

/// Product of per-step two-task ratio factors, with `a₁, a₂` taken from the
/// closed-form parameters of the preceding steps.
fn closed_form_ratio(losses: &[f64], z: f64, steps: usize, eta: f64) -> CliResult<f64> {
    let mut ratio = 1.0;
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let cf = closed_form_psi(&history, eta, 2, 1, 0.0, false)?;
        let a: Vec<f64> = cf.psi.data().iter().map(|p| (p * z).exp()).collect();
        ratio *= two_task_weight_ratio(losses[0], losses[1], a[0], a[1], eta * z * z)?;
        history.push((vec![z], losses.to_vec()));
    }
    Ok(ratio)
}

pub fn run(args: SimulateArgs) -> CliResult {
    let t = args.losses.len();
    if t < 2 {
        return Err(Failure::input("--losses needs at least two values"));
    }
    if args.losses.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Failure::input("--losses must all be finite and > 0"));
    }
    if !(args.zz.is_finite() && args.zz >= 0.0) {
        return Err(Failure::input("--zz must be finite and ≥ 0"));
    }
    if !(args.eta.is_finite() && args.eta > 0.0) {
        return Err(Failure::input("--eta must be finite and > 0"));
    }
    let z = args.zz.sqrt();
    let modes: Vec<(&str, WeightGradMode)> = match args.mode {
        ModeArg::Paper => vec![("paper", WeightGradMode::PaperSimplified)],
        ModeArg::Exact => vec![("exact", WeightGradMode::ExactL4)],
        ModeArg::Both => vec![
            ("paper", WeightGradMode::PaperSimplified),
            ("exact", WeightGradMode::ExactL4),
        ],
    };
    let runs = modes
        .iter()
        .map(|&(_, m)| trajectory(&args.losses, z, args.steps, args.eta, m))
        .collect::<CliResult<Vec<_>>>()?;

    let mut out = String::new();
    let losses: Vec<String> = args.losses.iter().map(f64::to_string).collect();
    let _ = writeln!(
        out,
        "# simulate losses={} zz={} eta={} steps={}",
        losses.join(","),
        args.zz,
        args.eta,
        args.steps
    );
    let mut header = String::from("step");
    for (name, _) in &modes {
        for i in 1..=t {
            let _ = write!(header, ",{name}_w_{i}");
        }
    }
    let _ = writeln!(out, "{header}");
    for step in 0..=args.steps {
        let _ = write!(out, "{step}");
        for r in &runs {
            fmt_row(&mut out, &r[step]);
        }
        out.push('\n');
    }
    if t == 2 {
        if let Some(pos) = modes.iter().position(|(n, _)| *n == "paper") {
            let last = &runs[pos][args.steps];
            let iterative = last[0] / last[1];
            let closed = closed_form_ratio(&args.losses, z, args.steps, args.eta)?;
            let _ = writeln!(
                out,
                "ratio w_1/w_2 closed_form={closed:.9} iterative={iterative:.9} deviation={:.3e}",
                (closed - iterative).abs()
            );
        }
    }
    print!("{out}");
    Ok(())
}
