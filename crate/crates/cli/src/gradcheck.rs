use dwmt_core::gradcheck::{grad_check, Objective, ScaledGradient, TapeObjective};
use dwmt_core::net::multitask_pass;
use dwmt_core::weights::{generate_weights, psi_gradient, weight_loss_l4, BIAS, PSI};
use dwmt_core::{
    Activation, CenterBank, Graph, LossConfig, MultiTaskNet, NetConfig, ParamStore, Result,
    TaskBatch, Tensor, Var, WeightGenerator, WeightGradMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::failure::{CliResult, Failure, EXIT_GRADCHECK};

const TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-6;

#[derive(clap::Args)]
pub struct GradcheckArgs {
    /// Seed for the random test instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per component.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Flips the sign of every analytic gradient (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let v = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, v).expect("positive dims")
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut ps = ParamStore::new();
    for (n, t) in entries {
        ps.insert(n, t);
    }
    ps
}

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

/// `L₄` through the softmax with the closed-form exact gradient.
struct Generator {
    z: Vec<f64>,
    losses: Vec<f64>,
}

impl Objective for Generator {
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

fn checked(obj: &dyn Objective, ps: &ParamStore, fault: bool) -> Result<f64> {
    if fault {
        grad_check(
            &ScaledGradient {
                inner: obj,
                factor: -1.0,
            },
            ps,
            EPS,
        )
    } else {
        grad_check(obj, ps, EPS)
    }
}

/// Worst error of each component over one random instance.
fn trial(rng: &mut ChaCha8Rng, fault: bool) -> Result<Vec<(&'static str, f64)>> {
    let b = rng.random_range(1..=6);
    let k = rng.random_range(2..=6);
    let d = rng.random_range(1..=5);
    let n = rng.random_range(1..=6);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let ps = store(vec![
        (
            "x",
            uniform(rng, b, d).map(|v| if v.abs() < 1e-3 { 0.5 } else { v }),
        ),
        ("w", uniform(rng, d, n)),
        ("bias", uniform(rng, 1, n).reshape(&[n])?),
        ("logits", uniform(rng, b, k)),
        ("emb", uniform(rng, b, d)),
        ("centers", uniform(rng, k, d)),
    ]);
    let probe = uniform(rng, b, n);
    let alpha = rng.random_range(0.001..1.0);

    let ops = TapeObjective(|g: &mut Graph, p: &ParamStore| -> Result<Var> {
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let c = g.param(p, "bias")?;
        let r = g.relu(x);
        let t = g.tanh(x);
        let h = g.add(r, t)?;
        let h = g.matmul(h, w)?;
        let h = g.add_bias(h, c)?;
        let flat = g.reshape(h, &[b * n])?;
        let s = g.softmax(flat)?;
        let s = g.scale(s, 3.0);
        let pr = g.constant(probe.reshape(&[b * n])?);
        g.dot(s, pr)
    });
    let ce = TapeObjective(|g: &mut Graph, p: &ParamStore| {
        let l = g.param(p, "logits")?;
        g.cross_entropy(l, &labels)
    });
    let center = TapeObjective(|g: &mut Graph, p: &ParamStore| {
        let e = g.param(p, "emb")?;
        let c = g.param(p, "centers")?;
        g.center_loss(e, c, &labels)
    });
    let verification = TapeObjective(|g: &mut Graph, p: &ParamStore| {
        let l = g.param(p, "logits")?;
        let e = g.param(p, "emb")?;
        let c = g.param(p, "centers")?;
        let ce = g.cross_entropy(l, &labels)?;
        let lc = g.center_loss(e, c, &labels)?;
        let lc = g.scale(lc, alpha);
        g.add(ce, lc)
    });

    let classes: Vec<usize> = (0..3).map(|_| rng.random_range(2..=4)).collect();
    let config = NetConfig {
        input_dim: 3,
        trunk_layers: vec![4, 3],
        branch_hidden: 3,
        embed_dim: 2,
        classes_per_task: classes.clone(),
        activation: Activation::Tanh,
    };
    let net = MultiTaskNet::new(config.clone(), rng.random())?;
    let batches = (0..3)
        .map(|t| TaskBatch {
            task: t,
            inputs: uniform(rng, 3, 3),
            labels: (0..3).map(|_| rng.random_range(0..classes[t])).collect(),
        })
        .collect();
    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let composite = Composite {
        config,
        batches,
        weights: raw.iter().map(|v| v / total).collect(),
        bank: CenterBank::from_centers(uniform(rng, classes[0], 2), 0.5)?,
        loss: LossConfig {
            alpha: 0.3,
            ..Default::default()
        },
    };

    let t = rng.random_range(2..=4);
    let dz = rng.random_range(1..=5);
    let gen = WeightGenerator::from_parts(uniform(rng, t, dz), uniform(rng, 1, t).reshape(&[t])?)?;
    let generator = Generator {
        z: (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect(),
        losses: (0..t).map(|_| rng.random_range(0.1..4.0)).collect(),
    };

    Ok(vec![
        ("tensor ops", checked(&ops, &ps, fault)?),
        ("cross-entropy", checked(&ce, &ps, fault)?),
        ("center loss", checked(&center, &ps, fault)?),
        ("verification loss", checked(&verification, &ps, fault)?),
        (
            "multi-task composite",
            checked(&composite, net.params(), fault)?,
        ),
        (
            "weight generator",
            checked(&generator, &gen.to_params(), fault)?,
        ),
    ])
}

pub fn run(args: GradcheckArgs) -> CliResult {
    if args.trials == 0 {
        return Err(Failure::input("--trials must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for _ in 0..args.trials {
        for (i, (name, err)) in trial(&mut rng, args.inject_fault)?.into_iter().enumerate() {
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    println!(
        "# gradcheck seed={} trials={} tolerance={TOLERANCE:e}",
        args.seed, args.trials
    );
    let mut failed = Vec::new();
    for (name, err) in &worst {
        let ok = *err < TOLERANCE;
        println!("{name:<22} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        println!("all components within tolerance");
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            msg: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}
