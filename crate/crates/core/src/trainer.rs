//! Joint training of the network and the weight generator.
//!
//! Each step reads one batch per task, then computes two updates from the
//! same pre-step state: network parameters descend `Σ wᵢ·Lᵢ` with the
//! pre-step weights, and the generator descends its own objective with the
//! task losses held constant. Neither update sees the other's result.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::losses::{check_simplex, update_centers, CenterBank, LossConfig};
use crate::net::{degenerate_single_task, multitask_pass, MultiTaskNet, PassOutput, TaskBatch};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::weights::{
    coefficients_to_grad, generate_weights, l4_coefficients, GeneratorGrad, WeightGenerator,
    WeightGradMode,
};

/// How task weights are produced and updated.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    /// Generator trained on `Σ wᵢ/Lᵢ`.
    DynamicOurs,
    /// Generator trained on the total loss `Σ wᵢ·Lᵢ`.
    NaiveDynamic,
    FixedWeights(Vec<f64>),
    /// Only the given task is trained; other batches are forward-only.
    SingleTask(usize),
}

/// Which task losses feed the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossSignal {
    /// Moving average over the smoothing window.
    #[default]
    Smoothed,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub strategy: Strategy,
    pub eta_theta: f64,
    pub eta_psi: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_mode: WeightGradMode,
    pub smoothing_window: usize,
    pub loss_signal: LossSignal,
    pub loss: LossConfig,
    /// Update rate of the verification-task class centers.
    pub center_rate: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DynamicOurs,
            eta_theta: 0.05,
            eta_psi: 0.1,
            steps: 600,
            batch_size: 32,
            seed: 0,
            grad_mode: WeightGradMode::PaperSimplified,
            smoothing_window: 10,
            loss_signal: LossSignal::Smoothed,
            loss: LossConfig::default(),
            center_rate: crate::losses::DEFAULT_CENTER_RATE,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if !(self.eta_theta > 0.0 && self.eta_psi > 0.0) {
            return Err(Error::Argument("learning rates must be > 0".into()));
        }
        if self.smoothing_window == 0 || self.batch_size == 0 {
            return Err(Error::Argument(
                "smoothing window and batch size must be ≥ 1".into(),
            ));
        }
        self.loss.validate()?;
        match &self.strategy {
            Strategy::FixedWeights(w) => check_simplex(w, tasks)?,
            Strategy::SingleTask(t) if *t >= tasks => {
                return Err(Error::Argument(format!("single task {t} out of range")))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One step of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Weights used for this step's network update.
    pub weights: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV with header `step,loss_1..,smoothed_1..,w_1..,total`. A leading
    /// `#` comment line is written when `comment` is given.
    pub fn write_csv<W: Write>(&self, mut w: W, tasks: usize, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let mut header = vec!["step".to_string()];
        for prefix in ["loss", "smoothed", "w"] {
            header.extend((1..=tasks).map(|i| format!("{prefix}_{i}")));
        }
        header.push("total".into());
        writeln!(w, "{}", header.join(","))?;
        for r in &self.rows {
            let mut fields = vec![r.step.to_string()];
            for v in r.losses.iter().chain(&r.smoothed).chain(&r.weights) {
                fields.push(v.to_string());
            }
            fields.push(r.total.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Moving average of each task's recent losses.
#[derive(Clone, Debug)]
struct Smoother {
    window: usize,
    history: Vec<VecDeque<f64>>,
}

impl Smoother {
    fn new(tasks: usize, window: usize) -> Self {
        Self {
            window,
            history: vec![VecDeque::with_capacity(window); tasks],
        }
    }

    fn push(&mut self, losses: &[f64]) -> Vec<f64> {
        self.history
            .iter_mut()
            .zip(losses)
            .map(|(h, &l)| {
                if h.len() == self.window {
                    h.pop_front();
                }
                h.push_back(l);
                h.iter().sum::<f64>() / h.len() as f64
            })
            .collect()
    }
}

/// Descent direction of the total loss `Σ wᵢ·Lᵢ` with respect to the
/// generator logits: `cᵢ = wᵢ(Lᵢ − Σⱼ wⱼLⱼ)`.
pub fn total_loss_coefficients(weights: &[f64], losses: &[f64]) -> Vec<f64> {
    let mean: f64 = weights.iter().zip(losses).map(|(w, l)| w * l).sum();
    weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w * (l - mean))
        .collect()
}

/// One descent step of the generator on `Σ wᵢ(Ψ)·Lᵢ` with `Lᵢ` held constant.
pub fn naive_dynamic_update(
    gen: &WeightGenerator,
    z: &[f64],
    task_losses: &[f64],
    eta: f64,
) -> Result<WeightGenerator> {
    if task_losses.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Contract(format!(
            "task losses {task_losses:?} must be finite and ≥ 0"
        )));
    }
    let w = generate_weights(z, gen)?;
    let grad = coefficients_to_grad(&total_loss_coefficients(&w, task_losses), z)?;
    let mut next = gen.clone();
    next.descend(&grad, eta)?;
    Ok(next)
}

/// Both updates of one step, computed from the same pre-step state.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub row: TraceRow,
    theta_grads: ParamStore,
    psi_grad: Option<GeneratorGrad>,
    centers: Option<CenterBank>,
    eta_theta: f64,
    eta_psi: f64,
}

impl StepPlan {
    pub fn apply_theta(&self, net: &mut MultiTaskNet) {
        let store = net.params_mut();
        for (name, g) in self.theta_grads.grads() {
            // Names and shapes come from a clone of this store.
            store
                .get_mut(name)
                .expect("planned parameter")
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(p, gv)| *p -= self.eta_theta * gv);
        }
    }

    pub fn apply_psi(&self, gen: &mut WeightGenerator) -> Result<()> {
        match &self.psi_grad {
            Some(g) => gen.descend(g, self.eta_psi),
            None => Ok(()),
        }
    }

    pub fn apply_centers(&self, bank: &mut Option<CenterBank>) {
        if let Some(c) = &self.centers {
            *bank = Some(c.clone());
        }
    }
}

/// Owns the network, generator, center bank, and run state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: MultiTaskNet,
    pub gen: WeightGenerator,
    pub bank: Option<CenterBank>,
    pub cfg: TrainerConfig,
    smoother: Smoother,
    step: usize,
}

impl Trainer {
    /// Zero-initialized generator and, when `with_centers`, zero class
    /// centers for the verification task (task 0).
    pub fn new(net: MultiTaskNet, cfg: TrainerConfig, with_centers: bool) -> Result<Self> {
        let t = net.tasks();
        cfg.validate(t)?;
        let gen = WeightGenerator::zeros(t, net.config().feature_dim())?;
        let bank = if with_centers {
            Some(CenterBank::new(
                net.config().classes_per_task[0],
                net.config().embed_dim,
                cfg.center_rate,
            )?)
        } else {
            None
        };
        let smoother = Smoother::new(t, cfg.smoothing_window);
        Ok(Self {
            net,
            gen,
            bank,
            cfg,
            smoother,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Batch-mean of the trunk output over all task batches.
    pub fn shared_feature(&self, batches: &[TaskBatch]) -> Result<Vec<f64>> {
        let inputs: Vec<&Tensor> = batches.iter().map(|b| &b.inputs).collect();
        let z = self.net.forward_shared(&Tensor::vstack(&inputs)?)?;
        Ok(z.mean_rows()?.into_data())
    }

    fn current_weights(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = self.net.tasks();
        Ok(match &self.cfg.strategy {
            Strategy::DynamicOurs | Strategy::NaiveDynamic => generate_weights(z, &self.gen)?,
            Strategy::FixedWeights(w) => w.clone(),
            Strategy::SingleTask(k) => (0..t).map(|i| if i == *k { 1.0 } else { 0.0 }).collect(),
        })
    }

    /// Computes this step's updates without applying them. Advances only the
    /// loss smoother.
    pub fn plan_step(&mut self, batches: &[TaskBatch]) -> Result<StepPlan> {
        let t = self.net.tasks();
        if batches.len() != t || batches.iter().enumerate().any(|(i, b)| b.task != i) {
            return Err(Error::Argument(format!(
                "expected one batch per task, in order, for {t} tasks"
            )));
        }
        let z = self.shared_feature(batches)?;
        if let Some(&value) = z.iter().find(|v| !v.is_finite()) {
            let task = batches
                .iter()
                .position(|b| {
                    self.net
                        .forward_shared(&b.inputs)
                        .map_or(true, |h| !h.is_finite())
                })
                .unwrap_or(0);
            return Err(Error::Divergence {
                step: self.step,
                task,
                value,
            });
        }
        let weights = self.current_weights(&z)?;

        let mut theta_grads = self.net.params().clone();
        let pass: PassOutput = match &self.cfg.strategy {
            Strategy::SingleTask(k) => {
                degenerate_single_task(&self.net, *k)?.loss_and_grad(
                    batches,
                    self.bank.as_ref(),
                    &self.cfg.loss,
                    &mut theta_grads,
                )?;
                multitask_pass(
                    &self.net,
                    batches,
                    &weights,
                    self.bank.as_ref(),
                    &self.cfg.loss,
                    None,
                )?
            }
            _ => multitask_pass(
                &self.net,
                batches,
                &weights,
                self.bank.as_ref(),
                &self.cfg.loss,
                Some(&mut theta_grads),
            )?,
        };
        let losses: Vec<f64> = pass
            .task_losses
            .iter()
            .map(|l| l.unwrap_or(f64::NAN))
            .collect();
        if let Some((task, &value)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                task,
                value,
            });
        }
        let smoothed = self.smoother.push(&losses);
        let signal = match self.cfg.loss_signal {
            LossSignal::Smoothed => &smoothed,
            LossSignal::Raw => &losses,
        };

        let psi_grad = match &self.cfg.strategy {
            Strategy::DynamicOurs => {
                let floor = self.cfg.loss.loss_floor;
                let clamped: Vec<f64> = signal.iter().map(|l| l.max(floor)).collect();
                Some(coefficients_to_grad(
                    &l4_coefficients(&weights, &clamped, self.cfg.grad_mode),
                    &z,
                )?)
            }
            Strategy::NaiveDynamic => Some(coefficients_to_grad(
                &total_loss_coefficients(&weights, signal),
                &z,
            )?),
            _ => None,
        };

        let centers = match (&self.bank, &pass.embeddings[0]) {
            (Some(bank), Some(emb)) if weights[0] > 0.0 => {
                Some(update_centers(emb, &batches[0].labels, bank)?)
            }
            _ => None,
        };

        let total = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
        let row = TraceRow {
            step: self.step,
            losses,
            smoothed,
            weights,
            total,
        };
        Ok(StepPlan {
            row,
            theta_grads,
            psi_grad,
            centers,
            eta_theta: self.cfg.eta_theta,
            eta_psi: self.cfg.eta_psi,
        })
    }

    /// One full step: plan, then apply both updates.
    pub fn train_step(&mut self, batches: &[TaskBatch]) -> Result<TraceRow> {
        let plan = self.plan_step(batches)?;
        plan.apply_theta(&mut self.net);
        plan.apply_psi(&mut self.gen)?;
        plan.apply_centers(&mut self.bank);
        self.step += 1;
        Ok(plan.row)
    }

    /// Runs `cfg.steps` steps with batches drawn from `data` by a generator
    /// seeded from `cfg.seed`.
    pub fn train(&mut self, data: &TaskDataset) -> Result<TrainingTrace> {
        if data.tasks() != self.net.tasks() {
            return Err(Error::Argument(format!(
                "dataset has {} tasks, network {}",
                data.tasks(),
                self.net.tasks()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut trace = TrainingTrace::default();
        for _ in 0..self.cfg.steps {
            let batches = data.sample_batches(&mut rng, self.cfg.batch_size)?;
            trace.rows.push(self.train_step(&batches)?);
        }
        Ok(trace)
    }

    /// Training-set accuracy of every task.
    pub fn accuracies(&self, data: &TaskDataset) -> Result<Vec<f64>> {
        data.tasks
            .iter()
            .enumerate()
            .map(|(t, d)| self.net.accuracy(&d.inputs, &d.labels, t))
            .collect()
    }

    /// Network, generator, and centers as one named store.
    pub fn checkpoint_params(&self) -> ParamStore {
        let mut ps = self.net.params().clone();
        for (name, v) in self.gen.to_params().iter() {
            ps.insert(name, v.clone());
        }
        if let Some(b) = &self.bank {
            ps.insert("centers", b.centers().clone());
        }
        ps
    }
}
