//! The dynamic weight generator and its training signal.
//!
//! Task weights are a softmax over a linear map of the shared feature vector
//! `z`: `w = softmax(Ψ·z + b)`. The generator is trained on
//! `L₄ = Σ wᵢ / Lᵢ`, with the task losses held constant, so descent moves
//! weight onto whichever task currently has the largest loss.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{softmax_slice, Tensor};

pub const PSI: &str = "gen.psi";
pub const BIAS: &str = "gen.bias";

/// Which derivative of the weight loss drives the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightGradMode {
    /// Row `i` gets `wᵢ(1 − wᵢ)/Lᵢ · z`: only the direct `∂wᵢ/∂ψᵢ` term.
    #[default]
    PaperSimplified,
    /// The full softmax-Jacobian derivative of `Σ wⱼ/Lⱼ`.
    ExactL4,
}

impl std::str::FromStr for WeightGradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper_simplified" => Ok(Self::PaperSimplified),
            "exact" | "exact_l4" => Ok(Self::ExactL4),
            other => Err(Error::Argument(format!("unknown gradient mode `{other}`"))),
        }
    }
}

/// Parameters `Ψ[T×d_z]` and `b[T]` of the weight softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGenerator {
    psi: Tensor,
    bias: Tensor,
    /// When false the bias stays at its initial value during updates.
    pub train_bias: bool,
}

/// Gradient of a generator objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrad {
    pub psi: Tensor,
    pub bias: Tensor,
}

impl WeightGenerator {
    /// Zero-initialized generator: uniform weights for every input.
    pub fn zeros(tasks: usize, feature_dim: usize) -> Result<Self> {
        Self::from_parts(
            Tensor::zeros(&[tasks, feature_dim]),
            Tensor::zeros(&[tasks]),
        )
    }

    pub fn from_parts(psi: Tensor, bias: Tensor) -> Result<Self> {
        let (tasks, dim) = psi.dims2()?;
        if tasks < 2 || dim < 1 {
            return Err(Error::Argument(format!(
                "generator needs at least 2 tasks and 1 feature, got {tasks}×{dim}"
            )));
        }
        if bias.shape() != [tasks] {
            return Err(dim_err("generator bias", psi.shape(), bias.shape()));
        }
        Ok(Self {
            psi,
            bias,
            train_bias: true,
        })
    }

    pub fn tasks(&self) -> usize {
        self.psi.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.psi.shape()[1]
    }

    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.feature_dim() {
            return Err(dim_err("generator input", &[z.len()], self.psi.shape()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("generator input is not finite".into()));
        }
        Ok(())
    }

    /// `ψᵢ·z + bᵢ` for every task.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        Ok((0..self.tasks())
            .map(|i| dot(self.psi.row(i), z) + self.bias.data()[i])
            .collect())
    }

    /// Applies `Ψ ← Ψ − η·∇Ψ` (and the bias, when trained).
    pub fn descend(&mut self, grad: &GeneratorGrad, eta: f64) -> Result<()> {
        if grad.psi.shape() != self.psi.shape() || grad.bias.shape() != self.bias.shape() {
            return Err(dim_err(
                "generator update",
                self.psi.shape(),
                grad.psi.shape(),
            ));
        }
        for (p, g) in self.psi.data_mut().iter_mut().zip(grad.psi.data()) {
            *p -= eta * g;
        }
        if self.train_bias {
            for (p, g) in self.bias.data_mut().iter_mut().zip(grad.bias.data()) {
                *p -= eta * g;
            }
        }
        Ok(())
    }

    /// Parameters as a store, for checkpointing and gradient checks.
    pub fn to_params(&self) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert(PSI, self.psi.clone());
        ps.insert(BIAS, self.bias.clone());
        ps
    }

    pub fn from_params(ps: &ParamStore) -> Result<Self> {
        Self::from_parts(ps.get(PSI)?.clone(), ps.get(BIAS)?.clone())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Task weights `softmax(Ψ·z + b)`.
pub fn generate_weights(z: &[f64], gen: &WeightGenerator) -> Result<Vec<f64>> {
    softmax_slice(&gen.logits(z)?)
}

fn clamp_losses(task_losses: &[f64], floor: f64) -> Result<Vec<f64>> {
    if let Some(l) = task_losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Contract(format!(
            "task loss {l} must be finite and ≥ 0"
        )));
    }
    Ok(task_losses.iter().map(|l| l.max(floor)).collect())
}

/// `L₄ = Σ wᵢ / max(Lᵢ, floor)`.
pub fn weight_loss_l4(weights: &[f64], task_losses: &[f64], floor: f64) -> Result<f64> {
    crate::losses::check_simplex(weights, task_losses.len())?;
    let losses = clamp_losses(task_losses, floor)?;
    Ok(weights.iter().zip(&losses).map(|(w, l)| w / l).sum())
}

/// Per-task coefficients `cᵢ` such that `∂/∂ψᵢ = cᵢ·z` and `∂/∂bᵢ = cᵢ`.
pub fn l4_coefficients(weights: &[f64], losses: &[f64], mode: WeightGradMode) -> Vec<f64> {
    match mode {
        WeightGradMode::PaperSimplified => weights
            .iter()
            .zip(losses)
            .map(|(w, l)| w * (1.0 - w) / l)
            .collect(),
        WeightGradMode::ExactL4 => {
            let mean: f64 = weights.iter().zip(losses).map(|(w, l)| w / l).sum();
            weights
                .iter()
                .zip(losses)
                .map(|(w, l)| w * (1.0 / l - mean))
                .collect()
        }
    }
}

/// Expands per-task coefficients into a generator gradient.
pub fn coefficients_to_grad(coeffs: &[f64], z: &[f64]) -> Result<GeneratorGrad> {
    let t = coeffs.len();
    let d = z.len();
    let mut psi = Vec::with_capacity(t * d);
    for c in coeffs {
        psi.extend(z.iter().map(|v| c * v));
    }
    Ok(GeneratorGrad {
        psi: Tensor::matrix(t, d, psi)?,
        bias: Tensor::vector(coeffs.to_vec())?,
    })
}

/// Gradient of `L₄` with respect to `Ψ` and `b` at input `z`.
pub fn psi_gradient(
    z: &[f64],
    gen: &WeightGenerator,
    task_losses: &[f64],
    mode: WeightGradMode,
    floor: f64,
) -> Result<GeneratorGrad> {
    if task_losses.len() != gen.tasks() {
        return Err(dim_err(
            "psi_gradient",
            &[task_losses.len()],
            gen.psi.shape(),
        ));
    }
    let weights = generate_weights(z, gen)?;
    let losses = clamp_losses(task_losses, floor)?;
    coefficients_to_grad(&l4_coefficients(&weights, &losses, mode), z)
}

/// Builds `L₄(softmax(Ψ·z + b))` on a tape, reading `Ψ` and `b` from `params`.
pub fn weight_loss_on_graph(
    g: &mut Graph,
    params: &ParamStore,
    z: &[f64],
    task_losses: &[f64],
    floor: f64,
) -> Result<Var> {
    let psi = g.param(params, PSI)?;
    let bias = g.param(params, BIAS)?;
    let zc = g.constant(Tensor::matrix(z.len(), 1, z.to_vec())?);
    let logits = g.matmul(psi, zc)?;
    let logits = g.reshape(logits, &[task_losses.len()])?;
    let logits = g.add(logits, bias)?;
    let w = g.softmax(logits)?;
    let inv = clamp_losses(task_losses, floor)?
        .into_iter()
        .map(|l| 1.0 / l)
        .collect();
    let inv = g.constant(Tensor::vector(inv)?);
    g.dot(w, inv)
}

/// `Ψ` and `b` after replaying a history of `(z, losses)` steps from zero,
/// accumulating the simplified gradient written in terms of the
/// exponentials `aᵢ = exp(ψᵢ·z + bᵢ)`:
///
/// `ψᵢ = −η Σₜ (1/Lᵢ) · aᵢ Σ_{j≠i} aⱼ / (Σ a)² · z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub psi: Tensor,
    pub bias: Tensor,
}

pub fn closed_form_psi(
    history: &[(Vec<f64>, Vec<f64>)],
    eta: f64,
    tasks: usize,
    feature_dim: usize,
    floor: f64,
    train_bias: bool,
) -> Result<ClosedForm> {
    let mut psi = vec![0.0; tasks * feature_dim];
    let mut bias = vec![0.0; tasks];
    for (z, losses) in history {
        if z.len() != feature_dim || losses.len() != tasks {
            return Err(dim_err(
                "closed_form_psi",
                &[losses.len(), z.len()],
                &[tasks, feature_dim],
            ));
        }
        let losses = clamp_losses(losses, floor)?;
        let a: Vec<f64> = (0..tasks)
            .map(|i| (dot(&psi[i * feature_dim..(i + 1) * feature_dim], z) + bias[i]).exp())
            .collect();
        let total: f64 = a.iter().sum();
        let coeff: Vec<f64> = (0..tasks)
            .map(|i| {
                let others: f64 = a
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, v)| v)
                    .sum();
                a[i] * others / (total * total) / losses[i]
            })
            .collect();
        for i in 0..tasks {
            for (p, zv) in psi[i * feature_dim..(i + 1) * feature_dim]
                .iter_mut()
                .zip(z)
            {
                *p -= eta * coeff[i] * zv;
            }
            if train_bias {
                bias[i] -= eta * coeff[i];
            }
        }
    }
    Ok(ClosedForm {
        psi: Tensor::matrix(tasks, feature_dim, psi)?,
        bias: Tensor::vector(bias)?,
    })
}

/// `w₁/w₂ = exp((1/L₂ − 1/L₁) · a₁a₂/(a₁+a₂)² · ZZᵀ)` for two tasks.
pub fn two_task_weight_ratio(l1: f64, l2: f64, a1: f64, a2: f64, zz: f64) -> Result<f64> {
    if !(l1 > 0.0 && l2 > 0.0) {
        return Err(Error::Contract(format!(
            "losses must be positive, got {l1}, {l2}"
        )));
    }
    if !(a1 > 0.0 && a2 > 0.0) || !(zz.is_finite() && zz >= 0.0) {
        return Err(Error::Contract(format!(
            "need a₁, a₂ > 0 and ZZᵀ ≥ 0, got {a1}, {a2}, {zz}"
        )));
    }
    let s = a1 + a2;
    Ok(((1.0 / l2 - 1.0 / l1) * a1 * a2 / (s * s) * zz).exp())
}
