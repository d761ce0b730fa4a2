//! Hard-parameter-sharing network: a fully connected shared trunk feeding
//! one branch per task. Each branch is `hidden → bottleneck → classifier`;
//! the bottleneck output is the task's embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{CenterBank, LossConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::Argument(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Self::Relu => g.relu(x),
            Self::Tanh => g.tanh(x),
            Self::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Widths of the shared layers; the last one is the feature size `d_z`.
    pub trunk_layers: Vec<usize>,
    pub branch_hidden: usize,
    /// Bottleneck (embedding) width `d₁`.
    pub embed_dim: usize,
    pub classes_per_task: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            trunk_layers: vec![64, 32],
            branch_hidden: 32,
            embed_dim: 16,
            classes_per_task: vec![8, 8, 8],
            activation: Activation::Relu,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_task.len() < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 tasks, got {}",
                self.classes_per_task.len()
            )));
        }
        let dims = [self.input_dim, self.branch_hidden, self.embed_dim];
        if self.trunk_layers.is_empty()
            || dims
                .iter()
                .chain(&self.trunk_layers)
                .chain(&self.classes_per_task)
                .any(|&d| d == 0)
        {
            return Err(Error::Argument("all network dimensions must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.classes_per_task.len()
    }

    /// Width of the trunk output, consumed by the weight generator.
    pub fn feature_dim(&self) -> usize {
        *self.trunk_layers.last().unwrap_or(&self.input_dim)
    }

    /// `(name, fan_in, fan_out)` of every dense layer, in initialization order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for (l, &w) in self.trunk_layers.iter().enumerate() {
            out.push((format!("trunk.{l}"), prev, w));
            prev = w;
        }
        for (t, &k) in self.classes_per_task.iter().enumerate() {
            out.push((format!("branch.{t}.hidden"), prev, self.branch_hidden));
            out.push((
                format!("branch.{t}.embed"),
                self.branch_hidden,
                self.embed_dim,
            ));
            out.push((format!("branch.{t}.head"), self.embed_dim, k));
        }
        out
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, i, o)| i * o + o).sum()
    }
}

/// One mini-batch for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskNet {
    config: NetConfig,
    params: ParamStore,
}

impl MultiTaskNet {
    /// Xavier-uniform weights and zero biases from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in config.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.insert(
                format!("{name}.weight"),
                Tensor::matrix(fan_in, fan_out, w)?,
            );
            params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in config.layers() {
            params.insert(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters; names and shapes must match `config`.
    pub fn from_params(config: NetConfig, stored: &ParamStore) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for name in names {
            let value = stored.get(&name)?;
            let slot = net.params.get_mut(&name)?;
            if slot.shape() != value.shape() {
                return Err(dim_err("checkpoint parameter", slot.shape(), value.shape()));
            }
            *slot = value.clone();
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tasks(&self) -> usize {
        self.config.tasks()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks() {
            return Err(Error::Argument(format!(
                "unknown task id {task}; network has {} tasks",
                self.tasks()
            )));
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param(params, &format!("{name}.weight"))?;
        let b = g.param(params, &format!("{name}.bias"))?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    /// Records the trunk on `g`, reading weights from `params`.
    pub fn trunk_on_graph(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let (_, width) = g.value(x).dims2()?;
        if width != self.config.input_dim {
            return Err(dim_err(
                "trunk input",
                g.value(x).shape(),
                &[self.config.input_dim],
            ));
        }
        let mut h = x;
        for l in 0..self.config.trunk_layers.len() {
            h = self.dense(g, params, &format!("trunk.{l}"), h)?;
            h = self.config.activation.apply(g, h);
        }
        Ok(h)
    }

    /// Records branch `task` on `g`; returns `(logits, embeddings)`.
    pub fn branch_on_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        features: Var,
        task: usize,
    ) -> Result<(Var, Var)> {
        self.check_task(task)?;
        let (_, width) = g.value(features).dims2()?;
        if width != self.config.feature_dim() {
            return Err(dim_err(
                "branch input",
                g.value(features).shape(),
                &[self.config.feature_dim()],
            ));
        }
        let h = self.dense(g, params, &format!("branch.{task}.hidden"), features)?;
        let h = self.config.activation.apply(g, h);
        let emb = self.dense(g, params, &format!("branch.{task}.embed"), h)?;
        let logits = self.dense(g, params, &format!("branch.{task}.head"), emb)?;
        Ok((logits, emb))
    }

    /// Shared-trunk activations for a batch of inputs.
    pub fn forward_shared(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_finite() {
            return Err(Error::Argument("network input is not finite".into()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = self.trunk_on_graph(&mut g, &self.params, xv)?;
        Ok(g.value(h).clone())
    }

    /// Branch outputs `(logits, embeddings)` for trunk features `z_batch`.
    pub fn forward_task(&self, z_batch: &Tensor, task: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let z = g.constant(z_batch.clone());
        let (logits, emb) = self.branch_on_graph(&mut g, &self.params, z, task)?;
        Ok((g.value(logits).clone(), g.value(emb).clone()))
    }

    /// Predicted class of every row of `x` for `task`.
    pub fn predict(&self, x: &Tensor, task: usize) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_task(&self.forward_shared(x)?, task)?;
        let (rows, _) = logits.dims2()?;
        Ok((0..rows)
            .map(|i| {
                logits
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Fraction of rows whose predicted class equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize], task: usize) -> Result<f64> {
        let pred = self.predict(x, task)?;
        if pred.len() != labels.len() {
            return Err(dim_err("accuracy", &[pred.len()], &[labels.len()]));
        }
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Loss terms of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassOutput {
    /// Loss of each task that took part, indexed by task id.
    pub task_losses: Vec<Option<f64>>,
    /// Bottleneck embeddings of each participating task's batch.
    pub embeddings: Vec<Option<Tensor>>,
    /// Trunk activations of each participating task's batch.
    pub features: Vec<Option<Tensor>>,
    /// The weighted objective `Σ wᵢ·Lᵢ` over participating tasks.
    pub total: f64,
}

/// Shared machinery for the multi-task objective and its single-task views.
///
/// `terms` lists `(batch, weight)`; the verification task (task 0) adds the
/// center term when a bank is supplied.
pub(crate) fn weighted_pass(
    net: &MultiTaskNet,
    params: &ParamStore,
    terms: &[(&TaskBatch, f64)],
    bank: Option<&CenterBank>,
    cfg: &LossConfig,
    grads_into: Option<&mut ParamStore>,
) -> Result<PassOutput> {
    let t = net.tasks();
    let mut out = PassOutput {
        task_losses: vec![None; t],
        embeddings: vec![None; t],
        features: vec![None; t],
        total: 0.0,
    };
    let mut g = Graph::new();
    let mut root: Option<Var> = None;
    for &(batch, w) in terms {
        net.check_task(batch.task)?;
        let x = g.constant(batch.inputs.clone());
        let h = net.trunk_on_graph(&mut g, params, x)?;
        let (logits, emb) = net.branch_on_graph(&mut g, params, h, batch.task)?;
        let mut loss = g.cross_entropy(logits, &batch.labels)?;
        if let (0, Some(bank)) = (batch.task, bank) {
            if bank.dim() != net.config.embed_dim {
                return Err(dim_err(
                    "center bank",
                    bank.centers().shape(),
                    &[net.config.embed_dim],
                ));
            }
            let c = g.constant(bank.centers().clone());
            let lc = g.center_loss(emb, c, &batch.labels)?;
            let lc = g.scale(lc, cfg.alpha);
            loss = g.add(loss, lc)?;
        }
        out.task_losses[batch.task] = Some(g.value(loss).item());
        out.embeddings[batch.task] = Some(g.value(emb).clone());
        out.features[batch.task] = Some(g.value(h).clone());
        let term = g.scale(loss, w);
        root = Some(match root {
            None => term,
            Some(r) => g.add(r, term)?,
        });
    }
    let root = root.ok_or_else(|| Error::Argument("no task batches given".into()))?;
    out.total = g.value(root).item();
    if let Some(store) = grads_into {
        let grads = g.backward(root)?;
        store.zero_grad();
        g.accumulate_into(&grads, store)?;
    }
    Ok(out)
}

/// The multi-task system restricted to one task: the objective is that
/// task's loss alone and the other batches are never touched.
#[derive(Clone, Copy, Debug)]
pub struct SingleTaskView<'a> {
    net: &'a MultiTaskNet,
    task: usize,
}

pub fn degenerate_single_task(net: &MultiTaskNet, task: usize) -> Result<SingleTaskView<'_>> {
    net.check_task(task)?;
    Ok(SingleTaskView { net, task })
}

impl SingleTaskView<'_> {
    pub fn task(&self) -> usize {
        self.task
    }

    fn own_batch<'b>(&self, batches: &'b [TaskBatch]) -> Result<&'b TaskBatch> {
        batches
            .iter()
            .find(|b| b.task == self.task)
            .ok_or_else(|| Error::Argument(format!("no batch for task {}", self.task)))
    }

    pub fn loss(
        &self,
        batches: &[TaskBatch],
        bank: Option<&CenterBank>,
        cfg: &LossConfig,
    ) -> Result<f64> {
        let b = self.own_batch(batches)?;
        Ok(weighted_pass(self.net, &self.net.params, &[(b, 1.0)], bank, cfg, None)?.total)
    }

    /// Loss plus gradients written into `grads` (a copy of the net's store).
    pub fn loss_and_grad(
        &self,
        batches: &[TaskBatch],
        bank: Option<&CenterBank>,
        cfg: &LossConfig,
        grads: &mut ParamStore,
    ) -> Result<PassOutput> {
        let b = self.own_batch(batches)?;
        weighted_pass(
            self.net,
            &self.net.params,
            &[(b, 1.0)],
            bank,
            cfg,
            Some(grads),
        )
    }
}

/// `Σ wᵢ·Lᵢ` over one batch per task, optionally writing gradients.
pub fn multitask_pass(
    net: &MultiTaskNet,
    batches: &[TaskBatch],
    weights: &[f64],
    bank: Option<&CenterBank>,
    cfg: &LossConfig,
    grads: Option<&mut ParamStore>,
) -> Result<PassOutput> {
    if batches.len() != net.tasks() || weights.len() != net.tasks() {
        return Err(dim_err(
            "multitask_pass",
            &[batches.len(), weights.len()],
            &[net.tasks()],
        ));
    }
    let terms: Vec<(&TaskBatch, f64)> = batches.iter().zip(weights.iter().copied()).collect();
    weighted_pass(net, &net.params, &terms, bank, cfg, grads)
}
