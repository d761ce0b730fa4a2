//! Seeded synthetic multi-task classification problems.
//!
//! All tasks draw from one set of latent class prototypes and one shared
//! latent→input map, so class identities and the features that separate them
//! are common to every task. Tasks differ in cluster spread, label noise,
//! class count, and a per-task input offset.

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::TaskBatch;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub classes: usize,
    /// Standard deviation of each class cluster in latent space.
    pub sigma: f64,
    /// Fraction of samples whose labels are shuffled among themselves.
    pub noise: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultySpec {
    pub tasks: Vec<TaskSpec>,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Standard deviation of the latent class prototypes.
    pub prototype_scale: f64,
    /// Standard deviation of the per-task input offset.
    pub modality_shift: f64,
}

impl Default for DifficultySpec {
    /// Three tasks: a medium verification task, a hard task, and an easy task.
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskSpec {
                    classes: 8,
                    sigma: 0.8,
                    noise: 0.05,
                    samples: 4096,
                },
                TaskSpec {
                    classes: 8,
                    sigma: 2.0,
                    noise: 0.2,
                    samples: 4096,
                },
                TaskSpec {
                    classes: 8,
                    sigma: 0.3,
                    noise: 0.0,
                    samples: 4096,
                },
            ],
            latent_dim: 8,
            input_dim: 16,
            prototype_scale: 1.5,
            modality_shift: 0.5,
        }
    }
}

impl DifficultySpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 tasks, got {}",
                self.tasks.len()
            )));
        }
        if self.latent_dim == 0 || self.input_dim == 0 {
            return Err(Error::Argument(
                "latent and input dimensions must be ≥ 1".into(),
            ));
        }
        if !(self.prototype_scale.is_finite() && self.prototype_scale > 0.0)
            || !(self.modality_shift.is_finite() && self.modality_shift >= 0.0)
        {
            return Err(Error::Argument(
                "prototype scale must be > 0 and shift ≥ 0".into(),
            ));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.classes < 2 {
                return Err(Error::Argument(format!(
                    "task {i}: need at least 2 classes"
                )));
            }
            if !(t.sigma > 0.0 && t.sigma.is_finite()) {
                return Err(Error::Argument(format!("task {i}: sigma must be > 0")));
            }
            if !(0.0..0.5).contains(&t.noise) {
                return Err(Error::Argument(format!(
                    "task {i}: noise must be in [0, 0.5)"
                )));
            }
            if t.samples < t.classes {
                return Err(Error::Argument(format!(
                    "task {i}: fewer samples than classes"
                )));
            }
        }
        Ok(())
    }

    pub fn classes_per_task(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Labels before noise was applied.
    pub clean_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub tasks: Vec<TaskData>,
    pub spec: DifficultySpec,
    pub seed: u64,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates the dataset described by `spec`; identical `(spec, seed)` give
/// identical data. Each task draws from its own RNG stream, so changing one
/// task's knobs leaves the others untouched.
pub fn make_tasks(spec: &DifficultySpec, seed: u64) -> Result<TaskDataset> {
    spec.validate()?;
    let max_k = spec.tasks.iter().map(|t| t.classes).max().unwrap_or(0);
    let (ld, id) = (spec.latent_dim, spec.input_dim);

    let mut shared = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = normal_vec(&mut shared, max_k * ld, spec.prototype_scale);
    let mixing = Tensor::matrix(
        ld,
        id,
        normal_vec(&mut shared, ld * id, 1.0 / (ld as f64).sqrt()),
    )?;

    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (t, ts) in spec.tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64 + 1);
        let shift = normal_vec(&mut rng, id, spec.modality_shift);

        let clean_labels: Vec<usize> = (0..ts.samples).map(|k| k % ts.classes).collect();
        let mut latent = Vec::with_capacity(ts.samples * ld);
        for &c in &clean_labels {
            let noise = normal_vec(&mut rng, ld, ts.sigma);
            latent.extend(
                prototypes[c * ld..(c + 1) * ld]
                    .iter()
                    .zip(noise)
                    .map(|(p, e)| p + e),
            );
        }
        let latent = Tensor::matrix(ts.samples, ld, latent)?;
        let mut inputs = crate::tensor::matmul(&latent, &mixing)?;
        for i in 0..ts.samples {
            for (x, s) in inputs.data_mut()[i * id..(i + 1) * id]
                .iter_mut()
                .zip(&shift)
            {
                *x += s;
            }
        }
        let labels = corrupt_labels(&clean_labels, ts.noise, &mut rng);
        tasks.push(TaskData {
            spec: ts.clone(),
            inputs,
            labels,
            clean_labels,
        });
    }
    Ok(TaskDataset {
        tasks,
        spec: spec.clone(),
        seed,
    })
}

/// Shuffles the labels of a random `noise` fraction of samples among
/// themselves, then swaps away any label that landed back on its own sample.
/// Class counts are unchanged.
fn corrupt_labels(clean: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = clean.to_vec();
    let m = (noise * clean.len() as f64).round() as usize;
    if m < 2 {
        return labels;
    }
    let chosen = index::sample(rng, clean.len(), m).into_vec();
    let mut pool: Vec<usize> = chosen.iter().map(|&i| clean[i]).collect();
    pool.shuffle(rng);
    for a in 0..m {
        if pool[a] != clean[chosen[a]] {
            continue;
        }
        if let Some(b) =
            (0..m).find(|&b| pool[b] != clean[chosen[a]] && pool[a] != clean[chosen[b]])
        {
            pool.swap(a, b);
        }
    }
    for (&i, &y) in chosen.iter().zip(&pool) {
        labels[i] = y;
    }
    labels
}

impl TaskDataset {
    pub fn tasks(&self) -> usize {
        self.tasks.len()
    }

    /// One batch per task, `batch_size` distinct samples each.
    pub fn sample_batches(
        &self,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<Vec<TaskBatch>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(t, data)| {
                let n = data.labels.len();
                if batch_size == 0 || batch_size > n {
                    return Err(Error::Argument(format!(
                        "batch size {batch_size} invalid for task {t} with {n} samples"
                    )));
                }
                let idx = index::sample(rng, n, batch_size).into_vec();
                Ok(TaskBatch {
                    task: t,
                    inputs: data.inputs.gather_rows(&idx)?,
                    labels: idx.iter().map(|&i| data.labels[i]).collect(),
                })
            })
            .collect()
    }
}

/// Writes one task as CSV: `label,x_0..x_{d-1}`.
pub fn write_task_csv<W: Write>(mut w: W, task: &TaskData) -> Result<()> {
    let (n, d) = task.inputs.dims2()?;
    let cols: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    writeln!(w, "label,{}", cols.join(","))?;
    for i in 0..n {
        let row: Vec<String> = task.inputs.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", task.labels[i], row.join(","))?;
    }
    Ok(())
}

/// Reads a task CSV written by [`write_task_csv`]; returns inputs and labels.
/// Leading `#` comment lines are skipped.
pub fn read_task_csv<R: BufRead>(r: R) -> Result<(Tensor, Vec<usize>)> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    let mut header_seen = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if !header_seen {
            if line.starts_with('#') {
                continue;
            }
            if !line.starts_with("label") {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected `label,x_0,..` header".into(),
                });
            }
            header_seen = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "bad label".into(),
            })?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {w} values, got {}", row.len()),
                })
            }
            _ => {}
        }
        labels.push(label);
        values.extend(row);
    }
    let d = width.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "no rows".into(),
    })?;
    Ok((Tensor::matrix(labels.len(), d, values)?, labels))
}
