//! Task losses: softmax cross-entropy, center loss, the verification loss that
//! joins them, and the weighted multi-task total.

use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Tolerance on `Σ w = 1` when validating a weight vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub const DEFAULT_CENTER_WEIGHT: f64 = 0.003;
pub const DEFAULT_CENTER_RATE: f64 = 0.5;
pub const DEFAULT_LOSS_FLOOR: f64 = 1e-8;

/// Per-class centers of the verification embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
    rate: f64,
}

impl CenterBank {
    /// Zero centers for `classes` classes of dimension `dim`.
    pub fn new(classes: usize, dim: usize, rate: f64) -> Result<Self> {
        Self::from_centers(Tensor::zeros(&[classes, dim]), rate)
    }

    pub fn from_centers(centers: Tensor, rate: f64) -> Result<Self> {
        centers.dims2()?;
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Argument(format!(
                "center update rate {rate} outside (0, 1]"
            )));
        }
        if !centers.is_finite() {
            return Err(Error::Argument("centers must be finite".into()));
        }
        Ok(Self { centers, rate })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    fn check_batch(&self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        let (rows, d) = embeddings.dims2()?;
        if d != self.dim() || rows != labels.len() {
            return Err(dim_err(
                "center bank",
                embeddings.shape(),
                self.centers.shape(),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::Argument(format!(
                "label {y} has no center among {} classes",
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Weights of the verification loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the center term.
    pub alpha: f64,
    /// Lower clamp on task losses inside the weight loss.
    pub loss_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_CENTER_WEIGHT,
            loss_floor: DEFAULT_LOSS_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Argument(format!(
                "alpha {} must be finite and ≥ 0",
                self.alpha
            )));
        }
        if !(1e-12..=1e-3).contains(&self.loss_floor) {
            return Err(Error::Argument(format!(
                "loss floor {} outside [1e-12, 1e-3]",
                self.loss_floor
            )));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `logits[batch×K]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, labels)?;
    Ok(g.value(ce).item())
}

/// Mean squared Euclidean distance of each embedding to its class center.
pub fn center_loss(embeddings: &Tensor, labels: &[usize], bank: &CenterBank) -> Result<f64> {
    bank.check_batch(embeddings, labels)?;
    let mut g = Graph::new();
    let x = g.constant(embeddings.clone());
    let c = g.constant(bank.centers.clone());
    let lc = g.center_loss(x, c, labels)?;
    Ok(g.value(lc).item())
}

/// Moves each center present in the batch toward its class mean:
/// `C ← C − rate · mean(C − x)`.
pub fn update_centers(
    embeddings: &Tensor,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<CenterBank> {
    bank.check_batch(embeddings, labels)?;
    let d = bank.dim();
    let mut sums = vec![0.0; bank.centers.len()];
    let mut counts = vec![0usize; bank.classes()];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, (c, x)) in sums[y * d..(y + 1) * d]
            .iter_mut()
            .zip(bank.centers.row(y).iter().zip(embeddings.row(i)))
        {
            *s += c - x;
        }
    }
    let mut next = bank.clone();
    let data = next.centers.data_mut();
    for (class, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        for j in 0..d {
            data[class * d + j] -= bank.rate * sums[class * d + j] / n as f64;
        }
    }
    if !next.centers.is_finite() {
        return Err(Error::Numeric(
            "center update produced non-finite values".into(),
        ));
    }
    Ok(next)
}

/// Cross-entropy plus `alpha` times center loss.
pub fn verification_loss(
    logits: &Tensor,
    labels: &[usize],
    embeddings: &Tensor,
    bank: &CenterBank,
    cfg: &LossConfig,
) -> Result<f64> {
    let (rows, _) = logits.dims2()?;
    if rows != embeddings.dims2()?.0 {
        return Err(dim_err(
            "verification_loss",
            logits.shape(),
            embeddings.shape(),
        ));
    }
    Ok(cross_entropy(logits, labels)? + cfg.alpha * center_loss(embeddings, labels, bank)?)
}

/// Checks that `weights` has length `tasks` and lies on the probability simplex.
pub fn check_simplex(weights: &[f64], tasks: usize) -> Result<()> {
    if weights.len() != tasks {
        return Err(Error::Contract(format!(
            "expected {tasks} weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Contract(format!("weights {weights:?} leave [0, 1]")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

/// `Σ wᵢ·Lᵢ` for simplex weights.
pub fn total_multitask_loss(task_losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_simplex(weights, task_losses.len())?;
    Ok(task_losses.iter().zip(weights).map(|(l, w)| w * l).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let ce = cross_entropy(&t(&[vec![50.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(ce < 1e-20);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        for k in [2usize, 3, 10] {
            let ce = cross_entropy(&Tensor::zeros(&[4, k]), &[0, 1, 1, 0]).unwrap();
            assert!((ce - (k as f64).ln()).abs() < 1e-14, "K={k}");
        }
        let ce = cross_entropy(&Tensor::zeros(&[1, 2]), &[0]).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 2]), &[2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn center_loss_cases() {
        let bank = CenterBank::from_centers(t(&[vec![0.0, 0.0], vec![1.0, 1.0]]), 0.5).unwrap();
        assert_eq!(
            center_loss(&t(&[vec![1.0, 1.0]]), &[1], &bank).unwrap(),
            0.0
        );
        assert_eq!(
            center_loss(&t(&[vec![1.0, 0.0]]), &[0], &bank).unwrap(),
            1.0
        );
        let v = [0.3, -0.4];
        let sym = t(&[vec![1.0 + v[0], 1.0 + v[1]], vec![1.0 - v[0], 1.0 - v[1]]]);
        let got = center_loss(&sym, &[1, 1], &bank).unwrap();
        assert!((got - 0.25).abs() < 1e-15);
    }

    #[test]
    fn center_loss_dimension_mismatch() {
        let bank = CenterBank::new(2, 2, 0.5).unwrap();
        assert!(matches!(
            center_loss(&Tensor::zeros(&[1, 3]), &[0], &bank),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn update_centers_cases() {
        let bank = CenterBank::from_centers(t(&[vec![5.0, 5.0], vec![0.0, 0.0]]), 1.0).unwrap();
        let x = t(&[vec![2.0, -1.0]]);
        let next = update_centers(&x, &[0], &bank).unwrap();
        assert_eq!(next.centers().row(0), &[2.0, -1.0]);
        assert_eq!(next.centers().row(1), &[0.0, 0.0]);

        let half = CenterBank::new(1, 2, 0.5).unwrap();
        let next = update_centers(&t(&[vec![2.0, 0.0]]), &[0], &half).unwrap();
        assert_eq!(next.centers().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn verification_loss_combines_parts() {
        let logits = t(&[vec![0.3, -0.2], vec![1.0, 0.5]]);
        let emb = t(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let labels = [0, 1];
        let bank = CenterBank::new(2, 2, 0.5).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap();
        let lc = center_loss(&emb, &labels, &bank).unwrap();
        let zero = LossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(
            verification_loss(&logits, &labels, &emb, &bank, &zero).unwrap(),
            ce
        );
        let two = LossConfig {
            alpha: 2.0,
            ..Default::default()
        };
        let got = verification_loss(&logits, &labels, &emb, &bank, &two).unwrap();
        assert!((got - (ce + 2.0 * lc)).abs() < 1e-15);
        assert!((0.5 + 2.0 * 0.25 - 1.0f64).abs() < 1e-15);

        let perfect = t(&[vec![60.0, 0.0], vec![0.0, 60.0]]);
        let at_centers = Tensor::zeros(&[2, 2]);
        let v = verification_loss(
            &perfect,
            &labels,
            &at_centers,
            &bank,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(
            total_multitask_loss(&[0.7, 2.0, 3.0], &[1.0, 0.0, 0.0]).unwrap(),
            0.7
        );
        let eq = total_multitask_loss(&[3.0; 3], &[1.0 / 3.0; 3]).unwrap();
        assert!((eq - 3.0).abs() < 1e-15);
        let v = total_multitask_loss(&[1.0, 2.0, 3.0], &[0.5, 0.3, 0.2]).unwrap();
        assert!((v - 1.7).abs() < 1e-15);
    }

    #[test]
    fn total_loss_rejects_off_simplex() {
        assert!(matches!(
            total_multitask_loss(&[1.0, 1.0], &[0.6, 0.6]),
            Err(Error::Contract(_))
        ));
        assert!(total_multitask_loss(&[1.0, 1.0], &[1.5, -0.5]).is_err());
        assert!(total_multitask_loss(&[1.0, 1.0, 1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            loss_floor: 0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
