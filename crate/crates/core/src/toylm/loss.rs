//! Scalar losses over the `vocab × T` logits of a forward pass.

use nalgebra::DMatrix;

/// Log-probabilities are floored here so that vanishing probabilities stay finite.
pub const LOG_PROB_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

pub trait OutputLoss: Sync {
    /// Loss value and its gradient with respect to the logits.
    fn value_and_grad(&self, logits: &DMatrix<f64>) -> (f64, DMatrix<f64>);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

pub fn log_softmax_at(logits: &[f64], token: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits[token] - lse
}

/// `-ln p[target]` at one position, with the log floored at `ln(1e-300)`.
#[derive(Debug, Clone)]
pub struct TokenNll {
    pub position: usize,
    pub target: usize,
    pub weight: f64,
}

impl TokenNll {
    pub fn new(position: usize, target: usize) -> Self {
        TokenNll {
            position,
            target,
            weight: 1.0,
        }
    }
}

impl OutputLoss for TokenNll {
    fn value_and_grad(&self, logits: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
        let col = logits.column(self.position);
        let logp = log_softmax(col.as_slice());
        let lp = logp[self.target];
        if lp < LOG_PROB_FLOOR {
            // floored region: constant value, no gradient
            return (-LOG_PROB_FLOOR * self.weight, grad);
        }
        for (i, l) in logp.iter().enumerate() {
            grad[(i, self.position)] = self.weight * l.exp();
        }
        grad[(self.target, self.position)] -= self.weight;
        (-lp * self.weight, grad)
    }
}

/// `KL(softmax(logits[:, position]) || reference)`.
#[derive(Debug, Clone)]
pub struct KlToReference {
    pub position: usize,
    /// Reference log-probabilities.
    pub reference_log_probs: Vec<f64>,
    pub weight: f64,
}

impl OutputLoss for KlToReference {
    fn value_and_grad(&self, logits: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
        let col = logits.column(self.position);
        let logp = log_softmax(col.as_slice());
        let terms: Vec<f64> = logp
            .iter()
            .zip(&self.reference_log_probs)
            .map(|(lp, lq)| lp - lq)
            .collect();
        let kl: f64 = logp.iter().zip(&terms).map(|(lp, t)| lp.exp() * t).sum();
        for (i, (lp, t)) in logp.iter().zip(&terms).enumerate() {
            grad[(i, self.position)] = self.weight * lp.exp() * (t - kl);
        }
        (self.weight * kl, grad)
    }
}

/// A loss that ignores its input.
#[derive(Debug, Clone)]
pub struct ConstantLoss(pub f64);

impl OutputLoss for ConstantLoss {
    fn value_and_grad(&self, logits: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        (self.0, DMatrix::zeros(logits.nrows(), logits.ncols()))
    }
}

pub struct SumLoss<'a>(pub Vec<&'a dyn OutputLoss>);

impl OutputLoss for SumLoss<'_> {
    fn value_and_grad(&self, logits: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut total = 0.0;
        let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
        for l in &self.0 {
            let (v, g) = l.value_and_grad(logits);
            total += v;
            grad += g;
        }
        (total, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, -3.0, 1000.0, 2.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_distribution_is_zero() {
        let logits = DMatrix::from_column_slice(3, 1, &[0.3, -1.0, 2.0]);
        let kl = KlToReference {
            position: 0,
            reference_log_probs: log_softmax(&[0.3, -1.0, 2.0]),
            weight: 1.0,
        };
        let (v, g) = kl.value_and_grad(&logits);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn nll_floor_is_finite() {
        let logits = DMatrix::from_column_slice(2, 1, &[0.0, 2000.0]);
        let (v, _) = TokenNll::new(0, 0).value_and_grad(&logits);
        assert!(v.is_finite());
        assert!((v + LOG_PROB_FLOOR).abs() < 1e-9);
    }
}
