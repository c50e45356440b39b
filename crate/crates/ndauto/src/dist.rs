use rand::Rng;

use crate::error::{NdError, Result};
use crate::{Real, Tensor, Var};

/// Batch of categorical distributions parameterized by row logits.
#[derive(Clone, Copy, Debug)]
pub struct Categorical<'g> {
    logits: Var<'g>,
    log_probs: Var<'g>,
}

impl<'g> Categorical<'g> {
    pub fn new(logits: Var<'g>) -> Result<Self> {
        if logits.value().data().iter().any(|x| x.is_nan()) {
            return Err(NdError::NonFinite {
                what: "categorical logits".into(),
            });
        }
        Ok(Self {
            logits,
            log_probs: logits.log_softmax(),
        })
    }

    pub fn logits(&self) -> Var<'g> {
        self.logits
    }

    /// `[batch, actions]` log-probabilities.
    pub fn log_probs(&self) -> Var<'g> {
        self.log_probs
    }

    pub fn probs(&self) -> Tensor {
        self.log_probs.value().map(Real::exp)
    }

    pub fn num_actions(&self) -> usize {
        self.logits.cols()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let p = self.probs();
        (0..p.rows())
            .map(|r| {
                let row = p.row_slice(r);
                let u: Real = rng.gen::<f64>() as Real;
                let mut acc = 0.0;
                for (i, pi) in row.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                row.len() - 1
            })
            .collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        let lp = self.log_probs.value();
        (0..lp.rows())
            .map(|r| {
                lp.row_slice(r)
                    .iter()
                    .enumerate()
                    .fold(
                        (0, Real::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    /// `[batch, 1]` log-probability of the given actions.
    pub fn log_prob(&self, actions: &[usize]) -> Result<Var<'g>> {
        self.log_probs.gather_cols(actions)
    }

    /// `[batch, 1]` entropy.
    pub fn entropy(&self) -> Var<'g> {
        let p = self.log_probs.exp();
        p.mul(self.log_probs).expect("same shape").row_sum().neg()
    }

    /// `[batch, 1]` values of `KL(self || other)`.
    pub fn kl_to(&self, other: &Categorical<'g>) -> Result<Var<'g>> {
        let p = self.log_probs.exp();
        let diff = self.log_probs.sub(other.log_probs)?;
        Ok(p.mul(diff)?.row_sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn uniform_entropy_is_log_n() {
        let g = Graph::new();
        let d = Categorical::new(g.constant(Tensor::zeros(&[1, 5]))).unwrap();
        assert!((d.entropy().item() - (5.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_to_self_is_zero() {
        let g = Graph::new();
        let d = Categorical::new(g.constant(Tensor::row(&[0.3, -1.2, 2.0]))).unwrap();
        assert!(d.kl_to(&d).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let g = Graph::new();
        let d = Categorical::new(g.constant(Tensor::row(&[0.0, (3.0 as Real).ln()]))).unwrap();
        let p = d.probs();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn nan_logits_rejected() {
        let g = Graph::new();
        assert!(Categorical::new(g.constant(Tensor::row(&[0.0, Real::NAN]))).is_err());
    }
}
