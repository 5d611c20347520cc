//! Alignment, recognition and composite objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::scalar::Scalar;

/// Default label smoothing for the recognition objective.
pub const LABEL_SMOOTHING: f64 = 0.1;

/// Weights of the composite objective `gamma * ce + beta * l2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { gamma, beta };
        w.validate()?;
        Ok(w)
    }

    /// Pure alignment objective.
    pub fn alignment() -> Self {
        LossWeights { gamma: 0.0, beta: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.beta.is_finite()
            && self.gamma >= 0.0
            && self.beta >= 0.0
            && self.gamma + self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights need gamma, beta >= 0 and gamma + beta > 0 (got {}, {})",
                self.gamma, self.beta
            )))
        }
    }

    /// `gamma * ce + beta * l2` on plain numbers.
    pub fn combine(&self, ce: f64, l2: f64) -> Result<f64> {
        if !ce.is_finite() || !l2.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(self.gamma * ce + self.beta * l2)
    }
}

/// Mean squared Euclidean distance over `(student, teacher)` pairs.
/// Gradient reaches a teacher vector only if it is itself trainable.
pub fn l2_pair_loss<S: Scalar>(tape: &mut Tape<S>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("l2_pair_loss: empty batch"));
    }
    let dists = pairs
        .iter()
        .map(|&(a, b)| tape.sq_dist(a, b))
        .collect::<Result<Vec<_>>>()?;
    let sum = tape.add_n(&dists)?;
    Ok(tape.scale(sum, S::lit(1.0 / pairs.len() as f64)))
}

/// `gamma * ce + beta * l2` on the tape. A missing term counts as zero.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, ce: Option<Var>, l2: Option<Var>, w: LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    for (v, k) in [(ce, w.gamma), (l2, w.beta)] {
        if let Some(v) = v {
            let x = tape.value(v).item();
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            terms.push(tape.scale(v, S::lit(k)));
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("total_loss: no loss terms"));
    }
    tape.add_n(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn scalar_loss(tape: &mut Tape<f64>, x: f64) -> Var {
        tape.leaf(Tensor::scalar(x), true)
    }

    #[test]
    fn composite_examples() {
        let w = LossWeights::new(1.0, 1.0).unwrap();
        assert_eq!(w.combine(2.0, 0.5).unwrap(), 2.5);
        let w = LossWeights::new(0.0, 3.0).unwrap();
        assert_eq!(w.combine(7.0, 0.5).unwrap(), 1.5);
        let w = LossWeights::new(1.0, 100.0).unwrap();
        assert!((w.combine(2.0, 0.01).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(w.combine(f64::NAN, 0.0), Err(Error::NonFiniteLoss)));
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 2.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn total_loss_on_tape() {
        let mut tape = Tape::train();
        let ce = scalar_loss(&mut tape, 2.0);
        let l2 = scalar_loss(&mut tape, 0.5);
        let t = total_loss(&mut tape, Some(ce), Some(l2), LossWeights::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(tape.value(t).item(), 2.5);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.wrt(ce).unwrap().item(), 1.0);
        assert_eq!(g.wrt(l2).unwrap().item(), 1.0);

        let mut tape = Tape::train();
        let ce = scalar_loss(&mut tape, f64::NAN);
        assert!(matches!(
            total_loss(&mut tape, Some(ce), None, LossWeights::alignment()),
            Err(Error::NonFiniteLoss)
        ));
    }

    #[test]
    fn l2_pair_examples() {
        let mut tape = Tape::<f64>::train();
        let e1 = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let ne1 = tape.constant(Tensor::vector(vec![-1.0, 0.0]));
        let e2 = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let same = l2_pair_loss(&mut tape, &[(e1, e1)]).unwrap();
        let opp = l2_pair_loss(&mut tape, &[(e1, ne1)]).unwrap();
        let orth = l2_pair_loss(&mut tape, &[(e1, e2)]).unwrap();
        let batch = l2_pair_loss(&mut tape, &[(e1, ne1), (e1, e2)]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert_eq!(tape.value(opp).item(), 4.0);
        assert_eq!(tape.value(orth).item(), 2.0);
        assert_eq!(tape.value(batch).item(), 3.0);
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        assert!(l2_pair_loss(&mut tape, &[(a, e1)]).is_err());
    }

    #[test]
    fn l2_gradient_only_to_trainable_side() {
        let mut tape = Tape::<f64>::train();
        let a = tape.leaf(Tensor::vector(vec![0.6, 0.8]), true);
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = l2_pair_loss(&mut tape, &[(a, b)]).unwrap();
        let g = tape.backward(l).unwrap();
        let ga = g.wrt(a).unwrap().data().to_vec();
        assert!((ga[0] - 2.0 * (0.6 - 1.0)).abs() < 1e-12);
        assert!((ga[1] - 1.6).abs() < 1e-12);
        assert!(g.wrt(b).is_none());
    }
}
