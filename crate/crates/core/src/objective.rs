//! Margin loss over class probabilities (capsule lengths or sigmoid outputs).

use crate::backend::{CustomOp, Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

const POS_MARGIN: f64 = 0.9;
const NEG_MARGIN: f64 = 0.1;
const NEG_WEIGHT: f64 = 0.5;

/// `[B, M]` indicator targets for single labels.
pub fn one_hot<T: Float>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
        }
        data[row * classes + y] = T::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data)
}

/// Loss of a single sample's probabilities against a binary target vector.
pub fn margin_loss_single(probs: &[f64], targets: &[f64]) -> f64 {
    let m = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            t * (POS_MARGIN - p).max(0.0).powi(2) + NEG_WEIGHT * (1.0 - t) * (p - NEG_MARGIN).max(0.0).powi(2)
        })
        .sum::<f64>()
        / m
}

struct MarginLoss<T> {
    inputs: [Var; 1],
    targets: Vec<T>,
    batch: usize,
    classes: usize,
}

impl<T: Float> CustomOp<T> for MarginLoss<T> {
    fn name(&self) -> &'static str {
        "margin_loss"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &[T], _needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let scale = grad[0] / T::from_usize(self.batch * self.classes).unwrap();
        let two = T::lit(2.0);
        let (pos, neg, w) = (T::lit(POS_MARGIN), T::lit(NEG_MARGIN), T::lit(NEG_WEIGHT));
        let dp = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| {
                let hinge_pos = (pos - p).max(T::zero());
                let hinge_neg = (p - neg).max(T::zero());
                scale * (-two * t * hinge_pos + two * w * (T::one() - t) * hinge_neg)
            })
            .collect();
        vec![Some(dp)]
    }
}

/// Batch-mean margin loss.
///
/// Per sample: `(1/M) Σ_j T_j max(0, 0.9 - p_j)^2 + 0.5 (1 - T_j) max(0, p_j - 0.1)^2`.
pub fn margin_loss<T: Float>(g: &mut Graph<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    let (batch, classes) = match *g.shape(probs) {
        [b, m] => (b, m),
        ref s => return Err(Error::shape("margin_loss", format!("probabilities must be [B, M], got {s:?}"))),
    };
    if targets.shape() != [batch, classes] {
        return Err(Error::shape(
            "margin_loss",
            format!("targets {:?} vs probabilities {:?}", targets.shape(), [batch, classes]),
        ));
    }
    if batch == 0 || classes == 0 {
        return Err(Error::shape("margin_loss", "empty batch"));
    }
    if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::Contract("margin-loss targets must be 0 or 1".into()));
    }
    let (pos, neg, w) = (T::lit(POS_MARGIN), T::lit(NEG_MARGIN), T::lit(NEG_WEIGHT));
    let total: T = g
        .value(probs)
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            let hp = (pos - p).max(T::zero());
            let hn = (p - neg).max(T::zero());
            t * hp * hp + w * (T::one() - t) * hn * hn
        })
        .sum();
    let loss = total / T::from_usize(batch * classes).unwrap();
    g.custom(
        Tensor::scalar(loss),
        Box::new(MarginLoss {
            inputs: [probs],
            targets: targets.data().to_vec(),
            batch,
            classes,
        }),
    )
}
