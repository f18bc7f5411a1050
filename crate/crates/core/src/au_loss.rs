//! Weighted multi-label cross entropy over the 21-element AU vector, with its
//! analytic gradient, for trainers that want to check their implementation.

use crate::error::LossError;
use crate::model::{AuVector, NUM_AUS};

/// Clamp applied to predictions before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuLossInput {
    pub au_gt: AuVector,
    pub au_hat: AuVector,
    pub w_pos: AuVector,
    pub w_neg: AuVector,
}

fn to_array(what: &'static str, v: &[f64]) -> Result<AuVector, LossError> {
    v.try_into().map_err(|_| LossError::Dimension {
        what,
        expected: NUM_AUS,
        got: v.len(),
    })
}

impl AuLossInput {
    /// Uses the indicator weight maps: `w_pos` marks active AUs of the ground
    /// truth and `w_neg` the inactive ones.
    pub fn new(au_gt: &[f64], au_hat: &[f64]) -> Result<AuLossInput, LossError> {
        let au_gt = to_array("au_gt", au_gt)?;
        let au_hat = to_array("au_hat", au_hat)?;
        Ok(AuLossInput {
            au_gt,
            au_hat,
            w_pos: au_gt,
            w_neg: au_gt.map(|g| 1.0 - g),
        })
    }

    pub fn with_weights(au_gt: &[f64], au_hat: &[f64], w_pos: &[f64], w_neg: &[f64]) -> Result<AuLossInput, LossError> {
        Ok(AuLossInput {
            au_gt: to_array("au_gt", au_gt)?,
            au_hat: to_array("au_hat", au_hat)?,
            w_pos: to_array("w_pos", w_pos)?,
            w_neg: to_array("w_neg", w_neg)?,
        })
    }

    fn clamped(&self, i: usize) -> f64 {
        self.au_hat[i].clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    }
}

/// `(positive, negative)` parts of the loss for one image.
pub fn au_loss_parts(input: &AuLossInput) -> (f64, f64) {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for i in 0..NUM_AUS {
        let hat = input.clamped(i);
        let gt = input.au_gt[i];
        pos -= input.w_pos[i] * gt * hat.ln();
        neg -= input.w_neg[i] * (1.0 - gt) * (1.0 - hat).ln();
    }
    (pos, neg)
}

pub fn au_loss(input: &AuLossInput) -> f64 {
    let (pos, neg) = au_loss_parts(input);
    pos + neg
}

/// Loss summed over a dataset.
pub fn dataset_loss<'a>(inputs: impl IntoIterator<Item = &'a AuLossInput>) -> f64 {
    inputs.into_iter().map(au_loss).sum()
}

/// d loss / d au_hat, evaluated at the clamped prediction.
pub fn au_loss_grad(input: &AuLossInput) -> AuVector {
    std::array::from_fn(|i| {
        let hat = input.clamped(i);
        let gt = input.au_gt[i];
        -input.w_pos[i] * gt / hat + input.w_neg[i] * (1.0 - gt) / (1.0 - hat)
    })
}
