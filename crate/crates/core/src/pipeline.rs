//! Labelling and categorization glue used by the CLI and the tests.

use std::collections::HashMap;

use crate::error::{Error, MetricsError};
use crate::io::SoftLabelRecord;
use crate::model::Emotion;
use crate::par::Execution;
use crate::scoring::{AuPredictions, EbcPredictions, SoftLabeler};
use crate::subsets::{categorize, SubsetAssignment};

/// Soft-labels every image; hard labels and subsets are filled in for images
/// found in `hard_labels`.
pub fn label_records(
    labeler: &SoftLabeler,
    ebc: &EbcPredictions,
    au: &AuPredictions,
    hard_labels: Option<&HashMap<String, Emotion>>,
    exec: Execution,
) -> Result<Vec<SoftLabelRecord>, Error> {
    let labeled = labeler.label_batch(ebc, au, exec)?;
    Ok(labeled
        .into_iter()
        .map(|l| {
            let hard = hard_labels.and_then(|h| h.get(&l.image_id).copied());
            SoftLabelRecord {
                subset: hard.map(|h| categorize(&l.scores.soft_label, h).subset),
                image_id: l.image_id,
                soft_label: l.scores.soft_label,
                hard_label: hard,
            }
        })
        .collect())
}

/// Assigns subsets. The hard label comes from the record itself or, failing
/// that, from `hard_labels`; a record with neither is an error.
pub fn categorize_records(
    records: &[SoftLabelRecord],
    hard_labels: Option<&HashMap<String, Emotion>>,
) -> Result<Vec<SubsetAssignment>, Error> {
    records
        .iter()
        .map(|r| {
            let hard = r
                .hard_label
                .or_else(|| hard_labels.and_then(|h| h.get(&r.image_id).copied()))
                .ok_or_else(|| {
                    Error::Data(crate::error::DataError::Invalid(format!(
                        "no hard label for image `{}`",
                        r.image_id
                    )))
                })?;
            Ok(SubsetAssignment::new(r.image_id.clone(), &r.soft_label, hard))
        })
        .collect()
}

/// Pairs truth and prediction records by image id, in truth order.
pub fn align<'a>(
    truth: &'a [SoftLabelRecord],
    pred: &'a [SoftLabelRecord],
) -> Result<Vec<(&'a SoftLabelRecord, &'a SoftLabelRecord)>, Error> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        }
        .into());
    }
    let by_id: HashMap<&str, &SoftLabelRecord> = pred.iter().map(|r| (r.image_id.as_str(), r)).collect();
    truth
        .iter()
        .map(|t| {
            by_id.get(t.image_id.as_str()).map(|p| (t, *p)).ok_or_else(|| {
                Error::Data(crate::error::DataError::Invalid(format!(
                    "image `{}` missing from predictions",
                    t.image_id
                )))
            })
        })
        .collect()
}
