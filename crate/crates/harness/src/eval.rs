//! Prediction files against ground truth.

use std::path::Path;

use mst_core::metrics::{csv_report, text_report, SequenceResult, Summary};

use crate::error::{HarnessError, Result};
use crate::scene::read_boxes;

pub fn evaluate(pred: &Path, gt: &Path) -> Result<Summary> {
    let p = read_boxes(pred)?;
    let g = read_boxes(gt)?;
    if p.len() != g.len() {
        return Err(HarnessError::Data(format!(
            "{} has {} lines, {} has {}",
            pred.display(),
            p.len(),
            gt.display(),
            g.len()
        )));
    }
    Ok(Summary::of(&SequenceResult::from_pairs(&p, &g)?))
}

/// Text and CSV reports over named `(pred, gt)` pairs.
pub fn evaluate_all(pairs: &[(String, &Path, &Path)]) -> Result<(String, String)> {
    let rows = pairs
        .iter()
        .map(|(name, p, g)| Ok((name.clone(), evaluate(p, g)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((text_report(&rows), csv_report(&rows)))
}
