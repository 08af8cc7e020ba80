//! Mask plans: the partition of valid grid positions into visible and masked
//! sets, plus the subsampled prediction set.

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use rand::seq::SliceRandom;

/// Partition of the valid positions of one grid for a masked-modeling step.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<(usize, usize)>,
    pub masked: Vec<(usize, usize)>,
    /// Prediction locations, a subset of `masked`.
    pub predicted: Vec<(usize, usize)>,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    pub seed: u64,
}

/// Build a mask plan over a validity mask (row-major, `cols` wide).
///
/// `n_mask = clamp(round(mask_ratio * n_valid), 1, n_valid - 1)` positions are
/// drawn uniformly without replacement; `|p| = min(n_mask, max(1,
/// round(prediction_ratio * n_valid)))` of them become prediction locations.
/// Deterministic in `seed`.
pub fn make_mask_plan(
    validity: &[bool],
    cols: usize,
    mask_ratio: f64,
    prediction_ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    let valid: Vec<(usize, usize)> = validity
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| (i / cols, i % cols))
        .collect();
    let n_valid = valid.len();
    if n_valid < 2 {
        return Err(Error::DegenerateGrid);
    }
    if !(0.0..1.0).contains(&mask_ratio) || mask_ratio <= 0.0 {
        return Err(Error::Config(format!("mask_ratio {mask_ratio} not in (0,1)")));
    }
    if prediction_ratio <= 0.0 || prediction_ratio > mask_ratio {
        return Err(Error::Config(format!(
            "prediction_ratio {prediction_ratio} not in (0, mask_ratio]"
        )));
    }

    let n_mask = ((mask_ratio * n_valid as f64).round() as usize).clamp(1, n_valid - 1);
    let mut order = valid;
    let mut rng = stream_rng(seed, "maskplan");
    order.shuffle(&mut rng);
    let masked: Vec<(usize, usize)> = order[..n_mask].to_vec();
    let visible: Vec<(usize, usize)> = order[n_mask..].to_vec();

    let n_pred = ((prediction_ratio * n_valid as f64).round() as usize).max(1).min(n_mask);
    let mut pool = masked.clone();
    pool.shuffle(&mut rng);
    let predicted = pool[..n_pred].to_vec();

    Ok(MaskPlan { visible, masked, predicted, mask_ratio, prediction_ratio, seed })
}
