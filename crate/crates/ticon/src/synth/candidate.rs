//! Pretraining candidate sampling: K x K windows with enough tissue.

use super::SyntheticSlide;
use crate::seed::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// A K x K window of a slide meeting the tissue-fraction floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Index of the parent slide within its cohort.
    pub slide_index: usize,
    pub origin: (usize, usize),
    pub k: usize,
    pub tissue_fraction: f64,
}

/// All K x K windows fully inside the slide with tissue fraction at least
/// `min_tissue`, sampled uniformly without replacement up to `max_per_slide`.
/// Deterministic in `seed`; an empty result is valid.
pub fn sample_candidates(
    slide: &SyntheticSlide,
    slide_index: usize,
    k: usize,
    min_tissue: f64,
    max_per_slide: usize,
    seed: u64,
) -> Vec<Candidate> {
    let (rows, cols) = (slide.rows(), slide.cols());
    if k == 0 || k > rows || k > cols || max_per_slide == 0 {
        return Vec::new();
    }

    // 2D prefix sums of validity for O(1) window counts
    let mut prefix = vec![0u32; (rows + 1) * (cols + 1)];
    for r in 0..rows {
        for c in 0..cols {
            prefix[(r + 1) * (cols + 1) + c + 1] = prefix[r * (cols + 1) + c + 1]
                + prefix[(r + 1) * (cols + 1) + c]
                - prefix[r * (cols + 1) + c]
                + u32::from(slide.grid.validity[r * cols + c]);
        }
    }
    let window_count = |r0: usize, c0: usize| -> u32 {
        prefix[(r0 + k) * (cols + 1) + c0 + k] + prefix[r0 * (cols + 1) + c0]
            - prefix[r0 * (cols + 1) + c0 + k]
            - prefix[(r0 + k) * (cols + 1) + c0]
    };

    let area = (k * k) as f64;
    let mut feasible: Vec<Candidate> = Vec::new();
    for r0 in 0..=rows - k {
        for c0 in 0..=cols - k {
            let fraction = f64::from(window_count(r0, c0)) / area;
            if fraction >= min_tissue {
                feasible.push(Candidate {
                    slide_index,
                    origin: (r0, c0),
                    k,
                    tissue_fraction: fraction,
                });
            }
        }
    }

    let mut rng = stream_rng(seed, &format!("candidates/slide{slide_index}"));
    feasible.shuffle(&mut rng);
    feasible.truncate(max_per_slide);
    feasible
}
