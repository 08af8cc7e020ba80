//! The raw / isolated / contextualized comparison: build three per-tile
//! feature sets from the same slides and run the same probe on each.
//!
//! Probe inputs follow the concatenation rule for non-parametric probes: the
//! contextual variants are the raw embedding concatenated with the model
//! output, each block L2-normalized so neither dominates cosine geometry.

use super::{knn_probe, pca_ridge, EvalReport, Labels, ProbeDataset, RidgeOptions, Split};
use crate::error::{Error, Result};
use crate::model::{contextualize, contextualize_isolated_batch, TiconParams};
use crate::seed::stream_rng;
use crate::synth::{encode_tiles, spot_targets, EmbeddingGrid, EncoderRegistry, SyntheticSlide};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTask {
    /// All tile classes.
    TileClass,
    /// Binary task restricted to the aliased pair.
    TileAliased,
    /// Multiclass task restricted to the non-aliased classes.
    TileNonAliased,
    /// Per-tile regression targets (spot task).
    SpotRegress,
}

impl BenchTask {
    pub fn name(&self) -> &'static str {
        match self {
            BenchTask::TileClass => "tile-class",
            BenchTask::TileAliased => "tile-aliased",
            BenchTask::TileNonAliased => "tile-nonaliased",
            BenchTask::SpotRegress => "spot-regress",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Cap on probe rows per split (seeded subsample).
    pub max_per_split: usize,
    /// Contextualize in windows of this size instead of the whole grid.
    pub ctx_window: Option<usize>,
    pub spot_dim: usize,
    pub pca_dims: usize,
    pub lambdas: Vec<f64>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            ks: vec![1, 3, 5, 10, 20],
            seed: 0,
            max_per_split: 1200,
            ctx_window: None,
            spot_dim: 12,
            pca_dims: 64,
            lambdas: vec![1e-4, 1e-2, 1.0],
        }
    }
}

/// Per-tile feature matrices for the three variants over a slide cohort.
pub struct VariantFeatures {
    pub raw: Vec<f64>,
    pub raw_dim: usize,
    pub iso: Vec<f64>,
    pub iso_dim: usize,
    pub ctx: Vec<f64>,
    pub ctx_dim: usize,
    pub labels: Vec<usize>,
    pub spot: Vec<f64>,
    pub spot_dim: usize,
    /// Row -> index of the slide it came from (splits are by slide).
    pub slide_of: Vec<usize>,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Contextualize a grid window by window (train-short-test-long probing at
/// the training window size); windows are anchored on a stride-K lattice,
/// clamped at the edges.
fn contextualize_windowed(
    params: &TiconParams,
    encoder_id: &str,
    grid: &EmbeddingGrid,
    k: usize,
) -> Result<EmbeddingGrid> {
    let mut out = EmbeddingGrid::zeros(
        &format!("ticon[{encoder_id}]"),
        grid.rows,
        grid.cols,
        params.config.d_model,
    );
    out.origin = grid.origin;
    let k = k.min(grid.rows).min(grid.cols);
    let anchors = |extent: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..extent.saturating_sub(k - 1)).step_by(k).collect();
        if v.last().map(|&a| a + k < extent).unwrap_or(true) {
            v.push(extent - k);
        }
        v
    };
    for &r0 in &anchors(grid.rows) {
        for &c0 in &anchors(grid.cols) {
            let window = grid.crop(r0, c0, k)?;
            if window.valid_count() == 0 {
                continue;
            }
            let ctx = contextualize(params, encoder_id, &window)?;
            for r in 0..k {
                for c in 0..k {
                    if ctx.valid(r, c) {
                        let row: Vec<f64> =
                            ctx.embedding(r, c).iter().map(|&v| f64::from(v)).collect();
                        out.set_embedding(r0 + r, c0 + c, &row);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Build raw, isolated, and contextualized per-tile features for every valid
/// tile of the given slides.
pub fn build_variant_features(
    params: &TiconParams,
    encoder_id: &str,
    slides: &[SyntheticSlide],
    registry: &EncoderRegistry,
    opts: &BenchmarkOptions,
) -> Result<VariantFeatures> {
    if slides.is_empty() {
        return Err(Error::Dataset("no slides to benchmark".into()));
    }
    let spec = registry.get(encoder_id)?;
    let raw_dim = spec.dim;
    let d_model = params.config.d_model;
    let mut out = VariantFeatures {
        raw: Vec::new(),
        raw_dim,
        iso: Vec::new(),
        iso_dim: raw_dim + d_model,
        ctx: Vec::new(),
        ctx_dim: raw_dim + d_model,
        labels: Vec::new(),
        spot: Vec::new(),
        spot_dim: opts.spot_dim,
        slide_of: Vec::new(),
    };

    for (si, slide) in slides.iter().enumerate() {
        let grid = encode_tiles(slide, spec)?;
        let positions = grid.valid_positions();
        if positions.is_empty() {
            continue;
        }
        let ctx_grid = match opts.ctx_window {
            None => contextualize(params, encoder_id, &grid)?,
            Some(k) => contextualize_windowed(params, encoder_id, &grid, k)?,
        };
        let raw_rows = Tensor::from_vec(
            &[positions.len(), raw_dim],
            positions
                .iter()
                .flat_map(|&(r, c)| grid.embedding(r, c).iter().map(|&v| f64::from(v)))
                .collect(),
        )?;
        let iso_rows = contextualize_isolated_batch(params, encoder_id, &raw_rows)?;
        let spot = spot_targets(slide, opts.spot_dim);

        for (i, &(r, c)) in positions.iter().enumerate() {
            let raw_n = l2_normalized(raw_rows.row_slice(i));
            let iso_n = l2_normalized(iso_rows.row_slice(i));
            let ctx_row: Vec<f64> =
                ctx_grid.embedding(r, c).iter().map(|&v| f64::from(v)).collect();
            let ctx_n = l2_normalized(&ctx_row);
            out.raw.extend_from_slice(&raw_n);
            out.iso.extend_from_slice(&raw_n);
            out.iso.extend_from_slice(&iso_n);
            out.ctx.extend_from_slice(&raw_n);
            out.ctx.extend_from_slice(&ctx_n);
            out.labels.push(slide.label(r, c));
            let ti = slide.grid.idx(r, c);
            out.spot
                .extend_from_slice(&spot[ti * opts.spot_dim..(ti + 1) * opts.spot_dim]);
            out.slide_of.push(si);
        }
    }
    Ok(out)
}

/// Assign slides to train/val/test (roughly 2:1:1) with a seeded shuffle.
fn slide_splits(n_slides: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_slides).collect();
    order.shuffle(&mut stream_rng(seed, "bench-slide-split"));
    let n_train = (n_slides / 2).max(1);
    let n_val = (n_slides / 4).max(1);
    let mut splits = vec![Split::Test; n_slides];
    for (rank, &s) in order.iter().enumerate() {
        splits[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Rows for one task, subsampled per split, with remapped labels.
fn assemble(
    feats: &VariantFeatures,
    which: &str,
    task: BenchTask,
    alias_pair: (usize, usize),
    opts: &BenchmarkOptions,
) -> Result<ProbeDataset> {
    let (data, dim) = match which {
        "raw" => (&feats.raw, feats.raw_dim),
        "iso" => (&feats.iso, feats.iso_dim),
        "ctx" => (&feats.ctx, feats.ctx_dim),
        other => return Err(Error::Config(format!("unknown variant {other}"))),
    };
    let n_slides = feats.slide_of.iter().max().map(|m| m + 1).unwrap_or(0);
    let slide_split = slide_splits(n_slides, opts.seed);

    let keep: Vec<usize> = (0..feats.labels.len())
        .filter(|&i| match task {
            BenchTask::TileClass | BenchTask::SpotRegress => true,
            BenchTask::TileAliased => {
                feats.labels[i] == alias_pair.0 || feats.labels[i] == alias_pair.1
            }
            BenchTask::TileNonAliased => {
                feats.labels[i] != alias_pair.0 && feats.labels[i] != alias_pair.1
            }
        })
        .collect();

    // seeded per-split subsample to the row cap; keyed by split only so all
    // three variants probe exactly the same tiles
    let mut rows_by_split: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &keep {
        let s = slide_split[feats.slide_of[i]];
        rows_by_split.entry(s as usize).or_default().push(i);
    }
    let mut selected: Vec<(usize, Split)> = Vec::new();
    for (s, rows) in rows_by_split {
        let split = [Split::Train, Split::Val, Split::Test][s];
        let mut rows = rows;
        rows.shuffle(&mut stream_rng(opts.seed, &format!("bench-cap/{s}")));
        rows.truncate(opts.max_per_split);
        rows.sort_unstable();
        selected.extend(rows.into_iter().map(|i| (i, split)));
    }
    selected.sort_unstable_by_key(|&(i, _)| i);

    let mut features = Vec::with_capacity(selected.len() * dim);
    let mut split = Vec::with_capacity(selected.len());
    for &(i, s) in &selected {
        features.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        split.push(s);
    }
    let labels = match task {
        BenchTask::SpotRegress => Labels::Regress {
            targets: selected
                .iter()
                .flat_map(|&(i, _)| {
                    feats.spot[i * feats.spot_dim..(i + 1) * feats.spot_dim].to_vec()
                })
                .collect(),
            dim: feats.spot_dim,
        },
        BenchTask::TileAliased => Labels::Class(
            selected.iter().map(|&(i, _)| usize::from(feats.labels[i] == alias_pair.1)).collect(),
        ),
        _ => {
            // remap to a dense range for macro-F1 over present classes
            let present: Vec<usize> = {
                let mut v: Vec<usize> =
                    selected.iter().map(|&(i, _)| feats.labels[i]).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            Labels::Class(
                selected
                    .iter()
                    .map(|&(i, _)| present.iter().position(|&c| c == feats.labels[i]).unwrap())
                    .collect(),
            )
        }
    };
    Ok(ProbeDataset { features, dim, labels, split })
}

fn run_probe(ds: &ProbeDataset, task: BenchTask, opts: &BenchmarkOptions) -> Result<EvalReport> {
    match task {
        BenchTask::SpotRegress => pca_ridge(
            ds,
            &RidgeOptions { pca_dims: opts.pca_dims, lambdas: opts.lambdas.clone() },
        ),
        _ => knn_probe(ds, &opts.ks),
    }
}

/// Run the same probe on raw, isolated, and contextualized features of the
/// same tiles; keyed "raw" / "iso" / "ctx".
pub fn context_benchmark(
    params: &TiconParams,
    encoder_id: &str,
    slides: &[SyntheticSlide],
    registry: &EncoderRegistry,
    task: BenchTask,
    opts: &BenchmarkOptions,
) -> Result<BTreeMap<String, EvalReport>> {
    let feats = build_variant_features(params, encoder_id, slides, registry, opts)?;
    let alias_pair = slides[0].config.alias_pair;
    let mut out = BTreeMap::new();
    for which in ["raw", "iso", "ctx"] {
        let ds = assemble(&feats, which, task, alias_pair, opts)?;
        let mut report = run_probe(&ds, task, opts)?;
        report.task = task.name().to_string();
        report.variant = which.to_string();
        report.seed = opts.seed;
        out.insert(which.to_string(), report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderEntry, ModelConfig};
    use crate::synth::{generate_slide, SlideConfig};

    fn setup(n_slides: usize) -> (TiconParams, Vec<SyntheticSlide>, EncoderRegistry) {
        let reg = EncoderRegistry::standard(16, 9);
        let slides: Vec<SyntheticSlide> = (0..n_slides)
            .map(|i| generate_slide(9000 + i as u64, &SlideConfig::default()).unwrap())
            .collect();
        let entries: Vec<EncoderEntry> = reg
            .pretraining_ids()
            .iter()
            .map(|id| EncoderEntry::new(id, reg.dim(id).unwrap()))
            .collect();
        let params = TiconParams::init(&ModelConfig::desk(entries.clone(), entries), 5).unwrap();
        (params, slides, reg)
    }

    #[test]
    fn produces_reports_for_all_variants_and_is_deterministic() {
        let (params, slides, reg) = setup(6);
        let opts = BenchmarkOptions { max_per_split: 150, ..Default::default() };
        let a =
            context_benchmark(&params, "mock48", &slides, &reg, BenchTask::TileAliased, &opts)
                .unwrap();
        assert_eq!(a.len(), 3);
        for variant in ["raw", "iso", "ctx"] {
            assert_eq!(a[variant].metric, "f1-macro");
            assert!((0.0..=1.0).contains(&a[variant].value));
        }
        let b =
            context_benchmark(&params, "mock48", &slides, &reg, BenchTask::TileAliased, &opts)
                .unwrap();
        for v in ["raw", "iso", "ctx"] {
            assert_eq!(a[v].value, b[v].value);
        }
    }

    #[test]
    fn identical_features_give_identical_reports() {
        let (params, slides, reg) = setup(5);
        let opts = BenchmarkOptions { max_per_split: 120, ..Default::default() };
        let mut feats =
            build_variant_features(&params, "mock48", &slides, &reg, &opts).unwrap();
        // feed the raw block as all three variants
        feats.iso = feats.raw.clone();
        feats.iso_dim = feats.raw_dim;
        feats.ctx = feats.raw.clone();
        feats.ctx_dim = feats.raw_dim;
        let pair = slides[0].config.alias_pair;
        let mut values = Vec::new();
        for which in ["raw", "iso", "ctx"] {
            let ds = assemble(&feats, which, BenchTask::TileClass, pair, &opts).unwrap();
            values.push(run_probe(&ds, BenchTask::TileClass, &opts).unwrap().value);
        }
        assert_eq!(values[0], values[1]);
        assert_eq!(values[0], values[2]);
    }

    #[test]
    fn spot_task_reports_pcc() {
        let (params, slides, reg) = setup(5);
        let opts = BenchmarkOptions { max_per_split: 100, ..Default::default() };
        let reports =
            context_benchmark(&params, "mock48", &slides, &reg, BenchTask::SpotRegress, &opts)
                .unwrap();
        for v in ["raw", "iso", "ctx"] {
            assert_eq!(reports[v].metric, "pcc-mean");
            assert!((-1.0..=1.0).contains(&reports[v].value));
        }
    }

    #[test]
    fn windowed_contextualization_runs_on_larger_grids() {
        let (params, slides, reg) = setup(3);
        let opts = BenchmarkOptions {
            max_per_split: 80,
            ctx_window: Some(4),
            ..Default::default()
        };
        let reports =
            context_benchmark(&params, "mock48", &slides, &reg, BenchTask::TileAliased, &opts)
                .unwrap();
        assert_eq!(reports.len(), 3);
    }
}
