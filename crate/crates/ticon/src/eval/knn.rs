//! Cosine-distance k-NN probe with validation-selected k.

use super::metrics::macro_f1;
use super::{EvalReport, ProbeDataset, Split};
use crate::error::{Error, Result};

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Sorted (distance, train-row) neighbor lists for every query row.
fn neighbor_lists(ds: &ProbeDataset, queries: &[usize], train: &[usize]) -> Vec<Vec<(f64, usize)>> {
    queries
        .iter()
        .map(|&q| {
            let mut dists: Vec<(f64, usize)> = train
                .iter()
                .map(|&t| (cosine_distance(ds.feature(q), ds.feature(t)), t))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dists
        })
        .collect()
}

/// Majority vote among the k nearest; ties break by smaller mean distance,
/// then smaller class index.
fn vote(neighbors: &[(f64, usize)], labels: &[usize], k: usize) -> usize {
    let top = &neighbors[..k.min(neighbors.len())];
    let mut tally: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
    for &(d, t) in top {
        let e = tally.entry(labels[t]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    // ascending class order: on full ties the smallest class is kept
    let mut best: Option<(usize, usize, f64)> = None;
    for (&class, &(count, dsum)) in &tally {
        let mean = dsum / count as f64;
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mean < bm),
        };
        if better {
            best = Some((class, count, mean));
        }
    }
    best.unwrap().0
}

/// k-NN with cosine distance: k selected by validation macro-F1 (ties to the
/// smaller k), test macro-F1 reported.
pub fn knn_probe(ds: &ProbeDataset, ks: &[usize]) -> Result<EvalReport> {
    ds.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be non-empty positive".into()));
    }
    let labels = ds.class_labels()?.to_vec();
    let train = ds.rows_in(Split::Train);
    let val = ds.rows_in(Split::Val);
    let test = ds.rows_in(Split::Test);

    let val_neighbors = neighbor_lists(ds, &val, &train);
    let mut best: Option<(f64, usize)> = None;
    for &k in ks {
        let preds: Vec<usize> = val_neighbors.iter().map(|nb| vote(nb, &labels, k)).collect();
        let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
        let f1 = macro_f1(&preds, &truth);
        let better = match best {
            None => true,
            Some((bf, bk)) => f1 > bf || (f1 == bf && k < bk),
        };
        if better {
            best = Some((f1, k));
        }
    }
    let (_, k) = best.unwrap();

    let test_neighbors = neighbor_lists(ds, &test, &train);
    let preds: Vec<usize> = test_neighbors.iter().map(|nb| vote(nb, &labels, k)).collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let mut report = EvalReport::new("knn", "raw", "f1-macro", macro_f1(&preds, &truth));
    report.param = Some(k as f64);
    Ok(report)
}
