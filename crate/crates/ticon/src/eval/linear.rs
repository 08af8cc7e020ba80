//! Linear probing: L2-regularized multinomial logistic regression with
//! class-balanced weighting, trained full-batch on the tensor engine.

use super::metrics::{auc_binary, balanced_accuracy};
use super::{EvalReport, ProbeDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{adamw_step, OptState, Tape, Tensor};

const PROBE_ITERS: u64 = 300;
const PROBE_LR: f64 = 0.05;

/// Inverse class frequency normalized to mean one over classes.
fn class_weights(labels: &[usize], rows: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &i in rows {
        counts[labels[i]] += 1;
    }
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { rows.len() as f64 / c as f64 })
        .collect();
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mean = w.iter().sum::<f64>() / present;
    w.iter_mut().for_each(|v| *v /= mean);
    w
}

struct FittedProbe {
    w: Tensor,
    b: Tensor,
}

impl FittedProbe {
    fn logits(&self, x: &[f64], dim: usize) -> Vec<f64> {
        let k = self.b.numel();
        (0..k)
            .map(|j| {
                self.b.data[j] + (0..dim).map(|i| x[i] * self.w.data[i * k + j]).sum::<f64>()
            })
            .collect()
    }

    fn predict(&self, x: &[f64], dim: usize) -> usize {
        let logits = self.logits(x, dim);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0
    }
}

fn fit(
    ds: &ProbeDataset,
    train: &[usize],
    num_classes: usize,
    cost: f64,
) -> Result<FittedProbe> {
    let labels = ds.class_labels()?;
    let dim = ds.dim;
    let n = train.len();
    let cw = class_weights(labels, train, num_classes);
    let row_weights: Vec<f64> = train.iter().map(|&i| cw[labels[i]]).collect();
    let row_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let x = Tensor::from_vec(
        &[n, dim],
        train.iter().flat_map(|&i| ds.feature(i).to_vec()).collect(),
    )?;
    // liblinear-style objective: mean weighted CE + ||w||^2 / (2 c n)
    let reg = 1.0 / (cost * n as f64);

    let mut w = Tensor::zeros(&[dim, num_classes]);
    let mut b = Tensor::zeros(&[num_classes]);
    let mut opt = OptState::new();
    for _ in 0..PROBE_ITERS {
        let mut tape = Tape::new();
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, wv)?;
        let logits = tape.add_bias(logits, bv)?;
        let ce = tape.cross_entropy(logits, &row_labels, &row_weights)?;
        let w2 = tape.mul(wv, wv)?;
        let rowsum = tape.row_sum(w2)?;
        let all: Vec<usize> = (0..dim).collect();
        let mean = tape.mean_rows(rowsum, &all)?;
        let penalty = tape.affine(mean, 0.5 * reg * dim as f64, 0.0)?;
        let loss = tape.add(ce, penalty)?;
        tape.backward(loss)?;
        let grads = vec![
            tape.grad(wv).map(<[f64]>::to_vec),
            tape.grad(bv).map(<[f64]>::to_vec),
        ];
        let mut params = [w, b];
        adamw_step(&mut params, &grads, &mut opt, PROBE_LR, (0.9, 0.999), 0.0)?;
        [w, b] = params;
    }
    Ok(FittedProbe { w, b })
}

/// Linear probe with balanced loss. The cost (inverse regularization) is
/// selected on validation balanced accuracy when a sweep is given; reports
/// test balanced accuracy, plus AUC for binary tasks.
pub fn linear_probe(ds: &ProbeDataset, costs: &[f64]) -> Result<Vec<EvalReport>> {
    ds.validate()?;
    if costs.is_empty() || costs.iter().any(|&c| c <= 0.0) {
        return Err(Error::Config("costs must be positive".into()));
    }
    let labels = ds.class_labels()?;
    let num_classes = labels.iter().max().unwrap() + 1;
    let train = ds.rows_in(Split::Train);
    let val = ds.rows_in(Split::Val);
    let test = ds.rows_in(Split::Test);

    let mut best: Option<(f64, f64, FittedProbe)> = None;
    for &cost in costs {
        let probe = fit(ds, &train, num_classes, cost)?;
        let preds: Vec<usize> = val.iter().map(|&i| probe.predict(ds.feature(i), ds.dim)).collect();
        let truth: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
        let acc = balanced_accuracy(&preds, &truth);
        let better = match &best {
            None => true,
            Some((ba, bc, _)) => acc > *ba || (acc == *ba && cost < *bc),
        };
        if better {
            best = Some((acc, cost, probe));
        }
    }
    let (_, cost, probe) = best.unwrap();

    let preds: Vec<usize> = test.iter().map(|&i| probe.predict(ds.feature(i), ds.dim)).collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let mut out = Vec::new();
    let mut acc = EvalReport::new("linear-probe", "raw", "balanced-accuracy", balanced_accuracy(&preds, &truth));
    acc.param = Some(cost);
    out.push(acc);

    let distinct: std::collections::BTreeSet<usize> = labels.iter().cloned().collect();
    if distinct.len() == 2 && num_classes == 2 {
        let scores: Vec<f64> = test
            .iter()
            .map(|&i| {
                let l = probe.logits(ds.feature(i), ds.dim);
                l[1] - l[0]
            })
            .collect();
        let mut auc = EvalReport::new("linear-probe", "raw", "auc", auc_binary(&scores, &truth)?);
        auc.param = Some(cost);
        out.push(auc);
    }
    Ok(out)
}
