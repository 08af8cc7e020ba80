//! PCA + per-target ridge regression with validation-selected lambda.
//!
//! PCA uses a cyclic Jacobi eigendecomposition of the train covariance; ridge
//! solves its normal equations by Cholesky. Both are small dense problems at
//! desk scale (dimensions of a few hundred).

use super::metrics::pcc;
use super::{EvalReport, Labels, ProbeDataset, Split};
use crate::error::{Error, Result};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
/// Returns (eigenvalues, eigenvectors as columns), descending eigenvalue order.
pub(crate) fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off <= 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap().then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigenvectors = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        // sign convention: largest-magnitude component positive
        let mut lead = 0.0f64;
        for k in 0..n {
            if v[k * n + i].abs() > lead.abs() {
                lead = v[k * n + i];
            }
        }
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            eigenvectors[k * n + col] = sign * v[k * n + i];
        }
    }
    (eigenvalues, eigenvectors)
}

/// Cholesky solve of the SPD system `a x = b` (row-major n x n).
pub(crate) fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical("cholesky: matrix not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

pub struct RidgeOptions {
    pub pca_dims: usize,
    pub lambdas: Vec<f64>,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions { pca_dims: 256, lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] }
    }
}

struct Pca {
    mean: Vec<f64>,
    /// d x k projection columns.
    basis: Vec<f64>,
    d: usize,
    k: usize,
}

impl Pca {
    fn fit(ds: &ProbeDataset, train: &[usize], k: usize) -> Self {
        let d = ds.dim;
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            for (m, x) in mean.iter_mut().zip(ds.feature(i)) {
                *m += x / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for &i in train {
            let row = ds.feature(i);
            for a in 0..d {
                let xa = row[a] - mean[a];
                for b in a..d {
                    cov[a * d + b] += xa * (row[b] - mean[b]);
                }
            }
        }
        let denom = (train.len().max(2) - 1) as f64;
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] /= denom;
                cov[b * d + a] = cov[a * d + b];
            }
        }
        let (_, vecs) = jacobi_eigen(&cov, d);
        let mut basis = vec![0.0; d * k];
        for r in 0..d {
            basis[r * k..(r + 1) * k].copy_from_slice(&vecs[r * d..r * d + k]);
        }
        Pca { mean, basis, d, k }
    }

    fn project(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for r in 0..self.d {
            let x = row[r] - self.mean[r];
            if x == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(&self.basis[r * self.k..(r + 1) * self.k]) {
                *o += x * b;
            }
        }
        out
    }
}

fn ridge_fit(z: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    // feature matrix with intercept column appended
    let k = z[0].len() + 1;
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in z.iter().zip(y) {
        let with1 = |i: usize| if i + 1 == k { 1.0 } else { row[i] };
        for a in 0..k {
            for b in 0..k {
                xtx[a * k + b] += with1(a) * with1(b);
            }
            xty[a] += with1(a) * yi;
        }
    }
    for a in 0..k - 1 {
        // the intercept is not penalized
        xtx[a * k + a] += lambda;
    }
    xtx[(k - 1) * k + (k - 1)] += 1e-12;
    cholesky_solve(&xtx, &xty, k)
}

fn ridge_predict(w: &[f64], row: &[f64]) -> f64 {
    let k = w.len();
    w[k - 1] + row.iter().zip(&w[..k - 1]).map(|(x, wi)| x * wi).sum::<f64>()
}

/// Fit PCA on the train split, ridge per regression target with lambda chosen
/// by validation mean PCC, and report the test PCC averaged over targets.
pub fn pca_ridge(ds: &ProbeDataset, opts: &RidgeOptions) -> Result<EvalReport> {
    ds.validate()?;
    let (targets, tdim) = match &ds.labels {
        Labels::Regress { targets, dim } => (targets.as_slice(), *dim),
        Labels::Class(_) => return Err(Error::Dataset("pca_ridge expects regression targets".into())),
    };
    if opts.lambdas.is_empty() {
        return Err(Error::Config("no lambdas to sweep".into()));
    }
    let train = ds.rows_in(Split::Train);
    let val = ds.rows_in(Split::Val);
    let test = ds.rows_in(Split::Test);
    let k = opts.pca_dims.min(ds.dim).min(train.len());
    if k == 0 {
        return Err(Error::Config("pca_dims must be >= 1".into()));
    }

    // constant test targets make PCC undefined
    for t in 0..tdim {
        let first = targets[test[0] * tdim + t];
        if test.iter().all(|&i| targets[i * tdim + t] == first) {
            return Err(Error::Metric(format!("constant test target {t}")));
        }
    }

    let pca = Pca::fit(ds, &train, k);
    let z_train: Vec<Vec<f64>> = train.iter().map(|&i| pca.project(ds.feature(i))).collect();
    let z_val: Vec<Vec<f64>> = val.iter().map(|&i| pca.project(ds.feature(i))).collect();
    let z_test: Vec<Vec<f64>> = test.iter().map(|&i| pca.project(ds.feature(i))).collect();

    let mut best: Option<(f64, f64)> = None; // (val mean pcc, lambda)
    for &lambda in &opts.lambdas {
        let mut val_sum = 0.0;
        let mut val_cnt = 0usize;
        for t in 0..tdim {
            let y_train: Vec<f64> = train.iter().map(|&i| targets[i * tdim + t]).collect();
            let w = ridge_fit(&z_train, &y_train, lambda)?;
            let preds: Vec<f64> = z_val.iter().map(|z| ridge_predict(&w, z)).collect();
            let truth: Vec<f64> = val.iter().map(|&i| targets[i * tdim + t]).collect();
            if let Ok(r) = pcc(&preds, &truth) {
                val_sum += r;
                val_cnt += 1;
            }
        }
        let mean = if val_cnt == 0 { f64::NEG_INFINITY } else { val_sum / val_cnt as f64 };
        let better = match best {
            None => true,
            Some((bv, bl)) => mean > bv || (mean == bv && lambda < bl),
        };
        if better {
            best = Some((mean, lambda));
        }
    }
    let (_, lambda) = best.unwrap();

    let mut test_sum = 0.0;
    for t in 0..tdim {
        let y_train: Vec<f64> = train.iter().map(|&i| targets[i * tdim + t]).collect();
        let w = ridge_fit(&z_train, &y_train, lambda)?;
        let preds: Vec<f64> = z_test.iter().map(|z| ridge_predict(&w, z)).collect();
        let truth: Vec<f64> = test.iter().map(|&i| targets[i * tdim + t]).collect();
        // prediction may be constant (huge lambda): count as zero correlation
        test_sum += pcc(&preds, &truth).unwrap_or(0.0);
    }
    let mut report =
        EvalReport::new("pca-ridge", "raw", "pcc-mean", test_sum / tdim as f64);
    report.param = Some(lambda);
    Ok(report)
}
