//! Frozen-embedding evaluation: linear and multi-label logistic probes.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROBE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 70-15-15 partition of `0..n`; the test split takes the rounding
/// remainder.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.70 * n as f64).round() as usize;
    let n_val = ((0.15 * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!(
            "pearson needs two equal-length series of at least 2 values ({} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("pearson undefined for zero-variance input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

fn width(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows must be non-empty and equal length"));
    }
    Ok(d)
}

/// Least squares with intercept by the normal equations, `ridge` added to
/// the diagonal.
pub fn fit_least_squares(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<LinearFit> {
    let d = width(x)?;
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} rows but {} targets", x.len(), y.len())));
    }
    let a = DMatrix::from_fn(x.len(), d + 1, |i, j| if j == d { 1.0 } else { x[i][j] });
    let b = DVector::from_column_slice(y);
    let mut ata = a.transpose() * &a;
    for i in 0..=d {
        ata[(i, i)] += ridge;
    }
    let atb = a.transpose() * b;
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Numeric("normal equations are singular even with ridge".into()))?;
    let sol = chol.solve(&atb);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok(LinearFit {
        weights: sol.iter().take(d).copied().collect(),
        intercept: sol[d],
    })
}

fn select<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub mse: f64,
    pub pearson_r: f64,
    pub val_mse: Option<f64>,
    pub val_r: Option<f64>,
}

pub const PROBE_HEADER: &str = "task\tmse\tr\tn_train\tn_val\tn_test";

impl ProbeReport {
    pub fn to_tsv_row(&self, task: &str) -> String {
        format!(
            "{task}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.mse, self.pearson_r, self.n_train, self.n_val, self.n_test
        )
    }
}

pub fn write_probe_report<W: Write>(mut w: W, rows: &[(&str, &ProbeReport)]) -> Result<()> {
    writeln!(w, "{PROBE_HEADER}")?;
    for (task, r) in rows {
        writeln!(w, "{}", r.to_tsv_row(task))?;
    }
    Ok(())
}

/// z-scores `y` with the mean and (population) standard deviation of
/// `y[train]`.
pub fn zscore_by(y: &[f64], train: &[usize]) -> Result<Vec<f64>> {
    let n = train.len() as f64;
    let mean = train.iter().map(|&i| y[i]).sum::<f64>() / n;
    let sd = (train.iter().map(|&i| (y[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Numeric("training targets have zero variance".into()));
    }
    Ok(y.iter().map(|v| (v - mean) / sd).collect())
}

/// Closed-form linear probe on a 70-15-15 split: targets z-scored with
/// training statistics, MSE and Pearson r reported on the test split.
pub fn linear_probe(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<ProbeReport> {
    let split = split_indices(x.len(), seed);
    linear_probe_split(x, y, &split)
}

pub fn linear_probe_split(x: &[Vec<f64>], y: &[f64], split: &Split) -> Result<ProbeReport> {
    let d = width(x)?;
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} rows but {} targets", x.len(), y.len())));
    }
    if split.train.len() <= d + 1 {
        return Err(Error::Validation(format!(
            "training split of {} rows is too small for {d} features",
            split.train.len()
        )));
    }
    if split.test.len() < 2 {
        return Err(Error::Validation("test split needs at least 2 rows".into()));
    }
    let yz = zscore_by(y, &split.train)?;
    let fit = fit_least_squares(&select(x, &split.train), &select(&yz, &split.train), PROBE_RIDGE)?;
    let eval = |idx: &[usize]| -> Result<(f64, f64)> {
        let pred: Vec<f64> = idx.iter().map(|&i| fit.predict(&x[i])).collect();
        let truth = select(&yz, idx);
        Ok((mse(&pred, &truth), pearson(&pred, &truth)?))
    };
    let (test_mse, test_r) = eval(&split.test)?;
    let (val_mse, val_r) = if split.val.len() >= 2 {
        match eval(&split.val) {
            Ok((m, r)) => (Some(m), Some(r)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(ProbeReport {
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        mse: test_mse,
        pearson_r: test_r,
        val_mse,
        val_r,
    })
}

/// ROC AUC by rank counting: the fraction of positive/negative pairs
/// ordered correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return Err(Error::Validation("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties (1-based)
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = (0..scores.len()).filter(|&k| labels[k]).map(|k| ranks[k]).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Mean binary cross-entropy, probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn binary_cross_entropy(prob: &[f64], labels: &[bool]) -> f64 {
    let sum: f64 = prob
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / prob.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.1,
            l2: 1e-4,
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 · |w|²`
/// (bias unpenalized), from zero.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Result<LinearFit> {
    let d = width(x)?;
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = sigmoid(z) - if label { 1.0 } else { 0.0 };
            for (g, v) in gw.iter_mut().zip(row) {
                *g += err * v;
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= cfg.lr * (g / n + cfg.l2 * *wj);
        }
        b -= cfg.lr * gb / n;
    }
    Ok(LinearFit { weights: w, intercept: b })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultilabelReport {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub auc: Vec<f64>,
    pub cross_entropy: Vec<f64>,
    pub macro_auc: f64,
    pub macro_cross_entropy: f64,
}

impl MultilabelReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class\troc_auc\tcross_entropy\n");
        for (k, (a, c)) in self.auc.iter().zip(&self.cross_entropy).enumerate() {
            s.push_str(&format!("{k}\t{a:.6}\t{c:.6}\n"));
        }
        s.push_str(&format!("macro\t{:.6}\t{:.6}\n", self.macro_auc, self.macro_cross_entropy));
        s
    }
}

/// One logistic regression per label column on standardized features,
/// evaluated on the test split.
pub fn multilabel_probe(x: &[Vec<f64>], y: &[Vec<bool>], seed: u64, cfg: &LogisticConfig) -> Result<MultilabelReport> {
    let d = width(x)?;
    let k = y.first().map_or(0, Vec::len);
    if x.len() != y.len() || k == 0 || y.iter().any(|r| r.len() != k) {
        return Err(Error::shape("label rows must match feature rows and share a width"));
    }
    let split = split_indices(x.len(), seed);
    let col = |c: usize, idx: &[usize]| -> Vec<bool> { idx.iter().map(|&i| y[i][c]).collect() };
    for c in 0..k {
        for (name, idx) in [("train", &split.train), ("test", &split.test)] {
            let labels = col(c, idx);
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                return Err(Error::Validation(format!("class {c} has a single label value in the {name} split")));
            }
        }
    }
    // standardize with training statistics
    let nt = split.train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &split.train {
        for j in 0..d {
            mean[j] += x[i][j] / nt;
        }
    }
    for &i in &split.train {
        for j in 0..d {
            sd[j] += (x[i][j] - mean[j]).powi(2) / nt;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect())
        .collect();
    let train_x = select(&xs, &split.train);
    let mut auc = Vec::with_capacity(k);
    let mut ce = Vec::with_capacity(k);
    for c in 0..k {
        let fit = fit_logistic(&train_x, &col(c, &split.train), cfg)?;
        let scores: Vec<f64> = split.test.iter().map(|&i| fit.predict(&xs[i])).collect();
        let labels = col(c, &split.test);
        auc.push(roc_auc(&scores, &labels)?);
        let prob: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        ce.push(binary_cross_entropy(&prob, &labels));
    }
    Ok(MultilabelReport {
        n_train: split.train.len(),
        n_val: split.val.len(),
        n_test: split.test.len(),
        macro_auc: auc.iter().sum::<f64>() / k as f64,
        macro_cross_entropy: ce.iter().sum::<f64>() / k as f64,
        auc,
        cross_entropy: ce,
    })
}
