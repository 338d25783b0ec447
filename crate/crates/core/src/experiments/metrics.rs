use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{ExperimentError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1_macro: f64,
    /// Per-class F1; `None` for classes absent from both gold and predictions.
    pub per_class: Vec<Option<f64>>,
}

impl F1Report {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_labels(seqs: [&[usize]; 2], num_classes: usize) -> Result<()> {
    if seqs[0].len() != seqs[1].len() {
        return Err(ExperimentError::Contract(format!(
            "label sequences differ in length: {} vs {}",
            seqs[0].len(),
            seqs[1].len()
        )));
    }
    if let Some(&bad) = seqs
        .iter()
        .flat_map(|s| s.iter())
        .find(|&&l| l >= num_classes)
    {
        return Err(ExperimentError::Contract(format!(
            "label {bad} outside scheme of {num_classes}"
        )));
    }
    Ok(())
}

/// Unweighted mean of per-class F1. Classes that occur in neither sequence
/// are left out of the mean.
pub fn f1_macro(predictions: &[usize], gold: &[usize], num_classes: usize) -> Result<F1Report> {
    if gold.is_empty() {
        return Err(ExperimentError::Contract(
            "F1 of an empty prediction set".into(),
        ));
    }
    check_labels([predictions, gold], num_classes)?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| 2.0 * tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let skipped = num_classes - present.len();
    if skipped > 0 {
        log::warn!("{skipped} class(es) absent from gold and predictions; excluded from macro F1");
    }
    Ok(F1Report {
        f1_macro: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub stdev: f64,
    pub n: usize,
    pub single_seed: bool,
}

pub fn aggregate_seeds(scores: &[f64]) -> Result<SeedAggregate> {
    if scores.is_empty() {
        return Err(ExperimentError::Contract("no runs to aggregate".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let stdev = if n > 1 {
        (sorted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        log::warn!("single seed: standard deviation reported as 0");
        0.0
    };
    Ok(SeedAggregate {
        mean,
        stdev,
        n,
        single_seed: n == 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhapkarResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub n: usize,
    /// Paired table: rows are the first model's labels, columns the second's.
    pub table: Vec<Vec<usize>>,
}

impl BhapkarResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting. `None`
/// when a pivot vanishes relative to the matrix scale.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Marginal homogeneity of two prediction sequences over the same items.
/// Classes used by neither sequence are dropped before the test.
pub fn bhapkar_test(
    pred_a: &[usize],
    pred_b: &[usize],
    num_classes: usize,
) -> Result<BhapkarResult> {
    check_labels([pred_a, pred_b], num_classes)?;
    let n = pred_a.len();
    let mut table = vec![vec![0usize; num_classes]; num_classes];
    for (&a, &b) in pred_a.iter().zip(pred_b) {
        table[a][b] += 1;
    }
    let row = |i: usize| table[i].iter().sum::<usize>();
    let col = |i: usize| table.iter().map(|r| r[i]).sum::<usize>();
    let present: Vec<usize> = (0..num_classes).filter(|&i| row(i) + col(i) > 0).collect();
    let k = present.len();
    let trivial = BhapkarResult {
        statistic: 0.0,
        df: k.saturating_sub(1),
        p_value: 1.0,
        n,
        table: table.clone(),
    };
    if k < 2 {
        return Ok(trivial);
    }
    let idx = &present[..k - 1];
    let d: Vec<f64> = idx.iter().map(|&i| row(i) as f64 - col(i) as f64).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(trivial);
    }
    let nf = n as f64;
    let v: Vec<Vec<f64>> = idx
        .iter()
        .enumerate()
        .map(|(a, &i)| {
            idx.iter()
                .enumerate()
                .map(|(b, &j)| {
                    if i == j {
                        (row(i) + col(i) - 2 * table[i][i]) as f64 - d[a] * d[a] / nf
                    } else {
                        -((table[i][j] + table[j][i]) as f64) - d[a] * d[b] / nf
                    }
                })
                .collect()
        })
        .collect();
    let x = solve(v, d.clone()).ok_or_else(|| ExperimentError::Singular {
        table: table.clone(),
    })?;
    let statistic = d.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    let df = k - 1;
    let chi = ChiSquared::new(df as f64).map_err(|e| ExperimentError::Contract(e.to_string()))?;
    let p_value = chi.sf(statistic).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(BhapkarResult {
        statistic,
        df,
        p_value,
        n,
        table,
    })
}
