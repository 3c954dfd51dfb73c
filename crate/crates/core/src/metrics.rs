//! Evaluation metrics, cross-dataset aggregates and attention-map export
//! rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::AttentionLogits;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::softmax::softmax_rows;
use crate::tape::Tape;

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::Contract(format!(
            "metric needs equal non-empty inputs, got {a} and {b}"
        )));
    }
    Ok(())
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds.len(), targets.len())?;
    let s: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(math::sqrt(s / preds.len() as f64))
}

pub fn accuracy(pred_labels: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(pred_labels.len(), labels.len())?;
    let hits = pred_labels.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry of each length-`n` row (first on ties).
pub fn argmax_rows(values: &[f64], n: usize) -> Vec<usize> {
    values
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Scores of several models (columns) on several datasets (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major `rows × cols`.
    pub values: Vec<f64>,
    pub lower_is_better: bool,
}

impl MetricsTable {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<f64>, lower_is_better: bool) -> Result<Self> {
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Data(
                "metrics table needs at least one row and one column".into(),
            ));
        }
        if values.len() != rows.len() * cols.len() {
            return Err(Error::Data(format!(
                "metrics table has {} cells for {} × {}",
                values.len(),
                rows.len(),
                cols.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "metrics table contains a missing or non-finite cell".into(),
            ));
        }
        Ok(MetricsTable {
            rows,
            cols,
            values,
            lower_is_better,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols.len();
        &self.values[i * m..(i + 1) * m]
    }
}

/// Per model: mean over datasets of `(value − row mean) / row mean`.
pub fn avg_relative_difference(table: &MetricsTable) -> Result<Vec<f64>> {
    let (n, m) = (table.rows.len(), table.cols.len());
    let mut out = vec![0.0; m];
    for i in 0..n {
        let row = table.row(i);
        let mean = row.iter().sum::<f64>() / m as f64;
        if mean == 0.0 {
            return Err(Error::Data(format!("row {} has zero mean", table.rows[i])));
        }
        for (o, v) in out.iter_mut().zip(row) {
            *o += (v - mean) / mean;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Ranks of one row (best = 1); tied entries share the mean of the
/// positions they occupy.
pub fn rank_row(row: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let o = row[a].total_cmp(&row[b]);
        if lower_is_better {
            o
        } else {
            o.reverse()
        }
    });
    let mut ranks = vec![0.0; row.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && row[order[end]] == row[order[start]] {
            end += 1;
        }
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

/// Per model: rank averaged over datasets.
pub fn avg_rank(table: &MetricsTable) -> Vec<f64> {
    let (n, m) = (table.rows.len(), table.cols.len());
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, r) in out.iter_mut().zip(rank_row(table.row(i), table.lower_is_better)) {
            *o += r;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Mean Euclidean distance of each representation to its class centroid.
/// `z` holds one length-`dim` vector per label.
pub fn avg_wcd(z: &[f64], dim: usize, labels: &[usize], n_classes: usize) -> Result<f64> {
    if dim == 0 || z.len() != labels.len() * dim || labels.is_empty() {
        return Err(Error::Contract(format!(
            "{} values for {} labels of dimension {dim}",
            z.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    let mut centroids = vec![0.0; n_classes * dim];
    let mut counts = vec![0usize; n_classes];
    for (v, &l) in z.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (c, x) in centroids[l * dim..(l + 1) * dim].iter_mut().zip(v) {
            *c += x;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {k} has no members")));
    }
    for (k, &count) in counts.iter().enumerate() {
        centroids[k * dim..(k + 1) * dim]
            .iter_mut()
            .for_each(|c| *c /= count as f64);
    }
    let total: f64 = z
        .chunks_exact(dim)
        .zip(labels)
        .map(|(v, &l)| {
            let c = &centroids[l * dim..(l + 1) * dim];
            math::sqrt(v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// One exported attention cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionRecord {
    /// 1-based block index.
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub logit: f64,
    pub probability: f64,
}

/// Flattens the maps of series `sample` into records; probabilities are
/// recomputed from the logits under `valid` (`(B, K, N, N)` flags).
pub fn attention_records(
    tape: &Tape,
    logits: &[AttentionLogits],
    sample: usize,
    valid: Option<&[bool]>,
) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for l in logits {
        let s = tape.shape(l.values);
        let (b, k, n) = (s[0], s[1], s[2]);
        if sample >= b {
            return Err(Error::Contract(format!("sample {sample} outside batch of {b}")));
        }
        let data = tape.data(l.values);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite logits in layer {}", l.layer_index)));
        }
        let span = k * n * n;
        let start = sample * span;
        let probs = softmax_rows(&data[start..start + span], n, valid.map(|v| &v[start..start + span]))?;
        for head in 0..k {
            for row in 0..n {
                for col in 0..n {
                    let i = (head * n + row) * n + col;
                    out.push(AttentionRecord {
                        layer: l.layer_index,
                        head,
                        row,
                        col,
                        logit: data[start + i],
                        probability: probs[i],
                    });
                }
            }
        }
    }
    Ok(out)
}
