//! Label probabilities: per-proposal logits are max-pooled across proposals
//! into image-level scores, turned into a distribution over categories, and
//! trained with a multi-label cross entropy. The same logits give the
//! per-proposal probability matrix used by the fusion step.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::synthdata::LabelVector;

/// Column-wise maxima of the `N x c` logit matrix and the rows that attain them.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    pub m: Vec<f64>,
    pub argmax_rows: Vec<usize>,
}

/// Ties go to the smallest row index.
pub fn cross_hypothesis_maxpool(logits: &Matrix) -> Result<PooledScores> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::Invalid("empty logit matrix".into()));
    }
    let mut m = logits.row(0).to_vec();
    let mut argmax_rows = vec![0; logits.cols()];
    for i in 1..logits.rows() {
        for (j, &v) in logits.row(i).iter().enumerate() {
            if v > m[j] {
                m[j] = v;
                argmax_rows[j] = i;
            }
        }
    }
    Ok(PooledScores { m, argmax_rows })
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Image-level category distribution `p`.
pub fn image_probability(pooled: &PooledScores) -> Vec<f64> {
    softmax(&pooled.m)
}

/// Cross entropy against the uniform distribution over the relevant labels,
/// and its gradient with respect to the pooled scores `m`.
pub fn classification_loss(p: &[f64], labels: &LabelVector) -> Result<(f64, Vec<f64>)> {
    if p.len() != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} probabilities for {} labels", p.len(), labels.len()),
        ));
    }
    let positives = labels.count();
    if positives == 0 {
        return Err(Error::Invalid("classification loss needs at least one relevant label".into()));
    }
    let share = 1.0 / positives as f64;
    let mut loss = 0.0;
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            if labels.has(j) {
                loss -= share * pj.ln();
                pj - share
            } else {
                pj
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Routes the gradient on pooled scores back to the winning logits.
pub fn maxpool_backward(pooled: &PooledScores, grad_m: &[f64], rows: usize) -> Matrix {
    let c = pooled.m.len();
    let mut d = Matrix::zeros(rows, c);
    for (j, (&g, &i)) in grad_m.iter().zip(&pooled.argmax_rows).enumerate() {
        d.set(i, j, d.get(i, j) + g);
    }
    d
}

/// Row-wise softmax, the `N x c` matrix `P`.
pub fn proposal_probabilities(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    out
}

/// Pulls a gradient on `P` back through the row softmax:
/// `dM[i][j] = P[i][j] * (dP[i][j] - sum_k dP[i][k] P[i][k])`.
pub fn proposal_probabilities_backward(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = dprobs.row(i);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (o, (&pj, &dpj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(dp)) {
            *o = pj * (dpj - dot);
        }
    }
    out
}
