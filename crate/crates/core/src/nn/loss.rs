//! Softmax, cross-entropy and score selection.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `(n, k, 1, 1)` logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    let k = s.item_len();
    if k == 0 {
        return Err(Error::invalid("softmax", "need at least one class"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&z| (z - m).exp()).collect();
        let total: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / total));
    }
    Tensor::from_vec([s.n(), k, 1, 1], out)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().item_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub(crate) struct CrossEntropyCtx<T> {
    logits: Var,
    labels: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits);
        let (n, k) = (s.n(), s.item_len());
        if labels.len() != n || n == 0 {
            return Err(Error::invalid("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(n * k);
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&z| (z - m).exp()).sum();
            let lse = m + sum_exp.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let loss = total / T::from_f64(n as f64);
        let ctx = CrossEntropyCtx { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), &[logits], Op::CrossEntropy(ctx))
    }

    /// `Σ_i x[i, picks[i]]` over the batch, as a scalar.
    pub fn gather_sum(&mut self, x: Var, picks: &[usize]) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        let k = s.item_len();
        if picks.len() != s.n() {
            return Err(Error::invalid("gather_sum", format!("{} picks for batch of {}", picks.len(), s.n())));
        }
        if let Some(&bad) = picks.iter().find(|&&p| p >= k) {
            return Err(Error::invalid("gather_sum", format!("index {bad} out of range for {k} entries")));
        }
        let data = self.value(x).data();
        let total = picks.iter().enumerate().map(|(i, &p)| data[i * k + p]).sum();
        self.push("gather_sum", Tensor::scalar(total), &[x], Op::GatherSum { x, picks: picks.to_vec() })
    }
}

pub(crate) fn cross_entropy_backward<T: Scalar>(tape: &Tape<T>, ctx: &CrossEntropyCtx<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let k = tape.shape(ctx.logits).item_len();
    let scale = g[0] / T::from_f64(ctx.labels.len() as f64);
    let mut gl: Vec<T> = ctx.probs.iter().map(|&p| p * scale).collect();
    for (i, &label) in ctx.labels.iter().enumerate() {
        gl[i * k + label] -= scale;
    }
    vec![(ctx.logits, gl)]
}

pub(crate) fn gather_sum_backward<T: Scalar>(tape: &Tape<T>, x: Var, picks: &[usize], g: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(x);
    let k = s.item_len();
    let mut gx = vec![T::zero(); s.numel()];
    for (i, &p) in picks.iter().enumerate() {
        gx[i * k + p] = g[0];
    }
    vec![(x, gx)]
}
