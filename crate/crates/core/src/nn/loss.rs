use super::tensor::Float;
use crate::error::{Error, Result};

/// Weighted mean-squared error `(1/N) Σ wᵢ (predᵢ − targetᵢ)²` and its gradient
/// with respect to `pred`.
pub fn mse<T: Float>(pred: &[T], target: &[T], weights: &[T]) -> Result<(T, Vec<T>)> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("mse over an empty batch".into()));
    }
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "mse lengths pred {} target {} weights {}",
            pred.len(),
            target.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < T::zero()) {
        return Err(Error::InvalidInput("mse weights must be nonnegative".into()));
    }
    let n = T::of_f64(pred.len() as f64);
    let two = T::of_f64(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let e = p - y;
            loss += w * e * e;
            two * w * e / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−α_c · log softmax(logits)[c]` and its gradient with respect to the logits.
pub fn weighted_cross_entropy<T: Float>(logits: &[T], label: usize, class_weights: &[T]) -> Result<(T, Vec<T>)> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("cross-entropy over empty logits".into()));
    }
    if label >= logits.len() || class_weights.len() != logits.len() {
        return Err(Error::Dimension(format!(
            "label {label} / {} class weights for {} logits",
            class_weights.len(),
            logits.len()
        )));
    }
    if class_weights.iter().any(|&w| w < T::zero()) {
        return Err(Error::InvalidInput("class weights must be nonnegative".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    let alpha = class_weights[label];
    let loss = alpha * (lse - logits[label]);
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    grad.iter_mut().for_each(|g| *g *= alpha);
    Ok((loss, grad))
}
