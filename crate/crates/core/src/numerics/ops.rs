//! Plain-vector primitives shared by the losses and the concept spaces.

use crate::error::{invalid, LssError, Result};

/// Probabilities are floored here before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Temperature softmax `exp(v/lambda) / sum exp(v/lambda)`, max-subtracted.
pub fn softmax_temp(v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_softmax_args(v, lambda)?;
    let mut out = vec![0.0; v.len()];
    softmax_into(v, lambda, &mut out);
    Ok(out)
}

/// Log of [`softmax_temp`], computed through log-sum-exp.
pub fn log_softmax_temp(v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_softmax_args(v, lambda)?;
    let mut out = vec![0.0; v.len()];
    log_softmax_into(v, lambda, &mut out);
    Ok(out)
}

fn check_softmax_args(v: &[f64], lambda: f64) -> Result<()> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!(
            "softmax temperature must be positive, got {lambda}"
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("softmax input contains non-finite values");
    }
    Ok(())
}

pub(crate) fn softmax_into(v: &[f64], lambda: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = ((x - max) / lambda).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_into(v: &[f64], lambda: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v
        .iter()
        .map(|x| ((x - max) / lambda).exp())
        .sum::<f64>()
        .ln();
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - max) / lambda - lse;
    }
}

/// `v / ||v||_2`. A zero vector is an error, never a silent zero.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(LssError::NumericalFailure("non-finite vector norm".into()));
    }
    if norm == 0.0 {
        return Err(LssError::DegenerateInput(
            "cannot normalize a zero vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero vectors are rejected.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LssError::DegenerateInput("cosine of a zero vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Shannon entropy in nats, with the same log floor as the losses.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * x.max(PROB_FLOOR).ln()).sum::<f64>()
}

pub fn argmax(v: &[f64]) -> usize {
    // first index wins ties
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
