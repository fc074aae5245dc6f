use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{invalid, LssError, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Which coordinates to perturb. `All` is exhaustive; `Sample` picks up to
/// `per_tensor` coordinates of each tensor with a seeded generator.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    Sample { per_tensor: usize, seed: u64 },
}

/// Central-difference check of `analytic` against `f` at `params`.
///
/// Each coordinate is perturbed by `+-eps`; the error per coordinate is
/// `|a - c| / max(1, |a|, |c|)` with `c = (f(p+eps) - f(p-eps)) / (2 eps)`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    coords: Coordinates,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]"));
    }
    if params.len() != analytic.len() {
        return invalid("gradient list does not match parameter list");
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return invalid(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                a.shape(),
                p.shape()
            ));
        }
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(Rng::new(seed)),
        Coordinates::All => None,
    };
    for t in 0..work.len() {
        let n = work[t].len();
        let indices: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_tensor, .. }, Some(r)) if per_tensor < n => {
                let mut all: Vec<usize> = (0..n).collect();
                r.shuffle(&mut all);
                all.truncate(per_tensor);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(LssError::NumericalFailure(format!(
                    "non-finite function value while perturbing tensor {t}, coordinate {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (t, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::softmax_temp;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::vector(vec![3.0])];
        let g = vec![Tensor::vector(vec![6.0])];
        let r = grad_check(
            |p| Ok(p[0].data()[0].powi(2)),
            &p,
            &g,
            1e-4,
            Coordinates::All,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn softmax_weighted_sum() {
        let mut rng = Rng::new(5);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        // d/dx sum_k softmax(x)_k c_k = s * (c - s.c)
        let s = softmax_temp(&x, 1.0).unwrap();
        let sc: f64 = s.iter().zip(&c).map(|(a, b)| a * b).sum();
        let grad: Vec<f64> = s.iter().zip(&c).map(|(si, ci)| si * (ci - sc)).collect();
        let f = |p: &[Tensor]| {
            let s = softmax_temp(p[0].data(), 1.0)?;
            Ok(s.iter().zip(&c).map(|(a, b)| a * b).sum())
        };
        let r = grad_check(
            f,
            &[Tensor::vector(x)],
            &[Tensor::vector(grad)],
            1e-5,
            Coordinates::All,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn rejects_out_of_range_step_and_nan() {
        let p = vec![Tensor::vector(vec![1.0])];
        assert!(grad_check(|_| Ok(0.0), &p, &p, 1e-2, Coordinates::All).is_err());
        let e = grad_check(|_| Ok(f64::NAN), &p, &p, 1e-5, Coordinates::All).unwrap_err();
        assert!(matches!(e, LssError::NumericalFailure(_)));
    }
}
