//! Dense tensors, reverse-mode differentiation and numerical verification.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, Coordinates, GradCheckReport};
pub use ops::{
    argmax, cosine, dot, entropy, l2_norm, l2_normalize, log_softmax_temp, softmax_temp,
};
pub use rng::Rng;
pub use tape::{Gradients, Groups, Tape, Var};
pub use tensor::Tensor;

/// Tensor of i.i.d. standard normal draws.
pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// Tensor of i.i.d. uniform draws in `[-bound, bound)`.
pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
    )
}

#[cfg(test)]
mod primitive_grad_tests {
    //! Every tape primitive against central differences.
    use super::*;
    use std::sync::Arc;

    /// Checks `build` (leaves -> node) reduced by a random linear functional.
    fn check<F>(inputs: Vec<Tensor>, seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = Rng::new(seed);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            randn(tape.value(out).shape(), &mut rng)
        };
        let eval = |params: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let s = tape.dot_const(out, probe.clone());
            (tape, vars, s)
        };
        let (tape, vars, s) = eval(&inputs);
        let mut grads = tape.backward(s);
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(&inputs)
            .map(|(v, t)| grads.take_or_zeros(*v, t))
            .collect();
        let f = |p: &[Tensor]| {
            let (tape, _, s) = eval(p);
            Ok(tape.value(s).data()[0])
        };
        let r = grad_check(f, &inputs, &analytic, 1e-6, Coordinates::All).unwrap();
        assert!(
            r.max_rel_error < 1e-6,
            "rel error {} at {:?}",
            r.max_rel_error,
            r.worst
        );
    }

    fn rn(shape: &[usize], seed: u64) -> Tensor {
        randn(shape, &mut Rng::new(seed))
    }

    #[test]
    fn matmul() {
        check(vec![rn(&[4, 3], 1), rn(&[3, 5], 2)], 3, |t, v| {
            t.matmul(v[0], v[1])
        });
    }

    #[test]
    fn add_and_add_row_and_scale() {
        check(
            vec![rn(&[4, 3], 1), rn(&[4, 3], 2), rn(&[3], 3)],
            4,
            |t, v| {
                let a = t.add(v[0], v[1]);
                let b = t.add_row(a, v[2]);
                t.scale(b, -1.7)
            },
        );
    }

    #[test]
    fn shift_and_gelu() {
        let off = rn(&[3, 4], 9);
        check(vec![rn(&[3, 4], 1)], 2, move |t, v| {
            let s = t.shift(v[0], &off);
            t.gelu(s)
        });
    }

    #[test]
    fn layer_norm() {
        check(vec![rn(&[5, 6], 1), rn(&[6], 2), rn(&[6], 3)], 4, |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        });
    }

    #[test]
    fn grouped_attention() {
        let groups: Groups = Arc::new(vec![vec![0, 2, 4], vec![1, 3], vec![5]]);
        check(
            vec![rn(&[6, 4], 1), rn(&[6, 4], 2), rn(&[6, 4], 3)],
            4,
            move |t, v| t.grouped_attention(v[0], v[1], v[2], 2, groups.clone()),
        );
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::new();
        let q = tape.leaf(rn(&[5, 4], 1));
        let k = tape.leaf(rn(&[5, 4], 2));
        let v = tape.leaf(rn(&[5, 4], 3));
        let a = tape.grouped_attention(q, k, v, 2, Arc::new(vec![vec![0, 1, 2, 3, 4]]));
        for p in tape.attention_probs(a).unwrap() {
            for row in p.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_and_group_mean() {
        let index = Arc::new(vec![(0, 1), (1, 0), (0, 1), (1, 2), (0, 0)]);
        let groups: Groups = Arc::new(vec![vec![0, 1], vec![2, 3, 4]]);
        check(vec![rn(&[2, 3], 1), rn(&[3, 3], 2)], 3, move |t, v| {
            let g = t.gather_rows(&[v[0], v[1]], index.clone());
            t.group_mean(g, groups.clone())
        });
    }

    #[test]
    fn normalize_softmax_log_softmax() {
        check(vec![rn(&[3, 5], 1)], 2, |t, v| t.normalize_rows(v[0]));
        check(vec![rn(&[3, 5], 3)], 4, |t, v| t.softmax_rows(v[0], 0.7));
        check(vec![rn(&[3, 5], 5)], 6, |t, v| {
            t.log_softmax_rows(v[0], 1.3)
        });
    }

    #[test]
    fn log_and_mean_rows() {
        check(vec![rn(&[4, 3], 1)], 2, |t, v| {
            let p = t.softmax_rows(v[0], 1.0);
            let m = t.mean_rows(p);
            t.log(m)
        });
    }

    #[test]
    fn backward_skips_constant_paths() {
        let mut tape = Tape::new();
        let a = tape.leaf(rn(&[2, 2], 1));
        let b = tape.leaf(rn(&[2, 2], 2));
        let s = tape.dot_const(a, Tensor::filled(&[2, 2], 1.0));
        let grads = tape.backward(s);
        assert!(grads.get(b).is_none());
        assert!(tape.depends_on(s, a));
        assert!(!tape.depends_on(s, b));
    }
}
