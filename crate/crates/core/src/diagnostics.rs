//! Finite-difference verification of the full training loss with respect to
//! every student parameter, over randomly drawn model and space shapes.

use crate::concept_space::{
    build_category_space, build_description_space, EmbeddingSet, SourceTag,
};
use crate::encoder::{init_encoder, Clip, EncoderConfig};
use crate::error::Result;
use crate::numerics::{grad_check, randn, Coordinates, Rng, Tensor};
use crate::objectives::{MovingAverageState, ObjectiveConfig};
use crate::trainer::{student_loss, teacher_scores, ConceptSpaces};

/// One random configuration and its worst gradient error.
#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub batch: usize,
    pub params: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// name of the tensor holding the worst coordinate
    pub worst: String,
}

fn random_unit_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn random_ma(n: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Checks the gradient of the full objective for one random draw. The
/// teacher is a perturbed copy of the student and the moving averages are
/// non-uniform so that no term sits at a stationary point.
pub fn loss_gradcheck_case(
    seed: u64,
    obj: &ObjectiveConfig,
    per_tensor: usize,
) -> Result<GradCheckCase> {
    let mut rng = Rng::derived(seed, &[20]);
    let heads = 1 + rng.below(2);
    let d_embed = heads * [4, 8, 16][rng.below(3)];
    let enc = EncoderConfig {
        frames: 2 + rng.below(2),
        tokens: 1 + rng.below(3),
        d_in: 3 + rng.below(3),
        d_embed,
        d_out: 3 + rng.below(4),
        blocks: 1 + rng.below(2),
        heads,
        mlp_hidden: 4 + rng.below(5),
    };
    let classes = 2 + rng.below(15);
    let batch = 1 + rng.below(3);

    let labels: Vec<String> = (0..classes).map(|k| format!("c{k}")).collect();
    let cat = EmbeddingSet::from_rows(
        labels.clone(),
        &random_unit_rows(classes, enc.d_out, &mut rng),
        SourceTag::Synthetic,
    )?;
    let groups: Vec<(String, Vec<Vec<f64>>)> = labels
        .iter()
        .map(|l| (l.clone(), random_unit_rows(2, enc.d_out, &mut rng)))
        .collect();
    let spaces = ConceptSpaces {
        category: build_category_space(&cat)?,
        description: Some(build_description_space(&groups, Default::default())?),
    };

    let student = init_encoder(&enc, &mut rng)?;
    // random temporal weights and a shifted teacher exercise every path
    let mut student_t: Vec<Tensor> = student.tensors().to_vec();
    for t in student_t.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let student = student.with_tensors(student_t)?;
    let mut teacher_t: Vec<Tensor> = student.tensors().to_vec();
    for t in teacher_t.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    let teacher = student.with_tensors(teacher_t)?;

    let shape = [enc.frames, enc.tokens, enc.d_in];
    let teacher_clips: Vec<Clip> = (0..batch)
        .map(|_| Clip::new(randn(&shape, &mut rng)))
        .collect::<Result<_>>()?;
    let student_clips: Vec<Clip> = (0..batch)
        .map(|_| Clip::new(randn(&shape, &mut rng)))
        .collect::<Result<_>>()?;
    let tv: Vec<&Clip> = teacher_clips.iter().collect();
    let sv: Vec<&Clip> = student_clips.iter().collect();
    let ma = MovingAverageState {
        category: random_ma(classes, &mut rng),
        description: random_ma(classes, &mut rng),
    };

    let scores = teacher_scores(&teacher, &tv, &spaces, obj)?;
    let (_, analytic, _) = student_loss(&student, &scores, &sv, &spaces, &ma, obj)?;
    let f = |ts: &[Tensor]| -> Result<f64> {
        let p = student.with_tensors(ts.to_vec())?;
        Ok(student_loss(&p, &scores, &sv, &spaces, &ma, obj)?.0.total)
    };
    let coords = if per_tensor == 0 {
        Coordinates::All
    } else {
        Coordinates::Sample { per_tensor, seed }
    };
    let rep = grad_check(f, student.tensors(), &analytic, 1e-5, coords)?;
    Ok(GradCheckCase {
        seed,
        encoder: enc,
        classes,
        batch,
        params: enc.param_count(),
        checked: rep.checked,
        max_rel_error: rep.max_rel_error,
        worst: student.names()[rep.worst.0].clone(),
    })
}

/// Runs `count` cases with seeds `first_seed..first_seed + count`.
pub fn loss_gradcheck_suite(
    count: usize,
    first_seed: u64,
    obj: &ObjectiveConfig,
    per_tensor: usize,
) -> Result<Vec<GradCheckCase>> {
    (0..count as u64)
        .map(|i| loss_gradcheck_case(first_seed + i, obj, per_tensor))
        .collect()
}
