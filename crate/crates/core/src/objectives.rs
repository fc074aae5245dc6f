//! Self-supervised loss terms over concept-space score vectors: sharpening,
//! significance weighting, concept distillation (CD), the uniform
//! distribution prior (UDP) and cross-space concept alignment (CA).
//!
//! Two flavours are provided. The plain functions work on `f64` slices and
//! are the reference definitions. [`record_batch_loss`] builds the same
//! quantities on a [`Tape`] for a batch, so gradients reach the student.

use crate::concept_space::ConceptSpace;
use crate::error::{invalid, LssError, Result};
use crate::numerics::{entropy, log_softmax_temp, softmax_temp, Tape, Tensor, Var};

/// Which branch feeds the moving average of the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdpSource {
    Student,
    Teacher,
}

impl UdpSource {
    pub fn as_str(self) -> &'static str {
        match self {
            UdpSource::Student => "student",
            UdpSource::Teacher => "teacher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "student" => Some(UdpSource::Student),
            "teacher" => Some(UdpSource::Teacher),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_teacher: f64,
    pub lambda_student: f64,
    pub tau: f64,
    pub use_significance_weight: bool,
    pub use_udp: bool,
    pub use_description_space: bool,
    pub use_alignment: bool,
    pub udp_weight: f64,
    pub udp_source: UdpSource,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_teacher: 0.1,
            lambda_student: 1.0,
            tau: 0.5,
            use_significance_weight: true,
            use_udp: true,
            use_description_space: true,
            use_alignment: true,
            udp_weight: 50.0,
            udp_source: UdpSource::Student,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_teacher > 0.0 && self.lambda_teacher.is_finite()) {
            return invalid(format!(
                "lambda_teacher must be positive, got {}",
                self.lambda_teacher
            ));
        }
        if !(self.lambda_student > 0.0 && self.lambda_student.is_finite()) {
            return invalid(format!(
                "lambda_student must be positive, got {}",
                self.lambda_student
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return invalid(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.udp_weight >= 0.0 && self.udp_weight.is_finite()) {
            return invalid(format!(
                "udp_weight must be non-negative, got {}",
                self.udp_weight
            ));
        }
        if self.use_alignment && !self.use_description_space {
            return invalid("alignment needs the description space to be enabled");
        }
        Ok(())
    }
}

/// Temperature softmax `exp(v/lambda) / sum exp(v/lambda)`.
pub fn sharpen(f_tilde: &[f64], lambda: f64) -> Result<Vec<f64>> {
    softmax_temp(f_tilde, lambda)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return invalid(format!("{what} is empty"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid(format!("{what} has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return invalid(format!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

/// Largest teacher probability.
pub fn significance_weight(f_hat_teacher: &[f64]) -> Result<f64> {
    check_distribution(f_hat_teacher, "teacher distribution")?;
    Ok(f_hat_teacher
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}

fn teacher_side(t: &[f64], cfg: &ObjectiveConfig) -> Result<(Vec<f64>, f64)> {
    let p = sharpen(t, cfg.lambda_teacher)?;
    let w = if cfg.use_significance_weight {
        significance_weight(&p)?
    } else {
        1.0
    };
    Ok((p, w))
}

/// `-w_s * sum_j p1[j] log p2[j]` with `p1` the sharpened teacher and `p2`
/// the student distribution.
pub fn cd_loss(
    f_tilde_teacher: &[f64],
    f_tilde_student: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    if f_tilde_teacher.len() != f_tilde_student.len() {
        return invalid(format!(
            "teacher has {} scores, student {}",
            f_tilde_teacher.len(),
            f_tilde_student.len()
        ));
    }
    let (p1, w) = teacher_side(f_tilde_teacher, cfg)?;
    let logp2 = log_softmax_temp(f_tilde_student, cfg.lambda_student)?;
    Ok(-w * p1.iter().zip(&logp2).map(|(a, b)| a * b).sum::<f64>())
}

/// Cross-space terms: teacher category against student description scores,
/// plus teacher description against student category scores.
pub fn ca_loss(
    teacher_c: &[f64],
    teacher_d: &[f64],
    student_c: &[f64],
    student_d: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    if teacher_c.len() != teacher_d.len() || student_c.len() != student_d.len() {
        return invalid(format!(
            "alignment needs equal space sizes, got {} and {}",
            teacher_c.len(),
            teacher_d.len()
        ));
    }
    Ok(cd_loss(teacher_c, student_d, cfg)? + cd_loss(teacher_d, student_c, cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Category,
    Description,
}

/// Moving averages of the mean score distribution, one per concept space.
#[derive(Clone, Debug, PartialEq)]
pub struct MovingAverageState {
    pub category: Vec<f64>,
    pub description: Vec<f64>,
}

impl MovingAverageState {
    pub fn uniform(n_category: usize, n_description: usize) -> Self {
        let u = |n: usize| vec![1.0 / n as f64; n];
        MovingAverageState {
            category: u(n_category),
            description: u(n_description),
        }
    }

    pub fn get(&self, space: Space) -> &[f64] {
        match space {
            Space::Category => &self.category,
            Space::Description => &self.description,
        }
    }

    fn get_mut(&mut self, space: Space) -> &mut Vec<f64> {
        match space {
            Space::Category => &mut self.category,
            Space::Description => &mut self.description,
        }
    }

    pub fn is_valid(&self) -> bool {
        [&self.category, &self.description].iter().all(|p| {
            p.iter().all(|v| *v > 0.0 && v.is_finite())
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        })
    }
}

fn mix(ma: &[f64], mean: &[f64], tau: f64) -> Vec<f64> {
    let mut out: Vec<f64> = ma
        .iter()
        .zip(mean)
        .map(|(m, x)| tau * x + (1.0 - tau) * m)
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn udp_value(ma: &[f64]) -> f64 {
    -ma.iter().map(|v| v.max(1e-300).ln()).sum::<f64>() / ma.len() as f64
}

/// Updates the running average of `space` with the batch mean and returns
/// `-(1/n) sum_j log ma[j]`.
pub fn udp_update_and_loss(
    state: &mut MovingAverageState,
    mean: &[f64],
    space: Space,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    check_distribution(mean, "batch mean distribution")?;
    let ma = state.get_mut(space);
    if ma.len() != mean.len() {
        return invalid(format!(
            "moving average has {} entries, batch mean {}",
            ma.len(),
            mean.len()
        ));
    }
    *ma = mix(ma, mean, cfg.tau);
    Ok(udp_value(ma))
}

/// Per-term values of the combined objective (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cd_c: f64,
    pub up_c: f64,
    pub cd_d: f64,
    pub up_d: f64,
    pub ca: f64,
    /// mean significance weight of the category teacher
    pub ws_mean: f64,
    pub h_ma_c: f64,
    pub h_ma_d: f64,
    /// entropy of the batch-mean sharpened teacher category distribution
    pub h_teacher_c: f64,
}

/// Raw scores of a batch in both spaces (`B x n_C`, `B x n_D`). The
/// description matrix may be absent when that space is disabled.
#[derive(Clone, Debug)]
pub struct BatchScores {
    pub category: Tensor,
    pub description: Option<Tensor>,
}

fn check_scores(teacher: &BatchScores, cfg: &ObjectiveConfig) -> Result<()> {
    if teacher.category.rank() != 2 || teacher.category.rows() == 0 {
        return invalid("category scores must be a non-empty B x n matrix");
    }
    if cfg.use_description_space {
        match &teacher.description {
            Some(d) if d.rows() == teacher.category.rows() => {
                if cfg.use_alignment && d.cols() != teacher.category.cols() {
                    return invalid(format!(
                        "alignment needs equal space sizes, got {} and {}",
                        teacher.category.cols(),
                        d.cols()
                    ));
                }
            }
            Some(_) => return invalid("description scores have a different batch size"),
            None => return invalid("description space enabled but no description scores given"),
        }
    }
    Ok(())
}

/// Reference combined objective for one batch without gradients:
/// `mean_i(CD_C + CD_D + CA) + L_UP^C + L_UP^D`, terms dropped per flags.
/// Advances `state`.
pub fn total_loss(
    teacher: &BatchScores,
    student: &BatchScores,
    state: &mut MovingAverageState,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_scores(teacher, cfg)?;
    check_scores(student, cfg)?;
    let b = teacher.category.rows();
    if student.category.rows() != b {
        return invalid("teacher and student batch sizes differ");
    }
    let mut br = LossBreakdown::default();
    let spaces: &[Space] = if cfg.use_description_space {
        &[Space::Category, Space::Description]
    } else {
        &[Space::Category]
    };
    let pick = |s: &BatchScores, sp: Space| -> Tensor {
        match sp {
            Space::Category => s.category.clone(),
            Space::Description => s.description.clone().unwrap(),
        }
    };
    for &sp in spaces {
        let (t, s) = (pick(teacher, sp), pick(student, sp));
        let mut cd = 0.0;
        let mut mean = vec![0.0; s.cols()];
        for i in 0..b {
            cd += cd_loss(t.row(i), s.row(i), cfg)? / b as f64;
            let src = match cfg.udp_source {
                UdpSource::Student => sharpen(s.row(i), cfg.lambda_student)?,
                UdpSource::Teacher => sharpen(t.row(i), cfg.lambda_student)?,
            };
            for (m, p) in mean.iter_mut().zip(src) {
                *m += p / b as f64;
            }
        }
        let up = udp_update_and_loss(state, &mean, sp, cfg)? * cfg.udp_weight;
        let up = if cfg.use_udp { up } else { 0.0 };
        match sp {
            Space::Category => {
                br.cd_c = cd;
                br.up_c = up;
            }
            Space::Description => {
                br.cd_d = cd;
                br.up_d = up;
            }
        }
    }
    if cfg.use_description_space && cfg.use_alignment {
        let (tc, td) = (&teacher.category, teacher.description.as_ref().unwrap());
        let (sc, sd) = (&student.category, student.description.as_ref().unwrap());
        for i in 0..b {
            br.ca += ca_loss(tc.row(i), td.row(i), sc.row(i), sd.row(i), cfg)? / b as f64;
        }
    }
    fill_diagnostics(&mut br, &teacher.category, state, cfg)?;
    br.total = br.cd_c + br.up_c + br.cd_d + br.up_d + br.ca;
    Ok(br)
}

fn fill_diagnostics(
    br: &mut LossBreakdown,
    teacher_c: &Tensor,
    state: &MovingAverageState,
    cfg: &ObjectiveConfig,
) -> Result<()> {
    let b = teacher_c.rows();
    let mut mean = vec![0.0; teacher_c.cols()];
    let mut ws = 0.0;
    for i in 0..b {
        let p = sharpen(teacher_c.row(i), cfg.lambda_teacher)?;
        ws += significance_weight(&p)? / b as f64;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / b as f64;
        }
    }
    br.ws_mean = ws;
    br.h_teacher_c = entropy(&mean);
    br.h_ma_c = entropy(&state.category);
    br.h_ma_d = entropy(&state.description);
    Ok(())
}

/// Records `B x n` scores of features `B x d` against a frozen space:
/// row-normalize, then multiply by the basis transpose.
pub fn record_projection(tape: &mut Tape, features: Var, space: &ConceptSpace) -> Var {
    let unit = tape.normalize_rows(features);
    let basis_t = tape.leaf(space.basis().transpose());
    tape.matmul(unit, basis_t)
}

/// Teacher-side constants of the CD terms for one space: the matrix of
/// `-w_s p1 / B` coefficients, so the term is `dot(coeff, log p2)`.
fn cd_coefficients(t: &Tensor, cfg: &ObjectiveConfig) -> Result<Tensor> {
    let b = t.rows();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..b {
        let (p, w) = teacher_side(t.row(i), cfg)?;
        out.extend(p.iter().map(|v| -w * v / b as f64));
    }
    Tensor::matrix(b, t.cols(), out)
}

/// Records the combined objective for a batch on `tape`.
///
/// `teacher` holds constant teacher scores; `student_c` / `student_d` are
/// tape nodes of student scores. Teacher distributions and weights enter
/// only as constants. Returns the total node, the breakdown and the advanced
/// moving-average state (the input state is not modified).
pub fn record_batch_loss(
    tape: &mut Tape,
    teacher: &BatchScores,
    student_c: Var,
    student_d: Option<Var>,
    state: &MovingAverageState,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown, MovingAverageState)> {
    cfg.validate()?;
    check_scores(teacher, cfg)?;
    let b = teacher.category.rows();
    if tape.value(student_c).shape() != teacher.category.shape() {
        return invalid("student category scores do not match teacher shape");
    }
    let student_d = if cfg.use_description_space {
        let d = student_d.ok_or_else(|| {
            LssError::InvalidArgument("description space enabled but no student scores".into())
        })?;
        if Some(tape.value(d).shape()) != teacher.description.as_ref().map(|t| t.shape()) {
            return invalid("student description scores do not match teacher shape");
        }
        Some(d)
    } else {
        None
    };

    let mut br = LossBreakdown::default();
    let mut next = state.clone();
    let mut terms = Vec::new();

    let mut space_terms =
        |tape: &mut Tape, sp: Space, t: &Tensor, s: Var, br: &mut LossBreakdown| -> Result<()> {
            let logp2 = tape.log_softmax_rows(s, cfg.lambda_student);
            let cd = tape.dot_const(logp2, cd_coefficients(t, cfg)?);
            terms.push(cd);
            let cd_v = tape.value(cd).data()[0];

            let old = state.get(sp);
            let mean = match cfg.udp_source {
                UdpSource::Student => {
                    let p2 = tape.softmax_rows(s, cfg.lambda_student);
                    tape.mean_rows(p2)
                }
                UdpSource::Teacher => {
                    let mut m = vec![0.0; t.cols()];
                    for i in 0..b {
                        for (a, v) in m.iter_mut().zip(sharpen(t.row(i), cfg.lambda_student)?) {
                            *a += v / b as f64;
                        }
                    }
                    tape.leaf(Tensor::from_parts(vec![1, t.cols()], m))
                }
            };
            // ma = tau * mean + (1 - tau) * old
            let scaled = tape.scale(mean, cfg.tau);
            let carry = Tensor::from_parts(
                vec![1, old.len()],
                old.iter().map(|v| (1.0 - cfg.tau) * v).collect(),
            );
            let ma = tape.shift(scaled, &carry);
            let ma_v = tape.value(ma).data().to_vec();
            let s_sum: f64 = ma_v.iter().sum();
            *next.get_mut(sp) = ma_v.iter().map(|v| v / s_sum).collect();

            let mut up_v = 0.0;
            if cfg.use_udp && cfg.udp_weight > 0.0 {
                let logma = tape.log(ma);
                let n = old.len() as f64;
                let w = Tensor::filled(&[1, old.len()], -cfg.udp_weight / n);
                let up = tape.dot_const(logma, w);
                up_v = tape.value(up).data()[0];
                terms.push(up);
            }
            match sp {
                Space::Category => {
                    br.cd_c = cd_v;
                    br.up_c = up_v;
                }
                Space::Description => {
                    br.cd_d = cd_v;
                    br.up_d = up_v;
                }
            }
            Ok(())
        };

    space_terms(tape, Space::Category, &teacher.category, student_c, &mut br)?;
    if let Some(sd) = student_d {
        let td = teacher.description.as_ref().unwrap();
        space_terms(tape, Space::Description, td, sd, &mut br)?;
        if cfg.use_alignment {
            let lp_d = tape.log_softmax_rows(sd, cfg.lambda_student);
            let a = tape.dot_const(lp_d, cd_coefficients(&teacher.category, cfg)?);
            let lp_c = tape.log_softmax_rows(student_c, cfg.lambda_student);
            let c = tape.dot_const(lp_c, cd_coefficients(td, cfg)?);
            br.ca = tape.value(a).data()[0] + tape.value(c).data()[0];
            terms.push(a);
            terms.push(c);
        }
    }

    let total = tape.sum_scalars(&terms);
    br.total = tape.value(total).data()[0];
    fill_diagnostics(&mut br, &teacher.category, &next, cfg)?;
    if !br.total.is_finite() {
        return Err(LssError::NumericalFailure("non-finite loss".into()));
    }
    Ok((total, br, next))
}
