//! Distillation losses on the concept-similarity axis.
//!
//! - Class prototypes: per-class mean of similarity rows within a batch.
//! - GPD: squared L2 distance between teacher and student prototypes,
//!   averaged (or summed) over classes present in both batches.
//! - LCD: supervised contrastive loss anchored on student rows. Candidates are
//!   the other student rows plus every teacher row; positives are candidates
//!   of the anchor's class. Rows are L2-normalized before the dot products and
//!   each positive's denominator runs over all candidates except itself.
//! - Total: `cls + alpha * gpd + beta * lcd`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, CustomBackward, Matrix, Tape, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpdReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub gpd_reduction: GpdReduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.6,
            beta: 0.05,
            tau: 10.0,
            gpd_reduction: GpdReduction::Mean,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Config with both distillation terms switched off.
    pub fn disabled() -> Self {
        DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    /// C x N; rows of absent classes are zero.
    pub prototypes: Matrix,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

impl ClassPrototypes {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.present[class].then(|| self.prototypes.row(class))
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", (rows, 1), (labels.len(), 1)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    Ok(())
}

/// C x B matrix whose row `d` averages the batch rows labelled `d`.
fn averaging_matrix(labels: &[usize], num_classes: usize) -> (Matrix, Vec<usize>) {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut a = Matrix::zeros(num_classes, labels.len());
    for (i, &l) in labels.iter().enumerate() {
        a.set(l, i, 1.0 / counts[l] as f64);
    }
    (a, counts)
}

pub fn class_prototypes(sim: &Matrix, labels: &[usize], num_classes: usize) -> Result<ClassPrototypes> {
    check_labels(labels, sim.rows(), num_classes)?;
    let (a, counts) = averaging_matrix(labels, num_classes);
    Ok(ClassPrototypes {
        prototypes: matmul(&a, sim)?,
        present: counts.iter().map(|&c| c > 0).collect(),
        counts,
    })
}

fn common_classes(a: &ClassPrototypes, b: &ClassPrototypes) -> Result<Vec<usize>> {
    if a.prototypes.shape() != b.prototypes.shape() {
        return Err(Error::shape("gpd_loss", a.prototypes.shape(), b.prototypes.shape()));
    }
    Ok((0..a.num_classes()).filter(|&d| a.present[d] && b.present[d]).collect())
}

/// Mean over common classes of the squared prototype distance.
pub fn gpd_loss(teacher: &ClassPrototypes, student: &ClassPrototypes) -> Result<f64> {
    gpd_loss_with(teacher, student, GpdReduction::Mean)
}

pub fn gpd_loss_with(teacher: &ClassPrototypes, student: &ClassPrototypes, reduction: GpdReduction) -> Result<f64> {
    let common = common_classes(teacher, student)?;
    if common.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = common
        .iter()
        .map(|&d| {
            teacher
                .prototypes
                .row(d)
                .iter()
                .zip(student.prototypes.row(d))
                .map(|(t, s)| (t - s) * (t - s))
                .sum::<f64>()
        })
        .sum();
    Ok(match reduction {
        GpdReduction::Mean => total / common.len() as f64,
        GpdReduction::Sum => total,
    })
}

/// GPD recorded on `tape` with the student similarity slot as the
/// differentiable input; teacher prototypes are constants.
pub fn gpd_loss_tape(
    tape: &mut Tape,
    student_sim: Var,
    student_labels: &[usize],
    teacher: &ClassPrototypes,
    reduction: GpdReduction,
) -> Result<Var> {
    let num_classes = teacher.num_classes();
    let sim_shape = tape.value(student_sim).shape();
    check_labels(student_labels, sim_shape.0, num_classes)?;
    if sim_shape.1 != teacher.prototypes.cols() {
        return Err(Error::shape("gpd_loss", teacher.prototypes.shape(), sim_shape));
    }
    let (a, counts) = averaging_matrix(student_labels, num_classes);
    let common: Vec<usize> = (0..num_classes)
        .filter(|&d| counts[d] > 0 && teacher.present[d])
        .collect();
    if common.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let a = tape.constant(a);
    let protos = tape.matmul(a, student_sim)?;
    let student_sel = tape.select_rows(protos, &common)?;
    let teacher_sel = tape.constant(teacher.prototypes.select_rows(&common));
    let diff = tape.sub(student_sel, teacher_sel)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(match reduction {
        GpdReduction::Mean => tape.scale(total, 1.0 / common.len() as f64),
        GpdReduction::Sum => total,
    })
}

/// Value of the contrastive term plus anchor bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcdValue {
    pub loss: f64,
    /// Anchors without any positive (or without any other candidate).
    pub skipped_anchors: usize,
    pub valid_anchors: usize,
}

struct LcdOutput {
    value: LcdValue,
    grad_anchors: Matrix,
    grad_extra: Matrix,
}

/// Contrastive loss and gradients over unit rows. `anchors` are the student
/// rows; `extra` are the teacher rows.
fn lcd_core(
    anchors: &Matrix,
    anchor_labels: &[usize],
    extra: &Matrix,
    extra_labels: &[usize],
    tau: f64,
    want_grad: bool,
) -> LcdOutput {
    let b = anchors.rows();
    let n_extra = extra.rows();
    if b == 0 {
        return LcdOutput {
            value: LcdValue {
                loss: 0.0,
                skipped_anchors: 0,
                valid_anchors: 0,
            },
            grad_anchors: Matrix::zeros(0, anchors.cols()),
            grad_extra: Matrix::zeros(n_extra, extra.cols()),
        };
    }
    let cand_count = b - 1 + n_extra;
    let mut grad_anchors = Matrix::zeros(b, anchors.cols());
    let mut grad_extra = Matrix::zeros(n_extra, extra.cols());

    // Candidate k < b-1 maps to student row (k if k < i else k+1); k >= b-1 maps to extra row k-(b-1).
    let cand_row = |i: usize, k: usize| -> (bool, usize) {
        if k < b - 1 {
            (true, if k < i { k } else { k + 1 })
        } else {
            (false, k - (b - 1))
        }
    };

    // (valid anchor index, per-candidate weights dℓ_i/dz) collected first so the
    // final average can be applied once the valid count is known.
    let mut total = 0.0;
    let mut per_anchor: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut skipped = 0;
    let mut z = vec![0.0; cand_count];
    let mut is_pos = vec![false; cand_count];
    for i in 0..b {
        let ai = anchors.row(i);
        let mut n_pos = 0;
        for k in 0..cand_count {
            let (student, r) = cand_row(i, k);
            let (row, label) = if student {
                (anchors.row(r), anchor_labels[r])
            } else {
                (extra.row(r), extra_labels[r])
            };
            z[k] = ai.iter().zip(row).map(|(x, y)| x * y).sum::<f64>() / tau;
            is_pos[k] = label == anchor_labels[i];
            n_pos += is_pos[k] as usize;
        }
        if n_pos == 0 || cand_count < 2 {
            skipped += 1;
            continue;
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let s_all: f64 = e.iter().sum();
        // S_p = Σ_{q≠p} e_q, computed directly when subtraction would cancel.
        let s_excl = |p: usize| -> f64 {
            let s = s_all - e[p];
            if s > 1e-6 * s_all {
                s
            } else {
                e.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, v)| v).sum()
            }
        };
        let inv_pos = 1.0 / n_pos as f64;
        let mut loss_i = 0.0;
        let mut inv_s_sum = 0.0;
        let mut inv_s = vec![0.0; cand_count];
        for p in (0..cand_count).filter(|&p| is_pos[p]) {
            let sp = s_excl(p);
            loss_i += -(z[p] - m) + sp.ln();
            inv_s[p] = 1.0 / sp;
            inv_s_sum += inv_s[p];
        }
        total += loss_i * inv_pos;
        if want_grad {
            let w: Vec<f64> = (0..cand_count)
                .map(|q| {
                    let soft = e[q] * (inv_s_sum - if is_pos[q] { inv_s[q] } else { 0.0 });
                    inv_pos * (soft - if is_pos[q] { 1.0 } else { 0.0 })
                })
                .collect();
            per_anchor.push((i, w));
        }
    }
    let valid = b - skipped;
    let loss = if valid > 0 { total / valid as f64 } else { 0.0 };
    if want_grad && valid > 0 {
        let scale = 1.0 / (valid as f64 * tau);
        for (i, w) in per_anchor {
            for (k, &wk) in w.iter().enumerate() {
                let coef = wk * scale;
                if coef == 0.0 {
                    continue;
                }
                let (student, r) = cand_row(i, k);
                let cand: Vec<f64> = if student {
                    anchors.row(r).to_vec()
                } else {
                    extra.row(r).to_vec()
                };
                for (g, c) in grad_anchors.row_mut(i).iter_mut().zip(&cand) {
                    *g += coef * c;
                }
                let ai = anchors.row(i).to_vec();
                let target = if student {
                    grad_anchors.row_mut(r)
                } else {
                    grad_extra.row_mut(r)
                };
                for (g, a) in target.iter_mut().zip(&ai) {
                    *g += coef * a;
                }
            }
        }
    }
    LcdOutput {
        value: LcdValue {
            loss,
            skipped_anchors: skipped,
            valid_anchors: valid,
        },
        grad_anchors,
        grad_extra,
    }
}

fn check_lcd(
    student: (usize, usize),
    student_labels: &[usize],
    teacher: (usize, usize),
    teacher_labels: &[usize],
    tau: f64,
) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if student.1 != teacher.1 {
        return Err(Error::shape("lcd_loss", student, teacher));
    }
    if student_labels.len() != student.0 || teacher_labels.len() != teacher.0 {
        return Err(Error::InvalidArgument(
            "label count does not match similarity rows".into(),
        ));
    }
    Ok(())
}

pub fn lcd_loss(
    student_sims: &Matrix,
    student_labels: &[usize],
    teacher_sims: &Matrix,
    teacher_labels: &[usize],
    tau: f64,
) -> Result<LcdValue> {
    check_lcd(
        student_sims.shape(),
        student_labels,
        teacher_sims.shape(),
        teacher_labels,
        tau,
    )?;
    let anchors = l2_normalize_rows(student_sims, NORM_EPS);
    let extra = l2_normalize_rows(teacher_sims, NORM_EPS);
    Ok(lcd_core(&anchors, student_labels, &extra, teacher_labels, tau, false).value)
}

struct LcdRule {
    anchor_labels: Vec<usize>,
    extra_labels: Vec<usize>,
    tau: f64,
}

impl CustomBackward for LcdRule {
    fn name(&self) -> &'static str {
        "lcd"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>> {
        let out = lcd_core(
            inputs[0],
            &self.anchor_labels,
            inputs[1],
            &self.extra_labels,
            self.tau,
            true,
        );
        let g = grad.data()[0];
        vec![
            Some(out.grad_anchors.map(|v| v * g)),
            Some(out.grad_extra.map(|v| v * g)),
        ]
    }
}

/// LCD recorded on `tape`; teacher rows enter as constants.
pub fn lcd_loss_tape(
    tape: &mut Tape,
    student_sim: Var,
    student_labels: &[usize],
    teacher_sims: &Matrix,
    teacher_labels: &[usize],
    tau: f64,
) -> Result<(Var, LcdValue)> {
    check_lcd(
        tape.value(student_sim).shape(),
        student_labels,
        teacher_sims.shape(),
        teacher_labels,
        tau,
    )?;
    let anchors = tape.l2_normalize_rows(student_sim, NORM_EPS);
    let extra = tape.constant(l2_normalize_rows(teacher_sims, NORM_EPS));
    let out = lcd_core(
        tape.value(anchors),
        student_labels,
        tape.value(extra),
        teacher_labels,
        tau,
        false,
    );
    let rule = LcdRule {
        anchor_labels: student_labels.to_vec(),
        extra_labels: teacher_labels.to_vec(),
        tau,
    };
    let var = tape.custom(&[anchors, extra], Matrix::scalar(out.value.loss), Box::new(rule));
    Ok((var, out.value))
}

pub fn total_loss(cls: f64, gpd: f64, lcd: f64, cfg: &DistillConfig) -> f64 {
    cls + cfg.alpha * gpd + cfg.beta * lcd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn m<R: AsRef<[f64]>>(rows: &[R]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn prototype_examples() {
        let p = class_prototypes(&m(&[[0.2, 0.4, -0.1]]), &[2], 4).unwrap();
        assert_eq!(p.prototype(2).unwrap(), &[0.2, 0.4, -0.1]);
        let p = class_prototypes(&m(&[[1.0, 0.0], [0.0, 1.0]]), &[0, 0], 4).unwrap();
        assert_eq!(p.prototype(0).unwrap(), &[0.5, 0.5]);
        assert!(!p.present[3] && p.prototype(3).is_none());
        assert!(p.prototypes.is_finite());
        assert!(class_prototypes(&m(&[[1.0]]), &[4], 4).is_err());
    }

    #[test]
    fn gpd_examples() {
        let a = class_prototypes(&m(&[[0.3, 0.7]]), &[0], 2).unwrap();
        assert_eq!(gpd_loss(&a, &a).unwrap(), 0.0);
        let t = class_prototypes(&m(&[[1.0, 0.0]]), &[0], 2).unwrap();
        let s = class_prototypes(&m(&[[0.0, 1.0]]), &[0], 2).unwrap();
        assert_eq!(gpd_loss(&t, &s).unwrap(), 2.0);
        // class 0: distance² 2.0, class 1: distance² 0.5 → mean 1.25
        let t = class_prototypes(&m(&[[1.0, 0.0], [0.5, 0.5]]), &[0, 1], 2).unwrap();
        let s = class_prototypes(&m(&[[0.0, 1.0], [0.0, 0.0]]), &[0, 1], 2).unwrap();
        assert_eq!(gpd_loss(&t, &s).unwrap(), 1.25);
        assert_eq!(gpd_loss_with(&t, &s, GpdReduction::Sum).unwrap(), 2.5);
        // no common class
        let s = class_prototypes(&m(&[[0.0, 1.0]]), &[1], 3).unwrap();
        let t = class_prototypes(&m(&[[0.0, 1.0]]), &[0], 3).unwrap();
        assert_eq!(gpd_loss(&t, &s).unwrap(), 0.0);
        let wide = class_prototypes(&m(&[[0.0, 1.0, 2.0]]), &[0], 3).unwrap();
        assert!(gpd_loss(&t, &wide).is_err());
    }

    #[test]
    fn lcd_uniform_is_log_k() {
        // 3 student rows + 2 teacher rows, all identical. Anchor 0 (class 0) has
        // exactly one positive; |Q_0| = 4 so K = 3.
        let row = [0.3, 0.4, 0.5];
        let s = m(&[row, row, row]);
        let t = m(&[row, row]);
        let out = lcd_loss(&s, &[0, 1, 1], &t, &[0, 2], 10.0).unwrap();
        // Anchor 0: positives {teacher0} → log 3.
        // Anchors 1,2: positives {other class-1 student row} → log 3 each.
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(out.skipped_anchors, 0);
    }

    #[test]
    fn lcd_no_positives() {
        let s = m(&[[1.0, 0.0], [0.0, 1.0]]);
        let t = m(&[[0.5, 0.5]]);
        let out = lcd_loss(&s, &[0, 1], &t, &[2], 10.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.skipped_anchors, 2);
        assert!(lcd_loss(&s, &[0, 1], &t, &[2], 0.0).is_err());
        assert!(lcd_loss(&s, &[0, 1], &m(&[[1.0, 0.0, 0.0]]), &[2], 1.0).is_err());
    }

    #[test]
    fn lcd_brute_force_fixture() {
        // Independent enumeration (numpy) of the per-anchor terms for these rows.
        let s = m(&[[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]]);
        let t = m(&[[0.7, 0.2, 0.5], [0.1, 0.9, 0.2]]);
        let out = lcd_loss(&s, &[0, 1], &t, &[0, 1], 10.0).unwrap();
        assert!((out.loss - LCD_FIXTURE).abs() < 1e-12, "{}", out.loss);
    }

    const LCD_FIXTURE: f64 = 0.64142495581802;

    #[test]
    fn lcd_gradient_matches_fd() {
        let s = m(&[[0.9, 0.1, 0.3], [0.2, 0.8, 0.4], [0.5, -0.3, 0.1], [-0.2, 0.6, 0.9]]);
        let t = m(&[[0.7, 0.2, 0.5], [0.1, 0.9, 0.2], [0.3, 0.3, -0.6]]);
        let (sl, tl) = ([0, 1, 0, 1], [0, 1, 1]);
        for tau in [0.5, 10.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(s.clone());
            let (loss, _) = lcd_loss_tape(&mut tape, x, &sl, &t, &tl, tau).unwrap();
            let g = tape.backward(loss).unwrap();
            let fd = finite_diff_grad(|x| lcd_loss(x, &sl, &t, &tl, tau).unwrap().loss, &s, 1e-6);
            let err = relative_error(g.get(x).unwrap(), &fd, 1e-12);
            assert!(err < 1e-6, "tau {tau}: {err}");
        }
    }

    #[test]
    fn gpd_tape_matches_plain_and_fd() {
        let s = m(&[[0.9, 0.1], [0.2, 0.8], [0.5, -0.3]]);
        let labels = [0, 1, 0];
        let teacher = class_prototypes(&m(&[[0.7, 0.2], [0.1, 0.9]]), &[0, 2], 3).unwrap();
        for reduction in [GpdReduction::Mean, GpdReduction::Sum] {
            let plain = |x: &Matrix| {
                let sp = class_prototypes(x, &labels, 3).unwrap();
                gpd_loss_with(&teacher, &sp, reduction).unwrap()
            };
            let mut tape = Tape::new();
            let x = tape.leaf(s.clone());
            let loss = gpd_loss_tape(&mut tape, x, &labels, &teacher, reduction).unwrap();
            assert!((tape.value(loss).data()[0] - plain(&s)).abs() < 1e-15);
            let g = tape.backward(loss).unwrap();
            let fd = finite_diff_grad(plain, &s, 1e-6);
            assert!(relative_error(g.get(x).unwrap(), &fd, 1e-12) < 1e-7);
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = DistillConfig::default();
        assert!((total_loss(1.0, 2.0, 4.0, &cfg) - 2.4).abs() < 1e-15);
        assert_eq!(total_loss(1.7, 2.0, 4.0, &DistillConfig::disabled()), 1.7);
        assert_eq!(total_loss(1.7, 0.0, 0.0, &cfg), 1.7);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
