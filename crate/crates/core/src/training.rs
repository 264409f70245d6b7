//! Optimizer, schedule, unpaired sampling and the train loops.
//!
//! One step of student training draws an independent batch from each
//! modality's training split, runs the frozen teacher forward, and minimizes
//! `cls + alpha * gpd + beta * lcd` on the student with AdamW. Terms whose
//! weight is zero are left off the tape entirely, so a zero-weight run follows
//! exactly the same arithmetic as the plain baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::concept_pool::ConceptPool;
use crate::distillation::{class_prototypes, gpd_loss_tape, gpd_loss_with, lcd_loss, lcd_loss_tape, DistillConfig};
use crate::error::{Error, Result};
use crate::metrics::{macro_report, MetricsReport};
use crate::model::{Architecture, ForwardVars, Modality, ModelParams, CE_EPS};
use crate::numerics::{Matrix, Tape, Var};
use crate::seeded_rng;
use crate::synthdata::{Split, SyntheticDataset};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    /// Steps over which the schedule anneals; `None` means the whole run.
    /// Later steps stay at the floor.
    pub schedule_period: Option<usize>,
    pub weight_decay: f64,
    /// Samples per modality per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Widths of the tanh layers in front of the encoder projection.
    pub hidden: Vec<usize>,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lr_min: 0.0,
            schedule_period: None,
            weight_decay: 1e-2,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            hidden: Vec::new(),
            distill: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule sized for the bundled synthetic data: the dataset is small
    /// and the features are random projections, so the default step size
    /// would need thousands of epochs to converge.
    pub fn synthetic() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.learning_rate) {
            return bad(format!("lr_min must lie in [0, learning_rate], got {}", self.lr_min));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.schedule_period == Some(0) {
            return bad("schedule_period must be positive".into());
        }
        if self.hidden.len() > 2 || self.hidden.contains(&0) {
            return bad(format!(
                "hidden must list at most two positive widths, got {:?}",
                self.hidden
            ));
        }
        self.distill.validate()
    }

    fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let period = self.schedule_period.unwrap_or(total_steps).max(1);
        cosine_lr(step.min(period), period, self.learning_rate, self.lr_min)
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(params: &mut ModelParams, grads: &[Matrix], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.frozen {
        return Err(Error::FrozenParams);
    }
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.first_moment.len() != tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.first_moment.len(),
            tensors.len()
        )));
    }
    for ((p, g), m) in tensors.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let shrink = 1.0 - lr * state.weight_decay;
    for (((p, g), m), v) in tensors
        .into_iter()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * shrink - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Batches per epoch for a split of `n` samples: full batches only, and the
/// whole split as one batch when it is smaller than `batch_size`.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    (n / batch_size.max(1)).max(1)
}

/// Row indices of one modality's batch at a global `step`. Each epoch is a
/// fresh seeded permutation; indices within a batch are sorted.
pub fn sample_batch(n: usize, batch_size: usize, seed: u64, modality: Modality, step: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptySplit(format!("{} train", modality.name())));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let per_epoch = batches_per_epoch(n, batch_size);
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let b = batch_size.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    let stream = ((0x200 + modality.stream()) << 40) | epoch as u64;
    perm.shuffle(&mut seeded_rng(seed, stream));
    let mut batch = perm[slot * b..(slot + 1) * b].to_vec();
    batch.sort_unstable();
    Ok(batch)
}

/// Independent student and teacher batches for `step`.
pub fn sample_unpaired_batch(
    student_n: usize,
    teacher_n: usize,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok((
        sample_batch(student_n, batch_size, seed, Modality::Student, step)?,
        sample_batch(teacher_n, batch_size, seed, Modality::Teacher, step)?,
    ))
}

/// Features and labels of one modality split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn new(ds: &SyntheticDataset, modality: Modality, split: Split) -> Self {
        let (features, labels) = ds.split_arrays(modality, split);
        SplitData { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        lr: f64,
        loss_cls: f64,
        loss_gpd: f64,
        loss_lcd: f64,
        loss_total: f64,
    },
    Epoch {
        epoch: usize,
        val_macro_prf1: f64,
        selected: bool,
    },
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation macro P-R F1.
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
    /// `None` when no epoch ran and the initialization is returned.
    pub best_epoch: Option<usize>,
    pub best_val_macro_prf1: f64,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Called after every optimizer step with the step index and the new
/// parameters.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &ModelParams);

pub fn architecture_for(cfg: &TrainConfig, ds: &SyntheticDataset, pool: &ConceptPool) -> Architecture {
    Architecture {
        feature_dim: ds.meta.feature_dim,
        hidden: cfg.hidden.clone(),
        embed_dim: pool.dim(),
        num_concepts: pool.len(),
        num_classes: ds.num_classes(),
    }
}

/// Evaluates `params` on one modality split.
pub fn evaluate(
    params: &ModelParams,
    ds: &SyntheticDataset,
    pool: &ConceptPool,
    modality: Modality,
    split: Split,
) -> Result<MetricsReport> {
    let data = SplitData::new(ds, modality, split);
    if data.is_empty() {
        return Err(Error::EmptySplit(format!("{} {}", modality.name(), split.name())));
    }
    let (_, pred) = params.forward(&data.features, &pool.embeddings().transpose())?;
    macro_report(
        &pred.probabilities,
        &pred.predicted_class,
        &data.labels,
        ds.class_names(),
    )
}

fn check_finite(value: f64, term: &'static str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

struct TeacherCtx<'a> {
    params: &'a ModelParams,
    data: SplitData,
}

/// Shared loop: plain cross-entropy when `teacher` is `None`, the distillation
/// objective otherwise.
/// Loss terms of one batch; distillation terms are 0 without a teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLosses {
    pub cls: f64,
    pub gpd: f64,
    pub lcd: f64,
    pub total: f64,
}

/// Similarity rows and labels of the teacher's batch for one step.
#[derive(Clone, Copy, Debug)]
pub struct TeacherBatch<'a> {
    pub sim: &'a Matrix,
    pub labels: &'a [usize],
}

/// Records the training objective of one batch on `tape` and returns the
/// forward slots, the total-loss slot and the term values.
///
/// A distillation term with zero weight is evaluated for the log but kept
/// off the tape, so its gradient contribution is exactly absent.
pub fn batch_objective(
    tape: &mut Tape,
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    concepts_t: &Matrix,
    teacher: Option<TeacherBatch<'_>>,
    dc: &DistillConfig,
) -> Result<(ForwardVars, Var, BatchLosses)> {
    let fv = params.forward_tape(tape, features, concepts_t)?;
    let cls = tape.nll(fv.probabilities, labels, CE_EPS)?;
    let mut losses = BatchLosses {
        cls: tape.value(cls).data()[0],
        gpd: 0.0,
        lcd: 0.0,
        total: 0.0,
    };
    let mut total = cls;
    if let Some(t) = teacher {
        let t_protos = class_prototypes(t.sim, t.labels, params.num_classes())?;
        if dc.alpha > 0.0 {
            let g = gpd_loss_tape(tape, fv.similarity, labels, &t_protos, dc.gpd_reduction)?;
            losses.gpd = tape.value(g).data()[0];
            let g = tape.scale(g, dc.alpha);
            total = tape.add(total, g)?;
        } else {
            let s_protos = class_prototypes(tape.value(fv.similarity), labels, params.num_classes())?;
            losses.gpd = gpd_loss_with(&t_protos, &s_protos, dc.gpd_reduction)?;
        }
        if dc.beta > 0.0 {
            let (l, _) = lcd_loss_tape(tape, fv.similarity, labels, t.sim, t.labels, dc.tau)?;
            losses.lcd = tape.value(l).data()[0];
            let l = tape.scale(l, dc.beta);
            total = tape.add(total, l)?;
        } else {
            losses.lcd = lcd_loss(tape.value(fv.similarity), labels, t.sim, t.labels, dc.tau)?.loss;
        }
    }
    losses.total = tape.value(total).data()[0];
    Ok((fv, total, losses))
}

fn run(
    cfg: &TrainConfig,
    modality: Modality,
    teacher: Option<TeacherCtx<'_>>,
    ds: &SyntheticDataset,
    pool: &ConceptPool,
    observer: Option<StepObserver<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut observer = observer;
    let arch = architecture_for(cfg, ds, pool);
    let mut params = ModelParams::init(&arch, modality, cfg.seed)?;
    params.check_pool(pool)?;
    let concepts_t = pool.embeddings().transpose();
    let train = SplitData::new(ds, modality, Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit(format!("{} train", modality.name())));
    }
    let val = SplitData::new(ds, modality, Split::Val);
    let teacher_hash = teacher.as_ref().map(|t| t.params.hash());
    if let Some(t) = &teacher {
        t.params.check_pool(pool)?;
        if t.data.is_empty() {
            return Err(Error::EmptySplit("teacher train".into()));
        }
    }

    let per_epoch = batches_per_epoch(train.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut opt = OptimizerState::new(&params, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let dc = cfg.distill;

    for epoch in 0..cfg.epochs {
        for slot in 0..per_epoch {
            let step = epoch * per_epoch + slot;
            let lr = cfg.lr_at(step, total_steps);
            let idx = sample_batch(train.len(), cfg.batch_size, cfg.seed, modality, step)?;
            let (x, y) = train.batch(&idx);

            let teacher_batch = match &teacher {
                Some(t) => {
                    let t_idx = sample_batch(t.data.len(), cfg.batch_size, cfg.seed, Modality::Teacher, step)?;
                    let (tx, ty) = t.data.batch(&t_idx);
                    let (t_sim, _) = t.params.forward(&tx, &concepts_t)?;
                    Some((t_sim, ty))
                }
                None => None,
            };
            let mut tape = Tape::new();
            let (fv, total, losses) = batch_objective(
                &mut tape,
                &params,
                &x,
                &y,
                &concepts_t,
                teacher_batch.as_ref().map(|(sim, labels)| TeacherBatch { sim, labels }),
                &dc,
            )?;
            let BatchLosses {
                cls: loss_cls,
                gpd: loss_gpd,
                lcd: loss_lcd,
                total: loss_total,
            } = losses;
            check_finite(loss_cls, "cls", step)?;
            check_finite(loss_gpd, "gpd", step)?;
            check_finite(loss_lcd, "lcd", step)?;
            check_finite(loss_total, "total", step)?;

            let grads = tape.backward(total)?;
            let grads: Vec<Matrix> = fv
                .params
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            adamw_step(&mut params, &grads, &mut opt, lr)?;
            if let Some(obs) = observer.as_mut() {
                obs(step, &params);
            }
            log.push(LogRecord::Step {
                step,
                lr,
                loss_cls,
                loss_gpd,
                loss_lcd,
                loss_total,
            });
        }

        if let (Some(t), Some(h)) = (&teacher, &teacher_hash) {
            if &t.params.hash() != h {
                return Err(Error::TeacherMutated { epoch });
            }
        }

        let score = if val.is_empty() {
            // Without a validation split the latest epoch wins.
            epoch as f64
        } else {
            let (_, pred) = params.forward(&val.features, &concepts_t)?;
            macro_report(
                &pred.probabilities,
                &pred.predicted_class,
                &val.labels,
                ds.class_names(),
            )?
            .macro_avg
            .pr_f1
        };
        let selected = score > best_score;
        if selected {
            best_score = score;
            best = params.clone();
            best_epoch = Some(epoch);
        }
        log.push(LogRecord::Epoch {
            epoch,
            val_macro_prf1: if val.is_empty() { f64::NAN } else { score },
            selected,
        });
    }

    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        best_val_macro_prf1: if best_epoch.is_some() && !val.is_empty() {
            best_score
        } else {
            f64::NAN
        },
    })
}

/// Trains the teacher on its own modality with cross-entropy and returns it
/// frozen.
pub fn pretrain_teacher(cfg: &TrainConfig, ds: &SyntheticDataset, pool: &ConceptPool) -> Result<TrainOutcome> {
    let mut out = run(cfg, Modality::Teacher, None, ds, pool, None)?;
    out.params.frozen = true;
    Ok(out)
}

/// Student trained with cross-entropy only.
pub fn train_baseline(
    cfg: &TrainConfig,
    ds: &SyntheticDataset,
    pool: &ConceptPool,
    observer: Option<StepObserver<'_>>,
) -> Result<TrainOutcome> {
    run(cfg, Modality::Student, None, ds, pool, observer)
}

/// Student trained against a frozen teacher with the composite objective.
pub fn distill_student(
    cfg: &TrainConfig,
    teacher: &ModelParams,
    ds: &SyntheticDataset,
    pool: &ConceptPool,
    observer: Option<StepObserver<'_>>,
) -> Result<TrainOutcome> {
    if !teacher.frozen {
        return Err(Error::TeacherNotFrozen);
    }
    let ctx = TeacherCtx {
        params: teacher,
        data: SplitData::new(ds, Modality::Teacher, Split::Train),
    };
    run(cfg, Modality::Student, Some(ctx), ds, pool, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GeneratorConfig, ModalityCounts, SplitCounts};

    fn tiny_params() -> ModelParams {
        let arch = Architecture {
            feature_dim: 3,
            hidden: vec![],
            embed_dim: 2,
            num_concepts: 4,
            num_classes: 2,
        };
        ModelParams::init(&arch, Modality::Student, 7).unwrap()
    }

    fn grads_like(p: &ModelParams, v: f64) -> Vec<Matrix> {
        p.tensors()
            .iter()
            .map(|t| Matrix::filled(t.rows(), t.cols(), v))
            .collect()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.0);
        let g = grads_like(&p, 0.0);
        adamw_step(&mut p, &g, &mut st, 1e-2).unwrap();
        assert_eq!(p.tensors(), before.tensors());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.0);
        let mut g = grads_like(&p, 0.0);
        g[0].data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 2 == 0 { 0.3 } else { -2.0 });
        let lr = 1e-3;
        adamw_step(&mut p, &g, &mut st, lr).unwrap();
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        for ((a, b), gi) in p.tensors()[0]
            .data()
            .iter()
            .zip(before.tensors()[0].data())
            .zip(g[0].data())
        {
            let expected = b - lr * gi / (gi.abs() + ADAM_EPS);
            assert!((a - expected).abs() < 1e-15);
            assert!(((b - a) / lr - gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_shrinks_multiplicatively() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = OptimizerState::new(&p, 0.1);
        let g = grads_like(&p, 0.0);
        adamw_step(&mut p, &g, &mut st, 0.5).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * (1.0 - 0.5 * 0.1));
            }
        }
    }

    #[test]
    fn frozen_params_refuse_update() {
        let mut p = tiny_params();
        p.frozen = true;
        let mut st = OptimizerState::new(&p, 0.0);
        let g = grads_like(&p, 1.0);
        assert!(matches!(
            adamw_step(&mut p, &g, &mut st, 1e-3),
            Err(Error::FrozenParams)
        ));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn whole_split_batch_is_stable() {
        for step in 0..5 {
            assert_eq!(
                sample_batch(6, 6, 3, Modality::Student, step).unwrap(),
                vec![0, 1, 2, 3, 4, 5]
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let a = sample_unpaired_batch(20, 9, 4, 11, 3).unwrap();
        assert_eq!(a, sample_unpaired_batch(20, 9, 4, 11, 3).unwrap());
        // One student epoch covers each index once.
        let mut seen: Vec<usize> = (0..5)
            .flat_map(|s| sample_batch(20, 4, 11, Modality::Student, s).unwrap())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn modalities_cycle_their_own_epochs() {
        // 20 student rows -> 5 batches per epoch, 9 teacher rows -> 2.
        let teacher_epoch = |step| {
            let mut e: Vec<usize> = (step..step + 2)
                .flat_map(|s| sample_batch(9, 4, 1, Modality::Teacher, s).unwrap())
                .collect();
            e.sort_unstable();
            e.dedup();
            e.len()
        };
        assert_eq!(teacher_epoch(0), 8);
        assert_eq!(teacher_epoch(2), 8);
        let e0: Vec<_> = (0..2)
            .map(|s| sample_batch(9, 4, 1, Modality::Teacher, s).unwrap())
            .collect();
        let e1: Vec<_> = (2..4)
            .map(|s| sample_batch(9, 4, 1, Modality::Teacher, s).unwrap())
            .collect();
        assert_ne!(e0, e1);
        assert!(matches!(
            sample_batch(0, 4, 1, Modality::Student, 0),
            Err(Error::EmptySplit(_))
        ));
    }

    fn separable() -> (SyntheticDataset, ConceptPool) {
        let counts = SplitCounts {
            train: vec![40, 40, 40],
            val: vec![10, 10, 10],
            test: vec![10, 10, 10],
        };
        let cfg = GeneratorConfig {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            concepts_per_class: 3,
            embed_dim: 8,
            feature_dim: 12,
            counts: ModalityCounts {
                student: counts.clone(),
                teacher: counts,
            },
            teacher_dominance: 0.0,
            noise_sigma: 0.05,
            seed: 1,
            ..GeneratorConfig::default()
        };
        generate(&cfg).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn teacher_fits_separable_data() {
        let (ds, pool) = separable();
        let out = pretrain_teacher(&quick_cfg(50), &ds, &pool).unwrap();
        assert!(out.params.frozen);
        let report = evaluate(&out.params, &ds, &pool, Modality::Teacher, Split::Train).unwrap();
        assert!(report.macro_avg.accuracy > 0.95, "{}", report.macro_avg.accuracy);
    }

    #[test]
    fn zero_epochs_returns_frozen_init() {
        let (ds, pool) = separable();
        let cfg = quick_cfg(0);
        let out = pretrain_teacher(&cfg, &ds, &pool).unwrap();
        let mut init = ModelParams::init(&architecture_for(&cfg, &ds, &pool), Modality::Teacher, cfg.seed).unwrap();
        init.frozen = true;
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn runs_are_bit_identical() {
        let (ds, pool) = separable();
        let cfg = quick_cfg(2);
        let a = pretrain_teacher(&cfg, &ds, &pool).unwrap();
        let b = pretrain_teacher(&cfg, &ds, &pool).unwrap();
        assert_eq!(a.params.hash(), b.params.hash());
        assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());

        let s1 = distill_student(&cfg, &a.params, &ds, &pool, None).unwrap();
        let s2 = distill_student(&cfg, &b.params, &ds, &pool, None).unwrap();
        assert_eq!(s1.params.hash(), s2.params.hash());
        assert_eq!(s1.log_jsonl().unwrap(), s2.log_jsonl().unwrap());
    }

    #[test]
    fn teacher_must_be_frozen() {
        let (ds, pool) = separable();
        let mut t = pretrain_teacher(&quick_cfg(0), &ds, &pool).unwrap().params;
        t.frozen = false;
        assert!(matches!(
            distill_student(&quick_cfg(1), &t, &ds, &pool, None),
            Err(Error::TeacherNotFrozen)
        ));
    }

    #[test]
    fn zero_weights_follow_the_baseline() {
        let (ds, pool) = separable();
        let teacher = pretrain_teacher(&quick_cfg(2), &ds, &pool).unwrap().params;
        let teacher_hash = teacher.hash();
        let cfg = TrainConfig {
            distill: DistillConfig::disabled(),
            ..quick_cfg(2)
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        distill_student(
            &cfg,
            &teacher,
            &ds,
            &pool,
            Some(&mut |s, p: &ModelParams| a.push((s, p.hash()))),
        )
        .unwrap();
        train_baseline(&cfg, &ds, &pool, Some(&mut |s, p: &ModelParams| b.push((s, p.hash())))).unwrap();
        assert_eq!(a.len(), 14);
        assert_eq!(a, b);
        assert_eq!(teacher.hash(), teacher_hash);
    }

    #[test]
    fn log_schema() {
        let (ds, pool) = separable();
        let out = train_baseline(&quick_cfg(1), &ds, &pool, None).unwrap();
        let text = out.log_jsonl().unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 8);
        for key in ["step", "lr", "loss_cls", "loss_gpd", "loss_lcd", "loss_total"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
        assert_eq!(lines[7]["epoch"], 0);
        assert_eq!(lines[7]["selected"], true);
        let back: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, out.log);
    }
}
