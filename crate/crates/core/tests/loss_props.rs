mod common;

use codistill::distillation::{
    class_prototypes, gpd_loss, gpd_loss_tape, gpd_loss_with, lcd_loss, lcd_loss_tape, total_loss,
};
use codistill::model::{concept_similarity, cross_entropy, encode, fused_predict, predict, Architecture, CE_EPS};
use codistill::numerics::{finite_diff_grad, relative_error};
use codistill::training::{batch_objective, TeacherBatch};
use codistill::{ConceptPool, DistillConfig, GpdReduction, Matrix, Modality, Tape};
use common::{labels, model, param_grad_errors, pool, rng, uniform, FD_STEP, GRAD_TOL};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Problem sizes within B ≤ 8, N ≤ 12, C ≤ 5.
#[derive(Clone, Debug)]
struct Sizes {
    seed: u64,
    batch: usize,
    teacher_batch: usize,
    classes: usize,
    per_class: usize,
    feature_dim: usize,
    embed_dim: usize,
    hidden: Vec<usize>,
}

impl Sizes {
    fn concepts(&self) -> usize {
        self.classes * self.per_class
    }

    fn arch(&self) -> Architecture {
        Architecture {
            feature_dim: self.feature_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            num_concepts: self.concepts(),
            num_classes: self.classes,
        }
    }
}

fn sizes() -> impl Strategy<Value = Sizes> {
    (2usize..=5)
        .prop_flat_map(|c| (Just(c), 1usize..=12 / c))
        .prop_flat_map(|(classes, per_class)| {
            (
                any::<u64>(),
                1usize..=8,
                1usize..=8,
                2usize..=6,
                2usize..=5,
                prop::collection::vec(2usize..=5, 0..=2),
            )
                .prop_map(
                    move |(seed, batch, teacher_batch, feature_dim, embed_dim, hidden)| Sizes {
                        seed,
                        batch,
                        teacher_batch,
                        classes,
                        per_class,
                        feature_dim,
                        embed_dim,
                        hidden,
                    },
                )
        })
}

fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn permute<T: Copy>(values: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| values[i]).collect()
}

fn permute_refs<T: Clone>(values: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| values[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn classifier_gradient_matches_fd(s in sizes()) {
        let mut g = rng(s.seed);
        let concepts_t = pool(&mut g, s.classes, s.per_class, s.embed_dim).embeddings().transpose();
        let params = model(&mut g, &s.arch(), Modality::Student);
        let x = uniform(&mut g, s.batch, s.feature_dim);
        let y = labels(&mut g, s.batch, s.classes);
        let errors = param_grad_errors(&params, |tape, p| {
            let fv = p.forward_tape(tape, &x, &concepts_t).unwrap();
            (tape.nll(fv.probabilities, &y, CE_EPS).unwrap(), fv.params)
        });
        for (k, e) in errors.iter().enumerate() {
            prop_assert!(*e < GRAD_TOL, "tensor {k}: {e:e}");
        }
    }

    #[test]
    fn composite_gradient_matches_fd(s in sizes(), alpha in 0.0f64..2.0, beta in 0.0f64..2.0, tau in 0.2f64..10.0) {
        let mut g = rng(s.seed);
        let concepts_t = pool(&mut g, s.classes, s.per_class, s.embed_dim).embeddings().transpose();
        let params = model(&mut g, &s.arch(), Modality::Student);
        let mut teacher = model(&mut g, &s.arch(), Modality::Teacher);
        teacher.frozen = true;
        let x = uniform(&mut g, s.batch, s.feature_dim);
        let y = labels(&mut g, s.batch, s.classes);
        let tx = uniform(&mut g, s.teacher_batch, s.feature_dim);
        let ty = labels(&mut g, s.teacher_batch, s.classes);
        let (t_sim, _) = teacher.forward(&tx, &concepts_t).unwrap();
        let dc = DistillConfig { alpha, beta, tau, gpd_reduction: GpdReduction::Mean };
        let errors = param_grad_errors(&params, |tape, p| {
            let teacher = Some(TeacherBatch { sim: &t_sim, labels: &ty });
            let (fv, total, _) = batch_objective(tape, p, &x, &y, &concepts_t, teacher, &dc).unwrap();
            (total, fv.params)
        });
        for (k, e) in errors.iter().enumerate() {
            prop_assert!(*e < GRAD_TOL, "tensor {k}: {e:e}");
        }
    }

    #[test]
    fn distillation_gradients_match_fd(s in sizes(), tau in 0.2f64..10.0, sum in any::<bool>()) {
        let mut g = rng(s.seed);
        let n = s.concepts();
        let sim = uniform(&mut g, s.batch, n);
        let y = labels(&mut g, s.batch, s.classes);
        let t_sim = uniform(&mut g, s.teacher_batch, n);
        let ty = labels(&mut g, s.teacher_batch, s.classes);
        let t_protos = class_prototypes(&t_sim, &ty, s.classes).unwrap();
        let reduction = if sum { GpdReduction::Sum } else { GpdReduction::Mean };

        let mut tape = Tape::new();
        let leaf = tape.leaf(sim.clone());
        let gpd = gpd_loss_tape(&mut tape, leaf, &y, &t_protos, reduction).unwrap();
        let analytic = tape.backward(gpd).unwrap().get_or_zeros(leaf, &sim);
        let numeric = finite_diff_grad(
            |m| gpd_loss_with(&t_protos, &class_prototypes(m, &y, s.classes).unwrap(), reduction).unwrap(),
            &sim,
            FD_STEP,
        );
        prop_assert!(relative_error(&analytic, &numeric, 1e-6) < GRAD_TOL);

        let mut tape = Tape::new();
        let leaf = tape.leaf(sim.clone());
        let (lcd, _) = lcd_loss_tape(&mut tape, leaf, &y, &t_sim, &ty, tau).unwrap();
        let analytic = tape.backward(lcd).unwrap().get_or_zeros(leaf, &sim);
        let numeric = finite_diff_grad(|m| lcd_loss(m, &y, &t_sim, &ty, tau).unwrap().loss, &sim, FD_STEP);
        prop_assert!(relative_error(&analytic, &numeric, 1e-6) < GRAD_TOL);
    }

    #[test]
    fn gpd_properties(s in sizes()) {
        let mut g = rng(s.seed);
        let n = s.concepts();
        let a = uniform(&mut g, s.batch, n);
        let ya = labels(&mut g, s.batch, s.classes);
        let b = uniform(&mut g, s.teacher_batch, n);
        let yb = labels(&mut g, s.teacher_batch, s.classes);
        let pa = class_prototypes(&a, &ya, s.classes).unwrap();
        let pb = class_prototypes(&b, &yb, s.classes).unwrap();
        let d = gpd_loss(&pa, &pb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, gpd_loss(&pb, &pa).unwrap());
        prop_assert_eq!(gpd_loss(&pa, &pa).unwrap(), 0.0);

        let perm = permutation(&mut g, s.batch);
        let shuffled = class_prototypes(&a.select_rows(&perm), &permute(&ya, &perm), s.classes).unwrap();
        prop_assert!((gpd_loss(&shuffled, &pb).unwrap() - d).abs() < 1e-10);
        let perm = permutation(&mut g, s.teacher_batch);
        let shuffled = class_prototypes(&b.select_rows(&perm), &permute(&yb, &perm), s.classes).unwrap();
        prop_assert!((gpd_loss(&pa, &shuffled).unwrap() - d).abs() < 1e-10);
    }

    #[test]
    fn lcd_is_order_and_name_free(s in sizes(), tau in 0.2f64..10.0) {
        let mut g = rng(s.seed);
        let n = s.concepts();
        let sim = uniform(&mut g, s.batch, n);
        let y = labels(&mut g, s.batch, s.classes);
        let t_sim = uniform(&mut g, s.teacher_batch, n);
        let ty = labels(&mut g, s.teacher_batch, s.classes);
        let base = lcd_loss(&sim, &y, &t_sim, &ty, tau).unwrap();

        let sp = permutation(&mut g, s.batch);
        let tp = permutation(&mut g, s.teacher_batch);
        let moved = lcd_loss(&sim.select_rows(&sp), &permute(&y, &sp), &t_sim.select_rows(&tp), &permute(&ty, &tp), tau).unwrap();
        prop_assert!((moved.loss - base.loss).abs() < 1e-10);
        prop_assert_eq!(moved.valid_anchors, base.valid_anchors);

        let rename = permutation(&mut g, s.classes);
        let y2: Vec<usize> = y.iter().map(|&c| rename[c]).collect();
        let ty2: Vec<usize> = ty.iter().map(|&c| rename[c]).collect();
        prop_assert_eq!(lcd_loss(&sim, &y2, &t_sim, &ty2, tau).unwrap(), base);
    }

    #[test]
    fn lcd_uniform_similarity_gives_log_k(row in prop::collection::vec(-2.0f64..2.0, 2..=12), b in 1usize..=8, bt in 1usize..=8, classes in 1usize..=5, seed in any::<u64>(), tau in 0.2f64..10.0) {
        prop_assume!(row.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(b + bt >= 3);
        let mut g = rng(seed);
        let sim = Matrix::from_rows(&vec![row.clone(); b]).unwrap();
        let t_sim = Matrix::from_rows(&vec![row; bt]).unwrap();
        let y = labels(&mut g, b, classes);
        let ty = labels(&mut g, bt, classes);
        let v = lcd_loss(&sim, &y, &t_sim, &ty, tau).unwrap();
        // every candidate set has b - 1 + bt members; each denominator drops one
        let k = (b + bt - 2) as f64;
        if v.valid_anchors > 0 {
            prop_assert!((v.loss - k.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn lcd_rewards_a_closer_positive(near in 0.0f64..3.0, gap in 0.01f64..0.5, negatives in prop::collection::vec(0.0f64..std::f64::consts::PI, 1..5), tau in 0.2f64..10.0) {
        let far = (near + gap).min(std::f64::consts::PI);
        prop_assume!(far > near + 1e-3);
        let unit = |t: f64| [t.cos(), t.sin()];
        let anchor = Matrix::from_rows(&[unit(0.0)]).unwrap();
        let loss_with = |angle: f64| {
            let mut rows = vec![unit(angle)];
            rows.extend(negatives.iter().map(|&t| unit(t)));
            let mut ty = vec![0];
            ty.extend(std::iter::repeat_n(1, negatives.len()));
            lcd_loss(&anchor, &[0], &Matrix::from_rows(&rows).unwrap(), &ty, tau).unwrap().loss
        };
        prop_assert!(loss_with(near) < loss_with(far));
    }

    #[test]
    fn objective_terms_combine_linearly(s in sizes(), alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let mut g = rng(s.seed);
        let concepts_t = pool(&mut g, s.classes, s.per_class, s.embed_dim).embeddings().transpose();
        let params = model(&mut g, &s.arch(), Modality::Student);
        let x = uniform(&mut g, s.batch, s.feature_dim);
        let y = labels(&mut g, s.batch, s.classes);
        let t_sim = uniform(&mut g, s.teacher_batch, s.concepts());
        let ty = labels(&mut g, s.teacher_batch, s.classes);
        let teacher = Some(TeacherBatch { sim: &t_sim, labels: &ty });
        let dc = DistillConfig { alpha, beta, ..DistillConfig::default() };
        let (_, _, l) = batch_objective(&mut Tape::new(), &params, &x, &y, &concepts_t, teacher, &dc).unwrap();
        prop_assert!((l.total - total_loss(l.cls, l.gpd, l.lcd, &dc)).abs() < 1e-12);
        let (_, _, off) = batch_objective(&mut Tape::new(), &params, &x, &y, &concepts_t, teacher, &DistillConfig::disabled()).unwrap();
        prop_assert_eq!(off.total, off.cls);
        prop_assert_eq!(off.cls, l.cls);
    }

    #[test]
    fn model_outputs_are_well_formed(s in sizes()) {
        let mut g = rng(s.seed);
        let p = pool(&mut g, s.classes, s.per_class, s.embed_dim);
        let params = model(&mut g, &s.arch(), Modality::Student);
        let other = model(&mut g, &s.arch(), Modality::Teacher);
        let x = uniform(&mut g, s.batch, s.feature_dim);
        let y = labels(&mut g, s.batch, s.classes);
        let sim = concept_similarity(&encode(&params, &x).unwrap(), &p).unwrap();
        prop_assert!(sim.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let pred = predict(&sim, &params).unwrap();
        let fused = fused_predict(&pred, &predict(&sim, &other).unwrap()).unwrap();
        for row in pred.probabilities.iter_rows().chain(fused.probabilities.iter_rows()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        prop_assert!(cross_entropy(&pred, &y).unwrap() > 0.0);

        // rows are processed independently, so a batch permutation is exact
        let perm = permutation(&mut g, s.batch);
        let concepts_t = p.embeddings().transpose();
        let (_, base) = params.forward(&x, &concepts_t).unwrap();
        let (_, shuffled) = params.forward(&x.select_rows(&perm), &concepts_t).unwrap();
        prop_assert_eq!(shuffled.probabilities, base.probabilities.select_rows(&perm));
    }

    #[test]
    fn concept_order_is_immaterial(s in sizes()) {
        let mut g = rng(s.seed);
        let p = pool(&mut g, s.classes, s.per_class, s.embed_dim);
        let params = model(&mut g, &s.arch(), Modality::Student);
        let x = uniform(&mut g, s.batch, s.feature_dim);
        let perm = permutation(&mut g, p.len());
        let mut moved = params.clone();
        moved.classifier.weight = params.classifier.weight.select_rows(&perm);
        let (_, a) = params.forward(&x, &p.embeddings().transpose()).unwrap();
        let reordered = ConceptPool::new(p.dim(), permute_refs(p.concepts(), &perm)).unwrap();
        let (_, b) = moved.forward(&x, &reordered.embeddings().transpose()).unwrap();
        prop_assert!(relative_error(&a.probabilities, &b.probabilities, 1e-12) < 1e-12);
    }
}
