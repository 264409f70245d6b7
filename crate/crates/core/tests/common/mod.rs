//! Random instances shared by the property tests.
#![allow(dead_code)]

use codistill::concept_pool::Concept;
use codistill::model::Architecture;
use codistill::numerics::{finite_diff_grad, relative_error};
use codistill::{ConceptPool, Matrix, Modality, ModelParams, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries drawn uniformly from [-2, 2].
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

pub fn labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

pub fn pool(rng: &mut impl Rng, classes: usize, per_class: usize, dim: usize) -> ConceptPool {
    let mut concepts = Vec::new();
    for c in 0..classes {
        for j in 0..per_class {
            concepts.push(Concept {
                id: format!("c{c}-{j}"),
                class_hint: format!("c{c}"),
                text: format!("concept {j} of class {c}"),
                embedding: uniform(rng, 1, dim).into_data(),
            });
        }
    }
    ConceptPool::new(dim, concepts).unwrap()
}

/// Randomly initialized model with non-zero biases.
pub fn model(rng: &mut impl Rng, arch: &Architecture, modality: Modality) -> ModelParams {
    let mut p = ModelParams::init(arch, modality, rng.random()).unwrap();
    for t in p.tensors_mut() {
        if t.rows() == 1 {
            *t = uniform(rng, 1, t.cols()).map(|v| 0.25 * v);
        }
    }
    p
}

/// Relative error between tape gradients of `build` and central differences
/// of the same scalar, for each parameter tensor of `params`.
pub fn param_grad_errors(params: &ModelParams, build: impl Fn(&mut Tape, &ModelParams) -> (Var, Vec<Var>)) -> Vec<f64> {
    let mut tape = Tape::new();
    let (loss, slots) = build(&mut tape, params);
    let grads = tape.backward(loss).unwrap();
    let value = |p: &ModelParams| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, p);
        t.value(l).data()[0]
    };
    params
        .tensors()
        .iter()
        .enumerate()
        .map(|(k, tensor)| {
            let analytic = grads.get_or_zeros(slots[k], tensor);
            let numeric = finite_diff_grad(
                |m| {
                    let mut probe = params.clone();
                    *probe.tensors_mut()[k] = m.clone();
                    value(&probe)
                },
                tensor,
                FD_STEP,
            );
            relative_error(&analytic, &numeric, 1e-6)
        })
        .collect()
}
