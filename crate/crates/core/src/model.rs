//! Concept-decoupled classifier for one modality.
//!
//! features → (tanh hidden layers) → affine projection → unit embedding
//! → cosine similarity with every concept → linear concept classifier → softmax.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concept_pool::ConceptPool;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, softmax_rows, Matrix, Tape, Var, NORM_EPS};
use crate::seeded_rng;

/// Clamp inside the log of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Student,
    Teacher,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Student => "student",
            Modality::Teacher => "teacher",
        }
    }

    /// Display alias used in reports.
    pub fn alias(self) -> &'static str {
        match self {
            Modality::Student => "fundus",
            Modality::Teacher => "oct",
        }
    }

    pub(crate) fn stream(self) -> u64 {
        match self {
            Modality::Student => 1,
            Modality::Teacher => 2,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" | "fundus" => Ok(Modality::Student),
            "teacher" | "oct" => Ok(Modality::Teacher),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// Affine layer `x W + b`, with `W` stored in x in-by-out orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut impl rand::Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Dense {
            weight: Matrix::new(inputs, outputs, data).expect("sized"),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.weight)?.add_row_broadcast(&self.bias)
    }
}

/// Layer sizes of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: Vec<Dense>,
    pub encoder: Dense,
    pub classifier: Dense,
    pub modality: Modality,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Matrix,
    pub predicted_class: Vec<usize>,
}

impl Prediction {
    pub fn from_probabilities(probabilities: Matrix) -> Self {
        let predicted_class = probabilities.argmax_rows();
        Prediction {
            probabilities,
            predicted_class,
        }
    }
}

/// Tape slots created by [`ModelParams::forward_tape`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One slot per parameter matrix, in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    pub embeddings: Var,
    pub similarity: Var,
    pub logits: Var,
    pub probabilities: Var,
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases, drawn from a stream of `seed`
    /// private to `modality`.
    pub fn init(arch: &Architecture, modality: Modality, seed: u64) -> Result<Self> {
        if arch.feature_dim == 0 || arch.embed_dim == 0 || arch.num_concepts == 0 || arch.num_classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {arch:?}")));
        }
        if arch.hidden.len() > 2 {
            return Err(Error::InvalidArgument("at most two hidden layers are supported".into()));
        }
        let mut rng = seeded_rng(seed, 0x100 + modality.stream());
        let mut hidden = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.feature_dim;
        for &h in &arch.hidden {
            hidden.push(Dense::xavier(width, h, &mut rng));
            width = h;
        }
        let encoder = Dense::xavier(width, arch.embed_dim, &mut rng);
        let classifier = Dense::xavier(arch.num_concepts, arch.num_classes, &mut rng);
        Ok(ModelParams {
            hidden,
            encoder,
            classifier,
            modality,
            frozen: false,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            feature_dim: self.hidden.first().unwrap_or(&self.encoder).inputs(),
            hidden: self.hidden.iter().map(Dense::outputs).collect(),
            embed_dim: self.encoder.outputs(),
            num_concepts: self.classifier.inputs(),
            num_classes: self.classifier.outputs(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture().feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn num_concepts(&self) -> usize {
        self.classifier.inputs()
    }

    /// Parameter matrices in a fixed order: hidden layers, encoder, classifier
    /// (weight then bias for each).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for layer in self.hidden.iter().chain([&self.encoder, &self.classifier]) {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 4);
        for layer in self.hidden.iter_mut().chain([&mut self.encoder, &mut self.classifier]) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    /// Names matching [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("hidden{i}.weight"));
            out.push(format!("hidden{i}.bias"));
        }
        for name in ["encoder", "classifier"] {
            out.push(format!("{name}.weight"));
            out.push(format!("{name}.bias"));
        }
        out
    }

    /// Hex SHA-256 of every parameter's shape and bit pattern.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update([self.frozen as u8]);
        hex::encode(h.finalize())
    }

    pub fn check_pool(&self, pool: &ConceptPool) -> Result<()> {
        if pool.len() != self.num_concepts() || pool.dim() != self.encoder.outputs() {
            return Err(Error::shape(
                "model/pool",
                (self.num_concepts(), self.encoder.outputs()),
                (pool.len(), pool.dim()),
            ));
        }
        Ok(())
    }

    /// Full inference pass using the same arithmetic as [`ModelParams::forward_tape`].
    pub fn forward(&self, features: &Matrix, concepts_t: &Matrix) -> Result<(Matrix, Prediction)> {
        let emb = encode(self, features)?;
        let sim = matmul(&emb, concepts_t)?;
        let pred = predict(&sim, self)?;
        Ok((sim, pred))
    }

    /// Records the forward pass on `tape`. Parameters become trainable leaves
    /// unless the model is frozen.
    pub fn forward_tape(&self, tape: &mut Tape, features: &Matrix, concepts_t: &Matrix) -> Result<ForwardVars> {
        check_features(self, features)?;
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if self.frozen {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        let mut x = tape.constant(features.clone());
        let mut slot = 0;
        for _ in &self.hidden {
            let z = tape.matmul(x, params[slot])?;
            let z = tape.add_row(z, params[slot + 1])?;
            x = tape.tanh(z);
            slot += 2;
        }
        let z = tape.matmul(x, params[slot])?;
        let z = tape.add_row(z, params[slot + 1])?;
        let embeddings = tape.l2_normalize_rows(z, NORM_EPS);
        let t = tape.constant(concepts_t.clone());
        let similarity = tape.matmul(embeddings, t)?;
        let logits = tape.matmul(similarity, params[slot + 2])?;
        let logits = tape.add_row(logits, params[slot + 3])?;
        let probabilities = tape.softmax_rows(logits);
        Ok(ForwardVars {
            params,
            embeddings,
            similarity,
            logits,
            probabilities,
        })
    }
}

fn check_features(params: &ModelParams, features: &Matrix) -> Result<()> {
    let expected = params.feature_dim();
    if features.cols() != expected {
        return Err(Error::shape(
            "encode",
            features.shape(),
            (expected, params.encoder.outputs()),
        ));
    }
    Ok(())
}

/// Projects features to unit-norm embeddings.
pub fn encode(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    check_features(params, features)?;
    let mut x = features.clone();
    for layer in &params.hidden {
        x = layer.apply(&x)?.map(f64::tanh);
    }
    Ok(l2_normalize_rows(&params.encoder.apply(&x)?, NORM_EPS))
}

/// Cosine similarity of every embedding row with every concept.
pub fn concept_similarity(embeddings: &Matrix, pool: &ConceptPool) -> Result<Matrix> {
    if embeddings.cols() != pool.dim() {
        return Err(Error::shape(
            "concept_similarity",
            embeddings.shape(),
            (pool.len(), pool.dim()),
        ));
    }
    let unit = l2_normalize_rows(embeddings, NORM_EPS);
    matmul(&unit, &pool.embeddings().transpose())
}

/// Softmax of the linear concept classifier applied to similarity rows.
pub fn predict(similarity: &Matrix, params: &ModelParams) -> Result<Prediction> {
    if similarity.cols() != params.num_concepts() {
        return Err(Error::shape(
            "predict",
            similarity.shape(),
            params.classifier.weight.shape(),
        ));
    }
    let logits = params.classifier.apply(similarity)?;
    Ok(Prediction::from_probabilities(softmax_rows(&logits)))
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy(pred: &Prediction, labels: &[usize]) -> Result<f64> {
    let p = &pred.probabilities;
    if labels.len() != p.rows() {
        return Err(Error::shape("cross_entropy", p.shape(), (labels.len(), 1)));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= p.cols() {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: p.cols(),
            });
        }
        total += -p.get(r, l).max(CE_EPS).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Averages two models' probability rows and re-takes the argmax.
pub fn fused_predict(student: &Prediction, teacher: &Prediction) -> Result<Prediction> {
    let mean = student
        .probabilities
        .zip_map(&teacher.probabilities, "fused_predict", |a, b| 0.5 * (a + b))?;
    Ok(Prediction::from_probabilities(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_pool::Concept;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn arch(f: usize, d: usize, n: usize, c: usize, hidden: Vec<usize>) -> Architecture {
        Architecture {
            feature_dim: f,
            hidden,
            embed_dim: d,
            num_concepts: n,
            num_classes: c,
        }
    }

    fn planar_pool() -> ConceptPool {
        let concepts = [[1.0, 0.0], [0.0, 1.0]]
            .iter()
            .enumerate()
            .map(|(i, e)| Concept {
                id: format!("c{i}"),
                class_hint: "k".into(),
                text: String::new(),
                embedding: e.to_vec(),
            })
            .collect();
        ConceptPool::new(2, concepts).unwrap()
    }

    #[test]
    fn encode_zero_weights_gives_zero_rows() {
        let mut p = ModelParams::init(&arch(3, 2, 2, 2, vec![]), Modality::Student, 0).unwrap();
        p.encoder = Dense::zeros(3, 2);
        let out = encode(&p, &Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out, Matrix::zeros(1, 2));
    }

    #[test]
    fn encode_identity_on_unit_features() {
        let mut p = ModelParams::init(&arch(2, 2, 2, 2, vec![]), Modality::Student, 0).unwrap();
        p.encoder = Dense {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        let x = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        assert_eq!(encode(&p, &x).unwrap(), x);
    }

    #[test]
    fn encode_regression_fixture() {
        let mut p = ModelParams::init(&arch(3, 2, 2, 2, vec![]), Modality::Student, 0).unwrap();
        p.encoder = Dense {
            weight: Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]]).unwrap(),
            bias: Matrix::from_rows(&[[0.1, -0.2]]).unwrap(),
        };
        let x = Matrix::from_rows(&[[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]).unwrap();
        let out = encode(&p, &x).unwrap();
        // xW+b, expanded by hand, then row-normalized.
        let expected: [[f64; 2]; 2] = [[-2.675, 0.25], [1.825, -1.95]];
        for (r, row) in expected.iter().enumerate() {
            let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
            for (c, v) in row.iter().enumerate() {
                assert!((out.get(r, c) - v / n).abs() < 1e-12);
            }
        }
        assert!(encode(&p, &Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn similarity_examples() {
        let pool = planar_pool();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let emb = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0], [h, h]]).unwrap();
        let s = concept_similarity(&emb, &pool).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert!((s.get(2, 0) - h).abs() < 1e-15);
        assert!(concept_similarity(&Matrix::zeros(1, 3), &pool).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut p = ModelParams::init(&arch(2, 2, 3, 4, vec![]), Modality::Student, 0).unwrap();
        p.classifier = Dense::zeros(3, 4);
        let sim = Matrix::from_rows(&[[0.2, -0.3, 0.9]]).unwrap();
        let pred = predict(&sim, &p).unwrap();
        assert!(pred.probabilities.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        p.classifier.weight.set(1, 2, 20.0);
        let pred = predict(&Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap(), &p).unwrap();
        assert!(pred.probabilities.get(0, 2) > 0.99);
        assert_eq!(pred.predicted_class, vec![2]);
        assert!(predict(&Matrix::zeros(1, 2), &p).is_err());
    }

    #[test]
    fn predict_joint_permutation() {
        let p = ModelParams::init(&arch(2, 2, 3, 4, vec![]), Modality::Student, 5).unwrap();
        let sim = Matrix::from_rows(&[[0.2, -0.3, 0.9], [0.5, 0.1, -0.7]]).unwrap();
        let perm = [2, 0, 1];
        let mut q = p.clone();
        q.classifier.weight = p.classifier.weight.select_rows(&perm);
        let sim_perm = sim.transpose().select_rows(&perm).transpose();
        let a = predict(&sim, &p).unwrap();
        let b = predict(&sim_perm, &q).unwrap();
        assert!(relative_error(&a.probabilities, &b.probabilities, 1e-12) < 1e-14);
        assert_eq!(a.predicted_class, b.predicted_class);
    }

    #[test]
    fn cross_entropy_examples() {
        let pred = |rows: &[[f64; 2]]| Prediction::from_probabilities(Matrix::from_rows(rows).unwrap());
        assert_eq!(cross_entropy(&pred(&[[1.0, 0.0]]), &[0]).unwrap(), 0.0);
        assert!((cross_entropy(&pred(&[[0.5, 0.5]]), &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&pred(&[[0.7, 0.3], [0.4, 0.6]]), &[0, 1]).unwrap();
        assert!((v - 0.4338).abs() < 1e-4);
        assert!((v + (0.7f64.ln() + 0.6f64.ln()) / 2.0).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&pred(&[[0.5, 0.5]]), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
        // clamp keeps the loss finite
        assert!(cross_entropy(&pred(&[[1.0, 0.0]]), &[1]).unwrap().is_finite());
    }

    #[test]
    fn fusion_examples() {
        let pred = |rows: &[[f64; 2]]| Prediction::from_probabilities(Matrix::from_rows(rows).unwrap());
        let a = pred(&[[0.6, 0.4]]);
        assert_eq!(fused_predict(&a, &a).unwrap(), a);
        let tie = fused_predict(&pred(&[[1.0, 0.0]]), &pred(&[[0.0, 1.0]])).unwrap();
        assert_eq!(tie.probabilities.row(0), &[0.5, 0.5]);
        assert_eq!(tie.predicted_class, vec![0]);
        let f = fused_predict(&a, &pred(&[[0.2, 0.8]])).unwrap();
        assert!((f.probabilities.get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(f.predicted_class, vec![1]);
        assert!(fused_predict(&a, &pred(&[[0.2, 0.8], [0.5, 0.5]])).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = ModelParams::init(&arch(4, 3, 5, 3, vec![6]), Modality::Student, 9).unwrap();
        let concepts_t = Matrix::from_rows(&[
            [0.1, 0.5, -0.3, 0.8, 0.0],
            [0.9, -0.2, 0.4, 0.1, 0.6],
            [0.3, 0.3, 0.3, -0.5, 0.7],
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, -0.3, 1.0], [2.0, -1.0, 0.5, 0.0]]).unwrap();
        let (sim, pred) = p.forward(&x, &concepts_t).unwrap();
        let mut tape = Tape::new();
        let vars = p.forward_tape(&mut tape, &x, &concepts_t).unwrap();
        assert_eq!(tape.value(vars.similarity), &sim);
        assert_eq!(tape.value(vars.probabilities), &pred.probabilities);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let p = ModelParams::init(&arch(3, 2, 4, 3, vec![]), Modality::Student, 2).unwrap();
        let concepts_t = Matrix::from_rows(&[[1.0, 0.0, 0.6, -0.8], [0.0, 1.0, 0.8, 0.6]]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 0.2], [1.5, 0.3, -0.4], [0.0, 0.7, 0.9]]).unwrap();
        let labels = [0, 2, 1];
        let mut tape = Tape::new();
        let vars = p.forward_tape(&mut tape, &x, &concepts_t).unwrap();
        let loss = tape.nll(vars.probabilities, &labels, CE_EPS).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (slot, &var) in vars.params.iter().enumerate() {
            let f = |m: &Matrix| {
                let mut q = p.clone();
                *q.tensors_mut()[slot] = m.clone();
                let (_, pred) = q.forward(&x, &concepts_t).unwrap();
                cross_entropy(&pred, &labels).unwrap()
            };
            let fd = finite_diff_grad(f, p.tensors()[slot], 1e-6);
            let err = relative_error(grads.get(var).unwrap(), &fd, 1e-10);
            assert!(err < 1e-6, "slot {slot}: {err}");
        }
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut p = ModelParams::init(&arch(3, 2, 2, 2, vec![]), Modality::Teacher, 0).unwrap();
        p.frozen = true;
        let mut tape = Tape::new();
        let vars = p
            .forward_tape(&mut tape, &Matrix::zeros(1, 3), &Matrix::identity(2))
            .unwrap();
        assert!(vars.params.iter().all(|&v| !tape.is_tracked(v)));
    }

    #[test]
    fn hash_changes_with_params() {
        let p = ModelParams::init(&arch(3, 2, 2, 2, vec![]), Modality::Student, 0).unwrap();
        let mut q = p.clone();
        assert_eq!(p.hash(), q.hash());
        q.classifier.bias.set(0, 0, 1e-300);
        assert_ne!(p.hash(), q.hash());
    }
}
