//! Unpaired two-modality synthetic data with teacher-dominant concepts.
//!
//! Every class activates its own `k` concepts. Features are a linear mix of the
//! active concepts plus Gaussian noise, with one mixing matrix per modality.
//! A fraction `teacher_dominance` of each class's concepts keeps full strength
//! in the teacher mix but is attenuated in the student mix, so the student
//! modality only carries a weak correlate of those concepts.
//!
//! On disk a dataset is a directory with `meta.json` plus `train.jsonl`,
//! `val.jsonl` and `test.jsonl`, one record per line.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::concept_pool::{Concept, ConceptPool};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numerics::Matrix;
use crate::seeded_rng;

pub const DEFAULT_CLASS_NAMES: [&str; 9] = ["Normal", "dAMD", "CSC", "DR", "GLC", "MEM", "MYO", "RVO", "wAMD"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-class sample counts for each split of one modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityCounts {
    pub student: SplitCounts,
    pub teacher: SplitCounts,
}

impl ModalityCounts {
    pub fn get(&self, modality: Modality) -> &SplitCounts {
        match modality {
            Modality::Student => &self.student,
            Modality::Teacher => &self.teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub class_names: Vec<String>,
    pub concepts_per_class: usize,
    /// Dimension of the concept (text) embeddings.
    pub embed_dim: usize,
    /// Feature dimension of each modality.
    pub feature_dim: usize,
    pub counts: ModalityCounts,
    pub teacher_dominance: f64,
    /// Student-side scale of teacher-dominant concepts.
    pub attenuation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // Imbalanced like the real data, and the student's rare classes are
        // better represented on the teacher side.
        GeneratorConfig {
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            concepts_per_class: 10,
            embed_dim: 16,
            feature_dim: 64,
            counts: ModalityCounts {
                student: SplitCounts {
                    train: vec![1200, 300, 25, 500, 60, 20, 40, 30, 40],
                    val: vec![120, 40, 30, 80, 30, 30, 30, 30, 30],
                    test: vec![240, 80, 40, 160, 60, 40, 50, 50, 50],
                },
                teacher: SplitCounts {
                    train: vec![600, 120, 250, 500, 60, 250, 80, 200, 160],
                    val: vec![120, 40, 40, 80, 30, 40, 30, 40, 30],
                    test: vec![240, 80, 40, 160, 60, 40, 50, 50, 50],
                },
            },
            teacher_dominance: 0.6,
            attenuation: 0.1,
            noise_sigma: 0.7,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidConfig(format!("{field}: {why}")));
        let c = self.class_names.len();
        if c < 2 {
            return bad("class_names", format!("need at least 2 classes, got {c}"));
        }
        if self.concepts_per_class == 0 {
            return bad("concepts_per_class", "must be at least 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.teacher_dominance) {
            return bad(
                "teacher_dominance",
                format!("{} is outside [0, 1]", self.teacher_dominance),
            );
        }
        if !(0.0..=1.0).contains(&self.attenuation) {
            return bad("attenuation", format!("{} is outside [0, 1]", self.attenuation));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(
                "noise_sigma",
                format!("{} must be a finite non-negative number", self.noise_sigma),
            );
        }
        for modality in [Modality::Student, Modality::Teacher] {
            for split in Split::ALL {
                let counts = self.counts.get(modality).get(split);
                if counts.len() != c {
                    return bad(
                        &format!("counts.{}.{}", modality.name(), split.name()),
                        format!("has {} entries for {c} classes", counts.len()),
                    );
                }
            }
            if self.counts.get(modality).train.iter().sum::<usize>() == 0 {
                return bad(&format!("counts.{}.train", modality.name()), "is empty".into());
            }
        }
        Ok(())
    }
}

/// Everything the generator drew, sufficient to regenerate the records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// C x N binary activation profiles.
    pub class_profiles: Matrix,
    /// Canonical indices of the teacher-dominant concepts.
    pub teacher_dominant: Vec<usize>,
    /// N x F mixing matrix of the student modality.
    pub mixing_student: Matrix,
    /// N x F mixing matrix of the teacher modality.
    pub mixing_teacher: Matrix,
}

impl GroundTruth {
    pub fn mixing(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Student => &self.mixing_student,
            Modality::Teacher => &self.mixing_teacher,
        }
    }

    /// Noise-free feature mean of `class` in `modality`.
    pub fn class_mean(&self, modality: Modality, class: usize) -> Matrix {
        let profile = Matrix::row_vector(self.class_profiles.row(class));
        profile.matmul(self.mixing(modality)).expect("ground-truth shapes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: Option<String>,
    pub modality: Modality,
    pub features: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    modality: Modality,
    features: Vec<f64>,
    label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.meta.class_names
    }

    pub fn records(&self, modality: Modality, split: Split) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.modality == modality && r.split == split)
            .collect()
    }

    /// Feature matrix and labels of a modality's split, in record order.
    pub fn split_arrays(&self, modality: Modality, split: Split) -> (Matrix, Vec<usize>) {
        records_to_arrays(&self.records(modality, split), self.meta.feature_dim)
    }

    /// Pairs student and teacher records of `split` by class, in record order,
    /// truncating each class to the smaller side.
    pub fn pair_by_class(&self, split: Split) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
        let students = self.records(Modality::Student, split);
        let teachers = self.records(Modality::Teacher, split);
        let mut s_out = Vec::new();
        let mut t_out = Vec::new();
        for class in 0..self.num_classes() {
            let s: Vec<_> = students.iter().filter(|r| r.label == class).collect();
            let t: Vec<_> = teachers.iter().filter(|r| r.label == class).collect();
            for (a, b) in s.iter().zip(&t) {
                s_out.push(**a);
                t_out.push(**b);
            }
        }
        (s_out, t_out)
    }
}

pub fn records_to_arrays(records: &[&SampleRecord], feature_dim: usize) -> (Matrix, Vec<usize>) {
    let data = records.iter().flat_map(|r| r.features.iter().copied()).collect();
    let x = Matrix::new(records.len(), feature_dim, data).expect("validated feature width");
    (x, records.iter().map(|r| r.label).collect())
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Matrix::new(rows, cols, data).expect("sized")
}

/// Draws a dataset and its concept pool from `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<(SyntheticDataset, ConceptPool)> {
    cfg.validate()?;
    let c = cfg.num_classes();
    let k = cfg.concepts_per_class;
    let n = c * k;
    let f = cfg.feature_dim;

    let mut rng = seeded_rng(cfg.seed, 10);
    let embeddings = gaussian_matrix(n, cfg.embed_dim, 1.0, &mut rng);
    let concepts = (0..n)
        .map(|i| {
            let class = &cfg.class_names[i / k];
            Concept {
                id: format!("{class}/{:02}", i % k),
                class_hint: class.clone(),
                text: format!("synthetic finding {} of {class}", i % k),
                embedding: embeddings.row(i).to_vec(),
            }
        })
        .collect();
    let pool = ConceptPool::new(cfg.embed_dim, concepts)?;

    let mut profiles = Matrix::zeros(c, n);
    for d in 0..c {
        for j in 0..k {
            profiles.set(d, d * k + j, 1.0);
        }
    }

    let n_dominant = (cfg.teacher_dominance * k as f64).round() as usize;
    let mut rng = seeded_rng(cfg.seed, 13);
    let mut teacher_dominant = Vec::with_capacity(n_dominant * c);
    for d in 0..c {
        let mut picked = sample(&mut rng, k, n_dominant).into_vec();
        picked.sort_unstable();
        teacher_dominant.extend(picked.into_iter().map(|j| d * k + j));
    }

    let row_scale = 1.0 / (f as f64).sqrt();
    let mixing_teacher = gaussian_matrix(n, f, row_scale, &mut seeded_rng(cfg.seed, 12));
    let mut mixing_student = gaussian_matrix(n, f, row_scale, &mut seeded_rng(cfg.seed, 11));
    for &i in &teacher_dominant {
        mixing_student.row_mut(i).iter_mut().for_each(|v| *v *= cfg.attenuation);
    }

    let truth = GroundTruth {
        class_profiles: profiles,
        teacher_dominant,
        mixing_student,
        mixing_teacher,
    };

    let mut records = Vec::new();
    // Split-major order, matching how the files are read back.
    let mut rngs = [Modality::Student, Modality::Teacher].map(|m| (m, seeded_rng(cfg.seed, 20 + m.stream())));
    for split in Split::ALL {
        for (modality, rng) in rngs.iter_mut() {
            let (modality, rng) = (*modality, rng);
            for (class, &count) in cfg.counts.get(modality).get(split).iter().enumerate() {
                let mean = truth.class_mean(modality, class);
                for i in 0..count {
                    let features = mean
                        .data()
                        .iter()
                        .map(|&m| m + cfg.noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>();
                    records.push(SampleRecord {
                        id: Some(format!("{}-{}-{class}-{i}", modality.name(), split.name())),
                        modality,
                        features,
                        label: class,
                        split,
                    });
                }
            }
        }
    }

    let dataset = SyntheticDataset {
        meta: DatasetMeta {
            class_names: cfg.class_names.clone(),
            feature_dim: f,
            generator: Some(cfg.clone()),
            ground_truth: Some(truth),
        },
        records,
    };
    Ok((dataset, pool))
}

pub fn write_dataset(ds: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&ds.meta)? + "\n")?;
    for split in Split::ALL {
        let file = fs::File::create(dir.join(format!("{}.jsonl", split.name())))?;
        let mut w = BufWriter::new(file);
        for r in ds.records.iter().filter(|r| r.split == split) {
            let line = RecordLine {
                id: r.id.clone(),
                modality: r.modality,
                features: r.features.clone(),
                label: r.label,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if meta.class_names.is_empty() {
        return Err(Error::Schema {
            path: meta_path,
            message: "class_names is empty".into(),
        });
    }

    let mut records = Vec::new();
    let mut seen: HashMap<String, Split> = HashMap::new();
    for split in Split::ALL {
        let path = dir.join(format!("{}.jsonl", split.name()));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let reader = BufReader::new(fs::File::open(&path)?);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            let schema = |message: String| Error::Schema {
                path: path.clone(),
                message: format!("line {}: {message}", idx + 1),
            };
            if parsed.features.len() != meta.feature_dim {
                return Err(schema(format!(
                    "{} features, expected {}",
                    parsed.features.len(),
                    meta.feature_dim
                )));
            }
            if parsed.label >= meta.class_names.len() {
                return Err(schema(format!("label {} out of range", parsed.label)));
            }
            if parsed.features.iter().any(|v| !v.is_finite()) {
                return Err(schema("non-finite feature".into()));
            }
            if let Some(id) = &parsed.id {
                if let Some(&first) = seen.get(id) {
                    if first != split {
                        return Err(Error::SplitOverlap {
                            id: id.clone(),
                            first: first.name().into(),
                            second: split.name().into(),
                        });
                    }
                    return Err(schema(format!("duplicate record id {id:?}")));
                }
                seen.insert(id.clone(), split);
            }
            records.push(SampleRecord {
                id: parsed.id,
                modality: parsed.modality,
                features: parsed.features,
                label: parsed.label,
                split,
            });
        }
    }
    Ok(SyntheticDataset { meta, records })
}
