use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codistill::checkpoint::{save_params, Checkpoint};
use codistill::concept_pool::{select, SelectionParams, SubmodularWeights};
use codistill::metrics::{macro_report, render_class_table, render_summary_table, MetricsReport};
use codistill::model::{encode, fused_predict};
use codistill::synthdata::{generate, read_dataset, records_to_arrays, write_dataset};
use codistill::training::{distill_student, pretrain_teacher, TrainOutcome};
use codistill::{
    ConceptPool, GeneratorConfig, Modality, ModelParams, SelectionMethod, Split, SyntheticDataset, TrainConfig,
};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::ablate::{run_ablation, AblateArgs};
use crate::manifest::Manifest;

pub const POOL_FILE: &str = "pool.json";
pub const TEACHER_FILE: &str = "teacher.json";
pub const STUDENT_FILE: &str = "student.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SELECTION_FILE: &str = "selection.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Dataset,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    pub config: GeneratorConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    pub data: PathBuf,
    pub pool: PathBuf,
    pub config: TrainConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillArgs {
    pub data: PathBuf,
    pub pool: PathBuf,
    pub teacher: PathBuf,
    pub config: TrainConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Average student and teacher probabilities over class-paired records.
    pub fuse: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            fuse: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    pub data: PathBuf,
    pub pool: PathBuf,
    pub checkpoint: PathBuf,
    pub teacher: Option<PathBuf>,
    pub config: EvalConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub method: SelectionMethod,
    pub k: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub weights: SubmodularWeights,
}

impl Default for SelectConfig {
    fn default() -> Self {
        let p = SelectionParams::default();
        SelectConfig {
            method: SelectionMethod::None,
            k: 5,
            seed: p.seed,
            kmeans_max_iters: p.kmeans_max_iters,
            weights: p.weights,
        }
    }
}

/// Where the image embeddings for the image-driven selectors come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    /// JSON array of embedding rows, already in the concept space.
    Embeddings { path: PathBuf },
    /// Training features of a dataset encoded by a checkpoint's encoder.
    Encoded { data: PathBuf, encoder: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectArgs {
    pub pool: PathBuf,
    pub images: Option<ImageSource>,
    pub config: SelectConfig,
    pub out: PathBuf,
}

/// A fully resolved command, as recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)] // built once per process
pub enum Invocation {
    GenData(GenDataArgs),
    Pretrain(PretrainArgs),
    Distill(DistillArgs),
    Eval(EvalArgs),
    SelectConcepts(SelectArgs),
    Ablate(AblateArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenData(_) => "gen-data",
            Invocation::Pretrain(_) => "pretrain",
            Invocation::Distill(_) => "distill",
            Invocation::Eval(_) => "eval",
            Invocation::SelectConcepts(_) => "select-concepts",
            Invocation::Ablate(_) => "ablate",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::GenData(a) => &a.out,
            Invocation::Pretrain(a) => &a.out,
            Invocation::Distill(a) => &a.out,
            Invocation::Eval(a) => &a.out,
            Invocation::SelectConcepts(a) => &a.out,
            Invocation::Ablate(a) => &a.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Invocation::GenData(a) => a.out = out,
            Invocation::Pretrain(a) => a.out = out,
            Invocation::Distill(a) => a.out = out,
            Invocation::Eval(a) => a.out = out,
            Invocation::SelectConcepts(a) => a.out = out,
            Invocation::Ablate(a) => a.out = out,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::GenData(a) => Some(a.config.seed),
            Invocation::Pretrain(a) => Some(a.config.seed),
            Invocation::Distill(a) => Some(a.config.seed),
            Invocation::Eval(_) => None,
            Invocation::SelectConcepts(a) => Some(a.config.seed),
            Invocation::Ablate(_) => None,
        }
    }

    pub fn inputs(&self) -> Vec<(&'static str, InputKind, PathBuf)> {
        use InputKind::*;
        match self {
            Invocation::GenData(_) | Invocation::Ablate(_) => vec![],
            Invocation::Pretrain(a) => vec![("data", Dataset, a.data.clone()), ("pool", File, a.pool.clone())],
            Invocation::Distill(a) => vec![
                ("data", Dataset, a.data.clone()),
                ("pool", File, a.pool.clone()),
                ("teacher", File, a.teacher.clone()),
            ],
            Invocation::Eval(a) => {
                let mut v = vec![
                    ("data", Dataset, a.data.clone()),
                    ("pool", File, a.pool.clone()),
                    ("checkpoint", File, a.checkpoint.clone()),
                ];
                if let Some(t) = &a.teacher {
                    v.push(("teacher", File, t.clone()));
                }
                v
            }
            Invocation::SelectConcepts(a) => {
                let mut v = vec![("pool", File, a.pool.clone())];
                match &a.images {
                    Some(ImageSource::Embeddings { path }) => v.push(("images", File, path.clone())),
                    Some(ImageSource::Encoded { data, encoder }) => {
                        v.push(("data", Dataset, data.clone()));
                        v.push(("encoder", File, encoder.clone()));
                    }
                    None => {}
                }
                v
            }
        }
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        let out = self.out();
        let names: &[&str] = match self {
            Invocation::GenData(_) => &["meta.json", "train.jsonl", "val.jsonl", "test.jsonl", POOL_FILE],
            Invocation::Pretrain(_) => &[TEACHER_FILE, LOG_FILE],
            Invocation::Distill(_) => &[STUDENT_FILE, LOG_FILE],
            Invocation::Eval(_) => &[REPORT_JSON, REPORT_TXT],
            Invocation::SelectConcepts(_) => &[POOL_FILE, SELECTION_FILE],
            Invocation::Ablate(_) => &[crate::ablate::TABLE_JSON, crate::ablate::TABLE_TXT],
        };
        names.iter().map(|n| out.join(n)).collect()
    }

    /// Makes every path absolute so the manifest does not depend on the
    /// working directory.
    pub fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = crate::absolute(p)?;
            Ok(())
        };
        match self {
            Invocation::GenData(a) => abs(&mut a.out),
            Invocation::Pretrain(a) => {
                abs(&mut a.data)?;
                abs(&mut a.pool)?;
                abs(&mut a.out)
            }
            Invocation::Distill(a) => {
                abs(&mut a.data)?;
                abs(&mut a.pool)?;
                abs(&mut a.teacher)?;
                abs(&mut a.out)
            }
            Invocation::Eval(a) => {
                abs(&mut a.data)?;
                abs(&mut a.pool)?;
                abs(&mut a.checkpoint)?;
                if let Some(t) = &mut a.teacher {
                    abs(t)?;
                }
                abs(&mut a.out)
            }
            Invocation::SelectConcepts(a) => {
                abs(&mut a.pool)?;
                match &mut a.images {
                    Some(ImageSource::Embeddings { path }) => abs(path)?,
                    Some(ImageSource::Encoded { data, encoder }) => {
                        abs(data)?;
                        abs(encoder)?;
                    }
                    None => {}
                }
                abs(&mut a.out)
            }
            Invocation::Ablate(a) => abs(&mut a.out),
        }
    }

    /// Validates, writes the manifest, then runs the command.
    pub fn execute(mut self) -> Result<Manifest> {
        self.absolutize()?;
        self.validate()?;
        let manifest = Manifest::new(&self)?;
        manifest.write(self.out())?;
        match &self {
            Invocation::GenData(a) => gen_data(a)?,
            Invocation::Pretrain(a) => pretrain(a)?,
            Invocation::Distill(a) => distill(a)?,
            Invocation::Eval(a) => eval(a)?,
            Invocation::SelectConcepts(a) => select_concepts(a)?,
            Invocation::Ablate(a) => run_ablation(a)?,
        }
        Ok(manifest)
    }

    /// Cheap checks that need no input files.
    pub fn validate(&self) -> Result<()> {
        match self {
            Invocation::GenData(a) => a.config.validate()?,
            Invocation::Pretrain(a) => a.config.validate()?,
            Invocation::Distill(a) => a.config.validate()?,
            Invocation::Eval(a) => {
                if a.config.fuse && a.teacher.is_none() {
                    bail!("--fuse needs a teacher checkpoint");
                }
            }
            Invocation::SelectConcepts(a) => {
                if a.config.method.needs_images() && a.images.is_none() {
                    bail!(
                        "selection method {} needs image embeddings (--images or --data with --encoder)",
                        a.config.method
                    );
                }
            }
            Invocation::Ablate(a) => a.spec.validate()?,
        }
        Ok(())
    }
}

/// Repeats the command recorded in `manifest_path`, optionally into a
/// different output directory.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<Manifest> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.verify_inputs()?;
    let mut inv = manifest.invocation;
    if let Some(out) = out {
        inv.set_out(out);
    }
    inv.execute()
}

fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_pool(path: &Path) -> Result<ConceptPool> {
    ConceptPool::load(path).with_context(|| format!("loading concept pool {}", path.display()))
}

fn load_checkpoint(path: &Path, pool: &ConceptPool) -> Result<ModelParams> {
    Checkpoint::load_checked(path, pool).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_outcome(out: &Path, file: &str, outcome: &TrainOutcome, pool: &ConceptPool) -> Result<()> {
    save_params(&outcome.params, pool, out.join(file))?;
    fs::write(out.join(LOG_FILE), outcome.log_jsonl()?)?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (ds, pool) = generate(&a.config)?;
    write_dataset(&ds, &a.out)?;
    pool.save(a.out.join(POOL_FILE))?;
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let pool = load_pool(&a.pool)?;
    let outcome = pretrain_teacher(&a.config, &ds, &pool)?;
    write_outcome(&a.out, TEACHER_FILE, &outcome, &pool)
}

fn distill(a: &DistillArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let pool = load_pool(&a.pool)?;
    let teacher = load_checkpoint(&a.teacher, &pool)?;
    if teacher.modality != Modality::Teacher {
        bail!(
            "{} holds a {} model, expected a teacher",
            a.teacher.display(),
            teacher.modality.name()
        );
    }
    let outcome = distill_student(&a.config, &teacher, &ds, &pool, None)?;
    write_outcome(&a.out, STUDENT_FILE, &outcome, &pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// True when the reports cover class-paired records only.
    pub paired: bool,
    pub reports: IndexMap<String, MetricsReport>,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let pool = load_pool(&a.pool)?;
    let model = load_checkpoint(&a.checkpoint, &pool)?;
    let teacher = a.teacher.as_ref().map(|p| load_checkpoint(p, &pool)).transpose()?;
    let split = a.config.split;
    let concepts_t = pool.embeddings().transpose();
    let names = ds.class_names();
    let mut reports = IndexMap::new();

    if a.config.fuse {
        let teacher = teacher.expect("validated");
        if model.modality != Modality::Student || teacher.modality != Modality::Teacher {
            bail!("--fuse expects a student checkpoint and a teacher checkpoint");
        }
        let (s_recs, t_recs) = ds.pair_by_class(split);
        if s_recs.is_empty() {
            bail!("no class-paired records in the {} split", split.name());
        }
        let (sx, labels) = records_to_arrays(&s_recs, ds.meta.feature_dim);
        let (tx, _) = records_to_arrays(&t_recs, ds.meta.feature_dim);
        let (_, sp) = model.forward(&sx, &concepts_t)?;
        let (_, tp) = teacher.forward(&tx, &concepts_t)?;
        let fp = fused_predict(&sp, &tp)?;
        for (name, p) in [("student", &sp), ("teacher", &tp), ("fused", &fp)] {
            reports.insert(
                name.to_string(),
                macro_report(&p.probabilities, &p.predicted_class, &labels, names)?,
            );
        }
    } else {
        for m in std::iter::once(&model).chain(teacher.as_ref()) {
            let report = codistill::training::evaluate(m, &ds, &pool, m.modality, split)?;
            reports.insert(m.modality.name().to_string(), report);
        }
    }

    let report = EvalReport {
        split,
        paired: a.config.fuse,
        reports,
    };
    fs::write(a.out.join(REPORT_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.out.join(REPORT_TXT), render_report(&report))?;
    Ok(())
}

pub fn render_report(report: &EvalReport) -> String {
    let rows: Vec<(&str, &MetricsReport)> = report.reports.iter().map(|(k, v)| (k.as_str(), v)).collect();
    format!(
        "split: {}{}\n\n{}\n{}",
        report.split.name(),
        if report.paired { " (class-paired)" } else { "" },
        render_summary_table(&rows),
        render_class_table(&rows)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub method: SelectionMethod,
    pub k: usize,
    pub selected_ids: Vec<String>,
    pub pool_fingerprint: String,
}

fn read_embeddings(path: &Path) -> Result<codistill::Matrix> {
    let rows: Vec<Vec<f64>> = crate::load_config(path)?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        bail!("{}: expected a non-empty array of equal-length rows", path.display());
    }
    Ok(codistill::Matrix::new(rows.len(), cols, rows.concat())?)
}

fn select_concepts(a: &SelectArgs) -> Result<()> {
    let pool = load_pool(&a.pool)?;
    let images = match &a.images {
        None => None,
        Some(ImageSource::Embeddings { path }) => Some(read_embeddings(path)?),
        Some(ImageSource::Encoded { data, encoder }) => {
            let ds = load_dataset(data)?;
            let params = load_checkpoint(encoder, &pool)?;
            let (x, _) = ds.split_arrays(params.modality, Split::Train);
            Some(encode(&params, &x)?)
        }
    };
    let c = &a.config;
    let params = SelectionParams {
        seed: c.seed,
        kmeans_max_iters: c.kmeans_max_iters,
        weights: c.weights,
    };
    let selected = select(&pool, c.method, c.k, images.as_ref(), &params)?;
    selected.save(a.out.join(POOL_FILE))?;
    let summary = SelectionSummary {
        method: c.method,
        k: c.k,
        selected_ids: selected.concepts().iter().map(|x| x.id.clone()).collect(),
        pool_fingerprint: selected.fingerprint(),
    };
    fs::write(
        a.out.join(SELECTION_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}
