//! Grid sweeps over loss weights, components, pool scale and selection method.
//!
//! Each (grid point, seed) pair runs the same chain of commands a user would
//! run by hand (gen-data, optional select-concepts, pretrain, distill, eval),
//! each in its own directory with its own manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codistill::metrics::MacroMetrics;
use codistill::{GeneratorConfig, GpdReduction, SelectionMethod, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{
    DistillArgs, EvalArgs, EvalConfig, EvalReport, GenDataArgs, ImageSource, Invocation, PretrainArgs, SelectArgs,
    SelectConfig, POOL_FILE, REPORT_JSON, STUDENT_FILE, TEACHER_FILE,
};

pub const TABLE_JSON: &str = "table.json";
pub const TABLE_TXT: &str = "table.txt";

/// Which distillation terms a grid point keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Components {
    None,
    Gpd,
    Lcd,
    Both,
}

impl Components {
    fn name(self) -> &'static str {
        match self {
            Components::None => "none",
            Components::Gpd => "gpd",
            Components::Lcd => "lcd",
            Components::Both => "both",
        }
    }
}

/// Swept values per axis; an empty list leaves the axis at its base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub components: Vec<Components>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gpd_reduction: Vec<GpdReduction>,
    pub concepts_per_class: Vec<usize>,
    pub selection: Vec<SelectionMethod>,
}

fn default_selection_k() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSpec {
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: Axes,
    /// Concepts kept per class by the selection axis.
    #[serde(default = "default_selection_k")]
    pub selection_k: usize,
}

impl AblateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("ablation spec: field `seeds` must list at least one seed");
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            bail!("ablation spec: seed {s} is listed twice");
        }
        self.generator.validate()?;
        self.train.validate()?;
        self.grid()?;
        Ok(())
    }

    /// Cross product of the axes, refusing points that would share a run
    /// directory.
    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let a = &self.axes;
        let mut points = vec![GridPoint::default()];
        fn expand<T: Clone>(points: Vec<GridPoint>, values: &[T], set: impl Fn(&mut GridPoint, T)) -> Vec<GridPoint> {
            if values.is_empty() {
                return points;
            }
            points
                .into_iter()
                .flat_map(|p| {
                    values
                        .iter()
                        .map(|v| {
                            let mut q = p.clone();
                            set(&mut q, v.clone());
                            q
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        points = expand(points, &a.components, |p, v| p.components = Some(v));
        points = expand(points, &a.alpha, |p, v| p.alpha = Some(v));
        points = expand(points, &a.beta, |p, v| p.beta = Some(v));
        points = expand(points, &a.gpd_reduction, |p, v| p.gpd_reduction = Some(v));
        points = expand(points, &a.concepts_per_class, |p, v| p.concepts_per_class = Some(v));
        points = expand(points, &a.selection, |p, v| p.selection = Some(v));

        let mut dirs: HashMap<String, usize> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            if let Some(j) = dirs.insert(p.label(), i) {
                bail!(
                    "grid points {j} and {i} would share the output directory {:?}; remove the duplicate axis value",
                    p.label()
                );
            }
        }
        Ok(points)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpd_reduction: Option<GpdReduction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concepts_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionMethod>,
}

impl GridPoint {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(v) = self.components {
            out.push(("components", v.name().to_string()));
        }
        if let Some(v) = self.alpha {
            out.push(("alpha", format!("{v}")));
        }
        if let Some(v) = self.beta {
            out.push(("beta", format!("{v}")));
        }
        if let Some(v) = self.gpd_reduction {
            out.push((
                "gpd_reduction",
                match v {
                    GpdReduction::Mean => "mean",
                    GpdReduction::Sum => "sum",
                }
                .to_string(),
            ));
        }
        if let Some(v) = self.concepts_per_class {
            out.push(("concepts_per_class", v.to_string()));
        }
        if let Some(v) = self.selection {
            out.push(("selection", v.name().to_string()));
        }
        out
    }

    /// Directory name of the point, e.g. `alpha-0.6_beta-0.05`.
    pub fn label(&self) -> String {
        let f = self.fields();
        if f.is_empty() {
            return "base".into();
        }
        f.iter().map(|(k, v)| format!("{k}-{v}")).collect::<Vec<_>>().join("_")
    }

    pub fn generator(&self, base: &GeneratorConfig, seed: u64) -> GeneratorConfig {
        let mut g = base.clone();
        g.seed = seed;
        if let Some(k) = self.concepts_per_class {
            g.concepts_per_class = k;
        }
        g
    }

    pub fn train(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut t = base.clone();
        t.seed = seed;
        if let Some(a) = self.alpha {
            t.distill.alpha = a;
        }
        if let Some(b) = self.beta {
            t.distill.beta = b;
        }
        if let Some(r) = self.gpd_reduction {
            t.distill.gpd_reduction = r;
        }
        match self.components {
            Some(Components::None) => {
                t.distill.alpha = 0.0;
                t.distill.beta = 0.0;
            }
            Some(Components::Gpd) => t.distill.beta = 0.0,
            Some(Components::Lcd) => t.distill.alpha = 0.0,
            Some(Components::Both) | None => {}
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    pub spec: AblateSpec,
    pub workers: usize,
    pub out: PathBuf,
}

/// The commands of one (grid point, seed) run, in execution order.
pub fn run_chain(spec: &AblateSpec, point: &GridPoint, seed: u64, dir: &Path) -> Vec<Invocation> {
    let data = dir.join("data");
    let train = point.train(&spec.train, seed);
    let mut chain = vec![Invocation::GenData(GenDataArgs {
        config: point.generator(&spec.generator, seed),
        out: data.clone(),
    })];
    let mut pool = data.join(POOL_FILE);
    if let Some(method) = point.selection.filter(|m| *m != SelectionMethod::None) {
        let images = if method.needs_images() {
            let reference = dir.join("reference");
            chain.push(Invocation::Pretrain(PretrainArgs {
                data: data.clone(),
                pool: pool.clone(),
                config: train.clone(),
                out: reference.clone(),
            }));
            Some(ImageSource::Encoded {
                data: data.clone(),
                encoder: reference.join(TEACHER_FILE),
            })
        } else {
            None
        };
        chain.push(Invocation::SelectConcepts(SelectArgs {
            pool,
            images,
            config: SelectConfig {
                method,
                k: spec.selection_k,
                seed,
                ..SelectConfig::default()
            },
            out: dir.join("pool"),
        }));
        pool = dir.join("pool").join(POOL_FILE);
    }
    chain.push(Invocation::Pretrain(PretrainArgs {
        data: data.clone(),
        pool: pool.clone(),
        config: train.clone(),
        out: dir.join("teacher"),
    }));
    chain.push(Invocation::Distill(DistillArgs {
        data: data.clone(),
        pool: pool.clone(),
        teacher: dir.join("teacher").join(TEACHER_FILE),
        config: train,
        out: dir.join("student"),
    }));
    chain.push(Invocation::Eval(EvalArgs {
        data,
        pool,
        checkpoint: dir.join("student").join(STUDENT_FILE),
        teacher: None,
        config: EvalConfig::default(),
        out: dir.join("eval"),
    }));
    chain
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pr_f1: f64,
    pub ss_f1: f64,
    pub map: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub point: GridPoint,
    pub per_seed: Vec<SeedResult>,
    pub mean: Summary,
    /// Sample standard deviation across seeds (zero for a single seed).
    pub std: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
}

fn summarize(results: &[SeedResult]) -> (Summary, Summary) {
    let get: [fn(&MacroMetrics) -> f64; 5] = [
        |m| m.pr_f1,
        |m| m.ss_f1,
        |m| m.mean_average_precision,
        |m| m.accuracy,
        |m| m.kappa,
    ];
    let n = results.len() as f64;
    let stats: Vec<(f64, f64)> = get
        .iter()
        .map(|f| {
            let xs: Vec<f64> = results.iter().map(|r| f(&r.macro_avg)).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .collect();
    let pick = |i: usize| -> Summary {
        let v: Vec<f64> = stats.iter().map(|s| if i == 0 { s.0 } else { s.1 }).collect();
        Summary {
            pr_f1: v[0],
            ss_f1: v[1],
            map: v[2],
            accuracy: v[3],
            kappa: v[4],
        }
    };
    (pick(0), pick(1))
}

pub fn run_ablation(args: &AblateArgs) -> Result<()> {
    let spec = &args.spec;
    let points = spec.grid()?;
    let runs_dir = args.out.join("runs");
    if runs_dir.exists() {
        bail!(
            "{} already holds ablation runs; choose a fresh --out to avoid overlapping outputs",
            runs_dir.display()
        );
    }
    let jobs: Vec<(usize, u64, PathBuf)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let dir = runs_dir.join(p.label());
            spec.seeds.iter().map(move |&s| (i, s, dir.join(format!("seed-{s}"))))
        })
        .collect();

    let run_one = |(i, seed, dir): &(usize, u64, PathBuf)| -> Result<SeedResult> {
        for inv in run_chain(spec, &points[*i], *seed, dir) {
            let name = inv.name();
            inv.execute()
                .with_context(|| format!("{name} for {} seed {seed}", points[*i].label()))?;
        }
        let report: EvalReport = crate::load_config(&dir.join("eval").join(REPORT_JSON))?;
        Ok(SeedResult {
            seed: *seed,
            macro_avg: report.reports["student"].macro_avg.clone(),
        })
    };
    let results: Vec<Result<SeedResult>> = if args.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    } else {
        jobs.iter().map(run_one).collect()
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let per_point = spec.seeds.len();
    let rows: Vec<TableRow> = points
        .iter()
        .zip(results.chunks(per_point))
        .map(|(p, chunk)| {
            let (mean, std) = summarize(chunk);
            TableRow {
                label: p.label(),
                point: p.clone(),
                per_seed: chunk.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    let axes = points
        .first()
        .map(|p| p.fields().into_iter().map(|(k, _)| k.to_string()).collect())
        .unwrap_or_default();
    let table = AblationTable {
        axes,
        seeds: spec.seeds.clone(),
        rows,
    };
    fs::write(args.out.join(TABLE_JSON), serde_json::to_string_pretty(&table)? + "\n")?;
    fs::write(args.out.join(TABLE_TXT), render_table(&table))?;
    Ok(())
}

pub fn render_table(table: &AblationTable) -> String {
    let mut out = String::new();
    let headers: Vec<String> = table
        .axes
        .iter()
        .cloned()
        .chain(["P-R F1", "S-S F1", "mAP", "Acc", "Kappa"].map(String::from))
        .collect();
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = r.point.fields().into_iter().map(|(_, v)| v).collect();
            let pairs = [
                (r.mean.pr_f1, r.std.pr_f1),
                (r.mean.ss_f1, r.std.ss_f1),
                (r.mean.map, r.std.map),
                (r.mean.accuracy, r.std.accuracy),
                (r.mean.kappa, r.std.kappa),
            ];
            cells.extend(
                pairs
                    .iter()
                    .map(|(m, s)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)),
            );
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            body.iter()
                .map(|row| row[c].chars().count())
                .chain([headers[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(&headers));
    for row in &body {
        let _ = writeln!(out, "{}", line(row));
    }
    let _ = writeln!(out, "\n{} seed(s): {:?}", table.seeds.len(), table.seeds);
    out
}
