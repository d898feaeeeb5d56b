//! File-level commands: each reads artifacts, runs one step, writes its
//! outputs atomically and finishes with a manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::cohort::{self, Folds};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    self, AblationSpec, AuxSet, Dataset, Evaluation, ExperimentReport, Provenance, Split, SweepDim,
    SweepReport, SweepRow, TaskMetrics,
};
use crate::featurizer::{self, Vocabulary};
use crate::io::{self, FeatureTable, FoldRecord, FoldRole};
use crate::manifest::{manifest_path, ManifestBuilder, RunManifest};
use crate::models::{ModelParams, TaskRole};
use crate::seed;
use crate::trainer::{NetReport, TrainedModel};

/// Environment variable holding the default seed for commands whose config
/// does not set one.
pub const SEED_ENV: &str = "COMORBID_SEED";

pub fn default_seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::InvalidValue {
            key: SEED_ENV.into(),
            msg: format!("`{v}` is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

fn write_text(path: &Path, text: &str, mb: &mut ManifestBuilder) -> Result<()> {
    io::write_atomic(path, text.as_bytes())?;
    mb.output(path);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_run_config(
    path: Option<&Path>,
    default_seed: Option<u64>,
    mb: &mut ManifestBuilder,
) -> Result<RunConfig> {
    match path {
        Some(p) => {
            mb.input(p);
            config::load_run_config(p, default_seed)
        }
        None => config::parse_run_config("", "<defaults>", default_seed),
    }
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub spec: PathBuf,
    pub out_docs: PathBuf,
    pub out_labels: PathBuf,
    pub out_folds: PathBuf,
    pub default_seed: Option<u64>,
}

/// Generates a cohort and writes documents, labels and folds.
pub fn synth(a: &SynthArgs) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("synth");
    mb.input(&a.spec);
    let spec = config::load_cohort_spec(&a.spec, a.default_seed)?;
    mb.config(config::format_cohort_spec(&spec)).seed(spec.seed);
    let c = cohort::generate(&spec)?;
    let strata = c.strata();
    let folds = cohort::make_folds(
        c.users.len(),
        spec.k_folds,
        spec.stratify_folds.then_some(strata.as_slice()),
        &mut seed::derive_rng(spec.seed, "folds"),
    )?;
    let ids = c.user_ids();
    write_text(&a.out_docs, &io::format_docs(&c.documents()), &mut mb)?;
    write_text(
        &a.out_labels,
        &io::format_labels(&c.tasks, &ids, &c.label_matrix()),
        &mut mb,
    )?;
    write_text(
        &a.out_folds,
        &io::format_folds(&fold_records(&ids, &folds)),
        &mut mb,
    )?;
    info!(
        "synthesized {} users over {} tasks",
        ids.len(),
        c.tasks.len()
    );
    mb.finish(&manifest_path(&a.out_docs))
}

pub fn fold_records(ids: &[String], folds: &Folds) -> Vec<FoldRecord> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| FoldRecord {
            user_id: id.clone(),
            fold: folds.fold_of[i],
            role: folds.role(i),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FeaturizeArgs {
    pub input: PathBuf,
    pub vocab: PathBuf,
    pub out: PathBuf,
    /// Build the vocabulary and write it to `vocab`; otherwise read it.
    pub build_vocab: bool,
    pub config: Option<PathBuf>,
    /// When building, count n-grams over training-fold users only.
    pub folds: Option<PathBuf>,
}

pub fn featurize(a: &FeaturizeArgs) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("featurize");
    mb.input(&a.input);
    let docs = io::parse_docs(&io::read_text(&a.input)?, &a.input.display().to_string())?;
    let vocab: Vocabulary = if a.build_vocab {
        let cfg = load_run_config(a.config.as_deref(), None, &mut mb)?;
        mb.config(cfg.to_text());
        let corpus = match &a.folds {
            Some(f) => {
                mb.input(f);
                let records = io::parse_folds(&io::read_text(f)?, &f.display().to_string())?;
                let train: std::collections::HashSet<&str> = records
                    .iter()
                    .filter(|r| r.role == FoldRole::Train)
                    .map(|r| r.user_id.as_str())
                    .collect();
                docs.iter()
                    .filter(|d| train.contains(d.user_id.as_str()))
                    .cloned()
                    .collect()
            }
            None => docs.clone(),
        };
        let v = featurizer::build_vocabulary(&corpus, &cfg.features)?;
        write_text(&a.vocab, &io::format_vocab(&v), &mut mb)?;
        v
    } else {
        mb.input(&a.vocab);
        io::parse_vocab(&io::read_text(&a.vocab)?, &a.vocab.display().to_string())?
    };
    let features = featurizer::featurize_corpus(&docs, &vocab)?;
    let table = FeatureTable {
        user_ids: docs.iter().map(|d| d.user_id.clone()).collect(),
        columns: vocab.slot_labels(),
        features,
    };
    write_text(&a.out, &io::format_matrix(&table), &mut mb)?;
    info!(
        "featurized {} documents into {} columns",
        table.user_ids.len(),
        table.columns.len()
    );
    mb.finish(&manifest_path(&a.out))
}

/// Reads a matrix and a labels file into a dataset aligned on the matrix's users.
pub fn load_dataset(matrix: &Path, labels: &Path) -> Result<Dataset> {
    let table = io::parse_matrix(&io::read_text(matrix)?, &matrix.display().to_string())?;
    let lt = io::parse_labels(&io::read_text(labels)?, &labels.display().to_string())?;
    let y = lt.matrix_for(&table.user_ids);
    Dataset::new(table.user_ids, table.features, y, lt.tasks)
}

/// Split from a folds file, or a fresh stratified 5-fold split.
pub fn load_split(folds: Option<&Path>, data: &Dataset, seed: u64) -> Result<Split> {
    match folds {
        Some(p) => {
            let origin = p.display().to_string();
            let records = io::parse_folds(&io::read_text(p)?, &origin)?;
            let index: HashMap<&str, usize> = data
                .user_ids
                .iter()
                .enumerate()
                .map(|(i, u)| (u.as_str(), i))
                .collect();
            let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for r in &records {
                let Some(&i) = index.get(r.user_id.as_str()) else {
                    return Err(Error::format(
                        &origin,
                        format!("user `{}` is not in the feature matrix", r.user_id),
                    ));
                };
                match r.role {
                    FoldRole::Train => train.push(i),
                    FoldRole::Dev => dev.push(i),
                    FoldRole::Test => test.push(i),
                }
            }
            Split::new(train, dev, test).map_err(|e| Error::format(&origin, e.to_string()))
        }
        None => {
            let strata: Option<Vec<bool>> =
                data.tasks.with_role(TaskRole::Control).first().map(|&c| {
                    (0..data.n_users())
                        .map(|u| data.labels.get(u, c) == crate::numerics::Label::Positive)
                        .collect()
                });
            let folds = cohort::make_folds(
                data.n_users(),
                5,
                strata.as_deref(),
                &mut seed::derive_rng(seed, "folds"),
            )?;
            Split::from_folds(&folds)
        }
    }
}

/// Combined loss curve of every network in the model: rows summed across
/// networks, which share one iteration grid.
pub fn combined_curve(reports: &[NetReport]) -> Vec<(usize, f64, f64)> {
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for r in reports {
        let cur = r.curve_rows();
        if rows.is_empty() {
            rows = cur;
        } else {
            for (acc, (_, tr, dv)) in rows.iter_mut().zip(cur) {
                acc.1 += tr;
                acc.2 += dv;
            }
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub labels: PathBuf,
    pub folds: Option<PathBuf>,
    pub out: PathBuf,
    /// Loss-curve CSV; defaults to `<out>.curve.csv`.
    pub curve: Option<PathBuf>,
    pub default_seed: Option<u64>,
}

pub fn train(a: &TrainArgs) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("train");
    let cfg = load_run_config(a.config.as_deref(), a.default_seed, &mut mb)?;
    let cfg_text = cfg.to_text();
    mb.config(cfg_text.clone()).seed(cfg.train.seed);
    mb.input(&a.data).input(&a.labels);
    let data = load_dataset(&a.data, &a.labels)?;
    if let Some(f) = &a.folds {
        mb.input(f);
    }
    let split = load_split(a.folds.as_deref(), &data, cfg.train.seed)?;
    let mut model = experiments::build_model(
        cfg.train.model,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg.train,
    )?;
    model.meta.config_hash = seed::sha256_hex(cfg_text.as_bytes());
    info!(
        "training {} with {} parameters on {} users",
        model.kind,
        model.param_count(),
        split.train.len()
    );
    let trained = experiments::train(model, &data, &split, &cfg.train)?;
    save_trained(&trained, &a.out, a.curve.clone(), &mut mb)?;
    mb.finish(&manifest_path(&a.out))
}

fn save_trained(
    trained: &TrainedModel,
    out: &Path,
    curve: Option<PathBuf>,
    mb: &mut ManifestBuilder,
) -> Result<()> {
    trained.params.save(out)?;
    mb.output(out);
    let curve = curve.unwrap_or_else(|| sibling(out, ".curve.csv"));
    write_text(
        &curve,
        &io::format_curve(&combined_curve(&trained.reports)),
        mb,
    )
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    /// One or more models scored on the same users. With LR or STL among
    /// them, the others get bootstrap markers against those baselines.
    pub models: Vec<PathBuf>,
    pub data: PathBuf,
    pub labels: PathBuf,
    /// Evaluate on the test fold; without folds, on every user.
    pub folds: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

fn curve_files(out: &Path, model: &str, task: &str) -> (PathBuf, PathBuf) {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let dir = out.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}.{model}.{task}.roc.csv")),
        dir.join(format!("{stem}.{model}.{task}.pr.csv")),
    )
}

/// Writes ROC and PR point files for every evaluated task and records
/// their file names in the metric rows.
fn write_curves(evals: &mut [Evaluation], out: &Path, mb: &mut ManifestBuilder) -> Result<()> {
    for e in evals.iter_mut() {
        for (m, c) in e.metrics.iter_mut().zip(&e.curves) {
            let Some((roc, pr)) = c else { continue };
            let (rp, pp) = curve_files(out, &m.model, &m.task);
            let mut text = io::magic_line("roc") + "\nthreshold,fpr,tpr\n";
            for p in &roc.points {
                let _ = writeln!(text, "{},{},{}", p.threshold, p.fpr, p.tpr);
            }
            write_text(&rp, &text, mb)?;
            let mut text = io::magic_line("pr") + "\nthreshold,recall,precision\n";
            for p in pr {
                let _ = writeln!(text, "{},{},{}", p.threshold, p.recall, p.precision);
            }
            write_text(&pp, &text, mb)?;
            m.roc_file = rp.file_name().map(|f| f.to_string_lossy().into_owned());
            m.pr_file = pp.file_name().map(|f| f.to_string_lossy().into_owned());
        }
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("evaluate");
    let cfg = load_run_config(a.config.as_deref(), None, &mut mb)?;
    mb.config(cfg.to_text());
    if a.models.is_empty() {
        return Err(Error::Invalid("evaluate needs at least one model".into()));
    }
    mb.input(&a.data).input(&a.labels);
    let data = load_dataset(&a.data, &a.labels)?;
    let rows: Vec<usize> = match &a.folds {
        Some(f) => {
            mb.input(f);
            load_split(Some(f), &data, 0)?.test
        }
        None => (0..data.n_users()).collect(),
    };
    let mut evals = Vec::new();
    let mut models = Vec::new();
    for p in &a.models {
        mb.input(p);
        let m = ModelParams::load(p)?;
        if m.input_dim() != data.x.cols() {
            return Err(Error::shape(
                "evaluate",
                format!("{} feature columns", m.input_dim()),
                format!("{}", data.x.cols()),
            ));
        }
        evals.push(experiments::evaluate(&m, &data, &rows, &cfg.eval)?);
        models.push(m);
    }
    let seed = models[0].meta.seed;
    if evals.len() > 1 {
        experiments::add_significance(&mut evals, cfg.eval.bootstrap_resamples, seed)?;
    }
    write_curves(&mut evals, &a.out, &mut mb)?;
    let hashes: Vec<&str> = models.iter().map(|m| m.meta.config_hash.as_str()).collect();
    let mut provenance = Provenance::new(&cfg.to_text(), &data, seed);
    provenance.config_hash =
        seed::sha256_hex(format!("{}{}", hashes.join(","), cfg.to_text()).as_bytes());
    let report = ExperimentReport {
        provenance,
        rows: evals.into_iter().flat_map(|e| e.metrics).collect(),
    };
    write_text(&a.out, &report.to_json(), &mut mb)?;
    mb.finish(&manifest_path(&a.out))
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub data: PathBuf,
    pub labels: PathBuf,
    pub folds: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub mains: Vec<String>,
    pub subsets: Vec<AuxSet>,
    /// Run directory; one subdirectory per (main, subset) job.
    pub out: PathBuf,
    pub workers: usize,
    pub default_seed: Option<u64>,
}

pub fn ablate(a: &AblateArgs) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("ablate");
    let cfg = load_run_config(a.config.as_deref(), a.default_seed, &mut mb)?;
    let cfg_text = cfg.to_text();
    mb.config(cfg_text.clone()).seed(cfg.train.seed);
    mb.input(&a.data).input(&a.labels);
    let data = load_dataset(&a.data, &a.labels)?;
    if let Some(f) = &a.folds {
        mb.input(f);
    }
    let split = load_split(a.folds.as_deref(), &data, cfg.train.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let jobs: Vec<AblationSpec> = a
        .subsets
        .iter()
        .flat_map(|&aux| {
            a.mains.iter().map(move |m| AblationSpec {
                main_task: m.clone(),
                aux,
            })
        })
        .collect();
    let results = experiments::run_jobs(a.workers, jobs.clone(), |spec| {
        let (res, mut trained) = experiments::run_ablation(&spec, &data, &split, &cfg.train)?;
        trained.params.meta.config_hash = seed::sha256_hex(cfg_text.as_bytes());
        let eval = experiments::evaluate(&trained.params, &data, &split.test, &cfg.eval)?;
        Ok((res, trained, eval))
    });
    let mut table = vec![vec![None; a.mains.len()]; a.subsets.len()];
    for (i, (spec, r)) in jobs.iter().zip(results).enumerate() {
        let (res, trained, eval) = r?;
        let dir = a.out.join(format!("{}__{}", spec.main_task, spec.aux));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_text(&dir.join("config.cfg"), &cfg_text, &mut mb)?;
        save_trained(
            &trained,
            &dir.join("model.bin"),
            Some(dir.join("curve.csv")),
            &mut mb,
        )?;
        let label = match spec.aux {
            AuxSet::None => "stl".to_string(),
            aux => format!("mtl+{aux}"),
        };
        let rows: Vec<TaskMetrics> = eval
            .metrics
            .into_iter()
            .filter(|m| m.task == spec.main_task)
            .map(|mut m| {
                m.model = label.clone();
                m
            })
            .collect();
        let report = ExperimentReport {
            provenance: Provenance::new(&cfg_text, &data, cfg.train.seed),
            rows,
        };
        write_text(&dir.join("metrics.json"), &report.to_json(), &mut mb)?;
        table[i / a.mains.len()][i % a.mains.len()] = Some(res.auc);
    }
    let grid = experiments::AblationTable {
        mains: a.mains.clone(),
        subsets: a.subsets.clone(),
        auc: table,
        errors: Vec::new(),
    };
    write_text(&a.out.join("ablation.tsv"), &grid.to_text(), &mut mb)?;
    mb.finish(&a.out.join("manifest.json"))
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub data: PathBuf,
    pub labels: PathBuf,
    pub folds: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub dim: SweepDim,
    pub grid: Vec<f64>,
    pub window: usize,
    /// Run directory; one subdirectory per grid value.
    pub out: PathBuf,
    pub workers: usize,
    pub default_seed: Option<u64>,
}

pub fn sweep(a: &SweepArgs) -> Result<(SweepReport, RunManifest)> {
    let mut mb = ManifestBuilder::new("sweep");
    let cfg = load_run_config(a.config.as_deref(), a.default_seed, &mut mb)?;
    mb.config(cfg.to_text()).seed(cfg.train.seed);
    mb.input(&a.data).input(&a.labels);
    let data = load_dataset(&a.data, &a.labels)?;
    if let Some(f) = &a.folds {
        mb.input(f);
    }
    let split = load_split(a.folds.as_deref(), &data, cfg.train.seed)?;
    let report = experiments::run_sweep(
        a.dim, &a.grid, &data, &split, &cfg.train, a.window, a.workers,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for row in &report.rows {
        let dir = a.out.join(format!("{}={}", a.dim.as_str(), row.value));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cell = RunConfig {
            train: a.dim.apply(&cfg.train, row.value)?,
            ..cfg.clone()
        };
        write_text(&dir.join("config.cfg"), &cell.to_text(), &mut mb)?;
        if !row.curve.is_empty() {
            write_text(
                &dir.join("curve.csv"),
                &io::format_curve(&row.curve),
                &mut mb,
            )?;
        }
        let mut json = serde_json::to_string_pretty(&SweepCell::from_row(a.dim, row))
            .expect("cell serializes");
        json.push('\n');
        write_text(&dir.join("metrics.json"), &json, &mut mb)?;
    }
    write_text(&a.out.join("sweep.tsv"), &report.to_text(), &mut mb)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_text(&a.out.join("sweep.json"), &json, &mut mb)?;
    let m = mb.finish(&a.out.join("manifest.json"))?;
    Ok((report, m))
}

/// Metrics file of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub dim: SweepDim,
    #[serde(flatten)]
    pub row: SweepRow,
}

impl SweepCell {
    fn from_row(dim: SweepDim, row: &SweepRow) -> Self {
        SweepCell {
            dim,
            row: row.clone(),
        }
    }
}

/// Summary of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsSummary {
    pub runs: Vec<RunEntry>,
    pub sweeps: Vec<SweepEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run: String,
    pub rows: Vec<TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub run: String,
    pub cell: SweepCell,
}

impl RunsSummary {
    /// All metric rows as one report-shaped table.
    pub fn auc_table(&self) -> String {
        let rows: Vec<TaskMetrics> = self.runs.iter().flat_map(|r| r.rows.clone()).collect();
        let report = ExperimentReport {
            provenance: Provenance {
                config_hash: String::new(),
                data_hash: String::new(),
                seed: 0,
                code_version: String::new(),
            },
            rows,
        };
        report.auc_table()
    }
}

#[derive(Clone, Debug)]
pub struct ReportArgs {
    pub runs: PathBuf,
    pub out: PathBuf,
}

/// Collects `metrics.json` from every job subdirectory of a run directory.
pub fn report(a: &ReportArgs) -> Result<(RunsSummary, RunManifest)> {
    let mut mb = ManifestBuilder::new("report");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.runs)
        .map_err(|e| Error::io(&a.runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    dirs.sort();
    let mut summary = RunsSummary {
        runs: Vec::new(),
        sweeps: Vec::new(),
    };
    for d in dirs {
        let path = d.join("metrics.json");
        mb.input(&path);
        let text = io::read_text(&path)?;
        let name = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Ok(r) = serde_json::from_str::<ExperimentReport>(&text) {
            summary.runs.push(RunEntry {
                run: name,
                rows: r.rows,
            });
        } else if let Ok(cell) = serde_json::from_str::<SweepCell>(&text) {
            summary.sweeps.push(SweepEntry { run: name, cell });
        } else {
            return Err(Error::format(
                path.display().to_string(),
                "not a metrics report",
            ));
        }
    }
    if summary.runs.is_empty() && summary.sweeps.is_empty() {
        return Err(Error::Invalid(format!(
            "no job directories with metrics.json under {}",
            a.runs.display()
        )));
    }
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_text(&a.out, &json, &mut mb)?;
    if !summary.runs.is_empty() {
        write_text(&sibling(&a.out, ".tsv"), &summary.auc_table(), &mut mb)?;
    }
    let m = mb.finish(&manifest_path(&a.out))?;
    Ok((summary, m))
}

/// Header of a model file, one `key<TAB>value` per line.
pub fn describe(model: &Path) -> Result<String> {
    let bytes = std::fs::read(model).map_err(|e| Error::io(model, e))?;
    let mut cursor = bytes.as_slice();
    let header = crate::models::ModelHeader::read(&mut cursor, &model.display().to_string())?;
    Ok(header.to_string())
}

/// Loads the vocabulary file, for callers that need slot labels.
pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    io::parse_vocab(&io::read_text(path)?, &path.display().to_string())
}
