//! Experimental protocols: fixed train/dev/test runs per model class,
//! one-dimension hyperparameter sweeps, and auxiliary-task ablations.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cohort::Folds;
use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, BootstrapResult, PrPoint, RocCurve, ScoredSet};
use crate::models::{
    self, ModelKind, ModelParams, MtlTopology, StlTopology, TaskRegistry, TaskRole,
};
use crate::numerics::{CsrMatrix, LabelMatrix, Matrix};
use crate::seed;
use crate::trainer::{self, CurvePoint, TrainConfig, TrainData, TrainedModel};

/// Featurized users with labels for every task of `tasks`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub x: CsrMatrix,
    pub labels: LabelMatrix,
    pub tasks: TaskRegistry,
}

impl Dataset {
    pub fn new(
        user_ids: Vec<String>,
        x: CsrMatrix,
        labels: LabelMatrix,
        tasks: TaskRegistry,
    ) -> Result<Self> {
        if x.rows() != user_ids.len()
            || labels.rows() != user_ids.len()
            || labels.cols() != tasks.len()
        {
            return Err(Error::shape(
                "Dataset",
                format!("{} users x {} tasks", user_ids.len(), tasks.len()),
                format!(
                    "features[{}], labels[{} x {}]",
                    x.rows(),
                    labels.rows(),
                    labels.cols()
                ),
            ));
        }
        Ok(Dataset {
            user_ids,
            x,
            labels,
            tasks,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    /// Label columns of the named tasks, in the given order.
    pub fn labels_for(&self, tasks: &TaskRegistry) -> Result<LabelMatrix> {
        let cols = tasks
            .names()
            .map(|n| self.tasks.require(n))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<usize> = (0..self.n_users()).collect();
        Ok(self.labels.select(&rows, &cols))
    }

    /// SHA-256 over user ids, feature values and labels.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (i, id) in self.user_ids.iter().enumerate() {
            bytes.extend_from_slice(id.as_bytes());
            bytes.push(0);
            for (c, v) in self.x.row(i) {
                bytes.extend_from_slice(&(c as u64).to_le_bytes());
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(0xff);
            for l in self.labels.row(i) {
                bytes.push(match l.target() {
                    None => b'?',
                    Some(y) if y == 1.0 => b'1',
                    Some(_) => b'0',
                });
            }
        }
        bytes.extend_from_slice(self.tasks.to_spec_string().as_bytes());
        seed::sha256_hex(&bytes)
    }
}

/// Train, dev and test user indices; pairwise disjoint by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(train: Vec<usize>, dev: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let s = Split { train, dev, test };
        s.assert_disjoint()?;
        Ok(s)
    }

    pub fn from_folds(folds: &Folds) -> Result<Self> {
        Split::new(folds.train(), folds.dev(), folds.test())
    }

    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, part) in [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ] {
            for &u in part {
                if !seen.insert(u) {
                    return Err(Error::Invalid(format!(
                        "user {u} appears twice across folds (again in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_range(&self, n: usize) -> Result<()> {
        self.assert_disjoint()?;
        if self
            .train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .any(|&u| u >= n)
        {
            return Err(Error::Invalid(format!(
                "split refers to users beyond the {n} in the dataset"
            )));
        }
        if self.train.is_empty() || self.dev.is_empty() || self.test.is_empty() {
            return Err(Error::Invalid(
                "train, dev and test folds must all be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Builds an untrained model of `kind` over `tasks`. STL width, unless fixed
/// in `cfg`, is matched to the parameter count of an MTL model over
/// `budget_tasks` tasks with the same width and depth.
pub fn build_model(
    kind: ModelKind,
    input_dim: usize,
    tasks: &TaskRegistry,
    budget_tasks: usize,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let mut model = match kind {
        ModelKind::Lr => models::build_lr(input_dim, tasks)?,
        ModelKind::Mtl => {
            let mut rng = seed::derive_rng(cfg.seed, "init/mtl");
            models::build_mtl(
                input_dim,
                cfg.hidden_width,
                cfg.shared_depth,
                tasks,
                &mut rng,
            )?
        }
        ModelKind::Stl => {
            models::build_stl(stl_topology(input_dim, budget_tasks, cfg)?, tasks, cfg.seed)?
        }
    };
    model.meta.seed = cfg.seed;
    Ok(model)
}

pub fn stl_topology(
    input_dim: usize,
    budget_tasks: usize,
    cfg: &TrainConfig,
) -> Result<StlTopology> {
    match cfg.stl_width {
        Some(w) => Ok(StlTopology {
            input_dim,
            hidden_widths: [w, w],
        }),
        None => {
            let budget =
                MtlTopology::new(input_dim, cfg.hidden_width, cfg.shared_depth, budget_tasks)
                    .param_count();
            Ok(models::build_stl_matched(input_dim, budget)?.0)
        }
    }
}

/// Trains `model` on the split with the full schedule.
pub fn train(
    model: ModelParams,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    split.check_range(data.n_users())?;
    let labels = data.labels_for(&model.tasks)?;
    trainer::train_model(model, &data.x, &labels, &split.train, &split.dev, cfg)
}

/// Test-fold metrics of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub model: String,
    pub task: String,
    pub n_labeled: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub tpr_at_fpr_0_1: Option<f64>,
    pub f1: Option<f64>,
    /// Why metrics are missing, when they are.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs_lr: Option<Significance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs_stl: Option<Significance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub auc_diff: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub significant: bool,
}

impl From<&BootstrapResult> for Significance {
    fn from(b: &BootstrapResult) -> Self {
        Significance {
            auc_diff: b.observed_diff,
            p_value: b.p_value,
            resamples: b.resamples,
            significant: b.significant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl Provenance {
    pub fn new(cfg_text: &str, data: &Dataset, seed: u64) -> Self {
        Provenance {
            config_hash: seed::sha256_hex(cfg_text.as_bytes()),
            data_hash: data.content_hash(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub rows: Vec<TaskMetrics>,
}

impl ExperimentReport {
    pub fn get(&self, model: &str, task: &str) -> Option<&TaskMetrics> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.task == task)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Model-by-task AUC grid; `*` marks a significant gain over LR and
    /// `+` over STL.
    pub fn auc_table(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        let mut out = String::from("task");
        for m in &models {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for t in &tasks {
            out.push_str(t);
            for m in &models {
                let cell = match self.get(m, t) {
                    Some(r) => fmt_auc(r),
                    None => "-".into(),
                };
                let _ = write!(out, "\t{cell}");
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_auc(r: &TaskMetrics) -> String {
    match r.auc {
        None => "n/a".into(),
        Some(a) => {
            let mut s = format!("{a:.3}");
            if r.vs_lr.as_ref().is_some_and(|s| s.significant) {
                s.push('*');
            }
            if r.vs_stl.as_ref().is_some_and(|s| s.significant) {
                s.push('+');
            }
            s
        }
    }
}

/// Test-fold scores of one model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub kind: ModelKind,
    pub tasks: TaskRegistry,
    /// Test users by task.
    pub scores: Matrix,
    pub labels: LabelMatrix,
    pub metrics: Vec<TaskMetrics>,
    pub curves: Vec<Option<(RocCurve, Vec<PrPoint>)>>,
}

/// Scores `model` on `rows` and computes per-task metrics.
pub fn evaluate(
    model: &ModelParams,
    data: &Dataset,
    rows: &[usize],
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let labels_all = data.labels_for(&model.tasks)?;
    let cols: Vec<usize> = (0..model.tasks.len()).collect();
    let labels = labels_all.select(rows, &cols);
    let scores = model.predict(&data.x.select_rows(rows))?;
    let mut metrics_rows = Vec::new();
    let mut curves = Vec::new();
    for (t, task) in model.tasks.tasks().iter().enumerate() {
        let col: Vec<f64> = (0..rows.len()).map(|r| scores.get(r, t)).collect();
        let set = ScoredSet::from_labels(&col, &labels.column(t))?;
        let mut m = TaskMetrics {
            model: model.kind.to_string(),
            task: task.name.clone(),
            n_labeled: set.len(),
            positives: set.positives(),
            auc: None,
            tpr_at_fpr_0_1: None,
            f1: None,
            note: None,
            vs_lr: None,
            vs_stl: None,
            roc_file: None,
            pr_file: None,
        };
        match metrics::roc(&set) {
            Ok(curve) => {
                m.auc = Some(metrics::auc(&set)?);
                m.tpr_at_fpr_0_1 = Some(metrics::tpr_at_fpr(&curve, eval.target_fpr));
                m.f1 = Some(metrics::f1_at(&set, eval.f1_threshold)?);
                curves.push(Some((curve, metrics::precision_recall(&set)?)));
            }
            Err(Error::DegenerateLabels(msg)) => {
                m.note = Some(msg);
                curves.push(None);
            }
            Err(e) => return Err(e),
        }
        metrics_rows.push(m);
    }
    Ok(Evaluation {
        kind: model.kind,
        tasks: model.tasks.clone(),
        scores,
        labels,
        metrics: metrics_rows,
        curves,
    })
}

fn scored(e: &Evaluation, task: &str) -> Option<ScoredSet> {
    let t = e.tasks.index_of(task)?;
    let col: Vec<f64> = (0..e.scores.rows()).map(|r| e.scores.get(r, t)).collect();
    ScoredSet::from_labels(&col, &e.labels.column(t)).ok()
}

/// Adds bootstrap markers against LR and STL to every other model's rows.
/// Both evaluations must come from the same test users.
pub fn add_significance(evals: &mut [Evaluation], resamples: usize, seed: u64) -> Result<()> {
    let find = |kind| evals.iter().position(|e: &Evaluation| e.kind == kind);
    let baselines = [
        (ModelKind::Lr, find(ModelKind::Lr)),
        (ModelKind::Stl, find(ModelKind::Stl)),
    ];
    let mut updates = Vec::new();
    for (i, e) in evals.iter().enumerate() {
        for (base_kind, base) in baselines {
            let Some(b) = base else { continue };
            if b == i {
                continue;
            }
            for (t, m) in e.metrics.iter().enumerate() {
                if m.auc.is_none() {
                    continue;
                }
                let (Some(a), Some(bs)) = (scored(e, &m.task), scored(&evals[b], &m.task)) else {
                    continue;
                };
                if a.labels() != bs.labels() || bs.positives() == 0 || bs.negatives() == 0 {
                    continue;
                }
                let mut rng = seed::derive_rng(
                    seed,
                    &format!("significance/{}/{}/{}", e.kind, base_kind, m.task),
                );
                let res = metrics::bootstrap_auc_diff(&a, &bs, resamples, &mut rng)?;
                updates.push((i, t, base_kind, Significance::from(&res)));
            }
        }
    }
    for (i, t, kind, sig) in updates {
        match kind {
            ModelKind::Lr => evals[i].metrics[t].vs_lr = Some(sig),
            _ => evals[i].metrics[t].vs_stl = Some(sig),
        }
    }
    Ok(())
}

/// Output of one model class in a protocol run.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub trained: TrainedModel,
    pub evaluation: Evaluation,
}

/// Trains each model class on the split's train folds, selects on dev,
/// and reports test metrics for every task, with bootstrap comparisons
/// against LR and STL when those classes are among `kinds`.
pub fn run_protocol(
    data: &Dataset,
    split: &Split,
    kinds: &[ModelKind],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    workers: usize,
) -> Result<(ExperimentReport, Vec<ProtocolRun>)> {
    split.check_range(data.n_users())?;
    let jobs: Vec<ModelKind> = kinds.to_vec();
    let runs = run_jobs(workers, jobs, |kind| -> Result<ProtocolRun> {
        let model = build_model(kind, data.x.cols(), &data.tasks, data.tasks.len(), cfg)?;
        let trained = train(model, data, split, cfg)?;
        let evaluation = evaluate(&trained.params, data, &split.test, eval)?;
        Ok(ProtocolRun {
            trained,
            evaluation,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut evals: Vec<Evaluation> = runs.iter().map(|r| r.evaluation.clone()).collect();
    add_significance(&mut evals, eval.bootstrap_resamples, cfg.seed)?;
    let runs: Vec<ProtocolRun> = runs
        .into_iter()
        .zip(evals)
        .map(|(r, e)| ProtocolRun {
            trained: r.trained,
            evaluation: e,
        })
        .collect();
    let report = ExperimentReport {
        provenance: Provenance::new(&format!("{cfg:?}{eval:?}{kinds:?}"), data, cfg.seed),
        rows: runs
            .iter()
            .flat_map(|r| r.evaluation.metrics.clone())
            .collect(),
    };
    Ok((report, runs))
}

/// Runs independent jobs on a pool of at most `workers` threads; results
/// come back in job order.
pub fn run_jobs<J, T, F>(workers: usize, jobs: Vec<J>, f: F) -> Vec<Result<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build();
    match pool {
        Ok(pool) => pool.install(|| jobs.into_par_iter().map(&f).collect()),
        Err(_) => jobs.into_iter().map(f).collect(),
    }
}

/// Which auxiliary tasks accompany the main task in an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSet {
    All,
    AllConds,
    Neuro,
    NeuroMood,
    NeuroAnx,
    NeuroTargets,
    None,
}

impl AuxSet {
    pub const ALL: [AuxSet; 7] = [
        AuxSet::All,
        AuxSet::AllConds,
        AuxSet::Neuro,
        AuxSet::NeuroMood,
        AuxSet::NeuroAnx,
        AuxSet::NeuroTargets,
        AuxSet::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuxSet::All => "all",
            AuxSet::AllConds => "all_conds",
            AuxSet::Neuro => "neuro",
            AuxSet::NeuroMood => "neuro_mood",
            AuxSet::NeuroAnx => "neuro_anx",
            AuxSet::NeuroTargets => "neuro_targets",
            AuxSet::None => "none",
        }
    }

    /// Auxiliary task names drawn from `registry`. `all` is every task;
    /// `all_conds` drops demographic tasks; the named subsets are fixed
    /// lists and must all be present.
    pub fn members(self, registry: &TaskRegistry) -> Result<Vec<String>> {
        let fixed: &[&str] = match self {
            AuxSet::All => return Ok(registry.names().map(String::from).collect()),
            AuxSet::AllConds => {
                return Ok(registry
                    .tasks()
                    .iter()
                    .filter(|t| t.role != TaskRole::Demographic)
                    .map(|t| t.name.clone())
                    .collect())
            }
            AuxSet::None => &[],
            AuxSet::Neuro => &["neurotypical"],
            AuxSet::NeuroMood => &["neurotypical", "depression", "bipolar"],
            AuxSet::NeuroAnx => &["neurotypical", "anxiety", "panic"],
            AuxSet::NeuroTargets => &[
                "neurotypical",
                "anxiety",
                "depression",
                "suicide_attempt",
                "bipolar",
            ],
        };
        fixed
            .iter()
            .map(|n| registry.require(n).map(|_| n.to_string()))
            .collect()
    }
}

impl std::fmt::Display for AuxSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AuxSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AuxSet::ALL
            .into_iter()
            .find(|a| a.as_str() == s || a.as_str().replace('_', "+") == s)
            .ok_or_else(|| Error::InvalidValue {
                key: "subset".into(),
                msg: format!(
                    "`{s}` is not one of {}",
                    AuxSet::ALL.map(AuxSet::as_str).join(", ")
                ),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub main_task: String,
    pub aux: AuxSet,
}

impl AblationSpec {
    /// Head set `{main} ∪ aux`, in the order of `registry`.
    pub fn heads(&self, registry: &TaskRegistry) -> Result<TaskRegistry> {
        registry.require(&self.main_task)?;
        let members = self.aux.members(registry)?;
        let names: Vec<&str> = registry
            .names()
            .filter(|n| *n == self.main_task || members.iter().any(|m| m == n))
            .collect();
        registry.subset(&names)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub main_task: String,
    pub aux: AuxSet,
    pub heads: Vec<String>,
    pub auc: f64,
}

/// Trains the ablation model (MTL over `{main} ∪ aux`, or STL for `none`)
/// with the full schedule and returns the main task's test AUC. STL width
/// is matched against an MTL over every task of the dataset, so `none`
/// reproduces the main task's network of a full STL run.
pub fn run_ablation(
    spec: &AblationSpec,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(AblationResult, TrainedModel)> {
    split.check_range(data.n_users())?;
    let heads = spec.heads(&data.tasks)?;
    let main = heads.require(&spec.main_task)?;
    let main_global = data.tasks.require(&spec.main_task)?;
    let test_labels = data.labels.column(main_global);
    let test_set: Vec<_> = split.test.iter().map(|&u| test_labels[u]).collect();
    let zeros = vec![0.0; test_set.len()];
    let probe = ScoredSet::from_labels(&zeros, &test_set)?;
    if probe.positives() == 0 || probe.negatives() == 0 {
        return Err(Error::DegenerateLabels(format!(
            "test fold has {} positives and {} negatives for `{}`",
            probe.positives(),
            probe.negatives(),
            spec.main_task
        )));
    }
    let kind = if spec.aux == AuxSet::None {
        ModelKind::Stl
    } else {
        ModelKind::Mtl
    };
    let model = build_model(kind, data.x.cols(), &heads, data.tasks.len(), cfg)?;
    let trained = train(model, data, split, cfg)?;
    let auc = main_task_auc(&trained.params, main, data, &split.test, main_global)?;
    Ok((
        AblationResult {
            main_task: spec.main_task.clone(),
            aux: spec.aux,
            heads: heads.names().map(String::from).collect(),
            auc,
        },
        trained,
    ))
}

/// Test AUC of one task, scoring only that task's network.
fn main_task_auc(
    model: &ModelParams,
    t: usize,
    data: &Dataset,
    rows: &[usize],
    label_col: usize,
) -> Result<f64> {
    let scores = model.predict(&data.x.select_rows(rows))?;
    let col: Vec<f64> = (0..rows.len()).map(|r| scores.get(r, t)).collect();
    let labels: Vec<_> = rows
        .iter()
        .map(|&u| data.labels.get(u, label_col))
        .collect();
    metrics::auc(&ScoredSet::from_labels(&col, &labels)?)
}

/// Main-task AUC for every (subset, main) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mains: Vec<String>,
    pub subsets: Vec<AuxSet>,
    /// `auc[s][m]`, `None` when the cell failed.
    pub auc: Vec<Vec<Option<f64>>>,
    pub errors: Vec<String>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = String::from("auxiliary");
        for m in &self.mains {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for (s, row) in self.subsets.iter().zip(&self.auc) {
            out.push_str(s.as_str());
            for v in row {
                match v {
                    Some(a) => {
                        let _ = write!(out, "\t{a:.3}");
                    }
                    None => out.push_str("\tfailed"),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn run_ablation_grid(
    mains: &[String],
    subsets: &[AuxSet],
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    workers: usize,
) -> AblationTable {
    let jobs: Vec<AblationSpec> = subsets
        .iter()
        .flat_map(|&aux| {
            mains.iter().map(move |m| AblationSpec {
                main_task: m.clone(),
                aux,
            })
        })
        .collect();
    let results = run_jobs(workers, jobs.clone(), |spec| {
        run_ablation(&spec, data, split, cfg).map(|r| r.0.auc)
    });
    let mut auc = vec![vec![None; mains.len()]; subsets.len()];
    let mut errors = Vec::new();
    for (i, (spec, r)) in jobs.iter().zip(results).enumerate() {
        match r {
            Ok(a) => auc[i / mains.len()][i % mains.len()] = Some(a),
            Err(e) => errors.push(format!("{}/{}: {e}", spec.aux, spec.main_task)),
        }
    }
    AblationTable {
        mains: mains.to_vec(),
        subsets: subsets.to_vec(),
        auc,
        errors,
    }
}

/// Candidate values for the line searches.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub l2: Vec<f64>,
    pub widths: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            l2: vec![1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 5.0, 10.0],
            widths: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            learning_rates: vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !pos(&self.l2)
            || !pos(&self.learning_rates)
            || self.widths.is_empty()
            || self.widths.contains(&0)
        {
            return Err(Error::Invalid(
                "sweep grids must be non-empty and strictly positive".into(),
            ));
        }
        Ok(())
    }

    pub fn values(&self, dim: SweepDim) -> Vec<f64> {
        match dim {
            SweepDim::LearningRate => self.learning_rates.clone(),
            SweepDim::L2 => self.l2.clone(),
            SweepDim::Width => self.widths.iter().map(|&w| w as f64).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDim {
    LearningRate,
    L2,
    Width,
}

impl SweepDim {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepDim::LearningRate => "lr",
            SweepDim::L2 => "l2",
            SweepDim::Width => "width",
        }
    }

    /// `base` with this dimension set to `v`.
    pub fn apply(self, base: &TrainConfig, v: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            SweepDim::LearningRate => cfg.learning_rate = v,
            SweepDim::L2 => cfg.l2 = v,
            SweepDim::Width => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidValue {
                        key: "width".into(),
                        msg: format!("{v} is not a positive integer"),
                    });
                }
                cfg.hidden_width = v as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" | "learning_rate" => Ok(SweepDim::LearningRate),
            "l2" => Ok(SweepDim::L2),
            "width" | "hidden_width" => Ok(SweepDim::Width),
            _ => Err(Error::InvalidValue {
                key: "dim".into(),
                msg: format!("`{s}` is not one of lr, l2, width"),
            }),
        }
    }
}

/// Evaluations averaged for a sweep cell's terminal dev loss.
pub const DEFAULT_SWEEP_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Mean dev loss over the terminal window; `None` when the run failed.
    pub terminal_dev_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// `(iteration, train_loss, dev_loss)` of the joint phase.
    #[serde(skip)]
    pub curve: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dim: SweepDim,
    pub model: String,
    pub window: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Two-column table: parameter value and terminal dev loss.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\tdev_loss\n", self.dim.as_str());
        for r in &self.rows {
            let loss = match (&r.terminal_dev_loss, &r.failure) {
                (Some(l), _) => format!("{l:.4}"),
                (None, Some(_)) => "diverged".into(),
                (None, None) => "-".into(),
            };
            let _ = writeln!(out, "{}\t{loss}", r.value);
        }
        out
    }

    /// Index of the row with the highest terminal loss, failed rows
    /// counting as worst; `None` when nothing is comparable.
    pub fn worst(&self) -> Option<usize> {
        let mut worst: Option<(usize, f64)> = None;
        for (i, r) in self.rows.iter().enumerate() {
            let l = r.terminal_dev_loss.unwrap_or(f64::INFINITY);
            if worst.is_none_or(|(_, w)| l > w) {
                worst = Some((i, l));
            }
        }
        worst.map(|(i, _)| i)
    }
}

/// Mean summed dev loss over the last `window` evaluations, excluding the
/// iteration-0 baseline unless it is the only point.
pub fn terminal_loss(curve: &[CurvePoint], window: usize) -> f64 {
    let evals = if curve.len() > 1 { &curve[1..] } else { curve };
    let tail = &evals[evals.len().saturating_sub(window.max(1))..];
    tail.iter().map(|p| p.dev_loss).sum::<f64>() / tail.len() as f64
}

/// Joint-phase dev curve of a freshly built model, summed across networks.
pub fn joint_curve(
    model: ModelParams,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<Vec<CurvePoint>> {
    let labels = data.labels_for(&model.tasks)?;
    let rows: Vec<usize> = (0..labels.rows()).collect();
    let mut total: Option<Vec<CurvePoint>> = None;
    for (i, net) in model.nets.into_iter().enumerate() {
        let cols: Vec<usize> = match model.kind {
            ModelKind::Stl => vec![i],
            _ => (0..model.tasks.len()).collect(),
        };
        let y = labels.select(&rows, &cols);
        let stream = match model.kind {
            ModelKind::Stl => format!("train/stl/{}", model.tasks.get(i).name),
            k => format!("train/{k}"),
        };
        let mut rng = seed::derive_rng(cfg.seed, &stream);
        let data = TrainData {
            x: &data.x,
            y: &y,
            train: &split.train,
            dev: &split.dev,
        };
        let out = trainer::train_joint(net, data, cfg, &mut rng)?;
        total = Some(match total {
            None => out.curve,
            Some(mut acc) => {
                for (a, p) in acc.iter_mut().zip(out.curve) {
                    a.train_loss += p.train_loss;
                    a.dev_loss += p.dev_loss;
                    a.head_dev_losses.extend(p.head_dev_losses);
                }
                acc
            }
        });
    }
    total.ok_or_else(|| Error::Invalid("model has no network".into()))
}

/// Line search over one dimension: each value trains the joint phase from
/// `base` with that dimension replaced. Failed cells are recorded and the
/// sweep continues.
pub fn run_sweep(
    dim: SweepDim,
    values: &[f64],
    data: &Dataset,
    split: &Split,
    base: &TrainConfig,
    window: usize,
    workers: usize,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Invalid("empty sweep grid".into()));
    }
    split.check_range(data.n_users())?;
    let results = run_jobs(
        workers,
        values.to_vec(),
        |v| -> Result<(f64, Vec<(usize, f64, f64)>)> {
            let cfg = dim.apply(base, v)?;
            let model = build_model(
                cfg.model,
                data.x.cols(),
                &data.tasks,
                data.tasks.len(),
                &cfg,
            )?;
            let curve = joint_curve(model, data, split, &cfg)?;
            let loss = terminal_loss(&curve, window);
            if loss.is_finite() {
                Ok((
                    loss,
                    curve
                        .iter()
                        .map(|p| (p.iteration, p.train_loss, p.dev_loss))
                        .collect(),
                ))
            } else {
                Err(Error::Diverged {
                    iteration: curve.last().map_or(0, |p| p.iteration),
                    loss,
                })
            }
        },
    );
    let mut rows = Vec::with_capacity(values.len());
    for (&value, r) in values.iter().zip(results) {
        rows.push(match r {
            Ok((l, curve)) => SweepRow {
                value,
                terminal_dev_loss: Some(l),
                failure: None,
                curve,
            },
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => SweepRow {
                value,
                terminal_dev_loss: None,
                failure: Some(e.to_string()),
                curve: Vec::new(),
            },
            Err(e) => return Err(e),
        });
    }
    Ok(SweepReport {
        dim,
        model: base.model.to_string(),
        window,
        rows,
    })
}
