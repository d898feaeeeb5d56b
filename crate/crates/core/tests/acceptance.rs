//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; any failure makes the process
//! exit non-zero.
//!
//! `cargo test --test acceptance -- 7` runs only criteria whose number or
//! name contains one of the given filters.

mod common;

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use comorbid::cohort::{self, CohortSpec};
use comorbid::config::EvalConfig;
use comorbid::experiments::{self, AblationSpec, AuxSet, Dataset, Split, SweepDim, SweepGrid};
use comorbid::featurizer::{build_vocabulary, featurize_corpus, FeaturizerConfig};
use comorbid::metrics::{self, RocCurve, ScoredSet};
use comorbid::models::{self, ModelKind, MtlTopology, StlTopology, TaskRegistry};
use comorbid::numerics::{backprop, BackpropOptions, Label, LabelMatrix, Network};
use comorbid::pipeline;
use comorbid::seed;
use comorbid::trainer::{self, TrainConfig, TrainData};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

fn randomize_biases<R: Rng>(net: &mut Network, rng: &mut R) {
    for l in net.trunk.iter_mut().chain(net.heads.iter_mut().flatten()) {
        for b in l.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        for w in l.weights.as_mut_slice() {
            if *w == 0.0 {
                *w = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = seed::rng(1);
    let mut worst: [f64; 3] = [0.0; 3];
    for draw in 0..100 {
        let input = rng.random_range(3..9);
        let batch = rng.random_range(2..9);
        let l2 = if draw % 2 == 0 { 0.0 } else { 0.01 };
        let kind = draw % 3;
        let (mut net, heads) = match kind {
            0 => {
                let reg = TaskRegistry::standard()
                    .subset(&["anxiety", "depression", "ptsd"])
                    .unwrap();
                let m = models::build_lr(input, &reg).map_err(err)?;
                (m.nets[0].clone(), reg.len())
            }
            1 => {
                let w = rng.random_range(2..=8);
                let reg = TaskRegistry::standard().subset(&["bipolar"]).unwrap();
                let topo = StlTopology {
                    input_dim: input,
                    hidden_widths: [w, w],
                };
                let m = models::build_stl(topo, &reg, draw as u64).map_err(err)?;
                (m.nets[0].clone(), 1)
            }
            _ => {
                let w = rng.random_range(2..=8);
                let n = rng.random_range(1..=4);
                let names: Vec<&str> = ["anxiety", "depression", "ptsd", "bipolar"][..n].to_vec();
                let reg = TaskRegistry::standard().subset(&names).unwrap();
                let m = models::build_mtl(input, w, 1, &reg, &mut rng).map_err(err)?;
                (m.nets[0].clone(), n)
            }
        };
        randomize_biases(&mut net, &mut rng);
        let x = common::random_csr(batch, input, 0.6, &mut rng);
        let y = common::random_labels(batch, heads, &mut rng);
        let e = common::max_grad_error(&net, &x, &y, l2, 1e-5);
        worst[kind] = worst[kind].max(e);
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max < 1e-4,
        format!(
            "max relative error LR {:.1e}, STL {:.1e}, MTL {:.1e} over 100 draws",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn masking_soundness() -> Outcome {
    let mut rng = seed::rng(2);
    let reg = TaskRegistry::standard()
        .subset(&["anxiety", "depression", "ptsd"])
        .unwrap();
    let mut checked = 0;
    for trial in 0..20 {
        let model = models::build_mtl(12, 6, 1, &reg, &mut rng).map_err(err)?;
        let net = &model.nets[0];
        let x = common::random_csr(10, 12, 0.5, &mut rng);
        let y = common::random_labels(10, 3, &mut rng);
        let extra = common::random_csr(7, 12, 0.5, &mut rng);
        let x2 = x.vstack(&extra).map_err(err)?;
        let mut rows: Vec<Vec<Label>> = (0..10).map(|r| y.row(r).to_vec()).collect();
        rows.extend((0..7).map(|_| vec![Label::Masked; 3]));
        let y2 = LabelMatrix::from_rows(&rows).map_err(err)?;
        let opts = BackpropOptions {
            l2: if trial % 2 == 0 { 0.0 } else { 1e-3 },
            freeze_trunk: false,
        };
        let a = backprop(net, &x, &y, opts).map_err(err)?;
        let b = backprop(net, &x2, &y2, opts).map_err(err)?;
        if a.head_losses != b.head_losses || a.loss != b.loss || a.grad != b.grad {
            return Err(format!(
                "trial {trial}: padded batch changed a loss or gradient"
            ));
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} batches padded with 7 fully-masked users, losses and gradients bit-identical"
    ))
}

// 3 ------------------------------------------------------------------------

fn auc_oracle() -> Outcome {
    let mut rng = seed::rng(3);
    let mut worst: f64 = 0.0;
    let mut sets = 0;
    while sets < 1000 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let set = ScoredSet::new(scores.clone(), labels.clone()).map_err(err)?;
        let got = metrics::auc(&set).map_err(err)?;
        let area = metrics::roc(&set).map_err(err)?.area();
        let want = common::pairwise_auc(&scores, &labels);
        worst = worst.max((got - want).abs()).max((area - want).abs());
        sets += 1;
    }
    check(
        worst <= 1e-12,
        format!("1000 tied score sets, max |AUC - pairwise| = {worst:.1e}"),
    )
}

// 4 ------------------------------------------------------------------------

fn tpr_readout() -> Outcome {
    let cases: [(&[(f64, f64)], f64, f64); 5] = [
        (&[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)], 0.1, 0.4),
        (&[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)], 0.2, 0.8),
        (&[(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)], 0.6, 0.9),
        (&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)], 0.1, 0.1),
        (&[(0.0, 0.0), (0.0, 0.6), (1.0, 1.0)], 0.5, 0.8),
    ];
    for (points, fpr, want) in cases {
        let curve = RocCurve::from_points(points).map_err(err)?;
        let got = metrics::tpr_at_fpr(&curve, fpr);
        if (got - want).abs() > 1e-12 {
            return Err(format!(
                "curve {points:?} at FPR {fpr}: got {got}, want {want}"
            ));
        }
    }
    Ok("5 three-point fixtures, including (0,0)-(0.2,0.8)-(1,1) at FPR 0.1 = 0.4".into())
}

// 5 ------------------------------------------------------------------------

fn parameter_parity() -> Outcome {
    let tasks = TaskRegistry::standard().len();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for input in [25_000, 2_500] {
        for &w in &SweepGrid::default().widths {
            let mtl = MtlTopology::new(input, w, 1, tasks).param_count();
            let (_, stl) = models::build_stl_matched(input, mtl).map_err(err)?;
            let rel = (stl as f64 - mtl as f64).abs() / mtl as f64;
            worst = worst.max(rel);
            if rel >= 0.05 {
                lines.push(format!("input {input} width {w}: MTL {mtl} vs STL {stl}"));
            }
        }
    }
    check(
        lines.is_empty(),
        if lines.is_empty() {
            format!("8 widths x 2 input sizes, worst gap {:.3}%", worst * 100.0)
        } else {
            lines.join("; ")
        },
    )
}

// 6 ------------------------------------------------------------------------

fn small_dataset(
    n_users: usize,
    seed_: u64,
    signal: f64,
    top_k: usize,
) -> Result<(Dataset, Split), String> {
    let spec = CohortSpec {
        n_users,
        seed: seed_,
        signal_strength: signal,
        doc_length_mean: 400,
        doc_length_min: 150,
        ..CohortSpec::default()
    };
    let c = cohort::generate(&spec).map_err(err)?;
    let docs = c.documents();
    let fc = FeaturizerConfig {
        top_k,
        ..FeaturizerConfig::default()
    };
    let folds = cohort::make_folds(
        n_users,
        5,
        Some(&c.strata()),
        &mut seed::derive_rng(seed_, "folds"),
    )
    .map_err(err)?;
    let split = Split::from_folds(&folds).map_err(err)?;
    let train_docs: Vec<_> = split.train.iter().map(|&i| docs[i].clone()).collect();
    let vocab = build_vocabulary(&train_docs, &fc).map_err(err)?;
    let x = featurize_corpus(&docs, &vocab).map_err(err)?;
    let data = Dataset::new(c.user_ids(), x, c.label_matrix(), c.tasks.clone()).map_err(err)?;
    Ok((data, split))
}

fn finetune_freeze() -> Outcome {
    let (data, split) = small_dataset(500, 6, 0.2, 200)?;
    let cfg = TrainConfig {
        joint_iters: 200,
        finetune_iters: 100,
        hidden_width: 32,
        batch_size: 64,
        seed: 6,
        ..TrainConfig::default()
    };
    let model =
        models::build_mtl(data.x.cols(), 32, 1, &data.tasks, &mut seed::rng(6)).map_err(err)?;
    let td = TrainData {
        x: &data.x,
        y: &data.labels,
        train: &split.train,
        dev: &split.dev,
    };
    let mut rng = seed::rng(7);
    let joint = trainer::train_joint(model.nets[0].clone(), td, &cfg, &mut rng).map_err(err)?;
    let ft = trainer::finetune_heads(joint.best.params.clone(), td, &cfg, &mut rng).map_err(err)?;
    let same_trunk = ft.net.trunk == joint.best.params.trunk
        && ft
            .net
            .trunk
            .iter()
            .zip(&joint.best.params.trunk)
            .all(|(a, b)| {
                a.weights
                    .as_slice()
                    .iter()
                    .zip(b.weights.as_slice())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    let moved = ft.heads.iter().filter(|h| h.iteration > 0).count();
    check(
        same_trunk && moved > 0,
        format!(
            "trunk bit-identical: {same_trunk}; {moved} of {} heads moved from the joint checkpoint",
            ft.heads.len()
        ),
    )
}

// 7 and 8 ------------------------------------------------------------------

/// Signal strength for the comorbidity cohort, chosen so the LR baseline on
/// the common condition lands inside its target AUC band.
const LIFT_SIGNAL: f64 = 0.05;
const LIFT_MULTIPLIER: f64 = 15.0;
const LIFT_SEEDS: u64 = 10;
/// Seeds used while picking the constants above were 0..10; the check runs
/// on a disjoint range.
const LIFT_FIRST_SEED: u64 = 100;

struct LiftSeed {
    lr_common: f64,
    stl: f64,
    all: f64,
    all_conds: f64,
    neuro: f64,
    rare_positives: usize,
    common_positives: usize,
}

fn lift_seed(seed_: u64) -> Result<LiftSeed, String> {
    let mut spec = CohortSpec {
        n_users: 2000,
        signal_strength: LIFT_SIGNAL,
        doc_length_mean: 600,
        doc_length_min: 200,
        seed: seed_,
        ..CohortSpec::default()
    };
    spec.prevalence.insert("depression".into(), 0.4);
    spec.prevalence.insert("bipolar".into(), 0.025);
    spec.set_multiplier("bipolar", "depression", LIFT_MULTIPLIER);
    let c = cohort::generate(&spec).map_err(err)?;
    let docs = c.documents();
    let folds = cohort::make_folds(
        2000,
        5,
        Some(&c.strata()),
        &mut seed::derive_rng(seed_, "folds"),
    )
    .map_err(err)?;
    let split = Split::from_folds(&folds).map_err(err)?;
    let fc = FeaturizerConfig {
        top_k: 500,
        ..FeaturizerConfig::default()
    };
    let train_docs: Vec<_> = split.train.iter().map(|&i| docs[i].clone()).collect();
    let vocab = build_vocabulary(&train_docs, &fc).map_err(err)?;
    let x = featurize_corpus(&docs, &vocab).map_err(err)?;
    let data = Dataset::new(c.user_ids(), x, c.label_matrix(), c.tasks.clone()).map_err(err)?;
    let cfg = TrainConfig {
        joint_iters: 1000,
        finetune_iters: 200,
        hidden_width: 64,
        seed: seed_,
        ..TrainConfig::default()
    };
    let lr = experiments::build_model(
        ModelKind::Lr,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg,
    )
    .map_err(err)?;
    let lr = experiments::train(lr, &data, &split, &cfg).map_err(err)?;
    let ev = experiments::evaluate(&lr.params, &data, &split.test, &EvalConfig::default())
        .map_err(err)?;
    let lr_common = ev
        .metrics
        .iter()
        .find(|m| m.task == "depression")
        .and_then(|m| m.auc)
        .ok_or("LR has no depression AUC")?;
    let auc = |aux| -> Result<f64, String> {
        let spec = AblationSpec {
            main_task: "bipolar".into(),
            aux,
        };
        Ok(experiments::run_ablation(&spec, &data, &split, &cfg)
            .map_err(err)?
            .0
            .auc)
    };
    Ok(LiftSeed {
        lr_common,
        stl: auc(AuxSet::None)?,
        all: auc(AuxSet::All)?,
        all_conds: auc(AuxSet::AllConds)?,
        neuro: auc(AuxSet::Neuro)?,
        rare_positives: c.positives(c.tasks.index_of("bipolar").unwrap()),
        common_positives: c.positives(c.tasks.index_of("depression").unwrap()),
    })
}

fn lift_runs() -> &'static Result<Vec<LiftSeed>, String> {
    static RUNS: OnceLock<Result<Vec<LiftSeed>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (LIFT_FIRST_SEED..LIFT_FIRST_SEED + LIFT_SEEDS)
            .map(|s| {
                let r = lift_seed(s)?;
                println!(
                    "    seed {s}: positives rare {} common {}; LR common {:.3}; rare-task AUC stl {:.3} all {:.3} all_conds {:.3} neuro {:.3}",
                    r.rare_positives, r.common_positives, r.lr_common, r.stl, r.all, r.all_conds, r.neuro
                );
                Ok(r)
            })
            .collect()
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn comorbidity_lift() -> Outcome {
    let runs = lift_runs().as_ref().map_err(Clone::clone)?;
    let lr = mean(runs.iter().map(|r| r.lr_common));
    let wins = runs.iter().filter(|r| r.all > r.stl).count();
    let in_band = (0.75..=0.9).contains(&lr);
    check(
        in_band && wins >= 7,
        format!(
            "mean LR AUC on the common task {lr:.3} (band 0.75-0.90: {in_band}); MTL-all beats STL on the rare task in {wins}/{} seeds (need 7); mean AUC all {:.3} vs stl {:.3}",
            runs.len(),
            mean(runs.iter().map(|r| r.all)),
            mean(runs.iter().map(|r| r.stl)),
        ),
    )
}

fn ablation_direction() -> Outcome {
    let runs = lift_runs().as_ref().map_err(Clone::clone)?;
    let ac = mean(runs.iter().map(|r| r.all_conds));
    let ne = mean(runs.iter().map(|r| r.neuro));
    check(
        ac >= ne,
        format!(
            "rare-task mean AUC over {} seeds: all_conds {ac:.4}, neuro {ne:.4}",
            runs.len()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn bootstrap_sanity() -> Outcome {
    let mut rng = seed::rng(9);
    let labels: Vec<bool> = (0..50).map(|i| i % 2 == 0).collect();
    let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    let random: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
    let a = ScoredSet::new(perfect, labels.clone()).map_err(err)?;
    let b = ScoredSet::new(random, labels).map_err(err)?;
    let run =
        |x: &ScoredSet, y: &ScoredSet| metrics::bootstrap_auc_diff(x, y, 5000, &mut seed::rng(99));
    let diff = run(&a, &b).map_err(err)?;
    let again = run(&a, &b).map_err(err)?;
    let same = run(&a, &a).map_err(err)?;
    let deterministic = diff == again;
    check(
        diff.significant && diff.p_value < 0.05 && !same.significant && deterministic,
        format!(
            "perfect vs random p = {:.4} (significant {}); identical p = {:.4} (significant {}); repeatable {deterministic}",
            diff.p_value, diff.significant, same.p_value, same.significant
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn pipeline_once(dir: &Path) -> Result<(), String> {
    std::fs::write(
        dir.join("cohort.cfg"),
        "n_users = 200\nseed = 10\ndoc_length_mean = 400\ndoc_length_min = 150\nsignal_strength = 0.2\n",
    )
    .map_err(err)?;
    std::fs::write(
        dir.join("run.cfg"),
        "model = mtl\nhidden_width = 32\njoint_iters = 500\nfinetune_iters = 100\ntop_k = 300\nseed = 10\n",
    )
    .map_err(err)?;
    let p = |n: &str| dir.join(n);
    pipeline::synth(&pipeline::SynthArgs {
        spec: p("cohort.cfg"),
        out_docs: p("docs.txt"),
        out_labels: p("labels.tsv"),
        out_folds: p("folds.tsv"),
        default_seed: None,
    })
    .map_err(err)?;
    pipeline::featurize(&pipeline::FeaturizeArgs {
        input: p("docs.txt"),
        vocab: p("vocab.txt"),
        out: p("x.mat"),
        build_vocab: true,
        config: Some(p("run.cfg")),
        folds: Some(p("folds.tsv")),
    })
    .map_err(err)?;
    pipeline::train(&pipeline::TrainArgs {
        config: Some(p("run.cfg")),
        data: p("x.mat"),
        labels: p("labels.tsv"),
        folds: Some(p("folds.tsv")),
        out: p("model.bin"),
        curve: None,
        default_seed: None,
    })
    .map_err(err)?;
    pipeline::evaluate(&pipeline::EvaluateArgs {
        models: vec![p("model.bin")],
        data: p("x.mat"),
        labels: p("labels.tsv"),
        folds: Some(p("folds.tsv")),
        config: Some(p("run.cfg")),
        out: p("report.json"),
    })
    .map_err(err)?;
    Ok(())
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    pipeline_once(a.path())?;
    pipeline_once(b.path())?;
    let mut compared = 0;
    let mut files: Vec<String> = std::fs::read_dir(a.path())
        .map_err(err)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".manifest.json"))
        .collect();
    files.sort();
    for name in &files {
        let x = std::fs::read(a.path().join(name)).map_err(err)?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
        compared += 1;
    }
    let required = ["model.bin", "report.json", "x.mat", "vocab.txt", "docs.txt"];
    let all_there = required.iter().all(|r| files.iter().any(|f| f == r));
    check(
        all_there,
        format!("{compared} artifacts byte-identical across two runs, model and report included"),
    )
}

// 11 -----------------------------------------------------------------------

const SWEEP_GRID: [f64; 3] = [1e-2, 0.1, 10.0];

fn sweep_shape() -> Outcome {
    let mut worst_is_extreme = 0;
    let mut shaped = true;
    let mut cells = Vec::new();
    for s in 0..10u64 {
        let (data, split) = small_dataset(300, 1100 + s, 0.2, 200)?;
        let base = TrainConfig {
            joint_iters: 1000,
            finetune_iters: 1,
            hidden_width: 32,
            batch_size: 64,
            seed: s,
            ..TrainConfig::default()
        };
        let report = experiments::run_sweep(
            SweepDim::LearningRate,
            &SWEEP_GRID,
            &data,
            &split,
            &base,
            10,
            1,
        )
        .map_err(err)?;
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        shaped &= lines.len() == 4
            && lines[0] == "lr\tdev_loss"
            && lines[1..].iter().all(|l| l.split('\t').count() == 2);
        if report.worst() == Some(SWEEP_GRID.len() - 1) {
            worst_is_extreme += 1;
        }
        cells.push(
            report
                .rows
                .iter()
                .map(|r| {
                    r.terminal_dev_loss
                        .map_or("diverged".into(), |l| format!("{l:.3}"))
                })
                .collect::<Vec<_>>()
                .join("/"),
        );
    }
    check(
        shaped && worst_is_extreme >= 8,
        format!(
            "report shaped: {shaped}; lr {} worst in {worst_is_extreme}/10 seeds (need 8); terminal dev losses {}",
            SWEEP_GRID[2],
            cells.join(" ")
        ),
    )
}

// ------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient correctness", gradient_correctness),
    (2, "masking soundness", masking_soundness),
    (3, "AUC oracle equivalence", auc_oracle),
    (4, "TPR at FPR readout", tpr_readout),
    (5, "parameter parity", parameter_parity),
    (6, "fine-tune freeze", finetune_freeze),
    (7, "comorbidity lift", comorbidity_lift),
    (8, "ablation direction", ablation_direction),
    (9, "bootstrap sanity", bootstrap_sanity),
    (10, "end-to-end determinism", end_to_end_determinism),
    (11, "sweep harness shape", sweep_shape),
];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected = |n: u32, name: &str| {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| n.to_string() == *f || name.contains(f.as_str()))
    };
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !selected(n, name) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {n:>2} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} ({secs:.1}s): {d}");
            }
        }
        ran += 1;
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
