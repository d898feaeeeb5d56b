//! `key = value` configuration files for runs and synthetic cohorts.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys,
//! repeated keys, unparsable values and out-of-range values are errors that
//! carry the offending line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cohort::CohortSpec;
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;
use crate::io;
use crate::metrics;
use crate::models::{ModelKind, TaskRegistry, TaskRole};
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a key-value file into entries, rejecting malformed and repeated keys.
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let Some((k, v)) = t.split_once('=') else {
            return Err(config_err(
                origin,
                line,
                format!("expected `key = value`, got `{t}`"),
            ));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(config_err(origin, line, "empty key".into()));
        }
        if let Some(prev) = seen.insert(key.clone(), line) {
            return Err(config_err(
                origin,
                line,
                format!("`{key}` already set on line {prev}"),
            ));
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

fn config_err(origin: &str, line: usize, msg: String) -> Error {
    Error::Config {
        path: origin.to_string(),
        line,
        msg,
    }
}

fn value<T: FromStr>(origin: &str, e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| {
        config_err(
            origin,
            e.line,
            format!("`{}`: cannot parse `{}`", e.key, e.value),
        )
    })
}

fn typed<T: FromStr<Err = Error>>(origin: &str, e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|err: Error| config_err(origin, e.line, format!("`{}`: {err}", e.key)))
}

/// Rewrites a validation error to point at the line that set the key, or
/// line 0 when the offending value is a default.
fn locate(err: Error, origin: &str, lines: &BTreeMap<String, usize>) -> Error {
    match err {
        Error::InvalidValue { key, msg } => {
            let line = lines.get(&key).copied().unwrap_or(0);
            config_err(origin, line, format!("`{key}`: {msg}"))
        }
        other => other,
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub target_fpr: f64,
    pub f1_threshold: f64,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            target_fpr: metrics::DEFAULT_TARGET_FPR,
            f1_threshold: metrics::DEFAULT_F1_THRESHOLD,
            bootstrap_resamples: metrics::DEFAULT_RESAMPLES,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.target_fpr) {
            return bad("target_fpr", "must be in [0, 1]");
        }
        if !self.f1_threshold.is_finite() {
            return bad("f1_threshold", "must be finite");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples", "must be >= 1");
        }
        Ok(())
    }
}

/// Everything a run may be configured with.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub features: FeaturizerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.features.validate()?;
        self.eval.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let f = &self.features;
        let e = &self.eval;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model", t.model.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("joint_iters", t.joint_iters.to_string());
        kv("finetune_iters", t.finetune_iters.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("l2", t.l2.to_string());
        kv("dropout_rate", t.dropout_rate.to_string());
        kv("hidden_width", t.hidden_width.to_string());
        kv("shared_depth", t.shared_depth.to_string());
        kv(
            "stl_width",
            t.stl_width.map_or("matched".into(), |w| w.to_string()),
        );
        kv("seed", t.seed.to_string());
        kv("optimizer", t.optimizer.as_str().into());
        kv("adagrad_eps", t.adagrad_eps.to_string());
        kv(
            "orders",
            f.orders
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("top_k", f.top_k.to_string());
        kv("lowercase", f.lowercase.to_string());
        kv("collapse_whitespace", f.collapse_whitespace.to_string());
        kv("target_fpr", e.target_fpr.to_string());
        kv("f1_threshold", e.f1_threshold.to_string());
        kv("bootstrap_resamples", e.bootstrap_resamples.to_string());
        out
    }
}

fn parse_orders(origin: &str, e: &Entry) -> Result<BTreeSet<usize>> {
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                config_err(
                    origin,
                    e.line,
                    format!("`orders`: cannot parse `{}`", e.value),
                )
            })
        })
        .collect()
}

/// Parses a run config; unset keys keep their defaults, with `seed`
/// defaulting to `default_seed` when given.
pub fn parse_run_config(text: &str, origin: &str, default_seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(s) = default_seed {
        cfg.train.seed = s;
    }
    let mut lines = BTreeMap::new();
    for e in parse_entries(text, origin)? {
        lines.insert(e.key.clone(), e.line);
        let t = &mut cfg.train;
        match e.key.as_str() {
            "model" => t.model = typed::<ModelKind>(origin, &e)?,
            "batch_size" => t.batch_size = value(origin, &e)?,
            "joint_iters" => t.joint_iters = value(origin, &e)?,
            "finetune_iters" => t.finetune_iters = value(origin, &e)?,
            "eval_every" => t.eval_every = value(origin, &e)?,
            "learning_rate" => t.learning_rate = value(origin, &e)?,
            "l2" => t.l2 = value(origin, &e)?,
            "dropout_rate" => t.dropout_rate = value(origin, &e)?,
            "hidden_width" => t.hidden_width = value(origin, &e)?,
            "shared_depth" => t.shared_depth = value(origin, &e)?,
            "stl_width" => {
                t.stl_width = if e.value == "matched" {
                    None
                } else {
                    Some(value(origin, &e)?)
                };
            }
            "seed" => t.seed = value(origin, &e)?,
            "optimizer" => t.optimizer = typed::<Optimizer>(origin, &e)?,
            "adagrad_eps" => t.adagrad_eps = value(origin, &e)?,
            "orders" => cfg.features.orders = parse_orders(origin, &e)?,
            "top_k" => cfg.features.top_k = value(origin, &e)?,
            "lowercase" => cfg.features.lowercase = value(origin, &e)?,
            "collapse_whitespace" => cfg.features.collapse_whitespace = value(origin, &e)?,
            "target_fpr" => cfg.eval.target_fpr = value(origin, &e)?,
            "f1_threshold" => cfg.eval.f1_threshold = value(origin, &e)?,
            "bootstrap_resamples" => cfg.eval.bootstrap_resamples = value(origin, &e)?,
            other => return Err(config_err(origin, e.line, format!("unknown key `{other}`"))),
        }
    }
    cfg.validate().map_err(|err| locate(err, origin, &lines))?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path, default_seed: Option<u64>) -> Result<RunConfig> {
    parse_run_config(
        &io::read_text(path)?,
        &path.display().to_string(),
        default_seed,
    )
}

/// Parses a cohort spec. Keys: `n_users`, `tasks` (`name:role,...`),
/// `prevalence.<condition>`, `comorbidity.<a>.<b>`, `gender_label_fraction`,
/// `doc_length_mean`, `doc_length_min`, `signal_strength`, `stratify_folds`,
/// `k_folds`, `seed`.
///
/// Replacing `tasks` drops default prevalences and multipliers of
/// conditions the new registry lacks.
pub fn parse_cohort_spec(
    text: &str,
    origin: &str,
    default_seed: Option<u64>,
) -> Result<CohortSpec> {
    let mut spec = CohortSpec::default();
    if let Some(s) = default_seed {
        spec.seed = s;
    }
    let entries = parse_entries(text, origin)?;
    let mut lines = BTreeMap::new();
    if let Some(e) = entries.iter().find(|e| e.key == "tasks") {
        let reg = TaskRegistry::parse_spec(&e.value)
            .map_err(|err| config_err(origin, e.line, format!("`tasks`: {err}")))?;
        let keep = |n: &str| {
            reg.index_of(n)
                .is_some_and(|i| reg.get(i).role == TaskRole::Condition)
        };
        spec.prevalence.retain(|n, _| keep(n));
        spec.comorbidity.retain(|(a, b), _| keep(a) && keep(b));
        spec.tasks = reg;
    }
    for e in &entries {
        lines.insert(e.key.clone(), e.line);
        match e.key.as_str() {
            "tasks" => {}
            "n_users" => spec.n_users = value(origin, e)?,
            "gender_label_fraction" => spec.gender_label_fraction = value(origin, e)?,
            "doc_length_mean" => spec.doc_length_mean = value(origin, e)?,
            "doc_length_min" => spec.doc_length_min = value(origin, e)?,
            "signal_strength" => spec.signal_strength = value(origin, e)?,
            "stratify_folds" => spec.stratify_folds = value(origin, e)?,
            "k_folds" => spec.k_folds = value(origin, e)?,
            "seed" => spec.seed = value(origin, e)?,
            k => {
                if let Some(name) = k.strip_prefix("prevalence.") {
                    spec.prevalence.insert(name.to_string(), value(origin, e)?);
                } else if let Some(pair) = k.strip_prefix("comorbidity.") {
                    let Some((a, b)) = pair.split_once('.') else {
                        return Err(config_err(
                            origin,
                            e.line,
                            format!("`{k}`: expected comorbidity.<a>.<b>"),
                        ));
                    };
                    spec.set_multiplier(a, b, value(origin, e)?);
                    // validation reports pairs under their sorted key
                    lines.insert(format!("comorbidity.{}.{}", a.min(b), a.max(b)), e.line);
                } else {
                    return Err(config_err(origin, e.line, format!("unknown key `{k}`")));
                }
            }
        }
    }
    spec.validate().map_err(|err| locate(err, origin, &lines))?;
    Ok(spec)
}

pub fn load_cohort_spec(path: &Path, default_seed: Option<u64>) -> Result<CohortSpec> {
    parse_cohort_spec(
        &io::read_text(path)?,
        &path.display().to_string(),
        default_seed,
    )
}

pub fn format_cohort_spec(spec: &CohortSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n_users = {}", spec.n_users);
    let _ = writeln!(out, "tasks = {}", spec.tasks.to_spec_string());
    for (n, p) in &spec.prevalence {
        let _ = writeln!(out, "prevalence.{n} = {p}");
    }
    for ((a, b), m) in &spec.comorbidity {
        let _ = writeln!(out, "comorbidity.{a}.{b} = {m}");
    }
    let _ = writeln!(
        out,
        "gender_label_fraction = {}",
        spec.gender_label_fraction
    );
    let _ = writeln!(out, "doc_length_mean = {}", spec.doc_length_mean);
    let _ = writeln!(out, "doc_length_min = {}", spec.doc_length_min);
    let _ = writeln!(out, "signal_strength = {}", spec.signal_strength);
    let _ = writeln!(out, "stratify_folds = {}", spec.stratify_folds);
    let _ = writeln!(out, "k_folds = {}", spec.k_folds);
    let _ = writeln!(out, "seed = {}", spec.seed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_run_config("", "c", None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.dropout_rate, 0.05);
        assert_eq!(cfg.train.joint_iters, 5000);
        assert_eq!(cfg.train.finetune_iters, 1000);
    }

    #[test]
    fn range_error_names_key_and_line() {
        let err = parse_run_config(
            "# tuned\nbatch_size = 64\ndropout_rate = 1.5\n",
            "run.cfg",
            None,
        )
        .unwrap_err();
        match err {
            Error::Config { path, line, msg } => {
                assert_eq!(path, "run.cfg");
                assert_eq!(line, 3);
                assert!(msg.contains("dropout_rate"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_repeated_keys() {
        assert!(matches!(
            parse_run_config("foo = 1", "c", None),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            parse_run_config("l2 = 1\nl2 = 2", "c", None),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(
            parse_run_config("seed 3", "c", None),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            parse_run_config("batch_size = many", "c", None),
            Err(Error::Config { line: 1, .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.model = ModelKind::Stl;
        cfg.train.stl_width = Some(12);
        cfg.train.learning_rate = 0.003;
        cfg.features.orders = [1, 3].into_iter().collect();
        cfg.eval.bootstrap_resamples = 100;
        assert_eq!(parse_run_config(&cfg.to_text(), "c", None).unwrap(), cfg);
    }

    #[test]
    fn default_seed_applies_unless_set() {
        assert_eq!(parse_run_config("", "c", Some(9)).unwrap().train.seed, 9);
        assert_eq!(
            parse_run_config("seed = 4", "c", Some(9))
                .unwrap()
                .train
                .seed,
            4
        );
    }

    #[test]
    fn cohort_spec_round_trip_and_task_override() {
        let spec = parse_cohort_spec("", "s", None).unwrap();
        assert_eq!(spec, CohortSpec::default());
        assert_eq!(
            parse_cohort_spec(&format_cohort_spec(&spec), "s", None).unwrap(),
            spec
        );

        let text = "tasks = neurotypical:control,depression:condition,bipolar:condition\n\
                    comorbidity.depression.bipolar = 6\nn_users = 50\n";
        let s = parse_cohort_spec(text, "s", None).unwrap();
        assert_eq!(s.prevalence.len(), 2);
        assert_eq!(s.multiplier("bipolar", "depression"), 6.0);
        assert_eq!(s.n_users, 50);
    }

    #[test]
    fn cohort_spec_errors_point_at_lines() {
        let err = parse_cohort_spec("n_users = 10\nprevalence.ptsd = 2\n", "s", None).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err:?}");
        let err = parse_cohort_spec("comorbidity.ptsd.bipolar = -1\n", "s", None).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err:?}");
    }
}
