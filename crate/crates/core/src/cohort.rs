//! Synthetic user cohorts: condition labels with controllable prevalence and
//! pairwise comorbidity, partially annotated gender, character text whose
//! distribution shifts with each positive label, and stratified folds.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Geometric, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurizer::Document;
use crate::io::FoldRole;
use crate::models::{TaskRegistry, TaskRole};
use crate::numerics::{Label, LabelMatrix};
use crate::seed;

/// 26 letters, space and three punctuation marks.
pub const ALPHABET: [char; 30] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's',
    't', 'u', 'v', 'w', 'x', 'y', 'z', ' ', '.', ',', '!',
];

// Rough English letter frequencies (percent), then space and punctuation.
const BASE_WEIGHTS: [f64; 30] = [
    8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.15, 0.8, 4.0, 2.4, 6.7, 7.5, 1.9, 0.1, 6.0,
    6.3, 9.1, 2.8, 1.0, 2.4, 0.15, 2.0, 0.07, 20.0, 1.8, 1.2, 0.6,
];

/// Spread of the log-normal reweighting that turns the base distribution
/// into a label-specific one.
const PROFILE_SIGMA: f64 = 1.0;

/// Bounds applied to every conditional probability.
const PROB_FLOOR: f64 = 1e-6;

/// Condition counts from a clinical cohort of 9,611 users: diagonal entries
/// are per-condition totals, off-diagonal entries co-occurrence counts.
const REFERENCE_USERS: f64 = 9611.0;
const REFERENCE_CONDITIONS: [&str; 8] = [
    "anxiety",
    "depression",
    "suicide_attempt",
    "eating",
    "schizophrenia",
    "panic",
    "ptsd",
    "bipolar",
];
const REFERENCE_COUNTS: [[f64; 8]; 8] = [
    [2407.0, 1148.0, 45.0, 64.0, 18.0, 136.0, 143.0, 149.0],
    [1148.0, 1400.0, 149.0, 133.0, 41.0, 73.0, 96.0, 120.0],
    [45.0, 149.0, 1208.0, 45.0, 2.0, 4.0, 14.0, 22.0],
    [64.0, 133.0, 45.0, 749.0, 8.0, 2.0, 16.0, 22.0],
    [18.0, 41.0, 2.0, 8.0, 349.0, 4.0, 14.0, 49.0],
    [136.0, 73.0, 4.0, 2.0, 4.0, 263.0, 22.0, 14.0],
    [143.0, 96.0, 14.0, 16.0, 14.0, 22.0, 191.0, 25.0],
    [149.0, 120.0, 22.0, 22.0, 49.0, 14.0, 25.0, 234.0],
];

/// Largest number of conditions whose joint distribution is enumerated
/// when calibrating base rates.
pub const MAX_CONDITIONS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub n_users: usize,
    pub tasks: TaskRegistry,
    /// Target marginal probability of each condition task.
    pub prevalence: BTreeMap<String, f64>,
    /// Pairwise odds multipliers keyed by the two condition names in
    /// lexicographic order; absent pairs default to 1.
    pub comorbidity: BTreeMap<(String, String), f64>,
    pub gender_label_fraction: f64,
    pub doc_length_mean: usize,
    pub doc_length_min: usize,
    pub signal_strength: f64,
    pub stratify_folds: bool,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    /// Ten-task registry with prevalences and comorbidity lifts taken from
    /// the reference counts.
    fn default() -> Self {
        let mut prevalence = BTreeMap::new();
        let mut comorbidity = BTreeMap::new();
        for (i, a) in REFERENCE_CONDITIONS.iter().enumerate() {
            let pa = REFERENCE_COUNTS[i][i] / REFERENCE_USERS;
            prevalence.insert(a.to_string(), pa);
            for (j, b) in REFERENCE_CONDITIONS.iter().enumerate().skip(i + 1) {
                let pb = REFERENCE_COUNTS[j][j] / REFERENCE_USERS;
                let pab = REFERENCE_COUNTS[i][j] / REFERENCE_USERS;
                comorbidity.insert(pair_key(a, b), pab / (pa * pb));
            }
        }
        CohortSpec {
            n_users: 1000,
            tasks: TaskRegistry::standard(),
            prevalence,
            comorbidity,
            gender_label_fraction: 1101.0 / 9611.0,
            doc_length_mean: 1500,
            doc_length_min: 200,
            signal_strength: 0.1,
            stratify_folds: true,
            k_folds: 5,
            seed: 0,
        }
    }
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CohortSpec {
    pub fn multiplier(&self, a: &str, b: &str) -> f64 {
        self.comorbidity
            .get(&pair_key(a, b))
            .copied()
            .unwrap_or(1.0)
    }

    pub fn set_multiplier(&mut self, a: &str, b: &str, m: f64) {
        self.comorbidity.insert(pair_key(a, b), m);
    }

    /// Registry indices of condition tasks, in sampling order.
    pub fn condition_indices(&self) -> Vec<usize> {
        self.tasks.with_role(TaskRole::Condition)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: String, msg: String| Err(Error::InvalidValue { key, msg });
        if self.n_users == 0 {
            return bad("n_users".into(), "must be >= 1".into());
        }
        if self.k_folds < 3 {
            return bad(
                "k_folds".into(),
                "must be >= 3 (train, dev and test folds)".into(),
            );
        }
        if self.n_users < self.k_folds {
            return bad(
                "n_users".into(),
                format!("must be >= k_folds ({})", self.k_folds),
            );
        }
        let conds = self.condition_indices();
        if conds.len() > MAX_CONDITIONS {
            return bad(
                "tasks".into(),
                format!("at most {MAX_CONDITIONS} condition tasks"),
            );
        }
        for &c in &conds {
            let name = &self.tasks.get(c).name;
            match self.prevalence.get(name) {
                Some(&p) if p > 0.0 && p < 1.0 => {}
                Some(&p) => {
                    return bad(
                        format!("prevalence.{name}"),
                        format!("{p} is not in (0, 1)"),
                    )
                }
                None => return bad(format!("prevalence.{name}"), "missing".into()),
            }
        }
        for name in self.prevalence.keys() {
            match self.tasks.index_of(name) {
                Some(i) if self.tasks.get(i).role == TaskRole::Condition => {}
                _ => return bad(format!("prevalence.{name}"), "not a condition task".into()),
            }
        }
        for ((a, b), &m) in &self.comorbidity {
            let key = format!("comorbidity.{a}.{b}");
            if !(m.is_finite() && m > 0.0) {
                return bad(key, format!("{m} is not > 0"));
            }
            for n in [a, b] {
                if !self.prevalence.contains_key(n) {
                    return bad(key, format!("`{n}` is not a condition task"));
                }
            }
            if a == b {
                return bad(key, "a condition cannot be comorbid with itself".into());
            }
        }
        if !(0.0..=1.0).contains(&self.gender_label_fraction) {
            return bad("gender_label_fraction".into(), "must be in [0, 1]".into());
        }
        if self.doc_length_min == 0 {
            return bad("doc_length_min".into(), "must be >= 1".into());
        }
        if self.doc_length_mean < self.doc_length_min {
            return bad("doc_length_mean".into(), "must be >= doc_length_min".into());
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad("signal_strength".into(), "must be >= 0".into());
        }
        Ok(())
    }
}

/// Calibrated sequential sampler for condition labels.
///
/// Condition `k` is positive with probability `base[k]` times the
/// multipliers of already-positive earlier conditions, clamped to (0,1).
/// Base rates are solved by exact enumeration so that each marginal equals
/// the configured prevalence.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSampler {
    /// Registry indices of the conditions, in sampling order.
    pub conditions: Vec<usize>,
    pub base: Vec<f64>,
    /// `multipliers[k][j]` for `j < k`.
    pub multipliers: Vec<Vec<f64>>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

impl LabelSampler {
    pub fn new(spec: &CohortSpec) -> Result<Self> {
        spec.validate()?;
        let conditions = spec.condition_indices();
        let names: Vec<&str> = conditions
            .iter()
            .map(|&c| spec.tasks.get(c).name.as_str())
            .collect();
        let multipliers: Vec<Vec<f64>> = (0..names.len())
            .map(|k| {
                (0..k)
                    .map(|j| spec.multiplier(names[k], names[j]))
                    .collect()
            })
            .collect();
        // joint[s] = P(earlier conditions == bit pattern s)
        let mut joint = vec![1.0];
        let mut base = Vec::with_capacity(names.len());
        for k in 0..names.len() {
            let target = spec.prevalence[names[k]];
            let lift: Vec<f64> = (0..joint.len())
                .map(|s| {
                    (0..k)
                        .filter(|j| s >> j & 1 == 1)
                        .map(|j| multipliers[k][j])
                        .product()
                })
                .collect();
            let marginal = |b: f64| -> f64 {
                joint
                    .iter()
                    .zip(&lift)
                    .map(|(p, l)| p * clamp_prob(b * l))
                    .sum()
            };
            let (mut lo, mut hi) = (0.0, 1.0);
            while marginal(hi) < target && hi < 1e12 {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if marginal(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let b = 0.5 * (lo + hi);
            base.push(b);
            let mut next = vec![0.0; joint.len() * 2];
            for (s, (&p, &l)) in joint.iter().zip(&lift).enumerate() {
                let q = clamp_prob(b * l);
                next[s] += p * (1.0 - q);
                next[s | 1 << k] += p * q;
            }
            joint = next;
        }
        Ok(LabelSampler {
            conditions,
            base,
            multipliers,
        })
    }

    /// Positive flags for each condition, in sampling order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.base.len());
        for k in 0..self.base.len() {
            let lift: f64 = (0..k)
                .filter(|&j| out[j])
                .map(|j| self.multipliers[k][j])
                .product();
            let p = clamp_prob(self.base[k] * lift);
            out.push(rng.random::<f64>() < p);
        }
        out
    }
}

/// Per-user ground truth before gender annotation is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentLabels {
    /// Indexed like the registry; `true` for a positive task.
    pub positive: Vec<bool>,
}

/// Draws one user's full latent label vector: conditions in sampling
/// order, neurotypical iff no condition, gender by fair coin.
pub fn sample_user<R: Rng + ?Sized>(
    spec: &CohortSpec,
    sampler: &LabelSampler,
    rng: &mut R,
) -> LatentLabels {
    let mut positive = vec![false; spec.tasks.len()];
    let conds = sampler.sample(rng);
    for (&c, &v) in sampler.conditions.iter().zip(&conds) {
        positive[c] = v;
    }
    let any = conds.iter().any(|&v| v);
    for t in spec.tasks.with_role(TaskRole::Control) {
        positive[t] = !any;
    }
    for t in spec.tasks.with_role(TaskRole::Demographic) {
        positive[t] = rng.random::<bool>();
    }
    LatentLabels { positive }
}

/// Draws latent labels for `spec.n_users` users from one stream.
pub fn sample_labels<R: Rng + ?Sized>(spec: &CohortSpec, rng: &mut R) -> Result<Vec<LatentLabels>> {
    let sampler = LabelSampler::new(spec)?;
    Ok((0..spec.n_users)
        .map(|_| sample_user(spec, &sampler, rng))
        .collect())
}

/// Character distributions: the shared base and one per signalling task.
#[derive(Clone, Debug, PartialEq)]
pub struct TextProfiles {
    pub base: Vec<f64>,
    /// Indexed like the registry; the control task carries no signal.
    pub by_task: Vec<Option<Vec<f64>>>,
}

impl TextProfiles {
    pub fn new(spec: &CohortSpec) -> Self {
        let total: f64 = BASE_WEIGHTS.iter().sum();
        let base: Vec<f64> = BASE_WEIGHTS.iter().map(|w| w / total).collect();
        let normal = Normal::new(0.0, PROFILE_SIGMA).expect("valid sigma");
        let by_task = spec
            .tasks
            .tasks()
            .iter()
            .map(|t| {
                if t.role == TaskRole::Control {
                    return None;
                }
                let mut rng = seed::derive_rng(spec.seed, &format!("profile/{}", t.name));
                let w: Vec<f64> = base
                    .iter()
                    .map(|b| b * normal.sample(&mut rng).exp())
                    .collect();
                let s: f64 = w.iter().sum();
                Some(w.into_iter().map(|v| v / s).collect())
            })
            .collect();
        TextProfiles { base, by_task }
    }

    /// Character distribution of a user with the given positive tasks.
    pub fn mixture(&self, positive: &[bool], signal_strength: f64) -> Vec<f64> {
        let active: Vec<&Vec<f64>> = positive
            .iter()
            .zip(&self.by_task)
            .filter_map(|(&p, prof)| if p { prof.as_ref() } else { None })
            .collect();
        let mut each = signal_strength;
        if each * active.len() as f64 > 1.0 {
            each = 1.0 / active.len() as f64;
        }
        let base_w = 1.0 - each * active.len() as f64;
        let mut out: Vec<f64> = self.base.iter().map(|b| b * base_w).collect();
        for prof in active {
            for (o, p) in out.iter_mut().zip(prof) {
                *o += each * p;
            }
        }
        out
    }
}

/// Draws a document: length `doc_length_min` plus a geometric excess with
/// mean `doc_length_mean - doc_length_min`, characters i.i.d. from the
/// user's mixture distribution.
pub fn generate_text<R: Rng + ?Sized>(
    labels: &LatentLabels,
    spec: &CohortSpec,
    profiles: &TextProfiles,
    rng: &mut R,
) -> String {
    let mix = profiles.mixture(&labels.positive, spec.signal_strength);
    let dist = WeightedIndex::new(&mix).expect("mixture has positive mass");
    let extra = (spec.doc_length_mean - spec.doc_length_min) as f64;
    let len = spec.doc_length_min
        + if extra > 0.0 {
            Geometric::new(1.0 / (1.0 + extra))
                .expect("valid p")
                .sample(rng) as usize
        } else {
            0
        };
    (0..len).map(|_| ALPHABET[dist.sample(rng)]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUser {
    pub user_id: String,
    /// Indexed like the registry; gender is masked outside the annotated subset.
    pub labels: Vec<Label>,
    pub latent: LatentLabels,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub tasks: TaskRegistry,
    pub users: Vec<SyntheticUser>,
}

impl Cohort {
    pub fn documents(&self) -> Vec<Document> {
        self.users
            .iter()
            .map(|u| Document {
                user_id: u.user_id.clone(),
                text: u.text.clone(),
            })
            .collect()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.users.iter().map(|u| u.user_id.clone()).collect()
    }

    pub fn label_matrix(&self) -> LabelMatrix {
        let rows: Vec<Vec<Label>> = self.users.iter().map(|u| u.labels.clone()).collect();
        LabelMatrix::from_rows(&rows).unwrap_or_else(|_| LabelMatrix::masked(0, self.tasks.len()))
    }

    /// Neurotypical flag per user, used to stratify folds.
    pub fn strata(&self) -> Vec<bool> {
        match self.tasks.with_role(TaskRole::Control).first() {
            Some(&c) => self.users.iter().map(|u| u.latent.positive[c]).collect(),
            None => vec![false; self.users.len()],
        }
    }

    pub fn positives(&self, task: usize) -> usize {
        self.users
            .iter()
            .filter(|u| u.labels[task] == Label::Positive)
            .count()
    }
}

/// Generates the cohort of `spec`. Each user is drawn from its own derived
/// stream, so output does not depend on thread count.
pub fn generate(spec: &CohortSpec) -> Result<Cohort> {
    let sampler = LabelSampler::new(spec)?;
    let profiles = TextProfiles::new(spec);
    let width = spec.n_users.to_string().len().max(5);
    let mut users: Vec<SyntheticUser> = (0..spec.n_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::derive_rng(spec.seed, &format!("user/{i}"));
            let latent = sample_user(spec, &sampler, &mut rng);
            let text = generate_text(&latent, spec, &profiles, &mut rng);
            let labels = latent
                .positive
                .iter()
                .map(|&p| Label::from_bool(p))
                .collect();
            SyntheticUser {
                user_id: format!("u{i:0width$}"),
                labels,
                latent,
                text,
            }
        })
        .collect();

    let demographic = spec.tasks.with_role(TaskRole::Demographic);
    if !demographic.is_empty() {
        let annotated = (spec.gender_label_fraction * spec.n_users as f64).round() as usize;
        let mut order: Vec<usize> = (0..spec.n_users).collect();
        order.shuffle(&mut seed::derive_rng(spec.seed, "annotate"));
        for &i in &order[annotated.min(spec.n_users)..] {
            for &t in &demographic {
                users[i].labels[t] = Label::Masked;
            }
        }
    }
    Ok(Cohort {
        tasks: spec.tasks.clone(),
        users,
    })
}

/// Fold index per user. The last fold is test, the one before it dev and
/// the rest train.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Folds {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl Folds {
    pub fn new(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        if k < 3 {
            return Err(Error::Invalid("need at least 3 folds".into()));
        }
        if let Some(f) = fold_of.iter().find(|&&f| f >= k) {
            return Err(Error::Invalid(format!("fold {f} out of range for k = {k}")));
        }
        Ok(Folds { k, fold_of })
    }

    pub fn role_of_fold(&self, fold: usize) -> FoldRole {
        if fold + 1 == self.k {
            FoldRole::Test
        } else if fold + 2 == self.k {
            FoldRole::Dev
        } else {
            FoldRole::Train
        }
    }

    pub fn role(&self, user: usize) -> FoldRole {
        self.role_of_fold(self.fold_of[user])
    }

    pub fn users_with(&self, role: FoldRole) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&u| self.role(u) == role)
            .collect()
    }

    pub fn train(&self) -> Vec<usize> {
        self.users_with(FoldRole::Train)
    }

    pub fn dev(&self) -> Vec<usize> {
        self.users_with(FoldRole::Dev)
    }

    pub fn test(&self) -> Vec<usize> {
        self.users_with(FoldRole::Test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Random partition into `k` folds of equal size (±1). With `strata`, each
/// stratum is shuffled separately and dealt round-robin, continuing the
/// deal across strata so global sizes stay balanced.
pub fn make_folds<R: Rng + ?Sized>(
    n_users: usize,
    k: usize,
    strata: Option<&[bool]>,
    rng: &mut R,
) -> Result<Folds> {
    if n_users < k {
        return Err(Error::Invalid(format!(
            "{n_users} users cannot fill {k} folds"
        )));
    }
    if let Some(s) = strata {
        if s.len() != n_users {
            return Err(Error::shape(
                "make_folds",
                format!("{n_users} strata flags"),
                format!("{}", s.len()),
            ));
        }
    }
    let groups: Vec<Vec<usize>> = match strata {
        Some(s) => [true, false]
            .iter()
            .map(|&flag| (0..n_users).filter(|&u| s[u] == flag).collect())
            .collect(),
        None => vec![(0..n_users).collect()],
    };
    let mut fold_of = vec![0; n_users];
    let mut next = 0usize;
    for mut g in groups {
        g.shuffle(rng);
        for u in g {
            fold_of[u] = next % k;
            next += 1;
        }
    }
    Folds::new(k, fold_of)
}
