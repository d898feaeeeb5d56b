//! Mini-batch training: uniform user sampling with partial labels, masked
//! multi-task loss, Adagrad or SGD with L2 and input dropout, a joint phase
//! over all weights and a fine-tuning phase over task-specific layers, with
//! lowest-dev-loss checkpoint selection in both.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelParams};
use crate::numerics::{
    self, backprop, BackpropOptions, CsrMatrix, Dense, LabelMatrix, Network, NetworkGrad,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Optimizer {
    Adagrad,
    Sgd,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Adagrad => "adagrad",
            Optimizer::Sgd => "sgd",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adagrad" => Ok(Optimizer::Adagrad),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::InvalidValue {
                key: "optimizer".into(),
                msg: format!("`{s}` is not one of adagrad, sgd"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub joint_iters: usize,
    pub finetune_iters: usize,
    /// Dev-loss evaluation period, in iterations (mini-batch steps).
    pub eval_every: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub dropout_rate: f64,
    pub hidden_width: usize,
    pub shared_depth: usize,
    /// Fixed STL hidden width; `None` matches the MTL parameter count.
    pub stl_width: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adagrad_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Mtl,
            batch_size: 256,
            joint_iters: 5000,
            finetune_iters: 1000,
            eval_every: 10,
            learning_rate: 5e-2,
            l2: 1e-3,
            dropout_rate: 0.05,
            hidden_width: 256,
            shared_depth: 1,
            stl_width: None,
            seed: 0,
            optimizer: Optimizer::Adagrad,
            adagrad_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("joint_iters", self.joint_iters),
            ("finetune_iters", self.finetune_iters),
            ("eval_every", self.eval_every),
            ("hidden_width", self.hidden_width),
            ("shared_depth", self.shared_depth),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if self.stl_width == Some(0) {
            return bad("stl_width", "must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must be in [0, 1)");
        }
        if !(self.adagrad_eps.is_finite() && self.adagrad_eps > 0.0) {
            return bad("adagrad_eps", "must be > 0");
        }
        Ok(())
    }
}

/// Draws `batch_size` users uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Invalid(
            "cannot sample a batch from an empty training set".into(),
        ));
    }
    Ok((0..batch_size)
        .map(|_| train[rng.random_range(0..train.len())])
        .collect())
}

/// One Adagrad update of a flat tensor: `acc += g²; θ -= lr·g / (√acc + ε)`.
///
/// Both updates flush parameters that land in the subnormal range to zero.
/// Under an L2 penalty, weights of features absent from every batch decay
/// geometrically, and subnormal arithmetic is slow enough to dominate
/// training time.
pub fn adagrad_update(theta: &mut [f64], grad: &[f64], acc: &mut [f64], lr: f64, eps: f64) {
    for ((t, &g), a) in theta.iter_mut().zip(grad).zip(acc.iter_mut()) {
        *a += g * g;
        *t = flush(*t - lr * g / (a.sqrt() + eps));
    }
}

pub fn sgd_update(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (t, &g) in theta.iter_mut().zip(grad) {
        *t = flush(*t - lr * g);
    }
}

#[inline]
fn flush(v: f64) -> f64 {
    if v.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// Accumulated squared gradients, shaped like the network they serve.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    acc: Network,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(net: &Network, epsilon: f64) -> Self {
        AdagradState {
            acc: net.zeros_like(),
            epsilon,
        }
    }

    pub fn accumulators(&self) -> &Network {
        &self.acc
    }
}

/// Pairs every trainable tensor with its gradient (and optimizer slot).
fn for_each_update(
    net: &mut Network,
    acc: Option<&mut Network>,
    grad: &NetworkGrad,
    mut f: impl FnMut(&mut [f64], &[f64], Option<&mut [f64]>),
) -> Result<()> {
    fn layer(
        l: &mut Dense,
        a: Option<&mut Dense>,
        g: &numerics::LayerGrad,
        f: &mut impl FnMut(&mut [f64], &[f64], Option<&mut [f64]>),
    ) {
        match a {
            Some(a) => {
                f(
                    l.weights.as_mut_slice(),
                    g.d_weights.as_slice(),
                    Some(a.weights.as_mut_slice()),
                );
                f(&mut l.bias, &g.d_bias, Some(&mut a.bias));
            }
            None => {
                f(l.weights.as_mut_slice(), g.d_weights.as_slice(), None);
                f(&mut l.bias, &g.d_bias, None);
            }
        }
    }
    if grad.heads.len() != net.heads.len() {
        return Err(Error::shape(
            "optimizer step",
            format!("{} heads", net.heads.len()),
            format!("{}", grad.heads.len()),
        ));
    }
    let mut acc = acc;
    if let Some(tg) = &grad.trunk {
        for (i, (l, g)) in net.trunk.iter_mut().zip(tg).enumerate() {
            layer(l, acc.as_mut().map(|a| &mut a.trunk[i]), g, &mut f);
        }
    }
    for (t, (head, hg)) in net.heads.iter_mut().zip(&grad.heads).enumerate() {
        for (i, (l, g)) in head.iter_mut().zip(hg).enumerate() {
            layer(l, acc.as_mut().map(|a| &mut a.heads[t][i]), g, &mut f);
        }
    }
    Ok(())
}

fn check_params(net: &Network) -> Result<()> {
    let mut bad = None;
    net.for_each_tensor(|name, v| {
        if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(tensor) => Err(Error::NonFinite { tensor }),
        None => Ok(()),
    }
}

/// Adagrad step over every tensor present in `grad` (a frozen trunk is skipped).
pub fn adagrad_step(
    net: &mut Network,
    grad: &NetworkGrad,
    state: &mut AdagradState,
    learning_rate: f64,
) -> Result<()> {
    let eps = state.epsilon;
    for_each_update(net, Some(&mut state.acc), grad, |theta, g, acc| {
        adagrad_update(theta, g, acc.expect("accumulator"), learning_rate, eps)
    })?;
    check_params(net)
}

pub fn sgd_step(net: &mut Network, grad: &NetworkGrad, learning_rate: f64) -> Result<()> {
    for_each_update(net, None, grad, |theta, g, _| {
        sgd_update(theta, g, learning_rate)
    })?;
    check_params(net)
}

enum OptState {
    Adagrad(AdagradState),
    Sgd,
}

impl OptState {
    fn new(cfg: &TrainConfig, net: &Network) -> Self {
        match cfg.optimizer {
            Optimizer::Adagrad => OptState::Adagrad(AdagradState::new(net, cfg.adagrad_eps)),
            Optimizer::Sgd => OptState::Sgd,
        }
    }

    fn step(&mut self, net: &mut Network, grad: &NetworkGrad, lr: f64) -> Result<()> {
        match self {
            OptState::Adagrad(s) => adagrad_step(net, grad, s, lr),
            OptState::Sgd => sgd_step(net, grad, lr),
        }
    }
}

/// Features and labels of one network's heads, plus the fold split.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub x: &'a CsrMatrix,
    /// One row per user in `x`, one column per head.
    pub y: &'a LabelMatrix,
    pub train: &'a [usize],
    pub dev: &'a [usize],
}

impl TrainData<'_> {
    fn check(&self, net: &Network) -> Result<()> {
        if self.y.rows() != self.x.rows() || self.y.cols() != net.n_heads() {
            return Err(Error::shape(
                "train data",
                format!("labels[{} x {}]", self.x.rows(), net.n_heads()),
                format!("labels[{} x {}]", self.y.rows(), self.y.cols()),
            ));
        }
        if self.train.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let train: HashSet<usize> = self.train.iter().copied().collect();
        if self.dev.iter().any(|d| train.contains(d)) {
            return Err(Error::Invalid("train and dev sets overlap".into()));
        }
        if self
            .train
            .iter()
            .chain(self.dev)
            .any(|&i| i >= self.x.rows())
        {
            return Err(Error::Invalid("split index out of range".into()));
        }
        Ok(())
    }
}

const EVAL_CHUNK: usize = 512;

/// Mean masked loss of each head over `rows`, in eval mode. Heads with no
/// labeled rows report 0.
pub fn head_dev_losses(
    net: &Network,
    x: &CsrMatrix,
    y: &LabelMatrix,
    rows: &[usize],
) -> Result<Vec<f64>> {
    let heads = net.n_heads();
    let cols: Vec<usize> = (0..heads).collect();
    let mut sums = vec![0.0; heads];
    let mut counts = vec![0usize; heads];
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (s, c) =
            numerics::network::head_losses(net, &x.select_rows(chunk), &y.select(chunk, &cols))?;
        for t in 0..heads {
            sums[t] += s[t];
            counts[t] += c[t];
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean mini-batch data loss since the previous point; the iteration-0
    /// point holds the full training-set loss.
    pub train_loss: f64,
    /// Dev loss summed over heads.
    pub dev_loss: f64,
    pub head_dev_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Network,
    pub iteration: usize,
    pub dev_loss: f64,
}

#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub best: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Network after the last iteration (not the selected checkpoint).
    pub last: Network,
    opt: Option<AdagradState>,
}

fn batch_step<R: Rng + ?Sized>(
    net: &mut Network,
    opt: &mut OptState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    freeze_trunk: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let rows = sample_batch(data.train, cfg.batch_size, rng)?;
    let mut xb = data.x.select_rows(&rows);
    xb.apply_dropout(cfg.dropout_rate, rng)?;
    let cols: Vec<usize> = (0..net.n_heads()).collect();
    let yb = data.y.select(&rows, &cols);
    let bp = backprop(
        net,
        &xb,
        &yb,
        BackpropOptions {
            l2: cfg.l2,
            freeze_trunk,
        },
    )?;
    opt.step(net, &bp.grad, cfg.learning_rate)?;
    Ok(bp.head_losses)
}

fn check_dev(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, loss })
    }
}

/// Joint phase: `joint_iters` steps over all weights, selecting the
/// iterate with the lowest summed dev loss (earliest on ties).
pub fn train_joint<R: Rng + ?Sized>(
    net: Network,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<JointOutcome> {
    cfg.validate()?;
    net.validate()?;
    data.check(&net)?;
    let mut net = net;
    let mut opt = OptState::new(cfg, &net);

    let train_losses = head_dev_losses(&net, data.x, data.y, data.train)?;
    let dev = head_dev_losses(&net, data.x, data.y, data.dev)?;
    let dev_loss: f64 = dev.iter().sum();
    check_dev(dev_loss, 0)?;
    let mut curve = vec![CurvePoint {
        iteration: 0,
        train_loss: train_losses.iter().sum(),
        dev_loss,
        head_dev_losses: dev,
    }];
    let mut best = Checkpoint {
        params: net.clone(),
        iteration: 0,
        dev_loss,
    };

    let mut running = 0.0;
    let mut since = 0usize;
    for it in 1..=cfg.joint_iters {
        let losses = batch_step(&mut net, &mut opt, &data, cfg, false, rng)?;
        running += losses.iter().sum::<f64>();
        since += 1;
        if it % cfg.eval_every == 0 {
            let dev = head_dev_losses(&net, data.x, data.y, data.dev)?;
            let dev_loss: f64 = dev.iter().sum();
            check_dev(dev_loss, it)?;
            if dev_loss < best.dev_loss {
                best = Checkpoint {
                    params: net.clone(),
                    iteration: it,
                    dev_loss,
                };
            }
            curve.push(CurvePoint {
                iteration: it,
                train_loss: running / since as f64,
                dev_loss,
                head_dev_losses: dev,
            });
            running = 0.0;
            since = 0;
        }
    }
    let opt = match opt {
        OptState::Adagrad(s) => Some(s),
        OptState::Sgd => None,
    };
    Ok(JointOutcome {
        best,
        curve,
        last: net,
        opt,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCheckpoint {
    pub iteration: usize,
    pub dev_loss: f64,
    /// Whether the head had any labeled dev users; without them selection
    /// falls back to the final iterate.
    pub had_dev_labels: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Trunk of the input network, each head at its own best iterate.
    pub net: Network,
    pub heads: Vec<HeadCheckpoint>,
    pub curve: Vec<CurvePoint>,
}

/// Fine-tuning phase: the shared trunk is frozen and every head (its
/// hidden layer and output unit) is updated for `finetune_iters` steps on
/// its own masked loss. Heads are disjoint given the frozen trunk, so one
/// backward pass over a shared batch yields each head's own gradient.
/// Each head keeps the iterate with its lowest dev loss; the input network
/// is the iteration-0 candidate.
pub fn finetune_heads<R: Rng + ?Sized>(
    net: Network,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    finetune_with_state(net, data, cfg, None, rng)
}

fn finetune_with_state<R: Rng + ?Sized>(
    net: Network,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    state: Option<AdagradState>,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    net.validate()?;
    data.check(&net)?;
    let mut net = net;
    let mut opt = match (cfg.optimizer, state) {
        (Optimizer::Adagrad, Some(s)) => OptState::Adagrad(s),
        _ => OptState::new(cfg, &net),
    };
    let labeled: Vec<bool> = (0..net.n_heads())
        .map(|t| data.dev.iter().any(|&r| data.y.get(r, t).is_observed()))
        .collect();

    let dev = head_dev_losses(&net, data.x, data.y, data.dev)?;
    let dev_loss: f64 = dev.iter().sum();
    check_dev(dev_loss, 0)?;
    let mut best_heads: Vec<Vec<Dense>> = net.heads.clone();
    let mut best: Vec<HeadCheckpoint> = dev
        .iter()
        .zip(&labeled)
        .map(|(&l, &had)| HeadCheckpoint {
            iteration: 0,
            dev_loss: l,
            had_dev_labels: had,
        })
        .collect();
    let mut curve = vec![CurvePoint {
        iteration: 0,
        train_loss: head_dev_losses(&net, data.x, data.y, data.train)?
            .iter()
            .sum(),
        dev_loss,
        head_dev_losses: dev,
    }];

    let mut running = 0.0;
    let mut since = 0usize;
    for it in 1..=cfg.finetune_iters {
        let losses = batch_step(&mut net, &mut opt, &data, cfg, true, rng)?;
        running += losses.iter().sum::<f64>();
        since += 1;
        if it % cfg.eval_every == 0 {
            let dev = head_dev_losses(&net, data.x, data.y, data.dev)?;
            let dev_loss: f64 = dev.iter().sum();
            check_dev(dev_loss, it)?;
            for (t, &l) in dev.iter().enumerate() {
                if labeled[t] && l < best[t].dev_loss {
                    best[t].iteration = it;
                    best[t].dev_loss = l;
                    best_heads[t] = net.heads[t].clone();
                }
            }
            curve.push(CurvePoint {
                iteration: it,
                train_loss: running / since as f64,
                dev_loss,
                head_dev_losses: dev,
            });
            running = 0.0;
            since = 0;
        }
    }
    let final_dev = curve
        .last()
        .map(|p| p.head_dev_losses.clone())
        .unwrap_or_default();
    for t in 0..net.n_heads() {
        if !labeled[t] {
            best_heads[t] = net.heads[t].clone();
            best[t].iteration = cfg.finetune_iters;
            best[t].dev_loss = final_dev.get(t).copied().unwrap_or(0.0);
        }
    }
    Ok(FinetuneOutcome {
        net: Network {
            trunk: net.trunk,
            heads: best_heads,
        },
        heads: best,
        curve,
    })
}

/// Training record of one network within a model.
#[derive(Clone, Debug)]
pub struct NetReport {
    /// Task indices (into the model's registry) served by this network.
    pub tasks: Vec<usize>,
    pub joint_curve: Vec<CurvePoint>,
    pub joint_best_iteration: usize,
    pub joint_best_dev_loss: f64,
    pub finetune_curve: Vec<CurvePoint>,
    pub heads: Vec<HeadCheckpoint>,
}

impl NetReport {
    /// `(iteration, train_loss, dev_loss)` rows of both phases; fine-tuning
    /// iterations continue the joint count.
    pub fn curve_rows(&self) -> Vec<(usize, f64, f64)> {
        let offset = self.joint_curve.last().map_or(0, |p| p.iteration);
        self.joint_curve
            .iter()
            .map(|p| (p.iteration, p.train_loss, p.dev_loss))
            .chain(
                self.finetune_curve
                    .iter()
                    .skip(1)
                    .map(|p| (offset + p.iteration, p.train_loss, p.dev_loss)),
            )
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub reports: Vec<NetReport>,
}

/// Runs the full two-phase schedule for one network.
pub fn train_network(
    net: Network,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    stream: &str,
) -> Result<(Network, NetReport)> {
    let mut rng = seed::derive_rng(cfg.seed, stream);
    let joint = train_joint(net, data, cfg, &mut rng)?;
    let JointOutcome {
        best, curve, opt, ..
    } = joint;
    let ft = finetune_with_state(best.params, data, cfg, opt, &mut rng)?;
    let report = NetReport {
        tasks: Vec::new(),
        joint_curve: curve,
        joint_best_iteration: best.iteration,
        joint_best_dev_loss: best.dev_loss,
        finetune_curve: ft.curve,
        heads: ft.heads,
    };
    Ok((ft.net, report))
}

/// Trains every network of `model` with the full schedule.
///
/// `labels` has one column per task of the model's registry. STL networks
/// each see only their own task's column and draw from a stream named
/// after that task.
pub fn train_model(
    model: ModelParams,
    x: &CsrMatrix,
    labels: &LabelMatrix,
    train: &[usize],
    dev: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if labels.cols() != model.tasks.len() {
        return Err(Error::shape(
            "train_model",
            format!("{} label columns", model.tasks.len()),
            format!("{}", labels.cols()),
        ));
    }
    let all_rows: Vec<usize> = (0..labels.rows()).collect();
    let ModelParams {
        kind,
        tasks,
        nets,
        meta,
    } = model;
    let mut trained = Vec::with_capacity(nets.len());
    let mut reports = Vec::with_capacity(nets.len());
    match kind {
        ModelKind::Stl => {
            for (t, net) in nets.into_iter().enumerate() {
                let y = labels.select(&all_rows, &[t]);
                let data = TrainData {
                    x,
                    y: &y,
                    train,
                    dev,
                };
                let (net, mut report) =
                    train_network(net, data, cfg, &format!("train/stl/{}", tasks.get(t).name))?;
                report.tasks = vec![t];
                trained.push(net);
                reports.push(report);
            }
        }
        ModelKind::Lr | ModelKind::Mtl => {
            let net = nets
                .into_iter()
                .next()
                .ok_or_else(|| Error::Invalid("model has no network".into()))?;
            let data = TrainData {
                x,
                y: labels,
                train,
                dev,
            };
            let (net, mut report) = train_network(net, data, cfg, &format!("train/{kind}"))?;
            report.tasks = (0..tasks.len()).collect();
            trained.push(net);
            reports.push(report);
        }
    }
    Ok(TrainedModel {
        params: ModelParams {
            kind,
            tasks,
            nets: trained,
            meta,
        },
        reports,
    })
}
