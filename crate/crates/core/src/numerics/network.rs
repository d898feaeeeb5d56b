use rand::Rng;

use super::{
    affine_forward, affine_input_grad, affine_param_grad, sigmoid_scalar, CsrMatrix, LabelMatrix,
    Matrix,
};
use crate::error::{Error, Result};

/// Fully connected layer; `weights` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.fan_in() * self.fan_out() + self.bias.len()
    }
}

/// A shared ReLU trunk followed by independent heads. Every head is a stack
/// of ReLU layers ending in a single sigmoid unit.
///
/// An empty trunk means each head reads the input directly: logistic
/// regression is heads of one layer, a single-task MLP is one head of three.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Vec<Dense>>,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        match self.trunk.first() {
            Some(l) => l.fan_in(),
            None => self
                .heads
                .first()
                .and_then(|h| h.first())
                .map_or(0, Dense::fan_in),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(self.heads.iter().flatten())
            .map(Dense::param_count)
            .sum()
    }

    /// Sum of squared weights over every weight matrix (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.trunk
            .iter()
            .chain(self.heads.iter().flatten())
            .map(|l| l.weights.sq_norm())
            .sum()
    }

    /// Checks that consecutive layers agree and every head ends in one unit.
    pub fn validate(&self) -> Result<()> {
        let mut width = None;
        for (i, l) in self.trunk.iter().enumerate() {
            check_layer(l, width, &format!("trunk.{i}"))?;
            width = Some(l.fan_out());
        }
        if self.heads.is_empty() {
            return Err(Error::Invalid("network has no heads".into()));
        }
        for (t, head) in self.heads.iter().enumerate() {
            let mut w = width;
            if head.is_empty() {
                return Err(Error::Invalid(format!("head {t} has no layers")));
            }
            for (i, l) in head.iter().enumerate() {
                check_layer(l, w, &format!("head.{t}.{i}"))?;
                w = Some(l.fan_out());
            }
            if w != Some(1) {
                return Err(Error::Invalid(format!(
                    "head {t} does not end in a single unit"
                )));
            }
        }
        let input = self.input_dim();
        if self.trunk.is_empty() && self.heads.iter().any(|h| h[0].fan_in() != input) {
            return Err(Error::Invalid("heads disagree on input dimension".into()));
        }
        Ok(())
    }

    /// Deterministic scores, one column per head.
    pub fn forward(&self, x: &CsrMatrix) -> Result<Matrix> {
        self.check_input(x)?;
        let trunk_out = self.trunk_forward(x)?;
        let mut scores = Matrix::zeros(x.rows(), self.heads.len());
        for (t, head) in self.heads.iter().enumerate() {
            let tape = head_forward(
                head,
                trunk_out.as_ref().map_or(Input::Sparse(x), Input::Dense),
            )?;
            let out = tape.last().expect("non-empty head");
            for r in 0..x.rows() {
                scores.set(r, t, out.get(r, 0));
            }
        }
        Ok(scores)
    }

    /// Scores of a single head; skips all other heads.
    pub fn forward_head(&self, x: &CsrMatrix, head: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trunk_out = self.trunk_forward(x)?;
        let tape = head_forward(
            &self.heads[head],
            trunk_out.as_ref().map_or(Input::Sparse(x), Input::Dense),
        )?;
        Ok(tape.last().expect("non-empty head").as_slice().to_vec())
    }

    /// Output of the shared trunk (`None` when the trunk is empty).
    pub fn trunk_forward(&self, x: &CsrMatrix) -> Result<Option<Matrix>> {
        let tape = trunk_tape(&self.trunk, x)?;
        Ok(tape.into_iter().last())
    }

    fn check_input(&self, x: &CsrMatrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("{} input columns", self.input_dim()),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    /// Visits every tensor with a stable name, in declaration order:
    /// trunk layers then heads, weights before bias within a layer.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        for (i, l) in self.trunk.iter().enumerate() {
            f(&format!("trunk.{i}.weights"), l.weights.as_slice());
            f(&format!("trunk.{i}.bias"), &l.bias);
        }
        for (t, head) in self.heads.iter().enumerate() {
            for (i, l) in head.iter().enumerate() {
                f(&format!("head.{t}.{i}.weights"), l.weights.as_slice());
                f(&format!("head.{t}.{i}.bias"), &l.bias);
            }
        }
    }

    pub fn zeros_like(&self) -> Network {
        let z = |l: &Dense| Dense::zeros(l.fan_in(), l.fan_out());
        Network {
            trunk: self.trunk.iter().map(z).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| h.iter().map(z).collect())
                .collect(),
        }
    }
}

fn check_layer(l: &Dense, expected_in: Option<usize>, name: &str) -> Result<()> {
    if l.bias.len() != l.fan_out() {
        return Err(Error::shape(
            "layer",
            format!("{name}.bias[{}]", l.fan_out()),
            format!("{}", l.bias.len()),
        ));
    }
    if let Some(w) = expected_in {
        if l.fan_in() != w {
            return Err(Error::shape(
                "layer",
                format!("{name} fan_in {w}"),
                format!("{}", l.fan_in()),
            ));
        }
    }
    if l.fan_in() == 0 || l.fan_out() == 0 {
        return Err(Error::Invalid(format!("{name} has a zero dimension")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Input<'a> {
    Sparse(&'a CsrMatrix),
    Dense(&'a Matrix),
}

impl Input<'_> {
    fn affine(self, l: &Dense) -> Result<Matrix> {
        match self {
            Input::Sparse(x) => x.affine_forward(&l.weights, &l.bias),
            Input::Dense(x) => affine_forward(x, &l.weights, &l.bias),
        }
    }

    fn param_grad(self, d_out: &Matrix) -> (Matrix, Vec<f64>) {
        match self {
            Input::Sparse(x) => x.param_grad(d_out),
            Input::Dense(x) => affine_param_grad(x, d_out),
        }
    }
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Post-ReLU activations of each trunk layer.
fn trunk_tape(trunk: &[Dense], x: &CsrMatrix) -> Result<Vec<Matrix>> {
    let mut tape: Vec<Matrix> = Vec::with_capacity(trunk.len());
    for l in trunk {
        let input = tape.last().map_or(Input::Sparse(x), Input::Dense);
        let mut z = input.affine(l)?;
        relu_in_place(&mut z);
        tape.push(z);
    }
    Ok(tape)
}

/// Activations of each head layer; the last entry holds sigmoid outputs.
fn head_forward(head: &[Dense], input: Input<'_>) -> Result<Vec<Matrix>> {
    let mut tape: Vec<Matrix> = Vec::with_capacity(head.len());
    for (i, l) in head.iter().enumerate() {
        let src = tape.last().map_or(input, Input::Dense);
        let mut z = src.affine(l)?;
        if i + 1 == head.len() {
            for v in z.as_mut_slice() {
                *v = sigmoid_scalar(*v);
            }
        } else {
            relu_in_place(&mut z);
        }
        tape.push(z);
    }
    Ok(tape)
}

/// Gradient of one layer; shaped exactly like the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub d_weights: Matrix,
    pub d_bias: Vec<f64>,
}

/// Gradients for every trainable tensor. `trunk` is `None` when the trunk
/// was frozen for this pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub trunk: Option<Vec<LayerGrad>>,
    pub heads: Vec<Vec<LayerGrad>>,
}

impl NetworkGrad {
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        if let Some(trunk) = &self.trunk {
            for (i, g) in trunk.iter().enumerate() {
                f(&format!("trunk.{i}.weights"), g.d_weights.as_slice());
                f(&format!("trunk.{i}.bias"), &g.d_bias);
            }
        }
        for (t, head) in self.heads.iter().enumerate() {
            for (i, g) in head.iter().enumerate() {
                f(&format!("head.{t}.{i}.weights"), g.d_weights.as_slice());
                f(&format!("head.{t}.{i}.bias"), &g.d_bias);
            }
        }
    }

    /// First tensor holding a NaN or infinity, by name.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each_tensor(|name, v| {
            if bad.is_none() && v.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BackpropOptions {
    /// Coefficient of the squared-weight penalty.
    pub l2: f64,
    /// Skip gradients for the shared trunk.
    pub freeze_trunk: bool,
}

#[derive(Clone, Debug)]
pub struct Backprop {
    /// Sum of per-head masked losses plus the L2 penalty.
    pub loss: f64,
    /// Masked mean BCE of each head.
    pub head_losses: Vec<f64>,
    pub penalty: f64,
    pub grad: NetworkGrad,
}

impl Backprop {
    pub fn data_loss(&self) -> f64 {
        self.head_losses.iter().sum()
    }
}

/// Loss and exact gradient of `Σ_heads bce_masked + l2 · Σ‖W‖²`.
///
/// `targets` has one row per input row and one column per head. Masked
/// entries contribute exactly zero to both loss and gradient.
pub fn backprop(
    net: &Network,
    x: &CsrMatrix,
    targets: &LabelMatrix,
    opts: BackpropOptions,
) -> Result<Backprop> {
    net.check_input(x)?;
    if targets.rows() != x.rows() || targets.cols() != net.heads.len() {
        return Err(Error::shape(
            "backprop",
            format!("targets[{} x {}]", x.rows(), net.heads.len()),
            format!("targets[{} x {}]", targets.rows(), targets.cols()),
        ));
    }
    let batch = x.rows();
    let trunk_tape = trunk_tape(&net.trunk, x)?;
    let head_input = trunk_tape.last().map_or(Input::Sparse(x), Input::Dense);
    let need_trunk_grad = !opts.freeze_trunk && !net.trunk.is_empty();

    let mut head_losses = Vec::with_capacity(net.heads.len());
    let mut head_grads = Vec::with_capacity(net.heads.len());
    let mut d_trunk_out = need_trunk_grad
        .then(|| Matrix::zeros(batch, net.trunk.last().expect("non-empty").fan_out()));

    for (t, head) in net.heads.iter().enumerate() {
        let tape = head_forward(head, head_input)?;
        let out = tape.last().expect("non-empty head");

        // Fused sigmoid + BCE: dL/dz = (p - y) / n over observed rows.
        let n_obs = (0..batch)
            .filter(|&r| targets.get(r, t).is_observed())
            .count();
        let mut d_z = Matrix::zeros(batch, 1);
        let mut loss = 0.0;
        if n_obs > 0 {
            let inv_n = 1.0 / n_obs as f64;
            for r in 0..batch {
                if let Some(y) = targets.get(r, t).target() {
                    let p = out.get(r, 0);
                    loss += super::bce_term(p, y);
                    d_z.set(r, 0, (p - y) * inv_n);
                }
            }
            loss *= inv_n;
        }
        head_losses.push(loss);

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(head.len());
        for i in (0..head.len()).rev() {
            let input = if i == 0 {
                head_input
            } else {
                Input::Dense(&tape[i - 1])
            };
            let (mut d_w, d_b) = input.param_grad(&d_z);
            add_penalty_grad(&mut d_w, &head[i].weights, opts.l2);
            let needs_input_grad = i > 0 || d_trunk_out.is_some();
            if needs_input_grad {
                let mut d_in = affine_input_grad(&d_z, &head[i].weights);
                if i > 0 {
                    relu_backward(&mut d_in, &tape[i - 1]);
                    d_z = d_in;
                } else if let Some(acc) = d_trunk_out.as_mut() {
                    for (a, v) in acc.as_mut_slice().iter_mut().zip(d_in.as_slice()) {
                        *a += v;
                    }
                }
            }
            grads.push(LayerGrad {
                d_weights: d_w,
                d_bias: d_b,
            });
        }
        grads.reverse();
        head_grads.push(grads);
    }

    let trunk_grads = match d_trunk_out {
        None => None,
        Some(mut d_a) => {
            let mut grads = Vec::with_capacity(net.trunk.len());
            for i in (0..net.trunk.len()).rev() {
                relu_backward(&mut d_a, &trunk_tape[i]);
                let input = if i == 0 {
                    Input::Sparse(x)
                } else {
                    Input::Dense(&trunk_tape[i - 1])
                };
                let (mut d_w, d_b) = input.param_grad(&d_a);
                add_penalty_grad(&mut d_w, &net.trunk[i].weights, opts.l2);
                if i > 0 {
                    d_a = affine_input_grad(&d_a, &net.trunk[i].weights);
                }
                grads.push(LayerGrad {
                    d_weights: d_w,
                    d_bias: d_b,
                });
            }
            grads.reverse();
            Some(grads)
        }
    };

    let grad = NetworkGrad {
        trunk: trunk_grads,
        heads: head_grads,
    };
    if let Some(tensor) = grad.first_non_finite() {
        return Err(Error::NonFinite { tensor });
    }
    let penalty = if opts.l2 == 0.0 {
        0.0
    } else {
        opts.l2 * net.weight_sq_norm()
    };
    let loss = head_losses.iter().sum::<f64>() + penalty;
    Ok(Backprop {
        loss,
        head_losses,
        penalty,
        grad,
    })
}

/// Zeroes gradient entries where the layer's ReLU output was not positive.
fn relu_backward(d: &mut Matrix, activated: &Matrix) {
    for (g, &a) in d.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn add_penalty_grad(d_w: &mut Matrix, w: &Matrix, l2: f64) {
    if l2 == 0.0 {
        return;
    }
    let k = 2.0 * l2;
    for (g, &v) in d_w.as_mut_slice().iter_mut().zip(w.as_slice()) {
        *g += k * v;
    }
}

/// Per-head masked losses without gradients (evaluation mode).
pub(crate) fn head_losses(
    net: &Network,
    x: &CsrMatrix,
    targets: &LabelMatrix,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let scores = net.forward(x)?;
    let mut sums = vec![0.0; net.heads.len()];
    let mut counts = vec![0usize; net.heads.len()];
    for r in 0..x.rows() {
        for t in 0..net.heads.len() {
            if let Some(y) = targets.get(r, t).target() {
                sums[t] += super::bce_term(scores.get(r, t), y);
                counts[t] += 1;
            }
        }
    }
    Ok((sums, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Label;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mtl(input: usize, width: usize, tasks: usize, rng: &mut ChaCha8Rng) -> Network {
        Network {
            trunk: vec![Dense::glorot(input, width, rng)],
            heads: (0..tasks)
                .map(|_| {
                    vec![
                        Dense::glorot(width, width, rng),
                        Dense::glorot(width, 1, rng),
                    ]
                })
                .collect(),
        }
    }

    fn batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let mut x = CsrMatrix::empty(cols);
        for _ in 0..rows {
            let row: Vec<f64> = (0..cols)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            x.push_dense_row(&row).unwrap();
        }
        x
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = Network {
            trunk: vec![Dense::zeros(5, 3)],
            heads: vec![vec![Dense::zeros(3, 3), Dense::zeros(3, 1)]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = batch(4, 5, &mut rng);
        let targets = LabelMatrix::from_rows(&vec![vec![Label::Positive]; 4]).unwrap();
        let bp = backprop(&net, &x, &targets, BackpropOptions::default()).unwrap();
        assert!(net
            .forward(&x)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&p| p == 0.5));
        assert!((bp.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn penalty_gradient_is_two_lambda_w() {
        // Every target masked: the data gradient vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = mtl(6, 4, 2, &mut rng);
        let x = batch(3, 6, &mut rng);
        let targets = LabelMatrix::masked(3, 2);
        let l2 = 0.37;
        let bp = backprop(
            &net,
            &x,
            &targets,
            BackpropOptions {
                l2,
                freeze_trunk: false,
            },
        )
        .unwrap();
        let trunk = bp.grad.trunk.as_ref().unwrap();
        for (g, l) in trunk.iter().zip(&net.trunk) {
            for (a, w) in g.d_weights.as_slice().iter().zip(l.weights.as_slice()) {
                assert_eq!(*a, 2.0 * l2 * w);
            }
        }
        for (gh, h) in bp.grad.heads.iter().zip(&net.heads) {
            for (g, l) in gh.iter().zip(h) {
                for (a, w) in g.d_weights.as_slice().iter().zip(l.weights.as_slice()) {
                    assert_eq!(*a, 2.0 * l2 * w);
                }
                assert!(g.d_bias.iter().all(|&b| b == 0.0));
            }
        }
        assert!((bp.penalty - l2 * net.weight_sq_norm()).abs() < 1e-15);
    }

    #[test]
    fn frozen_trunk_returns_no_trunk_grad_and_same_head_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = mtl(7, 5, 3, &mut rng);
        let x = batch(6, 7, &mut rng);
        let rows: Vec<Vec<Label>> = (0..6)
            .map(|r| (0..3).map(|t| Label::from_bool((r + t) % 2 == 0)).collect())
            .collect();
        let targets = LabelMatrix::from_rows(&rows).unwrap();
        let full = backprop(
            &net,
            &x,
            &targets,
            BackpropOptions {
                l2: 0.1,
                freeze_trunk: false,
            },
        )
        .unwrap();
        let frozen = backprop(
            &net,
            &x,
            &targets,
            BackpropOptions {
                l2: 0.1,
                freeze_trunk: true,
            },
        )
        .unwrap();
        assert!(frozen.grad.trunk.is_none());
        assert_eq!(full.grad.heads, frozen.grad.heads);
        assert_eq!(full.loss, frozen.loss);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = mtl(4, 3, 1, &mut rng);
        net.heads[0][0].weights.set(0, 0, f64::NAN);
        let x = batch(2, 4, &mut rng);
        let targets =
            LabelMatrix::from_rows(&[vec![Label::Positive], vec![Label::Negative]]).unwrap();
        match backprop(&net, &x, &targets, BackpropOptions::default()) {
            Err(Error::NonFinite { tensor }) => {
                assert!(tensor.starts_with("head.0") || tensor.starts_with("trunk"))
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn validate_catches_mismatched_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = mtl(4, 3, 2, &mut rng);
        assert!(net.validate().is_ok());
        net.heads[1][1] = Dense::zeros(2, 1);
        assert!(net.validate().is_err());
    }
}
