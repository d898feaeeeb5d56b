#![allow(dead_code)]

use comorbid::numerics::{backprop, BackpropOptions, CsrMatrix, Label, LabelMatrix, Network};
use rand::Rng;

/// Sparse matrix with about `density` of entries non-zero.
pub fn random_csr<R: Rng>(rows: usize, cols: usize, density: f64, rng: &mut R) -> CsrMatrix {
    let mut m = CsrMatrix::empty(cols);
    for _ in 0..rows {
        let mut entries = Vec::new();
        for c in 0..cols {
            if rng.random::<f64>() < density {
                entries.push((c, rng.random_range(-1.0..1.0)));
            }
        }
        m.push_row(entries).unwrap();
    }
    m
}

/// Labels with roughly a third of entries masked.
pub fn random_labels<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> LabelMatrix {
    let rows: Vec<Vec<Label>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| match rng.random_range(0..3) {
                    0 => Label::Masked,
                    1 => Label::Positive,
                    _ => Label::Negative,
                })
                .collect()
        })
        .collect();
    LabelMatrix::from_rows(&rows).unwrap()
}

pub fn loss(net: &Network, x: &CsrMatrix, y: &LabelMatrix, l2: f64) -> f64 {
    backprop(
        net,
        x,
        y,
        BackpropOptions {
            l2,
            freeze_trunk: false,
        },
    )
    .unwrap()
    .loss
}

/// Every parameter of `net` as a mutable reference list, in the same order
/// as `NetworkGrad::for_each_tensor`.
pub fn param_slices(net: &mut Network) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for l in net.trunk.iter_mut() {
        out.push(l.weights.as_mut_slice());
        out.push(&mut l.bias);
    }
    for h in net.heads.iter_mut() {
        for l in h.iter_mut() {
            out.push(l.weights.as_mut_slice());
            out.push(&mut l.bias);
        }
    }
    out
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn max_grad_error(net: &Network, x: &CsrMatrix, y: &LabelMatrix, l2: f64, h: f64) -> f64 {
    let bp = backprop(
        net,
        x,
        y,
        BackpropOptions {
            l2,
            freeze_trunk: false,
        },
    )
    .unwrap();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    bp.grad.for_each_tensor(|_, g| analytic.push(g.to_vec()));
    let mut probe = net.clone();
    let n_tensors = param_slices(&mut probe).len();
    assert_eq!(n_tensors, analytic.len());
    let mut worst: f64 = 0.0;
    for t in 0..n_tensors {
        for i in 0..analytic[t].len() {
            let orig = param_slices(&mut probe)[t][i];
            param_slices(&mut probe)[t][i] = orig + h;
            let up = loss(&probe, x, y, l2);
            param_slices(&mut probe)[t][i] = orig - h;
            let down = loss(&probe, x, y, l2);
            param_slices(&mut probe)[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// O(n²) Mann-Whitney AUC with ties counted as one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}
