//! Stateless differentiable operations with explicit backward passes.

use super::tensor::{check_matrix, matmul, matmul_nt, matmul_tn};
use super::Tensor;
use crate::{Error, Result};

/// Numerically stable `log Σ exp(x)`. Returns `-inf` for an empty or
/// all-`-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    softmax_in_place(&mut v);
    v
}

/// `out = x · weight + bias` for `x: B×I`, `weight: I×O`, `bias: O`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_matrix("affine", x)?;
    check_matrix("affine", weight)?;
    if x.cols() != weight.rows() {
        return Err(Error::Shape {
            op: "affine",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if bias.len() != weight.cols() {
        return Err(Error::Shape {
            op: "affine bias",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = matmul(x, weight)?;
    let o = weight.cols();
    for r in 0..out.rows() {
        for (v, b) in out.row_slice_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    debug_assert_eq!(out.cols(), o);
    Ok(out)
}

pub struct AffineGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn affine_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let dx = matmul_nt(dy, weight)?;
    let dweight = matmul_tn(x, dy)?;
    let mut dbias = vec![0.0; dy.cols()];
    for r in 0..dy.rows() {
        for (b, g) in dbias.iter_mut().zip(dy.row_slice(r)) {
            *b += g;
        }
    }
    Ok(AffineGrads {
        dx,
        dweight,
        dbias: Tensor::vector(&dbias),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data_mut().iter_mut().zip(x.data()).for_each(|(g, &v)| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

/// Cross-entropy of one logit row against `target`. Returns the loss and
/// `softmax - onehot`.
pub fn cross_entropy_row(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    let lse = logsumexp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a `B×C` batch; gradient is `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    weighted_softmax_cross_entropy(logits, targets, None)
}

/// Weighted mean `Σ w_b·CE_b / Σ w_b`; `None` means unit weights.
pub fn weighted_softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, Tensor)> {
    check_matrix("softmax_cross_entropy", logits)?;
    let b = logits.rows();
    if targets.len() != b {
        return Err(Error::Shape {
            op: "softmax_cross_entropy targets",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(w) = weights {
        if w.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy weights",
                left: logits.shape().to_vec(),
                right: vec![w.len()],
            });
        }
    }
    let total: f64 = weights.map_or(b as f64, |w| w.iter().sum());
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &t) in targets.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[r]) / total;
        let (l, g) = cross_entropy_row(logits.row_slice(r), t)?;
        loss += w * l;
        grad.extend(g.into_iter().map(|v| v * w));
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Column-wise mean of a `K×D` matrix, returned as `1×D`.
pub fn mean_over_rows(x: &Tensor) -> Result<Tensor> {
    check_matrix("mean_over_rows", x)?;
    let k = x.rows();
    let mut out = vec![0.0; x.cols()];
    for r in 0..k {
        for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= k as f64);
    Ok(Tensor::row(&out))
}

pub fn mean_over_rows_backward(k: usize, dy: &Tensor) -> Tensor {
    let d = dy.len();
    let g: Vec<f64> = dy.data().iter().map(|v| v / k as f64).collect();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        data.extend_from_slice(&g);
    }
    Tensor::new(vec![k, d], data).expect("mean backward shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_identity_and_zero_weight() {
        let x = m(&[&[1.0, 2.0]]);
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(
            affine(&x, &eye, &Tensor::vector(&[0.0, 0.0])).unwrap().data(),
            &[1.0, 2.0]
        );
        assert_eq!(
            affine(&x, &zero, &Tensor::vector(&[3.0, 4.0])).unwrap().data(),
            &[3.0, 4.0]
        );
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let err = affine(&x, &w, &Tensor::zeros(&[2])).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_forward() {
        assert_eq!(relu(&Tensor::vector(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::vector(&[-3.0, -0.5])).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&Tensor::vector(&[-1.0, 0.0, 2.0]), &Tensor::vector(&[1.0; 3]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let c = 7;
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[1, c]), &[3]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);

        let (loss, g) = softmax_cross_entropy(&m(&[&[0.0, 1000.0, 0.0]]), &[1]).unwrap();
        assert!(loss.abs() < 1e-12 && g.is_finite());
        assert!(softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let logits = m(&[&[0.3, -1.2, 2.0], &[5.0, 4.0, -3.0]]);
        let mut shifted = logits.clone();
        for (r, c) in [(0, 17.5), (1, -250.0)] {
            shifted.row_slice_mut(r).iter_mut().for_each(|v| *v += c);
        }
        let (a, _) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        let (b, _) = softmax_cross_entropy(&shifted, &[2, 0]).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mean_rows() {
        assert_eq!(
            mean_over_rows(&m(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap().data(),
            &[2.0, 2.0]
        );
        assert_eq!(mean_over_rows(&m(&[&[4.0, 5.0]])).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn logsumexp_edges() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert!((logsumexp(&[-700.0, -700.0]) - (-700.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
