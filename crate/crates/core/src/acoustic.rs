//! Sum-of-posteriors compression and the acoustic projection.

use rand::Rng;

use crate::nn::{GradStore, Linear, ParamStore, Tensor};
use crate::posteriors::PosteriorMatrix;
use crate::{Error, Result};

/// Lower clamp applied to `-inf` (never-observed) SoP entries before the
/// affine layer; `exp(-745)` is the smallest positive subnormal.
pub const SOP_FLOOR: f64 = -745.0;

/// Log of the frame-averaged posterior distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoPVector {
    values: Vec<f64>,
    frames: usize,
}

impl SoPVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.exp()).collect()
    }
}

/// `SoP[t] = logsumexp_f(l_f[t]) − ln F`, with per-class max subtraction.
pub fn sum_of_posteriors(m: &PosteriorMatrix) -> Result<SoPVector> {
    let (frames, classes) = (m.frames(), m.classes());
    if m.values().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("posterior matrix".into()));
    }
    let mut maxima = vec![f64::NEG_INFINITY; classes];
    for f in 0..frames {
        for (mx, &v) in maxima.iter_mut().zip(m.row(f)) {
            *mx = mx.max(v);
        }
    }
    let mut sums = vec![0.0; classes];
    for f in 0..frames {
        for ((s, &v), &mx) in sums.iter_mut().zip(m.row(f)).zip(&maxima) {
            if mx > f64::NEG_INFINITY {
                *s += (v - mx).exp();
            }
        }
    }
    let log_f = (frames as f64).ln();
    let values = maxima
        .iter()
        .zip(&sums)
        .map(|(&mx, &s)| {
            if mx == f64::NEG_INFINITY {
                mx
            } else {
                mx + s.ln() - log_f
            }
        })
        .collect();
    Ok(SoPVector { values, frames })
}

/// Shannon entropy (nats) of `exp(SoP)`, with `0·ln 0 = 0`.
pub fn sop_entropy(s: &SoPVector) -> f64 {
    s.values
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * l
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Affine map from the SoP vector to the acoustic embedding.
#[derive(Debug, Clone)]
pub struct AcousticProjection {
    pub linear: Linear,
    pub include_blank: bool,
}

impl AcousticProjection {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        out_dim: usize,
        include_blank: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let in_dim = vocab_size + usize::from(include_blank);
        Self {
            linear: Linear::new(store, "acoustic.projection", in_dim, out_dim, rng),
            include_blank,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    /// SoP as a clamped `1×C` row, blank dropped unless configured.
    pub fn input_row(&self, s: &SoPVector) -> Result<Tensor> {
        let n = s.len() - usize::from(!self.include_blank);
        if n != self.linear.in_dim {
            return Err(Error::Shape {
                op: "acoustic_embed",
                left: vec![1, n],
                right: vec![self.linear.in_dim, self.linear.out_dim],
            });
        }
        let row: Vec<f64> = s.values[..n].iter().map(|v| v.max(SOP_FLOOR)).collect();
        Ok(Tensor::row(&row))
    }

    pub fn forward(&self, p: &ParamStore, s: &SoPVector) -> Result<(Tensor, Tensor)> {
        let x = self.input_row(s)?;
        let y = self.linear.forward(p, &x)?;
        Ok((y, x))
    }

    pub fn backward(&self, p: &ParamStore, input: &Tensor, dy: &Tensor, grads: &mut GradStore) -> Result<()> {
        self.linear.backward(p, input, dy, grads).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> PosteriorMatrix {
        let c = rows[0].len();
        let values = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        PosteriorMatrix::new(rows.len(), c, values).unwrap()
    }

    #[test]
    fn single_frame_is_identity() {
        let m = matrix(&[&[0.7, 0.2, 0.1]]);
        assert_eq!(sum_of_posteriors(&m).unwrap().values(), m.row(0));
    }

    #[test]
    fn uniform_frames() {
        let c = 5;
        let m = matrix(&[&[0.2; 5], &[0.2; 5], &[0.2; 5]]);
        for v in sum_of_posteriors(&m).unwrap().values() {
            assert!((v + (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_frame_average() {
        let m = matrix(&[&[0.8, 0.2], &[0.4, 0.6]]);
        let s = sum_of_posteriors(&m).unwrap();
        assert!((s.values()[0] - 0.6f64.ln()).abs() < 1e-12);
        assert!((s.values()[1] - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn handles_negative_infinity_and_tiny_values() {
        let ninf = f64::NEG_INFINITY;
        let m = PosteriorMatrix::new(2, 3, vec![0.0, ninf, ninf, 0.0, ninf, ninf]).unwrap();
        let s = sum_of_posteriors(&m).unwrap();
        assert_eq!(s.values()[1], ninf);
        assert_eq!(sop_entropy(&s), 0.0);

        let tiny: f64 = -700.0;
        let rest = (1.0 - 2.0 * tiny.exp()).ln();
        let m = PosteriorMatrix::new(1, 3, vec![tiny, tiny, rest]).unwrap();
        let s = sum_of_posteriors(&m).unwrap();
        assert!((s.values()[0] - tiny).abs() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        let uniform = sum_of_posteriors(&matrix(&[&[0.25; 4]])).unwrap();
        assert!((sop_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        let two = sum_of_posteriors(&matrix(&[&[0.6, 0.4]])).unwrap();
        let expected = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert!((sop_entropy(&two) - expected).abs() < 1e-12);
        assert!((sop_entropy(&two) - 0.673_011_667).abs() < 1e-9);
    }

    #[test]
    fn projection_identity_and_zero_weight() {
        let mut store = ParamStore::new();
        let mut r = crate::nn::rng(0);
        let proj = AcousticProjection::new(&mut store, 2, 3, true, &mut r);
        let m = matrix(&[&[0.5, 0.3, 0.2]]);
        let s = sum_of_posteriors(&m).unwrap();

        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        *store.value_mut(proj.linear.weight) = eye;
        let (y, _) = proj.forward(&store, &s).unwrap();
        assert_eq!(y.data(), s.values());

        *store.value_mut(proj.linear.weight) = Tensor::zeros(&[3, 3]);
        *store.value_mut(proj.linear.bias) = Tensor::vector(&[1.0, 2.0, 3.0]);
        assert_eq!(proj.forward(&store, &s).unwrap().0.data(), &[1.0, 2.0, 3.0]);

        let bad = sum_of_posteriors(&matrix(&[&[0.5, 0.5]])).unwrap();
        assert!(proj.forward(&store, &bad).is_err());
    }
}
