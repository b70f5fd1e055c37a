use rand::Rng;

use super::ops::{affine, affine_backward, relu, relu_backward};
use super::{GradStore, ParamId, ParamStore, Tensor};
use crate::Result;

/// Fully-connected layer `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<Tensor> {
        affine(x, p.value(self.weight), p.value(self.bias))
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&self, p: &ParamStore, x: &Tensor, dy: &Tensor, grads: &mut GradStore) -> Result<Tensor> {
        let g = affine_backward(x, p.value(self.weight), dy)?;
        if p.is_trainable(self.weight) {
            grads.accumulate(self.weight, &g.dweight);
        }
        if p.is_trainable(self.bias) {
            grads.accumulate(self.bias, &g.dbias);
        }
        Ok(g.dx)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add_filled(format!("{name}.gain"), &[dim], 1.0);
        let shift = store.add_zeros(format!("{name}.shift"), &[dim]);
        Self { gain, shift, dim }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        let d = x.cols();
        let gain = p.value(self.gain).data();
        let shift = p.value(self.shift).data();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_slice_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            for (i, out) in y.row_slice_mut(r).iter_mut().enumerate() {
                *out = gain[i] * xh[i] + shift[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, cache: &LayerNormCache, dy: &Tensor, grads: &mut GradStore) -> Tensor {
        let d = dy.cols();
        let gain = p.value(self.gain).data();
        let mut dgain = vec![0.0; d];
        let mut dshift = vec![0.0; d];
        let mut dx = dy.clone();
        for r in 0..dy.rows() {
            let g = dy.row_slice(r);
            let xh = cache.xhat.row_slice(r);
            let mut dxhat = vec![0.0; d];
            for i in 0..d {
                dgain[i] += g[i] * xh[i];
                dshift[i] += g[i];
                dxhat[i] = g[i] * gain[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            for (i, out) in dx.row_slice_mut(r).iter_mut().enumerate() {
                *out = is * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        if p.is_trainable(self.gain) {
            grads.accumulate(self.gain, &Tensor::vector(&dgain));
        }
        if p.is_trainable(self.shift) {
            grads.accumulate(self.shift, &Tensor::vector(&dshift));
        }
        dx
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

pub struct FeedForwardCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, rng),
            contract: Linear::new(store, &format!("{name}.contract"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let pre = self.expand.forward(p, x)?;
        let hidden = relu(&pre);
        let y = self.contract.forward(p, &hidden)?;
        Ok((
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &FeedForwardCache,
        dy: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let dh = self.contract.backward(p, &cache.hidden, dy, grads)?;
        let dpre = relu_backward(&cache.pre, &dh);
        self.expand.backward(p, &cache.x, &dpre, grads)
    }
}
