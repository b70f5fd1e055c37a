use rand::Rng;

use super::layers::Linear;
use super::ops::softmax_in_place;
use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{GradStore, ParamStore, Tensor};
use crate::{Error, Result};

/// Multi-head scaled dot-product self-attention over the rows of a `K×D`
/// matrix. No masking: every row attends to every row, so the layer is
/// equivariant to row permutations.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Vec<Tensor>,
    context: Tensor,
}

fn head_cols(x: &Tensor, h: usize, dh: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.rows() * dh);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row_slice(r)[h * dh..(h + 1) * dh]);
    }
    Tensor::new(vec![x.rows(), dh], data).expect("head slice")
}

fn put_head_cols(dst: &mut Tensor, src: &Tensor, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_slice_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row_slice(r));
    }
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        if x.shape().len() != 2 || x.cols() != self.dim {
            return Err(Error::Shape {
                op: "self_attention",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.dim],
            });
        }
        let q = self.query.forward(p, x)?;
        let k = self.key.forward(p, x)?;
        let v = self.value.forward(p, x)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut context = Tensor::zeros(&[x.rows(), self.dim]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (head_cols(&q, h, dh), head_cols(&k, h, dh), head_cols(&v, h, dh));
            let mut scores = matmul_nt(&qh, &kh)?;
            scores.scale(scale);
            for r in 0..scores.rows() {
                softmax_in_place(scores.row_slice_mut(r));
            }
            let oh = matmul(&scores, &vh)?;
            put_head_cols(&mut context, &oh, h, dh);
            weights.push(scores);
        }
        let y = self.output.forward(p, &context)?;
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                weights,
                context,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &AttentionCache,
        dy: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let dcontext = self.output.backward(p, &cache.context, dy, grads)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = cache.x.rows();
        let mut dq = Tensor::zeros(&[rows, self.dim]);
        let mut dk = Tensor::zeros(&[rows, self.dim]);
        let mut dv = Tensor::zeros(&[rows, self.dim]);
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = head_cols(&cache.q, h, dh);
            let kh = head_cols(&cache.k, h, dh);
            let vh = head_cols(&cache.v, h, dh);
            let doh = head_cols(&dcontext, h, dh);
            let da = matmul_nt(&doh, &vh)?;
            let dvh = matmul_tn(a, &doh)?;
            // softmax backward, row by row
            let mut ds = da.clone();
            for r in 0..rows {
                let arow = a.row_slice(r);
                let dot: f64 = arow.iter().zip(da.row_slice(r)).map(|(x, y)| x * y).sum();
                for (s, (&w, &g)) in ds.row_slice_mut(r).iter_mut().zip(arow.iter().zip(da.row_slice(r))) {
                    *s = w * (g - dot) * scale;
                }
            }
            put_head_cols(&mut dq, &matmul(&ds, &kh)?, h, dh);
            put_head_cols(&mut dk, &matmul_tn(&ds, &qh)?, h, dh);
            put_head_cols(&mut dv, &dvh, h, dh);
        }
        let mut dx = self.query.backward(p, &cache.x, &dq, grads)?;
        dx.add_assign(&self.key.backward(p, &cache.x, &dk, grads)?);
        dx.add_assign(&self.value.backward(p, &cache.x, &dv, grads)?);
        Ok(dx)
    }
}
