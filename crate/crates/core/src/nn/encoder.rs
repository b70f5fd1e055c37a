use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, MultiHeadSelfAttention};
use super::layers::{FeedForward, FeedForwardCache, LayerNorm, LayerNormCache};
use super::{GradStore, ParamStore, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Include the position-wise feed-forward sublayer in every block.
    pub feed_forward: bool,
    pub ffn_expansion: usize,
}

/// Pre-norm transformer block: `h = x + SA(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadSelfAttention,
    ffn: Option<(LayerNorm, FeedForward)>,
}

pub struct EncoderLayerCache {
    norm_attn: LayerNormCache,
    attn: AttentionCache,
    ffn: Option<(LayerNormCache, FeedForwardCache)>,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let norm_attn = LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.dim);
        let attn = MultiHeadSelfAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?;
        let ffn = cfg.feed_forward.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.dim),
                FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.dim * cfg.ffn_expansion, rng),
            )
        });
        Ok(Self { norm_attn, attn, ffn })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, EncoderLayerCache)> {
        let (a, norm_attn) = self.norm_attn.forward(p, x);
        let (sa, attn) = self.attn.forward(p, &a)?;
        let mut h = x.clone();
        h.add_assign(&sa);
        let ffn = match &self.ffn {
            Some((norm, ff)) => {
                let (b, nc) = norm.forward(p, &h);
                let (f, fc) = ff.forward(p, &b)?;
                h.add_assign(&f);
                Some((nc, fc))
            }
            None => None,
        };
        Ok((h, EncoderLayerCache { norm_attn, attn, ffn }))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &EncoderLayerCache,
        dy: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut dh = dy.clone();
        if let (Some((norm, ff)), Some((nc, fc))) = (&self.ffn, &cache.ffn) {
            let db = ff.backward(p, fc, dy, grads)?;
            dh.add_assign(&norm.backward(p, nc, &db, grads));
        }
        let da = self.attn.backward(p, &cache.attn, &dh, grads)?;
        let mut dx = dh;
        dx.add_assign(&self.norm_attn.backward(p, &cache.norm_attn, &da, grads));
        Ok(dx)
    }
}

/// A stack of [`EncoderLayer`]s followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

pub struct EncoderCache {
    layers: Vec<EncoderLayerCache>,
    final_norm: LayerNormCache,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), cfg.dim);
        Ok(Self { layers, final_norm })
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, c) = layer.forward(p, &h)?;
            caches.push(c);
            h = next;
        }
        let (y, final_norm) = self.final_norm.forward(p, &h);
        Ok((
            y,
            EncoderCache {
                layers: caches,
                final_norm,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &EncoderCache, dy: &Tensor, grads: &mut GradStore) -> Result<Tensor> {
        let mut d = self.final_norm.backward(p, &cache.final_norm, dy, grads);
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = layer.backward(p, c, &d, grads)?;
        }
        Ok(d)
    }
}
