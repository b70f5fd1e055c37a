//! Textual path: Top-N token occurrences per frame, CBOW rows plus the mean
//! positional encoding of each token's frames, a self-attention encoder and
//! a mean over tokens.

use rand::Rng;

use crate::cbow::EmbeddingMatrix;
use crate::nn::ops::{mean_over_rows, mean_over_rows_backward};
use crate::nn::{Encoder, EncoderConfig, GradStore, ParamId, ParamStore, Tensor};
use crate::posteriors::PosteriorMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenOccurrence {
    pub token: u32,
    /// Strictly increasing 0-based frame indices.
    pub frames: Vec<usize>,
}

/// Unique tokens selected by Top-N, in ascending token-id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccurrenceSet {
    pub occurrences: Vec<TokenOccurrence>,
}

impl OccurrenceSet {
    pub fn len(&self) -> usize {
        self.occurrences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occurrences.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.occurrences.iter().map(|o| o.token)
    }
}

/// Selects the `n` most probable classes in every frame (ties to the lower
/// id) and gathers the frames each selected token appeared in.
///
/// The blank never enters the result. With `include_blank` it still
/// competes for one of the `n` slots, which is the only way `K = 0` arises.
pub fn top_n_per_frame(m: &PosteriorMatrix, n: usize, include_blank: bool) -> Result<OccurrenceSet> {
    let t = m.vocab_size();
    let candidates = t + usize::from(include_blank);
    if n == 0 || n > candidates {
        return Err(Error::invalid(format!("Top-N width {n} outside 1..={candidates}")));
    }
    let mut frames_of: Vec<Vec<usize>> = vec![Vec::new(); t];
    let mut order: Vec<usize> = Vec::with_capacity(candidates);
    for f in 0..m.frames() {
        let row = m.row(f);
        order.clear();
        order.extend(0..candidates);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if n < candidates {
            order.select_nth_unstable_by(n - 1, cmp);
        }
        for &c in &order[..n] {
            if c < t {
                frames_of[c].push(f);
            }
        }
    }
    let occurrences = frames_of
        .into_iter()
        .enumerate()
        .filter(|(_, fr)| !fr.is_empty())
        .map(|(tok, frames)| TokenOccurrence {
            token: tok as u32,
            frames,
        })
        .collect();
    Ok(OccurrenceSet { occurrences })
}

/// Sinusoidal encoder: `PE[2i] = sin(f / 10000^(2i/D))`,
/// `PE[2i+1] = cos(f / 10000^(2i/D))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoder {
    inv_freq: Vec<f64>,
}

impl PositionalEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "positional encoding dimension {dim} must be even"
            )));
        }
        let inv_freq = (0..dim / 2)
            .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64))
            .collect();
        Ok(Self { inv_freq })
    }

    pub fn dim(&self) -> usize {
        self.inv_freq.len() * 2
    }

    pub fn encode_into(&self, frame: usize, out: &mut [f64]) {
        for (i, w) in self.inv_freq.iter().enumerate() {
            let angle = frame as f64 * w;
            out[2 * i] = angle.sin();
            out[2 * i + 1] = angle.cos();
        }
    }

    pub fn encode(&self, frame: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.encode_into(frame, &mut v);
        v
    }

    /// Component-wise mean of the encodings of `frames`.
    pub fn mean(&self, frames: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        let mut tmp = vec![0.0; self.dim()];
        for &f in frames {
            self.encode_into(f, &mut tmp);
            acc.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
        }
        acc.iter_mut().for_each(|a| *a /= frames.len() as f64);
        acc
    }
}

pub fn positional_encoding(frame: usize, dim: usize) -> Result<Vec<f64>> {
    Ok(PositionalEncoder::new(dim)?.encode(frame))
}

fn contextual_row(row: &[f64], occ: &TokenOccurrence, pe: Option<&PositionalEncoder>) -> Vec<f64> {
    let mut e = row.to_vec();
    if let Some(pe) = pe {
        for (v, p) in e.iter_mut().zip(pe.mean(&occ.frames)) {
            *v += p;
        }
    }
    e
}

/// `CBOW(t) + mean(PE(f) for f in frames)`, or the CBOW row alone.
pub fn contextual_embedding(occ: &TokenOccurrence, cbow: &EmbeddingMatrix, use_pos_enc: bool) -> Result<Vec<f64>> {
    let row = cbow.lookup(occ.token)?;
    if occ.frames.is_empty() {
        return Err(Error::invalid(format!("token {} has no frames", occ.token)));
    }
    let pe = if use_pos_enc {
        Some(PositionalEncoder::new(cbow.dim())?)
    } else {
        None
    };
    Ok(contextual_row(row, occ, pe.as_ref()))
}

/// Self-attention stack over contextual embeddings followed by a row mean.
#[derive(Debug, Clone)]
pub struct TextualEncoder {
    pub table: ParamId,
    encoder: Encoder,
    positional: Option<PositionalEncoder>,
    dim: usize,
}

pub struct TextualCache {
    tokens: Vec<u32>,
    encoder: crate::nn::encoder::EncoderCache,
}

impl TextualEncoder {
    /// Registers the CBOW table as parameter `textual.cbow` (frozen unless
    /// `finetune_cbow`) followed by the encoder stack.
    pub fn new(
        store: &mut ParamStore,
        cbow: &EmbeddingMatrix,
        cfg: &EncoderConfig,
        use_pos_enc: bool,
        finetune_cbow: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.dim != cbow.dim() {
            return Err(Error::Shape {
                op: "textual encoder",
                left: vec![cbow.rows(), cbow.dim()],
                right: vec![cfg.dim],
            });
        }
        let table = store.add(
            "textual.cbow",
            Tensor::new(vec![cbow.rows(), cbow.dim()], cbow.values().to_vec())?,
            finetune_cbow,
        );
        let encoder = Encoder::new(store, "textual.encoder", cfg, rng)?;
        let positional = if use_pos_enc {
            Some(PositionalEncoder::new(cfg.dim)?)
        } else {
            None
        };
        Ok(Self {
            table,
            encoder,
            positional,
            dim: cfg.dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `K×D` matrix of contextual embeddings in occurrence order.
    pub fn embed(&self, p: &ParamStore, set: &OccurrenceSet) -> Result<Tensor> {
        let table = p.value(self.table);
        let mut data = Vec::with_capacity(set.len() * self.dim);
        for occ in &set.occurrences {
            if occ.token as usize >= table.rows() {
                return Err(Error::invalid(format!("token {} has no CBOW row", occ.token)));
            }
            data.extend(contextual_row(
                table.row_slice(occ.token as usize),
                occ,
                self.positional.as_ref(),
            ));
        }
        Tensor::new(vec![set.len(), self.dim], data)
    }

    /// Produces the `1×D` textual embedding.
    pub fn forward(&self, p: &ParamStore, set: &OccurrenceSet) -> Result<(Tensor, TextualCache)> {
        if set.is_empty() {
            return Err(Error::invalid("textual encoder needs at least one token (K = 0)"));
        }
        let x = self.embed(p, set)?;
        let (h, encoder) = self.encoder.forward(p, &x)?;
        let tau = mean_over_rows(&h)?;
        Ok((
            tau,
            TextualCache {
                tokens: set.tokens().collect(),
                encoder,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &TextualCache, dtau: &Tensor, grads: &mut GradStore) -> Result<()> {
        let dh = mean_over_rows_backward(cache.tokens.len(), dtau);
        let dx = self.encoder.backward(p, &cache.encoder, &dh, grads)?;
        if p.is_trainable(self.table) {
            let g = grads.get_mut(self.table);
            for (k, &tok) in cache.tokens.iter().enumerate() {
                for (dst, v) in g.row_slice_mut(tok as usize).iter_mut().zip(dx.row_slice(k)) {
                    *dst += v;
                }
            }
        }
        Ok(())
    }
}
