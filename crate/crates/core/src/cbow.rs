//! Continuous bag-of-words subword embeddings: the averaged embeddings of up
//! to five past and five future tokens predict the middle token through an
//! untied affine projection and a full softmax.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{self, read_file, write_file};
use crate::nn::ops::{cross_entropy_row, softmax};
use crate::nn::{rng, Adam, AdamConfig, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CBW1";
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CbowExample {
    pub context: Vec<u32>,
    pub target: u32,
}

/// One example per position. Windows truncate at the stream edges rather
/// than padding.
pub fn make_training_pairs(stream: &[u32], window: usize) -> Vec<CbowExample> {
    if stream.len() < 2 {
        log::warn!("token stream of length {} yields no CBOW examples", stream.len());
        return Vec::new();
    }
    (0..stream.len())
        .map(|i| {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(stream.len());
            let context = stream[lo..i].iter().chain(&stream[i + 1..hi]).copied().collect();
            CbowExample {
                context,
                target: stream[i],
            }
        })
        .collect()
}

/// Pairs for each document independently; windows never cross documents.
pub fn make_document_pairs(documents: &[Vec<u32>], window: usize) -> Vec<CbowExample> {
    documents
        .iter()
        .filter(|d| d.len() >= 2)
        .flat_map(|d| make_training_pairs(d, window))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbowConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            epochs: 20,
            batch_size: 32,
            optimizer: AdamConfig::with_lr(0.01),
            seed: 0,
        }
    }
}

/// `T×D` lookup table exported from a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    #[serde(rename = "T")]
    rows: usize,
    #[serde(rename = "D")]
    dim: usize,
    vocab_hash: String,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>, vocab_hash: impl Into<String>) -> Result<Self> {
        if rows == 0 || dim == 0 || values.len() != rows * dim {
            return Err(Error::invalid(format!(
                "embedding {rows}x{dim} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(Self {
            rows,
            dim,
            values,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lookup(&self, id: u32) -> Result<&[f64]> {
        let i = id as usize;
        if i >= self.rows {
            return Err(Error::invalid(format!(
                "token id {id} out of range for {} embeddings",
                self.rows
            )));
        }
        Ok(&self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn cosine(&self, a: u32, b: u32) -> Result<f64> {
        Ok(cosine(self.lookup(a)?, self.lookup(b)?))
    }

    /// The `k` most cosine-similar other tokens, most similar first; ties go
    /// to the lower id.
    pub fn nearest_neighbors(&self, id: u32, k: usize) -> Result<Vec<u32>> {
        let q = self.lookup(id)?;
        let mut scored: Vec<(f64, u32)> = (0..self.rows as u32)
            .filter(|&t| t != id)
            .map(|t| {
                (
                    cosine(q, &self.values[t as usize * self.dim..(t as usize + 1) * self.dim]),
                    t,
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, t)| t).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(
            MAGIC,
            &EmbeddingHeader {
                rows: self.rows,
                dim: self.dim,
                vocab_hash: self.vocab_hash.clone(),
            },
            &self.values,
        )
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let d: container::Decoded<EmbeddingHeader> = container::decode(MAGIC, bytes, path)?;
        let h = d.header;
        if d.payload.len() != h.rows * h.dim {
            return Err(Error::format(
                path,
                d.payload_offset + (d.payload.len().min(h.rows * h.dim) * 8) as u64,
                format!("expected {}x{} floats, found {}", h.rows, h.dim, d.payload.len()),
            ));
        }
        Self::new(h.rows, h.dim, d.payload, h.vocab_hash)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    /// Loads and, when given, checks the embeddings belong to `vocab_hash`.
    pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Self> {
        let m = Self::from_bytes(&read_file(path)?, path)?;
        if let Some(h) = vocab_hash {
            if m.vocab_hash != h {
                return Err(Error::data(format!(
                    "{}: embeddings were trained for vocabulary {}, not {h}",
                    path.display(),
                    m.vocab_hash
                )));
            }
        }
        Ok(m)
    }
}

/// Input embeddings plus the untied output projection.
#[derive(Debug, Clone)]
pub struct CbowModel {
    params: ParamStore,
    input: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    vocab_size: usize,
    dim: usize,
}

impl CbowModel {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut params = ParamStore::new();
        let input = params.add_glorot("cbow.input", vocab_size, dim, &mut r);
        let out_weight = params.add_glorot("cbow.output.weight", dim, vocab_size, &mut r);
        let out_bias = params.add_zeros("cbow.output.bias", &[vocab_size]);
        Self {
            params,
            input,
            out_weight,
            out_bias,
            vocab_size,
            dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn context_mean(&self, context: &[u32]) -> Vec<f64> {
        // sorted so the average is bit-identical under any context order
        let mut ids = context.to_vec();
        ids.sort_unstable();
        let e = self.params.value(self.input).data();
        let mut h = vec![0.0; self.dim];
        for &c in &ids {
            for (hv, ev) in h.iter_mut().zip(&e[c as usize * self.dim..(c as usize + 1) * self.dim]) {
                *hv += ev;
            }
        }
        h.iter_mut().for_each(|v| *v /= ids.len() as f64);
        h
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let w = self.params.value(self.out_weight);
        let mut out = self.params.value(self.out_bias).data().to_vec();
        for (d, &hv) in h.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row_slice(d)) {
                *o += hv * wv;
            }
        }
        out
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "token id {t} out of range for {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Softmax distribution over the vocabulary for the middle token.
    pub fn predict_middle(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::invalid("empty CBOW context"));
        }
        self.check_ids(context)?;
        Ok(softmax(&self.logits(&self.context_mean(context))))
    }

    /// Mean cross-entropy over `examples`.
    pub fn loss(&self, examples: &[CbowExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let (l, _) = cross_entropy_row(&self.logits(&self.context_mean(&ex.context)), ex.target as usize)?;
            total += l;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Accumulates mean-loss gradients for `batch` onto the parameters and
    /// returns the summed loss.
    fn batch_gradients(&mut self, batch: &[CbowExample]) -> Result<f64> {
        self.params.zero_grad();
        let (t, d) = (self.vocab_size, self.dim);
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut dw = vec![0.0; d * t];
        let mut db = vec![0.0; t];
        let mut de: Vec<(u32, Vec<f64>)> = Vec::new();
        for ex in batch {
            let h = self.context_mean(&ex.context);
            let (l, g) = cross_entropy_row(&self.logits(&h), ex.target as usize)?;
            total += l;
            let w = self.params.value(self.out_weight);
            let mut dh = vec![0.0; d];
            for (k, &hv) in h.iter().enumerate() {
                let wrow = w.row_slice(k);
                let dwrow = &mut dw[k * t..(k + 1) * t];
                let mut acc = 0.0;
                for j in 0..t {
                    dwrow[j] += hv * g[j] * scale;
                    acc += g[j] * wrow[j];
                }
                dh[k] = acc * scale / ex.context.len() as f64;
            }
            for (b, gv) in db.iter_mut().zip(&g) {
                *b += gv * scale;
            }
            for &c in &ex.context {
                de.push((c, dh.clone()));
            }
        }
        let mut ge = Tensor::zeros(&[t, d]);
        for (c, g) in de {
            for (dst, v) in ge.row_slice_mut(c as usize).iter_mut().zip(&g) {
                *dst += v;
            }
        }
        let mut grads = self.params.grad_buffers();
        *grads.get_mut(self.input) = ge;
        *grads.get_mut(self.out_weight) = Tensor::new(vec![d, t], dw)?;
        *grads.get_mut(self.out_bias) = Tensor::vector(&db);
        self.params.set_grads(grads)?;
        Ok(total)
    }

    pub fn embeddings(&self, vocab_hash: impl Into<String>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            self.vocab_size,
            self.dim,
            self.params.value(self.input).data().to_vec(),
            vocab_hash,
        )
        .expect("finite embeddings")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CbowLog {
    pub initial_loss: f64,
    /// Mean training loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a CBOW model on precomputed examples.
pub fn train_cbow(examples: &[CbowExample], vocab_size: usize, cfg: &CbowConfig) -> Result<(CbowModel, CbowLog)> {
    if examples.is_empty() {
        return Err(Error::invalid("no CBOW training examples"));
    }
    if cfg.batch_size == 0 || cfg.dim == 0 {
        return Err(Error::invalid("batch_size and dim must be positive"));
    }
    let mut model = CbowModel::new(vocab_size, cfg.dim, cfg.seed);
    for ex in examples {
        if ex.context.is_empty() {
            return Err(Error::invalid("CBOW example with empty context"));
        }
        model.check_ids(&ex.context)?;
        model.check_ids(&[ex.target])?;
    }
    let mut log = CbowLog {
        initial_loss: model.loss(examples)?,
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 {
        log::warn!("zero CBOW epochs: returning the initialization");
        return Ok((model, log));
    }
    let mut opt = Adam::new(cfg.optimizer, &model.params);
    let mut shuffle = rng(cfg.seed ^ 0x5eed_cb0f);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<CbowExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            total += model.batch_gradients(&batch)?;
            opt.step(&mut model.params)?;
        }
        let mean = total / examples.len() as f64;
        log::debug!("cbow epoch {epoch}: loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}
