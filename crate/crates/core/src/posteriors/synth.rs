//! CTC-like posterior synthesis from token sequences.
//!
//! Each frame names a dominant class and a few competitors with negative
//! logits; the frame distribution is `softmax(logits / temperature)` mixed
//! with a small uniform floor so every log-probability stays finite. The
//! dominant class always has the largest logit, so temperature spreads mass
//! without changing the argmax.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PosteriorMatrix;
use crate::cbow::EmbeddingMatrix;
use crate::nn::ops::softmax;
use crate::nn::rng;
use crate::{Error, Result};

/// Total probability mass spread uniformly over all classes in every frame.
pub const FLOOR_MASS: f64 = 1e-3;
/// Base logit gap between the dominant class and its competitors.
pub const CONFUSION_GAP: f64 = 1.0;
const MAX_BLANK_RUN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive range of frames each token occupies.
    pub frames_per_token: (usize, usize),
    /// Probability of emitting one more blank frame before a token (and
    /// after the last); blank runs are geometric with this parameter.
    pub blank_mass: f64,
    pub temperature: f64,
    pub confusion_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames_per_token: (2, 4),
            blank_mass: 0.5,
            temperature: 0.5,
            confusion_size: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.frames_per_token;
        if lo == 0 || hi < lo {
            return Err(Error::invalid(format!("bad frames_per_token range {lo}..={hi}")));
        }
        if !(0.0..1.0).contains(&self.blank_mass) {
            return Err(Error::invalid(format!("blank_mass {} not in [0, 1)", self.blank_mass)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.confusion_size == 0 {
            return Err(Error::invalid("confusion_size must be positive"));
        }
        Ok(())
    }
}

/// Where competing tokens come from.
#[derive(Debug, Clone)]
pub enum ConfusionSource {
    /// Fresh uniformly random tokens for every segment.
    Uniform,
    /// Fixed per-token lists, typically embedding nearest neighbours.
    Neighbors(Vec<Vec<u32>>),
}

impl ConfusionSource {
    pub fn from_embeddings(emb: &EmbeddingMatrix, k: usize) -> Result<Self> {
        (0..emb.rows() as u32)
            .map(|t| emb.nearest_neighbors(t, k))
            .collect::<Result<Vec<_>>>()
            .map(ConfusionSource::Neighbors)
    }

    fn confusers(&self, token: u32, k: usize, vocab: usize, r: &mut impl Rng) -> Vec<u32> {
        match self {
            ConfusionSource::Neighbors(lists) => lists
                .get(token as usize)
                .map(|l| l.iter().copied().take(k).collect())
                .unwrap_or_default(),
            ConfusionSource::Uniform => {
                let k = k.min(vocab.saturating_sub(1));
                sample(r, vocab - 1, k)
                    .into_iter()
                    .map(|i| if i as u32 >= token { i as u32 + 1 } else { i as u32 })
                    .collect()
            }
        }
    }
}

/// One frame: `(class, logit)` pairs; unlisted classes receive only the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub classes: Vec<(usize, f64)>,
}

impl FrameSpec {
    /// Dominant class at logit 0 followed by competitors at `-gap·(1+u)`.
    pub fn dominant(class: usize, competitors: &[usize], r: &mut impl Rng) -> Self {
        let mut classes = vec![(class, 0.0)];
        for &c in competitors {
            if c != class && classes.iter().all(|&(k, _)| k != c) {
                let u: f64 = r.random();
                classes.push((c, -CONFUSION_GAP * (1.0 + u)));
            }
        }
        Self { classes }
    }
}

/// Renders frame specifications into a row-stochastic matrix.
pub fn render(frames: &[FrameSpec], num_classes: usize, temperature: f64) -> Result<PosteriorMatrix> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to render"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let floor = FLOOR_MASS / num_classes as f64;
    let mut values = Vec::with_capacity(frames.len() * num_classes);
    for spec in frames {
        if spec.classes.is_empty() {
            return Err(Error::invalid("frame without classes"));
        }
        let logits: Vec<f64> = spec.classes.iter().map(|&(_, z)| z / temperature).collect();
        let p = softmax(&logits);
        let mut row = vec![floor; num_classes];
        for (&(c, _), pv) in spec.classes.iter().zip(p) {
            if c >= num_classes {
                return Err(Error::invalid(format!("class {c} out of range for {num_classes}")));
            }
            row[c] += (1.0 - FLOOR_MASS) * pv;
        }
        values.extend(row.into_iter().map(f64::ln));
    }
    PosteriorMatrix::new(frames.len(), num_classes, values)
}

/// Synthesizes a CTC-style alignment for `tokens` over a vocabulary of
/// `vocab_size` subwords (blank at index `vocab_size`).
pub fn synthesize_posteriors(
    tokens: &[u32],
    vocab_size: usize,
    cfg: &SynthConfig,
    source: &ConfusionSource,
) -> Result<PosteriorMatrix> {
    if tokens.is_empty() {
        return Err(Error::invalid(
            "cannot synthesize posteriors for an empty token sequence",
        ));
    }
    cfg.validate()?;
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::invalid(format!(
            "token {t} out of range for vocabulary of {vocab_size}"
        )));
    }
    let blank = vocab_size;
    let mut r = rng(cfg.seed);
    let mut frames = Vec::new();
    let blank_run = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut n = 0;
        while n < MAX_BLANK_RUN && r.random::<f64>() < cfg.blank_mass {
            n += 1;
        }
        n
    };
    for (i, &tok) in tokens.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| tokens[j] as usize);
        let next = tok as usize;
        for _ in 0..blank_run(&mut r) {
            let neighbours: Vec<usize> = prev.into_iter().chain([next]).collect();
            frames.push(FrameSpec::dominant(blank, &neighbours, &mut r));
        }
        let (lo, hi) = cfg.frames_per_token;
        let span = r.random_range(lo..=hi);
        let mut competitors: Vec<usize> = source
            .confusers(tok, cfg.confusion_size, vocab_size, &mut r)
            .into_iter()
            .map(|c| c as usize)
            .collect();
        competitors.push(blank);
        for _ in 0..span {
            frames.push(FrameSpec::dominant(tok as usize, &competitors, &mut r));
        }
    }
    let last = *tokens.last().expect("non-empty") as usize;
    for _ in 0..blank_run(&mut r) {
        frames.push(FrameSpec::dominant(blank, &[last], &mut r));
    }
    render(&frames, vocab_size + 1, cfg.temperature)
}
