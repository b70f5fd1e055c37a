//! Fused audio-to-intent model: acoustic and/or textual embeddings,
//! concatenated, then `affine → ReLU → affine → 2 logits`.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::acoustic::{sum_of_posteriors, AcousticProjection, SoPVector};
use crate::cbow::EmbeddingMatrix;
use crate::container::{read_file, write_file};
use crate::eval::{eer, ScoredSet};
use crate::nn::checkpoint;
use crate::nn::ops::{cross_entropy_row, relu, relu_backward, softmax};
use crate::nn::{rng, Adam, AdamConfig, EncoderConfig, GradStore, Linear, ParamStore, Tensor};
use crate::par::{self, Execution};
use crate::posteriors::{ClassCounts, Label, PosteriorMatrix, Utterance};
use crate::textual::{top_n_per_frame, OccurrenceSet, TextualCache, TextualEncoder};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Acoustic,
    Textual,
    Full,
}

impl Mode {
    pub fn uses_acoustic(self) -> bool {
        matches!(self, Mode::Acoustic | Mode::Full)
    }

    pub fn uses_textual(self) -> bool {
        matches!(self, Mode::Textual | Mode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Acoustic => "AcousticA2I",
            Mode::Textual => "TextualA2I",
            Mode::Full => "FullA2I",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2IConfig {
    pub mode: Mode,
    /// Top-N width of the textual path.
    pub top_n: usize,
    pub use_pos_enc: bool,
    pub acoustic_dim: usize,
    pub sa_layers: usize,
    pub heads: usize,
    pub feed_forward: bool,
    pub ffn_expansion: usize,
    pub hidden_dim: usize,
    pub include_blank_in_sop: bool,
    pub include_blank_in_topn: bool,
    pub finetune_cbow: bool,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for A2IConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            top_n: 1,
            use_pos_enc: true,
            acoustic_dim: 512,
            sa_layers: 6,
            heads: 4,
            feed_forward: true,
            ffn_expansion: 4,
            hidden_dim: 128,
            include_blank_in_sop: true,
            include_blank_in_topn: false,
            finetune_cbow: false,
            seed: 0,
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 50,
            patience: Some(10),
        }
    }
}

impl A2IConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_textual() && (self.top_n == 0 || self.heads == 0) {
            return Err(Error::invalid("top_n and heads must be positive"));
        }
        if self.mode.uses_acoustic() && self.acoustic_dim == 0 {
            return Err(Error::invalid("acoustic_dim must be positive"));
        }
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("hidden_dim and batch_size must be positive"));
        }
        Ok(())
    }

    /// Short human-readable label such as `TextualA2I (N=3, PosEnc)`.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Acoustic => self.mode.name().to_string(),
            _ => format!(
                "{} (N={}{})",
                self.mode.name(),
                self.top_n,
                if self.use_pos_enc { ", PosEnc" } else { ", no PosEnc" }
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Architecture {
    config: A2IConfig,
    vocab_size: usize,
    embed_dim: usize,
}

/// Per-utterance inputs that depend only on the data and the config.
#[derive(Debug, Clone)]
pub struct Features {
    pub sop: Option<SoPVector>,
    pub occurrences: Option<OccurrenceSet>,
}

struct ForwardCache {
    acoustic_input: Option<Tensor>,
    textual: Option<TextualCache>,
    fused: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct A2IModel {
    config: A2IConfig,
    vocab_size: usize,
    embed_dim: usize,
    params: ParamStore,
    acoustic: Option<AcousticProjection>,
    textual: Option<TextualEncoder>,
    hidden: Linear,
    output: Linear,
}

impl A2IModel {
    /// Initializes a model. Textual modes need the CBOW table.
    pub fn new(config: &A2IConfig, vocab_size: usize, cbow: Option<&EmbeddingMatrix>) -> Result<Self> {
        config.validate()?;
        let placeholder;
        let cbow = match (config.mode.uses_textual(), cbow) {
            (true, Some(c)) => {
                if c.rows() != vocab_size {
                    return Err(Error::Shape {
                        op: "cbow table",
                        left: vec![c.rows(), c.dim()],
                        right: vec![vocab_size],
                    });
                }
                Some(c)
            }
            (true, None) => return Err(Error::invalid("textual modes need CBOW embeddings")),
            (false, _) => {
                placeholder = None;
                placeholder
            }
        };
        let embed_dim = cbow.map_or(0, EmbeddingMatrix::dim);
        Self::build(config, vocab_size, embed_dim, cbow)
    }

    fn build(config: &A2IConfig, vocab_size: usize, embed_dim: usize, cbow: Option<&EmbeddingMatrix>) -> Result<Self> {
        let mut r = rng(config.seed);
        let mut params = ParamStore::new();
        let acoustic = config.mode.uses_acoustic().then(|| {
            AcousticProjection::new(
                &mut params,
                vocab_size,
                config.acoustic_dim,
                config.include_blank_in_sop,
                &mut r,
            )
        });
        let textual = match (config.mode.uses_textual(), cbow) {
            (true, Some(cbow)) => {
                let enc = EncoderConfig {
                    dim: embed_dim,
                    heads: config.heads,
                    layers: config.sa_layers,
                    feed_forward: config.feed_forward,
                    ffn_expansion: config.ffn_expansion,
                };
                Some(TextualEncoder::new(
                    &mut params,
                    cbow,
                    &enc,
                    config.use_pos_enc,
                    config.finetune_cbow,
                    &mut r,
                )?)
            }
            _ => None,
        };
        let fused = acoustic.as_ref().map_or(0, AcousticProjection::out_dim) + textual.as_ref().map_or(0, |t| t.dim());
        let hidden = Linear::new(&mut params, "head.hidden", fused, config.hidden_dim, &mut r);
        let output = Linear::new(&mut params, "head.output", config.hidden_dim, 2, &mut r);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            embed_dim,
            params,
            acoustic,
            textual,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &A2IConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_hidden(&self) -> &Linear {
        &self.hidden
    }

    pub fn acoustic_dim(&self) -> usize {
        self.acoustic.as_ref().map_or(0, AcousticProjection::out_dim)
    }

    pub fn features(&self, m: &PosteriorMatrix) -> Result<Features> {
        if m.vocab_size() != self.vocab_size {
            return Err(Error::Shape {
                op: "posterior/model vocabulary",
                left: vec![m.frames(), m.classes()],
                right: vec![self.vocab_size + 1],
            });
        }
        let sop = match self.acoustic {
            Some(_) => Some(sum_of_posteriors(m)?),
            None => None,
        };
        let occurrences = match self.textual {
            Some(_) => Some(top_n_per_frame(
                m,
                self.config.top_n,
                self.config.include_blank_in_topn,
            )?),
            None => None,
        };
        if self.config.mode == Mode::Textual && occurrences.as_ref().is_some_and(OccurrenceSet::is_empty) {
            return Err(Error::data("utterance has no tokens for the textual path (K = 0)"));
        }
        Ok(Features { sop, occurrences })
    }

    fn forward_with(&self, p: &ParamStore, x: &Features) -> Result<(Vec<f64>, ForwardCache)> {
        let mut fused: Option<Tensor> = None;
        let mut acoustic_input = None;
        if let (Some(ac), Some(sop)) = (&self.acoustic, &x.sop) {
            let (alpha, input) = ac.forward(p, sop)?;
            acoustic_input = Some(input);
            fused = Some(alpha);
        }
        let mut textual = None;
        if let (Some(tx), Some(occ)) = (&self.textual, &x.occurrences) {
            let tau = if occ.is_empty() {
                // full mode only: the acoustic path carries the utterance
                Tensor::zeros(&[1, tx.dim()])
            } else {
                let (tau, cache) = tx.forward(p, occ)?;
                textual = Some(cache);
                tau
            };
            fused = Some(match fused {
                Some(a) => a.hcat(&tau)?,
                None => tau,
            });
        }
        let fused = fused.ok_or_else(|| Error::invalid("features do not match the model mode"))?;
        let pre = self.hidden.forward(p, &fused)?;
        let hidden = relu(&pre);
        let logits = self.output.forward(p, &hidden)?.into_data();
        Ok((
            logits,
            ForwardCache {
                acoustic_input,
                textual,
                fused,
                pre,
                hidden,
            },
        ))
    }

    fn backward_with(
        &self,
        p: &ParamStore,
        cache: &ForwardCache,
        dlogits: &[f64],
        grads: &mut GradStore,
    ) -> Result<()> {
        let dhidden = self.output.backward(p, &cache.hidden, &Tensor::row(dlogits), grads)?;
        let dpre = relu_backward(&cache.pre, &dhidden);
        let dfused = self.hidden.backward(p, &cache.fused, &dpre, grads)?;
        let split = self.acoustic_dim();
        let (dalpha, dtau) = if self.acoustic.is_some() && self.textual.is_some() {
            let (a, t) = dfused.hsplit(split);
            (Some(a), Some(t))
        } else if self.acoustic.is_some() {
            (Some(dfused), None)
        } else {
            (None, Some(dfused))
        };
        if let (Some(ac), Some(input), Some(d)) = (&self.acoustic, &cache.acoustic_input, dalpha) {
            ac.backward(p, input, &d, grads)?;
        }
        if let (Some(tx), Some(tc), Some(d)) = (&self.textual, &cache.textual, dtau) {
            tx.backward(p, tc, &d, grads)?;
        }
        Ok(())
    }

    /// Two class logits (unintended, intended).
    pub fn logits(&self, x: &Features) -> Result<Vec<f64>> {
        Ok(self.forward_with(&self.params, x)?.0)
    }

    /// Probability of the intended class.
    pub fn score_features(&self, x: &Features) -> Result<f64> {
        Ok(softmax(&self.logits(x)?)[Label::Intended.class_index()])
    }

    pub fn forward(&self, u: &Utterance) -> Result<f64> {
        self.score_features(&self.features(&u.posteriors)?)
    }

    /// Weighted cross-entropy of one example; gradients scaled by `scale`
    /// accumulate into `grads` when given.
    pub fn example_loss(
        &self,
        p: &ParamStore,
        x: &Features,
        label: Label,
        scale: f64,
        grads: Option<&mut GradStore>,
    ) -> Result<f64> {
        let (logits, cache) = self.forward_with(p, x)?;
        let (loss, mut g) = cross_entropy_row(&logits, label.class_index())?;
        if let Some(grads) = grads {
            g.iter_mut().for_each(|v| *v *= scale);
            self.backward_with(p, &cache, &g, grads)?;
        }
        Ok(loss * scale)
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(Architecture {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
        })
        .expect("architecture serializes")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.architecture(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let loaded = checkpoint::decode(bytes, path)?;
        let arch: Architecture = serde_json::from_value(loaded.architecture.clone())
            .map_err(|e| Error::format(path, 12, format!("architecture: {e}")))?;
        let placeholder = if arch.config.mode.uses_textual() {
            Some(EmbeddingMatrix::new(
                arch.vocab_size,
                arch.embed_dim,
                vec![0.0; arch.vocab_size * arch.embed_dim],
                "",
            )?)
        } else {
            None
        };
        let mut model = Self::build(&arch.config, arch.vocab_size, arch.embed_dim, placeholder.as_ref())?;
        checkpoint::restore(&mut model.params, loaded)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Scores in input order.
pub fn predict_batch(utterances: &[Utterance], model: &A2IModel, exec: Execution) -> Result<Vec<f64>> {
    par::map(exec, utterances, |u| model.forward(u)).into_iter().collect()
}

fn score_features(model: &A2IModel, feats: &[Features], exec: Execution) -> Result<Vec<f64>> {
    par::map(exec, feats, |f| model.score_features(f)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub class_weights: [f64; 2],
}

/// Examples per gradient chunk; chunk partials are summed in order so the
/// result does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

fn class_weights(train: &[Utterance]) -> Result<[f64; 2]> {
    let c = ClassCounts::of(train);
    if c.intended == 0 || c.unintended == 0 {
        return Err(Error::data(format!(
            "training needs both classes, got {} intended / {} unintended",
            c.intended, c.unintended
        )));
    }
    let n = c.total() as f64;
    Ok([n / (2.0 * c.unintended as f64), n / (2.0 * c.intended as f64)])
}

/// Trains with class-weighted cross-entropy and keeps the parameters from
/// the epoch with the best validation EER (lower validation loss breaks ties).
pub fn train_a2i(
    train: &[Utterance],
    validation: &[Utterance],
    config: &A2IConfig,
    vocab_size: usize,
    cbow: Option<&EmbeddingMatrix>,
    exec: Execution,
) -> Result<(A2IModel, TrainingLog)> {
    let weights = class_weights(train)?;
    if validation.is_empty() {
        return Err(Error::data("validation partition is empty"));
    }
    let vc = ClassCounts::of(validation);
    if vc.intended == 0 || vc.unintended == 0 {
        return Err(Error::data("validation partition needs both classes"));
    }
    let mut model = A2IModel::new(config, vocab_size, cbow)?;
    let train_x: Vec<Features> = par::map(exec, train, |u| model.features(&u.posteriors))
        .into_iter()
        .collect::<Result<_>>()?;
    let val_x: Vec<Features> = par::map(exec, validation, |u| model.features(&u.posteriors))
        .into_iter()
        .collect::<Result<_>>()?;
    let val_labels: Vec<Label> = validation.iter().map(|u| u.label).collect();

    let mut opt = Adam::new(config.optimizer, &model.params);
    let mut shuffle = rng(config.seed ^ 0xa21_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        class_weights: weights,
    };
    let mut best: Option<((f64, f64), ParamStore)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for batch in order.chunks(config.batch_size) {
            let total_w: f64 = batch.iter().map(|&i| weights[train[i].label.class_index()]).sum();
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let partials = par::map(exec, &chunks, |chunk| -> Result<(f64, GradStore)> {
                let mut g = model.params.grad_buffers();
                let mut loss = 0.0;
                for &i in *chunk {
                    let w = weights[train[i].label.class_index()] / total_w;
                    loss += model.example_loss(&model.params, &train_x[i], train[i].label, w, Some(&mut g))?;
                }
                Ok((loss, g))
            });
            let mut grads = model.params.grad_buffers();
            let mut batch_loss = 0.0;
            for part in partials {
                let (l, g) = part?;
                batch_loss += l;
                grads.add_store(&g);
            }
            model.params.set_grads(grads)?;
            opt.step(&mut model.params)?;
            epoch_loss += batch_loss * total_w;
            epoch_weight += total_w;
        }

        let scores = score_features(&model, &val_x, exec)?;
        let validation_loss = scores
            .iter()
            .zip(&val_labels)
            .map(|(&s, l)| {
                let p = if *l == Label::Intended { s } else { 1.0 - s };
                -p.max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / scores.len() as f64;
        let validation_eer = eer(&ScoredSet::new(scores, val_labels.clone())?)?.rate;
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_weight,
            validation_loss,
            validation_eer,
        };
        log::debug!("{:?}", entry);
        log.epochs.push(entry);

        let key = (validation_eer, validation_loss);
        if best.as_ref().is_none_or(|(b, _)| key < *b) {
            best = Some((key, model.params.clone()));
            log.best_epoch = epoch;
        } else if config.patience.is_some_and(|p| epoch - log.best_epoch >= p) {
            log::info!("early stop at epoch {epoch}; best was {}", log.best_epoch);
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, log))
}
