//! Synthetic dataset builders: grammar-driven corpora with CTC-like
//! posteriors, plus small constructed sets whose label lives in a known cue
//! (token order, posterior sharpness, token identity).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbow::{make_document_pairs, train_cbow, CbowConfig, EmbeddingMatrix, DEFAULT_WINDOW};
use crate::classifier::{A2IConfig, Mode};
use crate::eval::AblationData;
use crate::nn::{rng, AdamConfig};
use crate::par::{self, Execution};
use crate::posteriors::grammar::Grammar;
use crate::posteriors::synth::{render, synthesize_posteriors, ConfusionSource, FrameSpec, SynthConfig, CONFUSION_GAP};
use crate::posteriors::{Label, Utterance};
use crate::tokenizer::{train_bpe, Tokenizer};
use crate::{Error, Result};

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

macro_rules! grammar_files {
    ($dir:literal; $($slot:literal),*) => {
        Grammar::from_text(
            include_str!(concat!("../data/grammars/", $dir, "/templates.txt")),
            &[$(($slot, include_str!(concat!("../data/grammars/", $dir, "/", $slot, ".txt")))),*],
        )
    };
}

/// Built-in assistant-command grammar.
pub fn intended_grammar() -> Grammar {
    grammar_files!("intended"; "duration", "time", "day", "city", "song", "artist", "genre", "contact",
        "task", "onoff", "device", "place", "item", "app")
    .expect("built-in grammar is valid")
}

/// Built-in background-conversation grammar.
pub fn unintended_grammar() -> Grammar {
    grammar_files!("unintended"; "activity", "day", "show", "relative", "item", "team", "contact",
        "object", "adjective", "place", "time", "topic")
    .expect("built-in grammar is valid")
}

pub fn sample_lines(grammar: &Grammar, n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    (0..n).map(|_| grammar.sample(&mut r)).collect()
}

/// Train/validation/eval fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub eval: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.15,
            eval: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.eval];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.validation, self.eval
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

impl Split {
    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.validation).chain(&self.eval)
    }
}

/// Shuffles each class separately and cuts it by `ratios`.
pub fn split_stratified(utterances: Vec<Utterance>, ratios: SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    let mut r = rng(seed);
    let mut out = Split::default();
    for label in [Label::Intended, Label::Unintended] {
        let mut class: Vec<Utterance> = utterances.iter().filter(|u| u.label == label).cloned().collect();
        class.shuffle(&mut r);
        let n = class.len();
        let n_train = (ratios.train * n as f64).round() as usize;
        let n_val = ((ratios.validation * n as f64).round() as usize).min(n - n_train);
        let rest = class.split_off(n_train);
        out.train.extend(class);
        let mut rest = rest;
        let eval = rest.split_off(n_val);
        out.validation.extend(rest);
        out.eval.extend(eval);
    }
    Ok(out)
}

/// Tokenizes each line and synthesizes its posteriors with a per-line seed.
pub fn synthesize_lines(
    lines: &[String],
    label: Label,
    tokenizer: &Tokenizer,
    cfg: &SynthConfig,
    source: &ConfusionSource,
    exec: Execution,
) -> Result<Vec<Utterance>> {
    let stream = label.class_index() as u64 + 1;
    par::map_range(exec, lines.len(), |i| {
        let tokens = tokenizer.encode(&lines[i]);
        if tokens.is_empty() {
            return Err(Error::data(format!("line {i} has no known tokens: {:?}", lines[i])));
        }
        let cfg = SynthConfig {
            seed: derive_seed(cfg.seed, stream, i as u64),
            ..*cfg
        };
        Ok(Utterance {
            id: format!("{}-{i:05}", label.as_str()),
            label,
            posteriors: synthesize_posteriors(&tokens, tokenizer.vocab_size(), &cfg, source)?,
            reference: Some(tokens),
        })
    })
    .into_iter()
    .collect()
}

/// Grammar-driven dataset: in-domain commands rendered sharp, background
/// speech rendered flat, both confused along CBOW neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardConfig {
    pub per_class: usize,
    pub corpus_lines: usize,
    pub vocab_size: usize,
    pub cbow: CbowConfig,
    pub intended: SynthConfig,
    pub unintended: SynthConfig,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for StandardConfig {
    fn default() -> Self {
        Self {
            per_class: 600,
            corpus_lines: 2000,
            vocab_size: 800,
            cbow: CbowConfig {
                dim: 32,
                epochs: 10,
                ..CbowConfig::default()
            },
            intended: SynthConfig {
                temperature: 0.5,
                ..SynthConfig::default()
            },
            unintended: SynthConfig {
                temperature: 1.5,
                ..SynthConfig::default()
            },
            split: SplitRatios::default(),
            seed: 0,
        }
    }
}

pub struct StandardScenario {
    pub tokenizer: Tokenizer,
    pub embeddings: EmbeddingMatrix,
    pub corpus: Vec<String>,
    pub split: Split,
}

impl StandardScenario {
    pub fn data(&self) -> AblationData<'_> {
        AblationData {
            train: &self.split.train,
            validation: &self.split.validation,
            eval: &self.split.eval,
            vocab_size: self.tokenizer.vocab_size(),
            cbow: Some(&self.embeddings),
        }
    }
}

/// Interleaves lines of both grammars so neither dominates early merges.
pub fn mixed_corpus(a: &[String], b: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len().max(b.len()) {
        out.extend(a.get(i).cloned());
        out.extend(b.get(i).cloned());
    }
    out
}

pub fn build_standard(cfg: &StandardConfig, exec: Execution) -> Result<StandardScenario> {
    let (gi, gu) = (intended_grammar(), unintended_grammar());
    let corpus = mixed_corpus(
        &sample_lines(&gi, cfg.corpus_lines / 2, derive_seed(cfg.seed, 10, 0)),
        &sample_lines(&gu, cfg.corpus_lines / 2, derive_seed(cfg.seed, 11, 0)),
    );
    let tokenizer = train_bpe(corpus.iter().map(String::as_str), cfg.vocab_size)?;
    let docs: Vec<Vec<u32>> = corpus.iter().map(|l| tokenizer.encode(l)).collect();
    let pairs = make_document_pairs(&docs, DEFAULT_WINDOW);
    let cbow_cfg = CbowConfig {
        seed: derive_seed(cfg.seed, 12, 0),
        ..cfg.cbow
    };
    let (model, _) = train_cbow(&pairs, tokenizer.vocab_size(), &cbow_cfg)?;
    let embeddings = model.embeddings(tokenizer.hash());
    let source = ConfusionSource::from_embeddings(
        &embeddings,
        cfg.intended.confusion_size.max(cfg.unintended.confusion_size),
    )?;

    let lines_i = sample_lines(&gi, cfg.per_class, derive_seed(cfg.seed, 20, 0));
    let lines_u = sample_lines(&gu, cfg.per_class, derive_seed(cfg.seed, 21, 0));
    let synth_i = SynthConfig {
        seed: derive_seed(cfg.seed, 30, 0),
        ..cfg.intended
    };
    let synth_u = SynthConfig {
        seed: derive_seed(cfg.seed, 31, 0),
        ..cfg.unintended
    };
    let mut utts = synthesize_lines(&lines_i, Label::Intended, &tokenizer, &synth_i, &source, exec)?;
    utts.extend(synthesize_lines(
        &lines_u,
        Label::Unintended,
        &tokenizer,
        &synth_u,
        &source,
        exec,
    )?);
    let split = split_stratified(utts, cfg.split, derive_seed(cfg.seed, 40, 0))?;
    Ok(StandardScenario {
        tokenizer,
        embeddings,
        corpus,
        split,
    })
}

/// Seeded table with unit-variance entries.
pub fn random_embeddings(rows: usize, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let mut r = rng(seed);
    let b = 3f64.sqrt();
    let values = (0..rows * dim).map(|_| r.random_range(-b..b)).collect();
    EmbeddingMatrix::new(rows, dim, values, format!("random-{seed}"))
}

/// A constructed dataset over a token-id vocabulary with no tokenizer.
pub struct Scenario {
    pub vocab_size: usize,
    pub embeddings: EmbeddingMatrix,
    pub split: Split,
}

impl Scenario {
    pub fn data(&self) -> AblationData<'_> {
        AblationData {
            train: &self.split.train,
            validation: &self.split.validation,
            eval: &self.split.eval,
            vocab_size: self.vocab_size,
            cbow: Some(&self.embeddings),
        }
    }
}

/// Frame sequence builder for constructed utterances.
struct Frames<'a> {
    specs: Vec<FrameSpec>,
    blank: usize,
    fillers: &'a [u32],
    r: ChaCha8Rng,
}

impl<'a> Frames<'a> {
    fn new(blank: usize, fillers: &'a [u32], seed: u64) -> Self {
        Self {
            specs: Vec::new(),
            blank,
            fillers,
            r: rng(seed),
        }
    }

    fn competitors(&mut self, k: usize) -> Vec<usize> {
        self.fillers
            .choose_multiple(&mut self.r, k)
            .map(|&t| t as usize)
            .collect()
    }

    fn blanks(&mut self) {
        let n = self.r.random_range(0..=2);
        for _ in 0..n {
            let comp = self.competitors(2);
            self.specs.push(FrameSpec::dominant(self.blank, &comp, &mut self.r));
        }
    }

    fn span(&mut self) -> usize {
        self.r.random_range(2..=3)
    }

    /// Frames dominated by `token`.
    fn token(&mut self, token: u32) {
        for _ in 0..self.span() {
            let mut comp = self.competitors(2);
            comp.push(self.blank);
            self.specs.push(FrameSpec::dominant(token as usize, &comp, &mut self.r));
        }
    }

    /// Frames where `cover` wins and `hidden` is a firm second.
    fn demoted(&mut self, hidden: u32, cover: u32) {
        for _ in 0..self.span() {
            let mut classes = vec![(cover as usize, 0.0), (hidden as usize, -0.3 * CONFUSION_GAP)];
            for c in self.competitors(2).into_iter().chain([self.blank]) {
                let u: f64 = self.r.random();
                classes.push((c, -CONFUSION_GAP * (1.0 + u)));
            }
            self.specs.push(FrameSpec { classes });
        }
    }
}

/// Positions of two key tokens within a filler sequence: one near the start,
/// one near the end.
fn key_layout(r: &mut impl Rng, fillers: &[u32], len: usize) -> (Vec<u32>, usize, usize) {
    let seq: Vec<u32> = (0..len).map(|_| *fillers.choose(r).expect("fillers")).collect();
    let first = r.random_range(0..=1);
    let second = len - r.random_range(0..=1);
    (seq, first, second)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderConfig {
    pub per_class: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub fillers_per_utterance: usize,
    /// Share of utterances whose keys sit at rank 2 under a shared cover token.
    pub noisy_fraction: f64,
    pub temperature: f64,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self {
            per_class: 250,
            vocab_size: 24,
            embed_dim: 16,
            fillers_per_utterance: 6,
            noisy_fraction: 0.5,
            temperature: 0.7,
            split: SplitRatios {
                train: 0.6,
                validation: 0.2,
                eval: 0.2,
            },
            seed: 0,
        }
    }
}

struct OrderTokens {
    fillers: Vec<u32>,
    a: u32,
    b: u32,
    cover: u32,
}

impl OrderTokens {
    fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 8 {
            return Err(Error::invalid("constructed scenarios need at least 8 tokens"));
        }
        let t = vocab_size as u32;
        // keys take the highest ids so floor-level ties never select them
        Ok(Self {
            fillers: (0..t - 3).collect(),
            a: t - 3,
            b: t - 2,
            cover: t - 1,
        })
    }
}

fn order_utterance(
    tok: &OrderTokens,
    vocab_size: usize,
    fillers: usize,
    a_first: bool,
    noisy: bool,
    temperature: f64,
    seed: u64,
) -> Result<crate::posteriors::PosteriorMatrix> {
    let mut frames = Frames::new(vocab_size, &tok.fillers, seed);
    let mut r = rng(derive_seed(seed, 1, 0));
    let (seq, p1, p2) = key_layout(&mut r, &tok.fillers, fillers);
    let (k1, k2) = if a_first { (tok.a, tok.b) } else { (tok.b, tok.a) };
    for i in 0..=seq.len() {
        for (pos, key) in [(p1, k1), (p2, k2)] {
            if i == pos {
                frames.blanks();
                if noisy {
                    frames.demoted(key, tok.cover);
                } else {
                    frames.token(key);
                }
            }
        }
        if let Some(&t) = seq.get(i) {
            frames.blanks();
            frames.token(t);
        }
    }
    frames.blanks();
    render(&frames.specs, vocab_size + 1, temperature)
}

/// Classes differ only in the order of two key tokens; in noisy utterances
/// the keys are visible only below the top rank.
pub fn build_order_sensitive(cfg: &OrderConfig) -> Result<Scenario> {
    let tok = OrderTokens::new(cfg.vocab_size)?;
    let mut r = rng(derive_seed(cfg.seed, 50, 0));
    let mut utts = Vec::with_capacity(2 * cfg.per_class);
    for label in [Label::Intended, Label::Unintended] {
        for i in 0..cfg.per_class {
            let noisy = r.random::<f64>() < cfg.noisy_fraction;
            let seed = derive_seed(cfg.seed, 51 + label.class_index() as u64, i as u64);
            let m = order_utterance(
                &tok,
                cfg.vocab_size,
                cfg.fillers_per_utterance,
                label == Label::Intended,
                noisy,
                cfg.temperature,
                seed,
            )?;
            utts.push(Utterance {
                id: format!("{}-{i:05}", label.as_str()),
                label,
                posteriors: m,
                reference: None,
            });
        }
    }
    Ok(Scenario {
        vocab_size: cfg.vocab_size,
        embeddings: random_embeddings(cfg.vocab_size, cfg.embed_dim, derive_seed(cfg.seed, 52, 0))?,
        split: split_stratified(utts, cfg.split, derive_seed(cfg.seed, 53, 0))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryConfig {
    pub per_class: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub fillers_per_utterance: usize,
    /// Share of utterances labelled through sharpness; the rest through order.
    pub acoustic_fraction: f64,
    pub sharp_temperature: f64,
    pub flat_temperature: f64,
    pub neutral_temperature: f64,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for ComplementaryConfig {
    fn default() -> Self {
        Self {
            per_class: 300,
            vocab_size: 24,
            embed_dim: 16,
            fillers_per_utterance: 6,
            acoustic_fraction: 0.5,
            sharp_temperature: 0.3,
            flat_temperature: 1.5,
            neutral_temperature: 0.7,
            split: SplitRatios {
                train: 0.6,
                validation: 0.2,
                eval: 0.2,
            },
            seed: 0,
        }
    }
}

/// Half the utterances carry their label in posterior sharpness with random
/// key order, half in key order at a shared neutral sharpness.
pub fn build_complementary(cfg: &ComplementaryConfig) -> Result<Scenario> {
    let tok = OrderTokens::new(cfg.vocab_size)?;
    let mut r = rng(derive_seed(cfg.seed, 60, 0));
    let mut utts = Vec::with_capacity(2 * cfg.per_class);
    for label in [Label::Intended, Label::Unintended] {
        for i in 0..cfg.per_class {
            let acoustic = r.random::<f64>() < cfg.acoustic_fraction;
            let (a_first, temperature) = if acoustic {
                let t = match label {
                    Label::Intended => cfg.sharp_temperature,
                    Label::Unintended => cfg.flat_temperature,
                };
                (r.random::<bool>(), t)
            } else {
                (label == Label::Intended, cfg.neutral_temperature)
            };
            let seed = derive_seed(cfg.seed, 61 + label.class_index() as u64, i as u64);
            let m = order_utterance(
                &tok,
                cfg.vocab_size,
                cfg.fillers_per_utterance,
                a_first,
                false,
                temperature,
                seed,
            )?;
            utts.push(Utterance {
                id: format!("{}-{i:05}", label.as_str()),
                label,
                posteriors: m,
                reference: None,
            });
        }
    }
    Ok(Scenario {
        vocab_size: cfg.vocab_size,
        embeddings: random_embeddings(cfg.vocab_size, cfg.embed_dim, derive_seed(cfg.seed, 62, 0))?,
        split: split_stratified(utts, cfg.split, derive_seed(cfg.seed, 63, 0))?,
    })
}

/// Classes use disjoint token sets, so SoP and token bags both separate them.
pub fn build_separable(per_class: usize, vocab_size: usize, embed_dim: usize, seed: u64) -> Result<Scenario> {
    if vocab_size < 4 {
        return Err(Error::invalid("separable scenario needs at least 4 tokens"));
    }
    let half = (vocab_size / 2) as u32;
    let pools: [Vec<u32>; 2] = [(half..vocab_size as u32).collect(), (0..half).collect()];
    let mut utts = Vec::with_capacity(2 * per_class);
    for label in [Label::Intended, Label::Unintended] {
        let pool = &pools[label.class_index()];
        for i in 0..per_class {
            let s = derive_seed(seed, 70 + label.class_index() as u64, i as u64);
            let mut r = rng(s);
            let len = r.random_range(3..=6);
            let tokens: Vec<u32> = (0..len).map(|_| *pool.choose(&mut r).expect("pool")).collect();
            let cfg = SynthConfig {
                temperature: 0.7,
                confusion_size: 2,
                seed: s,
                ..SynthConfig::default()
            };
            utts.push(Utterance {
                id: format!("{}-{i:05}", label.as_str()),
                label,
                posteriors: synthesize_posteriors(
                    &tokens,
                    vocab_size,
                    &cfg,
                    &ConfusionSource::Neighbors(own_pool_neighbors(&pools, vocab_size)),
                )?,
                reference: Some(tokens),
            });
        }
    }
    Ok(Scenario {
        vocab_size,
        embeddings: random_embeddings(vocab_size, embed_dim, derive_seed(seed, 72, 0))?,
        split: split_stratified(
            utts,
            SplitRatios {
                train: 0.6,
                validation: 0.2,
                eval: 0.2,
            },
            derive_seed(seed, 73, 0),
        )?,
    })
}

fn own_pool_neighbors(pools: &[Vec<u32>; 2], vocab_size: usize) -> Vec<Vec<u32>> {
    (0..vocab_size as u32)
        .map(|t| {
            let pool = pools.iter().find(|p| p.contains(&t)).expect("token in a pool");
            pool.iter().copied().filter(|&c| c != t).take(2).collect()
        })
        .collect()
}

/// Small-dimension training setup used by the constructed scenarios.
pub fn small_config(mode: Mode, top_n: usize, use_pos_enc: bool, seed: u64) -> A2IConfig {
    A2IConfig {
        mode,
        top_n,
        use_pos_enc,
        acoustic_dim: 16,
        sa_layers: 1,
        heads: 2,
        feed_forward: true,
        ffn_expansion: 4,
        hidden_dim: 16,
        seed,
        optimizer: AdamConfig::with_lr(3e-3),
        batch_size: 16,
        epochs: 40,
        patience: Some(10),
        ..A2IConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posteriors::ClassCounts;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(5, 2, 3), derive_seed(5, 2, 3));
    }

    #[test]
    fn builtin_grammars_sample() {
        let lines = sample_lines(&intended_grammar(), 5, 1);
        assert_eq!(lines.len(), 5);
        assert!(lines.iter().all(|l| !l.contains('{')));
        assert_eq!(lines, sample_lines(&intended_grammar(), 5, 1));
        assert!(!sample_lines(&unintended_grammar(), 3, 2).is_empty());
    }

    #[test]
    fn stratified_split_keeps_both_classes() {
        let s = build_separable(10, 8, 4, 0).unwrap();
        for part in [&s.split.train, &s.split.validation, &s.split.eval] {
            let c = ClassCounts::of(part);
            assert!(c.intended > 0 && c.unintended > 0);
        }
        assert_eq!(s.split.all().count(), 20);
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = SplitRatios {
            train: 0.5,
            validation: 0.2,
            eval: 0.2,
        };
        assert!(r.validate().is_err());
    }

    #[test]
    fn noisy_order_utterances_hide_keys_from_top_one() {
        let tok = OrderTokens::new(24).unwrap();
        let m = order_utterance(&tok, 24, 6, true, true, 0.7, 3).unwrap();
        let top1 = crate::textual::top_n_per_frame(&m, 1, false).unwrap();
        assert!(top1.tokens().all(|t| t != tok.a && t != tok.b));
        let top2 = crate::textual::top_n_per_frame(&m, 2, false).unwrap();
        assert!(top2.tokens().any(|t| t == tok.a) && top2.tokens().any(|t| t == tok.b));
    }
}
