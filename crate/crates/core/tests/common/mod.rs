//! Helpers shared by the integration tests and the acceptance runner:
//! random instance generators, brute-force metric oracles and the
//! finite-difference instances for every layer.

#![allow(dead_code)]

use std::path::Path;

use a2i::acoustic::{sum_of_posteriors, AcousticProjection};
use a2i::cbow::{make_document_pairs, train_cbow, CbowConfig, EmbeddingMatrix, DEFAULT_WINDOW};
use a2i::classifier::{train_a2i, A2IModel, Mode};
use a2i::nn::ops::{
    affine, affine_backward, mean_over_rows, mean_over_rows_backward, relu, relu_backward, softmax_cross_entropy,
    weighted_softmax_cross_entropy,
};
use a2i::nn::{
    grad_check, rng, Encoder, EncoderConfig, FeedForward, GradCheckReport, GradStore, LayerNorm, Linear,
    MultiHeadSelfAttention, ParamStore, Tensor,
};
use a2i::posteriors::synth::{synthesize_posteriors, ConfusionSource, SynthConfig};
use a2i::posteriors::{write_posteriors, Label, PosteriorMatrix, Utterance};
use a2i::scenarios::{
    intended_grammar, mixed_corpus, random_embeddings, sample_lines, small_config, split_stratified, synthesize_lines,
    SplitRatios,
};
use a2i::textual::{top_n_per_frame, TextualEncoder};
use a2i::tokenizer::train_bpe;
use a2i::Execution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Random log-posterior matrix; some rows sharp, some flat.
pub fn random_posteriors(r: &mut impl Rng, frames: usize, classes: usize) -> PosteriorMatrix {
    let mut values = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let scale = if r.random_bool(0.3) { 20.0 } else { 2.0 };
        let z: Vec<f64> = (0..classes).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        values.extend(z.iter().map(|v| v - lse));
    }
    PosteriorMatrix::new(frames, classes, values).unwrap()
}

// ---- metric oracles: O(n) scan per candidate threshold ----

fn rates_at(scores: &[f64], labels: &[Label], t: f64) -> (f64, f64) {
    let (mut fa, mut fr, mut nu, mut ni) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            Label::Unintended => {
                nu += 1.0;
                if s >= t {
                    fa += 1.0;
                }
            }
            Label::Intended => {
                ni += 1.0;
                if s < t {
                    fr += 1.0;
                }
            }
        }
    }
    (fa / nu, fr / ni)
}

fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// Intersection of the FAR/FRR segment path with the diagonal.
pub fn brute_eer(scores: &[f64], labels: &[Label]) -> f64 {
    let pts: Vec<(f64, f64)> = candidate_thresholds(scores)
        .into_iter()
        .map(|t| rates_at(scores, labels, t))
        .collect();
    for w in pts.windows(2) {
        let ((fa0, fr0), (fa1, fr1)) = (w[0], w[1]);
        if fa1 - fr1 == 0.0 {
            return fa1;
        }
        if fa0 - fr0 > 0.0 && fa1 - fr1 < 0.0 {
            return (fa0 * fr1 - fr0 * fa1) / ((fa0 - fr0) - (fa1 - fr1));
        }
    }
    let (fa, fr) = pts[0];
    assert!(fa - fr <= 0.0);
    fa
}

/// FAR at the highest threshold with TPR ≥ target, and that threshold.
pub fn brute_far_at_tpr(scores: &[f64], labels: &[Label], target: f64) -> (f64, f64) {
    let mut best: Option<(f64, f64)> = None;
    for &t in scores {
        let (far, frr) = rates_at(scores, labels, t);
        let ni = labels.iter().filter(|l| **l == Label::Intended).count() as f64;
        let tpr = (ni - frr * ni).round() / ni;
        if tpr >= target && best.is_none_or(|(bt, _)| t > bt) {
            best = Some((t, far));
        }
    }
    let (t, far) = best.expect("lowest score reaches any target");
    (far, t)
}

/// Random scored set with both classes; scores are sometimes quantized to
/// force ties.
pub fn random_scored(r: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<Label>) {
    let n = r.random_range(2..=max_len);
    let quantize = r.random_bool(0.5);
    let shift = r.random_range(-0.3..0.3);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = match i {
            0 => Label::Intended,
            1 => Label::Unintended,
            _ if r.random_bool(0.5) => Label::Intended,
            _ => Label::Unintended,
        };
        let base: f64 = r.random_range(0.0..1.0);
        let mut s = (base + if label == Label::Intended { shift } else { 0.0 }).clamp(0.0, 1.0);
        if quantize {
            s = (s * 20.0).round() / 20.0;
        }
        scores.push(s);
        labels.push(label);
    }
    (scores, labels)
}

// ---- finite-difference instances ----

pub fn check_affine(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&mut r, &[3, 4]), true);
    let w = s.add("w", rand_tensor(&mut r, &[4, 2]), true);
    let b = s.add("b", rand_tensor(&mut r, &[2]), true);
    let c = rand_tensor(&mut r, &[3, 2]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let y = affine(p.value(x), p.value(w), p.value(b)).unwrap();
        if let Some(g) = g {
            let ag = affine_backward(p.value(x), p.value(w), &c).unwrap();
            g.accumulate(x, &ag.dx);
            g.accumulate(w, &ag.dweight);
            g.accumulate(b, &ag.dbias);
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_relu(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    // keep inputs away from the kink
    let vals: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = s.add("x", Tensor::new(vec![3, 4], vals).unwrap(), true);
    let c = rand_tensor(&mut r, &[3, 4]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let y = relu(p.value(x));
        if let Some(g) = g {
            g.accumulate(x, &relu_backward(p.value(x), &c));
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_cross_entropy(seed: u64, weighted: bool) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let mut logits = rand_tensor(&mut r, &[4, 7]);
    logits.scale(3.0);
    let z = s.add("logits", logits, true);
    let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
    let weights: Vec<f64> = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (loss, dz) = if weighted {
            weighted_softmax_cross_entropy(p.value(z), &targets, Some(&weights)).unwrap()
        } else {
            softmax_cross_entropy(p.value(z), &targets).unwrap()
        };
        if let Some(g) = g {
            g.accumulate(z, &dz);
        }
        loss
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_chain(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let l1 = Linear::new(&mut s, "l1", 5, 6, &mut r);
    let l2 = Linear::new(&mut s, "l2", 6, 3, &mut r);
    let x = rand_tensor(&mut r, &[4, 5]);
    let targets = [0, 2, 1, 2];
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let h = l1.forward(p, &x).unwrap();
        let a = relu(&h);
        let z = l2.forward(p, &a).unwrap();
        let (loss, dz) = softmax_cross_entropy(&z, &targets).unwrap();
        if let Some(g) = g {
            let da = l2.backward(p, &a, &dz, g).unwrap();
            l1.backward(p, &x, &relu_backward(&h, &da), g).unwrap();
        }
        loss
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_mean_rows(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&mut r, &[5, 4]), true);
    let c = rand_tensor(&mut r, &[1, 4]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let y = mean_over_rows(p.value(x)).unwrap();
        if let Some(g) = g {
            g.accumulate(x, &mean_over_rows_backward(5, &c));
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

fn randomize(s: &mut ParamStore, r: &mut impl Rng) {
    for p in s.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * r.random_range(-1.0..1.0);
        }
    }
}

pub fn check_layer_norm(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 6);
    randomize(&mut s, &mut r);
    let x = s.add("x", rand_tensor(&mut r, &[3, 6]), true);
    let c = rand_tensor(&mut r, &[3, 6]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, cache) = ln.forward(p, p.value(x));
        if let Some(g) = g {
            let dx = ln.backward(p, &cache, &c, g);
            g.accumulate(x, &dx);
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_feed_forward(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let ffn = FeedForward::new(&mut s, "ffn", 4, 16, &mut r);
    randomize(&mut s, &mut r);
    let x = s.add("x", rand_tensor(&mut r, &[3, 4]), true);
    let c = rand_tensor(&mut r, &[3, 4]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, cache) = ffn.forward(p, p.value(x)).unwrap();
        if let Some(g) = g {
            let dx = ffn.backward(p, &cache, &c, g).unwrap();
            g.accumulate(x, &dx);
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_attention(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let attn = MultiHeadSelfAttention::new(&mut s, "attn", 8, 2, &mut r).unwrap();
    randomize(&mut s, &mut r);
    let x = s.add("x", rand_tensor(&mut r, &[3, 8]), true);
    let c = rand_tensor(&mut r, &[3, 8]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, cache) = attn.forward(p, p.value(x)).unwrap();
        if let Some(g) = g {
            let dx = attn.backward(p, &cache, &c, g).unwrap();
            g.accumulate(x, &dx);
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_encoder(seed: u64, feed_forward: bool) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let cfg = EncoderConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        feed_forward,
        ffn_expansion: 2,
    };
    let enc = Encoder::new(&mut s, "enc", &cfg, &mut r).unwrap();
    randomize(&mut s, &mut r);
    let x = s.add("x", rand_tensor(&mut r, &[4, 8]), true);
    let c = rand_tensor(&mut r, &[4, 8]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, cache) = enc.forward(p, p.value(x)).unwrap();
        if let Some(g) = g {
            let dx = enc.backward(p, &cache, &c, g).unwrap();
            g.accumulate(x, &dx);
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_acoustic(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let proj = AcousticProjection::new(&mut s, 6, 5, true, &mut r);
    randomize(&mut s, &mut r);
    let sop = sum_of_posteriors(&random_posteriors(&mut r, 9, 7)).unwrap();
    let c = rand_tensor(&mut r, &[1, 5]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, input) = proj.forward(p, &sop).unwrap();
        if let Some(g) = g {
            proj.backward(p, &input, &c, g).unwrap();
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

pub fn check_textual(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let table = random_embeddings(6, 8, seed).unwrap();
    let cfg = EncoderConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        feed_forward: true,
        ffn_expansion: 2,
    };
    let tx = TextualEncoder::new(&mut s, &table, &cfg, true, true, &mut r).unwrap();
    randomize(&mut s, &mut r);
    let occ = top_n_per_frame(&random_posteriors(&mut r, 7, 7), 2, false).unwrap();
    let c = rand_tensor(&mut r, &[1, 8]);
    let obj = |p: &ParamStore, g: Option<&mut GradStore>| {
        let (y, cache) = tx.forward(p, &occ).unwrap();
        if let Some(g) = g {
            tx.backward(p, &cache, &c, g).unwrap();
        }
        dot(&y, &c)
    };
    grad_check(&mut s, &obj, GRAD_TOL)
}

/// Class-weighted training loss of a FullA2I model on one small utterance,
/// with the CBOW table trainable so every parameter is covered.
pub fn check_full_model(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let vocab = 8;
    let table = random_embeddings(vocab, 8, seed).unwrap();
    let mut cfg = small_config(Mode::Full, 2, true, seed);
    cfg.acoustic_dim = 6;
    cfg.hidden_dim = 6;
    cfg.sa_layers = 2;
    cfg.ffn_expansion = 2;
    cfg.finetune_cbow = true;
    let mut model = A2IModel::new(&cfg, vocab, Some(&table)).unwrap();
    randomize(model.params_mut(), &mut r);
    let m = random_posteriors(&mut r, 6, vocab + 1);
    let feats = model.features(&m).unwrap();
    let mut store = model.params().clone();
    let obj =
        |p: &ParamStore, g: Option<&mut GradStore>| model.example_loss(p, &feats, Label::Intended, 0.7, g).unwrap();
    grad_check(&mut store, &obj, GRAD_TOL)
}

pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("affine", check_affine(seed)),
        ("relu", check_relu(seed)),
        ("softmax_cross_entropy", check_cross_entropy(seed, false)),
        ("weighted_cross_entropy", check_cross_entropy(seed, true)),
        ("affine_relu_ce_chain", check_chain(seed)),
        ("mean_over_rows", check_mean_rows(seed)),
        ("layer_norm", check_layer_norm(seed)),
        ("feed_forward", check_feed_forward(seed)),
        ("self_attention", check_attention(seed)),
        ("encoder", check_encoder(seed, true)),
        ("encoder_no_ffn", check_encoder(seed, false)),
        ("acoustic_projection", check_acoustic(seed)),
        ("textual_encoder", check_textual(seed)),
        ("full_a2i_loss", check_full_model(seed)),
    ]
}

// ---- a miniature end-to-end pipeline writing every artifact ----

pub const PIPELINE_FILES: [&str; 6] = [
    "vocab.json",
    "embeddings.cbw",
    "train.ctcp",
    "validation.ctcp",
    "eval.ctcp",
    "model.a2i",
];

/// Vocabulary, CBOW, posteriors and a trained FullA2I checkpoint under `dir`.
pub fn run_pipeline(dir: &Path, seed: u64, exec: Execution) {
    let corpus = mixed_corpus(
        &sample_lines(&intended_grammar(), 150, seed),
        &sample_lines(&a2i::scenarios::unintended_grammar(), 150, seed + 1),
    );
    let tok = train_bpe(corpus.iter().map(String::as_str), 120).unwrap();
    tok.save(&dir.join("vocab.json")).unwrap();

    let docs: Vec<Vec<u32>> = corpus.iter().map(|l| tok.encode(l)).collect();
    let cbow_cfg = CbowConfig {
        dim: 8,
        epochs: 2,
        seed,
        ..CbowConfig::default()
    };
    let (cbow, _) = train_cbow(&make_document_pairs(&docs, DEFAULT_WINDOW), tok.vocab_size(), &cbow_cfg).unwrap();
    let emb: EmbeddingMatrix = cbow.embeddings(tok.hash());
    emb.save(&dir.join("embeddings.cbw")).unwrap();

    let source = ConfusionSource::from_embeddings(&emb, 3).unwrap();
    let mk = |label, grammar: &a2i::posteriors::grammar::Grammar, temperature, s| {
        let lines = sample_lines(grammar, 30, s);
        let cfg = SynthConfig {
            temperature,
            seed: s,
            ..SynthConfig::default()
        };
        synthesize_lines(&lines, label, &tok, &cfg, &source, exec).unwrap()
    };
    let mut utts: Vec<Utterance> = mk(Label::Intended, &intended_grammar(), 0.5, seed + 2);
    utts.extend(mk(
        Label::Unintended,
        &a2i::scenarios::unintended_grammar(),
        1.5,
        seed + 3,
    ));
    let split = split_stratified(utts, SplitRatios::default(), seed).unwrap();
    write_posteriors(&split.train, &dir.join("train.ctcp")).unwrap();
    write_posteriors(&split.validation, &dir.join("validation.ctcp")).unwrap();
    write_posteriors(&split.eval, &dir.join("eval.ctcp")).unwrap();

    let mut cfg = small_config(Mode::Full, 2, true, seed);
    cfg.epochs = 3;
    let (model, _) = train_a2i(
        &split.train,
        &split.validation,
        &cfg,
        tok.vocab_size(),
        Some(&emb),
        exec,
    )
    .unwrap();
    model.save(&dir.join("model.a2i")).unwrap();
}

pub fn synth_one(r: &mut ChaCha8Rng, vocab: usize) -> PosteriorMatrix {
    let len = r.random_range(1..6);
    let toks: Vec<u32> = (0..len).map(|_| r.random_range(0..vocab as u32)).collect();
    let cfg = SynthConfig {
        seed: r.random(),
        ..SynthConfig::default()
    };
    synthesize_posteriors(&toks, vocab, &cfg, &ConfusionSource::Uniform).unwrap()
}
