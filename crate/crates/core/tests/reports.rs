mod common;

use a2i::acoustic::{sop_entropy, sum_of_posteriors};
use a2i::classifier::Mode;
use a2i::eval::{entropy_report, run_ablation, token_overlap_report};
use a2i::posteriors::synth::{synthesize_posteriors, ConfusionSource, SynthConfig};
use a2i::posteriors::{Label, Utterance};
use a2i::scenarios::{build_separable, build_standard, small_config, StandardConfig};
use a2i::Execution;

fn utt(label: Label, tokens: &[u32], vocab: usize, seed: u64) -> Utterance {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    Utterance {
        id: format!("{label}-{seed}"),
        label,
        posteriors: synthesize_posteriors(tokens, vocab, &cfg, &ConfusionSource::Uniform).unwrap(),
        reference: None,
    }
}

#[test]
fn entropy_report_with_one_utterance_per_class() {
    let a = utt(Label::Intended, &[1, 2], 6, 1);
    let b = utt(Label::Unintended, &[3], 6, 2);
    let rep = entropy_report(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(
        rep.intended,
        Some(sop_entropy(&sum_of_posteriors(&a.posteriors).unwrap()))
    );
    assert_eq!(
        rep.unintended,
        Some(sop_entropy(&sum_of_posteriors(&b.posteriors).unwrap()))
    );
    assert!(entropy_report(&[]).is_err());
}

#[test]
fn overlap_of_identical_and_disjoint_classes() {
    let vocab = 12;
    let mut same = Vec::new();
    for i in 0..6u64 {
        let toks = [(i % 6) as u32, ((i + 1) % 6) as u32];
        same.push(utt(Label::Intended, &toks, vocab, i));
        same.push(utt(Label::Unintended, &toks, vocab, i));
    }
    let rep = token_overlap_report(&same, 4).unwrap();
    assert_eq!(rep.common, 4);
    assert!(rep.intended_unique.is_empty());

    let mut disjoint = Vec::new();
    for i in 0..6u64 {
        disjoint.push(utt(Label::Intended, &[(i % 6) as u32], vocab, i));
        disjoint.push(utt(Label::Unintended, &[6 + (i % 6) as u32], vocab, i));
    }
    let rep = token_overlap_report(&disjoint, 4).unwrap();
    assert_eq!(rep.common, 0);
    assert_eq!(rep.intended_unique.len(), 4);
}

#[test]
fn grammar_classes_overlap_below_top_k_and_differ_in_entropy() {
    let s = build_standard(
        &StandardConfig {
            per_class: 150,
            corpus_lines: 600,
            vocab_size: 250,
            ..StandardConfig::default()
        },
        Execution::Parallel,
    )
    .unwrap();
    let all: Vec<Utterance> = s.split.all().cloned().collect();
    assert!(token_overlap_report(&all, 100).unwrap().common < 100);
    let e = entropy_report(&all).unwrap();
    assert!(e.unintended.unwrap() > e.intended.unwrap());
}

#[test]
fn ablation_rows_follow_the_grid() {
    let s = build_separable(15, 8, 8, 4).unwrap();
    let quick = |n, pe| {
        let mut c = small_config(Mode::Textual, n, pe, 4);
        c.epochs = 1;
        c
    };
    let one = run_ablation(s.data(), &[quick(1, true)], Execution::Parallel).unwrap();
    assert_eq!(one.rows.len(), 1);
    let grid: Vec<_> = [1, 3, 5, 7]
        .into_iter()
        .flat_map(|n| [true, false].map(|pe| quick(n, pe)))
        .collect();
    let rep = run_ablation(s.data(), &grid, Execution::Parallel).unwrap();
    assert_eq!(rep.rows.len(), 8);
    assert_eq!(rep.rows[2].config.top_n, 3);
    assert_eq!(rep.to_text().lines().count(), 9);
    let json: serde_json::Value = serde_json::from_slice(&rep.to_json().unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
}
