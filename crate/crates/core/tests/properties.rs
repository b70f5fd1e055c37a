mod common;

use std::sync::OnceLock;

use a2i::acoustic::sum_of_posteriors;
use a2i::eval::{eer, far_at_tpr, ScoredSet};
use a2i::nn::{rng, MultiHeadSelfAttention, ParamStore, Tensor};
use a2i::posteriors::Label;
use a2i::scenarios::{intended_grammar, mixed_corpus, random_embeddings, sample_lines, unintended_grammar};
use a2i::textual::{top_n_per_frame, OccurrenceSet, TextualEncoder};
use a2i::tokenizer::{normalize, train_bpe, Tokenizer};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn tokenizer() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let corpus = mixed_corpus(
            &sample_lines(&intended_grammar(), 300, 1),
            &sample_lines(&unintended_grammar(), 300, 2),
        );
        train_bpe(corpus.iter().map(String::as_str), 200).unwrap()
    })
}

fn scored(scores: Vec<u16>, flags: Vec<bool>) -> (Vec<f64>, Vec<Label>) {
    let n = scores.len().min(flags.len());
    let mut labels: Vec<Label> = flags[..n]
        .iter()
        .map(|&f| if f { Label::Intended } else { Label::Unintended })
        .collect();
    labels[0] = Label::Intended;
    labels[1] = Label::Unintended;
    (scores[..n].iter().map(|&s| f64::from(s) / 1000.0).collect(), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizer_round_trip(text in "[a-z ]{0,60}") {
        let tok = tokenizer();
        prop_assert_eq!(tok.decode(&tok.encode(&text)).unwrap(), normalize(&text));
    }

    #[test]
    fn sop_is_normalized_and_order_free(seed in any::<u64>(), frames in 1usize..40, classes in 2usize..30) {
        let mut r = rng(seed);
        let m = common::random_posteriors(&mut r, frames, classes);
        let s = sum_of_posteriors(&m).unwrap();
        let total: f64 = s.values().iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        let mut order: Vec<usize> = (0..frames).collect();
        order.shuffle(&mut r);
        let p = sum_of_posteriors(&m.permuted(&order)).unwrap();
        for (a, b) in s.values().iter().zip(p.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_maps(
        scores in prop::collection::vec(0u16..=1000, 2..200),
        flags in prop::collection::vec(any::<bool>(), 2..200),
    ) {
        let (s, l) = scored(scores, flags);
        let base = ScoredSet::new(s.clone(), l.clone()).unwrap();
        let cubed = ScoredSet::new(s.iter().map(|v| v * v * v).collect(), l.clone()).unwrap();
        let rooted = ScoredSet::new(s.iter().map(|v| v.sqrt()).collect(), l).unwrap();
        let e = eer(&base).unwrap().rate;
        let f = far_at_tpr(&base, 0.9).unwrap().far;
        for other in [&cubed, &rooted] {
            prop_assert!((eer(other).unwrap().rate - e).abs() < 1e-12);
            prop_assert_eq!(far_at_tpr(other, 0.9).unwrap().far, f);
        }
    }

    #[test]
    fn eer_symmetric_under_label_swap(
        scores in prop::collection::vec(0u16..=1000, 2..200),
        flags in prop::collection::vec(any::<bool>(), 2..200),
    ) {
        let (s, l) = scored(scores, flags);
        let swapped: Vec<Label> = l
            .iter()
            .map(|x| match x { Label::Intended => Label::Unintended, Label::Unintended => Label::Intended })
            .collect();
        let a = eer(&ScoredSet::new(s.clone(), l).unwrap()).unwrap().rate;
        let b = eer(&ScoredSet::new(s.iter().map(|v| 1.0 - v).collect(), swapped).unwrap()).unwrap().rate;
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn top_n_coverage_grows_with_n(seed in any::<u64>(), frames in 1usize..20, classes in 3usize..12) {
        let mut r = rng(seed);
        let m = common::random_posteriors(&mut r, frames, classes);
        let mut prev: Option<OccurrenceSet> = None;
        for n in 1..classes {
            let cur = top_n_per_frame(&m, n, false).unwrap();
            if let Some(p) = &prev {
                for occ in &p.occurrences {
                    let bigger = cur.occurrences.iter().find(|o| o.token == occ.token);
                    prop_assert!(bigger.is_some_and(|b| occ.frames.iter().all(|f| b.frames.contains(f))));
                }
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn attention_is_row_permutation_equivariant(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let attn = MultiHeadSelfAttention::new(&mut s, "attn", 8, 2, &mut r).unwrap();
        let x = common::rand_tensor(&mut r, &[k, 8]);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut r);
        let permute = |t: &Tensor| {
            Tensor::from_rows(&order.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let (y, _) = attn.forward(&s, &x).unwrap();
        let (yp, _) = attn.forward(&s, &permute(&x)).unwrap();
        for (a, b) in permute(&y).data().iter().zip(yp.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn textual_embedding_ignores_occurrence_order(seed in any::<u64>(), n in 1usize..4) {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let table = random_embeddings(9, 8, seed).unwrap();
        let cfg = a2i::nn::EncoderConfig { dim: 8, heads: 2, layers: 2, feed_forward: true, ffn_expansion: 4 };
        let tx = TextualEncoder::new(&mut s, &table, &cfg, true, false, &mut r).unwrap();
        let set = top_n_per_frame(&common::random_posteriors(&mut r, 10, 10), n, false).unwrap();
        let mut shuffled = set.clone();
        shuffled.occurrences.shuffle(&mut r);
        let (a, _) = tx.forward(&s, &set).unwrap();
        let (b, _) = tx.forward(&s, &shuffled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
