use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use s2s_core::corpus::{
    generate_sarcasm_corpus, load_corpus, negative_situations, positive_verbs, save_corpus, Corpus,
    ExchangePair,
};
use s2s_core::model::{entropy, greedy_token, sample_token, sampling_distribution};
use s2s_core::tensor::{masked_cross_entropy, matmul, softmax, Tensor2};
use s2s_core::text::{normalize_tokenize, Role, Vocab, EOS, SOS, UNK};
use s2s_core::trainer::clip_gradients;
use s2s_core::model::{init_model, loss_and_grads, Hyper, ModelGrads, ModelParams};

fn logits_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..max_len)
}

fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-3.0f32..3.0, rows * cols)
        .prop_map(move |d| Tensor2::from_vec(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(l in logits_strategy(40)) {
        let p = softmax(&l).unwrap();
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn softmax_shift_invariant(l in logits_strategy(40), c in -500.0f64..500.0) {
        let a = softmax(&l).unwrap();
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_associative(
        a in tensor_strategy(3, 4),
        b in tensor_strategy(4, 2),
        c in tensor_strategy(2, 5),
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-3 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn masked_rows_do_not_matter(
        logits in tensor_strategy(4, 6),
        noise in tensor_strategy(4, 6),
        targets in prop::collection::vec(0u32..6, 4),
        mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let mut other = logits.clone();
        for r in 0..4 {
            if !mask[r] {
                other.row_mut(r).copy_from_slice(noise.row(r));
            }
        }
        let (la, ga) = masked_cross_entropy(&logits, &targets, &mask).unwrap();
        let (lb, gb) = masked_cross_entropy(&other, &targets, &mask).unwrap();
        prop_assert!((la - lb).abs() < 1e-12);
        prop_assert_eq!(&ga, &gb);
        for r in 0..4 {
            if !mask[r] {
                prop_assert!(ga.row(r).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn vocab_round_trip(words in prop::collection::vec("[a-z]{1,8}", 1..12)) {
        let text = words.join(" ");
        let corpus = Corpus::new(vec![ExchangePair::new(text.clone(), "ok")], "prop");
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let ids = vocab.encode_text(&text, Role::Target, 64);
        prop_assert_eq!(ids[0], SOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert!(!ids.contains(&UNK));
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }

    #[test]
    fn corpus_save_load_round_trip(
        pairs in prop::collection::vec(("[ -~]{1,30}", "[ -~]{1,30}"), 1..10)
    ) {
        let pairs: Vec<ExchangePair> = pairs
            .into_iter()
            .filter(|(q, a)| !q.trim().is_empty() && !a.trim().is_empty())
            .map(|(q, a)| ExchangePair::new(q, a))
            .collect();
        prop_assume!(!pairs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = Corpus::new(pairs, "prop");
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        prop_assert_eq!(back.pairs, corpus.pairs);
    }

    #[test]
    fn generator_is_deterministic(n in 1usize..80, seed in any::<u64>()) {
        let a = generate_sarcasm_corpus(n, seed).unwrap();
        let b = generate_sarcasm_corpus(n, seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn argmax_invariant_under_temperature(l in logits_strategy(30), t in 0.05f64..5.0) {
        prop_assume!(l.len() > 3);
        let p = sampling_distribution(&l, t).unwrap();
        let best = p
            .iter()
            .enumerate()
            .fold(0, |b, (i, &x)| if x > p[b] { i } else { b });
        prop_assert_eq!(best as u32, greedy_token(&l));
    }

    #[test]
    fn clipping_preserves_direction(seed in any::<u64>(), clip in 0.01f64..2.0) {
        let mut m = tiny_model(seed);
        // exaggerate so clipping actually triggers
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 20.0);
        }
        let src = [4u32, 5, EOS];
        let tgt = [SOS, 6, 7, EOS];
        let (_, g) = loss_and_grads(&m, &[(&src, &tgt)]).unwrap();
        let mut clipped = g.clone();
        let before = clip_gradients(&mut clipped, clip).unwrap();
        prop_assert!((before - g.global_norm()).abs() < 1e-9 * (1.0 + before));
        prop_assert!(clipped.global_norm() <= clip * (1.0 + 1e-9));
        if before > 0.0 {
            prop_assert!(cosine(&g, &clipped) > 1.0 - 1e-9);
        }
    }
}

fn tiny_model(seed: u64) -> ModelParams {
    let vocab = Vocab::from_tokens(
        ["<pad>", "<sos>", "<eos>", "<unk>", "a", "b", "c", "d"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
    .unwrap();
    init_model(&vocab, 4, 5, seed, None).unwrap()
}

fn cosine(a: &ModelGrads, b: &ModelGrads) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (p, q) in x.iter().zip(y) {
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[test]
fn generated_corpus_shape() {
    let corpus = generate_sarcasm_corpus(300, 42).unwrap();
    assert_eq!(corpus.len(), 300);
    let verbs = positive_verbs().join("|");
    let re = Regex::new(&format!("^({verbs}) (.+)$")).unwrap();
    let situations = negative_situations();
    let sarcastic = corpus
        .pairs
        .iter()
        .filter(|p| {
            re.captures(&p.answer)
                .map(|c| situations.contains(&&c[2]))
                .unwrap_or(false)
        })
        .count();
    assert!(sarcastic * 10 >= 300 * 7, "only {sarcastic} sarcastic pairs");

    let mut unique = std::collections::HashSet::new();
    for p in &corpus.pairs {
        unique.extend(normalize_tokenize(&p.question));
        unique.extend(normalize_tokenize(&p.answer));
    }
    assert!(unique.len() <= 800, "{} unique tokens", unique.len());
}

#[test]
fn seeds_change_the_corpus() {
    let a = generate_sarcasm_corpus(50, 1).unwrap();
    let b = generate_sarcasm_corpus(50, 2).unwrap();
    assert_ne!(a.pairs, b.pairs);
}

#[test]
fn zero_pairs_is_an_error() {
    assert!(generate_sarcasm_corpus(0, 1).is_err());
}

#[test]
fn near_zero_temperature_matches_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let v = rng.gen_range(5..60);
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let greedy = greedy_token(&logits);
        for draw in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(draw);
            assert_eq!(sample_token(&logits, 1e-6, &mut r).unwrap(), greedy);
        }
    }
}

#[test]
fn entropy_grows_with_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let hs: Vec<f64> = [0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|&t| entropy(&sampling_distribution(&logits, t).unwrap()))
            .collect();
        for w in hs.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{hs:?}");
        }
    }
}

#[test]
fn hyper_shapes_are_consistent() {
    let m = ModelParams::zeros(Hyper {
        vocab_size: 9,
        embed_dim: 3,
        hidden_dim: 4,
        max_seq_len: 30,
    });
    let g = ModelGrads::zeros_like(&m);
    for (i, t) in m.tensors().iter().enumerate() {
        assert_eq!(g.shape(i), t.shape());
    }
}
