mod support;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdcase_core::embeddings::*;
use support::glove::{flatten, small_config, unflatten};
use support::{numeric_gradient, relative_error, topical_corpus};

#[test]
fn gradient_matches_finite_differences() {
    let corpus = topical_corpus(3, 4, 40, 8, 11);
    let cooc = build_cooccurrence(&corpus, 3, 1).unwrap();
    let dim = 4;
    let mut init = EmbeddingTable::new(dim);
    init.insert(&cooc.vocab[0], &[0.3, -0.1, 0.2, 0.05], 0.0).unwrap();
    init.insert(&cooc.vocab[3], &[-0.2, 0.4, 0.0, 0.1], 0.0).unwrap();
    let cfg = EmbedTrainConfig { mu: 0.7, ..small_config(dim) };
    let objective = GloveObjective::new(&cooc, Some(&init), &cfg).unwrap();
    let n = cooc.vocab.len();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x: Vec<f64> = (0..(2 * n * dim + 2 * n)).map(|_| rng.random::<f64>() - 0.5).collect();
        let (_, g) = objective.gradient(&unflatten(&x, n, dim));
        let fd = numeric_gradient(&x, 1e-5, |y| objective.loss(&unflatten(y, n, dim)));
        let err = relative_error(&flatten(&g), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn loss_decreases_on_fifty_word_corpus() {
    let corpus = topical_corpus(5, 10, 400, 10, 3);
    let cooc = build_cooccurrence(&corpus, 3, 1).unwrap();
    assert_eq!(cooc.vocab.len(), 50);
    let out = train_embeddings(&cooc, None, &small_config(10)).unwrap();
    assert!(out.loss_history.last().unwrap() < &out.loss_history[0]);
    assert!(out.table.is_finite());
}

#[test]
fn disjoint_init_with_mu_zero_is_plain_glove() {
    let corpus = topical_corpus(3, 5, 100, 8, 4);
    let cooc = build_cooccurrence(&corpus, 3, 1).unwrap();
    let mut init = EmbeddingTable::new(6);
    init.insert("unrelated", &[1.0; 6], 0.0).unwrap();
    let cfg = small_config(6);
    let a = train_embeddings(&cooc, None, &cfg).unwrap();
    let b = train_embeddings(&cooc, Some(&init), &cfg).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.table, b.table);
}

#[test]
fn large_mu_pins_overlapping_vectors() {
    let corpus = topical_corpus(4, 6, 300, 8, 8);
    let cooc = build_cooccurrence(&corpus, 3, 1).unwrap();
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = EmbeddingTable::new(dim);
    for w in cooc.vocab.iter().step_by(3) {
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        init.insert(w, &v, 0.0).unwrap();
    }
    let cfg = EmbedTrainConfig { mu: 1e6, ..small_config(dim) };
    let out = train_embeddings(&cooc, Some(&init), &cfg).unwrap();
    for w in init.words() {
        let r = init.get(w).unwrap();
        let v = out.table.get(w).unwrap();
        let d = r.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 0.05, "{w}: distance {d}");
    }
}

#[test]
fn nine_hundred_seventy_words_in_fifty_dimensions() {
    let corpus = topical_corpus(97, 10, 4000, 12, 21);
    let cooc = build_cooccurrence(&corpus, 5, 5).unwrap();
    assert_eq!(cooc.vocab.len(), 970);
    let cfg = EmbedTrainConfig { epochs: 3, ..EmbedTrainConfig::default() };
    let out = train_embeddings(&cooc, None, &cfg).unwrap();
    assert_eq!(out.table.len(), 970);
    assert_eq!(out.table.dim, 50);
    assert!(out.table.is_finite());
}

#[test]
fn planted_groups_are_neighbors() {
    let corpus = topical_corpus(4, 5, 600, 10, 13);
    let cooc = build_cooccurrence(&corpus, 4, 1).unwrap();
    let cfg = EmbedTrainConfig { epochs: 150, ..small_config(10) };
    let out = train_embeddings(&cooc, None, &cfg).unwrap();
    let nn = nearest_neighbors(&out.table, "g0w0", 4).unwrap();
    let same = nn.iter().filter(|(w, _)| w.starts_with("g0")).count();
    assert!(same >= 3, "{nn:?}");
}

#[test]
fn training_is_deterministic() {
    let corpus = topical_corpus(3, 5, 80, 8, 2);
    let cooc = build_cooccurrence(&corpus, 3, 1).unwrap();
    let cfg = small_config(5);
    let a = train_embeddings(&cooc, None, &cfg).unwrap();
    let b = train_embeddings(&cooc, None, &cfg).unwrap();
    assert_eq!(a.table.to_text(), b.table.to_text());
}
