mod support;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdcase_core::embeddings::EmbeddingTable;
use rsdcase_core::explain::*;
use support::attribution::*;
use support::{numeric_gradient, relative_error};

fn outcome_corpus(n: usize, seed: u64) -> Vec<(String, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler =
        ["the", "panel", "member", "claim", "claimant", "hearing", "evidence", "reasons", "for", "these", "is"];
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..2u8);
            let mut words: Vec<&str> =
                (0..rng.random_range(3..9)).map(|_| filler[rng.random_range(0..filler.len())]).collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, if y == 1 { "granted" } else { "denied" });
            (words.join(" "), y)
        })
        .collect()
}

#[test]
fn separable_cue_is_learned() {
    let data = outcome_corpus(300, 1);
    let (train, test) = data.split_at(240);
    let m = train_predictor(train, &PredictorTrainConfig::default(), None).unwrap();
    let eval = m.evaluate(test).unwrap();
    assert!(eval.accuracy >= 0.95, "{eval:?}");
    let back = PredictorModel::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn training_is_deterministic() {
    let data = outcome_corpus(60, 2);
    let cfg = PredictorTrainConfig { epochs: 5, ..Default::default() };
    let a = train_predictor(&data, &cfg, None).unwrap();
    let b = train_predictor(&data, &cfg, None).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn pretrained_vectors_seed_the_table() {
    let data = outcome_corpus(40, 3);
    let mut table = EmbeddingTable::new(50);
    table.insert("granted", &[0.5; 50], 0.0).unwrap();
    table.insert("panel", &[-0.5; 50], 0.0).unwrap();
    let cfg = PredictorTrainConfig { epochs: 1, ..Default::default() };
    let m = train_predictor(&data, &cfg, Some(&table)).unwrap();
    assert_eq!(m.meta.as_ref().unwrap().pretrained_rows, 2);
}

#[test]
fn vector_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, pooling) in [Pooling::Attention, Pooling::Mean, Pooling::Sum, Pooling::Attention, Pooling::Attention]
        .into_iter()
        .enumerate()
    {
        let m = random_model(pooling, Link::Logistic, 12, 6, k as u64);
        let len = rng.random_range(1..7);
        let flat: Vec<f64> = (0..len * 6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let f = |x: &[f64]| {
            let vs: Vec<&[f64]> = x.chunks(6).collect();
            m.logit_vectors(&vs)
        };
        let vs: Vec<&[f64]> = flat.chunks(6).collect();
        let (_, g) = m.logit_grad_vectors(&vs);
        let g: Vec<f64> = g.concat();
        let fd = numeric_gradient(&flat, 1e-6, f);
        assert!(relative_error(&g, &fd) < 1e-4, "{pooling:?}");
    }
}

#[test]
fn gradient_methods_match_numeric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..5 {
        let m = random_model(Pooling::Attention, Link::Logistic, 10, 5, 100 + k);
        let input = random_input(&mut rng, 10, 5);
        let tokens = predictor_tokens(&input);
        let g = attrib_gradient(&m, &input);
        let gxi = attrib_grad_input(&m, &input);
        let t = g.meta.target;
        let flat: Vec<f64> = tokens.iter().flat_map(|w| m.vector(m.id(w).unwrap()).to_vec()).collect();
        let fd = numeric_gradient(&flat, 1e-6, |x| {
            let vs: Vec<&[f64]> = x.chunks(5).collect();
            target_value(t, m.logit_vectors(&vs))
        });
        let norms: Vec<f64> = fd.chunks(5).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let dots: Vec<f64> =
            fd.chunks(5).zip(flat.chunks(5)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect();
        assert!(relative_error(&g.weights, &norms) < 1e-4);
        assert!(relative_error(&gxi.weights, &dots) < 1e-4);
    }
}

#[test]
fn zero_vector_gets_zero_gradient_x_input() {
    let mut m = random_model(Pooling::Attention, Link::Logistic, 4, 3, 6);
    let i = m.id("w2").unwrap();
    m.embeddings[i * 3..i * 3 + 3].fill(0.0);
    let a = attrib_grad_input(&m, "w0 w2 w1");
    assert_eq!(a.weights[1], 0.0);
    assert!(a.weights[0] != 0.0);
}

#[test]
fn identical_tokens_get_identical_gradient_weights() {
    let m = random_model(Pooling::Attention, Link::Logistic, 6, 4, 7);
    let cfg = ExplainConfig::default();
    for a in [
        attrib_gradient(&m, "w1 w3 w1 w4"),
        attrib_grad_input(&m, "w1 w3 w1 w4"),
        attrib_integrated_gradients(&m, "w1 w3 w1 w4", &cfg),
    ] {
        assert!((a.weights[0] - a.weights[2]).abs() < 1e-12, "{a:?}");
    }
}

#[test]
fn integrated_gradients_completeness() {
    let cfg = ExplainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..10 {
        let m = random_model(Pooling::Attention, Link::Logistic, 15, 8, 200 + k);
        let len = rng.random_range(1..12);
        let input = random_input(&mut rng, 15, len);
        let a = attrib_integrated_gradients(&m, &input, &cfg);
        let tokens = predictor_tokens(&input);
        let n = tokens.len();
        // Baseline: every token present with a zero vector.
        let zeros = vec![vec![0.0; 8]; n];
        let refs: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
        let base = target_value(a.meta.target, m.logit_vectors(&refs));
        let full = masked_oracle(&m, a.meta.target, &tokens, &vec![true; n]);
        let sum: f64 = a.weights.iter().sum();
        assert!((sum - (full - base)).abs() < 1e-3, "{sum} vs {}", full - base);
    }
}

#[test]
fn integrated_gradients_at_baseline_is_zero() {
    let mut m = random_model(Pooling::Attention, Link::Logistic, 3, 4, 9);
    m.embeddings.fill(0.0);
    let a = attrib_integrated_gradients(&m, "w0 w1 w2", &ExplainConfig::default());
    assert!(a.weights.iter().all(|&w| w == 0.0));
}

#[test]
fn linear_model_methods_coincide() {
    let m = random_model(Pooling::Sum, Link::Identity, 10, 5, 10);
    let cfg = ExplainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let input = random_input(&mut rng, 10, 7);
        let tokens = predictor_tokens(&input);
        let truth: Vec<f64> = tokens
            .iter()
            .map(|t| {
                let v = m.vector(m.id(t).unwrap());
                m.weights.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect();
        let gxi = attrib_grad_input(&m, &input);
        let ig = attrib_integrated_gradients(&m, &input, &cfg);
        let shap = attrib_partition_shap(&m, &input, &cfg);
        for (i, t) in truth.iter().enumerate() {
            assert!((gxi.weights[i] - t).abs() < 1e-6);
            assert!((ig.weights[i] - t).abs() < 1e-6);
            assert!((shap.weights[i] - t).abs() < 1e-6);
        }
        let lime = attrib_lime(&m, &input, &cfg);
        assert!(pearson(&lime.weights, &truth) > 0.99);
    }
}

#[test]
fn lime_single_token_two_point_oracle() {
    let m = random_model(Pooling::Attention, Link::Logistic, 5, 4, 12);
    for w in ["w0", "w1", "w2", "w3", "w4"] {
        let a = attrib_lime(&m, w, &ExplainConfig::default());
        let tokens = predictor_tokens(w);
        let diff =
            masked_oracle(&m, a.meta.target, &tokens, &[true]) - masked_oracle(&m, a.meta.target, &tokens, &[false]);
        assert!((a.weights[0] - diff).abs() < 0.05, "{} vs {diff}", a.weights[0]);
    }
}

#[test]
fn lime_is_reproducible() {
    let m = random_model(Pooling::Attention, Link::Logistic, 8, 4, 13);
    let cfg = ExplainConfig::default();
    assert_eq!(attrib_lime(&m, "w1 w2 w3 w4", &cfg), attrib_lime(&m, "w1 w2 w3 w4", &cfg));
    let other = ExplainConfig { seed: 7, ..cfg.clone() };
    assert_ne!(attrib_lime(&m, "w1 w2 w3 w4", &cfg).weights, attrib_lime(&m, "w1 w2 w3 w4", &other).weights);
}

/// Owen values by definition: every sibling group along the path to the
/// token is either fully present or fully absent, all with equal weight.
fn owen_oracle(m: &PredictorModel, t: Target, tokens: &[String]) -> Vec<f64> {
    let n = tokens.len();
    (0..n)
        .map(|i| {
            let mut siblings = Vec::new();
            let (mut lo, mut hi) = (0, n);
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if i < mid {
                    siblings.push((mid, hi));
                    hi = mid;
                } else {
                    siblings.push((lo, mid));
                    lo = mid;
                }
            }
            let k = siblings.len();
            let mut total = 0.0;
            for choice in 0..(1usize << k) {
                let mut keep = vec![false; n];
                for (b, &(a, z)) in siblings.iter().enumerate() {
                    if choice >> b & 1 == 1 {
                        keep[a..z].iter_mut().for_each(|x| *x = true);
                    }
                }
                let without = masked_oracle(m, t, tokens, &keep);
                keep[i] = true;
                total += masked_oracle(m, t, tokens, &keep) - without;
            }
            total / (1usize << k) as f64
        })
        .collect()
}

#[test]
fn partition_shap_matches_definition_and_efficiency() {
    let cfg = ExplainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for k in 0..20 {
        let m = random_model(Pooling::Attention, Link::Logistic, 20, 6, 300 + k);
        let len = rng.random_range(1..=16);
        let input = random_input(&mut rng, 20, len);
        let tokens = predictor_tokens(&input);
        let a = attrib_partition_shap(&m, &input, &cfg);
        assert_eq!(a.meta.exact, Some(true));
        let oracle = owen_oracle(&m, a.meta.target, &tokens);
        for (x, y) in a.weights.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9);
        }
        let full = masked_oracle(&m, a.meta.target, &tokens, &vec![true; len]);
        let empty = masked_oracle(&m, a.meta.target, &tokens, &vec![false; len]);
        assert!((a.weights.iter().sum::<f64>() - (full - empty)).abs() < 1e-6);
    }
}

#[test]
fn partition_shap_long_inputs_keep_efficiency() {
    let m = random_model(Pooling::Attention, Link::Logistic, 30, 6, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let input = random_input(&mut rng, 30, 120);
    let tokens = predictor_tokens(&input);
    let a = attrib_partition_shap(&m, &input, &ExplainConfig::default());
    assert_eq!(a.meta.exact, Some(false));
    let full = masked_oracle(&m, a.meta.target, &tokens, &[true; 120]);
    let empty = masked_oracle(&m, a.meta.target, &tokens, &[false; 120]);
    assert!((a.weights.iter().sum::<f64>() - (full - empty)).abs() < 1e-9);
    assert!(a.weights.iter().all(|w| w.is_finite()));
}

#[test]
fn determination_sentence_peaks_on_the_verb() {
    let m = train_predictor(&determination_corpus(400, 16), &PredictorTrainConfig::default(), None).unwrap();
    let input = "the panel rejects the claim";
    assert!(m.predict(input) < 0.5);
    let table = attribution_table(&m, input, &Method::ALL, &ExplainConfig::default()).unwrap();
    assert_eq!(table.rows.len(), 5);
    for row in &table.rows {
        assert_eq!(row.weights.len(), 5);
        assert_eq!(argmax(&row.weights), 2, "{}\n{}", row.name, table.to_text());
    }
}

#[test]
fn table_renderings_agree() {
    let m = random_model(Pooling::Attention, Link::Logistic, 6, 4, 17);
    let cfg = ExplainConfig::default();
    let table = attribution_table(&m, "w0 w1 w2 w3 w4", &Method::ALL, &cfg).unwrap();
    let back: AttributionTable = serde_json::from_str(&table.to_json()).unwrap();
    assert_eq!(back, table);
    let text = table.to_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 + 5);
    for (row, line) in table.rows.iter().zip(&lines[2..]) {
        let vals: Vec<f64> = line[row.name.len()..].split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals, row.weights);
    }
    let empty = attribution_table(&m, "w0 w1", &[], &cfg).unwrap();
    assert!(empty.rows.is_empty());
    assert_eq!(empty.to_text().lines().count(), 2);
}
