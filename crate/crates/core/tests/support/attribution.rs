//! Random predictors and from-scratch output oracles for attribution tests.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdcase_core::explain::*;

pub fn random_model(pooling: Pooling, link: Link, vocab: usize, dim: usize, seed: u64) -> PredictorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
    let words = (0..vocab).map(|i| format!("w{i}")).collect();
    let emb = (0..vocab * dim).map(|_| r(1.0)).collect();
    let att = (0..dim).map(|_| r(1.0)).collect();
    let w = (0..dim).map(|_| r(1.0)).collect();
    PredictorModel::from_parts(pooling, link, words, emb, att, w, r(0.5)).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> String {
    (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

pub fn target_value(t: Target, z: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    match t {
        Target::Granted => p,
        Target::Denied => 1.0 - p,
        Target::Output => z,
    }
}

/// Target output of the tokens kept, computed from scratch.
pub fn masked_oracle(m: &PredictorModel, t: Target, tokens: &[String], keep: &[bool]) -> f64 {
    let vs: Vec<&[f64]> =
        tokens.iter().zip(keep).filter(|(_, &k)| k).filter_map(|(tok, _)| m.id(tok).map(|i| m.vector(i))).collect();
    target_value(t, m.logit_vectors(&vs))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn determination_corpus(n: usize, seed: u64) -> Vec<(String, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = ["the panel", "the member", "the tribunal", "the board"];
    let objects = ["the claim", "the appeal", "the application"];
    let tails = ["", "for these reasons", "on the evidence", "after the hearing"];
    let deny = ["rejects", "dismisses", "refuses"];
    let grant = ["allows", "accepts", "grants"];
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..2u8);
            let verbs = if y == 1 { &grant } else { &deny };
            let s = format!(
                "{} {} {} {}",
                subjects[rng.random_range(0..subjects.len())],
                verbs[rng.random_range(0..verbs.len())],
                objects[rng.random_range(0..objects.len())],
                tails[rng.random_range(0..tails.len())]
            );
            (s.trim().to_string(), y)
        })
        .collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |b, (i, &x)| if x > xs[b] { i } else { b })
}
