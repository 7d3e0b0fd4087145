//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdcase_core::annotate::{AnnotatedSentence, Label, Provenance, Span};

pub mod attribution;
pub mod glove;
pub mod search;

/// Relative error between two gradient vectors, `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + h;
            let up = f(&x);
            x[k] = orig - h;
            let down = f(&x);
            x[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Sentences drawn from topical word groups: words in the same group
/// co-occur, words across groups rarely do.
pub fn topical_corpus(groups: usize, per_group: usize, sentences: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|_| {
            let g = rng.random_range(0..groups);
            (0..len)
                .map(|_| {
                    let g = if rng.random::<f64>() < 0.9 { g } else { rng.random_range(0..groups) };
                    format!("g{g}w{}", rng.random_range(0..per_group))
                })
                .collect()
        })
        .collect()
}

pub const PLANTED: &[(Label, &[&str])] = &[
    (Label::DocEvidence, &["passport", "birth certificate", "medical report", "police summons"]),
    (Label::Determination, &["rejects the claim", "dismisses the claim", "allows the claim"]),
    (Label::Gpe, &["sri lanka", "nigeria", "colombia", "haiti"]),
];

const FILLER: &[&str] = &[
    "the",
    "panel",
    "noted",
    "that",
    "a",
    "was",
    "presented",
    "during",
    "hearing",
    "she",
    "he",
    "said",
    "it",
    "in",
    "of",
    "and",
    "counsel",
    "later",
    "then",
    "with",
    "her",
    "his",
    "member",
    "therefore",
    "however",
    "also",
    "on",
    "date",
    "written",
    "oral",
];

/// Filler sentences with one or two planted label phrases each.
pub fn planted_ner_corpus(n: usize, seed: u64) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut text = String::new();
            let mut spans = Vec::new();
            let planted = 1 + rng.random_range(0..2);
            let push_filler = |text: &mut String, rng: &mut ChaCha8Rng| {
                for _ in 0..rng.random_range(1..4) {
                    if !text.is_empty() {
                        text.push(' ');
                    }
                    text.push_str(FILLER[rng.random_range(0..FILLER.len())]);
                }
            };
            for _ in 0..planted {
                push_filler(&mut text, &mut rng);
                let (label, phrases) = PLANTED[rng.random_range(0..PLANTED.len())];
                let phrase = phrases[rng.random_range(0..phrases.len())];
                text.push(' ');
                let start = text.chars().count();
                text.push_str(phrase);
                spans.push(Span { start, end: start + phrase.chars().count(), label, provenance: Provenance::Gold });
            }
            push_filler(&mut text, &mut rng);
            text.push_str(" .");
            let mut s = AnnotatedSentence::new(format!("doc{}", i / 10), i % 10, text);
            s.spans = spans;
            s
        })
        .collect()
}

/// Every sequence in `k^n`, in lexicographic order.
pub fn all_paths(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.pow(n as u32);
    (0..total).map(move |mut code| {
        let mut p = vec![0; n];
        for slot in p.iter_mut().rev() {
            *slot = code % k;
            code /= k;
        }
        p
    })
}

/// Path score computed directly from the definition.
pub fn score_path(em: &[Vec<f64>], trans: &[Vec<f64>], start: &[f64], path: &[usize]) -> f64 {
    let mut s = start[path[0]];
    for t in 0..path.len() {
        s += em[t][path[t]];
        if t > 0 {
            s += trans[path[t - 1]][path[t]];
        }
    }
    s
}

/// Votes counted from scratch: strict majority of decided labels wins.
pub fn vote_oracle(labels: &[u8]) -> u8 {
    let g = labels.iter().filter(|&&l| l == 1).count();
    let d = labels.iter().filter(|&&l| l == 0).count();
    if g > d {
        1
    } else if d > g {
        0
    } else {
        2
    }
}
