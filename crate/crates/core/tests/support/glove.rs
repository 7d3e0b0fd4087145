//! Flat views of GloVe parameters for finite-difference checks.

use rsdcase_core::embeddings::*;

pub fn flatten(p: &GloveParams) -> Vec<f64> {
    p.as_slices().into_iter().flat_map(|v| v.iter().copied()).collect()
}

pub fn unflatten(x: &[f64], n: usize, dim: usize) -> GloveParams {
    let mut p = GloveParams::zeros(n, dim);
    let mut it = x.iter().copied();
    for v in p.as_slices_mut() {
        v.iter_mut().for_each(|s| *s = it.next().unwrap());
    }
    p
}

pub fn small_config(dim: usize) -> EmbedTrainConfig {
    EmbedTrainConfig { dim, epochs: 60, window: 3, min_count: 1, x_max: 10.0, ..EmbedTrainConfig::default() }
}
