//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribblegate::scribblegen::{ScribbleMap, UNLABELED};

/// Largest relative discrepancy between an analytic gradient and central
/// differences of `f` with step `h`. Entries where both are below `floor`
/// count as agreeing.
pub fn fd_max_rel_error(x: &[f64], analytic: &[f64], h: f64, floor: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}

/// Random positive `c × h × w` array (not normalized).
pub fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.05..1.0))
}

/// Random scribble with roughly half the pixels annotated and at least one.
pub fn random_scribble(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ScribbleMap {
    let mut labels = Array2::from_shape_fn((h, w), |_| if rng.random_bool(0.5) { rng.random_range(0..c as u8) } else { UNLABELED });
    if labels.iter().all(|&v| v == UNLABELED) {
        labels[(0, 0)] = 0;
    }
    ScribbleMap::new(labels, c).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// In-memory synthetic records with skeleton scribbles, normalized and
/// cropped to `size`.
pub fn synthetic_records(n_subjects: usize, per_subject: usize, seed: u64, size: usize) -> Vec<scribblegate::datapipe::Record> {
    use scribblegate::datapipe::{preprocess, Normalization, Record};
    use scribblegate::scribblegen::{synthesize_scribble, ScribbleMethod};
    let records = scribblegate::synthdata::generate_samples(n_subjects, per_subject, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| Record {
            scribbles: vec![synthesize_scribble(&s.mask, ScribbleMethod::Skeleton, 200, i as u64)],
            image: s.image,
            mask: Some(s.mask),
            split_hint: None,
        })
        .collect();
    preprocess(records, Normalization::MedianIqr, Some((size, size))).unwrap()
}

/// A model small enough to train for a few epochs inside a unit test.
pub fn tiny_config() -> scribblegate::config::ExperimentConfig {
    scribblegate::config::ExperimentConfig {
        image_size: 32,
        num_classes: 3,
        depths: 2,
        encoder_filters: vec![4, 8, 8],
        disc_filters: vec![4, 8, 8],
        disc_compress_channels: 2,
        batch_size: 2,
        max_epochs: 3,
        ..Default::default()
    }
}
