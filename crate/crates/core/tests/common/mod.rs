#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boundbench_core::{gaussian_init, Dataset, InitSpec, WeightStack};

pub fn random_stack(p: usize, depth: usize, seed: u64) -> WeightStack {
    gaussian_init(&InitSpec { p, depth, seed }).unwrap()
}

/// `n` unit inputs with alternating labels.
pub fn random_dataset(p: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let labels = (0..n).map(|s| if s % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Dataset::new(p, inputs, labels).unwrap()
}
