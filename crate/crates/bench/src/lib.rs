//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;

use chain_core::retrieval::CodeBook;
use chain_core::rng::rng_for;

/// A codebook of `n` random `bits`-bit codes over `classes` labels.
pub fn random_codebook(n: usize, bits: usize, classes: u32, seed: u64) -> CodeBook {
    let mut rng = rng_for(seed, &[]);
    let mut book = CodeBook::new(bits);
    for i in 0..n {
        let signs: Vec<f64> = (0..bits)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        book.push(format!("b{i:06}"), rng.random_range(0..classes), &signs)
            .expect("bit count matches");
    }
    book
}

/// Uniform points in [-1, 1)^d.
pub fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, &[]);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}
